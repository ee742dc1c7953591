"""Generalized scheduled unfreezing.

At every step ``i`` with ``i % k == 0 and i <= k * L`` the scheduler is asked
which layers to add to the trainable set. The set only grows; the head is
trainable throughout. Each scheduler family differs only in its selection rule.
"""

from __future__ import annotations

import json
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from funfreeze.errors import ConfigError, ContractError, ScheduleError
from funfreeze.fisher import FisherProbeConfig

KINDS = ("Standard", "GU", "ReverseGU", "LPFT", "Random", "Fixed", "FUN")

# frozen layer indices -> trace per layer
Probe = Callable[[list[int]], dict[int, float]]


@dataclass(frozen=True)
class SchedulerKind:
    tag: str
    seed: int = 0
    permutation: tuple[int, ...] | None = None
    probe: FisherProbeConfig | None = None

    def __post_init__(self):
        if self.tag not in KINDS:
            raise ConfigError(f"unknown scheduler {self.tag!r}; expected one of {KINDS}")
        if self.tag == "Fixed" and self.permutation is None:
            raise ConfigError("Fixed scheduler needs a permutation")

    @classmethod
    def fixed(cls, permutation: Sequence[int]) -> SchedulerKind:
        return cls("Fixed", permutation=tuple(int(j) for j in permutation))

    @classmethod
    def fun(cls, probe: FisherProbeConfig | None = None) -> SchedulerKind:
        return cls("FUN", probe=probe or FisherProbeConfig())

    def check(self, n_layers: int) -> None:
        if self.tag == "Fixed" and sorted(self.permutation) != list(range(n_layers)):
            raise ConfigError(f"Fixed schedule {list(self.permutation)} is not a permutation of 0..{n_layers - 1}")

    @property
    def label(self) -> str:
        if self.tag == "Random":
            return f"Random(seed={self.seed})"
        if self.tag == "Fixed":
            return "Fixed(" + ",".join(map(str, self.permutation)) + ")"
        return self.tag


@dataclass
class UnfreezeEvent:
    step: int
    layers: tuple[int, ...]
    trace_snapshot: dict[int, float] | None = None


@dataclass
class ScheduleState:
    L: int
    k: int
    N: int
    step: int = -1
    unfrozen: set[int] = field(default_factory=set)
    events: list[UnfreezeEvent] = field(default_factory=list)

    @property
    def frozen(self) -> list[int]:
        return [j for j in range(self.L) if j not in self.unfrozen]


def validate_budget(k: int, L: int, N: int) -> str:
    """``"error"`` if ``k * L > N``, ``"warning"`` if ``k * L > N / 2``, else ``"ok"``."""
    if k <= 0 or L <= 0 or N <= 0:
        raise ConfigError(f"k, L, N must be positive (k={k}, L={L}, N={N})")
    if k * L > N:
        return "error"
    if k * L > N / 2:
        return "warning"
    return "ok"


def guard(state: ScheduleState, step: int) -> bool:
    return step % state.k == 0 and step <= state.k * state.L


def argmax_layer(traces: dict[int, float]) -> int:
    """Layer with the largest trace; ties go to the higher index."""
    return max(traces.items(), key=lambda kv: (kv[1], kv[0]))[0]


def select_next(
    kind: SchedulerKind,
    state: ScheduleState,
    step: int,
    rng: np.random.Generator,
    probe: Probe | None = None,
) -> tuple[set[int], dict[int, float] | None]:
    """Layers to unfreeze at ``step`` and, for FUN, the traces that drove the choice."""
    if not guard(state, step):
        raise ContractError(f"select_next called at step {step}, outside the unfreeze guard (k={state.k})")
    n_events = len(state.events)
    L = state.L
    tag = kind.tag
    if tag == "Standard":
        return (set(range(L)) if step == 0 else set()), None
    if tag == "LPFT":
        return (set(range(L)) if step >= state.k and not state.unfrozen else set()), None
    remaining = state.frozen
    if not remaining:
        return set(), None
    if tag == "GU":
        return {L - 1 - n_events}, None
    if tag == "ReverseGU":
        return {n_events}, None
    if tag == "Fixed":
        return {kind.permutation[n_events]}, None
    if tag == "Random":
        return {remaining[int(rng.integers(len(remaining)))]}, None
    # FUN
    if probe is None:
        raise ScheduleError("FUN needs a Fisher probe")
    try:
        traces = probe(list(remaining))
    except Exception as e:
        raise ScheduleError(f"Fisher probe failed at step {step}: {e}") from e
    traces = {j: float(traces[j]) for j in remaining}
    return {argmax_layer(traces)}, traces


class UnfreezeSchedule:
    """Single-run state machine; call ``advance`` once per training step."""

    def __init__(self, kind: SchedulerKind, L: int, k: int, N: int):
        kind.check(L)
        self.kind = kind
        self.state = ScheduleState(L, k, N)
        self.rng = np.random.default_rng(kind.seed)

    def advance(self, step: int, probe: Probe | None = None) -> UnfreezeEvent | None:
        state = self.state
        if step == state.step:
            return None
        if step != state.step + 1:
            raise ContractError(f"advance expects step {state.step + 1}, got {step}")
        state.step = step
        if not guard(state, step) or len(state.unfrozen) == state.L:
            return None
        layers, snapshot = select_next(self.kind, state, step, self.rng, probe)
        if not layers:
            return None
        event = UnfreezeEvent(step, tuple(sorted(layers)), snapshot)
        state.unfrozen |= layers
        state.events.append(event)
        return event

    @property
    def unfrozen(self) -> set[int]:
        return self.state.unfrozen


def resolve(kind: SchedulerKind, L: int, k: int, N: int) -> list[UnfreezeEvent]:
    """Full event list for a data-independent scheduler (anything but FUN)."""
    if kind.tag == "FUN":
        raise ScheduleError("FUN schedules depend on training data and cannot be resolved ahead of time")
    sched = UnfreezeSchedule(kind, L, k, N)
    for step in range(min(N, k * L + 1)):
        sched.advance(step)
    return sched.state.events


def sample_constrained_permutation(L: int, rng: np.random.Generator) -> list[int]:
    """Top layer first, then L-2 or L-3, rest uniform; drawn by rejection."""
    if L < 3:
        raise ConfigError("constrained permutations need L >= 3")
    while True:
        perm = [L - 1] + [int(j) for j in rng.permutation(L - 1)]
        if perm[1] in (L - 2, L - 3):
            return perm


def event_record(event: UnfreezeEvent, scheduler: str) -> dict:
    rec = {"step": event.step, "layers": list(event.layers), "scheduler": scheduler}
    if event.trace_snapshot is not None:
        rec["trace_snapshot"] = {str(j): t for j, t in sorted(event.trace_snapshot.items())}
    return rec


def write_schedule_log(events: Sequence[UnfreezeEvent], scheduler: str, path) -> None:
    with open(path, "w") as fh:
        for e in events:
            fh.write(json.dumps(event_record(e, scheduler), sort_keys=True) + "\n")


def read_schedule_log(path) -> list[UnfreezeEvent]:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            snap = rec.get("trace_snapshot")
            out.append(
                UnfreezeEvent(
                    rec["step"], tuple(rec["layers"]), None if snap is None else {int(j): t for j, t in snap.items()}
                )
            )
    return out
