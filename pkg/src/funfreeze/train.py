"""Training loop for scheduled unfreezing of adapters."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from collections.abc import Callable, Iterator
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from funfreeze import numerics as nx
from funfreeze.data import SOURCE, Dataset, ShiftTask
from funfreeze.errors import ConfigError, TrainingError
from funfreeze.fisher import FisherProbeConfig, FisherReport, probe_batches, trace_probe
from funfreeze.model import AdapterStack, FreezeMask, forward, save_checkpoint, trainable_params
from funfreeze.optim import LrSchedule, OptimizerState, adamw_step, clip_global_norm, global_norm
from funfreeze.schedule import SchedulerKind, UnfreezeEvent, UnfreezeSchedule, validate_budget

log = logging.getLogger(__name__)

METRICS_CSV_HEADER = "# schema: funfreeze.metrics/1"

# probe streams derived from the fisher seed; never touch the data order
_LOG_STREAM, _FUN_STREAM = 0, 1


@dataclass(frozen=True)
class Seeds:
    data: int = 0
    init: int = 0
    scheduler: int = 0
    fisher: int = 0

    def offset(self, n: int) -> Seeds:
        return Seeds(self.data + n, self.init + n, self.scheduler + n, self.fisher + n)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1500
    batch_size: int = 32
    k: int = 100
    scheduler: SchedulerKind = SchedulerKind("GU")
    lr: float = 5e-3
    lr_schedule: str = "linear"
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    clip_trainable_only: bool = True
    seeds: Seeds = Seeds()
    eval_every: int = 100
    fisher_log_every: int = 100
    fisher_probe: FisherProbeConfig = FisherProbeConfig(n_batches=40, batch_size=32)
    checkpoint_every: int = 0

    def validate(self, n_layers: int) -> str:
        if self.steps < 1 or self.batch_size < 1 or self.k < 1:
            raise ConfigError("steps, batch_size and k must be positive")
        if self.eval_every < 1 or self.fisher_log_every < 1:
            raise ConfigError("eval_every and fisher_log_every must be positive")
        status = validate_budget(self.k, n_layers, self.steps)
        if status == "error":
            raise ConfigError(
                f"unfreeze budget k*L > N: k={self.k}, L={n_layers}, N={self.steps} "
                f"(k*L={self.k * n_layers}); not every layer would be unfrozen"
            )
        self.scheduler.check(n_layers)
        return status


def steps_from_epochs(n_train: int, batch_size: int, epochs: int) -> int:
    return math.ceil(n_train / batch_size) * epochs


@dataclass
class RunMetrics:
    train_loss: list[tuple[int, float]] = field(default_factory=list)
    evals: list[tuple[int, str, float]] = field(default_factory=list)
    fisher: list[FisherReport] = field(default_factory=list)
    events: list[UnfreezeEvent] = field(default_factory=list)
    final: dict[str, float] = field(default_factory=dict)

    def fisher_avg_series(self) -> list[tuple[int, float]]:
        return [(r.step, r.avg_per_trainable_adapter) for r in self.fisher]

    @property
    def source_acc(self) -> float:
        return self.final[SOURCE]

    @property
    def shifted_accs(self) -> dict[str, float]:
        return {k: v for k, v in self.final.items() if k not in (SOURCE, "val")}

    @property
    def shifted_mean(self) -> float:
        accs = list(self.shifted_accs.values())
        return sum(accs) / len(accs)

    @property
    def lowest(self) -> float:
        return min(self.shifted_accs.values())


def evaluate(stack: AdapterStack, ds: Dataset) -> float:
    """Argmax accuracy; ties resolve to the lowest class index."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = np.argmax(forward(stack, ds.features).logits.data, axis=1)
    return float(np.mean(pred == ds.labels))


def _batches(ds: Dataset, batch_size: int, rng: np.random.Generator) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    n = len(ds)
    while True:
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            idx = order[i : i + batch_size]
            yield ds.features[idx], ds.labels[idx]


StepCallback = Callable[[int, AdapterStack, FreezeMask], None]


def train(
    stack: AdapterStack,
    task: ShiftTask,
    cfg: TrainConfig,
    on_step: StepCallback | None = None,
    checkpoint_dir: Path | None = None,
) -> tuple[AdapterStack, RunMetrics]:
    """Run ``cfg.steps`` steps of scheduled-unfreezing training on ``task.train``.

    ``stack`` is updated in place. ``on_step`` is called after every update.
    """
    L = stack.n_layers
    if len(task.train) == 0:
        raise ConfigError("empty training set")
    if cfg.validate(L) == "warning":
        warnings.warn(f"k*L={cfg.k * L} exceeds half the budget N={cfg.steps}", stacklevel=2)

    mask = FreezeMask.all_frozen(L)
    sched = UnfreezeSchedule(cfg.scheduler, L, cfg.k, cfg.steps)
    opt = OptimizerState(weight_decay=cfg.weight_decay, max_grad_norm=cfg.max_grad_norm)
    lrs = LrSchedule(cfg.lr_schedule, cfg.lr, cfg.steps)
    batches = _batches(task.train, cfg.batch_size, np.random.default_rng(cfg.seeds.data))
    metrics = RunMetrics()

    def stream_rng(step: int, stream: int) -> np.random.Generator:
        return np.random.default_rng([cfg.seeds.fisher, step, stream])

    def probe(step: int, probe_cfg: FisherProbeConfig, stream: int) -> FisherReport:
        rng = stream_rng(step, stream)
        data = probe_batches(task.train.features, probe_cfg.batch_size, rng)
        return trace_probe(stack, data, probe_cfg, mask, step=step, rng=rng)

    fun_cfg = cfg.scheduler.probe or FisherProbeConfig()
    for step in range(cfg.steps):
        x, y = next(batches)

        def fun_probe(frozen: list[int], step=step) -> dict[int, float]:
            return probe(step, replace(fun_cfg, scope=tuple(frozen)), _FUN_STREAM).per_layer_trace

        event = sched.advance(step, probe=fun_probe)
        if event is not None:
            mask.unfreeze(event.layers)
            log.debug("step %d: unfroze %s", step, event.layers)
        if step % cfg.fisher_log_every == 0:
            metrics.fisher.append(probe(step, cfg.fisher_probe, _LOG_STREAM))
        if step % cfg.eval_every == 0:
            metrics.evals.append((step, "val", evaluate(stack, task.val)))

        g = forward(stack, x)
        loss = nx.nll(nx.log_softmax(g.logits), y)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at step {step} (scheduler {cfg.scheduler.label})")
        metrics.train_loss.append((step, value))
        all_grads = g.tape.backward(loss)
        update = trainable_params(stack, mask)
        grads = {name: all_grads[g.params[name]] for name, _ in update}
        if cfg.clip_trainable_only:
            grads = clip_global_norm(grads, cfg.max_grad_norm)
        else:
            norm = global_norm({n: all_grads[t] for n, t in g.params.items()})
            if norm > cfg.max_grad_norm:
                grads = {n: v * (cfg.max_grad_norm / norm) for n, v in grads.items()}
        adamw_step(opt, update, grads, lr=lrs.lr_at(step))

        if on_step is not None:
            on_step(step, stack, mask)
        if checkpoint_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(stack, Path(checkpoint_dir) / f"checkpoint_{step + 1}.jsonl", mask, {"step": step + 1})

    metrics.events = list(sched.state.events)
    metrics.evals.append((cfg.steps, "val", evaluate(stack, task.val)))
    metrics.final["val"] = metrics.evals[-1][2]
    for name, ds in task.test.items():
        acc = evaluate(stack, ds)
        metrics.final[name] = acc
        metrics.evals.append((cfg.steps, name, acc))
    return stack, metrics


def write_metrics_csv(metrics: RunMetrics, path) -> None:
    """Rows of ``step, kind, split, value`` with kind in train_loss / eval / fisher_avg."""
    with open(path, "w", newline="") as fh:
        fh.write(METRICS_CSV_HEADER + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "kind", "split", "value"])
        for step, v in metrics.train_loss:
            w.writerow([step, "train_loss", "train", repr(v)])
        for step, split, v in metrics.evals:
            w.writerow([step, "eval", split, repr(v)])
        for r in metrics.fisher:
            w.writerow([r.step, "fisher_avg", "train", repr(r.avg_per_trainable_adapter)])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))
