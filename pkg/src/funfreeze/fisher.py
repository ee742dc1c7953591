"""Trace of the Fisher information over adapter blocks, plus curve statistics.

The trace is ``E_x E_{y ~ p_w(y|x)} ||grad_w log p_w(y|x)||^2`` with labels drawn
from the model itself, never the dataset labels. Three estimators:

``batch_square``
    Square the gradient of the batch-mean NLL and divide by the batch size.
    This is the cheap estimator used during training.
``sampled``
    One model-sampled label per example, squared per-example gradients.
``exact``
    Enumerate every label weighted by its probability.

All three agree at batch size 1 (``sampled`` in expectation).
"""

from __future__ import annotations

import csv
import itertools
import warnings
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass

import numpy as np

from funfreeze import numerics as nx
from funfreeze.errors import ConfigError, NormalizationWarning, ProbeError, StatsError
from funfreeze.model import ADAPTER_FIELDS, AdapterStack, FreezeMask, forward

ESTIMATORS = ("sampled", "exact", "batch_square")
FISHER_CSV_HEADER = "# schema: funfreeze.fisher/1"


@dataclass(frozen=True)
class FisherProbeConfig:
    n_batches: int = 40
    batch_size: int = 32
    estimator: str = "batch_square"
    seed: int = 0
    # None means every layer
    scope: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.n_batches < 1 or self.batch_size < 1:
            raise ConfigError("n_batches and batch_size must be positive")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")


@dataclass
class FisherReport:
    step: int
    per_layer_trace: dict[int, float]
    head_trace: float
    avg_per_trainable_adapter: float
    estimator: str
    n_batches_used: int


@dataclass
class CurveStats:
    peak_value: float
    peak_step: int
    width_steps: int
    alpha: float = 0.5


def probe_batches(features: np.ndarray, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless stream of random batches (without replacement inside a batch)."""
    n = len(features)
    if n == 0:
        return
    size = min(batch_size, n)
    while True:
        yield features[rng.choice(n, size=size, replace=False)]


def _sample_labels(log_probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(np.exp(log_probs), axis=1)
    u = rng.random(len(log_probs))[:, None]
    return np.minimum((cdf < u * cdf[:, -1:]).sum(axis=1), log_probs.shape[1] - 1)


def _grad_of(stack: AdapterStack, x: np.ndarray, labels, names: Sequence[str], scale: float):
    g = forward(stack, x)
    loss = nx.nll(nx.log_softmax(g.logits), labels)
    if scale != 1.0:
        loss = nx.mul_scalar(loss, scale)
    grads = g.tape.backward(loss)
    return g, {n: grads[g.params[n]] for n in names}


def _sampled_grads(stack, x, names, rng, loss_scale) -> dict[str, np.ndarray]:
    """Labels drawn from the model on the same tape that is differentiated."""
    g = forward(stack, x)
    lp = nx.log_softmax(g.logits)
    loss = nx.mul_scalar(nx.nll(lp, _sample_labels(lp.data, rng)), loss_scale)
    grads = g.tape.backward(loss)
    return {n: grads[g.params[n]] for n in names}


def _batch_squares(stack, x, names, estimator, rng, loss_scale) -> dict[str, np.ndarray]:
    b = len(x)
    acc = {n: 0.0 for n in names}
    if estimator == "batch_square":
        grads = _sampled_grads(stack, x, names, rng, loss_scale)
        return {n: grads[n] ** 2 / b for n in names}
    if estimator == "sampled":
        # one uniform per example, consumed in row order: the same stream batch_square uses
        for i in range(b):
            grads = _sampled_grads(stack, x[i : i + 1], names, rng, loss_scale)
            for n in names:
                acc[n] = acc[n] + grads[n] ** 2
        return {n: acc[n] / b for n in names}
    # exact: sum_y p(y|x) ||grad log p(y|x)||^2 per example
    for i in range(b):
        xi = x[i : i + 1]
        probs = np.exp(nx.log_softmax(forward(stack, xi).logits).data[0])
        for y in range(stack.n_classes):
            _, grads = _grad_of(stack, xi, [y], names, loss_scale)
            for n in names:
                acc[n] = acc[n] + probs[y] * grads[n] ** 2
    return {n: acc[n] / b for n in names}


def trace_probe(
    stack: AdapterStack,
    batches: Iterable[np.ndarray],
    cfg: FisherProbeConfig,
    mask: FreezeMask,
    step: int = 0,
    rng: np.random.Generator | None = None,
    loss_scale: float = 1.0,
) -> FisherReport:
    """Estimate per-adapter Fisher traces on a private copy of ``stack``.

    Consumes at most ``cfg.n_batches`` feature batches from ``batches``; any
    labels are ignored. Label sampling uses ``rng`` (default: seeded from
    ``cfg.seed``). ``loss_scale`` multiplies the NLL before differentiation.
    """
    L = stack.n_layers
    scope = tuple(range(L)) if cfg.scope is None else tuple(cfg.scope)
    if any(j < 0 or j >= L for j in scope):
        raise ConfigError(f"probe scope {scope} out of range for {L} layers")
    snapshot = stack.copy()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    names = [n for n, _ in snapshot.head_parameters()]
    for j in scope:
        names += [n for n, _ in snapshot.adapter_parameters(j)]

    total: dict[str, np.ndarray] | None = None
    used = 0
    for x in itertools.islice(batches, cfg.n_batches):
        x = np.asarray(x, dtype=np.float64)
        if len(x) == 0:
            continue
        sq = _batch_squares(snapshot, x, names, cfg.estimator, rng, loss_scale)
        total = sq if total is None else {n: total[n] + sq[n] for n in names}
        used += 1
    if total is None:
        raise ProbeError("data source yielded no batches")
    mean_sq = {n: total[n] / used for n in names}
    per_layer, head, avg = aggavg(mean_sq, scope, mask)
    return FisherReport(step, per_layer, head, avg, cfg.estimator, used)


def aggavg(
    squares: dict[str, np.ndarray], scope: Iterable[int], mask: FreezeMask
) -> tuple[dict[int, float], float, float]:
    """Sum squared gradients per adapter block; average over trainable scoped layers.

    With no trainable layer in scope the average is 0.0.
    """
    per_layer = {}
    for j in sorted(scope):
        prefix = f"layers.{j}."
        per_layer[j] = float(
            sum(np.sum(v) for n, v in squares.items() if n.startswith(prefix) and n[len(prefix) :] in ADAPTER_FIELDS)
        )
    head = float(sum(np.sum(v) for n, v in squares.items() if n.startswith("head.")))
    active = [per_layer[j] for j in per_layer if mask.trainable[j]]
    avg = sum(active) / len(active) if active else 0.0
    return per_layer, head, avg


def moving_average(series: Sequence[tuple[int, float]], window: int = 5) -> list[tuple[int, float]]:
    """Trailing mean over the last ``min(i + 1, window)`` points."""
    if window < 1:
        raise ValueError("window must be >= 1")
    values = [v for _, v in series]
    out = []
    for i, (s, _) in enumerate(series):
        chunk = values[max(0, i - window + 1) : i + 1]
        out.append((s, sum(chunk) / len(chunk)))
    return out


def _interval(series: Sequence[tuple[int, float]]) -> int:
    if len(series) < 2:
        return 1
    return series[1][0] - series[0][0]


def curve_stats(series: Sequence[tuple[int, float]], alpha: float = 0.5, interval: int | None = None) -> CurveStats:
    """Peak of the curve and the width of the contiguous run around it at ``>= alpha * peak``.

    Width is the number of points in that run times the logging interval
    (inferred from the first two steps unless given).
    """
    if not series:
        raise StatsError("curve_stats needs a nonempty series")
    if not 0 < alpha < 1:
        raise StatsError(f"alpha must lie in (0, 1), got {alpha}")
    values = [v for _, v in series]
    i_peak = int(np.argmax(values))
    peak = values[i_peak]
    thresh = alpha * peak
    lo = i_peak
    while lo > 0 and values[lo - 1] >= thresh:
        lo -= 1
    hi = i_peak
    while hi < len(values) - 1 and values[hi + 1] >= thresh:
        hi += 1
    step = interval if interval is not None else _interval(series)
    return CurveStats(float(peak), int(series[i_peak][0]), (hi - lo + 1) * step, alpha)


def min_max_normalize(series: Sequence[tuple[int, float]]) -> list[tuple[int, float]]:
    if not series:
        raise StatsError("cannot normalize an empty series")
    values = [v for _, v in series]
    lo, hi = min(values), max(values)
    if hi <= lo:
        warnings.warn("constant series; emitting zeros", NormalizationWarning, stacklevel=2)
        return [(s, 0.0) for s, _ in series]
    return [(s, (v - lo) / (hi - lo)) for s, v in series]


def avg_series(reports: Sequence[FisherReport]) -> list[tuple[int, float]]:
    return [(r.step, r.avg_per_trainable_adapter) for r in reports]


def write_fisher_csv(reports: Sequence[FisherReport], path) -> None:
    """Rows of ``step, layer, trace, estimator, n_batches``; layer is an index, ``head`` or ``avg``."""
    with open(path, "w", newline="") as fh:
        fh.write(FISHER_CSV_HEADER + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "layer", "trace", "estimator", "n_batches"])
        for r in reports:
            for j, t in sorted(r.per_layer_trace.items()):
                w.writerow([r.step, j, repr(t), r.estimator, r.n_batches_used])
            w.writerow([r.step, "head", repr(r.head_trace), r.estimator, r.n_batches_used])
            w.writerow([r.step, "avg", repr(r.avg_per_trainable_adapter), r.estimator, r.n_batches_used])


def read_fisher_csv(path) -> list[FisherReport]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    by_step: dict[int, FisherReport] = {}
    for row in rows:
        step = int(row["step"])
        rep = by_step.setdefault(step, FisherReport(step, {}, 0.0, 0.0, row["estimator"], int(row["n_batches"])))
        value = float(row["trace"])
        if row["layer"] == "head":
            rep.head_trace = value
        elif row["layer"] == "avg":
            rep.avg_per_trainable_adapter = value
        else:
            rep.per_layer_trace[int(row["layer"])] = value
    return [by_step[s] for s in sorted(by_step)]
