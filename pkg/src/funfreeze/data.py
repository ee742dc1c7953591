"""Synthetic classification tasks under an observation-space shift.

Examples share one latent label structure (Gaussian clusters, or concentric
rings). Each domain observes the latent point through its own affine
transform; the source domain's transform is a random rotation, and a shifted
domain's transform is interpolated from it toward an unrelated rotation by
``shift_strength``. Labels never change across domains.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from funfreeze.errors import ConfigError, ParseError

DATASET_FORMAT = "funfreeze.dataset"
DATASET_VERSION = 1
MAX_CONDITION = 100.0
SOURCE = "source"


@dataclass(frozen=True)
class ShiftTaskSpec:
    h: int = 32
    C: int = 4
    n_train: int = 2000
    n_val: int = 400
    n_test_per_domain: int = 400
    n_shift_domains: int = 4
    shift_strength: float = 0.8
    noise_sigma: float = 1.0
    separation: float = 3.0
    variant: str = "gaussian"
    seed: int = 0

    def __post_init__(self):
        if min(self.h, self.n_train, self.n_val, self.n_test_per_domain, self.n_shift_domains) < 1:
            raise ConfigError("all ShiftTaskSpec counts must be positive")
        if self.C < 2:
            raise ConfigError("need at least 2 classes")
        if not 0.0 <= self.shift_strength <= 1.0:
            raise ConfigError("shift_strength must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.variant not in ("gaussian", "rings"):
            raise ConfigError(f"unknown task variant {self.variant!r}")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class DomainSpec:
    name: str
    transform: np.ndarray  # h x h
    offset: np.ndarray  # h
    noise_sigma: float


@dataclass
class Dataset:
    features: np.ndarray  # n x h
    labels: np.ndarray  # n
    domains: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Dataset)
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and list(self.domains) == list(other.domains)
        )


@dataclass
class ShiftTask:
    spec: ShiftTaskSpec
    train: Dataset
    val: Dataset
    test: dict[str, Dataset]
    domains: list[DomainSpec]
    prototypes: np.ndarray

    @property
    def shifted_names(self) -> list[str]:
        return [d.name for d in self.domains if d.name != SOURCE]


def _rotation(h: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(h, h)))
    return q * np.sign(np.diag(r))


def _latent(spec: ShiftTaskSpec, labels: np.ndarray, prototypes: np.ndarray, rng: np.random.Generator):
    n, h = len(labels), spec.h
    if spec.variant == "gaussian":
        return prototypes[labels] + spec.noise_sigma * rng.normal(size=(n, h))
    direction = rng.normal(size=(n, h))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = (labels + 1) * spec.separation + spec.noise_sigma * rng.normal(size=n)
    return direction * radius[:, None]


def _balanced_labels(n: int, C: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % C)


def _observe(domain: DomainSpec, z: np.ndarray) -> np.ndarray:
    return z @ domain.transform.T + domain.offset


def make_domains(spec: ShiftTaskSpec, rng: np.random.Generator) -> list[DomainSpec]:
    h, s = spec.h, spec.shift_strength
    src_t = _rotation(h, rng)
    src_o = 0.5 * rng.normal(size=h)
    domains = [DomainSpec(SOURCE, src_t, src_o, spec.noise_sigma)]
    for d in range(spec.n_shift_domains):
        while True:
            rot = _rotation(h, rng)
            delta = rng.normal(size=h)
            t = (1 - s) * src_t + s * rot
            if np.linalg.cond(t) < MAX_CONDITION:
                break
        domains.append(DomainSpec(f"shift{d}", t, src_o + s * delta, spec.noise_sigma))
    return domains


def _sample(spec, domain, n, prototypes, rng) -> Dataset:
    labels = _balanced_labels(n, spec.C, rng)
    z = _latent(spec, labels, prototypes, rng)
    return Dataset(_observe(domain, z), labels.astype(np.int64), [domain.name] * n)


def generate(spec: ShiftTaskSpec) -> ShiftTask:
    """Source train/val sets plus one test set per domain (source included)."""
    rng = np.random.default_rng(spec.seed)
    prototypes = rng.normal(size=(spec.C, spec.h))
    prototypes *= spec.separation / np.linalg.norm(prototypes, axis=1, keepdims=True)
    domains = make_domains(spec, rng)
    source = domains[0]
    train = _sample(spec, source, spec.n_train, prototypes, rng)
    val = _sample(spec, source, spec.n_val, prototypes, rng)
    test = {d.name: _sample(spec, d, spec.n_test_per_domain, prototypes, rng) for d in domains}
    return ShiftTask(spec, train, val, test, domains, prototypes)


def aux_dataset(task: ShiftTask, n: int, n_classes: int = 8, seed: int = 0) -> Dataset:
    """Multi-domain auxiliary task for base pretraining.

    Latent points from the task's own cluster mixture, observed through every
    domain's transform, labelled by the nearest of ``n_classes`` random latent
    directions. The labels ignore the task's classes.
    """
    rng = np.random.default_rng(seed)
    spec = task.spec
    directions = rng.normal(size=(n_classes, spec.h))
    labels = _balanced_labels(n, spec.C, rng)
    z = _latent(spec, labels, task.prototypes, rng)
    which = rng.integers(len(task.domains), size=n)
    x = np.empty((n, spec.h))
    for d, dom in enumerate(task.domains):
        sel = which == d
        x[sel] = _observe(dom, z[sel])
    aux_labels = np.argmax(z @ directions.T, axis=1).astype(np.int64)
    return Dataset(x, aux_labels, [task.domains[d].name for d in which])


def frechet_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Squared mean gap plus the covariance term of the Gaussian Frechet distance."""
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a, cov_b = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    root = linalg.sqrtm(cov_a @ cov_b).real
    return float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a + cov_b - 2 * root))


def save_dataset(ds: Dataset, path, h: int, C: int, spec_hash: str = "") -> None:
    """Header record, then one ``{features, label, domain}`` record per line."""
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "h": h,
        "C": C,
        "domains": sorted(set(ds.domains)),
        "spec_hash": spec_hash,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for x, y, d in zip(ds.features, ds.labels, ds.domains):
        lines.append(json.dumps({"features": x.tolist(), "label": int(y), "domain": d}))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> tuple[Dataset, dict]:
    lines = Path(path).read_text().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("missing header record", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ParseError(f"bad header: {e}", line=1) from e
    if header.get("format") != DATASET_FORMAT or header.get("version") != DATASET_VERSION:
        raise ParseError("not a funfreeze dataset (v1)", line=1)
    h, C = header["h"], header["C"]
    feats, labels, domains = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            x, y, d = rec["features"], rec["label"], rec["domain"]
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise ParseError(f"malformed record: {e}", line=lineno) from e
        if not isinstance(x, list) or len(x) != h:
            raise ParseError(f"expected {h} features", line=lineno)
        if not isinstance(y, int) or not 0 <= y < C:
            raise ParseError(f"label {y!r} outside [0, {C})", line=lineno)
        feats.append(x)
        labels.append(y)
        domains.append(d)
    features = np.array(feats, dtype=np.float64).reshape(len(feats), h)
    return Dataset(features, np.array(labels, dtype=np.int64), domains), header
