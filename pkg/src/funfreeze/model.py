"""Frozen feature-transform stack with one residual bottleneck adapter per layer.

Layer ``j`` computes ``x <- layer_norm(x @ base_weight + base_bias)`` and then
``x <- x + relu(x @ down + down_b) @ up + up_b``. A classification head on top
of layer ``L - 1`` produces the logits. Index ``L - 1`` is the top layer.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from funfreeze import numerics as nx
from funfreeze.errors import ConfigError, DimensionError, ParseError
from funfreeze.optim import OptimizerState, adamw_step

BASE_FIELDS = ("base_weight", "base_bias", "norm_scale", "norm_shift")
ADAPTER_FIELDS = ("down_weight", "down_bias", "up_weight", "up_bias")
HEAD_NAMES = ("head.weight", "head.bias")

CHECKPOINT_FORMAT = "funfreeze.checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class AdapterLayer:
    base_weight: np.ndarray  # h x h
    base_bias: np.ndarray  # h
    norm_scale: np.ndarray  # h
    norm_shift: np.ndarray  # h
    down_weight: np.ndarray  # h x r
    down_bias: np.ndarray  # r
    up_weight: np.ndarray  # r x h
    up_bias: np.ndarray  # h


@dataclass
class AdapterStack:
    layers: list[AdapterLayer]
    head_weight: np.ndarray  # C x h
    head_bias: np.ndarray  # C

    @property
    def hidden(self) -> int:
        return self.head_weight.shape[1]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_classes(self) -> int:
        return self.head_weight.shape[0]

    @property
    def bottleneck(self) -> int:
        return self.layers[0].down_weight.shape[1]

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        """Every tensor, layers bottom-up then the head. This is the checkpoint order."""
        out = []
        for j, layer in enumerate(self.layers):
            for f in BASE_FIELDS + ADAPTER_FIELDS:
                out.append((f"layers.{j}.{f}", getattr(layer, f)))
        out.append(("head.weight", self.head_weight))
        out.append(("head.bias", self.head_bias))
        return out

    def adapter_parameters(self, j: int) -> list[tuple[str, np.ndarray]]:
        layer = self.layers[j]
        return [(f"layers.{j}.{f}", getattr(layer, f)) for f in ADAPTER_FIELDS]

    def head_parameters(self) -> list[tuple[str, np.ndarray]]:
        return [("head.weight", self.head_weight), ("head.bias", self.head_bias)]

    def copy(self) -> AdapterStack:
        return copy.deepcopy(self)


@dataclass
class FreezeMask:
    """Which adapters are trainable. Flags only ever go from False to True."""

    trainable: list[bool]
    head_trainable: bool = True

    @classmethod
    def all_frozen(cls, n_layers: int) -> FreezeMask:
        return cls([False] * n_layers)

    def unfreeze(self, layers) -> None:
        for j in layers:
            self.trainable[j] = True

    @property
    def trainable_layers(self) -> list[int]:
        return [j for j, t in enumerate(self.trainable) if t]

    @property
    def frozen_layers(self) -> list[int]:
        return [j for j, t in enumerate(self.trainable) if not t]


def bottleneck_size(hidden: int, reduction_factor: int) -> int:
    return max(1, hidden // reduction_factor)


def init_stack(
    hidden: int,
    layers: int,
    classes: int,
    reduction_factor: int = 16,
    seed: int = 0,
    identity_init: bool = True,
) -> AdapterStack:
    """Random base weights (Gaussian, std 1/sqrt(h)) and adapters.

    With ``identity_init`` the up-projection starts at zero, so every adapter
    is an exact identity on the residual path.
    """
    if hidden < 1 or layers < 1 or classes < 2 or reduction_factor < 1:
        raise ConfigError(
            f"invalid stack sizes: hidden={hidden}, layers={layers}, classes={classes}, "
            f"reduction_factor={reduction_factor}"
        )
    h, r = hidden, bottleneck_size(hidden, reduction_factor)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(layers):
        base_weight = rng.normal(0.0, 1.0 / np.sqrt(h), (h, h))
        down_weight = rng.normal(0.0, 1.0 / np.sqrt(h), (h, r))
        up_weight = np.zeros((r, h)) if identity_init else rng.normal(0.0, 1.0 / np.sqrt(r), (r, h))
        out.append(
            AdapterLayer(
                base_weight=base_weight,
                base_bias=np.zeros(h),
                norm_scale=np.ones(h),
                norm_shift=np.zeros(h),
                down_weight=down_weight,
                down_bias=np.zeros(r),
                up_weight=up_weight,
                up_bias=np.zeros(h),
            )
        )
    head_weight, head_bias = fresh_head(h, classes, rng)
    return AdapterStack(out, head_weight, head_bias)


def fresh_head(hidden: int, classes: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    return rng.normal(0.0, 0.02, (classes, hidden)), np.zeros(classes)


@dataclass
class Graph:
    """A recorded forward pass: logits plus the tape leaf for every parameter."""

    tape: nx.Tape
    logits: nx.Tensor
    params: dict[str, nx.Tensor] = field(default_factory=dict)


def forward(stack: AdapterStack, inputs: np.ndarray, tape: nx.Tape | None = None) -> Graph:
    """Record the full forward pass. Every parameter is a tape leaf, frozen or not."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != stack.hidden:
        raise DimensionError(f"forward: inputs {inputs.shape} do not match hidden size {stack.hidden}")
    tape = tape or nx.Tape()
    params = {name: tape.param(arr, name) for name, arr in stack.named_parameters()}
    x = tape.constant(inputs)
    for j in range(stack.n_layers):
        p = lambda f: params[f"layers.{j}.{f}"]  # noqa: E731
        x = nx.layer_norm(nx.affine(x, p("base_weight"), p("base_bias")), p("norm_scale"), p("norm_shift"))
        a = nx.relu(nx.affine(x, p("down_weight"), p("down_bias")))
        x = nx.add(x, nx.affine(a, p("up_weight"), p("up_bias")))
    logits = nx.add(x @ nx.transpose(params["head.weight"]), params["head.bias"])
    return Graph(tape, logits, params)


def logits(stack: AdapterStack, inputs: np.ndarray) -> np.ndarray:
    return forward(stack, inputs).logits.data


def loss_graph(stack: AdapterStack, inputs: np.ndarray, labels) -> tuple[Graph, nx.Tensor]:
    g = forward(stack, inputs)
    return g, nx.nll(nx.log_softmax(g.logits), labels)


def trainable_params(stack: AdapterStack, mask: FreezeMask) -> list[tuple[str, np.ndarray]]:
    """Head first, then adapter tensors of trainable layers bottom-up. Never base/norm."""
    if len(mask.trainable) != stack.n_layers:
        raise DimensionError(f"mask has {len(mask.trainable)} flags for {stack.n_layers} layers")
    out = stack.head_parameters() if mask.head_trainable else []
    for j in mask.trainable_layers:
        out.extend(stack.adapter_parameters(j))
    return out


def base_parameters(stack: AdapterStack) -> list[tuple[str, np.ndarray]]:
    return [
        (f"layers.{j}.{f}", getattr(layer, f)) for j, layer in enumerate(stack.layers) for f in BASE_FIELDS
    ]


def pretrain_base(
    stack: AdapterStack,
    features: np.ndarray,
    labels: np.ndarray,
    steps: int,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
) -> tuple[AdapterStack, list[float]]:
    """Train base transforms on an auxiliary task, then attach a fresh task head.

    Adapters stay untouched (identity at init). A temporary head sized to the
    auxiliary label set is used during pretraining and discarded. Returns the
    stack (modified in place) and the per-step auxiliary losses.
    """
    if steps < 0:
        raise ConfigError("pretrain steps must be >= 0")
    rng = np.random.default_rng(seed)
    losses: list[float] = []
    if steps > 0:
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        n_aux = int(labels.max()) + 1
        task_head = (stack.head_weight, stack.head_bias)
        stack.head_weight, stack.head_bias = fresh_head(stack.hidden, max(n_aux, 2), rng)
        opt = OptimizerState(lr=lr)
        n = len(features)
        for _ in range(steps):
            idx = rng.choice(n, size=min(batch_size, n), replace=False)
            g, loss = loss_graph(stack, features[idx], labels[idx])
            grads = g.tape.backward(loss)
            train_set = base_parameters(stack) + stack.head_parameters()
            adamw_step(opt, train_set, {name: grads[g.params[name]] for name, _ in train_set})
            losses.append(float(loss.data))
        stack.head_weight, stack.head_bias = task_head
    stack.head_weight, stack.head_bias = fresh_head(stack.hidden, stack.n_classes, rng)
    return stack, losses


def save_checkpoint(stack: AdapterStack, path, mask: FreezeMask | None = None, meta: dict | None = None) -> None:
    """Line-delimited JSON: a header, then one ``{name, shape, values}`` record per tensor."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "hidden": stack.hidden,
        "layers": stack.n_layers,
        "classes": stack.n_classes,
        "bottleneck": stack.bottleneck,
        "trainable": None if mask is None else list(mask.trainable),
        "meta": meta or {},
    }
    lines = [json.dumps(header, sort_keys=True)]
    for name, arr in stack.named_parameters():
        lines.append(json.dumps({"name": name, "shape": list(arr.shape), "values": arr.reshape(-1).tolist()}))
    Path(path).write_text("\n".join(lines) + "\n")


def _expected_shapes(h: int, L: int, C: int, r: int) -> dict[str, tuple[int, ...]]:
    per_layer = {
        "base_weight": (h, h),
        "base_bias": (h,),
        "norm_scale": (h,),
        "norm_shift": (h,),
        "down_weight": (h, r),
        "down_bias": (r,),
        "up_weight": (r, h),
        "up_bias": (h,),
    }
    out = {f"layers.{j}.{f}": shape for j in range(L) for f, shape in per_layer.items()}
    out["head.weight"] = (C, h)
    out["head.bias"] = (C,)
    return out


def load_checkpoint(path) -> tuple[AdapterStack, FreezeMask | None, dict]:
    text = Path(path).read_text().splitlines()
    if not text:
        raise ParseError("empty checkpoint", line=1)
    try:
        header = json.loads(text[0])
    except json.JSONDecodeError as e:
        raise ParseError(f"bad header: {e}", line=1) from e
    if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
        raise ParseError("not a funfreeze checkpoint (v1)", line=1)
    h, L, C, r = header["hidden"], header["layers"], header["classes"], header["bottleneck"]
    expected = _expected_shapes(h, L, C, r)
    values: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(text[1:], start=2):
        try:
            rec = json.loads(line)
            name, shape = rec["name"], tuple(rec["shape"])
            arr = np.array(rec["values"], dtype=np.float64).reshape(shape)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise ParseError(f"bad tensor record: {e}", line=lineno) from e
        if expected.get(name) != shape:
            raise ParseError(f"unexpected tensor {name} with shape {shape}", line=lineno)
        values[name] = arr
    missing = set(expected) - set(values)
    if missing:
        raise ParseError(f"checkpoint is missing {sorted(missing)}", line=len(text))
    layers = [
        AdapterLayer(**{f: values[f"layers.{j}.{f}"] for f in BASE_FIELDS + ADAPTER_FIELDS}) for j in range(L)
    ]
    stack = AdapterStack(layers, values["head.weight"], values["head.bias"])
    mask = None if header["trainable"] is None else FreezeMask(list(header["trainable"]))
    return stack, mask, header["meta"]
