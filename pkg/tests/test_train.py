import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from funfreeze import optim as O
from funfreeze.data import Dataset, ShiftTaskSpec, generate
from funfreeze.errors import ConfigError
from funfreeze.fisher import FisherProbeConfig
from funfreeze.model import init_stack
from funfreeze.schedule import SchedulerKind
from funfreeze.train import RunMetrics, Seeds, TrainConfig, evaluate, read_metrics_csv, steps_from_epochs, train, write_metrics_csv
from oracles import straight_line_logits

TOY = ShiftTaskSpec(h=8, C=2, n_train=256, n_val=64, n_test_per_domain=64, n_shift_domains=1, separation=6.0, noise_sigma=0.5)


def _cfg(**kw):
    base = dict(steps=200, batch_size=16, k=20, scheduler=SchedulerKind("GU"), lr=5e-3, eval_every=50, fisher_log_every=50)
    base.update(kw)
    base.setdefault("fisher_probe", FisherProbeConfig(n_batches=2, batch_size=8))
    return TrainConfig(**base)


def _run(cfg, seed=0, task=None, **kw):
    task = task or generate(TOY)
    stack = init_stack(TOY.h, 3, TOY.C, reduction_factor=2, seed=seed)
    return train(stack, task, cfg, **kw)


def test_adamw_single_step_by_hand():
    p = np.array([2.0])
    state = O.OptimizerState(lr=0.1, weight_decay=0.01)
    O.adamw_step(state, [("p", p)], {"p": np.array([0.5])})
    decayed = 2.0 - 0.1 * 0.01 * 2.0
    m_hat = (1 - 0.9) * 0.5 / (1 - 0.9)
    v_hat = (1 - 0.999) * 0.25 / (1 - 0.999)
    assert p[0] == pytest.approx(decayed - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8), abs=1e-12)


def test_adamw_two_steps_bias_correction():
    p = np.array([1.0])
    state = O.OptimizerState(lr=0.01)
    O.adamw_step(state, [("p", p)], {"p": np.array([1.0])})
    O.adamw_step(state, [("p", p)], {"p": np.array([-2.0])})
    m = 0.9 * 0.1 + 0.1 * -2.0
    v = 0.999 * 0.001 + 0.001 * 4.0
    expected = 1.0 - 0.01 * 1.0 / (1.0 + 1e-8) - 0.01 * (m / (1 - 0.81)) / (math.sqrt(v / (1 - 0.999**2)) + 1e-8)
    assert p[0] == pytest.approx(expected, abs=1e-12)


def test_adamw_fixed_point_and_decay():
    p = np.array([1.5, -3.0])
    O.adamw_step(O.OptimizerState(lr=0.1), [("p", p)], {"p": np.zeros(2)})
    np.testing.assert_array_equal(p, [1.5, -3.0])
    state = O.OptimizerState(lr=0.1, weight_decay=0.2)
    for _ in range(3):
        O.adamw_step(state, [("p", p)], {"p": np.zeros(2)})
    np.testing.assert_allclose(p, np.array([1.5, -3.0]) * (1 - 0.02) ** 3, rtol=1e-14)


def test_late_parameters_start_from_zero_moments():
    a, b = np.ones(2), np.ones(3)
    state = O.OptimizerState(lr=0.1)
    for _ in range(5):
        O.adamw_step(state, [("a", a)], {"a": np.ones(2)})
    assert "b" not in state.exp_avg
    O.adamw_step(state, [("a", a), ("b", b)], {"a": np.ones(2), "b": np.full(3, 2.0)})
    np.testing.assert_allclose(state.exp_avg["b"], 0.1 * 2.0, rtol=1e-15)
    assert state.steps["b"] == 1 and state.steps["a"] == 6


def test_clip_examples():
    half = {"a": np.array([0.3, 0.4])}
    assert O.clip_global_norm(half)["a"].tolist() == [0.3, 0.4]
    big = {"a": np.array([0.0, 4.0]), "b": np.zeros(2)}
    out = O.clip_global_norm(big)
    np.testing.assert_array_equal(out["a"], [0.0, 1.0])
    assert O.global_norm(out) == pytest.approx(1.0, abs=1e-12)
    assert big["a"].tolist() == [0.0, 4.0]


@given(st.lists(st.integers(-1000, 1000), min_size=2, max_size=10, unique=True))
def test_clip_keeps_argmax(values):
    g = np.array(values, dtype=float)
    out = O.clip_global_norm({"g": g})["g"]
    assert np.argmax(out) == np.argmax(g)
    assert O.global_norm({"g": out}) <= 1.0 + 1e-12


def test_lr_schedules():
    lin = O.LrSchedule("linear", 0.1, 100)
    assert lin.lr_at(0) == 0.1 and lin.lr_at(50) == pytest.approx(0.05) and lin.lr_at(100) == 0.0
    assert O.LrSchedule("constant", 0.1, 100).lr_at(99) == 0.1
    with pytest.raises(ConfigError):
        O.LrSchedule("cosine", 0.1, 100)


def test_steps_from_epochs():
    assert steps_from_epochs(2000, 32, 3) == 63 * 3


def test_budget_violation_names_k_l_n():
    with pytest.raises(ConfigError, match=r"k=100, L=3, N=200"):
        _run(_cfg(k=100))


def test_standard_fits_separable_toy():
    _, m = _run(_cfg(steps=500, scheduler=SchedulerKind("Standard"), k=50, lr=5e-3))
    tail = [v for _, v in m.train_loss[-25:]]
    assert np.mean(tail) < 0.1
    assert m.source_acc > 0.95


def test_runs_are_bitwise_reproducible():
    _, a = _run(_cfg())
    _, b = _run(_cfg())
    assert a == b


def test_frozen_parameters_never_move():
    stack = init_stack(TOY.h, 3, TOY.C, reduction_factor=2, seed=1)
    initial = {n: a.copy() for n, a in stack.named_parameters()}
    checked = []

    def check(step, stack, mask):
        for name, arr in stack.named_parameters():
            parts = name.split(".")
            if name.startswith("head."):
                continue
            layer, field = int(parts[1]), parts[2]
            if field.startswith(("base", "norm")) or not mask.trainable[layer]:
                assert arr.tobytes() == initial[name].tobytes(), (step, name)
        checked.append(step)

    train(stack, generate(TOY), _cfg(), on_step=check)
    assert checked == list(range(200))


def test_trainable_set_only_grows():
    sizes = []
    _run(_cfg(), on_step=lambda s, st_, mask: sizes.append(len(mask.trainable_layers)))
    assert sizes == sorted(sizes) and sizes[-1] == 3


@pytest.mark.parametrize("seed", range(5))
def test_loss_finite_on_default_task(seed):
    spec = ShiftTaskSpec(seed=seed, n_train=512, n_val=64, n_test_per_domain=64)
    stack = init_stack(spec.h, 6, spec.C, seed=seed)
    cfg = _cfg(steps=700, k=50, batch_size=32, seeds=Seeds(seed, seed, seed, seed))
    _, m = train(stack, generate(spec), cfg)
    assert all(math.isfinite(v) for _, v in m.train_loss)


def test_metrics_steps_are_bounded_and_monotone():
    _, m = _run(_cfg())
    steps = [s for s, _ in m.train_loss]
    assert steps == list(range(200))
    assert [s for s, split, _ in m.evals if split == "val"] == [0, 50, 100, 150, 200]
    assert [r.step for r in m.fisher] == [0, 50, 100, 150]
    assert all(s <= 200 for s, _, _ in m.evals)


def test_evaluate_matches_loop_oracle():
    task = generate(TOY)
    stack = init_stack(TOY.h, 2, 2, reduction_factor=2, seed=3, identity_init=False)
    stack.head_weight[:] = np.random.default_rng(0).normal(size=stack.head_weight.shape)
    ds = task.test["shift0"]
    correct = sum(int(np.argmax(straight_line_logits(stack, x[None])[0]) == y) for x, y in zip(ds.features, ds.labels))
    assert evaluate(stack, ds) == correct / len(ds)


def test_evaluate_ties_go_to_class_zero():
    stack = init_stack(4, 1, 2)
    stack.head_weight[:] = 0.0
    ds = Dataset(np.random.default_rng(0).normal(size=(10, 4)), np.array([0, 1] * 5))
    assert evaluate(stack, ds) == 0.5
    ds_zero = Dataset(ds.features, np.zeros(10, dtype=np.int64))
    assert evaluate(stack, ds_zero) == 1.0


def test_metrics_csv(tmp_path):
    m = RunMetrics(train_loss=[(0, 0.5)], evals=[(0, "val", 0.25)])
    p = tmp_path / "m.csv"
    write_metrics_csv(m, p)
    assert p.read_text().splitlines()[:2] == ["# schema: funfreeze.metrics/1", "step,kind,split,value"]
    rows = read_metrics_csv(p)
    assert rows == [
        {"step": "0", "kind": "train_loss", "split": "train", "value": "0.5"},
        {"step": "0", "kind": "eval", "split": "val", "value": "0.25"},
    ]
