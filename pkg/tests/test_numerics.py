import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from funfreeze import numerics as nx
from funfreeze.errors import ContractError, DimensionError
from oracles import naive_matmul, rel_error


def test_matmul_identity():
    t = nx.Tape()
    out = nx.matmul(t.constant(np.eye(2)), t.constant([[2.0, 3.0], [4.0, 5.0]]))
    assert out.data.tolist() == [[2.0, 3.0], [4.0, 5.0]]


def test_matmul_hand():
    t = nx.Tape()
    assert nx.matmul(t.constant([[1.0, 2.0]]), t.constant([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    t = nx.Tape()
    np.testing.assert_allclose(nx.matmul(t.constant(a), t.constant(b)).data, naive_matmul(a, b), atol=1e-12, rtol=0)


def test_matmul_shape_error_names_both_shapes():
    t = nx.Tape()
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(t.constant(np.zeros((2, 3))), t.constant(np.zeros((2, 3))))


def test_relu_and_add_identity():
    t = nx.Tape()
    assert nx.relu(t.constant([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(nx.add(t.constant(x), t.constant(np.zeros((2, 3)))).data, x)
    with pytest.raises(DimensionError):
        nx.add(t.constant(np.zeros((2, 3))), t.constant(np.zeros((3, 2))))


def test_layer_norm_constant_row_gives_shift():
    t = nx.Tape()
    out = nx.layer_norm(t.constant(np.full((1, 4), 7.0)), t.constant([2.0] * 4), t.constant([0.5, 1.0, 1.5, 2.0]))
    np.testing.assert_array_equal(out.data, [[0.5, 1.0, 1.5, 2.0]])


def test_log_softmax_cases():
    t = nx.Tape()
    np.testing.assert_allclose(nx.log_softmax(t.constant([[0.0, 0.0]])).data, [[np.log(0.5)] * 2], rtol=0, atol=1e-15)
    big = nx.log_softmax(t.constant([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(big))
    assert big[0, 0] == pytest.approx(0.0, abs=1e-15)
    assert big[0, 1] == pytest.approx(-1000.0, abs=1e-9)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 8)), elements=st.floats(-50, 50)))
def test_log_softmax_rows_sum_to_one(z):
    t = nx.Tape()
    sums = np.exp(nx.log_softmax(t.constant(z)).data).sum(axis=1)
    np.testing.assert_allclose(sums, 1.0, atol=1e-12, rtol=0)


def test_nll_cases():
    t = nx.Tape()
    half = np.log(0.5)
    assert float(nx.nll(t.constant([[half, half]]), [0]).data) == pytest.approx(np.log(2), abs=1e-15)
    assert float(nx.nll(t.constant([[0.0, -np.inf]]), [0]).data) == 0.0
    rng = np.random.default_rng(1)
    lp = nx.log_softmax(t.constant(rng.normal(size=(2, 3)))).data
    both = float(nx.nll(t.constant(lp), [2, 0]).data)
    singles = [float(nx.nll(t.constant(lp[i : i + 1]), [y]).data) for i, y in enumerate([2, 0])]
    assert both == pytest.approx(sum(singles) / 2, abs=1e-12)
    with pytest.raises(IndexError):
        nx.nll(t.constant(lp), [0, 3])


def test_backward_hand_calculus():
    t = nx.Tape()
    x = t.param(np.array([3.0]), "x")
    assert t.backward(nx.sum_all(nx.mul(x, x)))[x].tolist() == [6.0]


def test_backward_disconnected_param_is_zero():
    t = nx.Tape()
    x = t.param(np.array([1.0, 2.0]))
    unused = t.param(np.ones((2, 2)))
    grads = t.backward(nx.sum_all(x))
    np.testing.assert_array_equal(grads[unused], np.zeros((2, 2)))


def test_backward_rejects_non_scalar():
    t = nx.Tape()
    x = t.param(np.ones(3))
    with pytest.raises(ContractError):
        t.backward(nx.relu(x))


def test_finite_diff_basics():
    x = np.array([3.0])
    g = nx.finite_diff_grad(lambda: float(x[0] ** 2), {"x": x}, 1e-5)
    assert g["x"][0] == pytest.approx(6.0, abs=1e-6)
    assert x[0] == 3.0
    c = np.array([1.0, -2.0])
    np.testing.assert_allclose(nx.finite_diff_grad(lambda: 4.0, {"c": c})["c"], 0.0, atol=1e-9)


def _two_layer_net(rng, b=4, d_in=5, d_h=6, C=3):
    arrays = {
        "w1": rng.normal(size=(d_in, d_h)),
        "b1": rng.normal(size=d_h),
        "scale": rng.normal(size=d_h),
        "shift": rng.normal(size=d_h),
        "w2": rng.normal(size=(d_h, C)),
        "b2": rng.normal(size=C),
    }
    x = rng.normal(size=(b, d_in))
    y = rng.integers(C, size=b)

    def build():
        t = nx.Tape()
        p = {k: t.param(v, k) for k, v in arrays.items()}
        h = nx.relu(nx.layer_norm(nx.add(nx.matmul(t.constant(x), p["w1"]), p["b1"]), p["scale"], p["shift"]))
        z = nx.add(nx.mul_scalar(nx.matmul(h, p["w2"]), 0.7), p["b2"])
        return t, p, nx.nll(nx.log_softmax(z), y)

    return arrays, build


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_backward_matches_finite_differences(seed):
    arrays, build = _two_layer_net(np.random.default_rng(seed))
    tape, params, loss = build()
    grads = tape.backward(loss)
    fd = nx.finite_diff_grad(lambda: float(build()[2].data), arrays, 1e-5)
    for name, leaf in params.items():
        assert rel_error(grads[leaf], fd[name]) <= 1e-4, name


def test_backward_is_bitwise_deterministic():
    arrays, build = _two_layer_net(np.random.default_rng(3))
    t1, p1, l1 = build()
    t2, p2, l2 = build()
    g1, g2 = t1.backward(l1), t2.backward(l2)
    for name in arrays:
        assert g1[p1[name]].tobytes() == g2[p2[name]].tobytes()


def test_transpose_and_bias_gradients():
    rng = np.random.default_rng(5)
    w, b, x = rng.normal(size=(3, 4)), rng.normal(size=3), rng.normal(size=(2, 4))

    def build():
        t = nx.Tape()
        pw, pb = t.param(w), t.param(b)
        return t, pw, pb, nx.sum_all(nx.mul(nx.add(nx.matmul(t.constant(x), nx.transpose(pw)), pb), nx.add(nx.matmul(t.constant(x), nx.transpose(pw)), pb)))

    t, pw, pb, loss = build()
    g = t.backward(loss)
    fd = nx.finite_diff_grad(lambda: float(build()[3].data), {"w": w, "b": b})
    assert rel_error(g[pw], fd["w"]) < 1e-6
    assert rel_error(g[pb], fd["b"]) < 1e-6


def test_affine_is_bitwise_matmul_plus_bias():
    rng = np.random.default_rng(6)
    x, w, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3)), rng.normal(size=3)
    c = rng.normal(size=(5, 3))

    def run(fused):
        t = nx.Tape()
        px, pw, pb = t.param(x), t.param(w), t.param(b)
        y = nx.affine(px, pw, pb) if fused else nx.add(nx.matmul(px, pw), pb)
        g = t.backward(nx.sum_all(nx.mul(y, t.constant(c))))
        return [y.data] + [g[p] for p in (px, pw, pb)]

    for a, b_ in zip(run(True), run(False)):
        assert a.tobytes() == b_.tobytes()
    with pytest.raises(DimensionError, match="bias"):
        t = nx.Tape()
        nx.affine(t.param(x), t.param(w), t.param(np.zeros(4)))
