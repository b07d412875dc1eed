import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cecfscil.numerics import (
    Graph, KinkError, NonFiniteError, SgdState, ShapeError, backward, forward, grad_check,
    load_params, params_digest, params_from_json, params_to_json, save_params, sgd_step,
)


def unary(op, **kw):
    g = Graph()
    getattr(g, op)(g.param("x"), **kw)
    return g


def test_relu_forward():
    assert forward(unary("relu"), {"x": np.array([-1.0, 0.0, 2.0])}).tolist() == [0, 0, 2]


def test_softmax_forward_analytic():
    out = forward(unary("softmax_rows"), {"x": np.array([0.0, math.log(2)])})
    np.testing.assert_allclose(out, [1 / 3, 2 / 3], atol=1e-15)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def naive_conv(x, w):
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    out = np.zeros((n, co, h - kh + 1, wd - kw + 1))
    for b in range(n):
        for o in range(co):
            for r in range(h - kh + 1):
                for c in range(wd - kw + 1):
                    out[b, o, r, c] = np.sum(x[b, :, r:r + kh, c:c + kw] * w[o])
    return out


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 4))
    g = Graph()
    g.matmul(g.const("a"), g.const("b"))
    np.testing.assert_allclose(forward(g, {"a": a, "b": b}), naive_matmul(a, b), atol=1e-14)


def test_conv_matches_loop():
    rng = np.random.default_rng(2)
    x, w = rng.normal(size=(2, 3, 6, 5)), rng.normal(size=(4, 3, 3, 2))
    g = Graph()
    g.conv2d_valid(g.const("x"), g.const("w"))
    np.testing.assert_allclose(forward(g, {"x": x, "w": w}), naive_conv(x, w), atol=1e-12)


def test_backward_linear_scale():
    loss, grads = backward(unary("scale", s=3.0), {"x": np.array(5.0)})
    assert loss == 15.0
    assert grads["x"] == pytest.approx(3.0)


def test_cross_entropy_symmetric_two_way():
    g = Graph()
    g.cross_entropy(g.param("z"), g.const("y"))
    loss, grads = backward(g, {"z": np.array([0.0, 0.0]), "y": np.array([0])})
    assert loss == pytest.approx(math.log(2), abs=1e-15)
    np.testing.assert_allclose(grads["z"], [-0.5, 0.5], atol=1e-15)


def test_constants_get_no_gradient():
    g = Graph()
    g.mean(g.multiply(g.param("a"), g.const("b")))
    _, grads = backward(g, {"a": np.ones(3), "b": np.arange(3.0)})
    assert set(grads) == {"a"}
    np.testing.assert_allclose(grads["a"], np.arange(3.0) / 3)


def test_non_scalar_root_rejected():
    with pytest.raises(ShapeError):
        backward(unary("relu"), {"x": np.ones(3)})


def test_shape_error_names_node():
    g = Graph()
    g.matmul(g.const("a"), g.const("b"))
    with pytest.raises(ShapeError, match=r"node 2 \(matmul\)"):
        forward(g, {"a": np.ones((2, 3)), "b": np.ones((2, 3))})


def test_non_finite_is_an_error():
    g = Graph()
    g.scale(g.const("a"), 1e308)
    with pytest.raises(NonFiniteError):
        forward(g, {"a": np.array([10.0])})


def test_unbound_leaf():
    with pytest.raises(KeyError):
        forward(unary("relu"), {})


def test_grad_check_identity_is_exact():
    g = Graph()
    g.scale(g.mean(g.param("x")), 6.0)   # sum of 6 entries
    err = grad_check(g, {"x": np.random.default_rng(0).normal(size=(2, 3))}, 1e-5)
    assert err <= 1e-10


def test_grad_check_rejects_kinks():
    with pytest.raises(KinkError):
        g = Graph()
        g.mean(g.relu(g.param("x")))
        grad_check(g, {"x": np.array([1.0, 1e-6])}, 1e-5)


def test_grad_check_detects_wrong_gradient(monkeypatch):
    import cecfscil.numerics as nm

    orig = nm._backward_op

    def broken(node, ins, out, g):
        res = orig(node, ins, out, g)
        return [r * 1.5 if r is not None else None for r in res] if node.op == "relu" else res

    monkeypatch.setattr(nm, "_backward_op", broken)
    g = Graph()
    g.mean(g.relu(g.param("x")))
    assert grad_check(g, {"x": np.array([1.0, 2.0])}, 1e-5) > 0.1


# --- optimiser ---------------------------------------------------------

def test_sgd_plain_step():
    p, s = sgd_step({"p": np.array(0.0)}, {"p": np.array(1.0)}, SgdState(0.1))
    assert p["p"] == pytest.approx(-0.1)


def test_sgd_zero_grad_fixed_point():
    p0 = {"p": np.array([1.0, -2.0])}
    p, _ = sgd_step(p0, {"p": np.zeros(2)}, SgdState(0.5, 0.0))
    np.testing.assert_array_equal(p["p"], p0["p"])


def test_sgd_momentum_unrolled():
    st_ = SgdState(0.1, 0.9)
    p = {"p": np.array(0.0)}
    p, st_ = sgd_step(p, {"p": np.array(1.0)}, st_)
    assert p["p"] == pytest.approx(-0.1)
    p, st_ = sgd_step(p, {"p": np.array(1.0)}, st_)
    assert st_.velocity["p"] == pytest.approx(1.9)
    assert p["p"] == pytest.approx(-0.29)


def test_sgd_is_pure():
    p0, v0 = {"p": np.array([1.0])}, {"p": np.array([0.5])}
    state = SgdState(0.1, 0.9, dict(v0))
    sgd_step(p0, {"p": np.array([1.0])}, state)
    assert p0["p"][0] == 1.0 and state.velocity["p"][0] == 0.5


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeError):
        sgd_step({"p": np.zeros(2)}, {"p": np.zeros(3)}, SgdState(0.1))


# --- invariants -------------------------------------------------------

finite = st.floats(-50, 50, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite), st.sampled_from([0.0, -7.5, 1000.0]))
def test_softmax_rows_sum_and_shift(x, c):
    g = unary("softmax_rows")
    y = forward(g, {"x": x})
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(forward(g, {"x": x + c}), y, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (4, 3), elements=finite))
def test_l2_normalize_unit_rows(x):
    y = forward(unary("l2_normalize_rows"), {"x": x})
    norms = np.linalg.norm(x, axis=1)
    np.testing.assert_allclose(np.linalg.norm(y[norms > 0], axis=1), 1.0, atol=1e-9)
    assert np.all(y[norms == 0] == 0)


def test_l2_normalize_zero_row_zero_gradient():
    g = Graph()
    g.mean(g.l2_normalize_rows(g.param("x")))
    _, grads = backward(g, {"x": np.array([[0.0, 0.0], [1.0, 2.0]])})
    np.testing.assert_array_equal(grads["x"][0], [0.0, 0.0])


def test_relu_subgradient_at_zero():
    g = Graph()
    g.mean(g.relu(g.param("x")))
    _, grads = backward(g, {"x": np.array([0.0, 1.0])})
    assert grads["x"][0] == 0.0


def test_forward_backward_bit_deterministic():
    rng = np.random.default_rng(3)
    b = {"x": rng.normal(size=(2, 1, 6, 6)), "w": rng.normal(size=(2, 1, 3, 3)), "y": np.array([0, 1])}

    def run():
        g = Graph()
        h = g.avgpool2x2(g.conv2d_valid(g.const("x"), g.param("w")))
        g.cross_entropy(g.reshape(h, (2, 8)), g.const("y"))
        return backward(g, b)

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2 and g1["w"].tobytes() == g2["w"].tobytes()


# --- serialisation ------------------------------------------------------

def test_params_json_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(4)
    p = {"a": rng.normal(size=(3, 2)), "b": np.array([1 / 3, 1e-300, -0.0, 123456789.123456789])}
    save_params(tmp_path / "p.json", p, {"kind": "test"})
    q, meta = load_params(tmp_path / "p.json")
    assert meta == {"kind": "test"}
    for k in p:
        assert q[k].tobytes() == p[k].tobytes() or np.array_equal(q[k], p[k])
        assert q[k].shape == p[k].shape
    assert params_digest(p) == params_digest(q)


def test_params_json_uses_17_significant_digits():
    doc = json.loads(params_to_json({"x": np.array([0.1])}))
    text = params_to_json({"x": np.array([0.1])})
    assert "0.10000000000000001" in text
    assert doc["params"][0]["shape"] == [1]


def test_digest_sensitive_and_order_free():
    p = {"a": np.array([1.0, 2.0]), "b": np.array([[3.0]])}
    q = {"b": p["b"].copy(), "a": p["a"].copy()}
    assert params_digest(p) == params_digest(q)
    q["a"][0] += 1e-12
    assert params_digest(p) != params_digest(q)


def test_params_from_json_rejects_bad_shape():
    with pytest.raises(ShapeError):
        params_from_json('{"params": [{"name": "a", "shape": [2, 2], "values": [1, 2, 3]}]}')
