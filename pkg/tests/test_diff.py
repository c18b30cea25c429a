import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from erpscan import diff
from erpscan.diff import AdamState, ParameterStore, ShapeError, adam_step, layer_backward, layer_forward
from gradcheck import TOL, probe


def _store(shapes, rng):
    s = ParameterStore(shapes, dtype=np.float64)
    s.data[:] = rng.normal(size=s.data.size) * 0.5
    return s


LAYER_CASES = {
    "conv1d": (lambda: [("w", (6, 3, 4)), ("b", (4,))], (2, 16, 3), dict(stride=2)),
    "conv1d_transpose": (lambda: [("w", (6, 4, 3)), ("b", (3,))], (2, 8, 4), dict(stride=2, out_len=16)),
    "dense": (lambda: [("w", (5, 7)), ("b", (7,))], (3, 5), {}),
    "relu": (lambda: [], (3, 11), {}),
    "sigmoid": (lambda: [], (3, 11), {}),
}


@pytest.mark.parametrize("kind", sorted(LAYER_CASES))
def test_layer_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(7)
    shapes_fn, xshape, cfg = LAYER_CASES[kind]
    params = _store(shapes_fn(), rng)
    names = ("w", "b") if len(params) else ()
    x = rng.normal(size=xshape)
    y, _ = layer_forward(kind, params, x, names, **cfg)
    R = rng.normal(size=y.shape)

    def f():
        return float(np.sum(layer_forward(kind, params, x, names, **cfg)[0] * R))

    _, tape = layer_forward(kind, params, x, names, **cfg)
    dx, grads = layer_backward(tape, R, params, accumulate=False)
    arrays = {"x": x}
    analytic = {"x": dx}
    for n in names:
        arrays[n] = params[n]
        analytic[n] = grads[n]
    assert probe(f, arrays, analytic, rng) < TOL


def test_conv_output_shape_halves_time():
    rng = np.random.default_rng(0)
    p = _store([("w", (6, 6, 32)), ("b", (32,))], rng)
    y, _ = layer_forward("conv1d", p, rng.normal(size=(1, 256, 6)), ("w", "b"), stride=2)
    assert y.shape == (1, 128, 32)


def test_transpose_conv_is_adjoint_of_conv():
    rng = np.random.default_rng(1)
    W = rng.normal(size=(6, 5, 7))
    conv = ParameterStore([("w", (6, 5, 7)), ("b", (7,))])
    conv["w"][:] = W
    # transposed layer maps 7 -> 5 channels with the same kernel taps
    convT = ParameterStore([("w", (6, 7, 5)), ("b", (5,))])
    convT["w"][:] = W.transpose(0, 2, 1)
    x = rng.normal(size=(2, 32, 5))
    yv = rng.normal(size=(2, 16, 7))
    cx, _ = layer_forward("conv1d", conv, x, ("w", "b"), stride=2)
    ty, _ = layer_forward("conv1d_transpose", convT, yv, ("w", "b"), stride=2, out_len=32)
    assert abs(np.sum(cx * yv) - np.sum(x * ty)) < 1e-10


def test_relu_and_identity_dense():
    y, _ = layer_forward("relu", None, np.array([[-1.0, 0.0, 2.0]]))
    np.testing.assert_array_equal(y, [[0, 0, 2]])
    p = ParameterStore([("w", (4, 4)), ("b", (4,))])
    p["w"][:] = np.eye(4)
    x = np.arange(8.0).reshape(2, 4)
    np.testing.assert_array_equal(layer_forward("dense", p, x, ("w", "b"))[0], x)


def test_dense_scalar_product_rule():
    p = ParameterStore([("w", (1, 1)), ("b", (1,))])
    p["w"][:] = 3.0
    x = np.array([[2.5]])
    _, tape = layer_forward("dense", p, x, ("w", "b"))
    _, grads = layer_backward(tape, np.array([[4.0]]), p, accumulate=False)
    assert grads["w"][0, 0] == 2.5 * 4.0


@pytest.mark.parametrize("kind", sorted(LAYER_CASES))
def test_zero_upstream_gives_zero_gradients(kind):
    rng = np.random.default_rng(3)
    shapes_fn, xshape, cfg = LAYER_CASES[kind]
    params = _store(shapes_fn(), rng)
    names = ("w", "b") if len(params) else ()
    y, tape = layer_forward(kind, params, rng.normal(size=xshape), names, **cfg)
    dx, grads = layer_backward(tape, np.zeros_like(y), params, accumulate=False)
    assert not dx.any()
    assert all(not g.any() for g in grads.values())


def test_shape_mismatch_raises():
    p = ParameterStore([("w", (4, 3)), ("b", (3,))])
    with pytest.raises(ShapeError):
        layer_forward("dense", p, np.zeros((2, 5)), ("w", "b"))
    _, tape = layer_forward("relu", None, np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        layer_backward(tape, np.zeros((2, 4)))


def test_bernoulli_closed_form_and_limit():
    v, _ = diff.bernoulli_nll(np.full(1536, 0.5), np.full(1536, 0.5))
    assert abs(v - 1536 * math.log(2)) < 1e-6
    t = np.array([0.0, 1.0, 1.0])
    v, _ = diff.bernoulli_nll(t.copy(), t)
    assert v < 1e-5


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    pred = rng.uniform(0.05, 0.95, size=40)
    target = rng.uniform(0, 1, size=40)
    _, g = diff.bernoulli_nll(pred, target)
    assert probe(lambda: diff.bernoulli_nll(pred, target)[0], {"p": pred}, {"p": g}, rng) < TOL

    a = rng.normal(size=40)
    _, g = diff.mse(a, target)
    np.testing.assert_allclose(g, 2 * (a - target))
    assert probe(lambda: diff.mse(a, target)[0], {"a": a}, {"a": g}, rng) < TOL

    m, lv = rng.normal(size=10), rng.normal(size=10)
    _, gm, gl = diff.gaussian_kl_prior(m, lv)
    assert probe(lambda: diff.gaussian_kl_prior(m, lv)[0], {"m": m, "lv": lv}, {"m": gm, "lv": gl}, rng) < TOL

    arrs = {k: rng.normal(size=10) for k in ("mean_a", "logvar_a", "mean_b", "logvar_b")}
    _, g = diff.gaussian_kl_pair(*arrs.values())
    assert probe(lambda: diff.gaussian_kl_pair(*arrs.values())[0], arrs, g, rng) < TOL

    logits = rng.normal(size=(3, 12))
    tgt = np.zeros((3, 12))
    tgt[:, [0, 3, 5, 9, 10]] = 1
    _, g = diff.block_softmax_nll(logits, tgt, (2, 2, 4, 2, 2))
    f = lambda: diff.block_softmax_nll(logits, tgt, (2, 2, 4, 2, 2))[0]
    assert probe(f, {"z": logits}, {"z": g}, rng) < TOL


def test_kl_closed_forms():
    assert diff.gaussian_kl_prior(np.zeros(10), np.zeros(10))[0] == 0.0
    assert diff.gaussian_kl_prior(np.ones(10), np.zeros(10))[0] == 5.0
    z = np.zeros(4)
    assert diff.gaussian_kl_pair(z, z, z, z)[0] == 0.0
    assert diff.gaussian_kl_pair(z, z, np.ones(4), z)[0] == pytest.approx(2.0)
    a = diff.gaussian_kl_pair(z, z, z, np.full(4, 1.0))[0]
    b = diff.gaussian_kl_pair(z, np.full(4, 1.0), z, z)[0]
    assert a != pytest.approx(b)


def test_kl_prior_matches_monte_carlo():
    rng = np.random.default_rng(5)
    m, lv = rng.normal(size=3) * 0.5, rng.normal(size=3) * 0.3
    sd = np.exp(0.5 * lv)
    z = m + sd * rng.standard_normal((1_000_000, 3))
    logq = -0.5 * (((z - m) / sd) ** 2 + lv + math.log(2 * math.pi))
    logp = -0.5 * (z ** 2 + math.log(2 * math.pi))
    mc = float(np.mean(np.sum(logq - logp, axis=1)))
    exact = diff.gaussian_kl_prior(m, lv)[0]
    assert abs(mc - exact) < 0.01 * exact


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8), st.lists(st.floats(-5, 5), min_size=1, max_size=8))
def test_kl_prior_nonnegative(mu, lv):
    n = min(len(mu), len(lv))
    v = diff.gaussian_kl_prior(np.array(mu[:n]), np.array(lv[:n]))[0]
    assert v >= -1e-12


def test_adam_first_step_and_zero_gradient():
    s = ParameterStore([("t", (1,))])
    s.grad[:] = 1.0
    st_ = AdamState()
    adam_step(s, st_)
    assert abs(s.data[0] + 1e-4) < 1e-9
    assert not s.grad.any()
    s2 = ParameterStore([("t", (3,))])
    s2.data[:] = [1.0, 2.0, 3.0]
    st2 = AdamState()
    adam_step(s2, st2)
    np.testing.assert_array_equal(s2.data, [1.0, 2.0, 3.0])
    assert st2.step == 1


def test_adam_is_deterministic():
    def run():
        rng = np.random.default_rng(0)
        s = ParameterStore([("a", (50,)), ("b", (3, 4))], dtype=np.float32)
        s.data[:] = rng.normal(size=s.data.size)
        state = AdamState()
        for _ in range(20):
            s.grad[:] = rng.normal(size=s.data.size)
            adam_step(s, state)
        return s.data.copy()

    np.testing.assert_array_equal(run(), run())


def test_adam_matches_textbook_update():
    rng = np.random.default_rng(1)
    s = ParameterStore([("a", (40,))], dtype=np.float64)
    s.data[:] = rng.normal(size=40)
    theta, m, v = s.data.copy(), np.zeros(40), np.zeros(40)
    state = AdamState(lr=1e-3)
    for t in range(1, 31):
        g = rng.normal(size=40)
        s.grad[:] = g
        adam_step(s, state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta -= 1e-3 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(s.data, theta, rtol=1e-10, atol=1e-12)


def test_store_blob_roundtrip_and_glorot():
    rng = np.random.default_rng(0)
    s = ParameterStore([("l.w", (20, 30)), ("l.b", (30,))], dtype=np.float32)
    diff.glorot_init(s, rng)
    lim = math.sqrt(6 / 50)
    assert np.all(np.abs(s["l.w"]) <= lim) and not s["l.b"].any()
    t = ParameterStore([("l.w", (20, 30)), ("l.b", (30,))], dtype=np.float32)
    t.load_blob(s.to_blob())
    assert t.digest() == s.digest()
