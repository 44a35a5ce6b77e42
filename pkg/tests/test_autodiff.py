import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowdro.autodiff import (
    ParamStore,
    Tape,
    adam_step,
    checkpoint_text,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
    tape_backward,
    tape_eval,
)
from flowdro.errors import NonFiniteError, ShapeError


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def fd_grad(f, x, h=1e-4):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def test_square():
    tape = Tape(checked=True)
    x = tape.input(3.0)
    tape.mul(x, x)
    assert tape_eval(tape, [np.array(3.0)]) == 9.0
    (g,) = tape_backward(tape)
    assert g == 6.0


def test_softplus_at_zero():
    tape = Tape(checked=True)
    x = tape.input(0.0)
    y = tape.softplus(x)
    assert y.value == pytest.approx(math.log(2) / 20, rel=1e-15)
    (g,) = tape_backward(tape)
    assert g == pytest.approx(0.5)


def test_identity_network():
    tape = Tape()
    x = tape.input(np.array([1.5, -2.0]))
    assert np.array_equal(tape.output.value, x.value)


def test_backward_errors():
    tape = Tape()
    with pytest.raises(RuntimeError):
        tape_backward(tape)
    x = tape.input(np.ones(3))
    tape.sqnorm(x)
    with pytest.raises(ShapeError):
        tape_backward(tape, seed=np.ones(2))


def test_input_shape_mismatch():
    tape = Tape()
    x = tape.input(np.ones(3))
    tape.sum(x)
    with pytest.raises(ShapeError):
        tape_eval(tape, [np.ones(4)])


def test_checked_mode_traps_nonfinite():
    tape = Tape(checked=True)
    x = tape.input(np.array([800.0]))
    with pytest.raises(NonFiniteError):
        tape.exp(x)
    unchecked = Tape()
    assert np.isinf(unchecked.exp(unchecked.input(np.array([800.0]))).value[0])


def test_add_requires_equal_shapes():
    tape = Tape()
    with pytest.raises(ShapeError):
        tape.add(tape.input(np.ones(2)), tape.input(np.ones(3)))


def _mlp(rng, widths, act):
    store = ParamStore()
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        store.add(f"W{i}", rng.normal(size=(a, b)) / np.sqrt(a))
        store.add(f"b{i}", rng.normal(size=b) * 0.1)
    n_layers = len(widths) - 1

    def build(x_val, labels=None):
        tape = Tape(checked=True)
        h = tape.input(x_val)
        for i in range(n_layers):
            h = tape.affine(h, tape.param(store, f"W{i}"), tape.param(store, f"b{i}"))
            if i < n_layers - 1:
                h = tape.activation(h, act, beta=2.0)
        if labels is None:
            tape.mean(tape.sqnorm(h, axis=1))
        else:
            tape.mean(tape.softmax_xent(h, labels))
        return tape

    return store, build


@pytest.mark.parametrize("seed", range(100))
def test_mlp_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    act = ["softplus", "tanh"][seed % 2]
    d, hdim, c = 2 + seed % 3, 3 + seed % 4, 2 + seed % 3
    store, build = _mlp(rng, [d, hdim, c], act)
    x = rng.normal(size=(4, d))
    labels = rng.integers(0, c, size=4) if seed % 3 else None
    tape = build(x, labels)
    (gx,) = tape_backward(tape)

    def value_at(vec):
        saved = store.flat()
        store.load_flat(vec)
        v = float(tape_eval(tape, [x]))
        store.load_flat(saved)
        return v

    theta = store.flat()
    assert rel_err(store.flat_grad(), fd_grad(value_at, theta)) < 1e-5
    assert rel_err(gx, fd_grad(lambda z: float(tape_eval(tape, [z])), x)) < 1e-5


PRIMITIVES = {
    "softplus": lambda t, x: t.sum(t.softplus(x, beta=3.0)),
    "tanh": lambda t, x: t.sum(t.tanh(x)),
    "relu": lambda t, x: t.sum(t.relu(x)),
    "exp": lambda t, x: t.sum(t.exp(x)),
    "mul": lambda t, x: t.sum(t.mul(x, t.tanh(x))),
    "scale_shift": lambda t, x: t.sum(t.tanh(t.shift(t.scale(x, 1.7), 0.3))),
    "mean_axis0": lambda t, x: t.sum(t.tanh(t.mean(x, axis=0))),
    "sum_axis1": lambda t, x: t.sum(t.tanh(t.sum(x, axis=1))),
    "sqnorm_axis1": lambda t, x: t.sum(t.tanh(t.sqnorm(x, axis=1))),
    "logsumexp": lambda t, x: t.sum(t.tanh(t.logsumexp(x, axis=1))),
    "xent": lambda t, x: t.mean(t.softmax_xent(x, np.array([0, 2, 1]))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    rng = np.random.default_rng(7)
    for _ in range(100):
        x = rng.normal(size=(3, 3))
        if name == "relu":
            x = x + np.sign(x) * 1e-3  # keep away from the kink
        tape = Tape(checked=True)
        PRIMITIVES[name](tape, tape.input(x))
        (g,) = tape_backward(tape)
        fd = fd_grad(lambda z: float(tape_eval(tape, [z])), x)
        assert rel_err(g, fd) < 1e-5


def test_eval_is_pure():
    rng = np.random.default_rng(0)
    store, build = _mlp(rng, [2, 5, 3], "tanh")
    x = rng.normal(size=(6, 2))
    tape = build(x)
    a = tape_eval(tape, [x]).copy()
    b = tape_eval(tape, [x]).copy()
    assert np.array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_adjoints_are_linear_in_the_seed(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 3))
    w = rng.normal(size=(3, 2))
    tape = Tape()
    out = tape.tanh(tape.affine(tape.input(x), tape.const(w)))
    s1, s2 = rng.normal(size=(2, 4, 2))
    (g1,) = tape.backward(out, s1)
    (g2,) = tape.backward(out, s2)
    (g12,) = tape.backward(out, s1 + s2)
    np.testing.assert_allclose(g12, g1 + g2, atol=1e-12)


def test_adjoint_shapes_match_values():
    rng = np.random.default_rng(1)
    store, build = _mlp(rng, [2, 4, 2], "softplus")
    tape = build(rng.normal(size=(5, 2)), np.array([0, 1, 1, 0, 1]))
    tape_backward(tape)
    for v, a in zip(tape.values, tape.adjoints):
        assert v.shape == a.shape
    for name in store.names():
        assert store.grads[name].shape == store[name].shape


def test_adam_zero_gradient_leaves_params():
    store = ParamStore()
    store.add("p", [1.0, -2.0])
    store.accumulate("p", np.zeros(2))
    adam_step(store, lr=0.1)
    assert store.step == 1
    np.testing.assert_array_equal(store["p"], [1.0, -2.0])


def test_adam_first_step():
    store = ParamStore()
    store.add("p", 1.0)
    store.accumulate("p", np.array(1.0))
    adam_step(store, lr=0.1)
    assert store["p"] == pytest.approx(0.9, abs=1e-8)
    assert np.all(store.grads["p"] == 0)


def test_adam_requires_gradients():
    store = ParamStore()
    store.add("p", 1.0)
    with pytest.raises(RuntimeError):
        adam_step(store)


def _train(seed):
    rng = np.random.default_rng(seed)
    store, build = _mlp(rng, [2, 6, 2], "softplus")
    x = rng.normal(size=(16, 2))
    tape = build(x, (x[:, 0] > 0).astype(int))
    for _ in range(20):
        tape_eval(tape, [x])
        tape_backward(tape)
        adam_step(store, lr=1e-2)
    return store


def test_training_is_deterministic():
    a, b = _train(3), _train(3)
    assert a.flat().tobytes() == b.flat().tobytes()


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    store = _train(5)
    path = tmp_path / "ck.json"
    save_checkpoint(store, path)
    back = load_checkpoint(path)
    assert back.names() == store.names()
    for n in store.names():
        assert back[n].tobytes() == store[n].tobytes()
        assert back.m[n].tobytes() == store.m[n].tobytes()
        assert back.v[n].tobytes() == store.v[n].tobytes()
    assert back.step == store.step
    assert checkpoint_text(back) == checkpoint_text(store)


def test_checkpoint_rejects_unknown_version():
    with pytest.raises(ValueError):
        parse_checkpoint('{"format_version": 99, "param_names": [], "shapes": [], "values": []}')
