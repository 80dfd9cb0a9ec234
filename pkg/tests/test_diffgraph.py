import math

import numpy as np
import pytest

from tsekit import diffgraph as dg


def finite_difference(f, x, h=1e-6):
    """Central-difference gradient of a scalar function of one array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def test_matmul_hand_example():
    tape = dg.Tape()
    a = tape.input("a", [[1.0, 2.0], [3.0, 4.0]])
    b = tape.input("b", [[1.0], [1.0]])
    tape.mark_output("y", dg.matmul(a, b))
    out = dg.tape_eval(tape)
    assert np.array_equal(out["y"], [[3.0], [7.0]])


def test_log_softmax_symmetry():
    tape = dg.Tape()
    y = dg.log_softmax(tape.const([0.0, 0.0]))
    assert np.allclose(y.value, [math.log(0.5)] * 2, atol=1e-15)


def test_logsumexp_no_overflow():
    tape = dg.Tape()
    y = dg.logsumexp(tape.const([1000.0, 1000.0]))
    assert float(y.value) == pytest.approx(1000.0 + math.log(2.0), abs=1e-9)


def test_backward_quadratic():
    tape = dg.Tape()
    x = tape.param("x", [1.0, 2.0])
    loss = dg.sum_(dg.square(x))
    grads = dg.backward(tape, loss)
    assert np.array_equal(grads["x"], [2.0, 4.0])


def test_cosine_gradient_zero_at_equal_inputs():
    # cos(u, v) is stationary in both arguments at u == v
    def build(u_val, v_val):
        tape = dg.Tape()
        u = tape.param("u", u_val)
        v = tape.param("v", v_val)
        num = dg.dot(u, v)
        cosine = dg.div(num, dg.mul(dg.l2_norm(u), dg.l2_norm(v)))
        return tape, cosine

    tape, cosine = build([1.0, 0.0], [1.0, 0.0])
    grads = dg.backward(tape, cosine)
    assert np.allclose(grads["u"], 0.0, atol=1e-12)
    assert np.allclose(grads["v"], 0.0, atol=1e-12)

    def f_u(u):
        t, c = build(u, [1.0, 0.0])
        return float(c.value)

    fd = finite_difference(f_u, np.array([1.0, 0.0]))
    assert np.allclose(fd, 0.0, atol=1e-6)


def test_log_softmax_nll_gradient_is_softmax_minus_onehot():
    logits = np.array([0.3, -1.2, 2.0])
    target = 1
    tape = dg.Tape()
    z = tape.param("z", logits)
    loss = -dg.gather_index(dg.log_softmax(z), target)
    grads = dg.backward(tape, loss)
    softmax = np.exp(logits - logits.max())
    softmax /= softmax.sum()
    onehot = np.eye(3)[target]
    assert np.allclose(grads["z"], softmax - onehot, atol=1e-12)

    def f(z_val):
        t = dg.Tape()
        zz = t.param("z", z_val)
        return float((-dg.gather_index(dg.log_softmax(zz), target)).value)

    assert np.allclose(finite_difference(f, logits), softmax - onehot, atol=1e-6)


def test_grad_check_quadratic_tight():
    tape = dg.Tape()
    x0 = np.array([0.5, -1.5, 2.0])
    x = tape.param("x", x0)
    loss = dg.sum_(dg.square(x))
    assert dg.grad_check(tape, loss, {"x": x0}, h=1e-5) < 1e-8


def test_grad_check_catches_corrupted_adjoint(monkeypatch):
    orig = dg._VJP["tanh"]
    monkeypatch.setitem(dg._VJP, "tanh",
                        lambda attrs, out, v, g: tuple(2.0 * gi for gi in orig(attrs, out, v, g)))
    tape = dg.Tape()
    x0 = np.array([0.3, -0.7])
    x = tape.param("x", x0)
    loss = dg.sum_(dg.square(dg.tanh(x)))
    assert dg.grad_check(tape, loss, {"x": x0}, h=1e-5) > 1e-2


OPS_FOR_BATTERY = [
    ("add", lambda t, a, b: dg.add(a, b), 2),
    ("sub", lambda t, a, b: dg.sub(a, b), 2),
    ("mul", lambda t, a, b: dg.mul(a, b), 2),
    ("div", lambda t, a, b: dg.div(a, b + 3.0), 2),
    ("matmul", lambda t, a, b: dg.matmul(a, b), 2),
    ("transpose", lambda t, a: dg.transpose(a), 1),
    ("reshape", lambda t, a: dg.reshape(a, (a.value.size,)), 1),
    ("concat", lambda t, a, b: dg.concat([a, b], axis=0), 2),
    ("slice", lambda t, a: dg.slice_axis(a, 0, 1, 3), 1),
    ("sum_axis", lambda t, a: dg.sum_(a, axis=1), 1),
    ("mean_axis", lambda t, a: dg.mean(a, axis=0), 1),
    ("broadcast", lambda t, a: dg.broadcast_to(dg.reshape(a, (1, *a.value.shape)), (3, *a.value.shape)), 1),
    ("tanh", lambda t, a: dg.tanh(a), 1),
    ("sigmoid", lambda t, a: dg.sigmoid(a), 1),
    ("relu", lambda t, a: dg.relu(a + 1.5), 1),  # shift keeps points off the kink
    ("exp", lambda t, a: dg.exp(a), 1),
    ("log", lambda t, a: dg.log(a + 3.0), 1),
    ("sqrt", lambda t, a: dg.sqrt(a + 3.0), 1),
    ("square", lambda t, a: dg.square(a), 1),
    ("l2_norm", lambda t, a: dg.l2_norm(a + 2.0), 1),
    ("log_softmax", lambda t, a: dg.log_softmax(a), 1),
    ("scale", lambda t, a: dg.scale(a, -2.5), 1),
    ("permute", lambda t, a: dg.permute(dg.reshape(a, (2, 2, 3)), (2, 0, 1)), 1),
]


@pytest.mark.parametrize("name,builder,arity", OPS_FOR_BATTERY,
                         ids=[o[0] for o in OPS_FOR_BATTERY])
def test_per_op_gradients_match_finite_differences(name, builder, arity):
    rng = np.random.default_rng(hash(name) % 2**32)
    vals = [rng.uniform(-1.0, 1.0, (3, 4)) for _ in range(arity)]
    if name == "matmul":
        vals = [rng.uniform(-1.0, 1.0, (3, 4)), rng.uniform(-1.0, 1.0, (4, 2))]
    tape = dg.Tape()
    nodes = [tape.param(f"p{i}", v) for i, v in enumerate(vals)]
    out = builder(tape, *nodes)
    loss = dg.sum_(dg.square(out)) if out.value.shape != () else dg.square(out)
    err = dg.grad_check(tape, loss, {f"p{i}": v for i, v in enumerate(vals)}, h=1e-5)
    assert err < 1e-5, f"{name}: {err}"


def test_gather_rows_gradients():
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((4, 5))
    tape = dg.Tape()
    x = tape.param("x", x0)
    loss = dg.sum_(dg.square(dg.gather_rows(x, [1, 0, 4, 2])))
    assert dg.grad_check(tape, loss, {"x": x0}, h=1e-5) < 1e-6


def test_backward_linearity():
    rng = np.random.default_rng(1)
    x0 = rng.standard_normal(6)

    def grads_of(a, b):
        tape = dg.Tape()
        x = tape.param("x", x0)
        l1 = dg.sum_(dg.square(x))
        l2 = dg.sum_(dg.mul(dg.tanh(x), x))
        loss = dg.add(dg.scale(l1, a), dg.scale(l2, b))
        return dg.backward(tape, loss)["x"]

    g_combo = grads_of(2.0, -0.5)
    g1 = grads_of(1.0, 0.0)
    g2 = grads_of(0.0, 1.0)
    assert np.allclose(g_combo, 2.0 * g1 - 0.5 * g2, atol=1e-12)


def test_reeval_bitwise_identical():
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal((3, 3))
    tape = dg.Tape()
    x = tape.param("x", x0)
    y = dg.matmul(dg.tanh(x), dg.sigmoid(x))
    loss = dg.mean(y)
    tape.mark_output("y", y)
    first = dg.tape_eval(tape, {"x": x0})["y"].copy()
    g_first = dg.backward(tape, loss)["x"].copy()
    second = dg.tape_eval(tape, {"x": x0})["y"]
    g_second = dg.backward(tape, loss)["x"]
    assert first.tobytes() == second.tobytes()
    assert g_first.tobytes() == g_second.tobytes()


def test_log_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    for _ in range(25):
        z = rng.uniform(-50, 50, (4, 7))
        tape = dg.Tape()
        out = dg.log_softmax(tape.const(z))
        sums = np.exp(out.value).sum(axis=-1)
        assert np.allclose(sums, 1.0, atol=1e-12)


def test_unused_param_gets_zero_gradient():
    tape = dg.Tape()
    x = tape.param("x", [1.0, 2.0])
    unused = tape.param("unused", np.ones((2, 2)))
    loss = dg.sum_(dg.square(x))
    grads = dg.backward(tape, loss)
    assert np.array_equal(grads["unused"], np.zeros((2, 2)))


def test_non_scalar_loss_rejected():
    tape = dg.Tape()
    x = tape.param("x", [1.0, 2.0])
    with pytest.raises(dg.GraphError, match="scalar"):
        dg.backward(tape, dg.square(x))


def test_shape_mismatch_reports_op():
    tape = dg.Tape()
    a = tape.const(np.ones((2, 3)))
    b = tape.const(np.ones((2, 3)))
    with pytest.raises(dg.GraphError, match="matmul"):
        dg.matmul(a, b)


def test_non_finite_output_reports_node():
    tape = dg.Tape()
    x = tape.const([-1.0])
    with pytest.raises(dg.GraphError, match="non-finite"):
        dg.log(x)


def test_gradient_sum_accumulates_over_reuse():
    tape = dg.Tape()
    x = tape.param("x", [2.0])
    loss = dg.sum_(dg.add(dg.mul(x, x), dg.scale(x, 3.0)))  # x^2 + 3x
    grads = dg.backward(tape, loss)
    assert np.allclose(grads["x"], [7.0])


def test_rebind_shape_checked():
    tape = dg.Tape()
    tape.param("x", np.ones(3))
    with pytest.raises(dg.GraphError, match="shape"):
        tape.rebind("x", np.ones(4))
