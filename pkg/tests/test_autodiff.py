import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from parampde.autodiff import Jet2, JetLayout, NotOnTape, Tape, jet_lift, jet_sum, jet_tanh, param_gradient


def test_jet_lift_seed():
    (j,) = jet_lift(np.array([3.0]), np.array([[1.0]]))
    assert j.val == 3.0
    np.testing.assert_array_equal(j.d1, [1.0])
    np.testing.assert_array_equal(j.d2, [0.0])


def test_jet_lift_identity_directions():
    a, b = jet_lift(np.array([1.0, 2.0]), np.eye(2))
    np.testing.assert_array_equal(a.d1, [1.0, 0.0])
    np.testing.assert_array_equal(b.d1, [0.0, 1.0])


def test_zero_directions_give_zero_derivatives():
    a, b = jet_lift(np.array([0.3, -1.2]), np.zeros((2, 2)))
    out = (a * b).tanh().exp() + a / (b * b + 1.0)
    assert np.all(out.d1 == 0) and np.all(out.d2 == 0)


def test_tanh_simple_cases():
    lay = JetLayout(1)
    c = jet_tanh(Jet2.constant(0.0, lay))
    assert c.val == 0 and np.all(c.d1 == 0) and np.all(c.d2 == 0)
    v = jet_tanh(Jet2.variable(0.0, [1.0], lay))
    assert v.val == 0 and v.d1[0] == 1.0 and v.d2[0] == 0.0


def test_tanh_against_finite_differences():
    lay = JetLayout(1)
    j = jet_tanh(Jet2.variable(0.5, [1.0], lay))
    h = 1e-5
    fd1 = (np.tanh(0.5 + h) - np.tanh(0.5 - h)) / (2 * h)
    fd2 = (np.tanh(0.5 + h) - 2 * np.tanh(0.5) + np.tanh(0.5 - h)) / h**2
    assert abs(j.d1[0] - fd1) < 1e-8
    assert abs(j.d2[0] - fd2) < 1e-6


def _f_numpy(x, y):
    return np.tanh(x * y) + np.exp(0.3 * x) / (1.0 + y * y) + np.log(2.0 + x * x) - 1.0 / (1.5 + np.sin(0.0) + y * y)


def _f_jet(x, y):
    return (x * y).tanh() + (0.3 * x).exp() / (1.0 + y * y) + (2.0 + x * x).log() - 1.0 / (1.5 + y * y)


@settings(max_examples=40, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2))
def test_jet_gradient_and_hessian_match_fd(x0, y0):
    x, y = jet_lift(np.array([x0, y0]), np.eye(2))
    j = _f_jet(x, y)
    assert abs(j.val - _f_numpy(x0, y0)) < 1e-14
    h = 1e-5
    g = [(_f_numpy(x0 + h, y0) - _f_numpy(x0 - h, y0)) / (2 * h),
         (_f_numpy(x0, y0 + h) - _f_numpy(x0, y0 - h)) / (2 * h)]
    np.testing.assert_allclose(j.d1, g, rtol=1e-7, atol=1e-8)
    h = 1e-4
    hxx = (_f_numpy(x0 + h, y0) - 2 * _f_numpy(x0, y0) + _f_numpy(x0 - h, y0)) / h**2
    hyy = (_f_numpy(x0, y0 + h) - 2 * _f_numpy(x0, y0) + _f_numpy(x0, y0 - h)) / h**2
    hxy = (_f_numpy(x0 + h, y0 + h) - _f_numpy(x0 + h, y0 - h) - _f_numpy(x0 - h, y0 + h)
           + _f_numpy(x0 - h, y0 - h)) / (4 * h * h)
    np.testing.assert_allclose(j.hessian(), [[hxx, hxy], [hxy, hyy]], rtol=1e-4, atol=1e-5)


def test_pair_subset_layout():
    lay = JetLayout(3, [(1, 1), (1, 2)])
    x = [Jet2.variable(v, np.eye(3)[i], lay) for i, v in enumerate([0.2, 0.7, -0.4])]
    out = x[0] * x[1] * x[1] * x[2]
    # d2/dx1^2 = 2 x0 x2, d2/dx1dx2 = 2 x0 x1
    assert abs(out.second(1, 1) - 2 * 0.2 * -0.4) < 1e-15
    assert abs(out.second(1, 2) - 2 * 0.2 * 0.7) < 1e-15
    with pytest.raises(KeyError):
        out.second(0, 0)


def test_softplus_and_sigmoid_derivatives():
    lay = JetLayout(1)
    for v in (-3.0, 0.0, 2.5):
        sp = Jet2.variable(v, [1.0], lay).softplus(0.7)
        s = 1.0 / (1.0 + np.exp(-0.7 * v))
        assert abs(sp.d1[0] - s) < 1e-14
        assert abs(sp.d2[0] - 0.7 * s * (1 - s)) < 1e-14
        sg = Jet2.variable(v, [1.0], lay).sigmoid()
        s1 = 1.0 / (1.0 + np.exp(-v))
        assert abs(sg.val - s1) < 1e-15
        assert abs(sg.d1[0] - s1 * (1 - s1)) < 1e-15


def test_jet_sum():
    lay = JetLayout(1)
    a = Jet2.variable(1.0, [1.0], lay)
    s = jet_sum([a, a, a])
    assert s.val == 3.0 and s.d1[0] == 3.0


# ---------------------------------------------------------------------------
# reverse tape


def test_tape_square_gradient():
    tape = Tape()
    th = tape.param(np.array([3.0]))
    loss = tape.sum(tape.square(th))
    assert np.allclose(param_gradient(tape, loss, [th]), [6.0])


def test_tape_independent_parameter_has_zero_gradient():
    tape = Tape()
    a = tape.param(np.array([1.5]))
    b = tape.param(np.array([-2.0]))
    loss = tape.sum(tape.square(a))
    g = param_gradient(tape, loss, [a, b])
    assert g[1] == 0.0


def test_tape_rejects_foreign_result():
    t1, t2 = Tape(), Tape()
    x = t1.param(np.array([1.0]))
    y = t1.sum(tape_sq := t1.square(x))
    assert tape_sq.tape is t1
    with pytest.raises(NotOnTape):
        t2.backward(y)


def _taped_jet_loss(w, b, x0):
    """sum over batch and channels of combine(tanh(x W^T + b))^2 with x a jet."""
    lay = JetLayout(2)
    xs = [Jet2.variable(x0[:, i], np.eye(2)[i], lay) for i in range(2)]
    xj = Jet2(np.stack([j.c for j in xs], axis=-1), lay)
    tape = Tape()
    W, B = tape.param(w), tape.param(b)
    h = tape.tanh(tape.dense([(tape.const_jet(xj), W)], B))
    h2 = tape.mul(h, h)
    coef = np.array([1.0, 0.5, -0.3, 0.2, 0.7, 0.1])[:, None, None]
    y = tape.combine(h2, coef * np.ones((1, 1, w.shape[0])))
    loss = tape.sum(tape.square(y), 1.0 / len(x0))
    return tape, loss, [W, B]


def test_tape_gradient_through_jets_matches_fd():
    g = np.random.default_rng(0)
    w, b, x0 = g.normal(size=(3, 2)), g.normal(size=3), g.normal(size=(7, 2))
    tape, loss, params = _taped_jet_loss(w, b, x0)
    grad = param_gradient(tape, loss, params)
    theta = np.concatenate([w.ravel(), b])
    h = 1e-6
    for i in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        fp = _taped_jet_loss(tp[:6].reshape(3, 2), tp[6:], x0)[1].value
        fm = _taped_jet_loss(tm[:6].reshape(3, 2), tm[6:], x0)[1].value
        fd = (fp - fm) / (2 * h)
        assert abs(grad[i] - fd) <= 1e-6 * max(1.0, abs(fd))


def test_tape_release_frees_ops():
    tape = Tape()
    a = tape.param(np.ones(3))
    loss = tape.sum(tape.square(a))
    param_gradient(tape, loss, [a])
    assert len(tape._ops) == 0
