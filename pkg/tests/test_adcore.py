import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deeptfc import adcore as ad, mlp

import oracles


def rel_err(a, b, floor=1.0):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor)))


# --- jets -----------------------------------------------------------------


def test_tanh_jet_at_zero():
    j = ad.eval_jet(lambda x: ad.tanh(x), [0.0], {0})
    assert j.value == 0.0 and j.first[0] == 1.0 and j.second_pure[0] == 0.0


def test_cube_jet():
    j = ad.eval_jet(lambda x: x**3, [2.0], {0})
    assert (j.value, j.first[0], j.second_pure[0]) == (8.0, 12.0, 12.0)


def test_jet_has_entry_for_every_requested_slot_only():
    j = ad.eval_jet(lambda x, y, z: x * y + z, [1.0, 2.0, 3.0], {0, 2})
    assert set(j.first) == {0, 2} and set(j.second_pure) == {0, 2}
    with pytest.raises(KeyError):
        j.first[1]
    assert j.first[0] == 2.0 and j.first[2] == 1.0


def test_jet_slot_out_of_range():
    with pytest.raises(ValueError):
        ad.eval_jet(lambda x: x, [1.0], {1})


def test_network_second_partials_match_fd():
    spec = mlp.NetworkSpec(2, (10,), 1, "tanh")
    p = mlp.xavier_init(spec, 3)
    net = mlp.bind(spec, p)
    j = ad.eval_jet(lambda x, y: net([x, y]), [0.3, 0.7], {0, 1})
    f = lambda q: oracles.mlp_value(spec, p.theta, np.atleast_2d(q))[0]
    h = 1e-4
    for k in (0, 1):
        e = np.eye(2)[k] * h
        q = np.array([0.3, 0.7])
        fd2 = (f(q + e) - 2 * f(q) + f(q - e)) / h**2
        assert rel_err(j.second_pure[k], fd2, floor=1e-3) <= 1e-5


def test_network_jet_matches_hand_forward_mode():
    spec = mlp.NetworkSpec(3, (7, 5), 1, "sigmoid")
    p = mlp.xavier_init(spec, 11)
    p.theta[:] += np.random.default_rng(0).normal(0, 0.3, p.theta.size)
    net = mlp.bind(spec, p)
    X = np.random.default_rng(1).random((6, 3))
    j = ad.eval_jet(lambda *xs: net(list(xs)), X, {0, 1, 2})
    for k in range(3):
        v, d1, d2 = oracles.mlp_jet(spec, p.theta, X, k)
        np.testing.assert_allclose(j.value, v, rtol=1e-13, atol=1e-15)
        np.testing.assert_allclose(j.first[k], d1, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(j.second_pure[k], d2, rtol=1e-11, atol=1e-13)


def test_elementary_set_contents():
    names = ad.elementary_set()
    for op in ["add", "sub", "mul", "div", "neg", "pow", "exp", "tanh", "sigmoid"]:
        assert op in names


def test_third_order_elementary_derivatives():
    # d/dtheta of a second input derivative needs f''' of each primitive
    for fn in (ad.exp, ad.tanh, ad.sigmoid):
        th = ad.parameter([0.4])
        x, = ad.seed([0.3], {0: 2})
        got = ad.param_gradient(fn(th[0] * x).d(0, 2), th)[0]
        f2 = lambda t: float(ad.eval_jet(lambda x_: fn(t * x_), [0.3], {0}).second_pure[0])
        h = 1e-6
        fd = (f2(0.4 + h) - f2(0.4 - h)) / (2 * h)
        assert rel_err(got, fd) <= 1e-7


def test_power_constant_exponent():
    j = ad.eval_jet(lambda x: x**2.5, [1.7], {0})
    assert j.value == pytest.approx(1.7**2.5, rel=1e-15)
    assert j.first[0] == pytest.approx(2.5 * 1.7**1.5, rel=1e-14)
    assert j.second_pure[0] == pytest.approx(2.5 * 1.5 * 1.7**0.5, rel=1e-14)
    j = ad.eval_jet(lambda x: 2.0**x, [1.5], {0})
    assert j.second_pure[0] == pytest.approx(np.log(2) ** 2 * 2**1.5, rel=1e-14)


def test_sigmoid_zero_network_value():
    x, = ad.seed([0.0], {0: 2})
    s = ad.sigmoid(x)
    assert s.primal == 0.5 and s.d(0).primal == 0.25 and s.d(0, 2).primal == 0.0


# --- parameter gradients ----------------------------------------------------


def test_param_gradient_square():
    th = ad.parameter([3.0])
    assert ad.param_gradient(th[0] ** 2, th).tolist() == [6.0]


def test_param_gradient_of_input_derivative():
    for t0 in (-2.0, 0.3, 5.0):
        th = ad.parameter([t0])
        x, = ad.seed([0.0], {0: 1})
        s = ad.tanh(th[0] * x).d(0)
        assert s.primal == pytest.approx(t0)
        assert ad.param_gradient(s, th)[0] == pytest.approx(1.0, abs=1e-15)


def test_param_gradient_unconnected_is_zero():
    th = ad.parameter(np.ones(4))
    other = ad.parameter([1.0])
    g = ad.param_gradient(other[0] * 2.0, th)
    assert g.shape == (4,) and not g.any()


def test_param_gradient_rejects_non_leaf_and_batches():
    th = ad.parameter(np.ones(3))
    with pytest.raises(ValueError):
        ad.param_gradient(th.sum(), th * 2.0)
    with pytest.raises(ValueError):
        ad.param_gradient(th * 2.0, th)


def test_param_gradient_list_of_leaves_concatenates():
    a, b = ad.parameter([1.0, 2.0]), ad.parameter([3.0])
    s = (a[0] * a[1] * b[0])
    assert ad.param_gradient(s, [a, b]).tolist() == [6.0, 3.0, 2.0]


def test_laplacian_loss_param_gradient_matches_fd():
    spec = mlp.NetworkSpec(2, (6, 6), 1, "tanh")
    theta0 = mlp.xavier_init(spec, 5).theta + 0.1
    pts = np.random.default_rng(2).random((8, 2))

    def loss_plain(theta):
        v = 0.0
        for k in (0, 1):
            v = v + oracles.mlp_jet(spec, theta, pts, k)[2]
        return float(np.sum((v - 1.0) ** 2))

    th = ad.parameter(theta0)
    net = mlp.bind(spec, th)
    x, y = ad.seed(pts, {0: 2, 1: 2})
    f = net([x, y])
    L = ((f.d(0, 2) + f.d(1, 2) - 1.0) ** 2).sum()
    assert float(L.primal) == pytest.approx(loss_plain(theta0), rel=1e-12)
    g = ad.param_gradient(L, th)
    idx = np.random.default_rng(3).choice(theta0.size, 20, replace=False)
    fd = oracles.fd_gradient(loss_plain, theta0, idx, h=1e-6)
    assert rel_err(g[idx], fd, floor=1e-6) <= 1e-4


# --- errors -----------------------------------------------------------------


def test_unsupported_operation():
    with pytest.raises(ad.UnsupportedOperationError):
        ad.eval_jet(lambda x: np.sin(x), [1.0], {0})
    x, = ad.seed([1.0], {0: 1})
    with pytest.raises(ad.UnsupportedOperationError):
        x ** x


def test_non_finite_identifies_op_and_label():
    with pytest.raises(ad.NonFiniteError) as ei:
        with ad.label("forcing term"):
            ad.eval_jet(lambda x: ad.exp(1000.0 * x), [[0.0], [1.0]], {0})
    assert ei.value.op == "exp"
    assert ei.value.context == "forcing term"
    assert ei.value.index == (1,)


def test_unsupported_order():
    with pytest.raises(ad.UnsupportedOrderError):
        ad.seed([0.0], {0: 3})
    with pytest.raises(ad.UnsupportedOrderError):
        ad.perturb(0.0, 3)


# --- properties -------------------------------------------------------------


def _program(x, y):
    return ad.tanh(x * y + 0.5) * ad.exp(-x) + ad.sigmoid(y - x) / (1 + x**2)


def test_batched_equals_looped():
    pts = np.random.default_rng(4).random((25, 2))
    jb = ad.eval_jet(_program, pts, {0, 1})
    for i, q in enumerate(pts):
        jl = ad.eval_jet(_program, q, {0, 1})
        assert jb.value[i] == pytest.approx(jl.value, rel=1e-14, abs=1e-15)
        for s in (0, 1):
            assert jb.first[s][i] == pytest.approx(jl.first[s], rel=1e-13, abs=1e-15)
            assert jb.second_pure[s][i] == pytest.approx(jl.second_pure[s], rel=1e-13, abs=1e-15)


def test_batched_loss_gradient_is_sum_of_per_sample_gradients():
    spec = mlp.NetworkSpec(2, (5,), 1, "tanh")
    theta = mlp.xavier_init(spec, 0).theta
    pts = np.random.default_rng(5).random((6, 2))

    def grad(points):
        th = ad.parameter(theta)
        x, y = ad.seed(points, {0: 2, 1: 2})
        f = mlp.bind(spec, th)([x, y])
        return ad.param_gradient(((f.d(0, 2) + f.d(1, 2)) ** 2).sum(), th)

    total = sum(grad(pts[i:i + 1]) for i in range(len(pts)))
    np.testing.assert_allclose(grad(pts), total, rtol=1e-12, atol=1e-14)


def test_linearity():
    f = lambda x, y: ad.tanh(x) * y
    g = lambda x, y: ad.exp(x + y**2)
    a, b = 2.5, -0.75
    q = [0.2, -0.4]
    jf, jg = ad.eval_jet(f, q, {0, 1}), ad.eval_jet(g, q, {0, 1})
    jh = ad.eval_jet(lambda x, y: a * f(x, y) + b * g(x, y), q, {0, 1})
    assert jh.value == pytest.approx(a * jf.value + b * jg.value, rel=1e-14)
    for s in (0, 1):
        assert jh.first[s] == pytest.approx(a * jf.first[s] + b * jg.first[s], rel=1e-14)
        assert jh.second_pure[s] == pytest.approx(a * jf.second_pure[s] + b * jg.second_pure[s], rel=1e-13)


def test_determinism_bit_identical():
    pts = np.random.default_rng(6).random((10, 2))
    a = ad.eval_jet(_program, pts, {0, 1})
    b = ad.eval_jet(_program, pts, {0, 1})
    assert a.value.tobytes() == b.value.tobytes()
    for s in (0, 1):
        assert a.first[s].tobytes() == b.first[s].tobytes()
        assert a.second_pure[s].tobytes() == b.second_pure[s].tobytes()


def test_coefficient_of_boundary_perturbation():
    # d/dy F(x, y) at y = 0.5 via a fresh slot, with x still seeded
    x, = ad.seed([[0.3], [0.6]], {0: 2})
    yp, slot = ad.perturb(0.5, 1)
    F = ad.exp(x * yp)
    Fy = ad.coefficient(F, slot, 1)
    xs = np.array([0.3, 0.6])
    np.testing.assert_allclose(Fy.primal, xs * np.exp(0.5 * xs), rtol=1e-14)
    # and its second x-derivative: (2y + x y^2... ) -> d2/dx2 [x e^{xy}] = (2y + x y^2) e^{xy}
    np.testing.assert_allclose(Fy.d(0, 2).primal, (1.0 + 0.25 * xs) * np.exp(0.5 * xs), rtol=1e-13)


# --- random programs against finite differences -------------------------------


def _random_tree(rng, depth):
    if depth == 0 or rng.random() < 0.25:
        r = rng.random()
        if r < 0.4:
            return ("x",)
        if r < 0.8:
            return ("y",)
        return ("c", float(rng.uniform(-1.5, 1.5)))
    op = rng.choice(["add", "sub", "mul", "div", "neg", "pow", "exp", "tanh", "sigmoid"])
    if op in ("add", "sub", "mul", "div"):
        return (op, _random_tree(rng, depth - 1), _random_tree(rng, depth - 1))
    if op == "pow":
        return (op, _random_tree(rng, depth - 1), float(rng.choice([2.0, 3.0, 0.5, -1.5])))
    return (op, _random_tree(rng, depth - 1))


def _evaluate(tree, x, y, lib):
    tag = tree[0]
    if tag == "x":
        return x
    if tag == "y":
        return y
    if tag == "c":
        return tree[1] + 0.0 * x
    a = _evaluate(tree[1], x, y, lib)
    if tag == "neg":
        return -a
    if tag == "pow":
        # keep the base positive and away from zero
        return (1.0 + a * a) ** tree[2]
    if tag in ("exp", "tanh", "sigmoid"):
        if tag == "exp":
            a = 0.5 * lib["tanh"](a)  # keep magnitudes tame under nesting
        return lib[tag](a)
    b = _evaluate(tree[2], x, y, lib)
    if tag == "add":
        return a + b
    if tag == "sub":
        return a - b
    if tag == "mul":
        return a * b
    return a / (1.5 + b * b)


NUMPY_LIB = {"exp": np.exp, "tanh": np.tanh, "sigmoid": lambda z: 1 / (1 + np.exp(-z))}
AD_LIB = {"exp": ad.exp, "tanh": ad.tanh, "sigmoid": ad.sigmoid}


@settings(max_examples=100, deadline=None, derandomize=True)
@given(st.integers(0, 2**32 - 1))
def test_random_programs_match_finite_differences(s):
    rng = np.random.default_rng(s)
    tree = _random_tree(rng, 4)
    q = rng.uniform(-1, 1, 2)
    j = ad.eval_jet(lambda x, y: _evaluate(tree, x, y, AD_LIB), q, {0, 1})
    f = lambda p: float(_evaluate(tree, p[0], p[1], NUMPY_LIB))
    assert j.value == pytest.approx(f(q), rel=1e-13, abs=1e-13)
    for k in (0, 1):
        e1, e2 = np.eye(2)[k] * 1e-5, np.eye(2)[k] * 1e-4
        fd1 = (f(q + e1) - f(q - e1)) / 2e-5
        fd2 = (f(q + e2) - 2 * f(q) + f(q - e2)) / 1e-8
        assert rel_err(j.first[k], fd1) <= 1e-5
        assert rel_err(j.second_pure[k], fd2) <= 1e-4
