import math

import numpy as np
import pytest

from deeptfc import adcore as ad, mlp, problems, tfc
from deeptfc.tfc import BoundaryOperator as Op, ConstraintSpec as CS

import oracles


def plain(v):
    return tfc._plain(v)


def random_net(n, seed, widths=(6, 6)):
    spec = mlp.NetworkSpec(n, widths, 1, "tanh")
    theta = mlp.xavier_init(spec, seed).theta
    theta = theta + np.random.default_rng(seed).normal(0, 0.3, theta.size)
    net = mlp.bind(spec, theta)
    return spec, theta, (lambda *xs: net(xs))


# --- v vectors --------------------------------------------------------------


def test_v_value_and_derivative_at_zero():
    v = tfc.build_v(CS(0, [(0, 0), (0, 1)]))
    np.testing.assert_array_equal(v.alpha, np.eye(2))
    x = np.linspace(-1, 2, 7)
    out = v(x)
    assert out[0] == 1.0 and np.all(out[1] == 1.0) and np.array_equal(out[2], x)


def test_v_dirichlet():
    v = tfc.build_v(CS(0, [(0, 0), (1, 0)]))
    x = np.linspace(0, 1, 5)
    out = v(x)
    np.testing.assert_allclose(out[1], 1 - x, atol=1e-15)
    np.testing.assert_allclose(out[2], x, atol=1e-15)


@pytest.mark.parametrize("name", problems.PROBLEMS)
def test_v_identity_for_problem_dimensions(name):
    p = problems.get(name)
    for expr in p.fields.values():
        for vk in expr.v:
            ell = len(vk.spec)
            if ell:
                assert np.max(np.abs(vk.B @ vk.alpha - np.eye(ell))) <= 1e-10


def test_v_delta_property_cubic():
    spec = CS(0, [(0, 0), (0, 1), (1, 0), (1, 2)])
    v = tfc.build_v(spec)
    for m, op in enumerate(spec.ops):
        for j in range(1, 5):
            got = plain(tfc.apply_boundary_op(Op(0, op.p, op.d), lambda x, _j=j: v(x)[_j])(0.3))
            assert abs(float(got) - (m == j - 1)) <= 1e-12


def test_custom_basis_reproduces_quadratic_switches():
    v = tfc.build_v(CS(0, [(0, 0), (1, 0)]), [tfc.Monomial(0), tfc.Monomial(2)])
    x = np.linspace(0, 1, 5)
    out = v(x)
    np.testing.assert_allclose(out[1], 1 - x**2, atol=1e-15)
    np.testing.assert_allclose(out[2], x**2, atol=1e-15)


def test_ill_conditioned_basis():
    with pytest.raises(tfc.IllConditionedError, match="dimension 1"):
        tfc.build_v(CS(1, [(0, 1), (1, 1)]))


def test_basis_length_mismatch():
    with pytest.raises(ValueError):
        tfc.build_v(CS(0, [(0, 0), (1, 0)]), [tfc.Monomial(0)])


def test_duplicate_entries_rejected():
    with pytest.raises(ValueError):
        CS(0, [(0, 0), (0.0, 0)])


# --- boundary operators -----------------------------------------------------


def test_boundary_op_examples():
    G = tfc.apply_boundary_op(Op(0, 0, 0), lambda x, y: x + y**2)
    assert float(plain(G(0.7, 3.0))) == 9.0
    G = tfc.apply_boundary_op(Op(1, 0, 1), lambda x, y: x * y)
    assert float(plain(G(0.25, 5.0))) == 0.25


def test_boundary_op_is_constant_in_its_dimension():
    _, _, g = random_net(2, 1)
    G = tfc.apply_boundary_op(Op(0, 1.0, 2), g)
    ys = np.linspace(0, 1, 4)
    a = plain(G(np.full(4, 0.1), ys))
    b = plain(G(np.full(4, 0.9), ys))
    np.testing.assert_array_equal(a, b)


def test_boundary_derivative_of_network_matches_fd():
    spec, theta, g = random_net(2, 2)
    G = tfc.apply_boundary_op(Op(0, 1.0, 1), g)
    ys = np.linspace(0, 1, 6)
    got = plain(G(np.zeros(6), ys))
    want = oracles.net_dfn(spec, theta, 0)(np.ones(6), ys)
    assert np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-3)) <= 1e-5
    h = 1e-5
    F = oracles.net_fn(spec, theta)
    fd = (F(1 + h, ys) - F(1 - h, ys)) / (2 * h)
    assert np.max(np.abs(got - fd) / np.maximum(np.abs(fd), 1e-3)) <= 1e-5


def test_boundary_op_order_limit():
    with pytest.raises(ad.UnsupportedOrderError):
        tfc.apply_boundary_op(Op(0, 0, 3), lambda x: x)


def test_nested_ops_need_distinct_dimensions():
    with pytest.raises(ValueError):
        tfc.apply_boundary_ops([Op(0, 0), Op(0, 1)], lambda x, y: x)


# --- M tensor ---------------------------------------------------------------


def _c2(x, y):
    e = ad.exp(0.5 * x) if isinstance(x, ad.DiffScalar) else np.exp(0.5 * x)
    return e * (1 + y**3) + x * y**2


def _c2_parts(x, y):
    e = np.exp(0.5 * x)
    return {
        "": e * (1 + y**3) + x * y**2,
        "x": 0.5 * e * (1 + y**3) + y**2,
        "y": 3 * y**2 * e + 2 * x * y,
        "xy": 1.5 * y**2 * e + 2 * y,
    }


def test_m_layout_value_and_derivative_2d():
    specs = [CS(0, [(0, 0), (0, 1), (1, 0), (1, 1)]), CS(1, [(0, 0), (0, 1), (1, 0), (1, 1)])]
    M = tfc.build_m(specs, tfc.ConstraintFunction.from_function(_c2, specs))
    assert M.shape == (5, 5)
    # rows: x-constraint (p, d); columns: y-constraint (p, d); 0 is the trivial slot
    table = [None, (0, 0), (0, 1), (1, 0), (1, 1)]
    x, y = 0.37, 0.81
    assert M[0, 0].ops == frozenset() and M.value((0, 0), (x, y)) == 0.0
    for i in range(5):
        for j in range(5):
            e = M[i, j]
            if i == 0 and j == 0:
                continue
            if i == 0 or j == 0:
                assert e.sign == 1
            else:
                assert e.sign == -1
            xs_ = [x, y]
            key = ""
            if i:
                px, dx = table[i]
                xs_[0] = px
                key += "x" * dx
                assert Op(0, px, dx) in e.ops
            if j:
                py, dy = table[j]
                xs_[1] = py
                key += "y" * dy
                assert Op(1, py, dy) in e.ops
            want = e.sign * _c2_parts(*xs_)[key]
            got = float(plain(M.value((i, j), (x, y))))
            assert got == pytest.approx(want, rel=1e-13, abs=1e-14)
    # the two entries singled out in the layout
    assert M[1, 2].ops == {Op(0, 0, 0), Op(1, 0, 1)} and M[1, 2].sign == -1
    assert M[0, 1].ops == {Op(1, 0, 0)} and M[0, 1].sign == 1


def _c3(x1, x2, x3):
    e = ad.exp(x1) if isinstance(x1, ad.DiffScalar) else np.exp(x1)
    return e * (1 + x2 + x3 + x2 * x3) + x2**2


def test_m_rule3_examples_3d():
    specs = [CS(0, [(0, 0), (1, 0)]), CS(1, [(0, 0), (0, 1)]), CS(2, [(0, 0), (0, 1)])]
    M = tfc.build_m(specs, tfc.ConstraintFunction.from_function(_c3, specs))
    x1, x2, x3 = 0.3, 0.6, 0.8
    # 1-based (1,3,3): -c_{x2 x3}(x1, 0, 0)
    e = M[0, 2, 2]
    assert e.ops == {Op(1, 0, 1), Op(2, 0, 1)} and e.sign == -1
    assert float(plain(M.value((0, 2, 2), (x1, x2, x3)))) == pytest.approx(-math.exp(x1), rel=1e-14)
    # 1-based (2,2,1): -c(0, 0, x3)
    e = M[1, 1, 0]
    assert e.ops == {Op(0, 0, 0), Op(1, 0, 0)} and e.sign == -1
    assert float(plain(M.value((1, 1, 0), (x1, x2, x3)))) == pytest.approx(-(1 + x3), rel=1e-14)
    # 1-based (3,3,2): +c_{x2}(1, 0, 0)
    e = M[2, 2, 1]
    assert e.ops == {Op(0, 1, 0), Op(1, 0, 1), Op(2, 0, 0)} and e.sign == 1
    assert float(plain(M.value((2, 2, 1), (x1, x2, x3)))) == pytest.approx(math.e, rel=1e-14)


def test_sign_rule_everywhere():
    specs = [CS(0, [(0, 0), (1, 0)]), CS(1, [(0, 0), (0, 1)]), CS(2, [(0, 0), (0, 1)])]
    M = tfc.build_m(specs, tfc.ConstraintFunction.from_function(_c3, specs))
    assert len(M.elements) == 27
    for idx, e in M.elements.items():
        m = sum(1 for i in idx if i)
        assert len(e.ops) == m
        assert e.sign == (0 if m == 0 else (-1) ** (m + 1))


def test_unconstrained_dimension():
    specs = [CS(0, [(0, 0)]), CS(1, [])]
    c = tfc.ConstraintFunction.from_function(lambda x, y: 2.0 + 0 * y, specs)
    expr = tfc.constrained_expression(specs, c)
    assert expr.M.shape == (2, 1)
    _, _, g = random_net(2, 3)
    f = plain(expr.evaluate([np.zeros(5), np.linspace(0, 1, 5)], g))
    np.testing.assert_allclose(f, 2.0, atol=1e-15)


def test_missing_restriction_is_named():
    specs = [CS(0, [(0, 0), (1, 0)]), CS(1, [(0, 0), (0, 1)])]
    c = tfc.ConstraintFunction(2, {frozenset({Op(0, 0)}): lambda x, y: 0 * y})
    with pytest.raises(tfc.MissingConstraintError) as ei:
        tfc.build_m(specs, c)
    msg = str(ei.value)
    assert "k=1" in msg and "d=1" in msg


def test_inconsistent_pieces_detected():
    specs = [CS(0, [(0, 0)]), CS(1, [(0, 0)])]
    pieces = {Op(0, 0): lambda x, y: y + 1.0, Op(1, 0): lambda x, y: x + 0.0}
    c = tfc.ConstraintFunction.from_pieces(pieces, specs)
    with pytest.raises(ValueError, match="disagrees"):
        c.check_consistency([[0, 1], [0, 1]])


# --- constrained expression -------------------------------------------------


def test_problem1_boundary_values():
    expr = problems.problem1().fields["z"]
    _, _, g = random_net(2, 4)
    y = np.linspace(0, 1, 9)
    np.testing.assert_allclose(plain(expr.evaluate([np.zeros(9), y], g)), y**3, atol=1e-14)


def test_g_equal_to_c_gives_c():
    specs = [CS(0, [(0, 0), (1, 0)]), CS(1, [(0, 0), (0, 1)])]
    c = tfc.ConstraintFunction.from_function(_c2, specs)
    expr = tfc.constrained_expression(specs, c)
    pts = np.random.default_rng(0).random((20, 2))
    f = plain(expr.evaluate([pts[:, 0], pts[:, 1]], _c2))
    np.testing.assert_allclose(f, _c2_parts(*pts.T)[""], rtol=1e-13)


def test_projection_property():
    expr = problems.problem2().fields["u"]
    _, _, g = random_net(2, 5)
    h = lambda *xs: expr.evaluate(xs, g) - expr.evaluate(xs, None)
    rng = np.random.default_rng(1)
    for spec in expr.specs:
        for op in spec.ops:
            pts = rng.random((10, 2))
            pts[:, op.k] = op.p
            v = plain(tfc.apply_boundary_op(op, h)(*pts.T))
            assert np.max(np.abs(v)) <= 1e-13


@pytest.mark.parametrize("name", problems.PROBLEMS)
def test_exactness_100_free_functions(name):
    p = problems.get(name)
    for expr in p.fields.values():
        rep = tfc.verify_exactness(expr, trials=100, seed=0, domain=p.domain)
        assert rep.passed and rep.max_violation <= 1e-10
        assert set(rep.per_constraint) == {op for s in expr.specs for op in s.ops}


def test_exactness_with_zero_free_function():
    expr = problems.problem2().fields["u"]
    zero = lambda *xs: 0.0 * xs[0]
    rep = tfc.verify_exactness(expr, trials=1, free_functions=[zero])
    assert rep.passed


def test_sho_constrained_expression():
    # y(0) = 1, y'(0) = 0 gives f = g + 1 - g(0) - x g'(0)
    specs = [CS(0, [(0, 0), (0, 1)])]
    c = tfc.ConstraintFunction.from_pieces({Op(0, 0, 0): lambda x: 1.0, Op(0, 0, 1): lambda x: 0.0}, specs)
    expr = tfc.constrained_expression(specs, c)
    spec, theta, g = random_net(1, 6)
    x = np.linspace(0, 2, 11)
    G = oracles.net_fn(spec, theta)
    Gx = oracles.net_dfn(spec, theta, 0)
    want = G(x) + 1 - G(0.0) - x * Gx(0.0)
    np.testing.assert_allclose(plain(expr.evaluate([x], g)), want, atol=1e-13)


def test_problem1_matches_closed_form():
    expr = problems.problem1().fields["z"]
    rng = np.random.default_rng(7)
    worst = 0.0
    for s in range(5):
        spec, theta, g = random_net(2, 100 + s, widths=(10, 10))
        pts = rng.random((200, 2))
        got = plain(expr.evaluate([pts[:, 0], pts[:, 1]], g))
        want = oracles.problem1_closed_form(oracles.net_fn(spec, theta), *pts.T)
        worst = max(worst, np.max(np.abs(got - want)))
    assert worst <= 1e-12


def test_problem2_matches_closed_form():
    expr = problems.problem2().fields["u"]
    rng = np.random.default_rng(8)
    for s in range(5):
        spec, theta, g = random_net(2, 200 + s, widths=(10, 10))
        pts = rng.random((200, 2))
        got = plain(expr.evaluate([pts[:, 0], pts[:, 1]], g))
        want = oracles.wave_closed_form(oracles.net_fn(spec, theta), oracles.net_dfn(spec, theta, 1), *pts.T)
        assert np.max(np.abs(got - want)) <= 1e-12


@pytest.mark.parametrize("name, steady", [("problem3", True), ("problem4", False)])
def test_channel_matches_closed_form(name, steady):
    p = problems.get(name)
    lo, hi = np.asarray(p.domain).T
    pts = lo + (hi - lo) * np.random.default_rng(9).random((100, 3))
    spec, theta, g = random_net(3, 300, widths=(8,))
    got = plain(p.fields["u"].evaluate(list(pts.T), g))
    want = oracles.channel_closed_form(oracles.net_fn(spec, theta), *pts.T, steady=steady)
    assert np.max(np.abs(got - want)) <= 1e-12


def test_free_projections_share_evaluations():
    expr = problems.problem1().fields["z"]
    calls = []
    _, _, g0 = random_net(2, 1)

    def g(*xs):
        calls.append(1)
        return g0(*xs)

    expr.evaluate([np.array([0.4]), np.array([0.6])], g)
    # g itself plus one call per hyperplane set: 4 edges and 4 corners
    assert len(calls) == 9


def test_expression_input_count():
    expr = problems.problem1().fields["z"]
    with pytest.raises(ValueError):
        expr.evaluate([0.1, 0.2, 0.3])
