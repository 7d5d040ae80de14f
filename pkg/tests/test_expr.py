import numpy as np
import pytest

from accbound.expr import (ExprError, Jet, JetEvalError, compile_expr, eval_expr_jet,
                           eval_jet, jet_context, parse_expr, parse_field, pretty)


def test_parse_martinet_fields():
    X = parse_field(["1", "0", "x2^2/2"], 3, "X")
    assert X.components[2] == ("div", ("pow", ("var", 2), 2), ("const", 2.0))
    Y = parse_field(["0", "1", "0"], 3, "Y")
    assert Y.components[1] == ("const", 1.0)


def test_syntax_error_offset():
    with pytest.raises(ExprError) as err:
        parse_expr("x1+", 1)
    assert err.value.pos == 3


def test_unknown_identifier_and_dimension():
    with pytest.raises(ExprError, match="unknown identifier"):
        parse_expr("foo+1", 2)
    with pytest.raises(ExprError, match="exceeds dimension"):
        parse_expr("x5", 3)
    with pytest.raises(ExprError, match="component"):
        parse_field(["x1", "x2"], 3)


def _random_tree(rng, depth, n):
    if depth == 0 or rng.random() < 0.25:
        if rng.random() < 0.5:
            return ("const", float(np.round(rng.uniform(0.5, 3.0), 3)))
        return ("var", int(rng.integers(1, n + 1)))
    op = rng.choice(["add", "sub", "mul", "div", "neg", "pow", "fun"])
    if op == "neg":
        return ("neg", _random_tree(rng, depth - 1, n))
    if op == "pow":
        return ("pow", _random_tree(rng, depth - 1, n), int(rng.integers(0, 4)))
    if op == "fun":
        name = rng.choice(["sin", "cos", "exp"])
        return ("fun", str(name), _random_tree(rng, depth - 1, n))
    return (str(op), _random_tree(rng, depth - 1, n), _random_tree(rng, depth - 1, n))


def test_pretty_roundtrip(rng):
    for _ in range(200):
        tree = _random_tree(rng, 4, 3)
        assert parse_expr(pretty(tree), 3) == tree


def test_jet_martinet_polynomial_readoff():
    X = parse_field(["1", "0", "x2^2/2"], 3)
    jets = eval_jet(X, np.zeros(3), 2)
    third = jets[2]
    assert third.coeff((0, 2, 0)) == 0.5
    total = np.abs(third.coeffs).sum()
    assert total == 0.5  # every other coefficient vanishes
    assert jets[0].value() == 1.0 and np.abs(jets[0].coeffs).sum() == 1.0


def test_jet_constant_field():
    F = parse_field(["2.5"], 1)
    j = eval_jet(F, [0.7], 3)[0]
    assert j.value() == 2.5
    assert np.abs(j.coeffs[..., 1:]).max() == 0.0


def test_jet_linear_coefficient_matches_fd():
    tree = parse_expr("x2^2/2", 3)
    pt = np.array([0.0, 1.0, 0.0])
    j = eval_expr_jet(tree, pt, 1)
    assert j.value() == pytest.approx(0.5)
    h = 1e-5
    fn = compile_expr(tree)
    fd = (fn(pt + [0, h, 0]) - fn(pt - [0, h, 0])) / (2 * h)
    assert j.coeff((0, 1, 0)) == pytest.approx(fd, rel=1e-6)


def _brute_poly_coeffs(tree, n, order):
    """Independent polynomial expansion oracle: dict multi-index -> coeff."""
    def mul(a, b):
        out = {}
        for ka, va in a.items():
            for kb, vb in b.items():
                k = tuple(x + y for x, y in zip(ka, kb))
                if sum(k) <= order:
                    out[k] = out.get(k, 0.0) + va * vb
        return out

    def rec(t):
        if t[0] == "const":
            return {(0,) * n: t[1]}
        if t[0] == "var":
            return {tuple(1 if i == t[1] - 1 else 0 for i in range(n)): 1.0}
        if t[0] == "neg":
            return {k: -v for k, v in rec(t[1]).items()}
        if t[0] == "add":
            a, b = rec(t[1]), rec(t[2])
            for k, v in b.items():
                a[k] = a.get(k, 0.0) + v
            return a
        if t[0] == "sub":
            a, b = rec(t[1]), rec(t[2])
            for k, v in b.items():
                a[k] = a.get(k, 0.0) - v
            return a
        if t[0] == "mul":
            return mul(rec(t[1]), rec(t[2]))
        if t[0] == "pow":
            out = {(0,) * n: 1.0}
            for _ in range(t[2]):
                out = mul(out, rec(t[1]))
            return out
        raise AssertionError(t[0])

    return rec(tree)


def _random_poly(rng, depth, n):
    if depth == 0 or rng.random() < 0.3:
        if rng.random() < 0.4:
            return ("const", float(np.round(rng.uniform(-2, 2), 3)))
        return ("var", int(rng.integers(1, n + 1)))
    op = rng.choice(["add", "sub", "mul", "pow", "neg"])
    if op == "neg":
        return ("neg", _random_poly(rng, depth - 1, n))
    if op == "pow":
        return ("pow", _random_poly(rng, depth - 1, n), int(rng.integers(0, 3)))
    return (str(op), _random_poly(rng, depth - 1, n), _random_poly(rng, depth - 1, n))


def test_jet_exact_on_polynomials(rng):
    n, order = 3, 3
    ctx = jet_context(n, order)
    for _ in range(40):
        tree = _random_poly(rng, 3, n)
        # expand around 0 so jet coefficients are literal monomial coefficients
        jet = eval_expr_jet(tree, np.zeros(n), order)
        expect = _brute_poly_coeffs(tree, n, order)
        for k, alpha in enumerate(ctx.indices):
            assert jet.coeffs[k] == pytest.approx(expect.get(alpha, 0.0),
                                                  rel=1e-12, abs=1e-12)


def test_jet_gradient_matches_fd_nonpolynomial(rng):
    trees = [parse_expr("sin(x1*x2)+exp(x2/2)*cos(x3)", 3),
             parse_expr("sqrt(4+x1^2)/(2+x3)", 3)]
    fns = [compile_expr(t) for t in trees]
    for _ in range(20):
        pt = rng.uniform(-1, 1, size=3)
        for tree, fn in zip(trees, fns):
            jet = eval_expr_jet(tree, pt, 1)
            for j in range(3):
                h = 1e-5
                e = np.zeros(3)
                e[j] = h
                fd = (fn(pt + e) - fn(pt - e)) / (2 * h)
                alpha = tuple(1 if k == j else 0 for k in range(3))
                assert jet.coeff(alpha) == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_order_zero_is_plain_evaluation(rng):
    F = parse_field(["sin(x1)*exp(x2)/(1+x1^2)", "x2-x1*0.3333333333333333"], 2)
    pts = rng.normal(size=(50, 2))
    jets = eval_jet(F, pts, 0)
    direct = F.compiled()(pts)
    # bit-for-bit equality, not approximate
    assert np.array_equal(jets[0].value(), direct[:, 0])
    assert np.array_equal(jets[1].value(), direct[:, 1])


def test_near_zero_divisor_reported():
    F = parse_field(["1/x1"], 1)
    with pytest.raises(JetEvalError, match="x1"):
        eval_jet(F, [1e-15], 2)
    with pytest.raises(JetEvalError):
        F.compiled()(np.array([[1e-15]]))


def test_jet_arithmetic_closure(rng):
    ctx = jet_context(2, 3)
    a = Jet.variable(ctx, 1, 0.3)
    b = Jet.variable(ctx, 2, -0.2)
    c = (a * b + a).powi(2)
    assert c.coeffs.shape == (ctx.size,)
    # degree-0 coefficient equals plain evaluation
    assert c.value() == pytest.approx(((0.3 * -0.2) + 0.3) ** 2)
