import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psidolab.geometry import ConnectionField, MetricField, scalar_curvature
from psidolab.symbols import (
    BadParams,
    NonFinite,
    SymbolSpec,
    class_membership_check,
    d_eta,
    d_y,
    horizontal_derivative,
    make_bessel,
    make_counterexample,
    make_fourier_table,
    make_laplacian_symbol,
    make_multiplier,
    make_weight_power,
    parse_symbol,
    seminorm_estimate,
    smooth_step,
    weight,
)

FAST = settings(max_examples=20, deadline=None)


def one(n=1):
    return make_multiplier(lambda e: np.ones(e.shape[:-1]), 0.0, n=n, label="one")


# -- weight ----------------------------------------------------------------


def test_weight_examples():
    assert weight(None, [0.0], [0.0]) == 1.0
    assert np.isclose(weight(MetricField.flat(2), [0.1, 0.2], [1.0, np.sqrt(2.0)]), 2.0)
    quarter = MetricField.constant([[0.25]])  # g^11 = 4
    assert np.isclose(weight(quarter, [0.0], [1.0]), np.sqrt(5.0))


@FAST
@given(st.floats(0, 2 * np.pi), st.floats(0, 50), st.floats(0, 50), st.floats(-0.9, 0.9))
def test_weight_at_least_one_and_monotone(y, e1, e2, amp):
    metric = MetricField.conformal_1d(amp)
    w1, w2 = weight(metric, [y], [e1]), weight(metric, [y], [e2])
    assert w1 >= 1.0 and w2 >= 1.0
    if e1 <= e2:
        assert w1 <= w2


# -- class metadata --------------------------------------------------------


@pytest.mark.parametrize("rho,delta", [(0.5, 0.5), (1.2, 0.0), (0.5, -0.1), (0.0, 0.0)])
def test_class_constraint(rho, delta):
    with pytest.raises(BadParams):
        SymbolSpec(fn=lambda y, e: 1.0, m=0.0, rho=rho, delta=delta)


def test_dimension_constraint():
    with pytest.raises(BadParams):
        SymbolSpec(fn=lambda y, e: 1.0, m=0.0, n=3)


# -- derivatives -----------------------------------------------------------


def test_horizontal_derivative_of_constant_vanishes():
    conn = ConnectionField.random(2, np.random.default_rng(0))
    b = horizontal_derivative(one(2), conn, 1)
    y = np.random.default_rng(1).uniform(0, 6, (5, 2))
    e = np.random.default_rng(2).normal(size=(5, 2)) * 10
    assert np.max(np.abs(b(y, e))) < 1e-9


def test_horizontal_derivative_trivial_is_partial():
    c = make_fourier_table({"n": 1, "order": 0, "coeffs": [[1, 0.5, 0.0], [-1, 0.5, 0.0]]})  # cos y
    b = horizontal_derivative(c, ConnectionField.trivial(1), 0)
    y = np.linspace(0, 6, 9)[:, None]
    e = np.full_like(y, 3.0)
    assert np.allclose(b(y, e), -np.sin(y[:, 0]), atol=1e-12)
    assert b.m == c.m + c.delta


@pytest.mark.parametrize("k0", [0.3, -0.8])
def test_horizontal_derivative_constant_gamma(k0):
    a = make_weight_power(2.0)  # 1 + eta^2
    b = horizontal_derivative(a, ConnectionField.constant(np.array([[[k0]]])), 0)
    eta = np.array([[0.5], [2.0], [-7.0]])
    y = np.zeros_like(eta)
    assert np.allclose(b(y, eta), 2 * k0 * eta[:, 0] ** 2, rtol=1e-10)


def test_d_y_fallback_second_order():
    # coefficient without analytic y-gradient: central differences, O(h^2)
    a = SymbolSpec(fn=lambda y, e: np.sin(y[..., 0]) * (1 + e[..., 0] ** 2) + 0j, m=2.0)
    y = np.linspace(0.1, 6, 7)[:, None]
    e = np.full_like(y, 2.0)
    errs = [np.max(np.abs(d_y(a, 0, rel)(y, e) - 5 * np.cos(y[:, 0]))) for rel in (1e-2, 5e-3)]
    assert errs[0] < 1e-3
    assert 3.0 < errs[0] / errs[1] < 5.0


def test_d_eta_reduces_order():
    a = make_bessel(1.5)
    assert d_eta(a, 0).m == pytest.approx(0.5)
    y = np.zeros((3, 1))
    e = np.array([[0.0], [1.0], [4.0]])
    exact = 1.5 * (1 + e[:, 0] ** 2) ** (-0.25) * e[:, 0]
    assert np.allclose(d_eta(a, 0)(y, e), exact)


# -- seminorms -------------------------------------------------------------


@pytest.mark.parametrize("l", [0, 2, 4])
def test_seminorm_of_one(l):
    assert seminorm_estimate(one(), l, 256).value == pytest.approx(1.0)


@pytest.mark.parametrize("gamma", [-2, -1, 0, 1, 2])
def test_seminorm_weight_powers_polynomial(gamma):
    r = seminorm_estimate(make_weight_power(float(gamma)), 3, 1024)
    assert np.isfinite(r.value)
    assert r.value <= 10.0 * (1 + abs(gamma)) ** 3


def test_seminorm_monotone_in_level():
    a = make_counterexample(0.5, 0.125)
    vals = [seminorm_estimate(a, l, 512).value for l in range(4)]
    assert all(b >= a_ for a_, b in zip(vals, vals[1:]))


def test_seminorm_witness_and_threshold():
    r = seminorm_estimate(make_bessel(-1.0), 2, 64, threshold=5.0)
    assert set(r.witness) == {"y", "eta", "alpha", "ks"}
    assert r.passed is True and r.value >= 0


def test_seminorm_non_finite():
    bad = make_multiplier(lambda e: 1.0 / np.abs(e[..., 0]), -1.0)
    with np.errstate(divide="ignore"), pytest.raises(NonFinite):
        seminorm_estimate(bad, 0, 8)


def test_seminorm_level_cap():
    with pytest.raises(BadParams):
        seminorm_estimate(one(), 7, 8)


def test_counterexample_seminorm_trend():
    a = make_counterexample(0.5, 0.25)
    own = [seminorm_estimate(a, 3, e).value for e in (256, 1024, 4096)]
    wrong = [seminorm_estimate(a, 3, e, target=(-0.25, 0.75, 0.0)).value for e in (256, 1024, 4096)]
    assert all(b / a_ < 1.1 for a_, b in zip(own, own[1:]))
    assert wrong[0] < wrong[1] < wrong[2]


@FAST
@given(st.floats(-2, 2), st.floats(-2, 2))
def test_seminorm_product_level_zero(g1, g2):
    a, b = make_weight_power(g1), make_weight_power(g2)
    na = seminorm_estimate(a, 0, 256).value
    nb = seminorm_estimate(b, 0, 256).value
    assert seminorm_estimate(a * b, 0, 256).value <= na * nb * (1 + 1e-12)


# -- membership ------------------------------------------------------------


def test_membership_examples():
    assert class_membership_check(one(), (0.0, 1.0, 0.0)).passed
    deriv = make_multiplier(lambda e: 1j * e[..., 0], 1.0, label="i xi")
    assert not class_membership_check(deriv, (0.0, 1.0, 0.0)).passed
    a = make_counterexample(1 / 3, 0.3)
    assert class_membership_check(a, (-0.3, 1 / 3, 0.0)).passed
    assert not class_membership_check(a, (-0.3, 2 / 3, 0.0)).passed


@pytest.mark.parametrize("gamma", [-1.5, 0.5, 2.0])
def test_membership_order_bookkeeping(gamma):
    a = make_weight_power(gamma)
    assert class_membership_check(d_eta(a, 0), (gamma - 1.0, 1.0, 0.0)).passed
    assert not class_membership_check(d_eta(a, 0), (gamma - 1.3, 1.0, 0.0), l=0).passed
    conn = ConnectionField.constant(np.array([[[0.4]]]))
    nab = horizontal_derivative(a, conn, 0)
    assert class_membership_check(nab, (gamma, 1.0, 0.0), l=1, conn=conn).passed


# -- named symbols ---------------------------------------------------------


def test_multiplier_examples():
    y = np.zeros((3, 1))
    e = np.array([[0.0], [2.0], [-5.0]])
    assert np.all(one()(y, e) == 1)
    d = make_multiplier(lambda e: 1j * e[..., 0], 1.0)
    assert np.allclose(d(y, e), 1j * e[:, 0]) and d.m == 1.0
    assert class_membership_check(make_bessel(-1.0), (-1.0, 1.0, 0.0)).passed


def test_counterexample_values():
    # theta = 0 leaves the denominator 1 + |xi|^0 = 2
    assert np.isclose(make_counterexample(0.5, 0.0)([0.0], [1.0]), np.exp(1j) / 2)
    v = make_counterexample(0.5, 0.25)([0.0], [16.0])
    assert np.isclose(abs(v), 1 / 3) and np.isclose(np.angle(v), 4 - 2 * np.pi)
    mods = [abs(make_counterexample(0.5, th)([0.0], [5.0])) for th in (1, 5, 20)]
    assert mods[0] > mods[1] > mods[2] and mods[2] < 1e-12
    assert make_counterexample(0.5, 0.0)([0.0], [0.4]) == 0


@pytest.mark.parametrize("rho", [0.0, 1.0, 1.5])
def test_counterexample_bad_rho(rho):
    with pytest.raises(BadParams):
        make_counterexample(rho, 0.1)


def test_smooth_step():
    r = np.array([0.0, 0.5, 0.75, 1.0, 3.0])
    s = smooth_step(r)
    assert s[0] == 0 and s[1] == 0 and s[3] == 1 and s[4] == 1
    assert np.isclose(s[2], 0.5)


def test_bessel_examples():
    y = np.zeros((3, 1))
    e = np.array([[0.0], [3.0], [-7.0]])
    assert np.all(make_bessel(0.0)(y, e) == 1)
    assert np.allclose(make_bessel(2.0)(y, e), 1 + e[:, 0] ** 2)
    assert np.allclose((make_bessel(-2.0) * make_bessel(2.0))(y, e), 1.0)


def test_laplacian_symbol():
    e = np.array([[1.0, 2.0], [0.5, -3.0]])
    assert np.allclose(make_laplacian_symbol(MetricField.flat(2))(np.zeros_like(e), e),
                       -np.sum(e ** 2, axis=1))
    m1 = MetricField.conformal_1d(0.3)
    y1 = np.array([[0.4], [2.0]])
    assert np.allclose(make_laplacian_symbol(m1)(y1, np.full_like(y1, 3.0)),
                       -m1.g_inv(y1)[:, 0, 0] * 9.0)
    w = MetricField.warped()
    y = np.array([[0.3, 1.0], [2.5, 0.0]])
    assert np.allclose(make_laplacian_symbol(w)(y, np.zeros_like(y)), scalar_curvature(w, y) / 3)


def test_fourier_table():
    a = make_fourier_table({"n": 1, "order": -1, "coeffs": [[0, 2.0, 0.0], [1, 0.0, 1.0]]})
    y = np.array([[0.5]])
    e = np.array([[3.0]])
    assert np.isclose(a(y, e), (2 + 1j * np.exp(0.5j)) / np.sqrt(10.0))


def test_parse_symbol():
    assert parse_symbol("multiplier:bessel:-1").m == -1.0
    c = parse_symbol("counterexample:0.5:0.125")
    assert (c.m, c.rho) == (-0.125, 0.5)
    assert parse_symbol("laplacian", metric=MetricField.flat(2)).m == 2.0
    assert parse_symbol("fourier-table", table={"n": 1, "order": 0, "coeffs": [[0, 1, 0]]}).n == 1
    for bad in ("nonsense", "multiplier:bessel:x", "fourier-table"):
        with pytest.raises(BadParams):
            parse_symbol(bad)
