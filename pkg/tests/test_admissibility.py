from fractions import Fraction as F

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psidolab.experiments.admissibility import (
    OPEN_RANGE,
    BadExponents,
    BadParams,
    Interval,
    fefferman_interval,
    lplq_admissible,
    sobolev_shift_admissible,
    to_fraction,
)


def test_to_fraction():
    assert to_fraction(0.125) == F(1, 8)
    assert to_fraction(1 / 3) == F(1, 3)
    assert to_fraction("4/3") == F(4, 3)
    assert to_fraction(3) == F(3)
    with pytest.raises(BadParams):
        to_fraction(float("inf"))


# -- Fefferman interval ----------------------------------------------------


def test_fefferman_examples():
    iv = fefferman_interval(1, 0.5, 0.125)
    assert (iv.lo, iv.hi, iv.closed) == (F(4, 3), F(4), True)
    assert str(iv) == "[4/3, 4]"
    pt = fefferman_interval(1, 0.5, 0)
    assert pt.is_point and pt.lo == 2 and str(pt) == "{2}"
    assert fefferman_interval(1, 0.5, 0.25) == OPEN_RANGE
    assert str(OPEN_RANGE) == "(1, inf)"


def test_fefferman_rho_one_and_2d():
    assert fefferman_interval(2, 1, 0) == OPEN_RANGE
    iv = fefferman_interval(2, F(1, 2), F(1, 4))  # b = 1/4
    assert (iv.lo, iv.hi) == (F(4, 3), F(4))


@pytest.mark.parametrize("rho,theta", [(0, 0.1), (1.2, 0.1), (0.5, -0.1)])
def test_fefferman_bad_params(rho, theta):
    with pytest.raises(BadParams):
        fefferman_interval(1, rho, theta)


def test_interval_contains():
    iv = Interval(F(4, 3), F(4), True)
    assert iv.contains(4) and iv.contains(F(4, 3)) and not iv.contains(5)
    assert OPEN_RANGE.contains(1000) and not OPEN_RANGE.contains(1)
    assert iv.as_floats() == (4 / 3, 4.0)


@settings(max_examples=200, deadline=None)
@given(st.sampled_from([1, 2]), st.fractions(F(1, 20), F(19, 20)), st.fractions(0, 2))
def test_fefferman_duality(n, rho, theta):
    iv = fefferman_interval(n, rho, theta)
    if iv.hi is None:
        return
    # p_min and p_max are conjugate exponents
    assert 1 / iv.lo + 1 / iv.hi == 1


# -- Sobolev shift ---------------------------------------------------------


@pytest.mark.parametrize("theta", [0, F(1, 8), F(1, 5)])
def test_sobolev_equal_shift(theta):
    v = sobolev_shift_admissible(1, F(1, 2), theta, 3, 3)
    assert v.ok and v.interval == fefferman_interval(1, F(1, 2), theta)


def test_sobolev_examples():
    assert not sobolev_shift_admissible(1, 0.5, 0, 0, 1).ok
    assert sobolev_shift_admissible(1, 0.5, 0, 0, 1).theta_eff == -1
    v = sobolev_shift_admissible(1, 0.5, 0, 0.125, 0)
    assert v.ok and str(v.interval) == "[4/3, 4]"
    assert not sobolev_shift_admissible(1, 0.5, 0.25, 0, 0).ok  # boundary order excluded
    r1 = sobolev_shift_admissible(1, 1, 0, 2, 1)
    assert r1.ok and r1.interval == OPEN_RANGE


# -- Lp -> Lq --------------------------------------------------------------


def test_lplq_examples():
    v = lplq_admissible(1, 0.5, 0, 2, 2)
    assert v.admissible and v.branch == "A" and v.lhs == 0
    v = lplq_admissible(1, 0.5, 1, F(4, 3), 4)
    assert v.admissible and v.branch == "A" and v.lhs == F(1, 2)
    v = lplq_admissible(1, 0.5, 0, F(4, 3), 2)
    assert not v.admissible and v.branch == "B" and v.lhs == F(1, 4)
    v = lplq_admissible(1, 0.5, F(1, 2), 2, 4)
    assert v.branch == "C" and v.lhs == F(1, 4) and v.admissible
    assert "-theta" in v.printed_condition and "-theta" not in v.condition


@pytest.mark.parametrize("p,q", [(1, 2), (3, 2), (2, float("inf"))])
def test_lplq_bad_exponents(p, q):
    with pytest.raises(BadExponents):
        lplq_admissible(1, 0.5, 0, p, q)


exps = st.fractions(F(11, 10), F(10))


@settings(max_examples=200, deadline=None)
@given(st.sampled_from([1, 2]), st.fractions(F(1, 10), 1), exps, exps, st.fractions(0, 2), st.fractions(0, 2))
def test_lplq_branch_a_monotone(n, rho, p, q, t1, t2):
    if p > q:
        p, q = q, p
    lo, hi = sorted((t1, t2))
    a, b = lplq_admissible(n, rho, lo, p, q), lplq_admissible(n, rho, hi, p, q)
    assert a.branch == b.branch
    if a.admissible:
        assert b.admissible


@settings(max_examples=200, deadline=None)
@given(st.fractions(F(1, 10), 1), exps)
def test_lplq_branches_agree_at_two(rho, r):
    # B and C meet A on the line through 2
    if r < 2:
        assert lplq_admissible(1, rho, 0, r, 2).lhs == 1 / r - F(1, 2)
    elif r > 2:
        assert lplq_admissible(1, rho, 0, 2, r).lhs == F(1, 2) - 1 / r
