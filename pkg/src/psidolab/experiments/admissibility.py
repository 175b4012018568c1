"""Exact admissibility arithmetic for the Lp, Sobolev and Lp-Lq boundedness ranges.

Everything runs on :class:`fractions.Fraction`.  Floats are converted with
``limit_denominator(10**6)`` so that inputs such as ``0.125`` or ``1/3``
rounded to double precision land on the intended rational.  Symbol orders are
normalised as ``-theta`` with ``theta >= 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Union

Number = Union[int, float, str, Fraction]

HALF = Fraction(1, 2)


class BadParams(ValueError):
    pass


class BadExponents(ValueError):
    pass


def to_fraction(x: Number, max_den: int = 10 ** 6) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    if isinstance(x, str):
        return Fraction(x)
    if not math.isfinite(x):
        raise BadParams(f"cannot convert {x!r} to a rational")
    return Fraction(x).limit_denominator(max_den)


@dataclass(frozen=True)
class Interval:
    """Range of exponents ``p``; ``hi=None`` stands for infinity."""

    lo: Fraction
    hi: Optional[Fraction]
    closed: bool

    def contains(self, p: Number) -> bool:
        p = to_fraction(p)
        if self.closed:
            return self.lo <= p <= self.hi
        return p > self.lo and (self.hi is None or p < self.hi)

    @property
    def is_point(self) -> bool:
        return self.closed and self.lo == self.hi

    def as_floats(self) -> tuple:
        return (float(self.lo), float("inf") if self.hi is None else float(self.hi))

    def __str__(self) -> str:
        hi = "inf" if self.hi is None else str(self.hi)
        if self.is_point:
            return "{" + str(self.lo) + "}"
        return f"[{self.lo}, {hi}]" if self.closed else f"({self.lo}, {hi})"


OPEN_RANGE = Interval(Fraction(1), None, closed=False)


def _check_class(n: int, rho: Fraction, theta: Fraction):
    if n not in (1, 2):
        raise BadParams(f"dimension must be 1 or 2, got {n}")
    if not (0 < rho <= 1):
        raise BadParams(f"need 0 < rho <= 1, got {rho}")
    if theta < 0:
        raise BadParams(f"need theta >= 0, got {theta}")


def fefferman_interval(n: int, rho: Number, theta: Number) -> Interval:
    """Exponents with ``|1/p - 1/2| <= theta / (n (1 - rho))``.

    ``rho = 1`` or ``theta >= n (1 - rho) / 2`` gives the open range ``(1, inf)``.
    """
    rho, theta = to_fraction(rho), to_fraction(theta)
    _check_class(n, rho, theta)
    if rho == 1 or theta >= n * (1 - rho) / 2:
        return OPEN_RANGE
    b = theta / (n * (1 - rho))
    return Interval(1 / (HALF + b), 1 / (HALF - b), closed=True)


@dataclass(frozen=True)
class SobolevVerdict:
    ok: bool
    theta_eff: Fraction
    interval: Optional[Interval]


def sobolev_shift_admissible(n: int, rho: Number, theta: Number, s1: Number, s2: Number) -> SobolevVerdict:
    """``H^{s1,p} -> H^{s2,p}`` admissibility through the effective order ``theta + s1 - s2``.

    Needs ``0 <= theta_eff < n (1 - rho) / 2``; for ``rho = 1`` any
    ``theta_eff >= 0`` is accepted with the full open range.
    """
    rho, theta = to_fraction(rho), to_fraction(theta)
    _check_class(n, rho, theta)
    t = theta + to_fraction(s1) - to_fraction(s2)
    if rho == 1:
        ok = t >= 0
    else:
        ok = 0 <= t < n * (1 - rho) / 2
    return SobolevVerdict(ok=bool(ok), theta_eff=t, interval=fefferman_interval(n, rho, t) if ok else None)


@dataclass(frozen=True)
class LpLqVerdict:
    admissible: bool
    branch: str
    lhs: Fraction
    theta: Fraction
    condition: str
    printed_condition: str


def lplq_admissible(n: int, rho: Number, theta: Number, p: Number, q: Number) -> LpLqVerdict:
    """Lp -> Lq admissibility for an order ``-theta`` operator of type ``(rho, 0)``.

    Branch A (``p < 2 < q`` or ``p = q = 2``): ``n (1/p - 1/q) <= theta``.
    Branch B (``q <= 2``): ``n [(1/p - 1/q) + (1 - rho)(1/q - 1/2)] <= theta``.
    Branch C (``p >= 2``): ``n [(1/p - 1/q) + (1 - rho)(1/2 - 1/p)] <= theta``.
    The three conditions agree where branches meet.  ``printed_condition``
    records the same inequality written with ``-theta`` on the right.
    """
    rho, theta = to_fraction(rho), to_fraction(theta)
    _check_class(n, rho, theta)
    if not all(math.isfinite(float(v)) for v in (p, q)):
        raise BadExponents(f"need 1 < p <= q < inf, got p={p}, q={q}")
    p, q = to_fraction(p), to_fraction(q)
    if not (1 < p <= q):
        raise BadExponents(f"need 1 < p <= q < inf, got p={p}, q={q}")
    gap = 1 / p - 1 / q
    if (p < 2 < q) or p == q == 2:
        branch, lhs = "A", n * gap
        cond = "n(1/p-1/q) <= theta"
        printed = "n(1/p-1/q) <= -theta"
    elif q <= 2:
        branch, lhs = "B", n * (gap + (1 - rho) * (1 / q - HALF))
        cond = "n[(1/p-1/q)+(1-rho)(1/q-1/2)] <= theta"
        printed = "n[(1/p-1/q)+(1-rho)(1/q-1/2)] <= -theta"
    else:
        branch, lhs = "C", n * (gap + (1 - rho) * (HALF - 1 / p))
        cond = "n[(1/p-1/q)+(1-rho)(1/2-1/p)] <= theta"
        printed = "n[(1/p-1/q)+(1-rho)(1/2-1/p)] <= -theta"
    return LpLqVerdict(admissible=bool(lhs <= theta), branch=branch, lhs=lhs, theta=theta,
                       condition=cond, printed_condition=printed)
