"""Symbols ``a(y, eta)`` on the cotangent bundle of the torus, with class metadata.

A :class:`SymbolSpec` wraps a vectorised evaluator ``fn(y, eta)``; both
arguments carry the coordinate index on the trailing axis and broadcast
against each other.  Derivatives come from optional analytic closures or from
central differences whose steps scale with the symbol class: in ``eta`` the
step is ``rel * <eta>^rho`` and in ``y`` it is ``rel * <eta>^(-delta)``, so a
class-conforming symbol changes by a relative O(rel) amount per step.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .geometry import ConnectionField, MetricField, as_points, scalar_curvature


class BadParams(ValueError):
    pass


class NonFinite(ArithmeticError):
    pass


def fd_rel(order: int) -> float:
    """Relative central-difference step for a derivative of total ``order``."""
    return 1e-4 if order <= 2 else 10.0 ** (-16.0 / (order + 2))


def weight(metric: Optional[MetricField], y, eta) -> np.ndarray:
    """``<eta>_y = (1 + g^{ab}(y) eta_a eta_b)^(1/2)``."""
    eta = np.asarray(eta, dtype=float)
    if metric is None:
        return np.sqrt(1.0 + np.sum(eta * eta, axis=-1))
    ginv = metric.g_inv(as_points(y, metric.n))
    return np.sqrt(1.0 + np.einsum("...ab,...a,...b->...", ginv, eta, eta))


@dataclass(frozen=True)
class SymbolSpec:
    """Symbol of class ``S^m_{rho,delta}`` on the n-torus."""

    fn: Callable
    m: float
    rho: float = 1.0
    delta: float = 0.0
    n: int = 1
    grad_eta: Optional[Callable] = None
    grad_y: Optional[Callable] = None
    y_independent: bool = False
    label: str = "symbol"

    def __post_init__(self):
        if not (0.0 <= self.delta < self.rho <= 1.0):
            raise BadParams(f"need 0 <= delta < rho <= 1, got rho={self.rho}, delta={self.delta}")
        if self.n not in (1, 2):
            raise BadParams(f"dimension must be 1 or 2, got {self.n}")

    def __call__(self, y, eta) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        eta = np.asarray(eta, dtype=float)
        return np.asarray(self.fn(y, eta), dtype=complex)

    def __mul__(self, other: "SymbolSpec") -> "SymbolSpec":
        if not isinstance(other, SymbolSpec):
            return NotImplemented
        if other.n != self.n:
            raise BadParams("dimension mismatch")
        f, g = self.fn, other.fn
        return SymbolSpec(
            fn=lambda y, e: np.asarray(f(y, e), dtype=complex) * g(y, e),
            m=self.m + other.m, rho=min(self.rho, other.rho),
            delta=max(self.delta, other.delta), n=self.n,
            y_independent=self.y_independent and other.y_independent,
            label=f"({self.label})*({other.label})")

    def with_class(self, m: float, rho: float, delta: float) -> "SymbolSpec":
        return replace(self, m=m, rho=rho, delta=delta)


# ---------------------------------------------------------------------------
# Derivatives
# ---------------------------------------------------------------------------


def _unit(n, j, shape):
    e = np.zeros(shape[:-1] + (n,)) if len(shape) else np.zeros(n)
    e[..., j] = 1.0
    return e


def d_eta(a: SymbolSpec, j: int, rel: float = 1e-4, metric: Optional[MetricField] = None) -> SymbolSpec:
    """``d a / d eta_j`` as a symbol of order ``m - rho``."""
    if a.grad_eta is not None:
        g = a.grad_eta
        fn = lambda y, e: np.asarray(g(y, e))[..., j]
    else:
        f = a.fn

        def fn(y, e):
            y, e = np.broadcast_arrays(np.asarray(y, float), np.asarray(e, float))
            h = rel * weight(metric, y, e) ** a.rho
            step = _unit(a.n, j, e.shape) * h[..., None]
            return (np.asarray(f(y, e + step), complex) - f(y, e - step)) / (2.0 * h)

    return SymbolSpec(fn=fn, m=a.m - a.rho, rho=a.rho, delta=a.delta, n=a.n,
                      y_independent=a.y_independent, label=f"d_eta{j}({a.label})")


def d_y(a: SymbolSpec, k: int, rel: float = 1e-4, metric: Optional[MetricField] = None) -> SymbolSpec:
    """Plain chart derivative ``d a / d y^k``."""
    if a.y_independent:
        return SymbolSpec(fn=lambda y, e: np.zeros(np.broadcast_shapes(np.shape(y), np.shape(e))[:-1], complex),
                          m=a.m + a.delta, rho=a.rho, delta=a.delta, n=a.n, y_independent=True,
                          label="0")
    if a.grad_y is not None:
        g = a.grad_y
        fn = lambda y, e: np.asarray(g(y, e))[..., k]
    else:
        f = a.fn

        def fn(y, e):
            y, e = np.broadcast_arrays(np.asarray(y, float), np.asarray(e, float))
            h = rel * weight(metric, y, e) ** (-a.delta)
            step = _unit(a.n, k, y.shape) * h[..., None]
            return (np.asarray(f(y + step, e), complex) - f(y - step, e)) / (2.0 * h)

    return SymbolSpec(fn=fn, m=a.m + a.delta, rho=a.rho, delta=a.delta, n=a.n,
                      label=f"d_y{k}({a.label})")


def horizontal_derivative(a: SymbolSpec, conn: ConnectionField, k: int, rel: float = 1e-4,
                          metric: Optional[MetricField] = None) -> SymbolSpec:
    """Horizontal lift ``nabla_k a = d_{y^k} a + Gamma^i_{kj}(y) eta_i d_{eta_j} a``; order ``m + delta``."""
    dy = d_y(a, k, rel, metric)
    if conn is None or conn.is_trivial:
        return replace(dy, label=f"nabla{k}({a.label})")
    deta = [d_eta(a, j, rel, metric) for j in range(a.n)]

    def fn(y, e):
        y, e = np.broadcast_arrays(np.asarray(y, float), np.asarray(e, float))
        G = conn.christoffel(y)
        out = np.asarray(dy.fn(y, e), complex)
        for j in range(a.n):
            out = out + np.einsum("...i,...i->...", G[..., :, k, j], e) * deta[j].fn(y, e)
        return out

    return SymbolSpec(fn=fn, m=a.m + a.delta, rho=a.rho, delta=a.delta, n=a.n,
                      label=f"nabla{k}({a.label})")


# ---------------------------------------------------------------------------
# Seminorms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SeminormReport:
    level: int
    value: float
    grid: tuple
    witness: dict
    target: tuple
    threshold: Optional[float] = None

    @property
    def passed(self) -> Optional[bool]:
        return None if self.threshold is None else bool(self.value <= self.threshold)


def eta_samples(n: int, eta_max: float) -> np.ndarray:
    """``{0}`` plus dyadic shells ``2^j <= eta_max`` in 2 (n=1) or 8 (n=2) directions."""
    radii = 2.0 ** np.arange(0, int(np.floor(np.log2(max(eta_max, 1.0)) + 1e-9)) + 1)
    if n == 1:
        dirs = np.array([[1.0], [-1.0]])
    else:
        ang = np.pi * np.arange(8) / 4
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    pts = (radii[:, None, None] * dirs[None]).reshape(-1, n)
    return np.concatenate([np.zeros((1, n)), pts])


def y_samples(n: int, grid: int) -> np.ndarray:
    x = 2.0 * np.pi * np.arange(grid) / grid
    mesh = np.meshgrid(*([x] * n), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _derivative_tuples(n: int, l: int):
    """All ``(alpha, ks)`` with ``|alpha| + len(ks) <= l``; ``ks`` ordered horizontal directions."""
    for total in range(l + 1):
        for q in range(total + 1):
            order_a = total - q
            for alpha in itertools.product(range(order_a + 1), repeat=n):
                if sum(alpha) != order_a:
                    continue
                for ks in itertools.product(range(n), repeat=q):
                    yield alpha, ks


def seminorm_estimate(a: SymbolSpec, l: int, eta_max: float, grid: int = 8,
                      conn: Optional[ConnectionField] = None,
                      metric: Optional[MetricField] = None,
                      target: Optional[tuple] = None,
                      threshold: Optional[float] = None) -> SeminormReport:
    """Grid lower bound of ``||a||_{l; S^m_{rho,delta}}``.

    Takes the maximum over sampled ``(y, eta)`` and ``|alpha| + q <= l`` of
    ``|d_eta^alpha nabla_{k_1} ... nabla_{k_q} a| / <eta>_y^(m + delta q - rho |alpha|)``.
    ``target = (m, rho, delta)`` measures against another class than the
    symbol's own metadata.
    """
    if l < 0 or l > 6:
        raise BadParams("seminorm level must lie in 0..6")
    m, rho, delta = target if target is not None else (a.m, a.rho, a.delta)
    n = a.n
    ys = y_samples(n, 1 if a.y_independent else grid)
    es = eta_samples(n, eta_max)
    Y = np.repeat(ys, len(es), axis=0)
    E = np.tile(es, (len(ys), 1))
    w = weight(metric, Y, E)
    best = (-1.0, None)
    for alpha, ks in _derivative_tuples(n, l):
        order = sum(alpha) + len(ks)
        if a.y_independent and ks and (conn is None or conn.is_trivial):
            continue
        rel = fd_rel(order)
        b = a
        for k in ks:
            b = horizontal_derivative(b, conn, k, rel, metric)
        for j, cnt in enumerate(alpha):
            for _ in range(cnt):
                b = d_eta(b, j, rel, metric)
        vals = b(Y, E)
        if not np.all(np.isfinite(vals)):
            raise NonFinite(f"{a.label}: non-finite derivative for alpha={alpha}, ks={ks}")
        ratio = np.abs(vals) / w ** (m + delta * len(ks) - rho * sum(alpha))
        i = int(np.argmax(ratio))
        if ratio[i] > best[0]:
            best = (float(ratio[i]), dict(y=Y[i].tolist(), eta=E[i].tolist(),
                                          alpha=list(alpha), ks=list(ks)))
    value = max(best[0], 0.0)
    return SeminormReport(level=l, value=value, grid=(len(ys), len(es)), witness=best[1],
                          target=(m, rho, delta), threshold=threshold)


@dataclass(frozen=True)
class MembershipResult:
    passed: bool
    margin: float
    eta_max: tuple
    estimates: tuple


def class_membership_check(a: SymbolSpec, target: tuple, l: int = 3, eta_max: float = 1024.0,
                           sweep: int = 4, grid: int = 8, conn=None, metric=None,
                           ratio_cap: float = 1.1) -> MembershipResult:
    """Pass iff seminorm estimates stay bounded over the doubling sweep ``eta_max / 2^k``.

    Bounded means every ratio of successive estimates is below ``ratio_cap``;
    ``margin = ratio_cap - max ratio``.
    """
    emaxes = tuple(eta_max / 2.0 ** k for k in range(sweep - 1, -1, -1))
    est = tuple(seminorm_estimate(a, l, e, grid=grid, conn=conn, metric=metric, target=target).value
                for e in emaxes)
    ratios = [est[i + 1] / est[i] if est[i] > 0 else (np.inf if est[i + 1] > 0 else 1.0)
              for i in range(len(est) - 1)]
    worst = max(ratios) if ratios else 1.0
    return MembershipResult(passed=bool(worst < ratio_cap), margin=float(ratio_cap - worst),
                            eta_max=emaxes, estimates=est)


# ---------------------------------------------------------------------------
# Named symbols
# ---------------------------------------------------------------------------


def make_multiplier(m_fun: Callable, m: float, rho: float = 1.0, delta: float = 0.0, n: int = 1,
                    grad: Optional[Callable] = None, label: str = "multiplier") -> SymbolSpec:
    """y-independent symbol ``a(y, eta) = m_fun(eta)``."""

    def fn(y, e):
        shape = np.broadcast_shapes(np.shape(y), np.shape(e))
        return np.broadcast_to(np.asarray(m_fun(e), complex), shape[:-1])

    g = None
    if grad is not None:
        def g(y, e):
            shape = np.broadcast_shapes(np.shape(y), np.shape(e))
            return np.broadcast_to(np.asarray(grad(e), complex), shape)

    return SymbolSpec(fn=fn, m=m, rho=rho, delta=delta, n=n, grad_eta=g, y_independent=True,
                      label=label)


def make_weight_power(gamma: float, metric: Optional[MetricField] = None, n: int = 1) -> SymbolSpec:
    """``<eta>_y^gamma``, class ``S^gamma_{1,0}``."""
    if metric is not None:
        n = metric.n

    def fn(y, e):
        return weight(metric, y, e) ** gamma + 0j

    def grad(y, e):
        y, e = np.broadcast_arrays(np.asarray(y, float), np.asarray(e, float))
        w = weight(metric, y, e)
        ge = e if metric is None else np.einsum("...ab,...b->...a", metric.g_inv(y), e)
        return (gamma * w ** (gamma - 2.0))[..., None] * ge + 0j

    flat = metric is None or metric.is_constant
    return SymbolSpec(fn=fn, m=gamma, rho=1.0, delta=0.0, n=n, grad_eta=grad, y_independent=flat,
                      label=f"weight^{gamma}")


def make_bessel(lam: float, n: int = 1) -> SymbolSpec:
    """Flat Bessel-potential symbol ``(1 + |xi|^2)^(lam/2)``."""

    def m_fun(e):
        return (1.0 + np.sum(e * e, axis=-1)) ** (lam / 2.0)

    def grad(e):
        return (lam * (1.0 + np.sum(e * e, axis=-1)) ** (lam / 2.0 - 1.0))[..., None] * e

    return make_multiplier(m_fun, lam, 1.0, 0.0, n=n, grad=grad, label=f"bessel:{lam:g}")


def smooth_step(r) -> np.ndarray:
    """C-infinity step: 0 for r <= 1/2, 1 for r >= 1."""
    s = np.clip(2.0 * np.asarray(r, dtype=float) - 1.0, 0.0, 1.0)

    def phi(t):
        out = np.zeros_like(t)
        pos = t > 0
        out[pos] = np.exp(-1.0 / t[pos])
        return out

    a, b = phi(s), phi(1.0 - s)
    return a / (a + b)


def make_counterexample(rho: float, theta: float, x0=None, metric: Optional[MetricField] = None,
                        n: int = 1) -> SymbolSpec:
    """``chi(|xi|) exp(i |xi|^(1-rho)) / (1 + |xi|^theta)``, class ``S^{-theta}_{rho,0}``.

    ``|xi|`` is measured with the metric frozen at ``x0``; ``chi`` is
    :func:`smooth_step`, which removes the singularity at the origin.
    """
    if not (0.0 < rho < 1.0):
        raise BadParams(f"counterexample needs 0 < rho < 1, got {rho}")
    if theta < 0:
        raise BadParams(f"counterexample needs theta >= 0, got {theta}")
    if metric is not None:
        n = metric.n
        x0 = np.zeros(n) if x0 is None else as_points(x0, n).reshape(n)
        ginv0 = metric.g_inv(x0)
    else:
        ginv0 = np.eye(n)

    def m_fun(e):
        r = np.sqrt(np.einsum("ab,...a,...b->...", ginv0, e, e))
        return smooth_step(r) * np.exp(1j * r ** (1.0 - rho)) / (1.0 + r ** theta)

    return make_multiplier(m_fun, -theta, rho, 0.0, n=n, label=f"counterexample:{rho:g}:{theta:g}")


def make_laplacian_symbol(metric: MetricField) -> SymbolSpec:
    """``-|xi|_y^2 + S(y)/3`` with S the scalar curvature of the Levi-Civita connection."""
    n = metric.n
    curved = n == 2 and not metric.is_constant

    def fn(y, e):
        y, e = np.broadcast_arrays(np.asarray(y, float), np.asarray(e, float))
        q = np.einsum("...ab,...a,...b->...", metric.g_inv(y), e, e)
        out = -q + 0j
        if curved:
            out = out + scalar_curvature(metric, y) / 3.0
        return out

    def grad(y, e):
        y, e = np.broadcast_arrays(np.asarray(y, float), np.asarray(e, float))
        return -2.0 * np.einsum("...ab,...b->...a", metric.g_inv(y), e) + 0j

    return SymbolSpec(fn=fn, m=2.0, rho=1.0, delta=0.0, n=n, grad_eta=grad,
                      y_independent=metric.is_constant, label=f"laplacian({metric.label})")


def make_fourier_table(table) -> SymbolSpec:
    """Symbol ``c(y) <eta>^m`` with ``c(y) = sum_k c_k exp(i k.y)`` read from a JSON table.

    Table layout: ``{"n": 1, "order": m, "coeffs": [[k..., re, im], ...]}``;
    ``"real": true`` keeps only the real part of ``c``.
    """
    doc = json.loads(table) if isinstance(table, str) else dict(table)
    n = int(doc.get("n", 1))
    m = float(doc.get("order", 0.0))
    rows = np.asarray(doc["coeffs"], dtype=float).reshape(-1, n + 2)
    K = rows[:, :n]
    C = rows[:, n] + 1j * rows[:, n + 1]
    real = bool(doc.get("real", False))

    def coef(y):
        c = np.exp(1j * (np.asarray(y, float) @ K.T)) @ C
        return c.real + 0j if real else c

    def dcoef(y):
        d = (np.exp(1j * (np.asarray(y, float) @ K.T)) * C) @ (1j * K)
        return d.real + 0j if real else d

    def fn(y, e):
        y, e = np.broadcast_arrays(np.asarray(y, float), np.asarray(e, float))
        return coef(y) * weight(None, y, e) ** m

    def grad_eta(y, e):
        y, e = np.broadcast_arrays(np.asarray(y, float), np.asarray(e, float))
        w = weight(None, y, e)
        return (coef(y) * m * w ** (m - 2.0))[..., None] * e

    def grad_y(y, e):
        y, e = np.broadcast_arrays(np.asarray(y, float), np.asarray(e, float))
        return dcoef(y) * (weight(None, y, e) ** m)[..., None]

    return SymbolSpec(fn=fn, m=m, rho=1.0, delta=0.0, n=n, grad_eta=grad_eta, grad_y=grad_y,
                      label="fourier-table")


def parse_symbol(text: str, metric: Optional[MetricField] = None, n: int = 1, table=None) -> SymbolSpec:
    """Build a symbol from a config string.

    Accepted forms: ``multiplier:bessel:LAM``, ``counterexample:RHO:THETA``,
    ``laplacian`` and ``fourier-table`` (with ``table``).
    """
    if metric is not None:
        n = metric.n
    parts = text.split(":")
    kind = parts[0]
    try:
        if kind == "multiplier" and len(parts) == 3 and parts[1] == "bessel":
            return make_bessel(float(parts[2]), n=n)
        if kind == "counterexample" and len(parts) == 3:
            return make_counterexample(float(parts[1]), float(parts[2]), metric=metric, n=n)
    except ValueError as exc:
        if isinstance(exc, BadParams):
            raise
        raise BadParams(f"cannot parse symbol {text!r}") from exc
    if kind == "laplacian" and len(parts) == 1:
        return make_laplacian_symbol(metric if metric is not None else MetricField.flat(n))
    if kind == "fourier-table" and len(parts) == 1:
        if table is None:
            raise BadParams("fourier-table symbol needs a coefficient table")
        return make_fourier_table(table)
    raise BadParams(f"unknown symbol {text!r}")
