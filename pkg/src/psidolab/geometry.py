"""Metrics, linear connections, geodesics and parallel transport on T^1 and T^2.

Everything here works in the standard periodic chart of the torus (period
2*pi per axis).  Points and tangent vectors are arrays whose trailing axis has
length ``n``; every evaluator is vectorised over any leading batch shape.

Christoffel symbols are stored as ``G[..., i, k, j] = Gamma^i_{kj}`` where
``k`` is the differentiation direction, i.e. ``nabla_k d_j = Gamma^i_{kj} d_i``.
First partials carry the derivative index last:
``dG[..., i, k, j, l] = d_l Gamma^i_{kj}``.

A transport matrix ``P`` acts on covector components, ``(Phi zeta)_j =
P[j, i] zeta_i``, so ``P[j, i]`` is the coefficient usually written
``(Phi)^i_j``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

TWO_PI = 2.0 * np.pi
R_GUARD = 0.9 * np.pi
FD_STEP = 1e-4
DEFAULT_STEP = 1.0 / 256


class GeometryError(Exception):
    pass


class StepFailure(GeometryError):
    pass


class OutsideInjectivityRadius(GeometryError):
    pass


class NoConvergence(GeometryError):
    pass


def shortest_rep(d):
    """Shortest periodic representative of a chart displacement, in [-pi, pi)."""
    return (np.asarray(d, dtype=float) + np.pi) % TWO_PI - np.pi


def as_points(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if n == 1 and (y.ndim == 0 or y.shape[-1] != 1):
        y = y[..., None]
    if y.shape[-1] != n:
        raise ValueError(f"expected trailing axis of length {n}, got shape {y.shape}")
    return y


def central_diff(fn: Callable, y: np.ndarray, h: float) -> np.ndarray:
    """Central differences of ``fn`` in each chart direction, stacked on a new last axis."""
    y = np.asarray(y, dtype=float)
    n = y.shape[-1]
    cols = []
    for l in range(n):
        e = np.zeros(n)
        e[l] = h
        cols.append((fn(y + e) - fn(y - e)) / (2.0 * h))
    return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------------
# Metric
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricField:
    """Periodic Riemannian metric ``g_ij(y)`` on the torus chart.

    ``g_fn`` maps points ``(..., n)`` to ``(..., n, n)``.  ``dg_fn`` and
    ``d2g_fn`` return first and second partials with derivative indices last;
    when omitted they fall back to central differences with step ``FD_STEP``.
    """

    n: int
    g_fn: Callable
    dg_fn: Optional[Callable] = None
    d2g_fn: Optional[Callable] = None
    is_constant: bool = False
    label: str = "metric"
    # optional closed-form Levi-Civita symbols (same layout as ConnectionField)
    christoffel_fn: Optional[Callable] = None
    dchristoffel_fn: Optional[Callable] = None

    def g(self, y) -> np.ndarray:
        return self.g_fn(as_points(y, self.n))

    def g_inv(self, y) -> np.ndarray:
        return np.linalg.inv(self.g(y))

    def dg(self, y) -> np.ndarray:
        y = as_points(y, self.n)
        if self.dg_fn is not None:
            return self.dg_fn(y)
        if self.is_constant:
            return np.zeros(y.shape[:-1] + (self.n,) * 3)
        return central_diff(self.g_fn, y, FD_STEP)

    def d2g(self, y) -> np.ndarray:
        y = as_points(y, self.n)
        if self.d2g_fn is not None:
            return self.d2g_fn(y)
        if self.is_constant:
            return np.zeros(y.shape[:-1] + (self.n,) * 4)
        return central_diff(self.dg, y, FD_STEP)

    def sqrt_det(self, y) -> np.ndarray:
        """Volume density sqrt(|det g_ij|) against the chart Lebesgue measure."""
        return np.sqrt(np.abs(np.linalg.det(self.g(y))))

    def levi_civita(self) -> "ConnectionField":
        return ConnectionField.levi_civita(self)

    def validate(self, samples: np.ndarray) -> None:
        """Raise ``ValueError`` unless symmetry, positivity and inversion hold on ``samples``."""
        g = self.g(samples)
        if np.max(np.abs(g - np.swapaxes(g, -1, -2))) > 1e-12:
            raise ValueError(f"{self.label}: g_ij not symmetric")
        if np.min(np.linalg.eigvalsh(g)) <= 1e-8:
            raise ValueError(f"{self.label}: g_ij not positive definite")
        eye = np.eye(self.n)
        if np.max(np.abs(g @ np.linalg.inv(g) - eye)) > 1e-10:
            raise ValueError(f"{self.label}: inverse metric inaccurate")

    @classmethod
    def flat(cls, n: int = 1) -> "MetricField":
        return cls.constant(np.eye(n), label=f"flat{n}")

    @classmethod
    def constant(cls, gmat, label: str = "constant") -> "MetricField":
        gmat = np.array(gmat, dtype=float, ndmin=2)
        n = gmat.shape[0]

        def g_fn(y):
            return np.broadcast_to(gmat, y.shape[:-1] + (n, n)).copy()

        return cls(n=n, g_fn=g_fn, is_constant=True, label=label)

    @classmethod
    def warped(cls) -> "MetricField":
        """Torus of revolution ``g = diag(1, (2 + cos y1)^2)``; Gaussian curvature cos/(2+cos)."""

        def g_fn(y):
            f = 2.0 + np.cos(y[..., 0])
            out = np.zeros(y.shape[:-1] + (2, 2))
            out[..., 0, 0] = 1.0
            out[..., 1, 1] = f * f
            return out

        def dg_fn(y):
            f = 2.0 + np.cos(y[..., 0])
            out = np.zeros(y.shape[:-1] + (2, 2, 2))
            out[..., 1, 1, 0] = -2.0 * f * np.sin(y[..., 0])
            return out

        def d2g_fn(y):
            s, c = np.sin(y[..., 0]), np.cos(y[..., 0])
            out = np.zeros(y.shape[:-1] + (2, 2, 2, 2))
            out[..., 1, 1, 0, 0] = 2.0 * s * s - 2.0 * (2.0 + c) * c
            return out

        def gamma_fn(y):
            s, c = np.sin(y[..., 0]), np.cos(y[..., 0])
            f = 2.0 + c
            out = np.zeros(y.shape[:-1] + (2, 2, 2))
            out[..., 0, 1, 1] = f * s
            out[..., 1, 0, 1] = out[..., 1, 1, 0] = -s / f
            return out

        def dgamma_fn(y):
            s, c = np.sin(y[..., 0]), np.cos(y[..., 0])
            f = 2.0 + c
            out = np.zeros(y.shape[:-1] + (2, 2, 2, 2))
            out[..., 0, 1, 1, 0] = f * c - s * s
            out[..., 1, 0, 1, 0] = out[..., 1, 1, 0, 0] = -(2.0 * c + 1.0) / (f * f)
            return out

        return cls(n=2, g_fn=g_fn, dg_fn=dg_fn, d2g_fn=d2g_fn, label="warped",
                   christoffel_fn=gamma_fn, dchristoffel_fn=dgamma_fn)

    @classmethod
    def conformal_1d(cls, amplitude: float = 0.5) -> "MetricField":
        """``g_11 = (1 + amplitude*cos y)^2`` on the circle."""

        def g_fn(y):
            return ((1.0 + amplitude * np.cos(y[..., 0])) ** 2)[..., None, None]

        def dg_fn(y):
            c, s = np.cos(y[..., 0]), np.sin(y[..., 0])
            return (-2.0 * amplitude * s * (1.0 + amplitude * c))[..., None, None, None]

        return cls(n=1, g_fn=g_fn, dg_fn=dg_fn, label=f"conformal1d:{amplitude}")


# ---------------------------------------------------------------------------
# Connection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConnectionField:
    n: int
    gamma_fn: Callable
    dgamma_fn: Optional[Callable] = None
    is_symmetric: bool = False
    is_flat: bool = False
    is_trivial: bool = False
    levi_civita_of: Optional[MetricField] = None
    label: str = "connection"
    # (wavevectors (m, n) int, coefficients (m, n, n, n) complex) for Fourier fields
    fourier: Optional[tuple] = field(default=None, compare=False, repr=False)

    def christoffel(self, y) -> np.ndarray:
        return self.gamma_fn(as_points(y, self.n))

    def dchristoffel(self, y) -> np.ndarray:
        y = as_points(y, self.n)
        if self.dgamma_fn is not None:
            return self.dgamma_fn(y)
        return central_diff(self.gamma_fn, y, FD_STEP)

    # -- constructors -----------------------------------------------------

    @classmethod
    def trivial(cls, n: int = 1) -> "ConnectionField":
        def gamma_fn(y):
            return np.zeros(y.shape[:-1] + (n,) * 3)

        def dgamma_fn(y):
            return np.zeros(y.shape[:-1] + (n,) * 4)

        return cls(n=n, gamma_fn=gamma_fn, dgamma_fn=dgamma_fn, is_symmetric=True,
                   is_flat=True, is_trivial=True, label=f"trivial{n}")

    @classmethod
    def constant(cls, gamma, label: str = "constant") -> "ConnectionField":
        gamma = np.asarray(gamma, dtype=float)
        if gamma.ndim == 0:
            gamma = gamma.reshape(1, 1, 1)
        n = gamma.shape[0]
        if np.all(gamma == 0):
            return cls.trivial(n)
        symmetric = bool(np.max(np.abs(gamma - np.swapaxes(gamma, 1, 2))) < 1e-12)
        # constant coefficients: R = Gamma Gamma - Gamma Gamma
        r = (np.einsum("ikm,mlj->ijkl", gamma, gamma)
             - np.einsum("ilm,mkj->ijkl", gamma, gamma))
        flat = symmetric and bool(np.max(np.abs(r)) < 1e-12)

        def gamma_fn(y):
            return np.broadcast_to(gamma, y.shape[:-1] + gamma.shape).copy()

        def dgamma_fn(y):
            return np.zeros(y.shape[:-1] + (n,) * 4)

        return cls(n=n, gamma_fn=gamma_fn, dgamma_fn=dgamma_fn, is_symmetric=symmetric,
                   is_flat=flat, label=label)

    @classmethod
    def from_fourier(cls, n: int, wavevectors, coeffs, label: str = "fourier") -> "ConnectionField":
        """``Gamma^i_{kj}(y) = Re sum_m coeffs[m, i, k, j] exp(i K_m . y)``."""
        K = np.asarray(wavevectors, dtype=float).reshape(-1, n)
        C = np.asarray(coeffs, dtype=complex).reshape(K.shape[0], n, n, n)

        def gamma_fn(y):
            e = np.exp(1j * (y @ K.T))
            return np.einsum("...m,mikj->...ikj", e, C).real

        def dgamma_fn(y):
            e = np.exp(1j * (y @ K.T))
            return np.einsum("...m,mikj,ml->...ikjl", e, C, 1j * K).real

        conn = cls(n=n, gamma_fn=gamma_fn, dgamma_fn=dgamma_fn, label=label,
                   fourier=(K.astype(int), C))
        return conn.with_detected_flags()

    @classmethod
    def random(cls, n: int, rng: np.random.Generator, modes: int = 2,
               amplitude: float = 0.3, symmetric: bool = False) -> "ConnectionField":
        """Random smooth periodic connection with wavenumbers |k|_inf <= modes."""
        K = np.array(list(itertools.product(range(-modes, modes + 1), repeat=n)))
        decay = 1.0 / (1.0 + np.sum(K * K, axis=-1))
        C = (rng.standard_normal((len(K), n, n, n)) + 1j * rng.standard_normal((len(K), n, n, n)))
        C *= (amplitude * decay)[:, None, None, None]
        if symmetric:
            C = 0.5 * (C + np.swapaxes(C, 2, 3))
        return cls.from_fourier(n, K, C, label=f"random{n}")

    @classmethod
    def levi_civita(cls, metric: MetricField, closed_form: bool = True) -> "ConnectionField":
        """Levi-Civita connection, with the usual factor 1/2.

        Uses the metric's closed-form symbols when it carries them and
        ``closed_form`` is true; otherwise the coordinate formula.
        """
        n = metric.n
        if closed_form and metric.christoffel_fn is not None:
            return cls(n=n, gamma_fn=metric.christoffel_fn, dgamma_fn=metric.dchristoffel_fn,
                       is_symmetric=True, is_flat=n == 1, levi_civita_of=metric,
                       label=f"LC({metric.label})")

        def gamma_fn(y):
            ginv = metric.g_inv(y)
            dg = metric.dg(y)  # [r, j, k] = d_k g_rj
            t = dg + np.swapaxes(dg, -1, -2) - np.einsum("...jkr->...rkj", dg)
            # t[r, k, j] = d_k g_rj + d_j g_rk - d_r g_jk
            t = np.swapaxes(t, -1, -2)
            return 0.5 * np.einsum("...lr,...rkj->...lkj", ginv, t, optimize=True)

        dgamma_fn = None
        if metric.d2g_fn is not None or metric.is_constant:
            def dgamma_fn(y):
                ginv = metric.g_inv(y)
                dg = metric.dg(y)
                d2g = metric.d2g(y)  # [r, j, k, m] = d_m d_k g_rj
                t = dg + np.swapaxes(dg, -1, -2) - np.einsum("...jkr->...rkj", dg)
                t = np.swapaxes(t, -1, -2)
                dt = (d2g + np.einsum("...rjkm->...rkjm", d2g)
                      - np.einsum("...jkrm->...rkjm", d2g))
                # dt[r, j, k, m] = d_m t[r, k, j]  -> reorder to [r, k, j, m]
                dt = np.swapaxes(dt, -2, -3)
                dginv = -np.einsum("...la,...abm,...br->...lrm", ginv, dg, ginv, optimize=True)
                return 0.5 * (np.einsum("...lrm,...rkj->...lkjm", dginv, t, optimize=True)
                              + np.einsum("...lr,...rkjm->...lkjm", ginv, dt, optimize=True))

        flat = metric.is_constant or n == 1
        return cls(n=n, gamma_fn=gamma_fn, dgamma_fn=dgamma_fn, is_symmetric=True,
                   is_flat=flat, is_trivial=metric.is_constant, levi_civita_of=metric,
                   label=f"LC({metric.label})")

    def with_detected_flags(self, samples: int = 12) -> "ConnectionField":
        """Recompute ``is_symmetric``/``is_flat``/``is_trivial`` on a sample grid."""
        y = torus_grid(samples, self.n)
        G = self.christoffel(y)
        trivial = bool(np.max(np.abs(G)) == 0.0)
        symmetric = bool(np.max(np.abs(G - np.swapaxes(G, -1, -2))) < 1e-12)
        flat = symmetric and bool(np.max(np.abs(curvature(self, y))) < 1e-10)
        return ConnectionField(n=self.n, gamma_fn=self.gamma_fn, dgamma_fn=self.dgamma_fn,
                               is_symmetric=symmetric, is_flat=flat, is_trivial=trivial,
                               levi_civita_of=self.levi_civita_of, label=self.label,
                               fourier=self.fourier)

    # -- JSON ---------------------------------------------------------------

    def to_json(self) -> str:
        if self.fourier is None:
            raise ValueError("only Fourier connections serialise to JSON")
        K, C = self.fourier
        rows = []
        for m in range(len(K)):
            for idx in itertools.product(range(self.n), repeat=3):
                c = C[(m,) + idx]
                if c == 0:
                    continue
                if self.n == 1:
                    rows.append([int(K[m, 0]), float(c.real), float(c.imag)])
                else:
                    rows.append([*idx] + [int(k) for k in K[m]] + [float(c.real), float(c.imag)])
        return json.dumps({"n": self.n, "gamma": "fourier", "coeffs": rows})

    @classmethod
    def from_json(cls, text: str) -> "ConnectionField":
        doc = json.loads(text) if isinstance(text, str) else text
        n = int(doc["n"])
        if doc.get("gamma") != "fourier":
            raise ValueError("unsupported connection document")
        rows = doc["coeffs"]
        if n == 1:
            ks = sorted({int(r[0]) for r in rows})
            K = np.array(ks).reshape(-1, 1)
            C = np.zeros((len(ks), 1, 1, 1), dtype=complex)
            for k, re, im in rows:
                C[ks.index(int(k)), 0, 0, 0] += complex(re, im)
        else:
            ks = sorted({tuple(int(v) for v in r[3:3 + n]) for r in rows})
            K = np.array(ks).reshape(-1, n)
            C = np.zeros((len(ks), n, n, n), dtype=complex)
            for r in rows:
                i, k, j = (int(v) for v in r[:3])
                C[ks.index(tuple(int(v) for v in r[3:3 + n])), i, k, j] += complex(r[-2], r[-1])
        return cls.from_fourier(n, K, C)


@dataclass(frozen=True)
class Geometry:
    metric: MetricField
    conn: ConnectionField

    @property
    def n(self) -> int:
        return self.metric.n

    @property
    def is_flat_trivial(self) -> bool:
        return self.metric.is_constant and self.conn.is_trivial

    @classmethod
    def flat(cls, n: int = 1) -> "Geometry":
        return cls(MetricField.flat(n), ConnectionField.trivial(n))


def torus_grid(M: int, n: int) -> np.ndarray:
    """Uniform periodic grid, shape (M**n, n), 'ij' ordering."""
    x = TWO_PI * np.arange(M) / M
    mesh = np.meshgrid(*([x] * n), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


# ---------------------------------------------------------------------------
# Tensors
# ---------------------------------------------------------------------------


def torsion(conn: ConnectionField, y) -> np.ndarray:
    """``T[..., i, j, k] = Gamma^i_{jk} - Gamma^i_{kj}``."""
    G = conn.christoffel(y)
    return G - np.swapaxes(G, -1, -2)


def curvature(conn: ConnectionField, y) -> np.ndarray:
    """``R[..., i, j, k, l] = R^i_{jkl}``, the component of R(d_k, d_l) d_j along d_i."""
    G = conn.christoffel(y)
    dG = conn.dchristoffel(y)
    # d_k Gamma^i_{lj} - d_l Gamma^i_{kj}
    dterm = np.einsum("...iljk->...ijkl", dG) - np.einsum("...ikjl->...ijkl", dG)
    gg = (np.einsum("...ikm,...mlj->...ijkl", G, G)
          - np.einsum("...ilm,...mkj->...ijkl", G, G))
    return dterm + gg


def scalar_curvature(metric: MetricField, y) -> np.ndarray:
    if metric.n == 1:
        return np.zeros(as_points(y, 1).shape[:-1])
    R = curvature(metric.levi_civita(), y)
    ric = np.einsum("...ijil->...jl", R)
    return np.einsum("...jl,...jl->...", metric.g_inv(y), ric)


# ---------------------------------------------------------------------------
# Geodesic flow
# ---------------------------------------------------------------------------


def _rhs(conn, z, u, J, K, P):
    G = conn.christoffel(z)
    Gu = np.einsum("...ikj,...k->...ij", G, u)  # Gamma^i_{kj} u^k
    acc = -np.einsum("...ij,...j->...i", Gu, u)
    dJ = dK = dP = None
    if J is not None:
        dG = conn.dchristoffel(z)
        w = np.einsum("...ijl,...j->...il", np.einsum("...ikjl,...k->...ijl", dG, u), u)
        Gv = np.einsum("...ikj,...j->...ik", G, u)  # Gamma^i_{kj} u^j
        dK = -(w @ J) - Gv @ K - Gu @ K
        dJ = K
    if P is not None:
        dP = np.swapaxes(Gu, -1, -2) @ P
    return u, acc, dJ, dK, dP


def _axpy(state, k, h):
    return tuple(None if s is None else s + h * d for s, d in zip(state, k))


def _flow(conn, x, v, t_end=1.0, step=DEFAULT_STEP, jacobian=False, transport=False,
          record=False):
    """RK4 integration of the geodesic ODE with optional variational and transport blocks.

    Returns ``(z, u, J, P, path)``: endpoint, velocity, ``dz(t_end)/dv``, covector
    transport matrix, and (if ``record``) sampled ``(t, z, u)``.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    x, v = np.broadcast_arrays(x, v)
    n = x.shape[-1]
    batch = x.shape[:-1]
    eye = np.broadcast_to(np.eye(n), batch + (n, n))
    state = (x.copy(), v.copy(),
             np.zeros(batch + (n, n)) if jacobian else None,
             eye.copy() if jacobian else None,
             eye.copy() if transport else None)
    steps = max(1, int(math.ceil(t_end / step - 1e-12)))
    h = t_end / steps
    zs, us = ([state[0].copy()], [state[1].copy()]) if record else (None, None)
    for _ in range(steps):
        k1 = _rhs(conn, *state)
        k2 = _rhs(conn, *_axpy(state, k1, h / 2))
        k3 = _rhs(conn, *_axpy(state, k2, h / 2))
        k4 = _rhs(conn, *_axpy(state, k3, h))
        state = tuple(
            None if s is None else s + (h / 6.0) * (a + 2 * b + 2 * c + d)
            for s, a, b, c, d in zip(state, k1, k2, k3, k4))
        if record:
            zs.append(state[0].copy())
            us.append(state[1].copy())
    path = None
    if record:
        path = (np.linspace(0.0, t_end, steps + 1), np.stack(zs), np.stack(us))
    return state[0], state[1], state[2], state[4], path


@dataclass(frozen=True)
class GeodesicSolution:
    x: np.ndarray
    v: np.ndarray
    t: np.ndarray
    z: np.ndarray
    zdot: np.ndarray
    step: float
    residual: float


def geodesic_residual(conn: ConnectionField, t, z, zdot) -> float:
    """Max residual of z'' + Gamma(z') (z') at interior samples (fourth-order differences of z')."""
    if len(t) < 5:
        return 0.0
    h = t[1] - t[0]
    acc = (zdot[:-4] - 8 * zdot[1:-3] + 8 * zdot[3:-1] - zdot[4:]) / (12 * h)
    G = conn.christoffel(z[2:-2])
    res = acc + np.einsum("...ikj,...k,...j->...i", G, zdot[2:-2], zdot[2:-2])
    return float(np.max(np.abs(res)))


def geodesic_shoot(conn: ConnectionField, x, v, step: float = DEFAULT_STEP,
                   tol: float = 1e-6, max_halvings: int = 6) -> GeodesicSolution:
    """Solve z'' + Gamma(z)(z', z') = 0 on [0, 1] with z(0) = x, z'(0) = v."""
    x = as_points(x, conn.n).reshape(conn.n)
    v = as_points(v, conn.n).reshape(conn.n)
    if conn.is_trivial or not np.any(v):
        t = np.linspace(0.0, 1.0, int(round(1 / step)) + 1)
        z = x[None, :] + t[:, None] * v[None, :]
        zdot = np.broadcast_to(v, z.shape).copy()
        return GeodesicSolution(x, v, t, z, zdot, step, 0.0)
    h = step
    for _ in range(max_halvings + 1):
        _, _, _, _, (t, z, zdot) = _flow(conn, x, v, step=h, record=True)
        res = geodesic_residual(conn, t, z, zdot)
        if res < tol:
            return GeodesicSolution(x, v, t, z, zdot, h, res)
        h /= 2
    raise StepFailure(f"geodesic residual {res:.3e} above {tol:.1e} after {max_halvings} halvings")


def _check_guard(d, r_guard):
    if np.any(np.abs(d) > r_guard):
        raise OutsideInjectivityRadius(
            f"periodic displacement {np.max(np.abs(d)):.4f} exceeds guard {r_guard:.4f}")


def log_map_batch(conn: ConnectionField, x, y, r_guard: float = R_GUARD, tol: float = 1e-11,
                  max_iter: int = 40, step: float = DEFAULT_STEP, transport: bool = False,
                  max_update: float = 0.5):
    """Newton shooting for many pairs at once.

    Returns ``(v, J, P)`` where ``v`` solves exp_x(v) = y (chart covering space),
    ``J = d exp_x`` at ``v`` and ``P`` the covector transport along the geodesic
    (``None`` unless requested).  Converged pairs drop out of later iterations;
    Newton updates are clipped to ``max_update`` per axis.
    """
    n = conn.n
    x = as_points(x, n)
    y = as_points(y, n)
    x, y = np.broadcast_arrays(x, y)
    d = shortest_rep(y - x)
    _check_guard(d, r_guard)
    batch = x.shape[:-1]
    eye = np.broadcast_to(np.eye(n), batch + (n, n)).copy()
    if conn.is_trivial:
        return d.copy(), eye, (eye.copy() if transport else None)
    xf = x.reshape(-1, n)
    target = xf + d.reshape(-1, n)
    v = d.reshape(-1, n).copy()
    Jout = np.empty((len(v), n, n))
    Pout = np.empty((len(v), n, n)) if transport else None
    active = np.arange(len(v))
    err = 0.0
    for _ in range(max_iter):
        if active.size == 0:
            break
        with np.errstate(over="ignore", invalid="ignore"):
            z1, _, J, P, _ = _flow(conn, xf[active], v[active], step=step, jacobian=True,
                                   transport=transport)
        F = z1 - target[active]
        res = np.max(np.abs(F), axis=-1)
        blown = ~(np.isfinite(res) & np.all(np.isfinite(J), axis=(-1, -2)))
        if np.any(blown):
            # the geodesic escaped before t = 1: pull those guesses towards the chart difference
            bi = active[blown]
            v[bi] = 0.5 * (v[bi] + 0.5 * (target[bi] - xf[bi]))
            res = np.where(blown, np.inf, res)
        done = res < tol
        idx = active[done]
        Jout[idx] = J[done]
        if transport:
            Pout[idx] = P[done]
        keep = ~done
        if not np.any(keep):
            active = active[keep]
            break
        err = float(np.max(res[keep]))
        step_ok = keep & ~blown
        if np.any(step_ok):
            dv = np.linalg.solve(J[step_ok], F[step_ok][..., None])[..., 0]
            scale = np.maximum(1.0, np.max(np.abs(dv), axis=-1) / max_update)
            v[active[step_ok]] -= dv / scale[:, None]
        active = active[keep]
    if active.size:
        raise NoConvergence(f"shooting residual {err:.3e} after {max_iter} iterations "
                            f"({active.size} pairs unconverged)")
    return (v.reshape(batch + (n,)), Jout.reshape(batch + (n, n)),
            Pout.reshape(batch + (n, n)) if transport else None)


def log_map(conn: ConnectionField, x, y, r_guard: float = R_GUARD, tol: float = 1e-11,
            max_iter: int = 40) -> np.ndarray:
    """Initial velocity of the connection geodesic from x reaching y at t = 1."""
    v, _, _ = log_map_batch(conn, x, y, r_guard=r_guard, tol=tol, max_iter=max_iter)
    return v


@dataclass(frozen=True)
class TransportResult:
    x: np.ndarray
    y: np.ndarray
    phi: np.ndarray
    upsilon: float


def parallel_transport(conn: ConnectionField, x, y, r_guard: float = R_GUARD) -> TransportResult:
    """Covector transport ``T*_x -> T*_y`` along the geodesic from x to y."""
    n = conn.n
    x = as_points(x, n).reshape(n)
    y = as_points(y, n).reshape(n)
    if conn.is_trivial or np.all(shortest_rep(y - x) == 0):
        _check_guard(shortest_rep(y - x), r_guard)
        return TransportResult(x, y, np.eye(n), 1.0)
    _, _, P = log_map_batch(conn, x, y, r_guard=r_guard, transport=True)
    return TransportResult(x, y, P, float(abs(np.linalg.det(P))))


def transport_batch(conn: ConnectionField, x, y, r_guard: float = R_GUARD):
    """Vectorised ``(P, Upsilon)`` for arrays of point pairs."""
    if conn.is_trivial:
        x, y = np.broadcast_arrays(as_points(x, conn.n), as_points(y, conn.n))
        _check_guard(shortest_rep(y - x), r_guard)
        P = np.broadcast_to(np.eye(conn.n), x.shape[:-1] + (conn.n, conn.n)).copy()
        return P, np.ones(x.shape[:-1])
    _, _, P = log_map_batch(conn, x, y, r_guard=r_guard, transport=True)
    return P, np.abs(np.linalg.det(P))


def upsilon(conn: ConnectionField, x, y, r_guard: float = R_GUARD) -> float:
    """``Upsilon_x(y) = |det Phi_{y,x}|``."""
    return parallel_transport(conn, x, y, r_guard=r_guard).upsilon


def phase(conn: ConnectionField, x, y, tau: float, zeta) -> float:
    """``phi_tau(x, zeta, y) = -<gamma'(tau), zeta>`` with gamma(0) = x, gamma(1) = y."""
    n = conn.n
    zeta = as_points(zeta, n).reshape(n)
    v = log_map(conn, x, y).reshape(n)
    if conn.is_trivial or tau == 0 or not np.any(v):
        vel = v
    else:
        _, vel, _, _, _ = _flow(conn, as_points(x, n).reshape(n), v, t_end=tau)
    return float(-vel @ zeta)


# ---------------------------------------------------------------------------
# Identity checks (finite-difference oracles)
# ---------------------------------------------------------------------------


def _transport_from(conn, x, ys):
    P, _ = transport_batch(conn, np.broadcast_to(x, ys.shape), ys)
    return P


def transport_derivative(conn: ConnectionField, x, h: float = 1e-3, normal: bool = False) -> np.ndarray:
    """Central-difference estimate of ``D[i, k, j] = d_{y^k} (Phi_{y,x})^i_j`` at y = x.

    With ``normal=True`` the derivative is taken in normal coordinates of the
    connection centred at x, where covector components pick up the Jacobian
    of the exponential map.
    """
    n = conn.n
    x = as_points(x, n).reshape(n)
    E = np.eye(n)
    D = np.zeros((n, n, n))
    for k in range(n):
        if not normal:
            Pp = _transport_from(conn, x, (x + h * E[k])[None])[0]
            Pm = _transport_from(conn, x, (x - h * E[k])[None])[0]
        else:
            Pp = _normal_frame_transport(conn, x, h * E[k])
            Pm = _normal_frame_transport(conn, x, -h * E[k])
        dP = (Pp - Pm) / (2 * h)  # dP[j, i]
        D[:, k, :] = dP.T
    return D


def _normal_frame_transport(conn, x, w, hj: float = 1e-5):
    """``J(w)^T P(exp_x(w))``: transport expressed in normal coordinates at x."""
    n = conn.n
    _, _, _, P, _ = _flow(conn, x, w, transport=True)
    J = np.zeros((n, n))
    for b in range(n):
        e = np.zeros(n)
        e[b] = hj
        zp = _flow(conn, x, w + e)[0]
        zm = _flow(conn, x, w - e)[0]
        J[:, b] = (zp - zm) / (2 * hj)
    return J.T @ P


def upsilon_derivative(conn: ConnectionField, x, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of ``y -> Upsilon_x(y)`` at y = x."""
    n = conn.n
    x = as_points(x, n).reshape(n)
    E = np.eye(n)
    ys = np.concatenate([x + h * E, x - h * E])
    _, U = transport_batch(conn, np.broadcast_to(x, ys.shape), ys)
    return (U[:n] - U[n:]) / (2 * h)


def holonomy_curvature(conn: ConnectionField, y, h: float = 4e-3, substeps: int = 8) -> np.ndarray:
    """Curvature from covector holonomy around centred chart squares.

    Transport around the loop +k, +l, -k, -l of side h gives
    ``H[j, i] - delta_ij = h^2 R^i_{jkl} + O(h^3)``; one Richardson step with
    side h/2 removes the O(h) bias.  Independent of :func:`curvature`.
    """
    return 2.0 * _holonomy(conn, y, h / 2, substeps) - _holonomy(conn, y, h, substeps)


def _holonomy(conn, y, h, substeps):
    n = conn.n
    y = as_points(y, n).reshape(n)
    R = np.zeros((n,) * 4)
    E = np.eye(n)
    for k, l in itertools.permutations(range(n), 2):
        corner = y - 0.5 * h * (E[k] + E[l])
        P = np.eye(n)
        p = corner
        for d in (E[k], E[l], -E[k], -E[l]):
            P = _segment_transport(conn, p, h * d, substeps) @ P
            p = p + h * d
        R[:, :, k, l] = ((P - np.eye(n)) / (h * h)).T
    return R


def _segment_transport(conn, p, disp, substeps):
    """Transport matrix along the straight chart segment p -> p + disp (RK4)."""
    n = conn.n
    P = np.eye(n)
    dt = 1.0 / substeps

    def f(t, P):
        G = conn.christoffel(p + t * disp)
        return np.einsum("ikj,k,ic->jc", G, disp, P)

    t = 0.0
    for _ in range(substeps):
        k1 = f(t, P)
        k2 = f(t + dt / 2, P + dt / 2 * k1)
        k3 = f(t + dt / 2, P + dt / 2 * k2)
        k4 = f(t + dt, P + dt * k3)
        P = P + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += dt
    return P


def geometry_check(conn: ConnectionField, points, h: float = 1e-3, hj: float = 1e-5) -> dict:
    """Residuals of the transport and determinant derivative identities at ``points``.

    Same stencils as :func:`transport_derivative` and :func:`upsilon_derivative`,
    with all points and directions shot in one batch.
    """
    n = conn.n
    X = as_points(points, n).reshape(-1, n)
    m = len(X)
    E = np.eye(n)
    G = conn.christoffel(X)  # (m, i, k, j)
    # chart coordinates: y = x +- h e_k, laid out (m, sign, k)
    offs = np.concatenate([h * E, -h * E])
    xs = np.repeat(X, 2 * n, axis=0)
    ys = xs + np.tile(offs, (m, 1))
    P, U = transport_batch(conn, xs, ys)
    P = P.reshape(m, 2, n, n, n)
    U = U.reshape(m, 2, n)
    D = np.swapaxes((P[:, 0] - P[:, 1]) / (2 * h), -1, -2)  # (m, k, i, j)
    chart = np.max(np.abs(np.moveaxis(D, 1, 2) - G), axis=(1, 2, 3))
    trace = np.einsum("mjkj->mk", G)
    det = np.max(np.abs((U[:, 0] - U[:, 1]) / (2 * h) - trace), axis=1)
    # normal coordinates: J(w)^T P(exp_x(w)) with J from central differences in w
    ws = np.tile(offs, (m, 1))
    xall = np.concatenate([xs] + [xs] * (2 * n))
    wall = np.concatenate([ws] + [ws + s * hj * E[b] for b in range(n) for s in (1.0, -1.0)])
    z, _, _, Pn, _ = _flow(conn, xall, wall, transport=True)
    B = len(xs)
    Pc = Pn[:B]
    zz = z[B:].reshape(n, 2, B, n)
    J = np.moveaxis((zz[:, 0] - zz[:, 1]) / (2 * hj), 0, -1)  # (B, a, b)
    Q = (np.swapaxes(J, -1, -2) @ Pc).reshape(m, 2, n, n, n)
    Dn = np.swapaxes((Q[:, 0] - Q[:, 1]) / (2 * h), -1, -2)
    T = G - np.swapaxes(G, -1, -2)
    normal = np.max(np.abs(np.moveaxis(Dn, 1, 2) - 0.5 * T), axis=(1, 2, 3))
    Yb = X + 0.4
    _, Ur = transport_batch(conn, np.concatenate([X, Yb]), np.concatenate([Yb, X]))
    recip = np.abs(Ur[:m] * Ur[m:] - 1.0)
    return {
        "transport_chart": float(np.max(chart)),
        "transport_normal": float(np.max(normal)),
        "determinant": float(np.max(det)),
        "reciprocity": float(np.max(recip)),
    }
