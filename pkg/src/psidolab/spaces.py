"""Norms and reference operators on kappa-densities over the periodic grid.

All quantities are written against the scalar coefficient ``f`` of a density
``f |dx|^kappa`` and the volume weights ``w_j = sqrt(det g(x_j)) (2 pi / M)^n``,
which makes every norm independent of kappa.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .geometry import MetricField, shortest_rep, torus_grid
from .quantize import GridDensity, NotFlat, band, volume_weights

R0 = np.pi


class KappaUnsupported(ValueError):
    pass


@dataclass(frozen=True)
class NormValue:
    kind: str
    value: float
    M: int
    n: int
    p: Optional[float] = None


def _metric(metric, n):
    return MetricField.flat(n) if metric is None else metric


def lp_norm(u: GridDensity, p: float, metric: Optional[MetricField] = None) -> NormValue:
    """``(sum_j |f_j|^p w_j)^(1/p)``; ``p = inf`` gives ``max |f|``."""
    if p < 1:
        raise ValueError("p must be >= 1")
    f = np.abs(u.flat())
    if np.isinf(p):
        return NormValue("Lp", float(np.max(f)), u.M, u.n, p)
    w = volume_weights(_metric(metric, u.n), u.M)
    return NormValue("Lp", float(np.sum(f ** p * w) ** (1.0 / p)), u.M, u.n, p)


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------


def _arc_length_1d(metric: MetricField, M: int, sub: int = 32) -> tuple:
    """Grid-point arc-length coordinates and total length for a 1D metric."""
    t = 2.0 * np.pi * np.arange(M * sub + 1) / (M * sub)
    speed = np.sqrt(metric.g(t[:, None])[:, 0, 0])
    h = t[1] - t[0]
    cum = np.concatenate([[0.0], np.cumsum(0.5 * h * (speed[1:] + speed[:-1]))])
    return cum[::sub][:M], cum[-1]


def distance_matrix(metric: MetricField, M: int) -> np.ndarray:
    """Geodesic distances between all grid points, shape (M^n, M^n).

    Exact arc length in 1D, exact for constant 2D metrics, Dijkstra on a
    16-neighbour grid graph otherwise.
    """
    n = metric.n
    if n == 1:
        s, L = _arc_length_1d(metric, M)
        d = np.abs(s[:, None] - s[None, :])
        return np.minimum(d, L - d)
    pts = torus_grid(M, n)
    if metric.is_constant:
        g0 = metric.g(np.zeros(n))
        D = shortest_rep(pts[None, :, :] - pts[:, None, :])
        best = None
        for shift in itertools.product((-1, 0, 1), repeat=n):
            Ds = D + 2.0 * np.pi * np.array(shift)
            dist = np.sqrt(np.einsum("...a,ab,...b->...", Ds, g0, Ds))
            best = dist if best is None else np.minimum(best, dist)
        return best
    return _dijkstra_distances(metric, M)


def _dijkstra_distances(metric: MetricField, M: int) -> np.ndarray:
    h = 2.0 * np.pi / M
    steps = [(a, b) for a in range(-2, 3) for b in range(-2, 3)
             if (a, b) != (0, 0) and np.gcd(abs(a), abs(b)) == 1]
    idx = np.arange(M * M).reshape(M, M)
    rows, cols, vals = [], [], []
    i1, i2 = np.meshgrid(np.arange(M), np.arange(M), indexing="ij")
    for a, b in steps:
        mid = np.stack([(i1 + 0.5 * a) * h, (i2 + 0.5 * b) * h], axis=-1)
        s = np.array([a * h, b * h])
        length = np.sqrt(np.einsum("...ab,a,b->...", metric.g(mid), s, s))
        rows.append(idx.ravel())
        cols.append(idx[(i1 + a) % M, (i2 + b) % M].ravel())
        vals.append(length.ravel())
    graph = coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                       shape=(M * M, M * M)).tocsr()
    return dijkstra(graph, directed=False)


# ---------------------------------------------------------------------------
# BMO
# ---------------------------------------------------------------------------


def bmo_radii(metric: MetricField, M: int, min_cells: int = 4) -> list:
    """``pi/4 * 2^-j`` down to the smallest radius whose balls all hold ``min_cells`` points."""
    return _radii_from(distance_matrix(metric, M), min_cells)


def _radii_from(D: np.ndarray, min_cells: int = 4) -> list:
    radii = []
    r = R0 / 4.0
    while np.min(np.sum(D < r, axis=1)) >= min_cells:
        radii.append(r)
        r /= 2.0
    return radii


def bmo_norm(u: GridDensity, metric: Optional[MetricField] = None,
             radii: Optional[Sequence[float]] = None, D: Optional[np.ndarray] = None) -> NormValue:
    """Mean-oscillation sup over balls of radius below ``r0/4`` plus the sup of ``|f|``-averages at ``r0/4``.

    Centres are all grid points; ``radii`` defaults to :func:`bmo_radii`.  The
    grid maximum is a lower bound of the continuous supremum.
    """
    metric = _metric(metric, u.n)
    M = u.M
    if D is None:
        D = distance_matrix(metric, M)
    if radii is None:
        radii = _radii_from(D)
    w = volume_weights(metric, M)
    f = u.flat().astype(complex)
    osc = 0.0
    for r in radii:
        B = (D < r).astype(float) * w[None, :]
        vol = B.sum(axis=1)
        avg = (B @ f) / vol
        dev = np.abs(f[None, :] - avg[:, None])
        osc = max(osc, float(np.max(np.sum(B * dev, axis=1) / vol)))
    B = (D < R0 / 4.0).astype(float) * w[None, :]
    top = float(np.max((B @ np.abs(f)) / B.sum(axis=1)))
    return NormValue("BMO", osc + top, M, u.n)


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------


def bessel_apply(lam: float, u: GridDensity, N: int, metric: Optional[MetricField] = None) -> GridDensity:
    """Multiplier ``(1 + |xi|^2)^(lam/2)`` on the band ``|xi|_inf <= N``, zero outside."""
    if metric is not None and not (metric.is_constant and np.allclose(metric.g(np.zeros(metric.n)),
                                                                     np.eye(metric.n))):
        raise NotFlat("Bessel potentials are applied on the flat torus only")
    n, M = u.n, u.M
    xi = band(N, n)
    kidx = tuple(np.asarray(xi[:, i], dtype=int) % M for i in range(n))
    uh = np.fft.fftn(np.asarray(u.values, dtype=complex))
    out = np.zeros_like(uh)
    out[kidx] = uh[kidx] * (1.0 + np.sum(xi * xi, axis=-1)) ** (lam / 2.0)
    return GridDensity(np.fft.ifftn(out), u.kappa)


def _spectral_diff(f: np.ndarray, axis: int) -> np.ndarray:
    M = f.shape[axis]
    k = np.fft.fftfreq(M, 1.0 / M)
    if M % 2 == 0:
        k[M // 2] = 0.0
    shape = [1] * f.ndim
    shape[axis] = M
    return np.fft.ifft(1j * k.reshape(shape) * np.fft.fft(f, axis=axis), axis=axis)


def laplace_beltrami_apply(metric: MetricField, u: GridDensity) -> GridDensity:
    """``g^-1 d_i (g g^ij d_j f)`` with ``g = sqrt(det g_ij)``, by spectral differentiation."""
    if u.kappa != 0:
        raise KappaUnsupported("the Laplace-Beltrami operator acts on 0-densities")
    n, M = u.n, u.M
    pts = torus_grid(M, n)
    sg = metric.sqrt_det(pts).reshape((M,) * n)
    ginv = metric.g_inv(pts).reshape((M,) * n + (n, n))
    f = np.asarray(u.values, dtype=complex)
    grads = [_spectral_diff(f, j) for j in range(n)]
    out = np.zeros_like(f)
    for i in range(n):
        flux = sum(sg * ginv[..., i, j] * grads[j] for j in range(n))
        out = out + _spectral_diff(flux, i)
    return GridDensity(out / sg, 0.0)


# ---------------------------------------------------------------------------
# Volume growth
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VolumeGrowthReport:
    C0: float
    mu0: float
    K0: float
    radii: tuple
    volumes: tuple
    bounds: tuple
    passed: bool


def volume_growth_check(metric: MetricField, radii: Sequence[float], M: int = 64,
                        C0: Optional[float] = None, mu0: Optional[float] = None,
                        K0: float = 0.0) -> VolumeGrowthReport:
    """Check ``Vol B_r(x) <= C0 (1 + r)^mu0 exp(K0 r)`` with the largest ball over all centres.

    When ``C0`` is omitted it is fitted as the smallest constant that works
    for ``mu0`` (default n) and ``K0``.
    """
    n = metric.n
    mu0 = float(n if mu0 is None else mu0)
    D = distance_matrix(metric, M)
    w = volume_weights(metric, M)
    vols = np.array([float(np.max((D < r).astype(float) @ w)) for r in radii])
    shape = (1.0 + np.asarray(radii, dtype=float)) ** mu0 * np.exp(K0 * np.asarray(radii, dtype=float))
    if C0 is None:
        C0 = float(np.max(vols / shape))
    bounds = C0 * shape
    passed = bool(np.all(vols <= bounds * (1.0 + 1e-12)))
    return VolumeGrowthReport(C0=float(C0), mu0=mu0, K0=float(K0), radii=tuple(float(r) for r in radii),
                              volumes=tuple(vols.tolist()), bounds=tuple(bounds.tolist()), passed=passed)
