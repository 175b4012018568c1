"""Operators from symbols on the periodic grid.

Grid points are ``x_j = 2 pi j / M`` per axis, flattened in 'ij' order.  A
:class:`GridDensity` stores the scalar coefficient ``f`` of a kappa-density
``f |dx|^kappa`` with ``|dx| = sqrt(det g) dx``.  Frequencies live on the box
``|xi|_inf <= N``; discrete Fourier coefficients are ``fft(f) / M^n``.

Two assembly routes exist.  On a flat torus with the trivial connection the
kernel is the closed periodic sum

    K_ij = M^-n sum_xi exp(i (x_i - y_j).xi) a(z_tau, xi) exp(-eps^2 |xi|^2),

with ``z_tau = x + tau * shortest(y - x)``.  Otherwise the kernel is built near
the diagonal from normal coordinates of the connection, at ``tau = 0`` only.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .geometry import (DEFAULT_STEP, R_GUARD, ConnectionField, Geometry, MetricField, log_map_batch,
                       shortest_rep, torus_grid)
from .symbols import SymbolSpec, d_eta, d_y

MAGIC = b"PSDK1"
MAX_M_1D = 4096
MAX_M_2D = 128


class QuantizeError(Exception):
    pass


class NotFlat(QuantizeError):
    pass


class AliasRisk(QuantizeError):
    pass


class AssemblyOverflow(QuantizeError):
    pass


class GridMismatch(QuantizeError):
    pass


class DerivativesUnavailable(QuantizeError):
    pass


class SizeCap(QuantizeError):
    pass


@dataclass(frozen=True)
class QuantizationParams:
    """Quantization settings.

    ``eps=None`` means ``1/N``; ``M=None`` means ``4N``.  ``part`` selects the
    kernel piece: ``"local"`` keeps ``chi(d / r_chi) K``, ``"full"`` keeps all
    of ``K`` (flat route only), ``"auto"`` picks full when flat.
    """

    N: int
    tau: float = 0.0
    kappa: float = 0.0
    eps: Optional[float] = None
    r_chi: float = R_GUARD
    M: Optional[int] = None
    oversample: int = 1
    part: str = "auto"
    memory_budget: float = 2.0e9
    ode_step: float = DEFAULT_STEP

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not (0.0 <= self.tau <= 1.0):
            raise ValueError("tau must lie in [0, 1]")
        if not (0.0 < self.r_chi <= R_GUARD + 1e-15):
            raise ValueError("r_chi must lie in (0, 0.9 pi]")
        if self.eps is not None and self.eps < 0:
            raise ValueError("eps must be >= 0")
        if self.part not in ("auto", "full", "local"):
            raise ValueError(f"unknown kernel part {self.part!r}")
        if self.oversample < 1:
            raise ValueError("oversample must be >= 1")
        if self.grid_size < 4 * self.N:
            raise AliasRisk(f"M={self.grid_size} < 4N={4 * self.N}")

    @property
    def grid_size(self) -> int:
        return 4 * self.N if self.M is None else int(self.M)

    @property
    def damping(self) -> float:
        return 1.0 / self.N if self.eps is None else float(self.eps)


@dataclass(frozen=True)
class GridDensity:
    values: np.ndarray
    kappa: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim not in (1, 2) or len(set(v.shape)) != 1:
            raise GridMismatch(f"density values must be (M,) or (M, M), got {v.shape}")

    @property
    def n(self) -> int:
        return np.ndim(self.values)

    @property
    def M(self) -> int:
        return np.shape(self.values)[0]

    def flat(self) -> np.ndarray:
        return np.asarray(self.values).reshape(-1)

    @classmethod
    def from_function(cls, fn, M: int, n: int = 1, kappa: float = 0.0) -> "GridDensity":
        pts = torus_grid(M, n)
        return cls(np.asarray(fn(pts)).reshape((M,) * n), kappa)


def grid_points(M: int, n: int) -> np.ndarray:
    return torus_grid(M, n)


def band(N: int, n: int, oversample: int = 1) -> np.ndarray:
    """Lattice ``{xi : |xi|_inf <= N}`` with spacing ``1/oversample``, shape (Z, n)."""
    k = np.arange(-N * oversample, N * oversample + 1) / oversample
    mesh = np.meshgrid(*([k] * n), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def bump(t) -> np.ndarray:
    """C^2 bump: 1 for t <= 1/2, 0 for t >= 1, ``1 - (10 s^3 - 15 s^4 + 6 s^5)`` with s = 2t - 1."""
    s = np.clip(2.0 * np.asarray(t, dtype=float) - 1.0, 0.0, 1.0)
    return 1.0 - s ** 3 * (10.0 - 15.0 * s + 6.0 * s * s)


def _check_size(M: int, n: int):
    cap = MAX_M_1D if n == 1 else MAX_M_2D
    if M > cap:
        raise SizeCap(f"dense grids capped at M <= {cap} for n = {n}")


def volume_weights(metric: MetricField, M: int) -> np.ndarray:
    """Quadrature weights ``sqrt(det g(x_j)) (2 pi / M)^n``."""
    pts = torus_grid(M, metric.n)
    return metric.sqrt_det(pts) * (2.0 * np.pi / M) ** metric.n


# ---------------------------------------------------------------------------
# Kernel matrix
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KernelMatrix:
    matrix: np.ndarray
    n: int
    M: int
    kappa: float
    tau: float
    N: int
    weights: np.ndarray = field(repr=False)
    label: str = "kernel"
    geometry_label: str = ""
    params: Optional[QuantizationParams] = None

    def to_bytes(self) -> bytes:
        head = MAGIC + struct.pack("<qqddq", self.n, self.M, self.kappa, self.tau, self.N)
        return head + np.ascontiguousarray(self.matrix, dtype="<c16").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, weights: Optional[np.ndarray] = None) -> "KernelMatrix":
        if data[:5] != MAGIC:
            raise ValueError("not a kernel matrix file")
        n, M, kappa, tau, N = struct.unpack("<qqddq", data[5:45])
        P = M ** n
        mat = np.frombuffer(data[45:], dtype="<c16")
        if mat.size != P * P:
            raise ValueError("truncated kernel matrix payload")
        if weights is None:
            weights = np.full(P, (2.0 * np.pi / M) ** n)
        return cls(mat.reshape(P, P).astype(complex), int(n), int(M), kappa, tau, int(N), weights)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path, weights=None) -> "KernelMatrix":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), weights)


def kernel_apply(K: KernelMatrix, u: GridDensity) -> GridDensity:
    if u.n != K.n or u.M != K.M:
        raise GridMismatch(f"kernel grid ({K.n}, {K.M}) vs density grid ({u.n}, {u.M})")
    if not np.isclose(u.kappa, K.kappa):
        raise GridMismatch(f"kernel acts on {K.kappa}-densities, got kappa={u.kappa}")
    out = K.matrix @ u.flat()
    return GridDensity(out.reshape((K.M,) * K.n), K.kappa)


def adjoint_kernel(K: KernelMatrix) -> KernelMatrix:
    """Adjoint for the volume-weighted pairing; acts on (1 - kappa)-densities."""
    w = K.weights
    mat = (np.conj(K.matrix).T * w[None, :]) / w[:, None]
    return replace(K, matrix=mat, kappa=1.0 - K.kappa, label=f"adj({K.label})")


# ---------------------------------------------------------------------------
# Flat route
# ---------------------------------------------------------------------------


def _is_flat_trivial(metric: MetricField, conn: ConnectionField) -> bool:
    return metric.is_constant and conn.is_trivial


def _branch_points(x, d, tau):
    """Evaluation points ``x + tau d`` with antipodal axes split into both branches.

    Returns a list of point arrays whose symbol values are to be averaged.
    """
    ambiguous = np.isclose(np.abs(d), np.pi, rtol=0.0, atol=1e-12)
    if tau == 0.0 or not np.any(ambiguous):
        return [x + tau * d]
    n = d.shape[-1]
    branches = []
    for signs in itertools.product((-1.0, 1.0), repeat=n):
        dd = np.where(ambiguous, np.array(signs) * np.pi, d)
        branches.append(x + tau * dd)
    return branches


def _flat_symbol_block(a: SymbolSpec, xs, ys, xi, tau, damp):
    """Symbol values a(z_tau(x_i, y_j), xi) times damping, shape (rows, cols, Z)."""
    d = shortest_rep(ys[None, :, :] - xs[:, None, :])
    pts = _branch_points(xs[:, None, :], d, tau)
    acc = 0.0
    for z in pts:
        acc = acc + a(z[:, :, None, :], xi[None, None, :, :])
    return acc / len(pts) * damp[None, None, :]


def _flat_kernel(a: SymbolSpec, n: int, params: QuantizationParams, chunk: int = 16) -> np.ndarray:
    M = params.grid_size
    pts = torus_grid(M, n)
    P = len(pts)
    xi = band(params.N, n)
    damp = np.exp(-params.damping ** 2 * np.sum(xi * xi, axis=-1))
    if a.y_independent:
        # circulant: K_ij = c(x_i - y_j)
        vals = a(np.zeros(n), xi) * damp
        c = np.exp(1j * pts @ xi.T) @ vals / P
        idx = np.arange(M)
        if n == 1:
            K = c[(idx[:, None] - idx[None, :]) % M]
        else:
            cm = c.reshape(M, M)
            i1 = (idx[:, None] - idx[None, :]) % M
            K = cm[i1[:, None, :, None], i1[None, :, None, :]].reshape(P, P)
        return K
    K = np.empty((P, P), dtype=complex)
    ex_y = np.exp(-1j * pts @ xi.T)  # (P, Z)
    for r0 in range(0, P, chunk):
        xs = pts[r0:r0 + chunk]
        A = _flat_symbol_block(a, xs, pts, xi, params.tau, damp)
        ex_x = np.exp(1j * xs @ xi.T)  # (rows, Z)
        K[r0:r0 + chunk] = np.einsum("rz,rcz,cz->rc", ex_x, A, ex_y) / P
    return K


def _apply_local_cut(K, n, M, metric, r_chi):
    pts = torus_grid(M, n)
    d = shortest_rep(pts[None, :, :] - pts[:, None, :])
    g0 = metric.g(np.zeros(n))
    dist = np.sqrt(np.einsum("...a,ab,...b->...", d, g0, d))
    return K * bump(dist / r_chi)


# ---------------------------------------------------------------------------
# General route
# ---------------------------------------------------------------------------


def _general_kernel(a: SymbolSpec, metric: MetricField, conn: ConnectionField,
                    params: QuantizationParams, pair_chunk: int = 32768) -> np.ndarray:
    n = metric.n
    M = params.grid_size
    pts = torus_grid(M, n)
    P = len(pts)
    zeta = band(params.N, n, params.oversample)
    dz = (1.0 / params.oversample) ** n
    damp = np.exp(-params.damping ** 2 * np.sum(zeta * zeta, axis=-1)) * dz
    sg = metric.sqrt_det(pts)
    dy = (2.0 * np.pi / M) ** n
    kap = params.kappa
    K = np.zeros((P, P), dtype=complex)
    chunk = max(1, pair_chunk // P)
    for r0 in range(0, P, chunk):
        rows = np.arange(r0, min(P, r0 + chunk))
        D = shortest_rep(pts[None, :, :] - pts[rows, None, :])  # (rows, P, n)
        g_rows = metric.g(pts[rows])
        d0 = np.sqrt(np.einsum("rca,rab,rcb->rc", D, g_rows, D))
        mask = (np.max(np.abs(D), axis=-1) <= R_GUARD) & (d0 < 1.5 * params.r_chi)
        ri, ci = np.nonzero(mask)
        if ri.size == 0:
            continue
        X = pts[rows[ri]]
        Y = pts[ci]
        v, J, Pm = log_map_batch(conn, X, Y, transport=True, step=params.ode_step)
        gx = metric.g(X)
        dist = np.sqrt(np.einsum("pa,pab,pb->p", v, gx, v))
        chi = bump(dist / params.r_chi)
        keep = chi > 0
        if not np.any(keep):
            continue
        ups = np.abs(np.linalg.det(Pm))
        detJ = np.abs(np.linalg.det(J))
        wfac = (sg[ci] / sg[rows[ri]]) ** kap * detJ ** (-(1.0 - kap)) * dy
        # symbol values at the row point, one evaluation per row
        A = a(pts[rows][:, None, :], zeta[None, :, :]) * damp[None, :]  # (rows, Z)
        S = np.einsum("pz,pz->p", np.exp(-1j * v @ zeta.T), A[ri])
        vals = (2.0 * np.pi) ** (-n) * ups ** (1.0 - kap) * S * chi * wfac
        K[rows[ri[keep]], ci[keep]] = vals[keep]
    return K


def kernel_assemble(a: SymbolSpec, metric: MetricField, conn: ConnectionField,
                    params: QuantizationParams, label: Optional[str] = None) -> KernelMatrix:
    """Dense kernel of the quantized operator on the M^n grid."""
    n = metric.n
    if a.n != n or conn.n != n:
        raise GridMismatch("symbol, metric and connection dimensions differ")
    M = params.grid_size
    _check_size(M, n)
    P = M ** n
    if 16.0 * P * P > params.memory_budget:
        raise AssemblyOverflow(f"{P}x{P} complex matrix exceeds budget {params.memory_budget:.3g} B")
    flat = _is_flat_trivial(metric, conn)
    part = params.part
    if part == "auto":
        part = "full" if flat else "local"
    if flat:
        K = _flat_kernel(a, n, params)
        if part == "local":
            K = _apply_local_cut(K, n, M, metric, params.r_chi)
    else:
        if part == "full":
            raise NotFlat("the global kernel part is only available on the flat torus")
        if params.tau != 0.0:
            raise NotFlat("non-flat geometries are quantized at tau = 0 only")
        K = _general_kernel(a, metric, conn, params)
    if not np.all(np.isfinite(K)):
        raise QuantizeError("non-finite kernel entries")
    return KernelMatrix(K, n, M, params.kappa, params.tau, params.N, volume_weights(metric, M),
                        label=label or a.label, geometry_label=f"{metric.label}/{conn.label}",
                        params=params)


# ---------------------------------------------------------------------------
# Direct toroidal quantization
# ---------------------------------------------------------------------------


def toroidal_apply(a: SymbolSpec, u: GridDensity, tau: float, N: int,
                   geometry: Optional[Geometry] = None) -> GridDensity:
    """Flat-torus tau-quantization applied to ``u`` without forming a kernel."""
    if geometry is not None and not geometry.is_flat_trivial:
        raise NotFlat("toroidal quantization needs a flat metric and the trivial connection")
    n, M = u.n, u.M
    if M < 4 * N:
        raise AliasRisk(f"M={M} < 4N={4 * N}")
    f = np.asarray(u.values, dtype=complex)
    xi = band(N, n)
    kidx = tuple(np.asarray(xi[:, i], dtype=int) % M for i in range(n))
    if tau == 0.0 or a.y_independent:
        uh = np.fft.fftn(f) / M ** n
        coef = uh[kidx]
        if a.y_independent:
            spec = np.zeros_like(uh)
            spec[kidx] = a(np.zeros(n), xi) * coef
            out = np.fft.ifftn(spec) * M ** n
        else:
            pts = torus_grid(M, n)
            vals = a(pts[:, None, :], xi[None, :, :])  # (P, Z)
            out = np.einsum("pz,pz,z->p", np.exp(1j * pts @ xi.T), vals, coef).reshape((M,) * n)
        return GridDensity(out, u.kappa)
    pts = torus_grid(M, n)
    fv = f.reshape(-1)
    out = np.empty(len(pts), dtype=complex)
    for i, x in enumerate(pts):
        d = shortest_rep(pts - x)
        zs = _branch_points(x[None, :], d, tau)
        vals = sum(a(z[:, None, :], xi[None, :, :]) for z in zs) / len(zs)  # (P, Z)
        phase = np.exp(1j * (x[None, :] - pts) @ xi.T)
        out[i] = np.sum(phase * vals * fv[:, None]) / len(pts)
    return GridDensity(out.reshape((M,) * n), u.kappa)


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------


def compose_leading(a: SymbolSpec, b: SymbolSpec, terms: int = 2,
                    geometry: Optional[Geometry] = None) -> SymbolSpec:
    """Truncated flat composition ``sum_{|alpha| < terms} D_xi^alpha a * d_y^alpha b / alpha!``."""
    if terms not in (1, 2):
        raise DerivativesUnavailable("only one- and two-term expansions are available")
    if geometry is not None and not geometry.is_flat_trivial:
        raise DerivativesUnavailable("curvature and torsion corrections are not implemented")
    if a.n != b.n:
        raise GridMismatch("symbol dimensions differ")
    prod = a * b
    if terms == 1 or b.y_independent:
        return prod
    n = a.n
    da = [d_eta(a, k) for k in range(n)]
    db = [d_y(b, k) for k in range(n)]
    pf = prod.fn

    def fn(y, e):
        out = np.asarray(pf(y, e), complex)
        for k in range(n):
            out = out + (-1j) * da[k](y, e) * db[k](y, e)
        return out

    return SymbolSpec(fn=fn, m=prod.m, rho=prod.rho, delta=prod.delta, n=n,
                      label=f"compose({a.label},{b.label})")
