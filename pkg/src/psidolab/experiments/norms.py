"""Operator-norm estimates for dense kernels on weighted grids.

With volume weights ``w`` the Lp norm of a grid function is
``(sum |f|^p w)^(1/p)``.  Conjugating by ``D_p = diag(w^(1/p))`` turns the
weighted problem into the plain ``l^p -> l^q`` norm of
``A~ = D_q K D_p^-1``, which is what the iterations below work with.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..quantize import KernelMatrix, SizeCap, bump

DENSE_CAP = 4096


@dataclass(frozen=True)
class NormEstimate:
    p: float
    q: float
    value: float
    method: str
    iterations: int = 0
    restarts: int = 0
    converged: bool = True
    trace: tuple = field(default=(), repr=False, compare=False)


def _scaled(K: KernelMatrix, p: float, q: float) -> np.ndarray:
    w = K.weights
    return (w ** (1.0 / q))[:, None] * K.matrix / (w ** (1.0 / p))[None, :]


def opnorm_dense(K: KernelMatrix) -> NormEstimate:
    """Exact L2 operator norm of the discretised operator (largest singular value)."""
    P = K.matrix.shape[0]
    if P > DENSE_CAP:
        raise SizeCap(f"dense SVD capped at {DENSE_CAP} grid points, got {P}")
    s = np.linalg.svd(_scaled(K, 2.0, 2.0), compute_uv=False)
    return NormEstimate(2.0, 2.0, float(s[0]), "dense-svd")


def opnorm_power(K: KernelMatrix, iters: int = 500, tol: float = 1e-13, seed: int = 0) -> NormEstimate:
    """L2 norm by power iteration on ``A~^H A~``; an independent check on :func:`opnorm_dense`."""
    A = _scaled(K, 2.0, 2.0)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(A.shape[1]) + 1j * rng.standard_normal(A.shape[1])
    x /= np.linalg.norm(x)
    val, prev = 0.0, -1.0
    for it in range(1, iters + 1):
        y = A.conj().T @ (A @ x)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return NormEstimate(2.0, 2.0, 0.0, "power-iteration", it)
        x = y / ny
        val = np.sqrt(ny)
        if abs(val - prev) <= tol * max(val, 1e-300):
            return NormEstimate(2.0, 2.0, float(val), "power-iteration", it)
        prev = val
    return NormEstimate(2.0, 2.0, float(val), "power-iteration", iters, converged=False)


def _pnorm(x: np.ndarray, p: float) -> float:
    return float(np.sum(np.abs(x) ** p) ** (1.0 / p))


def _dual(y: np.ndarray, r: float) -> np.ndarray:
    """``|y|^(r-1) sgn(y)``, the Holder-extremal partner of ``y`` in l^r."""
    a = np.abs(y)
    out = np.zeros_like(y, dtype=complex)
    nz = a > 0
    out[nz] = a[nz] ** (r - 1.0) * (y[nz] / a[nz])
    return out


def trial_family(M: int, n: int, A: Optional[np.ndarray] = None, widths=(1, 2, 4, 8, 16), freqs=None) -> list:
    """Modulated bumps ``exp(i k x) bump(|x - x0| / w)`` and their focusing images.

    Bumps sit at the origin (kernels of interest are translation-covariant or
    nearly so).  With ``A`` given, ``A^H`` applied to the Holder dual of a
    point mass is added as well: these concentrate ``A u`` at a point.
    """
    h = 2.0 * np.pi / M
    k1 = np.arange(M)
    d1 = np.minimum(k1, M - k1) * h
    if n == 1:
        pts = [d1]
        coords = [k1 * h]
    else:
        i1, i2 = np.meshgrid(k1, k1, indexing="ij")
        pts = [np.sqrt((np.minimum(i1, M - i1) * h) ** 2 + (np.minimum(i2, M - i2) * h) ** 2).ravel()]
        coords = [i1.ravel() * h, i2.ravel() * h]
    if freqs is None:
        freqs = [0, M // 16, M // 8, M // 4]
    out = []
    r = pts[0]
    for wdt in widths:
        base = bump(r / (wdt * h * 2.0)) + 0j
        if not np.any(base):
            continue
        for k in freqs:
            out.append(base * np.exp(1j * k * coords[0]))
    if A is not None:
        centers = [0, A.shape[0] // 3]
        for c in centers:
            row = A[c, :]
            out.append(np.conj(row))
    return out


def opnorm_lplq(K: KernelMatrix, p: float, q: float, restarts: int = 4, seed: int = 0,
                max_iter: int = 200, tol: float = 1e-10, trials: bool = True) -> NormEstimate:
    """Lower bound for the Lp -> Lq norm by Boyd's nonlinear power iteration.

    Starts from ``restarts`` random vectors plus the best members of
    :func:`trial_family`.  Each step maps ``x -> dual_{p'}(A~^H dual_q(A~ x))``
    and renormalises.  The returned value is the best ratio seen; it is a
    lower bound whether or not the iteration settled (``converged``).
    """
    if not (1.0 < p < np.inf and 1.0 < q < np.inf):
        raise ValueError("need 1 < p, q < inf")
    A = _scaled(K, p, q)
    AH = A.conj().T
    pd = p / (p - 1.0)
    rng = np.random.default_rng(seed)
    P = A.shape[1]

    def ratio(x):
        nx = _pnorm(x, p)
        return 0.0 if nx == 0 else _pnorm(A @ x, q) / nx

    starts = []
    if trials:
        fam = trial_family(K.M, K.n, A)
        scored = sorted(((ratio(x), i) for i, x in enumerate(fam)), reverse=True)
        starts.extend(fam[i] for _, i in scored[:3])
    for _ in range(restarts):
        starts.append(rng.standard_normal(P) + 1j * rng.standard_normal(P))

    best, best_trace, total_it, all_conv = 0.0, (), 0, True
    for x in starts:
        x = x / _pnorm(x, p)
        val = ratio(x)
        trace = [val]
        conv = False
        for it in range(max_iter):
            y = A @ x
            if not np.any(y):
                break
            z = AH @ _dual(y, q)
            x_new = _dual(z, pd)
            nx = _pnorm(x_new, p)
            if nx == 0.0:
                break
            x = x_new / nx
            new = ratio(x)
            trace.append(new)
            total_it += 1
            if abs(new - val) <= tol * max(new, 1e-300):
                val = new
                conv = True
                break
            val = new
        all_conv &= conv
        top = max(trace)
        if top > best:
            best, best_trace = top, tuple(trace)
    method = "boyd-iteration"
    return NormEstimate(float(p), float(q), float(best), method, total_it, len(starts),
                        bool(all_conv), best_trace)
