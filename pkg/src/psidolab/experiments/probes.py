"""Sweep probes: L2 uniformity, sharpness, Sobolev embedding, BMO and composition residuals."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np

from ..geometry import Geometry, torus_grid
from ..quantize import (GridDensity, QuantizationParams, band, compose_leading, kernel_assemble,
                        toroidal_apply)
from ..spaces import bessel_apply, bmo_norm, distance_matrix, lp_norm
from ..symbols import BadParams, SymbolSpec, make_bessel, make_counterexample, make_fourier_table, smooth_step
from .admissibility import fefferman_interval, to_fraction
from .norms import opnorm_dense, opnorm_lplq

DEFAULT_THRESHOLDS = {
    "l2_ratio": 1.5,
    "bmo_growth": 1.3,
    "sobolev_growth": 1.2,
    "inside_slope": 0.05,
    "outside_slope": 0.1,
    "slope_window": 0.15,
}


@dataclass(frozen=True)
class SweepPoint:
    param: float
    p: float
    q: float
    norm_lb: float
    method: str
    iterations: int
    converged: bool
    seed: int


@dataclass
class SweepReport:
    name: str
    param_name: str
    points: list
    slope: Optional[float] = None
    residual: Optional[float] = None
    verdict: str = "n/a"
    passed: bool = True
    thresholds: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def fit_slope(xs: Sequence[float], ys: Sequence[float], tail: bool = True):
    """Least-squares slope of log y against log x.

    With ``tail`` only the last ``ceil(k/2)`` points enter the fit.  Returns
    ``(None, None)`` for fewer than four points; otherwise ``(slope, rms residual)``.
    """
    if len(xs) < 4:
        return None, None
    lx, ly = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    if tail:
        k = math.ceil(len(xs) / 2)
        lx, ly = lx[-k:], ly[-k:]
    coef = np.polyfit(lx, ly, 1)
    res = ly - np.polyval(coef, lx)
    return float(coef[0]), float(np.sqrt(np.mean(res ** 2)))


def run_jobs(fn: Callable, items: Sequence, threads: int = 1) -> list:
    """Map ``fn`` over ``items`` on a thread pool; results stay in input order."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _check_increasing(N_list):
    if any(b <= a for a, b in zip(N_list, N_list[1:])):
        raise BadParams("sweep values must be strictly increasing")


# ---------------------------------------------------------------------------
# L2 uniformity and sharpness
# ---------------------------------------------------------------------------


def l2_uniformity_probe(a: SymbolSpec, geometry: Optional[Geometry] = None,
                        N_list: Sequence[int] = (16, 32, 64, 128, 256), eps: float = 0.0,
                        threads: int = 1, seed: int = 0, threshold: float = 1.5) -> SweepReport:
    """Dense L2 norms of the quantized kernel over ``N_list``; bounded iff max/median < threshold."""
    if a.m > 1e-12:
        raise BadParams("L2 uniformity needs a symbol of order <= 0")
    geometry = geometry or Geometry.flat(a.n)
    _check_increasing(N_list)

    def job(N):
        K = kernel_assemble(a, geometry.metric, geometry.conn, QuantizationParams(N=N, eps=eps))
        e = opnorm_dense(K)
        return SweepPoint(float(N), 2.0, 2.0, e.value, e.method, e.iterations, e.converged, seed)

    pts = run_jobs(job, list(N_list), threads)
    vals = np.array([p.norm_lb for p in pts])
    ratio = float(vals.max() / np.median(vals)) if np.median(vals) > 0 else (0.0 if vals.max() == 0 else np.inf)
    slope, res = fit_slope(N_list, np.maximum(vals, 1e-300))
    ok = ratio < threshold
    return SweepReport("l2-bound", "N", pts, slope, res, "bounded" if ok else "unbounded", ok,
                       {"l2_ratio": threshold}, {"max_over_median": ratio, "symbol": a.label})


def sharpness_sweep(rho: float, theta: float, p: float, N_list: Sequence[int] = (16, 32, 64, 128, 256),
                    restarts: int = 4, seed: int = 0, threads: int = 1,
                    thresholds: Optional[dict] = None) -> SweepReport:
    """Lp norm lower bounds of the truncated counterexample multiplier on the circle.

    ``p = 2`` uses the exact dense norm; other exponents use Boyd iteration.
    Inside the admissible interval the fitted slope must stay below
    ``inside_slope``; well outside (by 0.1 in ``|1/p - 1/2|``) it must reach
    ``outside_slope``.  Other points carry no expectation.
    """
    th = dict(DEFAULT_THRESHOLDS, **(thresholds or {}))
    if not (1.0 < p < np.inf):
        raise BadParams("sharpness needs 1 < p < inf")
    _check_increasing(N_list)
    a = make_counterexample(rho, theta)
    geo = Geometry.flat(1)

    def job(N):
        K = kernel_assemble(a, geo.metric, geo.conn, QuantizationParams(N=N, eps=0.0))
        if p == 2.0:
            e = opnorm_dense(K)
        else:
            e = opnorm_lplq(K, p, p, restarts=restarts, seed=seed)
        return SweepPoint(float(N), p, p, e.value, e.method, e.iterations, e.converged, seed)

    pts = run_jobs(job, list(N_list), threads)
    slope, res = fit_slope(N_list, [pt.norm_lb for pt in pts])
    inside = fefferman_interval(1, rho, theta).contains(p)
    gap = abs(1 / to_fraction(p) - Fraction(1, 2))
    far = (rho < 1) and (to_fraction(theta) / (1 - to_fraction(rho)) + Fraction(1, 10) < gap)
    if slope is None:
        verdict, ok = "insufficient-points", False
    elif inside:
        ok = slope < th["inside_slope"]
        verdict = "inside" if ok else "inside-growth"
    elif far:
        ok = slope >= th["outside_slope"]
        verdict = "outside" if ok else "outside-flat"
    else:
        verdict, ok = "indeterminate", True
    return SweepReport("sharpness", "N", pts, slope, res, verdict, ok,
                       {k: th[k] for k in ("inside_slope", "outside_slope")},
                       {"rho": rho, "theta": theta, "p": p, "inside_interval": inside,
                        "predicted_exponent": float((1 - to_fraction(rho)) * gap) if theta == 0 else None})


# ---------------------------------------------------------------------------
# Sobolev embedding
# ---------------------------------------------------------------------------


def _band_series(M: int, coeffs: np.ndarray, N: int) -> np.ndarray:
    spec = np.zeros(M, dtype=complex)
    ks = np.arange(-N, N + 1)
    spec[ks % M] = coeffs
    return np.fft.ifft(spec) * M


def sobolev_trials(N: int, M: int, trials: int, rng: np.random.Generator) -> list:
    """Half band-limited spikes at random positions, half random-phase series with power decay."""
    ks = np.arange(-N, N + 1)
    out = []
    for t in range(trials):
        if t % 2 == 0:
            x0 = rng.uniform(0.0, 2.0 * np.pi)
            width = rng.uniform(0.25, 1.0)
            c = np.exp(-1j * ks * x0) * (np.abs(ks) <= width * N)
        else:
            beta = rng.uniform(0.0, 1.0)
            c = np.exp(2j * np.pi * rng.uniform(size=ks.size)) / (1.0 + np.abs(ks)) ** beta
        out.append(_band_series(M, c, N))
    return out


def sobolev_embedding_probe(s: float, p: float, q: float, trials: int = 200,
                            N_list: Sequence[int] = (64, 128, 256), seed: int = 0, n: int = 1,
                            threshold: float = 1.2, threads: int = 1) -> SweepReport:
    """Sup over trials of ``||B^-s u||_q / ||u||_p`` per band; pass iff last/first < threshold."""
    if not (1.0 <= p < q < np.inf):
        raise BadParams("Sobolev probe needs 1 <= p < q < inf")
    if n != 1:
        raise BadParams("Sobolev probe runs on the circle")
    _check_increasing(N_list)
    seeds = np.random.SeedSequence(seed).spawn(len(N_list))

    def job(args):
        N, ss = args
        M = 4 * N
        rng = np.random.default_rng(ss)
        best = 0.0
        for f in sobolev_trials(N, M, trials, rng):
            u = GridDensity(f)
            r = lp_norm(bessel_apply(-s, u, N), q).value / lp_norm(u, p).value
            best = max(best, r)
        return SweepPoint(float(N), p, q, best, "trial-family", trials, True, seed)

    pts = run_jobs(job, list(zip(N_list, seeds)), threads)
    growth = pts[-1].norm_lb / pts[0].norm_lb
    slope, res = fit_slope(N_list, [pt.norm_lb for pt in pts])
    ok = growth < threshold
    admissible = n * (1.0 / p - 1.0 / q) <= s + 1e-15
    return SweepReport("sobolev-probe", "N", pts, slope, res, "bounded" if ok else "flagged", ok,
                       {"sobolev_growth": threshold},
                       {"growth": growth, "admissible": bool(admissible), "s": s})


# ---------------------------------------------------------------------------
# BMO
# ---------------------------------------------------------------------------


def _multiplier_values(a: SymbolSpec, N: int) -> tuple:
    xi = band(N, 1)
    return xi[:, 0].astype(int), a(np.zeros(1), xi)


def _apply_multiplier(vals_k, vals, f: np.ndarray) -> np.ndarray:
    M = f.shape[0]
    uh = np.fft.fft(f)
    out = np.zeros_like(uh)
    out[vals_k % M] = uh[vals_k % M] * vals
    return np.fft.ifft(out)


def _kernel_row(vals_k, vals, M: int) -> np.ndarray:
    """``c_j`` with ``(A f)_i = sum_j c_{i-j} f_j`` for a multiplier on the band."""
    spec = np.zeros(M, dtype=complex)
    spec[vals_k % M] = vals
    return np.fft.ifft(spec)


def ring_cutoff(t) -> np.ndarray:
    """Smooth ring indicator: 1 on [1, 3], 0 outside [1/2, 7/2]."""
    t = np.asarray(t, float)
    return smooth_step(t) * smooth_step(4.0 - t)


def linf_norm_circulant(c: np.ndarray) -> float:
    """L-infinity operator norm of a circulant grid operator, ``sum_j |c_j|``."""
    return float(np.sum(np.abs(c)))


def bmo_probe(rho: float, N_list: Sequence[int] = (16, 32, 64, 128), trials: int = 12, seed: int = 0,
              n: int = 1, a: Optional[SymbolSpec] = None, ring_R: Sequence[int] = (8, 16, 32),
              threshold: float = 1.3, threads: int = 1) -> SweepReport:
    """BMO values of ``A u`` over unimodular trials, across band doublings, plus ring-cut L-inf bounds.

    The default symbol is the counterexample at the endpoint order
    ``-n (1 - rho) / 2``.  Trials are the focusing chirp ``exp(i arg conj K[0, :])``
    (extremal for the L-inf -> L-inf norm) and random unimodular functions.
    """
    if n != 1:
        raise BadParams("BMO probe runs on the circle")
    order = -n * (1.0 - rho) / 2.0
    if a is None:
        a = make_counterexample(rho, -order)
    if abs(a.m - order) > 1e-9:
        raise BadParams(f"BMO probe needs order {order}, got {a.m}")
    _check_increasing(N_list)
    seeds = np.random.SeedSequence(seed).spawn(len(N_list))

    def job(args):
        N, ss = args
        M = 4 * N
        rng = np.random.default_rng(ss)
        ks, vals = _multiplier_values(a, N)
        c = _kernel_row(ks, vals, M)
        row0 = c[(-np.arange(M)) % M]
        cands = [np.exp(1j * np.angle(np.conj(row0)))]
        for t in range(trials - 1):
            if t % 2 == 0:
                cands.append(rng.choice([-1.0, 1.0], size=M) + 0j)
            else:
                cands.append(np.exp(2j * np.pi * rng.uniform(size=M)))
        D = distance_matrix(Geometry.flat(1).metric, M)
        best = 0.0
        for f in cands:
            Au = GridDensity(_apply_multiplier(ks, vals, f))
            best = max(best, bmo_norm(Au, D=D).value / np.max(np.abs(f)))
        return SweepPoint(float(N), np.inf, np.inf, best, "trial-family", len(cands), True, seed)

    pts = run_jobs(job, list(zip(N_list, seeds)), threads)
    growth = pts[-1].norm_lb / pts[0].norm_lb if pts[0].norm_lb > 0 else (1.0 if pts[-1].norm_lb == 0 else np.inf)
    ring = {}
    for R in ring_R:
        N = int(math.ceil(3.5 * R))
        M = 4 * N
        ks, vals = _multiplier_values(a, N)
        vals = vals * ring_cutoff(np.abs(ks) / R)
        ring[int(R)] = linf_norm_circulant(_kernel_row(ks, vals, M))
    rv = list(ring.values())
    ring_growth = max(rv) / min(rv) if min(rv) > 0 else (1.0 if max(rv) == 0 else np.inf)
    ok = growth < threshold and ring_growth < threshold
    slope, res = fit_slope(N_list, [max(pt.norm_lb, 1e-300) for pt in pts])
    return SweepReport("bmo-probe", "N", pts, slope, res, "bounded" if ok else "unbounded", ok,
                       {"bmo_growth": threshold},
                       {"growth": growth, "ring_linf": ring, "ring_growth": ring_growth,
                        "rho": rho, "order": order})


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------


def default_composition_pair(c_table=None) -> tuple:
    """``a = <xi>^-1/2`` and ``b = c(x) <xi>^-1/2`` with a fixed real trigonometric ``c``."""
    if c_table is None:
        c_table = {"n": 1, "order": -0.5, "real": True,
                   "coeffs": [[0, 1.0, 0.0], [1, 0.25, 0.1], [-1, 0.25, -0.1], [2, 0.0, 0.1], [-2, 0.0, -0.1]]}
    return make_bessel(-0.5), make_fourier_table(c_table)


def composition_residual_probe(a: SymbolSpec, b: SymbolSpec, k_list: Sequence[int] = (8, 16, 32, 64, 128),
                               modes: int = 2, seed: int = 0, window: float = 0.15,
                               threads: int = 1) -> SweepReport:
    """Relative L2 residual of ``Op(a) Op(b) - Op(a # b)`` on ``exp(i k x)``, two-term expansion.

    Pass iff the decay exponent fitted over all of ``k_list`` is at most
    ``m_a + m_b - 2 rho + delta + window``.
    """
    if a.n != 1 or b.n != 1:
        raise BadParams("composition probe runs on the circle")
    _check_increasing(k_list)
    ab = compose_leading(a, b, 2)
    N = 2 * max(k_list) + 2 * modes
    M = 4 * N
    x = torus_grid(M, 1)[:, 0]

    def job(k):
        u = GridDensity(np.exp(1j * k * x))
        lhs = toroidal_apply(a, toroidal_apply(b, u, 0.0, N), 0.0, N).values
        rhs = toroidal_apply(ab, u, 0.0, N).values
        r = lp_norm(GridDensity(lhs - rhs), 2).value / lp_norm(u, 2).value
        return SweepPoint(float(k), 2.0, 2.0, r, "direct", 1, True, seed)

    pts = run_jobs(job, list(k_list), threads)
    vals = [max(pt.norm_lb, 1e-300) for pt in pts]
    slope, res = fit_slope(k_list, vals, tail=False)
    rho, delta = min(a.rho, b.rho), max(a.delta, b.delta)
    bound = a.m + b.m - 2 * rho + delta + window
    if max(pt.norm_lb for pt in pts) < 1e-10:
        ok, verdict = True, "exact"
    else:
        ok = slope is not None and slope <= bound
        verdict = "decaying" if ok else "slow-decay"
    return SweepReport("compose-check", "k", pts, slope, res, verdict, ok,
                       {"slope_window": window}, {"slope_bound": bound, "N": N, "M": M})
