import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psidolab.experiments.norms import opnorm_dense, opnorm_lplq, opnorm_power, trial_family
from psidolab.geometry import Geometry, MetricField
from psidolab.quantize import KernelMatrix, QuantizationParams, SizeCap, kernel_assemble, volume_weights
from psidolab.symbols import make_bessel, make_counterexample, make_fourier_table

FLAT = Geometry.flat(1)


def kernel_from(matrix, metric=None):
    M = matrix.shape[0]
    metric = metric or MetricField.flat(1)
    return KernelMatrix(np.asarray(matrix, complex), 1, M, 0.0, 0.0, M // 4, volume_weights(metric, M))


def identity_kernel(M=32):
    return kernel_from(np.eye(M))


def test_dense_identity_symbol():
    K = kernel_assemble(make_bessel(0.0), FLAT.metric, FLAT.conn, QuantizationParams(N=16, eps=0.0))
    assert abs(opnorm_dense(K).value - 1) < 1e-6


@pytest.mark.parametrize("lam", [-1.0, 0.5])
def test_dense_multiplier_max(lam):
    N = 16
    K = kernel_assemble(make_bessel(lam), FLAT.metric, FLAT.conn, QuantizationParams(N=N, eps=0.0))
    k = np.arange(-N, N + 1)
    assert opnorm_dense(K).value == pytest.approx(np.max((1 + k * k) ** (lam / 2)), rel=1e-10)


def test_dense_matches_power():
    rng = np.random.default_rng(0)
    K = kernel_from(rng.normal(size=(24, 24)) + 1j * rng.normal(size=(24, 24)), MetricField.conformal_1d(0.3))
    d, p = opnorm_dense(K), opnorm_power(K)
    assert d.method == "dense-svd" and p.method == "power-iteration"
    assert abs(d.value - p.value) < 1e-6 * d.value


def test_dense_cap():
    class Big:  # only the shape is inspected before the cap triggers
        matrix = np.empty((4097, 0))

    with pytest.raises(SizeCap):
        opnorm_dense(Big())


@pytest.mark.parametrize("p", [1.5, 2.0, 4.0])
def test_lplq_identity(p):
    e = opnorm_lplq(identity_kernel(), p, p)
    assert abs(e.value - 1) < 1e-9 and e.method == "boyd-iteration"


@pytest.mark.parametrize("p,q", [(2.0, 2.0), (1.5, 3.0), (4.0, 4 / 3), (3.0, 3.0)])
def test_lplq_rank_one(p, q):
    M = 32
    x = 2 * np.pi * np.arange(M) / M
    w = np.full(M, 2 * np.pi / M)
    phi = 1 + 0.5 * np.cos(x)
    psi = np.exp(np.sin(x)) * (1 + 0.3j * np.cos(2 * x))
    # (A u)(x) = phi(x) sum_y psi(y) u(y) w(y)
    K = kernel_from(np.outer(phi, psi * w))
    pd = p / (p - 1)
    exact = np.sum(np.abs(phi) ** q * w) ** (1 / q) * np.sum(np.abs(psi) ** pd * w) ** (1 / pd)
    assert abs(opnorm_lplq(K, p, q).value - exact) < 0.01 * exact


def test_lplq_matches_dense_at_two():
    a = make_fourier_table({"n": 1, "order": -1.0, "real": True,
                            "coeffs": [[0, 1.0, 0.0], [1, 0.4, 0.0], [-1, 0.4, 0.0]]})
    K = kernel_assemble(a, FLAT.metric, FLAT.conn, QuantizationParams(N=8))
    assert abs(opnorm_lplq(K, 2, 2).value - opnorm_dense(K).value) < 1e-4


@settings(max_examples=12, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_lplq_lower_bound_contract(seed):
    rng = np.random.default_rng(seed)
    K = kernel_from(rng.normal(size=(16, 16)) + 1j * rng.normal(size=(16, 16)))
    e = opnorm_lplq(K, 2, 2, restarts=2, seed=seed)
    assert 0 <= e.value <= opnorm_dense(K).value * (1 + 1e-12)


def test_lplq_trace_and_determinism():
    K = kernel_assemble(make_counterexample(0.5, 0.0), FLAT.metric, FLAT.conn, QuantizationParams(N=16, eps=0.0))
    a = opnorm_lplq(K, 4, 4, seed=3)
    b = opnorm_lplq(K, 4, 4, seed=3)
    assert a.value == b.value and a.trace == b.trace
    assert max(a.trace) == a.value and a.restarts == 7


def test_lplq_domain():
    with pytest.raises(ValueError):
        opnorm_lplq(identity_kernel(), 1.0, 2.0)


def test_trial_family_shapes():
    fam = trial_family(32, 1)
    assert fam and all(f.shape == (32,) for f in fam)
    fam2 = trial_family(8, 2)
    assert all(f.shape == (64,) for f in fam2)
