import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psidolab.geometry import (
    ConnectionField,
    MetricField,
    NoConvergence,
    OutsideInjectivityRadius,
    _segment_transport,
    curvature,
    geodesic_residual,
    geodesic_shoot,
    geometry_check,
    holonomy_curvature,
    log_map,
    log_map_batch,
    parallel_transport,
    phase,
    scalar_curvature,
    torsion,
    transport_derivative,
    upsilon,
    upsilon_derivative,
)

FAST = settings(max_examples=15, deadline=None)


def const1(k):
    return ConnectionField.constant(np.array([[[k]]]))


# -- tensors ---------------------------------------------------------------


def test_torsion_trivial_and_1d():
    assert np.all(torsion(ConnectionField.trivial(2), [0.3, 0.1]) == 0)
    conn = ConnectionField.random(1, np.random.default_rng(1))
    assert np.all(torsion(conn, np.linspace(0, 6, 7)[:, None]) == 0)


def test_torsion_single_component():
    G = np.zeros((2, 2, 2))
    G[0, 0, 1] = 1.0  # Gamma^1_{12}
    T = torsion(ConnectionField.constant(G), [0.0, 0.0])
    assert T[0, 0, 1] == 1.0 and T[0, 1, 0] == -1.0
    assert np.count_nonzero(T) == 2


def test_curvature_zero_cases():
    assert np.all(curvature(ConnectionField.trivial(2), [1.0, 2.0]) == 0)
    assert np.all(curvature(const1(0.7), [1.0]) == 0)


@FAST
@given(st.integers(0, 2 ** 32 - 1))
def test_curvature_antisymmetric(seed):
    conn = ConnectionField.random(2, np.random.default_rng(seed))
    y = np.random.default_rng(seed + 1).uniform(0, 2 * np.pi, (3, 2))
    R = curvature(conn, y)
    assert np.array_equal(R, -np.swapaxes(R, -1, -2))


def test_warped_curvature_matches_holonomy():
    conn = MetricField.warped().levi_civita()
    for y in ([0.3, 1.0], [2.0, 4.0], [4.5, 0.2]):
        assert np.max(np.abs(holonomy_curvature(conn, y) - curvature(conn, y))) < 1e-4


def test_holonomy_random_nonsymmetric():
    conn = ConnectionField.random(2, np.random.default_rng(7))
    y = [1.1, 2.3]
    assert np.max(np.abs(holonomy_curvature(conn, y) - curvature(conn, y))) < 1e-4


def test_scalar_curvature():
    assert scalar_curvature(MetricField.conformal_1d(0.4), [1.0]) == 0
    assert np.all(scalar_curvature(MetricField.flat(2), [[0.1, 0.2]]) == 0)
    metric = MetricField.warped()
    ys = np.array([[0.0, 0.0], [1.0, 2.0], [np.pi, 1.0], [4.0, 5.0]])
    S = scalar_curvature(metric, ys)
    c = np.cos(ys[:, 0])
    assert np.allclose(S, 2 * c / (2 + c), atol=1e-12)
    # holonomy oracle, contracted the same way
    conn = metric.levi_civita()
    for y, s in zip(ys, S):
        ric = np.einsum("ijil->jl", holonomy_curvature(conn, y))
        assert abs(np.einsum("jl,jl->", metric.g_inv(y), ric) - s) < 1e-4


def test_levi_civita_closed_form_matches_formula():
    metric = MetricField.warped()
    ys = np.random.default_rng(0).uniform(0, 2 * np.pi, (20, 2))
    a = ConnectionField.levi_civita(metric, closed_form=True)
    b = ConnectionField.levi_civita(metric, closed_form=False)
    assert np.max(np.abs(a.christoffel(ys) - b.christoffel(ys))) < 1e-8
    assert np.max(np.abs(a.dchristoffel(ys) - b.dchristoffel(ys))) < 1e-8
    Gs = a.christoffel(ys)
    assert np.max(np.abs(Gs - np.swapaxes(Gs, -1, -2))) < 1e-12


def test_metric_validate():
    MetricField.warped().validate(np.random.default_rng(0).uniform(0, 6, (10, 2)))
    bad = MetricField.constant([[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(ValueError):
        bad.validate(np.zeros((1, 2)))


# -- geodesics -------------------------------------------------------------


def test_geodesic_straight_line():
    sol = geodesic_shoot(ConnectionField.trivial(1), [0.0], [0.5])
    assert np.allclose(sol.z[:, 0], 0.5 * sol.t)
    assert np.array_equal(sol.z[0], [0.0]) and np.array_equal(sol.zdot[0], [0.5])


def test_geodesic_stationary():
    sol = geodesic_shoot(const1(0.4), [1.0], [0.0])
    assert np.all(sol.z == 1.0)


@pytest.mark.parametrize("k,v", [(0.3, 0.8), (-0.5, 0.6), (1.0, 0.3)])
def test_geodesic_constant_gamma_closed_form(k, v):
    sol = geodesic_shoot(const1(k), [0.0], [v])
    exact = np.log1p(k * v * sol.t) / k
    assert np.max(np.abs(sol.z[:, 0] - exact)) < 1e-9
    assert sol.residual < 1e-6
    assert sol.z[0, 0] == 0.0 and sol.zdot[0, 0] == v


@FAST
@given(st.integers(0, 2 ** 32 - 1))
def test_geodesic_residual_invariant(seed):
    rng = np.random.default_rng(seed)
    conn = ConnectionField.random(2, rng)
    # non-metric connections can blow up in finite time; keep |v| small
    sol = geodesic_shoot(conn, rng.uniform(0, 6, 2), rng.uniform(-0.5, 0.5, 2))
    assert geodesic_residual(conn, sol.t, sol.z, sol.zdot) < 1e-6


# -- log map ---------------------------------------------------------------


def test_log_map_trivial():
    assert np.allclose(log_map(ConnectionField.trivial(1), [0.1], [0.4]), 0.3)
    assert np.allclose(log_map(ConnectionField.trivial(1), [0.1], [6.2]), 6.2 - 0.1 - 2 * np.pi)
    assert abs(log_map(ConnectionField.trivial(1), [0.1], [6.2])[0] + 0.1832) < 1e-4


@pytest.mark.parametrize("k", [0.3, -0.4, 0.9])
@pytest.mark.parametrize("d", [0.5, -1.2, 2.0])
def test_log_map_constant_gamma(k, d):
    v = log_map(const1(k), [0.2], [0.2 + d])[0]
    exact = np.expm1(k * d) / k
    # RK4 at the default step: relative error ~1e-9 for the fastest case
    assert abs(v - exact) < 1e-8 * max(1.0, abs(exact))


def test_log_map_hits_target():
    rng = np.random.default_rng(3)
    conn = ConnectionField.random(2, rng)
    x = rng.uniform(0, 6, (6, 2))
    y = x + rng.uniform(-1.5, 1.5, (6, 2))
    v, _, _ = log_map_batch(conn, x, y)
    for xi, yi, vi in zip(x, y, v):
        assert np.max(np.abs(geodesic_shoot(conn, xi, vi).z[-1] - yi)) < 1e-8


def test_log_map_guard():
    with pytest.raises(OutsideInjectivityRadius):
        log_map(const1(0.2), [0.0], [0.95 * np.pi])


def test_log_map_no_convergence():
    with pytest.raises(NoConvergence):
        log_map(const1(0.3), [0.0], [2.5], max_iter=1)


def test_log_map_same_point():
    assert np.all(log_map(ConnectionField.random(2, np.random.default_rng(0)), [1.0, 1.0], [1.0, 1.0]) == 0)


# -- transport -------------------------------------------------------------


def test_transport_trivial_identity():
    r = parallel_transport(ConnectionField.trivial(2), [0.0, 0.0], [1.0, -2.0])
    assert np.array_equal(r.phi, np.eye(2)) and r.upsilon == 1.0


def test_transport_same_point_identity():
    r = parallel_transport(ConnectionField.random(2, np.random.default_rng(0)), [1.0, 2.0], [1.0, 2.0])
    assert np.array_equal(r.phi, np.eye(2)) and r.upsilon == 1.0


@pytest.mark.parametrize("k,d", [(0.3, 1.0), (-0.6, 0.8), (0.5, -2.0)])
def test_transport_constant_gamma_closed_form(k, d):
    r = parallel_transport(const1(k), [0.4], [0.4 + d])
    assert abs(r.phi[0, 0] - np.exp(k * d)) < 1e-9
    assert abs(r.upsilon - np.exp(k * d)) < 1e-9


@pytest.mark.parametrize("n", [1, 2])
def test_transport_derivative_chart(n):
    conn = ConnectionField.random(n, np.random.default_rng(11 + n))
    x = np.full(n, 0.7)
    assert np.max(np.abs(transport_derivative(conn, x) - conn.christoffel(x))) < 1e-5


def test_transport_derivative_normal_is_half_torsion():
    conn = ConnectionField.random(2, np.random.default_rng(5))
    x = np.array([2.0, 0.5])
    G = conn.christoffel(x)
    D = transport_derivative(conn, x, normal=True)
    assert np.max(np.abs(D - 0.5 * (G - np.swapaxes(G, -1, -2)))) < 1e-4


def test_upsilon_derivative_is_trace():
    conn = ConnectionField.random(2, np.random.default_rng(9))
    x = np.array([0.3, 5.0])
    assert np.max(np.abs(upsilon_derivative(conn, x) - np.einsum("jkj->k", conn.christoffel(x)))) < 1e-5


def test_upsilon_trivial_and_diagonal():
    assert upsilon(ConnectionField.trivial(1), [0.0], [2.0]) == 1.0
    assert upsilon(const1(0.5), [1.0], [1.0]) == 1.0


@FAST
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([1, 2]))
def test_upsilon_reciprocity(seed, n):
    rng = np.random.default_rng(seed)
    conn = ConnectionField.random(n, rng)
    x = rng.uniform(0, 2 * np.pi, n)
    y = x + rng.uniform(-2.0, 2.0, n)
    assert upsilon(conn, x, y) > 0
    assert abs(upsilon(conn, x, y) * upsilon(conn, y, x) - 1.0) < 1e-8


def test_flat_connection_path_independent():
    G = np.zeros((2, 2, 2))
    G[0, 0, 0] = 0.4
    conn = ConnectionField.constant(G)
    assert conn.is_flat
    p = np.array([0.2, 0.3])
    a, b = np.array([0.8, 0.0]), np.array([0.0, 1.1])
    P1 = _segment_transport(conn, p + a, b, 64) @ _segment_transport(conn, p, a, 64)
    P2 = _segment_transport(conn, p + b, a, 64) @ _segment_transport(conn, p, b, 64)
    assert np.max(np.abs(P1 - P2)) < 1e-8


def test_geometry_check_thresholds():
    conn = ConnectionField.random(2, np.random.default_rng(2))
    r = geometry_check(conn, np.array([[0.5, 1.5]]))
    assert r["transport_chart"] < 1e-5 and r["determinant"] < 1e-5
    assert r["transport_normal"] < 1e-4 and r["reciprocity"] < 1e-8


# -- phase -----------------------------------------------------------------


def test_phase_flat():
    conn = ConnectionField.trivial(2)
    x, y, z = np.array([0.1, 0.2]), np.array([0.9, -0.3]), np.array([2.0, 3.0])
    assert np.isclose(phase(conn, x, y, 0.0, z), (x - y) @ z)
    assert np.isclose(phase(conn, x, y, 0.5, z), (x - y) @ z)
    assert phase(conn, x, y, 0.3, [0.0, 0.0]) == 0


@pytest.mark.parametrize("k", [0.3, -0.7])
def test_phase_constant_gamma(k):
    d = 0.9
    assert abs(phase(const1(k), [0.0], [d], 0.0, [1.0]) + np.expm1(k * d) / k) < 1e-9


def test_phase_depends_on_tau_when_curved():
    conn = const1(0.5)
    assert abs(phase(conn, [0.0], [1.0], 0.0, [1.0]) - phase(conn, [0.0], [1.0], 1.0, [1.0])) > 1e-3


# -- JSON ------------------------------------------------------------------


@FAST
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([1, 2]))
def test_connection_json_round_trip(seed, n):
    conn = ConnectionField.random(n, np.random.default_rng(seed))
    text = conn.to_json()
    back = ConnectionField.from_json(text)
    assert back.to_json() == text
    y = np.random.default_rng(seed).uniform(0, 6, (5, n))
    assert np.array_equal(back.christoffel(y), conn.christoffel(y))


def test_connection_json_document_shape():
    doc = {"n": 1, "gamma": "fourier", "coeffs": [[0, 0.3, 0.0], [1, 0.1, -0.05], [-1, 0.1, 0.05]]}
    conn = ConnectionField.from_json(json.dumps(doc))
    y = np.array([[0.0], [1.0]])
    expect = 0.3 + 2 * (0.1 * np.cos(y[:, 0]) + 0.05 * np.sin(y[:, 0]))
    assert np.allclose(conn.christoffel(y)[:, 0, 0, 0], expect)
