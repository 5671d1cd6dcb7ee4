import cmath
import math

import numpy as np
import pytest

from lab import chain, spectral, theory
from lab.chain import ModelParams
from lab.errors import GapFailureError, ParameterDomainError
from lab.spectral import GridSpec


@pytest.fixture(scope="module")
def iid_report():
    theta = ModelParams(0.0, 1.0, 0.0)
    return spectral.spectral_report(theta, spectral.fprime_functional(theta), GridSpec.for_theta(theta, 201))


def test_grid_weights_sum_to_width():
    grid = GridSpec.uniform(3.0, 61)
    assert grid.weights.sum() == pytest.approx(6.0)
    assert grid.nodes[30] == pytest.approx(0.0, abs=1e-14)


@pytest.mark.parametrize("N", [2, 100, 1])
def test_grid_needs_odd_node_count(N):
    with pytest.raises(ParameterDomainError):
        GridSpec.uniform(1.0, N)


def test_doubled_grid_keeps_spacing():
    grid = GridSpec.uniform(4.0, 81)
    fine = grid.doubled()
    assert (fine.L, fine.N) == (8.0, 161)
    assert fine.nodes[1] - fine.nodes[0] == pytest.approx(grid.nodes[1] - grid.nodes[0])


def test_operator_rows_sum_to_one_at_zero():
    theta = ModelParams(0.3, 1.0, 0.1)
    op = spectral.build_operator(theta, spectral.fprime_functional(theta), 0.0, GridSpec.for_theta(theta, 101))
    np.testing.assert_allclose(op.matrix.sum(axis=1), 1.0, atol=1e-14)


def test_operator_modulus_is_base_kernel():
    theta = ModelParams(-0.3, 1.0, 0.2)
    grid = GridSpec.for_theta(theta, 101)
    xi = spectral.fprime_functional(theta)
    k0 = spectral.build_operator(theta, xi, 0.0, grid).matrix
    kt = spectral.build_operator(theta, xi, 0.7, grid).matrix
    np.testing.assert_allclose(np.abs(kt), k0.real, rtol=1e-13, atol=1e-300)


def test_zero_functional_leaves_kernel_unchanged():
    theta = ModelParams(0.2, 1.0, 0.1)
    grid = GridSpec.for_theta(theta, 51)
    zero = lambda x, y: 0.0
    np.testing.assert_array_equal(
        spectral.build_operator(theta, zero, 0.0, grid).matrix,
        spectral.build_operator(theta, zero, 1.3, grid).matrix,
    )


def test_power_iteration_two_state_chain():
    result = spectral.power_iteration(np.array([[0.9, 0.1], [0.2, 0.8]]))
    assert result.value == pytest.approx(1.0, abs=1e-12)
    assert result.residual < 1e-9


def test_power_iteration_matches_dense_eigensolver():
    rng = np.random.default_rng(21)
    for _ in range(10):
        base = rng.uniform(size=(50, 50))
        base *= 0.9 / base.sum(axis=1, keepdims=True)
        matrix = base * np.exp(0.3j * rng.uniform(-1.0, 1.0, size=base.shape))
        eig = np.linalg.eigvals(matrix)
        dominant = eig[np.argmax(np.abs(eig))]
        assert abs(spectral.power_iteration(matrix).value - dominant) < 1e-9


def test_power_iteration_without_gap_fails():
    matrix = np.array([[1.0, 1.0], [0.0, -1.0]])
    with pytest.raises(GapFailureError):
        spectral.power_iteration(matrix, max_iter=200, v0=np.array([0.0, 1.0]))


def test_lambda_is_conjugate_symmetric():
    theta = ModelParams(0.3, 1.0, 0.1)
    grid = GridSpec.for_theta(theta, 101)
    xi = spectral.fprime_functional(theta)
    for t in (0.01, 0.02):
        plus = spectral.dominant_eigenvalue(spectral.build_operator(theta, xi, t, grid))
        minus = spectral.dominant_eigenvalue(spectral.build_operator(theta, xi, -t, grid))
        assert abs(minus - plus.conjugate()) < 1e-10


def test_iid_report_matches_theory(iid_report):
    assert abs(iid_report.lambda0 - 1.0) <= 1e-8
    assert abs(iid_report.lambda_prime0) <= 1e-4
    assert iid_report.sigma_sq == pytest.approx(4.0, rel=0.1)
    assert iid_report.converged
    assert set(iid_report.to_dict()["lambda0"]) == {"re", "im"}


@pytest.mark.parametrize("theta", [(0.3, 1.0, 0.1), (-0.3, 1.0, 0.2)])
def test_centered_functionals_have_unit_lambda0(theta):
    t = ModelParams(*theta)
    grid = GridSpec.for_theta(t, 151)
    for name in ("Fprime", "Fsecond_centered"):
        report = spectral.spectral_report(t, spectral.FUNCTIONALS[name](t), grid)
        assert abs(report.lambda0 - 1.0) <= 1e-8
        assert report.sigma_sq >= 0.0


def test_negative_curvature_is_reported_not_clamped(monkeypatch, caplog):
    # lambda(t) = 1 + t^2 / 2 has lambda''(0) = 1, so the estimate is sigma^2 = -1
    monkeypatch.setattr(spectral, "dominant_eigenvalue", lambda op, tol=None, max_iter=None: 1.0 + 0.5 * op.t ** 2)
    theta = ModelParams(0.0, 1.0, 0.0)
    report = spectral.spectral_report(theta, spectral.fprime_functional(theta), GridSpec.for_theta(theta, 31), 0.01)
    assert report.sigma_sq == pytest.approx(-1.0, rel=1e-6)
    assert report.sigma_sq_positive is False
    assert report.to_dict()["sigma_sq_positive"] is False
    assert "sigma^2" in caplog.text


def test_sigma_sq_is_sign_invariant():
    theta = ModelParams(0.3, 1.0, 0.1)
    grid = GridSpec.for_theta(theta, 101)
    xi = spectral.fprime_functional(theta)
    a = spectral.spectral_report(theta, xi, grid, t_step=0.005)
    b = spectral.spectral_report(theta, lambda x, y: -xi(x, y), grid, t_step=0.005)
    assert a.sigma_sq == pytest.approx(b.sigma_sq, rel=1e-8)


def test_xsq_variance_matches_geometric_formula():
    theta = ModelParams(0.3, 1.0, 0.1)
    report = spectral.spectral_report(theta, spectral.xsq_centered_functional(theta), GridSpec.for_theta(theta, 201))
    assert report.sigma_sq == pytest.approx(0.25 * theory.sigma2_sq(theta), rel=0.1)


def test_characteristic_function_matches_monte_carlo():
    theta = ModelParams(0.3, 1.0, 0.1)
    xi = spectral.fprime_functional(theta)
    t, n, R = 0.3, 4, 20_000
    op = spectral.build_operator(theta, xi, t, GridSpec.for_theta(theta, 199))
    predicted = spectral.characteristic_function(op, n, start=0.0)

    paths = chain.simulate_batch(theta, n, [chain.derive_stream_seed(55, i) for i in range(R)])
    sums = xi(paths[:, :-1], paths[:, 1:]).sum(axis=1)
    z = np.exp(1j * t * sums)
    se = math.sqrt(0.5 / R)
    assert abs(z.mean().real - predicted.real) < 3 * se + 1e-3
    assert abs(z.mean().imag - predicted.imag) < 3 * se + 1e-3


def test_operator_dump_round_trip(tmp_path):
    theta = ModelParams(0.2, 1.0, 0.1)
    op = spectral.build_operator(theta, spectral.fprime_functional(theta), 0.25, GridSpec.for_theta(theta, 31))
    path = tmp_path / "op.bin"
    spectral.dump_operator(op, path)
    assert path.stat().st_size == 16 + 16 * 31 * 31
    matrix, t = spectral.load_operator(path)
    assert t == 0.25
    np.testing.assert_array_equal(matrix, op.matrix)
    assert cmath.isfinite(complex(matrix[15, 15]))
