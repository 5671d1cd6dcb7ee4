import math

import numpy as np
import pytest
from scipy import signal
from scipy.special import ndtri
from scipy.stats import chi2, kstwo

from core.pipeline import curve_verdict
from lab import bemetrics, chain, longrun, mest, spectral, theory
from lab.bemetrics import BECurve, StandardizedSample
from lab.chain import ModelParams, ParamBox
from lab.errors import DataQualityError, DegenerateDataError, ParameterDomainError

LADDER = (250, 500, 1000, 2000, 4000, 8000)
ADDITIVE_LADDER = (500, 1000, 2000, 4000, 8000)


# ---------------------------------------------------------------------------
# Normal CDF and Kolmogorov distance
# ---------------------------------------------------------------------------
def test_gaussian_cdf_values():
    assert bemetrics.gaussian_cdf(0.0) == 0.5
    assert bemetrics.gaussian_cdf(1.959964) == pytest.approx(0.975, abs=1e-6)


def test_gaussian_cdf_symmetry():
    u = np.random.default_rng(1).normal(scale=3.0, size=10_000)
    np.testing.assert_allclose(bemetrics.gaussian_cdf(-u), 1.0 - bemetrics.gaussian_cdf(u), atol=1e-12)


def test_kolmogorov_distance_examples():
    assert bemetrics.kolmogorov_distance(StandardizedSample.from_values([0.0])) == 0.5
    assert bemetrics.kolmogorov_distance(StandardizedSample.from_values([1.0, -1.0, 0.0])) == pytest.approx(
        0.174678, abs=1e-6
    )


def test_kolmogorov_distance_at_mid_quantiles():
    R = 1000
    values = ndtri((np.arange(1, R + 1) - 0.5) / R)
    assert bemetrics.kolmogorov_distance(values) == pytest.approx(0.5 / R, abs=1e-12)


def test_kolmogorov_distance_is_duplication_invariant():
    values = np.random.default_rng(2).standard_normal(300)
    base = bemetrics.kolmogorov_distance(values)
    for k in (2, 5):
        assert abs(bemetrics.kolmogorov_distance(np.repeat(values, k)) - base) <= 1e-15


def test_inserting_the_median_moves_distance_by_at_most_one_over_r():
    values = np.random.default_rng(3).standard_normal(99)
    base = bemetrics.kolmogorov_distance(values)
    bigger = bemetrics.kolmogorov_distance(np.append(values, 0.0))
    assert bigger <= base + 1.0 / 100


def test_kolmogorov_distance_rejects_empty_sample():
    with pytest.raises(ParameterDomainError):
        bemetrics.kolmogorov_distance([])


def test_kolmogorov_floor_matches_limit_law():
    R = 20_000
    assert math.sqrt(R) * bemetrics.kolmogorov_floor(R) == pytest.approx(math.sqrt(math.pi / 2) * math.log(2), abs=0.01)
    assert bemetrics.kolmogorov_floor(R, 0.5) < bemetrics.kolmogorov_floor(R, 0.99) < bemetrics.kolmogorov_floor(R, 0.999)
    assert bemetrics.kolmogorov_floor(4 * R) < bemetrics.kolmogorov_floor(R)


@pytest.mark.parametrize("R, level", [(0, None), (100, 0.0), (100, 1.0)])
def test_kolmogorov_floor_rejects_bad_arguments(R, level):
    with pytest.raises(ParameterDomainError):
        bemetrics.kolmogorov_floor(R, level)


def test_resolved_points_drop_noise_level_distances():
    floor = bemetrics.kolmogorov_floor(2000, bemetrics.FLOOR_LEVEL)
    curve = BECurve(((250, 0.1), (500, 2.0 * floor), (1000, floor), (2000, 0.5 * floor)), "x", "rho", 2000)
    assert bemetrics.resolved_points(curve) == ((250, 0.1), (500, 2.0 * floor))
    assert len(bemetrics.resolved_points(curve, level=0.01)) == 4


# ---------------------------------------------------------------------------
# Batch means
# ---------------------------------------------------------------------------
def test_batch_means_iid():
    y = np.random.default_rng(4).standard_normal(250_000)
    assert longrun.batch_means_variance(y, size="cuberoot") == pytest.approx(1.0, rel=0.1)


def test_batch_means_autoregressive_long_run_variance():
    e = np.random.default_rng(5).standard_normal(1_000_000)
    y = signal.lfilter([1.0], [1.0, -0.5], e)
    assert longrun.batch_means_variance(y, size="cuberoot") == pytest.approx(4.0, rel=0.08)


def test_batch_means_needs_two_batches():
    with pytest.raises(ParameterDomainError):
        longrun.batch_means_variance(np.ones(10), batch_size=6)
    with pytest.raises(ParameterDomainError):
        longrun.batch_means_variance(np.ones(100), size="fourthroot")


# ---------------------------------------------------------------------------
# Replications
# ---------------------------------------------------------------------------
def test_estimator_sample_is_deterministic_and_thread_invariant():
    theta = ModelParams(0.2, 1.0, 0.1)
    one = bemetrics.standardized_estimator_sample(theta, 300, 600, 77, "rho", threads=1)
    again = bemetrics.standardized_estimator_sample(theta, 300, 600, 77, "rho", threads=1)
    many = bemetrics.standardized_estimator_sample(theta, 300, 600, 77, "rho", threads=4)
    assert one.values.tobytes() == again.values.tobytes() == many.values.tobytes()
    assert one.R == 600
    assert np.all(np.diff(one.values) >= 0.0)
    np.testing.assert_array_equal(one.rep_index, many.rep_index)


def test_estimator_sample_uses_theory_scale():
    theta = ModelParams(0.2, 1.0, 0.1)
    sample = bemetrics.standardized_estimator_sample(theta, 200, 10, 3, "rho")
    assert sample.scale == pytest.approx(theory.tau(theta))
    raw = [mest.rho_hat(chain.simulate(theta, 200, chain.derive_stream_seed(3, i))) for i in range(10)]
    expected = np.sort(math.sqrt(200) * (np.array(raw) - theta.rho0) / theory.tau(theta))
    np.testing.assert_allclose(sample.values, expected, rtol=1e-12, atol=1e-12)


def test_rep_index_maps_sorted_values_to_replications():
    theta = ModelParams(0.2, 1.0, 0.1)
    sample = bemetrics.standardized_estimator_sample(theta, 120, 30, 5, "rho")
    assert sorted(sample.rep_index.tolist()) == list(range(30))
    for value, rep in zip(sample.values, sample.rep_index):
        traj = chain.simulate(theta, 120, chain.derive_stream_seed(5, int(rep)))
        expected = math.sqrt(120) * (mest.rho_hat(traj) - theta.rho0) / theory.tau(theta)
        assert value == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_rho_sample_never_hits_a_bound():
    sample = bemetrics.standardized_estimator_sample(ModelParams(0.2, 1.0, 0.1), 100, 50, 3, "rho")
    assert sample.bound_hits == 0


def test_b_bound_hits_are_counted(caplog):
    theta = ModelParams(0.3, 1.0, 0.2)
    wide = bemetrics.standardized_estimator_sample(theta, 8000, 20, 5, "b")
    narrow = bemetrics.standardized_estimator_sample(theta, 200, 40, 5, "b", b_domain=(0.19, 0.21))
    assert wide.bound_hits == 0
    assert 0 < narrow.bound_hits <= 40
    assert "stopped at a bound" in caplog.text


def test_rho_sample_is_approximately_standard_normal():
    sample = bemetrics.standardized_estimator_sample(ModelParams(0.0, 1.0, 0.0), 2000, 400, 11, "rho")
    sd = float(np.std(sample.values, ddof=1))
    assert abs(float(np.mean(sample.values))) <= 3.0 / math.sqrt(sample.R) * sd
    assert 0.85 <= sd <= 1.15


def test_b_sample_is_self_normalized():
    sample = bemetrics.standardized_estimator_sample(ModelParams(0.3, 1.0, 0.2), 1000, 200, 5, "b")
    assert float(np.std(sample.values, ddof=1)) == pytest.approx(1.0, rel=1e-12)


def test_zero_functional_sample():
    sample = bemetrics.standardized_additive_sample(
        ModelParams(0.1, 1.0, 0.1), 50, 20, 9, lambda x, y: 0.0 * x, scale=1.0
    )
    assert not sample.values.any()
    assert bemetrics.kolmogorov_distance(sample) == 0.5


def test_custom_functional_needs_scale():
    with pytest.raises(ParameterDomainError):
        bemetrics.standardized_additive_sample(ModelParams(0.1, 1.0, 0.1), 50, 20, 9, lambda x, y: x)


def test_additive_sample_is_centered():
    theta = ModelParams(0.0, 1.0, 0.0)
    sample = bemetrics.standardized_additive_sample(theta, 1000, 500, 13, "Fprime")
    sd = float(np.std(sample.values, ddof=1))
    assert abs(float(np.mean(sample.values))) <= 3.0 * sd / math.sqrt(sample.R)
    assert sample.scale == pytest.approx(2.0)


def test_fsecond_scale_from_batch_means_tracks_theory():
    theta = ModelParams(0.3, 1.0, 0.1)
    scale = bemetrics.additive_scale(theta, "Fsecond_centered", 21, n=20_000)
    assert scale ** 2 == pytest.approx(theory.sigma2_sq(theta), rel=0.15)


def test_fallback_replications_are_counted():
    theta = ModelParams(0.1, 1.0, 0.1)
    bad = {chain.derive_stream_seed(8, 3)}

    def estimate(traj):
        if traj.seed in bad:
            raise DegenerateDataError("forced")
        return mest.rho_hat(traj)

    results, fallbacks = bemetrics.replicate(theta, 100, 200, 8, estimate)
    assert fallbacks == 1 and len(results) == 200
    with pytest.raises(DataQualityError):
        bemetrics.replicate(theta, 100, 50, 8, estimate)


# ---------------------------------------------------------------------------
# Sup over the grid, rate fits, curves
# ---------------------------------------------------------------------------
def test_uniform_sup_over_singleton_grid():
    theta = ModelParams(0.0, 1.0, 0.02)
    box = ParamBox(0.1, 0.5, 1.5, 0.01, 0.04, grid=(theta,))
    sup = bemetrics.uniform_sup_distance(box, 200, 100, 4, "rho")
    single = bemetrics.kolmogorov_distance(bemetrics.standardized_estimator_sample(theta, 200, 100, 4, "rho"))
    assert sup.value == single
    assert sup.argmax == theta.theta_id


def test_uniform_sup_dominates_members():
    box = ParamBox.lattice(0.1, 0.5, 1.0, 0.01, 0.04, n_rho=3, n_a=1, n_b=1)
    sup = bemetrics.uniform_sup_distance(box, 200, 100, 4, "rho")
    assert all(sup.value >= d for d in sup.per_theta.values())
    assert float(sup) == max(sup.per_theta.values())


def test_rate_fit_exact_power_law():
    ns = np.array([250, 500, 1000, 2000, 4000, 8000])
    curve = BECurve(tuple(zip(ns, 0.8 / np.sqrt(ns))), "synthetic", "rho", 2000)
    slope, intercept = bemetrics.rate_fit(curve)
    assert slope == pytest.approx(-0.5, abs=1e-12)
    assert intercept == pytest.approx(math.log(0.8), abs=1e-10)


def test_rate_fit_log_correction():
    ns = np.array([250, 500, 1000, 2000, 4000, 8000])
    curve = BECurve(tuple(zip(ns, 0.8 * np.log(ns) / np.sqrt(ns))), "synthetic", "b", 2000, correction="log")
    slope, _ = bemetrics.rate_fit(curve)
    assert slope == pytest.approx(0.0, abs=1e-12)


def test_rate_fit_rejects_zero_distance():
    curve = BECurve(((100, 0.1), (200, 0.0), (400, 0.05)), "synthetic", "rho", 10)
    with pytest.raises(DegenerateDataError, match="increase R"):
        bemetrics.rate_fit(curve)


def test_rate_fit_needs_three_points():
    with pytest.raises(ParameterDomainError):
        bemetrics.rate_fit(BECurve(((100, 0.1), (200, 0.07)), "synthetic", "rho", 10))


def test_curve_points_are_sorted_and_bounded():
    curve = BECurve(((400, 0.05), (100, 0.1)), "x", "rho", 10)
    assert [n for n, _ in curve.points] == [100, 400]
    with pytest.raises(ParameterDomainError):
        BECurve(((100, 1.5),), "x", "rho", 10)


def test_be_curve_over_box_adds_sup_scope():
    box = ParamBox.lattice(0.1, 0.5, 1.0, 0.01, 0.04, n_rho=2, n_a=1, n_b=1)
    seen = []
    curves = bemetrics.be_curve(box, (100, 200, 400), 60, 1, "rho", on_sample=seen.append)
    assert [c.theta_scope for c in curves] == [t.theta_id for t in box.grid] + ["sup"]
    assert len(seen) == 6
    sup = curves[-1]
    for i, (n, d) in enumerate(sup.points):
        assert d == max(c.points[i][1] for c in curves[:-1])


def test_be_curve_b_skips_box_points_on_the_domain_edge():
    box = ParamBox.lattice(0.1, 0.5, 1.5, 0.01, 0.04, n_rho=1, n_a=1, n_b=2)
    inside = [t for t in box.grid if t.b0 == 0.04]
    curves = bemetrics.be_curve(box, (100, 200, 400), 30, 1, "b")
    assert [c.theta_scope for c in curves] == [t.theta_id for t in inside]
    with pytest.raises(ParameterDomainError):
        bemetrics.be_curve(box, (100, 200, 400), 30, 1, "b", b_domain=(0.05, 0.99))
    with pytest.raises(ParameterDomainError):
        bemetrics.uniform_sup_distance(box, 100, 30, 1, "b", b_domain=(0.05, 0.99))


def test_be_curve_b_reuses_largest_n_scale():
    theta = ModelParams(0.3, 1.0, 0.2)
    seen = []
    (curve,) = bemetrics.be_curve(theta, (300, 600, 1200), 80, 2, "b", on_sample=seen.append)
    assert curve.correction == "log"
    assert len({s.scale for s in seen}) == 1
    assert seen[0].n == 1200


def test_audit_rho_first_order_condition():
    audit = bemetrics.audit_conditions(ModelParams(0.2, 1.0, 0.1), 500, 100, 6, "rho", r_n=0.0, d=0.25)
    assert audit.v3_freq == 0.0
    assert audit.r_n_used == 1e-9
    assert 0.0 <= audit.v6_freq <= 1.0


def test_audit_b_threshold_carries_first_order_constant():
    theta = ModelParams(0.3, 1.0, 0.2)
    audit = bemetrics.audit_conditions(theta, 400, 40, 6, "b")
    scale = theory.b_first_order_scale(theta)
    assert audit.r_n_used == pytest.approx(scale.total * math.log(400) / 400)
    assert audit.first_order_scale["total"] == pytest.approx(scale.total)
    assert audit.v3_freq_log_rate >= audit.v3_freq
    assert set(audit.term_medians) == {"m_prime", "a_n", "delta1", "delta2", "delta3"}
    assert audit.term_medians["a_n"] < audit.term_medians["delta1"]
    assert set(audit.to_dict()) >= {"v3_freq", "v6_freq", "r_n_used", "d_used", "v3_freq_log_rate", "term_medians"}


def test_audit_b_explicit_threshold_is_used():
    audit = bemetrics.audit_conditions(ModelParams(0.3, 1.0, 0.2), 400, 20, 6, "b", r_n=math.log(400) / 400)
    assert audit.r_n_used == pytest.approx(math.log(400) / 400)
    assert audit.v3_freq == audit.v3_freq_log_rate


# ---------------------------------------------------------------------------
# Long Monte Carlo checks
# ---------------------------------------------------------------------------
BANDS = {"slope_lo": -0.65, "slope_hi": -0.35, "log_band": 0.15, "stability_max": 2.5}


def _chi2_distance(n: int) -> float:
    """sup_u |P((chi2_n - n) / sqrt(2n) <= u) - Gamma(u)| on a dense grid."""
    u = np.linspace(-8.0, 8.0, 400_001)
    return float(np.max(np.abs(chi2.cdf(n + math.sqrt(2.0 * n) * u, n) - bemetrics.gaussian_cdf(u))))


@pytest.mark.slow
def test_squared_innovation_sums_resolve_root_n_rate():
    # at (0, 1, 0) the Xsq_centered sum is chi2_n - n, so D_n is known exactly
    ladder, R = (16, 32, 64, 128, 256), 100_000
    (curve,) = bemetrics.be_curve(ModelParams(0.0, 1.0, 0.0), ladder, R, 20240601, "Xsq_centered")
    exact = {n: _chi2_distance(n) for n in ladder}
    noise = float(kstwo.ppf(0.999, R))
    for n, d in curve.points:
        assert abs(d - exact[n]) <= noise, n
    exact_slope, _ = bemetrics.rate_fit(BECurve(tuple(exact.items()), "exact", "Xsq_centered", R))
    assert -0.6 <= exact_slope <= -0.4
    verdict = curve_verdict(curve, **BANDS)
    assert verdict["status"] == "fit" and verdict["resolved"] == len(ladder)
    assert -0.65 <= curve.slope <= -0.35
    assert curve.stability_ratio() <= 2.5
    assert verdict["pass"]


@pytest.mark.slow
def test_fprime_partial_sums_sit_at_monte_carlo_floor():
    # S_n(F') at rho0 = 0 is symmetric in law, so the exact D_n is O(1/n) and R = 2000 cannot see it
    R = 2000
    (curve,) = bemetrics.be_curve(ModelParams(0.0, 1.0, 0.0), ADDITIVE_LADDER, R, 20240601, "Fprime")
    for n, d in curve.points:
        assert d <= bemetrics.kolmogorov_floor(R, 0.999) + 2.0 / n, n
    verdict = curve_verdict(curve, **BANDS)
    assert verdict["status"] == "floor"
    assert verdict["pass"]


@pytest.mark.slow
def test_rho_distances_stay_within_floor_plus_root_n_term():
    R = 2000
    box = ParamBox.lattice(0.4, 0.5, 1.5, 0.01, 0.04, n_rho=5, n_a=1, n_b=1)
    curves = bemetrics.be_curve(box, LADDER, R, 20240601, "rho")
    assert curves[-1].theta_scope == "sup"
    members = len(box.grid)
    for curve in curves:
        # the sup curve is a max over the grid: union bound on its noise quantile
        level = 1.0 - 0.001 / (members if curve.theta_scope == "sup" else 1)
        for n, d in curve.points:
            assert d <= bemetrics.kolmogorov_floor(R, level) + 1.0 / math.sqrt(n), (curve.theta_scope, n)
        assert curve_verdict(curve, **BANDS)["status"] in ("floor", "fit")


@pytest.mark.slow
def test_b_rate_with_log_correction():
    (curve,) = bemetrics.be_curve(ModelParams(0.3, 1.0, 0.2), LADDER, 2000, 20240601, "b")
    assert curve.correction == "log"
    assert abs(curve.slope) <= 0.15


@pytest.mark.slow
def test_b_curve_on_default_domain_never_stops_at_a_bound():
    seen = []
    bemetrics.be_curve(ModelParams(0.3, 1.0, 0.2), (8000,), 200, 20240601, "b", on_sample=seen.append)
    assert [s.bound_hits for s in seen] == [0]


@pytest.mark.slow
def test_condition_audits_at_desk_scale():
    theta = ModelParams(0.3, 1.0, 0.2)
    rho = bemetrics.audit_conditions(theta, 4000, 2000, 20240601, "rho", r_n=1e-9, d=0.25)
    b = bemetrics.audit_conditions(theta, 4000, 2000, 20240601, "b", d=0.25)
    assert rho.v3_freq == 0.0
    assert rho.v6_freq <= 0.02
    assert b.v3_freq <= 0.1
    assert b.v6_freq <= 0.02
    # at the bare log(n)/n threshold the plug-in terms dominate; Delta_1n carries most of n M'_n
    assert b.v3_freq_log_rate >= b.v3_freq
    medians = b.term_medians
    assert medians["delta1"] > max(medians["delta2"], medians["delta3"])
    assert medians["a_n"] < 0.01 * medians["m_prime"]


@pytest.mark.slow
@pytest.mark.parametrize("n", [4000, 8000])
def test_rho_sample_is_standard_normal_at_desk_scale(n):
    sample = bemetrics.standardized_estimator_sample(ModelParams(0.0, 1.0, 0.0), n, 2000, 20240601, "rho")
    sd = float(np.std(sample.values, ddof=1))
    assert abs(float(np.mean(sample.values))) <= 3.0 / math.sqrt(sample.R) * sd
    assert abs(sd - 1.0) <= 0.1


@pytest.mark.slow
@pytest.mark.parametrize("theta", [(0.0, 1.0, 0.0), (0.3, 1.0, 0.1), (-0.3, 1.0, 0.2)])
def test_variance_triangulation(theta):
    t = ModelParams(*theta)
    traj = chain.simulate(t, 1_000_000, 99)
    xi = spectral.fprime_functional(t)
    batch = longrun.batch_means_variance(xi(traj.prev, traj.curr))
    eig = spectral.spectral_report(t, xi).sigma_sq
    exact = theory.sigma1_sq(t)
    for a, b in ((exact, batch), (exact, eig), (batch, eig)):
        assert a == pytest.approx(b, rel=0.1)
