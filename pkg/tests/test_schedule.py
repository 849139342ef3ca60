import math

import numpy as np
import pytest
from scipy.special import expit, logit
from scipy.stats import ks_2samp

from flowdistill.errors import ConfigError, DomainError
from flowdistill import schedule as sch

TRAP = getattr(np, "trapezoid", np.trapz)

ALL_FAMILIES = [sch.make_schedule(name) for name in sch.FAMILY_NAMES]


def quadrature_oracle(law: sch.TimestepLaw, n: int = 8192) -> float:
    """Independent trapezoid integral of pi over the effective range.

    Written against raw density/weight evaluations (not the law's own
    normalizer path) on its own logit-uniform grid.
    """
    lo, hi = law.effective_range
    ts = expit(np.linspace(logit(lo), logit(hi), n))
    ts[0], ts[-1] = lo, hi
    return float(TRAP(law.pi(ts), ts))


# ---------------------------------------------------------------------------
# unit-time maps


def test_t_from_snr_anchors():
    assert sch.t_from_snr(1.0) == 0.5
    assert sch.t_from_snr(0.0) == 1.0
    assert math.isclose(sch.t_from_snr(9.0), 0.25, rel_tol=1e-15)
    with pytest.raises(DomainError):
        sch.t_from_snr(-1.0)
    with pytest.raises(DomainError):
        sch.t_from_snr(float("inf"))


def test_trig_rf_round_trip():
    t = np.linspace(1e-3, 1 - 1e-3, 257)
    back = sch.rf_time(sch.trig_time(t))
    np.testing.assert_allclose(back, t, rtol=1e-12)
    assert math.isclose(sch.rf_time(math.pi / 4), 0.5, rel_tol=1e-15)
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(DomainError):
            sch.trig_time(bad)
    for bad in (0.0, math.pi / 2, 2.0):
        with pytest.raises(DomainError):
            sch.rf_time(bad)


# ---------------------------------------------------------------------------
# scale conventions and SNR alignment


def test_rectified_flow_alpha_sigma_exact():
    s = sch.make_schedule("rectified_flow")
    t = np.linspace(sch.T_LO, sch.T_HI, 101)
    a, sg = s.alpha_sigma(t)
    np.testing.assert_array_equal(a, 1.0 - t)
    np.testing.assert_array_equal(sg, t)
    a0, s0 = s.alpha_sigma(sch.T_LO)
    assert (a0, s0) == (1.0 - 1e-3, 1e-3)


def test_trigflow_alpha_sigma_on_unit_circle():
    s = sch.make_schedule("trigflow")
    a, sg = s.alpha_sigma(0.5)
    np.testing.assert_allclose([a, sg], [0.70710678118654746] * 2, rtol=1e-15)
    t = np.linspace(sch.T_LO, sch.T_HI, 513)
    a, sg = s.alpha_sigma(t)
    np.testing.assert_allclose(a**2 + sg**2, 1.0, atol=1e-14)
    # matches (cos, sin) of the mapped angle
    ang = sch.trig_time(t)
    np.testing.assert_allclose(a, np.cos(ang), atol=1e-14)
    np.testing.assert_allclose(sg, np.sin(ang), atol=1e-14)


def test_edm_alpha_is_one():
    for name in ("edm_train", "edm_sample_truncated"):
        s = sch.make_schedule(name)
        t = np.linspace(sch.T_LO, sch.T_HI, 101)
        a, sg = s.alpha_sigma(t)
        np.testing.assert_array_equal(a, np.ones_like(t))
        np.testing.assert_allclose(sg, t / (1.0 - t), rtol=1e-15)


@pytest.mark.parametrize("s", ALL_FAMILIES, ids=sch.FAMILY_NAMES)
def test_snr_matches_alpha_sigma_and_decreases(s):
    t = np.linspace(sch.T_LO, sch.T_HI, 1024)
    a, sg = s.alpha_sigma(t)
    np.testing.assert_array_equal(s.snr(t), (a / sg) ** 2)
    assert np.all(np.diff(s.snr(t)) < 0)
    assert np.all(a > 0) and np.all(sg > 0)


@pytest.mark.parametrize("s", ALL_FAMILIES, ids=sch.FAMILY_NAMES)
def test_alpha_sigma_rejects_out_of_domain(s):
    for bad in (0.0, 1.0, -0.5, 1e-4, 1 - 1e-4):
        with pytest.raises(DomainError):
            s.alpha_sigma(bad)


# ---------------------------------------------------------------------------
# native <-> unit maps


@pytest.mark.parametrize("s", ALL_FAMILIES, ids=sch.FAMILY_NAMES)
def test_map_round_trips(s):
    t = np.linspace(sch.T_LO, sch.T_HI, 401)
    lo, hi = s.induced_support()
    t = t[(t > lo) & (t < hi)]
    back = s.map_to_unit(s.native_from_unit(t))
    np.testing.assert_allclose(back, t, rtol=1e-12)
    # strictly monotone in the native coordinate
    native = np.asarray(s.native_from_unit(t))
    diffs = np.diff(native)
    assert np.all(diffs > 0) or np.all(diffs < 0)


def test_trigflow_map_anchor():
    s = sch.make_schedule("trigflow")
    assert math.isclose(s.map_to_unit(math.pi / 4), 0.5, rel_tol=1e-15)


def test_edm_train_map_anchor():
    # sigma = 1 (alpha = 1) sits exactly at the SNR = 1 midpoint.
    s = sch.make_schedule("edm_train")
    assert s.map_to_unit(0.0) == 0.5
    assert math.isclose(s.native_from_unit(0.5), 0.0, abs_tol=1e-15)


def test_ddpm_brute_force_product_oracle():
    s = sch.make_schedule("ddpm_linear")
    # independent cumulative-product computation, plain python loop
    betas = np.linspace(1e-4, 0.02, 1000)
    abar = []
    acc = 1.0
    for b in betas:
        acc *= 1.0 - b
        abar.append(acc)
    abar = np.array(abar)
    t_steps = 1.0 / (1.0 + np.sqrt(abar / (1.0 - abar)))

    for step in (0, 1, 250, 500, 999):
        t = s.map_to_unit(float(step))
        assert math.isclose(t, t_steps[step], rel_tol=1e-12)
        assert math.isclose(s.snr(t), abar[step] / (1.0 - abar[step]), rel_tol=1e-11)
        a, sg = s.alpha_sigma(t)
        assert math.isclose(a, math.sqrt(abar[step]), rel_tol=1e-11)
        assert math.isclose(sg, math.sqrt(1.0 - abar[step]), rel_tol=1e-11)

    # frozen anchors from the oracle above
    assert math.isclose(s.map_to_unit(0.0), 0.0099014802835555461, rel_tol=1e-13)
    assert math.isclose(s.map_to_unit(999.0), 0.99368715885479497, rel_tol=1e-13)
    assert math.isclose(s.snr(s.map_to_unit(0.0)), 9999.0, rel_tol=1e-11)


def test_ddpm_fractional_steps_stay_monotone_between_anchors():
    s = sch.make_schedule("ddpm_linear")
    u = np.linspace(0.0, 999.0, 4001)
    t = s.map_to_unit(u)
    assert np.all(np.diff(t) > 0)
    # fractional values bracketed by their integer neighbours
    t_half = s.map_to_unit(10.5)
    assert s.map_to_unit(10.0) < t_half < s.map_to_unit(11.0)


def test_sana_shift_map():
    s = sch.make_schedule("sana_shifted", shift=3.0)
    # shift pushes native times toward higher unit time (lower SNR)
    assert s.map_to_unit(0.25) == pytest.approx(0.5, rel=1e-15)
    assert s.map_to_unit(0.5) > 0.5
    np.testing.assert_allclose(
        s.map_to_unit(s.native_from_unit(np.array([0.1, 0.5, 0.9]))),
        [0.1, 0.5, 0.9],
        rtol=1e-14,
    )
    # shift = 1 degenerates to the identity
    s1 = sch.make_schedule("sana_shifted", shift=1.0)
    assert s1.map_to_unit(0.37) == pytest.approx(0.37, rel=1e-15)


# ---------------------------------------------------------------------------
# induced timestep distributions


def test_sana_induced_density_change_of_variables_oracle():
    """The closed-form LogitNormal(ln shift, 1) implementation must match the
    two-step construction: draw native t0 ~ LogitNormal(0, 1), push through
    the shift map."""
    s = sch.make_schedule("sana_shifted", shift=3.0)

    def oracle(t):
        t0 = t / (3.0 - 2.0 * t)
        dt0_dt = 3.0 / (3.0 - 2.0 * t) ** 2
        z = logit(t0)
        p0 = math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi) / (t0 * (1 - t0))
        return p0 * dt0_dt

    for t in (0.05, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99):
        assert math.isclose(s.induced_pdf(t), oracle(t), rel_tol=1e-12)
    # frozen anchors
    assert math.isclose(s.induced_pdf(0.1), 0.019404248380352328, rel_tol=1e-13)
    assert math.isclose(s.induced_pdf(0.5), 0.87273907367993653, rel_tol=1e-13)
    assert math.isclose(s.induced_pdf(0.9), 2.4242752046664906, rel_tol=1e-13)


def test_edm_train_induced_density_oracle():
    """EDM's log sigma ~ N(mean, std) lands on unit time as the logit-normal
    with identical parameters; check against the native-space change of
    variables p(t) = phi((log sigma - mu)/s) / s * |d log sigma / dt|."""
    s = sch.make_schedule("edm_train")

    def oracle(t):
        log_sigma = math.log(t / (1 - t))
        z = (log_sigma + 1.2) / 1.2
        phi = math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi) / 1.2
        return phi / (t * (1 - t))

    for t in (0.01, 0.1, 0.5, 0.9, 0.99):
        assert math.isclose(s.induced_pdf(t), oracle(t), rel_tol=1e-12)


@pytest.mark.parametrize("s", ALL_FAMILIES, ids=sch.FAMILY_NAMES)
def test_induced_density_normalizes_and_inverts(s):
    lo, hi = s.induced_support()
    glo = max(lo, 1e-9) if lo == 0.0 else lo
    ghi = min(hi, 1 - 1e-9) if hi == 1.0 else hi
    ts = expit(np.linspace(logit(glo), logit(ghi), 20001))
    total = TRAP(s.induced_pdf(ts), ts)
    assert abs(total - 1.0) < 1e-4
    # cdf/ppf round trip
    q = np.linspace(1e-6, 1 - 1e-6, 101)
    tq = s.induced_ppf(q)
    np.testing.assert_allclose(s.induced_cdf(tq), q, atol=1e-9)


def test_edm_sample_support_frozen():
    s = sch.make_schedule("edm_sample_truncated")
    lo, hi = s.induced_support()
    assert math.isclose(lo, 0.001996007984031936, rel_tol=1e-12)
    assert hi == 0.8


# ---------------------------------------------------------------------------
# TimestepLaw


def test_weight_values_exact():
    t = np.array([0.2, 0.5, 0.8])
    np.testing.assert_array_equal(sch.weight_value("one", t), np.ones(3))
    np.testing.assert_array_equal(sch.weight_value("one_minus_t", t), 1.0 - t)
    np.testing.assert_array_equal(sch.weight_value("inv_t", t), 1.0 / t)
    np.testing.assert_array_equal(sch.weight_value("ratio", t), (1.0 - t) / t)
    np.testing.assert_array_equal(sch.weight_value("ratio_sq", t), ((1.0 - t) / t) ** 2)
    with pytest.raises(ConfigError):
        sch.weight_value("nope", t)


def test_unit_weight_pi_equals_p_exactly():
    law = sch.TimestepLaw(sch.logit_normal(), weight="one")
    t = np.linspace(sch.T_LO, sch.T_HI, 999)
    np.testing.assert_array_equal(law.pi(t), law.p(t))
    assert law.normalizer == 1.0


@pytest.mark.parametrize("weight", sch.WEIGHT_NAMES)
def test_pi_normalizes_for_every_weight_on_default_density(weight):
    law = sch.TimestepLaw(sch.logit_normal(), weight=weight)
    assert abs(quadrature_oracle(law) - 1.0) < 1e-4


def test_pi_normalizes_on_nastiest_grid_case():
    # steep left support edge x steepest weight
    ed = sch.make_schedule("edm_sample_truncated")
    law = sch.TimestepLaw(sch.schedule_induced(ed), weight="ratio_sq")
    assert abs(quadrature_oracle(law) - 1.0) < 1e-4


def test_pi_matches_ratio_of_weighted_density():
    law = sch.TimestepLaw(sch.logit_normal(0.0, 1.0), weight="ratio")
    t = np.array([0.1, 0.4, 0.9])
    expected = law.weight_at(t) * law.p(t) / law.normalizer
    np.testing.assert_allclose(law.pi(t), expected, rtol=1e-15)


def test_p_renormalizes_on_subrange():
    law = sch.TimestepLaw(sch.uniform(), t_range=(0.25, 0.75))
    assert math.isclose(law.p(0.5), 2.0, rel_tol=1e-12)
    lo, hi = law.effective_range
    assert (lo, hi) == (0.25, 0.75)
    with pytest.raises(DomainError):
        law.p(0.1)
    with pytest.raises(DomainError):
        law.pi(0.9)


def test_pi_table_shape_and_consistency():
    law = sch.TimestepLaw(sch.logit_normal(), weight="one_minus_t")
    table = law.pi_table(512)
    assert set(table) == {"t", "p", "w", "pi"}
    assert all(len(col) == 512 for col in table.values())
    assert np.all(np.diff(table["t"]) > 0)
    assert abs(TRAP(table["pi"], table["t"]) - 1.0) < 1e-3
    imax = int(np.argmax(table["p"]))
    assert np.all(table["p"] <= table["p"][imax])
    np.testing.assert_array_equal(table["w"], 1.0 - table["t"])


def test_pi_table_for_induced_families_integrates():
    for name in ("ddpm_linear", "edm_train", "edm_sample_truncated"):
        law = sch.TimestepLaw(
            sch.schedule_induced(sch.make_schedule(name)), weight="ratio_sq"
        )
        table = law.pi_table(512)
        assert abs(TRAP(table["pi"], table["t"]) - 1.0) < 1e-3, name


def test_sampler_respects_range():
    rng = np.random.default_rng(7)
    law = sch.TimestepLaw(sch.logit_normal(), t_range=(0.2, 0.4))
    t = law.sample(rng, 10_000)
    assert t.min() >= 0.2 and t.max() <= 0.4


def _inverse_cdf_reference(law: sch.TimestepLaw, n: int, rng) -> np.ndarray:
    """Independent sampler: numerically invert the quadrature CDF of p."""
    lo, hi = law.effective_range
    ts = expit(np.linspace(logit(lo), logit(hi), 200_001))
    ts[0], ts[-1] = lo, hi
    pdf = law.p(ts)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (pdf[1:] + pdf[:-1]) * np.diff(ts))])
    cdf /= cdf[-1]
    u = rng.random(n)
    return np.interp(u, cdf, ts)


@pytest.mark.parametrize(
    "law",
    [
        sch.TimestepLaw(sch.logit_normal(math.log(2.0), 1.6)),
        sch.TimestepLaw(sch.uniform(), t_range=(0.1, 0.9)),
        sch.TimestepLaw(sch.schedule_induced(sch.make_schedule("ddpm_linear"))),
        sch.TimestepLaw(sch.schedule_induced(sch.make_schedule("edm_sample_truncated"))),
    ],
    ids=["logit_normal", "uniform_subrange", "ddpm_induced", "edm_ladder"],
)
def test_sampler_ks_against_inverse_cdf_quadrature(law):
    n = 100_000
    draws = law.sample(np.random.default_rng(11), n)
    reference = _inverse_cdf_reference(law, n, np.random.default_rng(1213))
    stat = ks_2samp(draws, reference).statistic
    critical_1pct = 1.628 * math.sqrt(2.0 / n)
    assert stat < critical_1pct


def test_law_validation_errors():
    with pytest.raises(ConfigError):
        sch.TimestepLaw(sch.uniform(), weight="bogus")
    with pytest.raises(ConfigError):
        sch.TimestepLaw(sch.uniform(), t_range=(0.5, 0.4))
    with pytest.raises(ConfigError):
        sch.TimestepLaw(sch.uniform(), t_range=(0.0, 0.5))
    # range disjoint from the density support
    ed = sch.make_schedule("edm_sample_truncated")
    with pytest.raises(ConfigError):
        sch.TimestepLaw(sch.schedule_induced(ed), t_range=(0.9, 0.99))


def test_make_schedule_errors():
    with pytest.raises(ConfigError):
        sch.make_schedule("unknown_family")
    with pytest.raises(ConfigError):
        sch.make_schedule("rectified_flow", bogus=1.0)
    with pytest.raises(ConfigError):
        sch.make_schedule("sana_shifted", shift=-2.0)
    with pytest.raises(ConfigError):
        sch.make_schedule("ddpm_linear", n_steps=1)
