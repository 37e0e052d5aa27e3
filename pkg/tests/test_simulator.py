import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from screening_iv.core import CONTROL, SCREENING, HazardFn, IntensityModel
from screening_iv.errors import ConfigParseError, NoDetectedSubjects
from screening_iv.estimators import cumulative_incidence
from screening_iv.simulator import (
    Confounder,
    ScenarioConfig,
    adaptive_simpson,
    cox_binary_loghr,
    marginal_true_loghr,
    simulate_arm,
    simulate_path,
    simulate_paths,
    simulate_trial,
    table2_config,
    table2_model,
    true_subgroup_quantities,
)

RATES = dict(l12=0.2280, l13=0.1148, l14=0.0168, l23=0.1980, l24=0.0111)


def closed_form_control_cancer(t, theta, l12, l13, l14, l23, l24, mult=1.0):
    """Constant-rate control-arm cancer CIF, derived by hand.

    Direct 1->3 plus detection at u followed by a delayed-treatment death
    by t; ``mult`` scales the 1->2, 1->3 and 2->3 rates.
    """
    l12, l13, l23 = l12 * mult, l13 * mult, l23 * mult
    a = l12 + l13 + l14
    b = theta * l23 + l24
    direct = l13 / a * (1 - math.exp(-a * t))
    via2 = l12 * theta * l23 / b * ((1 - math.exp(-a * t)) / a - (math.exp(-a * t) - math.exp(-b * t)) / (b - a))
    return direct + via2


def mc_se(p, n):
    return math.sqrt(p * (1 - p) / n)


# ---------------------------------------------------------------- path simulation


def test_single_exponential_path_mean():
    c = 0.37
    m = IntensityModel.constant_rates({"13": c})
    rng = np.random.default_rng(1)
    p = simulate_paths(m, 1, 1.0, rng.random((100_000, 4)))
    assert np.all(p.terminal_state == 3) and np.all(np.isnan(p.detect_time))
    se = (1 / c) / math.sqrt(p.terminal_time.size)
    assert abs(p.terminal_time.mean() - 1 / c) < 3 * se


def test_table2_detection_fraction_exceeds_half():
    # [PAPER] "more than 50% in the screening arm early diagnosed"
    ds = simulate_arm(table2_model(), 100_000, SCREENING, 7.0, np.random.default_rng(3))
    assert ds.detected.mean() > 0.5


def test_first_event_type_frequencies():
    rng = np.random.default_rng(4)
    p = simulate_paths(table2_model(), 1, 1.0, rng.random((100_000, 4)))
    first = np.where(~np.isnan(p.detect_time), 2, p.terminal_state)
    total = RATES["l12"] + RATES["l13"] + RATES["l14"]
    for code, rate in ((2, RATES["l12"]), (3, RATES["l13"]), (4, RATES["l14"])):
        expected = rate / total
        assert abs(np.mean(first == code) - expected) < 3 * mc_se(expected, first.size)


def test_piecewise_sojourn_matches_closed_form_survival():
    # piecewise 1->3 hazard only; survival at s is exp(-Lambda(s))
    h = HazardFn.piecewise([0.0, 1.0, 3.0], [0.2, 0.0, 0.8])
    m = IntensityModel({"13": h})
    p = simulate_paths(m, 1, 1.0, np.random.default_rng(5).random((100_000, 4)))
    for s in (0.5, 2.0, 3.5):
        expected = math.exp(-h.cumulative(s))
        assert abs(np.mean(p.terminal_time > s) - expected) < 3 * mc_se(expected, 100_000)
    # no deaths in the zero-hazard window
    assert not np.any((p.terminal_time > 1.0) & (p.terminal_time < 3.0))


def test_unreachable_terminal_state_is_infinite():
    m = IntensityModel.constant_rates({"12": 1.0})  # no way out of state 2
    p = simulate_path(m, 0, 1.0, np.random.default_rng(0))
    assert p.detect_time is not None and p.latent
    assert p.terminal_state == 0 and math.isinf(p.terminal_time)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.5, 10.0), st.integers(0, 2**32 - 1))
def test_state_partition_sums_to_one(horizon, seed):
    rng = np.random.default_rng(seed)
    p = simulate_paths(table2_model(), rng.integers(0, 2, 2000), 1.0, rng.random((2000, 4)))
    ended = p.terminal_time <= horizon
    s3 = np.mean(ended & (p.terminal_state == 3))
    s4 = np.mean(ended & (p.terminal_state == 4))
    s2 = np.mean(~ended & (p.detect_time <= horizon))
    s1 = np.mean(~ended & ~(p.detect_time <= horizon))
    assert s1 + s2 + s3 + s4 == pytest.approx(1.0, abs=1e-12)
    # detection never follows the terminal event
    det = ~np.isnan(p.detect_time)
    assert np.all(p.detect_time[det] <= p.terminal_time[det])


# ---------------------------------------------------------------- trial simulation


def test_trial_determinism():
    cfg = table2_config(seed=42)
    assert simulate_trial(cfg) == simulate_trial(cfg)
    assert simulate_trial(cfg) != simulate_trial(cfg.with_seed(43))


def test_trial_observation_rules():
    ds = simulate_trial(table2_config(n=5000, seed=7))
    assert not ds.detected[ds.arm == CONTROL].any()
    assert np.all(ds.event_time <= 7.0)
    assert np.all(ds.event_time[ds.event_type == 0] == 7.0)


def test_null_effect_arms_have_equal_cancer_incidence():
    cfg = ScenarioConfig(100_000, table2_model(0.0), 7.0, None, 11)
    ds = simulate_trial(cfg)
    c = cumulative_incidence(ds, CONTROL, 3, 7.0)
    s = cumulative_incidence(ds, SCREENING, 3, 7.0)
    n0, n1 = (ds.arm == CONTROL).sum(), (ds.arm == SCREENING).sum()
    se = math.sqrt(c * (1 - c) / n0 + s * (1 - s) / n1)
    assert abs(c - s) < 3 * se


def test_positive_effect_raises_control_cancer_incidence():
    ds = simulate_trial(table2_config(n=100_000, seed=12))
    assert cumulative_incidence(ds, CONTROL, 3, 7.0) > cumulative_incidence(ds, SCREENING, 3, 7.0)


@pytest.mark.parametrize("doc", [
    {"n": 0, "theta": 1.6, "censor_horizon": 7, "hazards": {}},
    {"n": 10, "theta": 1.6, "censor_horizon": -1, "hazards": {}},
    {"n": 10, "censor_horizon": 7, "hazards": {}},
    {"n": 10, "theta": 1.6, "censor_horizon": 7, "hazards": {"31": {"form": "constant", "rate": 1}}},
    {"n": 10, "theta": 1.6, "censor_horizon": 7, "hazards": {}, "seed": -1},
])
def test_config_rejects_invalid(doc):
    with pytest.raises(ConfigParseError):
        ScenarioConfig.from_json(doc)


def test_config_json_round_trip(tmp_path):
    cfg = table2_config(beta=0.34, seed=99)
    cfg.dump(tmp_path / "c.json")
    back = ScenarioConfig.load(tmp_path / "c.json")
    assert back.to_json() == cfg.to_json()
    doc = {k: v for k, v in cfg.to_json().items() if k != "theta"}
    assert ScenarioConfig.from_json({**doc, "log_theta": 0.47}).model.theta == pytest.approx(math.exp(0.47))


# ---------------------------------------------------------------- quadrature oracle


def test_adaptive_simpson_polynomial_and_vector():
    assert adaptive_simpson(lambda x: x**3, 0.0, 2.0) == pytest.approx(4.0, abs=1e-10)
    v = adaptive_simpson(lambda x: np.array([math.sin(x), math.exp(x)]), 0.0, 1.0)
    assert v == pytest.approx([1 - math.cos(1.0), math.e - 1], abs=1e-8)


@pytest.mark.parametrize("t", [1.0, 3.5, 7.0])
@pytest.mark.parametrize("theta", [0.5, 1.0, 1.6, 3.0])
def test_quadrature_matches_closed_form(t, theta):
    tq = true_subgroup_quantities(table2_model(math.log(theta)), t)
    assert tq.cif_control_cancer == pytest.approx(closed_form_control_cancer(t, theta, **RATES), abs=1e-7)


def test_quadrature_confounded_matches_stratum_mixture():
    beta, theta = 0.47, 1.6
    tq = true_subgroup_quantities(table2_model(math.log(theta)), 7.0, Confounder(beta, 0.5))
    expected = 0.5 * closed_form_control_cancer(7.0, theta, **RATES) + 0.5 * closed_form_control_cancer(
        7.0, theta, **RATES, mult=math.exp(beta))
    assert tq.cif_control_cancer == pytest.approx(expected, abs=1e-7)


def test_null_effect_truths_vanish():
    tq = true_subgroup_quantities(table2_model(0.0), 7.0)
    for v in (tq.acfr, tq.pcfr, tq.its_abs, tq.its_prop):
        assert v == pytest.approx(0.0, abs=1e-9)


def test_truth_identities():
    tq = true_subgroup_quantities(table2_model(), 7.0)
    assert tq.its_abs == pytest.approx(tq.cif_control_cancer - tq.cif_screening_cancer, abs=1e-12)
    assert tq.acfr == pytest.approx(tq.its_abs / tq.detection_prob, rel=1e-10)
    assert tq.pcfr == pytest.approx(tq.its_abs / (tq.cif_control_cancer - tq.direct_cancer), rel=1e-10)
    assert tq.detection_prob == pytest.approx(
        RATES["l12"] / 0.3596 * (1 - math.exp(-0.3596 * 7.0)), abs=1e-9)


def test_point_mass_screen_matches_single_screen_closed_form():
    # all detection happens in [0, 1e-3]; no competing risks
    l13, l23, theta = 0.1, 0.2, 1.6
    m = IntensityModel({"12": HazardFn.piecewise([0.0, 1e-3], [1000.0, 0.0]),
                        "13": HazardFn.constant(l13), "23": HazardFn.constant(l23)}, theta)
    tq = true_subgroup_quantities(m, 7.0)
    p = 1 - math.exp(-1.0)
    expected = p * (1 - math.exp(-theta * l23 * 7.0)) + (1 - p) * (1 - math.exp(-l13 * 7.0))
    assert tq.cif_control_cancer == pytest.approx(expected, abs=1e-3)


@settings(max_examples=20, deadline=None)
@given(st.floats(-2.0, 2.0), st.floats(0.0, 1.0), st.floats(0.5, 10.0))
def test_control_cancer_monotone_in_theta(log_theta, step, t):
    lo = true_subgroup_quantities(table2_model(log_theta), t).cif_control_cancer
    hi = true_subgroup_quantities(table2_model(log_theta + step), t).cif_control_cancer
    assert hi >= lo - 1e-9


def test_simulated_control_cancer_matches_quadrature():
    ds = simulate_arm(table2_model(), 1_000_000, CONTROL, 7.0, np.random.default_rng(21))
    emp = float(np.mean(ds.event_type == 3))
    truth = true_subgroup_quantities(table2_model(), 7.0).cif_control_cancer
    assert abs(emp - truth) < 3 * mc_se(truth, 1_000_000)


# ---------------------------------------------------------------- marginal oracle


def brute_force_cox(entry, exit, event, group):
    """Partial likelihood maximized by a dense scan plus refinement."""
    from scipy.optimize import minimize_scalar

    def negll(b):
        ll = 0.0
        for i in np.flatnonzero(event):
            at_risk = (entry < exit[i]) & (exit >= exit[i])
            ll += b * group[i] - math.log(np.sum(np.exp(b * group[at_risk])))
        return -ll

    return minimize_scalar(negll, bounds=(-5, 5), method="bounded", options={"xatol": 1e-10}).x


def test_cox_matches_brute_force():
    rng = np.random.default_rng(8)
    n = 300
    group = rng.integers(0, 2, n).astype(bool)
    entry = rng.uniform(0, 1, n)
    exit = entry + rng.exponential(1 / np.where(group, 0.9, 0.5))
    cens = entry + rng.uniform(0, 3, n)
    event = exit <= cens
    exit = np.minimum(exit, cens)
    assert cox_binary_loghr(entry, exit, event, group) == pytest.approx(
        brute_force_cox(entry, exit, event, group), abs=1e-6)


def test_marginal_truth_without_confounding_equals_log_theta():
    cfg = table2_config(beta=0.0)
    est = marginal_true_loghr(cfg, 200_000)
    # about 70k deaths per referral: SE ~ sqrt(2/70000) ~ 0.0053
    assert abs(est - 0.47) < 3 * 0.0053


def test_marginal_truth_is_reproducible():
    cfg = table2_config(beta=0.47)
    assert marginal_true_loghr(cfg, 20_000, seed=3) == marginal_true_loghr(cfg, 20_000, seed=3)


def test_marginal_truth_requires_detections():
    m = IntensityModel.constant_rates({"13": 0.1, "23": 0.2}, 1.6)
    with pytest.raises(NoDetectedSubjects):
        marginal_true_loghr(ScenarioConfig(100, m, 7.0, Confounder(0.3), 0), 1000)
