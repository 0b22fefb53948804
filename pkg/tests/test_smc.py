import numpy as np
import pytest

from tvemi import cox
from tvemi.basis import TveSpec, select_knots, tve_matrix
from tvemi.data import BaselineHazard
from tvemi.smc import (CovariateModel, SmcConfig, _CellBatch, _rejection_sample, acceptance_probability,
                       draw_substantive_params, impute_smc)
from tvemi.regression import expit

# six subjects: (T, D, x2); failure times 1, 2, 3.5, 5
FIXTURE = [(1.0, 1, 0.0), (2.0, 1, 1.0), (2.5, 0, 1.0), (3.5, 1, 0.0), (5.0, 1, 1.0), (6.0, 0, 0.0)]
BASELINE = BaselineHazard(np.array([1.0, 2.0, 3.5, 5.0]), np.array([0.08, 0.12, 0.2, 0.3]))
SPECS = (TveSpec.linear(), TveSpec())
BETA = np.array([0.2, 0.15, 0.5])
GAMMA = np.array([-0.5, 0.8])


def enumerated_p1(T, D, x2):
    """p(X1=1 | T, D, x2) from prior x likelihood over both values of X1."""
    weights = []
    for x1 in (0.0, 1.0):
        prior = expit(GAMMA[0] + GAMMA[1] * x2)
        prior = prior if x1 == 1.0 else 1 - prior
        f = tve_matrix(SPECS, BETA, BASELINE.event_times)
        lp = f @ np.array([x1, x2])
        upto = BASELINE.event_times <= T
        cum = np.sum(BASELINE.increments[upto] * np.exp(lp[upto]))
        haz = BASELINE.increment_at(np.array([T]))[0][0] * np.exp(tve_matrix(SPECS, BETA, [T])[0] @ [x1, x2])
        weights.append(prior * (haz if D else 1.0) * np.exp(-cum))
    return weights[1] / sum(weights)


def sample_fixture(draws, rng, binary=True):
    T = np.repeat([r[0] for r in FIXTURE], draws)
    D = np.repeat([r[1] for r in FIXTURE], draws)
    x2 = np.repeat([r[2] for r in FIXTURE], draws)
    F = tve_matrix(SPECS, BETA, BASELINE.event_times)
    fT = tve_matrix(SPECS, BETA, T)
    batch = _CellBatch(T, D, x2[:, None], F, fT, F[:, 0], BASELINE, "increment", 0)
    Z = np.column_stack([np.ones(T.size), x2])
    vals, hits, clamped = _rejection_sample(batch, CovariateModel("x1", "logistic", GAMMA), Z, rng, 10**6, binary)
    assert hits == 0 and not clamped.any()
    return vals.reshape(len(FIXTURE), draws).mean(axis=1)


def total_variation(draws, seed, binary=True):
    p_hat = sample_fixture(draws, np.random.default_rng(seed), binary)
    p = np.array([enumerated_p1(*r) for r in FIXTURE])
    # TV distance between two Bernoulli laws is |p - q|
    return float(np.max(np.abs(p_hat - p)))


def test_enumeration_oracle_binary_path():
    assert total_variation(10**5, 0) < 0.02


def test_enumeration_oracle_general_path():
    assert total_variation(20000, 1, binary=False) < 0.02


def test_more_draws_tighten_the_distance():
    wins = sum(total_variation(10**5, 100 + s) < total_variation(10**3, 200 + s) for s in range(40))
    assert wins >= 38


def test_acceptance_probability_examples():
    base = BaselineHazard(np.array([1.0]), np.array([np.log(2.0)]))
    specs = (TveSpec(), TveSpec())
    beta = np.zeros(2)
    # no failure time before T
    assert acceptance_probability((0.5, 0), 1.0, [0.0], specs, beta, base) == 1.0
    assert acceptance_probability((2.0, 0), 1.0, [0.0], specs, beta, base) == pytest.approx(0.5)
    # a large early jump paired with an effect that is strongly negative early on
    early = BaselineHazard(np.array([1.0, 2.0]), np.array([5.0, 0.01]))
    tve = (TveSpec.linear(), TveSpec())
    b = np.array([-10.0, 5.0, 0.0])
    assert acceptance_probability((2.0, 1), 1.0, [0.0], tve, b, early, event_hazard="cumulative") == 1.0
    assert acceptance_probability((2.0, 1), 1.0, [0.0], tve, b, early) < 1.0


def test_increment_rule_never_exceeds_one_with_constant_effects():
    # raw value is a * exp(1 - a) with a = dH0(T) exp(lp) <= S, so it stays <= 1
    rng = np.random.default_rng(3)
    specs = (TveSpec(), TveSpec())
    for _ in range(50):
        base = BaselineHazard(np.sort(rng.uniform(0, 5, 4)), rng.exponential(1.0, 4))
        T = base.event_times[rng.integers(0, 4, 30)]
        beta = rng.normal(0, 2, 2)
        x2 = rng.normal(size=(30, 1))
        F = tve_matrix(specs, beta, base.event_times)
        batch = _CellBatch(T, np.ones(30), x2, F, tve_matrix(specs, beta, T), F[:, 0], base, "increment", 0)
        P = rng.normal(0, 2, (30, 5))
        assert batch.log_accept(np.arange(30), P).max() <= 1e-12


def test_constant_effects_reduce_to_the_proportional_hazards_rule():
    beta = np.array([0.7, -0.3])
    specs = (TveSpec(), TveSpec())
    for T, D, x1, x2 in [(2.0, 0, 1.0, 1.0), (3.5, 1, 0.4, 0.0), (5.0, 1, -1.0, 1.0)]:
        lp = beta @ [x1, x2]
        H = float(BASELINE.cumulative(T))
        dH = BASELINE.increment_at(np.array([T]))[0][0]
        expect = np.exp(-H * np.exp(lp)) if D == 0 else min(1.0, dH * np.exp(1 + lp - H * np.exp(lp)))
        got = acceptance_probability((T, D), x1, [x2], specs, beta, BASELINE)
        assert got == pytest.approx(expect, rel=1e-12)


def test_parameter_draws():
    model = cox.CoxTveModel(("a", "b"), (TveSpec(), TveSpec()), np.array([0.3, -0.2]), np.zeros((2, 2)), 0.0)
    np.testing.assert_array_equal(draw_substantive_params(model, np.random.default_rng(0)), model.coefficients)
    rng = np.random.default_rng(1)
    ident = cox.CoxTveModel(("a", "b"), (TveSpec(), TveSpec()), np.zeros(2), np.eye(2), 0.0)
    draws = np.array([draw_substantive_params(ident, rng) for _ in range(100000)])
    assert np.abs(np.cov(draws.T) - np.eye(2)).max() < 0.02
    nearly = np.array([[1.0, 1.0], [1.0, 1.0 - 1e-12]])
    clipped = cox.CoxTveModel(("a", "b"), (TveSpec(), TveSpec()), np.zeros(2), nearly, 0.0)
    assert np.all(np.isfinite(draw_substantive_params(clipped, rng)))
    with pytest.raises(ValueError):
        draw_substantive_params(cox.CoxTveModel(("a",), (TveSpec(),), np.zeros(1), np.eye(2), 0.0), rng)


def test_imputation_keeps_observed_cells_and_is_reproducible(small_cohort):
    _, masked = small_cohort
    spec = TveSpec.rcs(select_knots(masked.event_times(), 3))
    cfg = SmcConfig(m=2, fcs_iterations=3, rng_seed=4)
    a = impute_smc(masked, [spec, TveSpec()], config=cfg)
    b = impute_smc(masked, [spec, TveSpec()], config=cfg)
    obs = ~masked.missing_mask
    for xa, xb in zip(a.completed, b.completed):
        np.testing.assert_array_equal(xa, xb)
        np.testing.assert_array_equal(xa[obs], masked.covariates[obs])
        assert set(np.unique(xa)) <= {0.0, 1.0}
    assert a.diagnostics["event_cells"] > 0
    assert 0.0 <= a.diagnostics["clamp_fraction"] <= 1.0


def test_continuous_covariates_use_linear_proposals(continuous_cohort):
    _, masked = continuous_cohort
    imp = impute_smc(masked, [TveSpec.linear(), TveSpec()], config=SmcConfig(m=2, fcs_iterations=2))
    x = imp.completed[0]
    assert np.all(np.isfinite(x))
    assert len(np.unique(x[masked.missing_mask[:, 0], 0])) == masked.missing_mask[:, 0].sum()


def test_complete_data_gives_identical_copies(small_cohort):
    full, _ = small_cohort
    imp = impute_smc(full, [TveSpec(), TveSpec()], config=SmcConfig(m=2, fcs_iterations=1))
    for x in imp.completed:
        np.testing.assert_array_equal(x, full.covariates)


def test_config_validation():
    with pytest.raises(ValueError):
        SmcConfig(rejection_cap=0)
    with pytest.raises(ValueError):
        SmcConfig(event_hazard="other")
    with pytest.raises(ValueError):
        CovariateModel("x", "poisson")
