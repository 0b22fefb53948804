"""Acceptance gate: nine criteria, each reported as one PASS/FAIL line.

The Monte Carlo criteria (1-3, 9) run 200 replications each and take a while
on one core; run just this file with ``pytest tests/test_acceptance.py -v``.
"""

import filecmp
from types import SimpleNamespace

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from tvemi import cox, sim
from tvemi.basis import TveSpec, basis_matrix
from tvemi.cli import main
from tvemi.data import breslow_baseline, nelson_aalen
from tvemi.errors import MonotoneLikelihoodError
from tvemi.pool import rubin_pool

from conftest import make_dataset
from test_basis import _local_cubic
from test_cox import _tve_data, naive_loglik
from test_smc import total_variation

pytestmark = pytest.mark.slow

REPS = 200
SEED = 2024


@pytest.fixture
def verdict(capsys):
    def report(number, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return report


def _study(scenario, kind, methods, m=5):
    cfg = sim.ScenarioConfig(scenario_id=scenario, covariate_kind=kind, n_subjects=2000, n_reps=REPS, m=m,
                             methods=methods, base_seed=SEED)
    return sim.run_replication_study(cfg)


@pytest.fixture(scope="module")
def scenario2():
    return _study(2, "binary", ("complete_data", "approx", "tve_approx", "smc", "tve_smc"))


@pytest.fixture(scope="module")
def scenario1_binary():
    return _study(1, "binary", ("complete_data",))


@pytest.fixture(scope="module")
def scenario1_continuous():
    # The chi-square reference ignores between-imputation noise in B; ten imputations keep it near nominal.
    return _study(1, "continuous", ("tve_approx",), m=10)


def _within(value, centre, half):
    return abs(value - centre) <= half


def test_criterion_1_rejection_spot_checks(verdict, scenario1_binary, scenario2):
    r1 = [scenario1_binary.value("complete_data", c, "rejection") for c in ("x1", "x2")]
    cd = scenario2.value("complete_data", "x1", "rejection")
    ta = scenario2.value("tve_approx", "x1", "rejection")
    ap = scenario2.value("approx", "x1", "rejection")
    ok = (all(_within(v, 5, 4) for v in r1) and _within(cd, 89, 7) and _within(ta, 67, 9)
          and _within(ap, 21, 9))
    verdict(1, ok, f"s1 complete x1/x2 {r1[0]:.1f}/{r1[1]:.1f}% (5+-4); s2 complete {cd:.1f}% (89+-7), "
                   f"tve_approx {ta:.1f}% (67+-9), approx {ap:.1f}% (21+-9)")


def test_criterion_2_power_ordering(verdict, scenario2):
    p = {m: scenario2.value(m, "x1", "rejection") for m in ("smc", "tve_smc", "approx", "tve_approx")}
    ok = p["tve_smc"] - p["smc"] >= 10 and p["tve_approx"] - p["approx"] >= 10
    verdict(2, ok, f"tve_smc {p['tve_smc']:.1f} vs smc {p['smc']:.1f}; "
                   f"tve_approx {p['tve_approx']:.1f} vs approx {p['approx']:.1f} (gaps >= 10pp)")


def test_criterion_3_attenuation_at_t9(verdict, scenario2):
    b = {m: abs(scenario2.value(m, "x1", "bias", 9.0)) for m in ("smc", "approx", "tve_smc")}
    ok = b["smc"] >= 3 * b["tve_smc"] and b["approx"] >= 3 * b["tve_smc"]
    verdict(3, ok, f"|bias| at t=9: smc {b['smc']:.3f}, approx {b['approx']:.3f}, "
                   f"tve_smc {b['tve_smc']:.3f} (need >= 3x)")


def test_criterion_4_smc_enumeration_oracle(verdict):
    tv = total_variation(10**5, 0)
    verdict(4, tv < 0.02, f"max TV distance over 6 subjects {tv:.4f} (< 0.02)")


def test_criterion_5_cox_numerics(verdict):
    ds, specs = _tve_data(1)
    rng = np.random.default_rng(5)
    fd_err = 0.0
    for _ in range(20):
        beta = rng.normal(0, 0.3, 5) * np.array([1, 0.3, 0.01, 1, 0.1])
        _, score = cox.log_partial_likelihood(ds, specs, beta)
        for j in range(5):
            h = 1e-6 * max(1.0, abs(beta[j]))
            e = np.zeros(5)
            e[j] = h
            fd = (cox.log_partial_likelihood(ds, specs, beta + e)[0]
                  - cox.log_partial_likelihood(ds, specs, beta - e)[0]) / (2 * h)
            fd_err = max(fd_err, abs(score[j] - fd) / max(abs(fd), 1.0))
    big, big_specs = _tve_data(2, n=150)
    model = cox.fit(big, big_specs)
    mle_score = float(np.max(np.abs(cox.log_partial_likelihood(big, big_specs, model.coefficients)[1])))
    brute_err, checked = 0.0, 0
    for seed in range(30):
        r = np.random.default_rng(1000 + seed)
        n = int(r.integers(4, 11))
        x = r.standard_normal(n)
        time = r.integers(1, 6, n).astype(float)
        event = (r.random(n) < 0.8).astype(int)
        event[0] = 1
        try:
            b = cox.fit(make_dataset(time, event, x), [TveSpec()]).coefficients[0]
        except MonotoneLikelihoodError:
            continue
        best = minimize_scalar(lambda v: -naive_loglik(time, event, x, [TveSpec()], np.array([v])),
                               bounds=(-20, 20), method="bounded", options={"xatol": 1e-9}).x
        brute_err = max(brute_err, abs(b - best))
        checked += 1
    ok = fd_err < 1e-4 and mle_score < 1e-8 and brute_err < 1e-4 and checked >= 20
    verdict(5, ok, f"score vs FD rel err {fd_err:.2e}; |score| at MLE {mle_score:.2e}; "
                   f"brute-force gap {brute_err:.2e} over {checked} instances")


def test_criterion_6_spline_smoothness(verdict):
    rng = np.random.default_rng(6)
    worst_knot, worst_tail = 0.0, 0.0
    for i in range(100):
        L = 3 + i % 3
        knots = np.sort(rng.uniform(0.05, 15.0, L))
        while np.min(np.diff(knots)) < 0.05:
            knots = np.sort(rng.uniform(0.05, 15.0, L))
        spec = TveSpec.rcs(knots)
        h = float(np.min(np.diff(knots))) / 4
        scale = max(1.0, float(np.abs(basis_matrix(spec, [knots[-1] + 1.0])).max()))
        for u in knots:
            left = _local_cubic(spec, u, -h * np.array([0.25, 0.5, 0.75, 1.0]))
            right = _local_cubic(spec, u, h * np.array([0.25, 0.5, 0.75, 1.0]))
            worst_knot = max(worst_knot, float(np.abs(left[:3] - right[:3]).max()) / scale)
        for lo in (knots[-1] + 1e-3, knots[-1] + 25.0, knots[0] / 4):
            offsets = np.array([0.0, 0.5, 1.0, 1.5]) * (1.0 if lo > knots[-1] else knots[0] / 8)
            tail = _local_cubic(spec, lo, offsets)
            worst_tail = max(worst_tail, float(np.abs(2 * tail[2]).max()) / scale)
    ok = worst_knot < 1e-6 and worst_tail <= 1e-6
    verdict(6, ok, f"max scaled jump in value/d1/d2 at knots {worst_knot:.2e}; "
                   f"max |f''| in tails {worst_tail:.2e} (100 knot sets)")


def test_criterion_7_estimator_identities(verdict):
    na = nelson_aalen(np.array([1, 2, 2, 3, 4, 5.0]), np.array([1, 1, 1, 0, 1, 0]))
    hand = np.cumsum([1 / 6, 2 / 5, 1 / 2])
    na_err = float(np.max(np.abs(na.h(np.array([1.0, 2.0, 4.0])) - hand)))
    rng = np.random.default_rng(7)
    time = np.round(rng.exponential(2.0, 300), 1) + 0.1
    ds = make_dataset(time, (rng.random(300) < 0.6).astype(int), rng.standard_normal((300, 2)))
    specs = (TveSpec.linear(), TveSpec())
    bh = breslow_baseline(ds, SimpleNamespace(specs=specs, coefficients=np.zeros(3)), ds.covariates)
    br_err = float(np.max(np.abs(bh.increments - nelson_aalen(ds).h_increments)))
    p = rubin_pool([1.0, 2.0], [[[0.5]], [[0.5]]])
    rubin = (p.qbar[0], p.within[0, 0], p.between[0, 0], p.total[0, 0])
    ok = na_err <= 1e-12 and br_err <= 1e-12 and rubin == (1.5, 0.5, 0.5, 1.25)
    verdict(7, ok, f"Nelson-Aalen err {na_err:.1e}; Breslow(0) - NA {br_err:.1e}; "
                   f"Rubin (Q, W, B, T) = {tuple(float(v) for v in rubin)}")


def test_criterion_8_determinism(verdict, tmp_path):
    cfg = tmp_path / "det.yaml"
    cfg.write_text("scenario:\n  id: 2\n  n_subjects: 500\nstudy:\n  n_reps: 3\n  m: 2\n"
                   "  fcs_iterations: 3\n  workers: 1\n")
    codes = [main(["replicate", "--config", str(cfg), "--seed", "17", "--out-dir", str(tmp_path / d)])
             for d in ("a", "b")]
    same = filecmp.cmp(tmp_path / "a" / "summary.csv", tmp_path / "b" / "summary.csv", shallow=False)
    # exit code 3 only flags recorded per-rep fit failures; both runs must agree on them too
    ok = same and codes[0] == codes[1] and codes[0] in (0, 3)
    verdict(8, ok, f"two runs, seed 17: summary.csv byte-identical={same}, exit codes {codes}")


def test_criterion_9_null_calibration(verdict, scenario1_continuous):
    r = [scenario1_continuous.value("tve_approx", c, "rejection") for c in ("x1", "x2")]
    ok = all(_within(v, 5, 4) for v in r)
    verdict(9, ok, f"s1 continuous tve_approx rejection x1/x2 {r[0]:.1f}/{r[1]:.1f}% (5+-4)")
