import csv
import math

import numpy as np
import pytest
from numpy.testing import assert_array_equal

import surrogate_ate.harness as harness
from surrogate_ate.dgp import DgpSpec, Family, generate, lg1, mcar
from surrogate_ate.estimators import EstimatorConfig, EstimatorKind, estimate
from surrogate_ate.harness import (DR_CELLS, MC_COLUMNS, NamedEstimator, ReplicationFailure, ScenarioConfig,
                                   misspecification_matrix, regime_sweep, rep_seeds, run_scenario, zb_comparison)

K = EstimatorKind


def scenario(spec=None, n=800, reps=4, kinds=(K.DML_GENERAL,), **kw):
    ests = tuple(NamedEstimator(k.value, EstimatorConfig(k)) for k in kinds)
    kw.setdefault("bounds_mc_budget", 20_000)
    return ScenarioConfig(spec or lg1(), n, reps, ests, **kw)


class TestScenarioConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            scenario(reps=0)
        with pytest.raises(ValueError):
            scenario(kinds=())
        with pytest.raises(ValueError):
            scenario(kinds=(K.FULL_DATA_AIPW,))
        with pytest.raises(ValueError):
            ScenarioConfig(lg1(), 100, 1, (NamedEstimator("a", EstimatorConfig()), NamedEstimator("a", EstimatorConfig())))

    def test_from_dict(self):
        sc = ScenarioConfig.from_dict({"spec": {}, "n": 500, "replications": 3,
                                       "estimators": [{"kind": "OraclePlugin", "label": "oracle"},
                                                      {"kind": "DmlGeneral"}]})
        assert [e.label for e in sc.estimators] == ["oracle", "DmlGeneral"]
        assert sc.estimators[0].config.truth is not None
        with pytest.raises(ValueError):
            ScenarioConfig.from_dict({"spec": {}, "n": 5, "bogus": 1})


class TestRunScenario:
    def test_single_replication_reduces_to_report(self):
        sc = scenario(reps=1, seed=4)
        m = run_scenario(sc, with_bounds=False)["DmlGeneral"]
        data_seed, fold_seed = rep_seeds(4, 0)
        rep = estimate(generate(sc.spec, sc.n, data_seed), EstimatorConfig(), fold_seed)
        assert m.bias == rep.delta_hat - 2.0
        assert m.mean_variance_hat == rep.variance_hat
        assert m.mean_ci_length == rep.ci_high - rep.ci_low
        assert m.coverage == float(rep.covers(2.0))
        assert math.isnan(m.scaled_variance)

    def test_deterministic(self):
        sc = scenario(kinds=(K.DML_GENERAL, K.NO_SURROGATE), seed=9)
        a, b = run_scenario(sc), run_scenario(sc)
        assert a.to_dict() == b.to_dict()
        assert a.mc_rows() == b.mc_rows()

    def test_paired_data_across_estimators(self):
        rep = run_scenario(scenario(kinds=(K.DML_GENERAL, K.DML_DENSITY_RATIO)), with_bounds=False)
        gen = [r.report for r in rep.records if r.label == "DmlGeneral"]
        den = [r.report for r in rep.records if r.label == "DmlDensityRatio"]
        assert [g.n_l for g in gen] == [d.n_l for d in den]

    def test_workers_match_serial(self):
        sc = scenario(reps=4, seed=2)
        a = run_scenario(sc, with_bounds=False)
        b = run_scenario(ScenarioConfig(sc.spec, sc.n, 4, sc.estimators, seed=2, n_workers=2), with_bounds=False)
        assert_array_equal(a.estimates("DmlGeneral"), b.estimates("DmlGeneral"))

    def test_oracle_bound_attached(self):
        rep = run_scenario(scenario(kinds=(K.DML_GENERAL, K.NO_SURROGATE)))
        assert rep["DmlGeneral"].oracle_bound < rep["NoSurrogateBaseline"].oracle_bound

    def test_failures_isolated_and_counted(self, monkeypatch):
        calls = {"n": 0}

        def flaky(ds, config, seed, cache=None):
            calls["n"] += 1
            if calls["n"] % 10 == 0:
                raise RuntimeError("boom")
            return estimate(ds, config, seed, cache=cache)

        sc = scenario(reps=20, seed=1)
        clean = run_scenario(sc, with_bounds=False)
        monkeypatch.setattr(harness, "estimate", flaky)
        rep = run_scenario(sc, with_bounds=False)
        m = rep["DmlGeneral"]
        assert m.failures == 2 and m.successes == 18
        ok = ~np.isnan(rep.estimates("DmlGeneral"))
        assert_array_equal(rep.estimates("DmlGeneral")[ok], clean.estimates("DmlGeneral")[ok])

    def test_too_many_failures(self):
        sc = scenario(spec=mcar(1.0), kinds=(K.ZHANG_BRADIC,), reps=3)
        with pytest.raises(ReplicationFailure, match="3/3"):
            run_scenario(sc, with_bounds=False)

    def test_mc_csv(self, tmp_path):
        rep = run_scenario(scenario(reps=3), with_bounds=False)
        path = tmp_path / "mc.csv"
        rep.write_mc_csv(path)
        rows = list(csv.DictReader(path.open()))
        assert tuple(rows[0]) == MC_COLUMNS
        assert len(rows) == 3
        assert float(rows[1]["delta_hat"]) == rep.estimates("DmlGeneral")[1]

    def test_report_embeds_version_and_config(self):
        d = run_scenario(scenario(reps=1), with_bounds=False).to_dict()
        assert d["version"].startswith("0.1.0")
        assert d["config"]["seed"] == 0 and d["config"]["spec"]["family"] == "LinearGaussianMAR2"


class TestExperiments:
    def test_misspecification_cells(self):
        rep = misspecification_matrix(scenario(n=2000, reps=3))
        assert list(rep.metrics) == list(DR_CELLS)
        assert abs(rep["mu_and_e_wrong"].bias) > 5 * abs(rep["all_correct"].bias)

    def test_regime_sweep_rows(self):
        rows = regime_sweep(scenario(spec=mcar(0.5), reps=3), [500, 1000])
        assert [r.n for r in rows] == [500, 1000]
        assert all(r.bound is not None and r.median_equivalence_gap is not None for r in rows)
        with pytest.raises(ValueError):
            regime_sweep(scenario(), [500])

    def test_zb_comparison_small(self):
        res = zb_comparison(scenario(spec=mcar(0.5, tau_x=(2.0,)), reps=5))
        assert res.closed_gap == pytest.approx(4 / 3, rel=1e-6)
        assert res.gap_se > 0
        with pytest.raises(ValueError):
            zb_comparison(scenario())

    @pytest.mark.slow
    def test_zb_gap_scales_with_label_odds(self):
        from surrogate_ate.bounds import BoundRequest, compute_bounds
        # the per-unit gap term has variance of order 1/p, hence the larger budget at small p
        budget = {0.5: 1_000_000, 0.05: 10_000_000}
        gap = {p: compute_bounds(BoundRequest(mcar(p, tau_x=(2.0,)), which=frozenset({"ZbGap"}),
                                              mc_budget=budget[p], seed=1))["ZbGap"].mc for p in budget}
        ratio = gap[0.05] / gap[0.5]
        assert abs(ratio / (0.05 / 0.95) - 1) < 0.5, ratio

    @pytest.mark.slow
    def test_zb_gap_small_label_rate(self):
        res = zb_comparison(scenario(spec=mcar(0.05, tau_x=(2.0,)), n=20_000, reps=300, seed=3))
        assert abs(res.gap - res.closed_gap) < 4 * res.gap_se

    @pytest.mark.slow
    def test_vanishing_regime_tracks_labelled_bound(self):
        spec = DgpSpec(family=Family.VANISHING, r_n_exponent=0.3, r_n_scale=1.0, r_coef=())
        rows = regime_sweep(scenario(spec=spec, reps=200, seed=5, bounds_mc_budget=200_000), [8000, 32000])
        last = rows[-1]
        assert 0.7 <= last.scaled_variance / last.bound_star <= 1.3, last.to_dict()

    @pytest.mark.slow
    def test_equivalence_gap_shrinks(self):
        rows = regime_sweep(scenario(spec=mcar(0.5), reps=100, seed=6), [1000, 4000, 16000])
        gaps = [r.median_equivalence_gap for r in rows]
        assert gaps[-1] < gaps[0], gaps
