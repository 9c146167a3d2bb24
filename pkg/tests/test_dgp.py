import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from scipy.special import expit

from surrogate_ate.dgp import (DgpSpec, Family, SpecError, TrueNuisances, generate, identification_estimates, lg1,
                               mcar, simulate, true_effects, truth)

SDR = DgpSpec(family=Family.SURROGATE_DEPENDENT_R, r_coef=(0.5, 0.5, 0.5, 0.7))


class TestSpec:
    def test_lg1_effect(self):
        # tau + gamma * alpha = 1 + 0.5 * 2
        assert true_effects(lg1())[0] == 2.0

    def test_overlap_epsilon(self):
        spec = lg1()
        eps_e = expit(-0.5)
        eps_r = min(expit(1 - 0.5), expit(1 + 0.5 - 0.5))
        assert spec.epsilon_overlap == pytest.approx(min(eps_e, eps_r), rel=1e-15)

    def test_rejects_poor_overlap(self):
        with pytest.raises(SpecError, match="overlap"):
            lg1(e_coef=(0.0, 8.0))

    def test_rejects_vanishing_exponent(self):
        with pytest.raises(SpecError, match="r_N"):
            DgpSpec(family=Family.VANISHING, r_n_exponent=0.5, r_coef=())

    @pytest.mark.parametrize("bad", [{"sigma_nu": 0.0}, {"beta": (1.0, 2.0)}, {"phi": ((1.0, 2.0),)},
                                     {"family": "MCAR", "r_coef": ()}, {"tau": math.nan}])
    def test_invalid_specs_named(self, bad):
        with pytest.raises(SpecError):
            lg1(**bad)

    def test_json_round_trip(self, tmp_path):
        spec = DgpSpec(d_x=2, d_s=2, beta=(1, -1), gamma=(0.5, 0.2), alpha=(1, 2), phi=((0.1, 0.2), (0.3, 0.4)),
                       e_coef=(0, 0.3, -0.3), r_coef=(1, 0, 0.2, 0.2), tau_x=(0.5, 0.0))
        assert DgpSpec.from_json(spec.to_json()) == spec
        spec.to_json(tmp_path / "s.json")
        assert DgpSpec.from_json(tmp_path / "s.json") == spec

    def test_surrogate_flag(self):
        assert lg1(tau=0.0).statistical_surrogate_holds
        assert not lg1().statistical_surrogate_holds

    def test_vanishing_rate(self):
        spec = DgpSpec(family=Family.VANISHING, r_n_exponent=0.3, r_n_scale=2.0, r_coef=())
        assert spec.vanishing_label_rate(10_000) == pytest.approx(2.0 * 10_000 ** -0.3)
        assert spec.vanishing_label_rate(10_000) ** 2 * 10_000 > 1


class TestGenerate:
    def test_deterministic(self):
        assert generate(lg1(), 500, 3).same_as(generate(lg1(), 500, 3))
        assert not generate(lg1(), 500, 3).same_as(generate(lg1(), 500, 4))

    def test_balanced_treatment(self):
        n = 40_000
        ds = generate(lg1(e_coef=(0.0, 0.0)), n, 1)
        assert abs(ds.t.mean() - 0.5) < 3 / math.sqrt(n)

    def test_fully_labelled(self):
        ds = generate(mcar(1.0), 300, 0)
        assert ds.n_labelled == 300

    def test_linear_structure(self):
        # S - alpha T - phi X and Y - mu_tilde are the pure noises
        spec = lg1()
        ds = generate(spec, 50_000, 2)
        nu = ds.s[:, 0] - 2.0 * ds.t - 0.5 * ds.x[:, 0]
        assert abs(nu.std() - 1.0) < 0.02
        lab = ds.labelled
        eps = ds.y - (ds.t[lab] + ds.x[lab, 0] + 0.5 * ds.s[lab, 0])
        assert abs(eps.std() - 1.0) < 0.02
        assert abs(np.corrcoef(eps, ds.s[lab, 0])[0, 1]) < 0.03

    def test_labelling_rates_match_truth(self):
        spec = lg1()
        ds = generate(spec, 100_000, 9)
        nu = TrueNuisances(spec)
        assert abs(ds.r.mean() - nu.label_rate) < 4 * math.sqrt(nu.label_rate * (1 - nu.label_rate) / ds.n)

    def test_ate_by_weighting_full_data(self):
        spec = lg1()
        n = 1_000_000
        d = simulate(spec, n, np.random.default_rng(11))
        e = expit(0.5 * d.x[:, 0])
        a = d.t * d.y / e - (1 - d.t) * d.y / (1 - e)
        se = a.std(ddof=1) / math.sqrt(n)
        assert abs(a.mean() - 2.0) < 3 * se

    def test_difference_of_potential_outcomes(self):
        d = simulate(lg1(), 10_000, np.random.default_rng(0))
        assert_allclose(d.y1 - d.y0, 2.0, atol=1e-12)


class TestTruth:
    def test_closed_form_nuisances(self):
        spec = lg1()
        nu = TrueNuisances(spec)
        x = np.linspace(-1, 1, 11)[:, None]
        s = np.linspace(-2, 2, 11)[:, None]
        assert_allclose(nu.mu_tilde(1, x, s), 1 + x[:, 0] + 0.5 * s[:, 0], rtol=0, atol=1e-14)
        # (tau + gamma alpha) t + (beta + phi gamma) x
        assert_allclose(nu.mu(1, x), 2.0 + 1.25 * x[:, 0], atol=1e-14)
        assert_allclose(nu.mu(0, x), 1.25 * x[:, 0], atol=1e-14)
        assert_allclose(nu.r(1, x), expit(1.5 + 0.5 * x[:, 0]))
        assert_allclose(nu.e(x), expit(0.5 * x[:, 0]))

    def test_density_ratio_closed_form(self):
        spec = lg1(r_coef=(1.0, 0.0, 0.5))
        nu = TrueNuisances(spec)
        z, w = np.polynomial.legendre.leggauss(60)
        p = float(w @ expit(1 + 0.5 * z) / 2)
        x = np.linspace(-1, 1, 7)
        assert_allclose(nu.density_ratio(x), p / expit(1 + 0.5 * x), rtol=1e-12)

    def test_outcome_regression_is_tower_of_surrogate_regression(self):
        # averaging mu_tilde over S | T, X reproduces mu
        spec = lg1()
        nu = TrueNuisances(spec)
        rng = np.random.default_rng(4)
        for x0 in (-0.8, 0.0, 0.6):
            for t in (0, 1):
                x = np.full((200_000, 1), x0)
                s = nu.surrogate_mean(t, x) + rng.standard_normal((200_000, 1))
                vals = nu.mu_tilde(t, x, s)
                assert abs(vals.mean() - nu.mu(t, x[:1])[0]) < 4 * vals.std() / math.sqrt(vals.size)

    def test_mu_labelled_sdr_by_mc(self):
        nu = TrueNuisances(SDR)
        rng = np.random.default_rng(8)
        m = 400_000
        for x0, t in ((0.3, 1), (-0.5, 0)):
            x = np.full((m, 1), x0)
            s = nu.surrogate_mean(t, x) + rng.standard_normal((m, 1))
            y = nu.mu_tilde(t, x, s) + rng.standard_normal(m)
            w = nu.r(t, x, s)
            est = np.sum(w * y) / np.sum(w)
            se = np.std(y) / math.sqrt(m / 1.5)
            assert abs(est - nu.mu_labelled(t, x[:1])[0]) < 4 * se
            assert abs(nu.mu_labelled(t, x[:1])[0] - nu.mu(t, x[:1])[0]) > 0.01

    def test_density_ratio_change_of_measure(self):
        spec = lg1(r_coef=(0.5, 0.0, 1.0))
        nu = TrueNuisances(spec)
        d = simulate(spec, 400_000, np.random.default_rng(5))
        lab = d.r == 1
        lam = nu.density_ratio(d.x[lab])
        for f in (lambda x: x, lambda x: x ** 2, lambda x: x ** 3 - x):
            fl = lam * f(d.x[lab, 0])
            fa = f(d.x[:, 0])
            se = math.hypot(fl.std() / math.sqrt(fl.size), fa.std() / math.sqrt(fa.size))
            assert abs(fl.mean() - fa.mean()) < 4 * se

    @pytest.mark.parametrize("spec", [lg1(), mcar(0.4), lg1(tau_x=(1.5,))], ids=["lg1", "mcar", "heterogeneous"])
    def test_identification_formulas_agree(self, spec):
        est = identification_estimates(spec, 400_000, 13)
        delta = true_effects(spec)[0]
        for v, se in est.values():
            assert abs(v - delta) < 4 * se

    def test_identification_needs_label_condition(self):
        est = identification_estimates(SDR, 400_000, 13)
        v, se = est["full_outcomes"]
        assert abs(v - 2.0) < 4 * se
        v, se = est["labelled_outcomes"]
        assert abs(v - 2.0) > 4 * se

    def test_truth_report(self):
        rep = truth(lg1(), 20_000, 1)
        assert rep.delta_star == rep.xi1_star - rep.xi0_star == 2.0
        assert rep.epsilon_overlap == lg1().epsilon_overlap
        assert "VStar" in rep.bounds
        x = np.array([[0.2]])
        assert_array_equal(rep.mu(1, x), TrueNuisances(lg1()).mu(1, x))

    def test_truth_budget(self):
        with pytest.raises(SpecError, match="insufficient Monte Carlo budget"):
            truth(lg1(), 9_999, 0)

    @settings(max_examples=40, deadline=None)
    @given(tau=st.floats(-3, 3), g=st.floats(-2, 2), a=st.floats(-2, 2), tx=st.floats(-2, 2))
    def test_effect_matches_regression_difference(self, tau, g, a, tx):
        spec = lg1(tau=tau, gamma=(g,), alpha=(a,), tau_x=(tx,))
        nu = TrueNuisances(spec)
        x = np.linspace(-1, 1, 9)
        assert_allclose(nu.effect(x), nu.mu(1, x) - nu.mu(0, x), atol=1e-12)
        assert 0 < spec.epsilon_overlap <= 0.5
