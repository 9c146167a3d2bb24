import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from surrogate_ate.bounds import BoundError, BoundRequest, available_bounds, compute_bounds
from surrogate_ate.dgp import DgpSpec, Family, SpecError, lg1, mcar

SDR = DgpSpec(family=Family.SURROGATE_DEPENDENT_R, r_coef=(0.5, 0.5, 0.5, 0.7))
VANISH = DgpSpec(family=Family.VANISHING, r_n_exponent=0.3, r_n_scale=1.0, r_coef=())


def bounds(spec, mc=100_000, seed=0, **kw):
    return compute_bounds(BoundRequest(spec, mc_budget=mc, seed=seed, **kw))


def se2(a, b):
    return math.hypot(a.se, b.se)


def lg1_vstar_by_quadrature():
    """Independent one-dimensional quadrature of the closed-form V* for LG1."""
    z, w = np.polynomial.legendre.leggauss(200)
    w = w / 2
    e = expit(0.5 * z)
    r1, r0 = expit(1.5 + 0.5 * z), expit(1 + 0.5 * z)
    vg, ve = 0.25, 1.0
    return float(w @ (vg * (1 / e + 1 / (1 - e)) + ve * (1 / (e * r1) + 1 / ((1 - e) * r0))))


class TestClosedForms:
    def test_vstar_matches_independent_quadrature(self):
        b = bounds(lg1(), mc=200_000)
        assert b["VStar"].closed == pytest.approx(lg1_vstar_by_quadrature(), rel=1e-9)
        assert abs(b["VStar"].mc - b["VStar"].closed) < 4 * b["VStar"].mc_se

    def test_ordering_and_additivity(self):
        b = bounds(lg1(), mc=200_000)
        vi, viii, viv = b["VI"], b["VIII"], b["VIV"]
        assert b["VI"].value == b["VII"].value
        assert viv.value <= viii.value <= vi.value
        assert viv.mc <= viii.mc + 3 * se2(viv, viii) and viii.mc <= vi.mc + 3 * se2(viii, vi)
        total = b["GainI_III"].mc + b["GapIII_IV"].mc
        assert total == pytest.approx(vi.mc - viv.mc, rel=1e-9)

    def test_no_surrogate_signal_gives_zero_gain(self):
        b = bounds(lg1(gamma=(0.0,)), mc=20_000)
        assert b["GainI_III"].closed == 0.0
        assert b["GainI_III"].mc == 0.0

    def test_noiseless_outcome_gives_zero_gap(self):
        b = bounds(lg1(sigma_eps=0.0), mc=20_000)
        assert b["GapIII_IV"].closed == 0.0
        assert b["GapIII_IV"].mc == 0.0

    def test_vx_zero_for_homogeneous_effect(self):
        assert bounds(lg1(), mc=20_000)["VX"].mc == 0.0

    def test_vx_heterogeneous(self):
        # Var(tau_x X) with X ~ U(-1, 1)
        b = bounds(lg1(tau_x=(1.5,)), mc=20_000)
        assert b["VX"].closed == pytest.approx(1.5 ** 2 / 3, rel=1e-6)


class TestLabelRegimes:
    def test_vtilde_continuity_at_zero_rate(self):
        b = bounds(VANISH, mc=20_000)
        assert b.label_rate == 0.0
        assert b["VTilde"].closed == b["VTildeStar"].closed
        assert b["VTilde"].mc == b["VTildeStar"].mc
        m = bounds(mcar(0.5), mc=20_000)
        assert m.v_tilde(0.0) == m["VTildeStar"].closed

    def test_vtilde_interpolates(self):
        b = bounds(mcar(0.5, tau_x=(1.0,)), mc=100_000)
        expect = b["VTildeStar"].closed + 0.5 * (b["VX"].closed + b["VS"].closed)
        assert b["VTilde"].closed == pytest.approx(expect, rel=1e-12)
        assert abs(b["VTilde"].mc - expect) < 4 * b["VTilde"].mc_se

    def test_mcar_trio_identities(self):
        p = 0.3
        b = bounds(mcar(p, tau_x=(1.0,)), mc=200_000)
        vs, vx = b["VS"].mc, b["VX"].mc
        g23 = b["Gain_ii_iii"]
        assert abs(g23.mc - p * (vs + vx)) < 4 * g23.mc_se
        g12 = b["Gain_i_ii"]
        assert abs(g12.mc - (1 - p) * (vs + vx)) < 4 * g12.mc_se
        assert b["V_iii"].value <= b["V_ii"].value <= b["V_i"].value

    def test_zb_gap_formula(self):
        p = 0.5
        b = bounds(mcar(p, tau_x=(2.0,)), mc=200_000)
        gap = b["ZbGap"]
        assert abs(gap.mc - p / (1 - p) * b["VX"].mc) < 4 * gap.mc_se
        assert gap.closed == pytest.approx(4 / 3, rel=1e-6)

    def test_zb_gap_zero_for_homogeneous_effect(self):
        b = bounds(mcar(0.5), mc=20_000)
        assert b["ZbGap"].mc == 0.0 and b["ZbGap"].closed == 0.0


class TestSurrogateCondition:
    def test_pooled_regression_neutral_when_no_direct_effect(self):
        b = bounds(lg1(tau=0.0), mc=100_000)
        assert abs(b["VStarPooled"].mc - b["VStar"].mc) <= 3 * se2(b["VStarPooled"], b["VStar"])

    def test_pooled_regression_costs_with_direct_effect(self):
        b = bounds(lg1(tau=1.0), mc=200_000)
        d = b["PooledMinusPerArm"]
        assert d.mc > 3 * d.mc_se


class TestRequests:
    def test_budget(self):
        with pytest.raises(SpecError, match="insufficient Monte Carlo budget"):
            BoundRequest(lg1(), mc_budget=100)

    def test_unavailable(self):
        assert "VI" not in available_bounds(SDR)
        with pytest.raises(BoundError, match="not defined"):
            bounds(SDR, which=frozenset({"VI"}), mc=20_000)

    def test_unknown_id(self):
        with pytest.raises(ValueError):
            BoundRequest(lg1(), which=frozenset({"Nope"}))

    def test_deterministic_and_threaded(self):
        a = bounds(lg1(), mc=150_000, seed=3)
        b = compute_bounds(BoundRequest(lg1(), mc_budget=150_000, seed=3, n_threads=3))
        assert a.to_dict() == b.to_dict()

    def test_general_extension_reported(self):
        b = bounds(SDR, mc=50_000)
        v = b["GeneralExtension"]
        assert v.mc > 0 and v.closed is not None

    def test_self_test_passes_on_every_family(self):
        for spec in (lg1(), mcar(0.7), SDR, VANISH, lg1(r_coef=(1.0, 0.0, 0.5))):
            compute_bounds(BoundRequest(spec, mc_budget=50_000, seed=2))

    @settings(max_examples=15, deadline=None)
    @given(g=st.floats(-1.5, 1.5), se=st.floats(0.0, 2.0), ct=st.floats(-1, 1), cx=st.floats(-1, 1))
    def test_ordering_property(self, g, se, ct, cx):
        spec = lg1(gamma=(g,), sigma_eps=se, r_coef=(1.0, ct, cx))
        b = compute_bounds(BoundRequest(spec, which=frozenset({"VI"}), mc_budget=10_000, seed=1, self_test=False))
        assert b["VIV"].closed <= b["VIII"].closed + 1e-12 <= b["VI"].closed + 2e-12
        assert b["GainI_III"].closed >= 0 and b["GapIII_IV"].closed >= 0
