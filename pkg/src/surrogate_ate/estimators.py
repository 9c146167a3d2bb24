"""Influence functions, point estimators, variance estimates and confidence intervals.

Every estimator is the sample mean of the delta-free part of an influence
function,

    phi = mu(1,X) - mu(0,X) + T/e (mu_t(1,X,S) - mu(1,X)) - (1-T)/(1-e) (mu_t(0,X,S) - mu(0,X))
          + R [ T q/e (Y - mu_t(1,X,S)) - (1-T) q/(1-e) (Y - mu_t(0,X,S)) ]

with q = 1/r for the labelling-propensity form and q = lambda/r_N for the
density-ratio form.  Unlabelled units never touch Y.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np
from numpy.typing import NDArray

from .crossfit import CrossFitPlan, FitCache, LearnerSet, NuisanceFits, OutOfFold, cross_fit
from .data import Dataset, Observation, dataset_split_counts, make_folds
from .nuisance import DEFAULT_C_LAMBDA, DEFAULT_CLIP_EPS


class EstimationError(ValueError):
    """Estimator requirements violated or a non-finite intermediate encountered."""


class EstimatorKind(str, Enum):
    DML_GENERAL = "DmlGeneral"
    DML_DENSITY_RATIO = "DmlDensityRatio"
    DML_MCAR = "DmlMcar"
    NO_SURROGATE = "NoSurrogateBaseline"
    FULL_DATA_AIPW = "FullDataAipw"
    ZHANG_BRADIC = "ZhangBradic"
    ORACLE_PLUGIN = "OraclePlugin"


class Scale(str, Enum):
    SQRT_N = "SqrtN"
    SQRT_NL = "SqrtNl"


class InfluenceKind(str, Enum):
    PSI_GENERAL = "PsiGeneral"
    PSI_SETTING_I = "PsiSettingI"
    PSI_SETTING_II = "PsiSettingII"
    PSI_SETTING_III = "PsiSettingIII"
    PSI_SETTING_IV = "PsiSettingIV"
    PSI_TILDE = "PsiTildeLabelled"
    PSI_POOLED = "PsiPooledSurrogate"


# nuisance values each influence function reads
INFLUENCE_NUISANCES: dict[InfluenceKind, frozenset[str]] = {
    InfluenceKind.PSI_GENERAL: frozenset({"e", "r1", "r0", "mt1", "mt0", "m1", "m0"}),
    InfluenceKind.PSI_SETTING_I: frozenset({"e", "r1", "r0", "m1", "m0"}),
    InfluenceKind.PSI_SETTING_II: frozenset({"e", "r1", "r0", "m1", "m0"}),
    InfluenceKind.PSI_SETTING_III: frozenset({"e", "r1", "r0", "mt1", "mt0", "m1", "m0"}),
    InfluenceKind.PSI_SETTING_IV: frozenset({"e", "m1", "m0"}),
    InfluenceKind.PSI_TILDE: frozenset({"e", "lam", "mt1", "mt0"}),
    InfluenceKind.PSI_POOLED: frozenset({"e", "r1", "r0", "mt1", "m1", "m0"}),
}

# cross-fitted nuisances each estimator needs
ESTIMATOR_NUISANCES: dict[EstimatorKind, frozenset[str]] = {
    EstimatorKind.DML_GENERAL: frozenset({"e", "r", "mu_tilde", "mu"}),
    EstimatorKind.DML_DENSITY_RATIO: frozenset({"e", "lam", "mu_tilde", "mu"}),
    EstimatorKind.DML_MCAR: frozenset({"e", "mu_tilde", "mu"}),
    EstimatorKind.NO_SURROGATE: frozenset({"e", "r_tx", "mu"}),
    EstimatorKind.FULL_DATA_AIPW: frozenset({"e", "mu"}),
    EstimatorKind.ZHANG_BRADIC: frozenset({"e", "mu"}),
    EstimatorKind.ORACLE_PLUGIN: frozenset(),
}


# ---------------------------------------------------------------------------
# normal quantile
# ---------------------------------------------------------------------------

_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)


def normal_quantile(p: float) -> float:
    """Standard normal quantile by Acklam's rational approximation plus one Halley step."""
    if not 0 < p < 1:
        raise ValueError("probability must lie in (0, 1)")
    lo = 0.02425
    if p < lo:
        q = math.sqrt(-2 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    elif p <= 1 - lo:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
            (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1)
    else:
        q = math.sqrt(-2 * math.log1p(-p))
        x = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    # refine against the exact cdf
    err = 0.5 * math.erfc(-x / math.sqrt(2)) - p
    u = err * math.sqrt(2 * math.pi) * math.exp(x * x / 2)
    return x - u / (1 + x * u / 2)


# ---------------------------------------------------------------------------
# influence functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NuisanceValues:
    """Nuisance evaluations at one unit (or arrays over units).

    ``r1``/``r0`` are the labelling propensity at t=1/0 for the unit's (x, s).
    """

    e: Any
    r1: Any = 1.0
    r0: Any = 1.0
    mt1: Any = 0.0
    mt0: Any = 0.0
    m1: Any = 0.0
    m0: Any = 0.0
    lam: Any = 1.0


def _base_term(t: NDArray, e: NDArray, mt1: NDArray, mt0: NDArray, m1: NDArray, m0: NDArray) -> NDArray:
    return (m1 - m0) + t / e * (mt1 - m1) - (1 - t) / (1 - e) * (mt0 - m0)


def _residual_term(t: NDArray, q: NDArray, e: NDArray, y: NDArray, mt1: NDArray, mt0: NDArray) -> NDArray:
    return t * q / e * (y - mt1) - (1 - t) * q / (1 - e) * (y - mt0)


def delta_free_terms(t: NDArray, r: NDArray, y: NDArray, e: NDArray, q: NDArray,
                     mt1: NDArray, mt0: NDArray, m1: NDArray, m0: NDArray) -> tuple[NDArray, NDArray]:
    """``(base, correction)`` with correction zero wherever r = 0.

    ``y`` may hold anything at unlabelled units; it is only read where r = 1.
    """
    t = np.asarray(t, dtype=float)
    r = np.asarray(r)
    n = t.shape[0]
    bc = lambda a: np.broadcast_to(np.asarray(a, dtype=float), (n,))  # noqa: E731
    e, q, mt1, mt0, m1, m0 = map(bc, (e, q, mt1, mt0, m1, m0))
    base = _base_term(t, e, mt1, mt0, m1, m0)
    corr = np.zeros(n)
    lab = np.flatnonzero(r == 1)
    y_lab = np.asarray(y, dtype=float)[lab]
    if np.isnan(y_lab).any():
        raise EstimationError(f"labelled unit {lab[np.isnan(y_lab)][0]} has no outcome")
    corr[lab] = _residual_term(t[lab], q[lab], e[lab], y_lab, mt1[lab], mt0[lab])
    return base, corr


def _obs_scalar(w: Observation) -> tuple[NDArray, NDArray, NDArray]:
    if w.r == 1 and w.y is None:
        raise EstimationError("r=1 but y absent")
    y = np.array([w.y if w.r == 1 else np.nan])
    return np.array([w.t], dtype=float), np.array([w.r]), y


def eval_psi_general(w: Observation, delta: float, eta: NuisanceValues) -> float:
    """Efficient influence function with r(t, x, s) evaluated at ``w``."""
    t, r, y = _obs_scalar(w)
    r_obs = eta.r1 if w.t == 1 else eta.r0
    base, corr = delta_free_terms(t, r, y, eta.e, 1.0 / r_obs, eta.mt1, eta.mt0, eta.m1, eta.m0)
    return float(base[0] + corr[0] - delta)


def eval_psi_setting(kind: InfluenceKind, w: Observation, delta: float, eta: NuisanceValues) -> float:
    """Influence function of one of the four information settings, or the pooled variant.

    For settings I-III ``eta.r1``/``eta.r0`` are read as r(t, x), not depending on s.
    """
    kind = InfluenceKind(kind)
    if kind is InfluenceKind.PSI_GENERAL:
        return eval_psi_general(w, delta, eta)
    if kind is InfluenceKind.PSI_TILDE:
        return eval_psi_tilde(w, eta)
    t, r, y = _obs_scalar(w)
    r_obs = eta.r1 if w.t == 1 else eta.r0
    if kind in (InfluenceKind.PSI_SETTING_I, InfluenceKind.PSI_SETTING_II):
        args = (eta.e, 1.0 / r_obs, eta.m1, eta.m0, eta.m1, eta.m0)
    elif kind is InfluenceKind.PSI_SETTING_III:
        args = (eta.e, 1.0 / r_obs, eta.mt1, eta.mt0, eta.m1, eta.m0)
    elif kind is InfluenceKind.PSI_SETTING_IV:
        if w.y is None:
            raise EstimationError("setting IV influence function needs an observed outcome")
        r = np.array([1])
        y = np.array([w.y])
        args = (eta.e, 1.0, eta.m1, eta.m0, eta.m1, eta.m0)
    else:  # pooled surrogate regression shared by both arms
        args = (eta.e, 1.0 / r_obs, eta.mt1, eta.mt1, eta.m1, eta.m0)
    base, corr = delta_free_terms(t, r, y, *args)
    return float(base[0] + corr[0] - delta)


def eval_psi_tilde(w: Observation, eta: NuisanceValues) -> float:
    """Labelled-data influence function T lam/e (Y - mu_t(1)) - (1-T) lam/(1-e) (Y - mu_t(0))."""
    if w.r != 1:
        raise EstimationError("ψ̃ defined on labelled units")
    if w.y is None:
        raise EstimationError("r=1 but y absent")
    t = float(w.t)
    return float(_residual_term(np.array([t]), np.array([eta.lam], dtype=float),
                                np.array([eta.e], dtype=float), np.array([w.y]),
                                np.array([eta.mt1], dtype=float), np.array([eta.mt0], dtype=float))[0])


# ---------------------------------------------------------------------------
# reports and configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EstimateReport:
    estimator_tag: EstimatorKind
    delta_hat: float
    variance_hat: float
    scale: Scale
    ci_low: float
    ci_high: float
    alpha: float
    n: int
    n_l: int
    influence_values: NDArray = field(repr=False)

    @property
    def n_eff(self) -> int:
        return self.n if self.scale is Scale.SQRT_N else self.n_l

    @property
    def std_error(self) -> float:
        return math.sqrt(self.variance_hat / self.n_eff)

    def covers(self, value: float) -> bool:
        return self.ci_low <= value <= self.ci_high

    def to_dict(self) -> dict[str, Any]:
        return {"estimator": self.estimator_tag.value, "delta_hat": self.delta_hat,
                "variance_hat": self.variance_hat, "scale": self.scale.value,
                "ci": [self.ci_low, self.ci_high], "alpha": self.alpha, "n": self.n, "n_l": self.n_l}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass(frozen=True)
class EstimatorConfig:
    kind: EstimatorKind = EstimatorKind.DML_GENERAL
    learners: LearnerSet = field(default_factory=LearnerSet)
    k: int = 5
    alpha: float = 0.05
    pooled_outcome_regression: bool = False
    clip_eps: float = DEFAULT_CLIP_EPS
    c_lambda: float = DEFAULT_C_LAMBDA
    truth: Any = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", EstimatorKind(self.kind))
        if not 0 < self.alpha < 1:
            raise EstimationError("alpha must lie in (0, 1)")
        if self.k < 2:
            raise EstimationError("k must be at least 2")
        if self.kind is EstimatorKind.ORACLE_PLUGIN and self.truth is None:
            raise EstimationError("OraclePlugin requires an attached truth")

    @property
    def required(self) -> frozenset[str]:
        return ESTIMATOR_NUISANCES[self.kind]

    @property
    def name(self) -> str:
        return self.kind.value

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind.value, "learners": self.learners.to_dict(), "k": self.k,
                "alpha": self.alpha, "pooled_outcome_regression": self.pooled_outcome_regression,
                "clip_eps": self.clip_eps, "c_lambda": self.c_lambda}

    @classmethod
    def from_dict(cls, d: dict[str, Any], truth: Any = None) -> "EstimatorConfig":
        d = dict(d)
        if "learners" in d:
            d["learners"] = LearnerSet.from_dict(d["learners"], truth)
        kind = EstimatorKind(d.get("kind", EstimatorKind.DML_GENERAL))
        return cls(truth=truth if kind is EstimatorKind.ORACLE_PLUGIN else None, **d)


# ---------------------------------------------------------------------------
# variance and intervals
# ---------------------------------------------------------------------------

def _check_finite(named: dict[str, NDArray]) -> None:
    for name, arr in named.items():
        bad = ~np.isfinite(arr)
        if bad.any():
            raise EstimationError(f"non-finite {name} at unit {int(np.flatnonzero(bad)[0])}")


def variance_and_ci(influence: NDArray, delta_hat: float, alpha: float, n_eff: int,
                    rate: float = 1.0) -> tuple[float, tuple[float, float]]:
    """``V = rate * mean(psi^2)`` and the interval ``delta_hat -/+ z sqrt(V / n_eff)``.

    ``influence`` holds the per-unit psi values (delta already subtracted);
    ``rate`` is N_l/N when the variance refers to the sqrt(N_l) scale.
    """
    if not 0 < alpha < 1:
        raise EstimationError("alpha must lie in (0, 1)")
    v = float(rate * np.mean(np.square(influence)))
    half = normal_quantile(1 - alpha / 2) * math.sqrt(v / n_eff)
    return v, (delta_hat - half, delta_hat + half)


def _report(kind: EstimatorKind, phi: NDArray, scale: Scale, ds: Dataset, alpha: float,
            psi: NDArray | None = None) -> EstimateReport:
    n, n_l, _, rate = dataset_split_counts(ds)
    delta_hat = float(np.mean(phi))
    psi = phi - delta_hat if psi is None else psi
    if scale is Scale.SQRT_N:
        v, (lo, hi) = variance_and_ci(psi, delta_hat, alpha, n)
    else:
        v, (lo, hi) = variance_and_ci(psi, delta_hat, alpha, n_l, rate)
    return EstimateReport(kind, delta_hat, v, scale, lo, hi, alpha, n, n_l, psi)


# ---------------------------------------------------------------------------
# estimation
# ---------------------------------------------------------------------------

def build_plan(ds: Dataset, config: EstimatorConfig, seed: int | np.random.SeedSequence) -> CrossFitPlan:
    folds = make_folds(ds, config.k, seed)
    return CrossFitPlan(folds, config.learners, config.required, config.clip_eps, config.c_lambda,
                        config.pooled_outcome_regression)


def _oracle_values(ds: Dataset, config: EstimatorConfig) -> OutOfFold:
    nuis = getattr(config.truth, "nuisances", config.truth)
    x, t, s = ds.x, ds.t, ds.s
    if config.pooled_outcome_regression:
        mt1 = mt0 = nuis.pooled_mu_tilde(x, s)
    else:
        mt1, mt0 = nuis.mu_tilde(1, x, s), nuis.mu_tilde(0, x, s)
    return OutOfFold(e=nuis.e(x), r=nuis.r(t, x, s), mt1=mt1, mt0=mt0, m1=nuis.mu(1, x), m0=nuis.mu(0, x))


def _validate(ds: Dataset, kind: EstimatorKind) -> None:
    n, n_l, n_u, _ = dataset_split_counts(ds)
    if n_l == 0:
        raise EstimationError("no labelled units")
    if kind is EstimatorKind.ZHANG_BRADIC and n_u == 0:
        raise EstimationError("ZhangBradic requires at least one unlabelled unit")
    if kind is EstimatorKind.FULL_DATA_AIPW and n_u > 0:
        raise EstimationError("FullDataAipw requires a fully labelled dataset")


def estimate(ds: Dataset, config: EstimatorConfig, seed: int | np.random.SeedSequence = 0,
             fits: NuisanceFits | None = None, cache: FitCache | None = None) -> EstimateReport:
    """Run one estimator on ``ds``.

    ``seed`` fixes the fold partition.  Passing ``fits`` (or a shared ``cache``)
    reuses nuisance fits across estimators.
    """
    kind = config.kind
    _validate(ds, kind)
    _, _, _, rate = dataset_split_counts(ds)
    y = ds.y_full()
    if kind is EstimatorKind.ORACLE_PLUGIN:
        v = _oracle_values(ds, config)
        q = 1.0 / v.r
    else:
        if fits is None:
            fits = cross_fit(ds, build_plan(ds, config, seed), cache)
        missing = config.required - fits.plan.required
        if missing:
            raise EstimationError(f"fits lack nuisances {sorted(missing)}")
        v = fits.evaluate(ds)
    t = ds.t.astype(float)

    if kind is EstimatorKind.ORACLE_PLUGIN:
        mt1, mt0, m1, m0 = v.mt1, v.mt0, v.m1, v.m0
    elif kind is EstimatorKind.DML_GENERAL:
        mt1, mt0, m1, m0, q = v.mt1, v.mt0, v.m1, v.m0, 1.0 / v.r
    elif kind is EstimatorKind.DML_DENSITY_RATIO:
        mt1, mt0, m1, m0, q = v.mt1, v.mt0, v.m1, v.m0, v.lam / rate
    elif kind is EstimatorKind.DML_MCAR:
        mt1, mt0, m1, m0, q = v.mt1, v.mt0, v.m1, v.m0, np.full(ds.n, 1.0) / rate
    elif kind is EstimatorKind.NO_SURROGATE:
        mt1, mt0, m1, m0, q = v.m1, v.m0, v.m1, v.m0, 1.0 / v.r_tx
    elif kind is EstimatorKind.FULL_DATA_AIPW:
        mt1, mt0, m1, m0, q = v.m1, v.m0, v.m1, v.m0, np.ones(ds.n)
    else:
        return _zhang_bradic(ds, v, config.alpha)

    _check_finite({"e": v.e, "q": q, "mu_tilde(1)": mt1, "mu_tilde(0)": mt0, "mu(1)": m1, "mu(0)": m0})
    base, corr = delta_free_terms(t, ds.r, y, v.e, q, mt1, mt0, m1, m0)
    _check_finite({"imputation term": base, "residual term": corr})
    phi = base + corr
    scale = Scale.SQRT_NL if kind in (EstimatorKind.DML_DENSITY_RATIO, EstimatorKind.DML_MCAR) else Scale.SQRT_N
    return _report(kind, phi, scale, ds, config.alpha)


def _zhang_bradic(ds: Dataset, v: OutOfFold, alpha: float) -> EstimateReport:
    """Imputation averaged over unlabelled units, residual correction over labelled units."""
    _check_finite({"e": v.e, "mu(1)": v.m1, "mu(0)": v.m0})
    n, n_l, n_u, rate = dataset_split_counts(ds)
    t = ds.t.astype(float)
    r = ds.r
    m = v.m1 - v.m0
    _, g = delta_free_terms(t, r, ds.y_full(), v.e, 1.0, v.m1, v.m0, v.m1, v.m0)
    unl = r == 0
    lab = r == 1
    m_bar = float(np.mean(m[unl]))
    g_bar = float(np.mean(g[lab]))
    delta_hat = m_bar + g_bar
    psi = np.where(unl, (m - m_bar) / (1 - rate), 0.0) + np.where(lab, (g - g_bar) / rate, 0.0)
    # reported on the sqrt(N) scale: N var(delta_ZB) ~ Var(m)/(1-p) + Var(g)/p
    v_hat, (lo, hi) = variance_and_ci(psi, delta_hat, alpha, n)
    return EstimateReport(EstimatorKind.ZHANG_BRADIC, delta_hat, v_hat, Scale.SQRT_N, lo, hi, alpha, n, n_l, psi)
