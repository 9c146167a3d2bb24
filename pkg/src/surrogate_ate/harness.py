"""Replicated Monte-Carlo experiments and their summaries.

Replication ``rep`` of a scenario with master seed ``seed`` draws its data
from ``SeedSequence(seed, spawn_key=(rep, 0))`` and its folds from
``(rep, 1)``.  Every estimator in the scenario sees the same data and folds,
so comparisons between estimators are paired and nuisance fits are shared.
"""

from __future__ import annotations

import csv
import logging
import math
import subprocess
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .bounds import BoundRequest, BoundSet, compute_bounds
from .crossfit import FitCache, LearnerSet
from .dgp import DgpSpec, Family, TrueNuisances, generate, true_effects
from .estimators import EstimateReport, EstimatorConfig, EstimatorKind, estimate
from .learners import logistic, omit, ridge

log = logging.getLogger(__name__)

MAX_FAILURE_RATE = 0.2
MC_COLUMNS = ("scenario_id", "estimator", "rep", "delta_hat", "variance_hat", "ci_lo", "ci_hi",
              "covered", "n", "n_l")

# which bound each estimator's scaled variance should approach
_ORACLE_BOUND = {
    EstimatorKind.DML_GENERAL: "VStar",
    EstimatorKind.ORACLE_PLUGIN: "VStar",
    EstimatorKind.NO_SURROGATE: "VI",
    EstimatorKind.FULL_DATA_AIPW: "VIV",
    EstimatorKind.DML_DENSITY_RATIO: "VTilde",
    EstimatorKind.DML_MCAR: "VTilde",
}


class ReplicationFailure(RuntimeError):
    """More than the tolerated fraction of replications failed."""


def version_string() -> str:
    from . import __version__
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                              text=True, timeout=5, cwd=Path(__file__).parent)
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass(frozen=True)
class NamedEstimator:
    """An estimator configuration with a display label (e.g. a misspecification cell)."""

    label: str
    config: EstimatorConfig


@dataclass(frozen=True)
class ScenarioConfig:
    spec: DgpSpec
    n: int
    replications: int
    estimators: tuple[NamedEstimator, ...]
    seed: int = 0
    scenario_id: str = "scenario"
    n_workers: int = 1
    bounds_mc_budget: int = 200_000

    def __post_init__(self) -> None:
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.n < 2:
            raise ValueError("n must be >= 2")
        ests = tuple(e if isinstance(e, NamedEstimator) else NamedEstimator(EstimatorKind(e.kind).value, e)
                     for e in self.estimators)
        if not ests:
            raise ValueError("at least one estimator is required")
        labels = [e.label for e in ests]
        if len(set(labels)) != len(labels):
            raise ValueError("estimator labels must be unique")
        for e in ests:
            k = e.config.kind
            if k is EstimatorKind.DML_MCAR and self.spec.family is not Family.MCAR:
                log.warning("DmlMcar on a non-MCAR family: %s", self.spec.family.value)
            if k is EstimatorKind.FULL_DATA_AIPW and not (self.spec.family is Family.MCAR and self.spec.label_prob == 1):
                raise ValueError("FullDataAipw needs a fully labelled design")
        object.__setattr__(self, "estimators", ests)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ScenarioConfig":
        """Parse a JSON-style config; oracle learners get the spec's true nuisances attached."""
        d = dict(d)
        spec = DgpSpec.from_dict(d.pop("spec"))
        n = int(d.pop("n"))
        truth = TrueNuisances(spec, n if spec.family is Family.VANISHING else None)
        ests = []
        for e in d.pop("estimators", [{"kind": EstimatorKind.DML_GENERAL.value}]):
            e = dict(e)
            label = e.pop("label", None)
            cfg = EstimatorConfig.from_dict(e, truth)
            ests.append(NamedEstimator(label or cfg.name, cfg))
        known = {"replications", "seed", "scenario_id", "n_workers", "bounds_mc_budget"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(spec=spec, n=n, estimators=tuple(ests), replications=int(d.pop("replications", 1)), **d)

    def to_dict(self) -> dict[str, Any]:
        return {"scenario_id": self.scenario_id, "spec": self.spec.to_dict(), "n": self.n,
                "replications": self.replications, "seed": self.seed,
                "estimators": [{"label": e.label, **e.config.to_dict()} for e in self.estimators]}


@dataclass(frozen=True)
class RepRecord:
    label: str
    rep: int
    report: EstimateReport | None
    error: str | None = None


@dataclass(frozen=True)
class EstimatorMetrics:
    label: str
    kind: EstimatorKind
    successes: int
    failures: int
    bias: float
    bias_se: float
    scaled_variance: float
    mean_variance_hat: float
    coverage: float
    mean_ci_length: float
    n_eff: float
    oracle_bound: float | None

    def to_dict(self) -> dict[str, Any]:
        return {"label": self.label, "estimator": self.kind.value, "successes": self.successes,
                "failures": self.failures, "bias": self.bias, "bias_se": self.bias_se,
                "scaled_variance": self.scaled_variance, "mean_variance_hat": self.mean_variance_hat,
                "coverage": self.coverage, "mean_ci_length": self.mean_ci_length, "n_eff": self.n_eff,
                "oracle_bound": self.oracle_bound}


@dataclass(frozen=True)
class MetricsReport:
    scenario: ScenarioConfig
    delta_star: float
    metrics: dict[str, EstimatorMetrics]
    records: tuple[RepRecord, ...] = field(repr=False)
    version: str = ""

    def __getitem__(self, label: str) -> EstimatorMetrics:
        return self.metrics[label]

    def estimates(self, label: str) -> np.ndarray:
        """delta_hat per replication (NaN for failures), in replication order."""
        vals = [r.report.delta_hat if r.report else np.nan for r in self.records if r.label == label]
        return np.asarray(vals)

    def to_dict(self) -> dict[str, Any]:
        return {"version": self.version, "config": self.scenario.to_dict(), "delta_star": self.delta_star,
                "metrics": [m.to_dict() for m in self.metrics.values()]}

    def mc_rows(self) -> list[dict[str, Any]]:
        rows = []
        for rec in self.records:
            if rec.report is None:
                continue
            r = rec.report
            rows.append({"scenario_id": self.scenario.scenario_id, "estimator": rec.label, "rep": rec.rep,
                         "delta_hat": r.delta_hat, "variance_hat": r.variance_hat, "ci_lo": r.ci_low,
                         "ci_hi": r.ci_high, "covered": int(r.covers(self.delta_star)), "n": r.n, "n_l": r.n_l})
        return rows

    def write_mc_csv(self, path: str | Path, append: bool = False) -> None:
        write_mc_rows(self.mc_rows(), path, append)


def write_mc_rows(rows: Iterable[dict[str, Any]], path: str | Path, append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with path.open("a" if append else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MC_COLUMNS)
        if new:
            w.writeheader()
        for row in rows:
            w.writerow({k: (format(v, ".17g") if isinstance(v, float) else v) for k, v in row.items()})


def rep_seeds(seed: int, rep: int) -> tuple[np.random.SeedSequence, np.random.SeedSequence]:
    """(data seed, fold seed) for replication ``rep``."""
    return (np.random.SeedSequence(seed, spawn_key=(rep, 0)),
            np.random.SeedSequence(seed, spawn_key=(rep, 1)))


def _run_rep(cfg: ScenarioConfig, rep: int) -> list[RepRecord]:
    data_seed, fold_seed = rep_seeds(cfg.seed, rep)
    ds = generate(cfg.spec, cfg.n, data_seed)
    cache = FitCache()
    out = []
    for est in cfg.estimators:
        try:
            rep_report = estimate(ds, est.config, fold_seed, cache=cache)
            out.append(RepRecord(est.label, rep, rep_report))
        except Exception as exc:  # isolated per replication
            log.warning("rep %d, %s failed: %s", rep, est.label, exc)
            out.append(RepRecord(est.label, rep, None, f"{type(exc).__name__}: {exc}"))
    return out


def _run_chunk(args: tuple[ScenarioConfig, list[int]]) -> list[RepRecord]:
    cfg, reps = args
    return [rec for rep in reps for rec in _run_rep(cfg, rep)]


def _aggregate(est: NamedEstimator, recs: list[RepRecord], delta: float,
               bounds: BoundSet | None) -> EstimatorMetrics:
    ok = [r.report for r in recs if r.report is not None]
    failures = len(recs) - len(ok)
    bound_name = _ORACLE_BOUND.get(est.config.kind)
    oracle = bounds[bound_name].value if bounds is not None and bound_name in bounds else None
    if not ok:
        nan = float("nan")
        return EstimatorMetrics(est.label, est.config.kind, 0, failures, nan, nan, nan, nan, nan, nan, nan, oracle)
    d = np.array([r.delta_hat for r in ok])
    n_eff = float(np.mean([r.n_eff for r in ok]))
    var = float(np.var(d, ddof=1)) if d.size > 1 else float("nan")
    return EstimatorMetrics(
        label=est.label, kind=est.config.kind, successes=len(ok), failures=failures,
        bias=float(d.mean() - delta),
        bias_se=float(d.std(ddof=1) / math.sqrt(d.size)) if d.size > 1 else float("nan"),
        scaled_variance=n_eff * var,
        mean_variance_hat=float(np.mean([r.variance_hat for r in ok])),
        coverage=float(np.mean([r.covers(delta) for r in ok])),
        mean_ci_length=float(np.mean([r.ci_high - r.ci_low for r in ok])),
        n_eff=n_eff, oracle_bound=oracle)


def scenario_bounds(cfg: ScenarioConfig) -> BoundSet:
    n = cfg.n if cfg.spec.family is Family.VANISHING else None
    return compute_bounds(BoundRequest(cfg.spec, mc_budget=cfg.bounds_mc_budget, seed=cfg.seed, n=n))


def run_scenario(cfg: ScenarioConfig, bounds: BoundSet | None = None, with_bounds: bool = True) -> MetricsReport:
    """Run every replication, then aggregate per estimator in replication order."""
    delta, _, _ = true_effects(cfg.spec)
    if cfg.n_workers > 1 and cfg.replications > 1:
        chunks = [list(range(i, cfg.replications, cfg.n_workers)) for i in range(cfg.n_workers)]
        with ProcessPoolExecutor(cfg.n_workers) as pool:
            parts = list(pool.map(_run_chunk, [(cfg, c) for c in chunks]))
        records = sorted((r for p in parts for r in p), key=lambda r: r.rep)
    else:
        records = [rec for rep in range(cfg.replications) for rec in _run_rep(cfg, rep)]
    if bounds is None and with_bounds:
        bounds = scenario_bounds(cfg)
    metrics = {}
    for est in cfg.estimators:
        recs = [r for r in records if r.label == est.label]
        m = _aggregate(est, recs, delta, bounds)
        if m.failures > MAX_FAILURE_RATE * cfg.replications:
            first = next(r.error for r in recs if r.error)
            raise ReplicationFailure(
                f"{est.label}: {m.failures}/{cfg.replications} replications failed; first error: {first}")
        metrics[est.label] = m
    return MetricsReport(cfg, delta, metrics, tuple(records), version_string())


# ---------------------------------------------------------------------------
# experiment families
# ---------------------------------------------------------------------------

DR_CELLS = ("all_correct", "mu_tilde_wrong", "r_wrong", "mu_wrong", "e_wrong",
            "mu_tilde_and_r_wrong", "mu_and_e_wrong")
# cells outside the double-robustness guarantee
DR_NO_GUARANTEE = ("mu_tilde_and_r_wrong", "mu_and_e_wrong")


def misspecified_learners(base: LearnerSet, cell: str) -> LearnerSet:
    """Feature-omission misspecification: mu_tilde loses s, r and e lose every covariate, mu loses x."""
    wrong = {"mu_tilde": omit(base.mu_tilde, "s"), "r": omit(base.r, "t", "x", "s"),
             "mu": omit(base.mu, "x"), "e": omit(base.e, "x")}
    parts = {
        "all_correct": (), "mu_tilde_wrong": ("mu_tilde",), "r_wrong": ("r",), "mu_wrong": ("mu",),
        "e_wrong": ("e",), "mu_tilde_and_r_wrong": ("mu_tilde", "r"), "mu_and_e_wrong": ("mu", "e"),
    }[cell]
    return replace(base, **{p: wrong[p] for p in parts})


def misspecification_matrix(base: ScenarioConfig, cells: Iterable[str] = DR_CELLS) -> MetricsReport:
    """DmlGeneral under each misspecification cell, all cells paired on the same data."""
    cfg0 = base.estimators[0].config
    ests = tuple(NamedEstimator(c, replace(cfg0, kind=EstimatorKind.DML_GENERAL,
                                           learners=misspecified_learners(cfg0.learners, c)))
                 for c in cells)
    return run_scenario(replace(base, estimators=ests, scenario_id=f"{base.scenario_id}-dr"))


@dataclass(frozen=True)
class SweepRow:
    n: int
    label: str
    scaled_variance: float
    bound: float | None
    ratio: float | None
    bound_star: float | None
    median_equivalence_gap: float | None
    metrics: EstimatorMetrics
    report: MetricsReport = field(repr=False)

    def to_dict(self) -> dict[str, Any]:
        return {"n": self.n, "estimator": self.label, "scaled_variance": self.scaled_variance,
                "v_tilde": self.bound, "ratio": self.ratio, "v_tilde_star": self.bound_star,
                "median_sqrt_nl_gap": self.median_equivalence_gap}


def regime_sweep(base: ScenarioConfig, n_grid: Iterable[int]) -> list[SweepRow]:
    """Density-ratio (and, when P(R=1) > 0, general) estimators across sample sizes."""
    fam = base.spec.family
    if fam not in (Family.MCAR, Family.VANISHING):
        raise ValueError("regime_sweep needs the MCAR or vanishing-label family")
    cfg0 = base.estimators[0].config
    rows = []
    for n in n_grid:
        ests = [NamedEstimator("DmlDensityRatio", replace(cfg0, kind=EstimatorKind.DML_DENSITY_RATIO))]
        if fam is Family.MCAR:
            ests.append(NamedEstimator("DmlGeneral", replace(cfg0, kind=EstimatorKind.DML_GENERAL)))
        cfg = replace(base, n=n, estimators=tuple(ests), scenario_id=f"{base.scenario_id}-n{n}")
        rep = run_scenario(cfg)
        bounds = scenario_bounds(cfg)
        vt = bounds["VTilde"].value if "VTilde" in bounds else None
        vts = bounds["VTildeStar"].value if "VTildeStar" in bounds else None
        gap = None
        if fam is Family.MCAR:
            lab = [r.report for r in rep.records if r.label == "DmlDensityRatio"]
            gen = [r.report for r in rep.records if r.label == "DmlGeneral"]
            g = [math.sqrt(a.n_l) * abs(a.delta_hat - b.delta_hat) for a, b in zip(lab, gen) if a and b]
            gap = float(np.median(g)) if g else None
        for label, m in rep.metrics.items():
            if label != "DmlDensityRatio":
                continue
            rows.append(SweepRow(n, label, m.scaled_variance, vt, m.scaled_variance / vt if vt else None,
                                 vts, gap, m, rep))
    return rows


@dataclass(frozen=True)
class ZbComparison:
    n: int
    label_rate: float
    scaled_var_our: float
    scaled_var_zb: float
    gap: float
    gap_se: float
    closed_gap: float
    report: MetricsReport

    def to_dict(self) -> dict[str, Any]:
        return {"n": self.n, "label_rate": self.label_rate, "n_var_our": self.scaled_var_our,
                "n_var_zb": self.scaled_var_zb, "gap": self.gap, "gap_se": self.gap_se,
                "closed_gap": self.closed_gap}


def zb_comparison(base: ScenarioConfig, learners: LearnerSet | None = None) -> ZbComparison:
    """Paired replications of full-sample imputation against unlabelled-only imputation.

    Neither estimator uses the surrogate: the surrogate regression omits s and
    so coincides with the covariate-only regression.
    """
    if base.spec.family is not Family.MCAR:
        raise ValueError("zb_comparison needs the MCAR family")
    ls = learners or base.estimators[0].config.learners
    ls = replace(ls, mu_tilde=omit(ls.mu, "s"))
    ests = (NamedEstimator("our", EstimatorConfig(EstimatorKind.DML_MCAR, ls)),
            NamedEstimator("zb", EstimatorConfig(EstimatorKind.ZHANG_BRADIC, ls)))
    rep = run_scenario(replace(base, estimators=ests, scenario_id=f"{base.scenario_id}-zb"))
    a, b = rep.estimates("our"), rep.estimates("zb")
    keep = np.isfinite(a) & np.isfinite(b)
    a, b = a[keep], b[keep]
    n = base.n
    da, db = a - a.mean(), b - b.mean()
    per_rep = n * (db ** 2 - da ** 2)
    bounds = compute_bounds(BoundRequest(base.spec, which=frozenset({"ZbGap"}), mc_budget=base.bounds_mc_budget,
                                         seed=base.seed))
    return ZbComparison(n, float(base.spec.label_prob), float(n * np.var(a, ddof=1)), float(n * np.var(b, ddof=1)),
                        float(per_rep.mean() * a.size / (a.size - 1)), float(per_rep.std(ddof=1) / math.sqrt(a.size)),
                        bounds["ZbGap"].value, rep)


def default_learners() -> LearnerSet:
    return LearnerSet(e=logistic(), r=logistic(), mu_tilde=ridge(), mu=ridge(), lam=logistic())


def oracle_config(spec: DgpSpec, alpha: float = 0.05) -> EstimatorConfig:
    return EstimatorConfig(EstimatorKind.ORACLE_PLUGIN, alpha=alpha, truth=TrueNuisances(spec))


__all__ = [
    "DR_CELLS", "DR_NO_GUARANTEE", "EstimatorMetrics", "MetricsReport", "NamedEstimator", "ReplicationFailure",
    "ScenarioConfig", "SweepRow", "ZbComparison", "default_learners", "misspecification_matrix",
    "misspecified_learners", "oracle_config", "regime_sweep", "run_scenario", "scenario_bounds", "version_string",
    "write_mc_rows", "zb_comparison",
]
