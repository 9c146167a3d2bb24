"""K-fold cross-fitting of the nuisance functions.

For fold k, the treatment propensity, labelling propensity and density ratio
are trained on every unit outside fold k; the outcome regressions are trained
on the labelled units outside fold k.  Units in fold k are evaluated only
under the fold-k fits.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.typing import NDArray

from .data import Dataset, FoldAssignment
from .learners import LearnerSpec, logistic, ridge
from .nuisance import (DEFAULT_C_LAMBDA, DEFAULT_CLIP_EPS, fit_density_ratio, fit_label_propensity,
                       fit_outcome, fit_treatment_propensity)

# e: treatment propensity; r: labelling propensity on (t, x, s); r_tx: on (t, x);
# mu_tilde: E[Y | t, x, s, R=1]; mu: E[Y | t, x]; lam: density ratio
NUISANCES = ("e", "r", "r_tx", "mu_tilde", "mu", "lam")


class CrossFitError(RuntimeError):
    """Fitting failed on a particular fold."""


@dataclass(frozen=True)
class LearnerSet:
    """Learner specification per nuisance function."""

    e: LearnerSpec = field(default_factory=logistic)
    r: LearnerSpec = field(default_factory=logistic)
    mu_tilde: LearnerSpec = field(default_factory=ridge)
    mu: LearnerSpec = field(default_factory=ridge)
    lam: LearnerSpec = field(default_factory=logistic)

    def for_nuisance(self, name: str) -> LearnerSpec:
        return self.r if name == "r_tx" else getattr(self, name)

    def to_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k).to_dict() for k in ("e", "r", "mu_tilde", "mu", "lam")}

    @classmethod
    def from_dict(cls, d: dict[str, Any], truth: Any = None) -> "LearnerSet":
        return cls(**{k: LearnerSpec.from_dict(v, truth) for k, v in d.items()})

    @classmethod
    def oracle(cls, truth: Any) -> "LearnerSet":
        o = LearnerSpec(kind="Oracle", truth=truth)
        return cls(e=o, r=o, mu_tilde=o, mu=o, lam=o)


@dataclass(frozen=True)
class CrossFitPlan:
    folds: FoldAssignment
    learners: LearnerSet
    required: frozenset[str]
    clip_eps: float = DEFAULT_CLIP_EPS
    c_lambda: float = DEFAULT_C_LAMBDA
    pooled: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "required", frozenset(self.required))
        unknown = self.required - set(NUISANCES)
        if unknown:
            raise ValueError(f"unknown nuisances {sorted(unknown)}")
        for name in self.required:
            if self.learners.for_nuisance(name) is None:
                raise ValueError(f"no learner given for required nuisance {name!r}")
        if not 0 < self.clip_eps < 0.5:
            raise ValueError("clip_eps must lie in (0, 0.5)")
        if not self.c_lambda > 0:
            raise ValueError("c_lambda must be positive")


@dataclass(frozen=True)
class FoldFit:
    fold: int
    train_idx: NDArray
    handles: dict[str, Any]


@dataclass(frozen=True)
class OutOfFold:
    """Per-unit nuisance evaluations, each unit under its own fold's fits.

    ``r`` and ``r_tx`` are evaluated at the unit's observed treatment; the
    outcome regressions at both arms.  Absent nuisances are ``None``.
    """

    e: NDArray | None = None
    r: NDArray | None = None
    r_tx: NDArray | None = None
    mt1: NDArray | None = None
    mt0: NDArray | None = None
    m1: NDArray | None = None
    m0: NDArray | None = None
    lam: NDArray | None = None


class FitCache:
    """Shares fitted nuisances across estimators run on the same dataset and folds."""

    def __init__(self) -> None:
        self._store: dict[tuple, Any] = {}

    def get(self, key: tuple, make: Any) -> Any:
        if key not in self._store:
            self._store[key] = make()
        return self._store[key]

    def __len__(self) -> int:
        return len(self._store)


def _fit_one(ds: Dataset, plan: CrossFitPlan, name: str, train: NDArray) -> Any:
    spec = plan.learners.for_nuisance(name)
    if name == "e":
        return fit_treatment_propensity(ds, train, spec, plan.clip_eps)
    if name in ("r", "r_tx"):
        return fit_label_propensity(ds, train, spec, plan.clip_eps, use_s=name == "r")
    if name == "mu_tilde":
        return fit_outcome(ds, train, spec, use_s=True, pooled=plan.pooled)
    if name == "mu":
        return fit_outcome(ds, train, spec, use_s=False)
    return fit_density_ratio(ds, train, spec, plan.c_lambda, plan.clip_eps)


@dataclass(frozen=True)
class NuisanceFits:
    plan: CrossFitPlan
    fits: tuple[FoldFit, ...]

    def handle(self, name: str, fold: int) -> Any:
        return self.fits[fold].handles[name]

    def check_no_leakage(self) -> bool:
        """True iff no fold's training set contains one of its own units."""
        fo = self.plan.folds.fold_of
        return all(not np.any(fo[f.train_idx] == f.fold) for f in self.fits)

    def evaluate(self, ds: Dataset) -> OutOfFold:
        n = ds.n
        out: dict[str, NDArray] = {}
        names = [nm for nm in NUISANCES if nm in self.plan.required]
        keys = {"e": ["e"], "r": ["r"], "r_tx": ["r_tx"], "mu_tilde": ["mt1", "mt0"],
                "mu": ["m1", "m0"], "lam": ["lam"]}
        for nm in names:
            for key in keys[nm]:
                out[key] = np.empty(n)
        for f in self.fits:
            idx = self.plan.folds.members(f.fold)
            x, s, t = ds.x[idx], ds.s[idx], ds.t[idx]
            h = f.handles
            if "e" in h:
                out["e"][idx] = h["e"](x)
            if "r" in h:
                out["r"][idx] = h["r"](t, x, s)
            if "r_tx" in h:
                out["r_tx"][idx] = h["r_tx"](t, x, s)
            if "mu_tilde" in h:
                out["mt1"][idx] = h["mu_tilde"](1, x, s)
                out["mt0"][idx] = h["mu_tilde"](0, x, s)
            if "mu" in h:
                out["m1"][idx] = h["mu"](1, x)
                out["m0"][idx] = h["mu"](0, x)
            if "lam" in h:
                out["lam"][idx] = h["lam"](x)
        return OutOfFold(**out)


def cross_fit(ds: Dataset, plan: CrossFitPlan, cache: FitCache | None = None,
              n_jobs: int = 1) -> NuisanceFits:
    """Train every required nuisance on each fold's complement."""
    if plan.folds.fold_of.shape[0] != ds.n:
        raise ValueError("fold assignment does not match dataset size")
    names = [nm for nm in NUISANCES if nm in plan.required]

    def fit_fold(k: int) -> FoldFit:
        train = plan.folds.complement(k)
        handles = {}
        for nm in names:
            spec = plan.learners.for_nuisance(nm)
            key = (nm, spec.key, id(spec.truth), k, plan.folds.seed, plan.clip_eps, plan.c_lambda,
                   plan.pooled and nm == "mu_tilde")
            try:
                make = lambda nm=nm: _fit_one(ds, plan, nm, train)  # noqa: E731
                handles[nm] = cache.get(key, make) if cache is not None else make()
            except Exception as exc:
                raise CrossFitError(f"fold {k}: fitting {nm} failed: {exc}") from exc
        return FoldFit(k, train, handles)

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            fits = tuple(pool.map(fit_fold, range(plan.folds.k)))
    else:
        fits = tuple(fit_fold(k) for k in range(plan.folds.k))
    return NuisanceFits(plan, fits)
