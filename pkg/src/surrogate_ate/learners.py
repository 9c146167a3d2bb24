"""Parametric and boosted learners on plain feature matrices.

All fitters take an ``(n, d)`` float matrix and return an immutable model with
a ``predict`` method.  Binary models predict probabilities; clipping is left
to the nuisance layer.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit, log_expit

SEPARATION_NORM = 1e8


class LearnerError(ValueError):
    """A learner could not be fitted."""


class LearnerKind(str, Enum):
    LOGISTIC_IRLS = "LogisticIRLS"
    RIDGE_OLS = "RidgeOLS"
    BOOSTED_STUMPS = "BoostedStumps"
    ORACLE = "Oracle"
    MISSPECIFIED = "DeliberatelyMisspecified"
    # constant equal to the full-sample labelled fraction; labelling propensity only
    LABEL_RATE = "LabelRate"


@dataclass(frozen=True)
class LearnerSpec:
    """Learner choice plus hyperparameters.

    ``omit_features`` (for ``DeliberatelyMisspecified``) holds column indices or
    group names such as ``"x"``, ``"s"``, ``"t"`` or ``"x2"``; names are
    resolved against the feature layout of the nuisance being fitted.
    """

    kind: LearnerKind = LearnerKind.RIDGE_OLS
    ridge: float = 0.0
    rounds: int = 300
    learning_rate: float = 0.1
    stumps_per_round: int = 1
    n_thresholds: int = 32
    max_iter: int = 100
    tol: float = 1e-8
    wrapped: "LearnerSpec | None" = None
    omit_features: tuple[int | str, ...] = ()
    truth: Any = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", LearnerKind(self.kind))
        object.__setattr__(self, "omit_features", tuple(self.omit_features))
        if self.ridge < 0:
            raise LearnerError("ridge penalty must be >= 0")
        if self.rounds < 1 or self.stumps_per_round < 1 or self.n_thresholds < 1:
            raise LearnerError("rounds, stumps_per_round and n_thresholds must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise LearnerError("learning_rate must lie in (0, 1]")
        if self.max_iter < 1 or not self.tol > 0:
            raise LearnerError("max_iter >= 1 and tol > 0 required")
        if self.kind is LearnerKind.MISSPECIFIED:
            if self.wrapped is None:
                raise LearnerError("DeliberatelyMisspecified needs a wrapped learner")
            if self.wrapped.kind is LearnerKind.ORACLE:
                raise LearnerError("cannot omit features from an oracle")
        if self.kind is LearnerKind.ORACLE and self.truth is None:
            raise LearnerError("Oracle learner requires an attached truth")

    @property
    def key(self) -> str:
        """Hashable identity used for caching fitted models."""
        return repr(self.to_dict())

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind.value}
        defaults = LearnerSpec()
        for f in dataclasses.fields(self):
            if f.name in ("kind", "truth", "wrapped", "omit_features"):
                continue
            v = getattr(self, f.name)
            if v != getattr(defaults, f.name):
                d[f.name] = v
        if self.wrapped is not None:
            d["wrapped"] = self.wrapped.to_dict()
        if self.omit_features:
            d["omit_features"] = list(self.omit_features)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any], truth: Any = None) -> "LearnerSpec":
        d = dict(d)
        if "wrapped" in d and d["wrapped"] is not None:
            d["wrapped"] = cls.from_dict(d["wrapped"], truth)
        if LearnerKind(d.get("kind", LearnerKind.RIDGE_OLS)) is LearnerKind.ORACLE:
            d["truth"] = truth
        return cls(**d)


def logistic(**kw: Any) -> LearnerSpec:
    return LearnerSpec(kind=LearnerKind.LOGISTIC_IRLS, **kw)


def ridge(**kw: Any) -> LearnerSpec:
    return LearnerSpec(kind=LearnerKind.RIDGE_OLS, **kw)


def boosted(**kw: Any) -> LearnerSpec:
    return LearnerSpec(kind=LearnerKind.BOOSTED_STUMPS, **kw)


def omit(wrapped: LearnerSpec, *features: int | str) -> LearnerSpec:
    return LearnerSpec(kind=LearnerKind.MISSPECIFIED, wrapped=wrapped, omit_features=features)


# ---------------------------------------------------------------------------
# fitted models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConstantModel:
    value: float

    def predict(self, features: NDArray) -> NDArray:
        return np.full(np.shape(features)[0], self.value)

    def to_dict(self) -> dict[str, Any]:
        return {"type": "constant", "value": self.value}


@dataclass(frozen=True)
class LinearModel:
    intercept: float
    coef: NDArray

    def predict(self, features: NDArray) -> NDArray:
        return self.intercept + np.asarray(features, dtype=float) @ self.coef

    def to_dict(self) -> dict[str, Any]:
        return {"type": "linear", "intercept": self.intercept, "coef": self.coef.tolist()}


@dataclass(frozen=True)
class LogisticModel:
    intercept: float
    coef: NDArray
    objective_history: tuple[float, ...]
    converged: bool

    def decision(self, features: NDArray) -> NDArray:
        return self.intercept + np.asarray(features, dtype=float) @ self.coef

    def predict(self, features: NDArray) -> NDArray:
        return expit(self.decision(features))

    def to_dict(self) -> dict[str, Any]:
        return {"type": "logistic", "intercept": self.intercept, "coef": self.coef.tolist(),
                "iterations": len(self.objective_history) - 1, "converged": self.converged}


@dataclass(frozen=True)
class StumpEnsemble:
    """Sum of shrunken stumps; ``link='logit'`` maps the score through a sigmoid."""

    base: float
    feature: NDArray
    threshold: NDArray
    left: NDArray
    right: NDArray
    link: str = "identity"

    def score(self, features: NDArray) -> NDArray:
        features = np.asarray(features, dtype=float)
        out = np.full(features.shape[0], self.base)
        for j, c, lv, rv in zip(self.feature, self.threshold, self.left, self.right):
            out += np.where(features[:, j] <= c, lv, rv)
        return out

    def predict(self, features: NDArray) -> NDArray:
        s = self.score(features)
        return expit(s) if self.link == "logit" else s

    def to_dict(self) -> dict[str, Any]:
        return {"type": "stumps", "link": self.link, "base": self.base,
                "stumps": [[int(j), float(c), float(lv), float(rv)] for j, c, lv, rv in
                           zip(self.feature, self.threshold, self.left, self.right)]}


class _Projected:
    """Model trained on a subset of columns; drops the rest at prediction time."""

    def __init__(self, inner: Any, keep: NDArray):
        self.inner = inner
        self.keep = keep

    def predict(self, features: NDArray) -> NDArray:
        return self.inner.predict(np.asarray(features, dtype=float)[:, self.keep])

    def to_dict(self) -> dict[str, Any]:
        return {"type": "projected", "keep": self.keep.tolist(), "inner": self.inner.to_dict()}


# ---------------------------------------------------------------------------
# fitters
# ---------------------------------------------------------------------------

def _check(features: NDArray, target: NDArray) -> tuple[NDArray, NDArray]:
    x = np.asarray(features, dtype=float)
    if x.ndim != 2:
        raise LearnerError("features must be a 2-d matrix")
    y = np.asarray(target, dtype=float)
    if y.shape != (x.shape[0],):
        raise LearnerError("target length must match feature rows")
    if x.shape[0] == 0:
        raise LearnerError("cannot fit on zero samples")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise LearnerError("non-finite features or targets")
    return x, y


def _penalized_loglik(eta: NDArray, y: NDArray, beta: NDArray, lam: float) -> float:
    # y log p + (1 - y) log(1 - p) written stably in terms of eta
    ll = float(np.sum(y * log_expit(eta) + (1 - y) * log_expit(-eta)))
    return ll - 0.5 * lam * float(beta[1:] @ beta[1:])


def fit_logistic_irls(features: NDArray, labels: NDArray, ridge: float = 0.0,
                      max_iter: int = 100, tol: float = 1e-8) -> LogisticModel:
    """Penalised logistic regression by Newton-Raphson (IRLS) with step halving.

    The intercept is unpenalised.  Step halving keeps the penalised
    log-likelihood non-decreasing; ``objective_history`` records it per iterate.
    """
    x, y = _check(features, labels)
    n, d = x.shape
    design = np.column_stack([np.ones(n), x])
    pen = np.full(d + 1, ridge)
    pen[0] = 0.0
    ybar = np.clip(y.mean(), 1e-6, 1 - 1e-6)
    beta = np.zeros(d + 1)
    beta[0] = np.log(ybar / (1 - ybar))
    eta = design @ beta
    obj = _penalized_loglik(eta, y, beta, ridge)
    history = [obj]
    converged = False
    for _ in range(max_iter):
        p = expit(eta)
        w = p * (1 - p)
        grad = design.T @ (y - p) - pen * beta
        hess = (design * w[:, None]).T @ design + np.diag(pen)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        t = 1.0
        for _ in range(60):
            cand = beta + t * step
            cand_eta = design @ cand
            cand_obj = _penalized_loglik(cand_eta, y, cand, ridge)
            if cand_obj >= obj - 1e-12 * abs(obj):
                break
            t *= 0.5
        else:
            cand, cand_eta, cand_obj = beta, eta, obj
        change = float(np.max(np.abs(cand - beta)))
        beta, eta = cand, cand_eta
        obj = max(cand_obj, obj)
        history.append(obj)
        if np.linalg.norm(beta) > SEPARATION_NORM:
            raise LearnerError("separation detected, increase ridge penalty")
        if change < tol:
            converged = True
            break
    p = expit(eta)
    margin = np.minimum(p, 1 - p)
    # complete separation: every unit fitted with near certainty
    if (not converged and margin.min() < 1e-10) or margin.max() < 1e-6:
        raise LearnerError("separation detected, increase ridge penalty")
    return LogisticModel(float(beta[0]), beta[1:].copy(), tuple(history), converged)


def fit_ridge(features: NDArray, targets: NDArray, ridge: float = 0.0) -> LinearModel:
    """Ridge regression with an unpenalised intercept (centred closed form)."""
    x, y = _check(features, targets)
    d = x.shape[1]
    ybar = float(y.mean())
    if d == 0:
        return LinearModel(ybar, np.zeros(0))
    xbar = x.mean(axis=0)
    xc = x - xbar
    gram = xc.T @ xc
    if ridge == 0 and np.linalg.matrix_rank(xc) < d:
        raise LearnerError("singular design")
    coef = np.linalg.solve(gram + ridge * np.eye(d), xc.T @ (y - ybar))
    return LinearModel(float(ybar - xbar @ coef), coef)


def _bin_edges(x: NDArray, n_thresholds: int) -> list[NDArray]:
    qs = np.linspace(0, 1, n_thresholds + 2)[1:-1]
    return [np.unique(np.quantile(col, qs)) for col in x.T]


def fit_boosted_stumps(features: NDArray, targets: NDArray, rounds: int = 300,
                       learning_rate: float = 0.1, n_thresholds: int = 32,
                       stumps_per_round: int = 1, loss: str = "squared") -> StumpEnsemble:
    """Gradient boosting of depth-one trees over quantile thresholds.

    ``loss='squared'`` is L2 boosting; ``loss='logistic'`` takes Newton steps on
    the Bernoulli log-likelihood and returns a model on the probability scale.
    """
    x, y = _check(features, targets)
    n, d = x.shape
    if loss == "logistic":
        ybar = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
        base = float(np.log(ybar / (1 - ybar)))
    elif loss == "squared":
        base = float(y.mean())
    else:
        raise LearnerError(f"unknown loss {loss!r}")
    link = "logit" if loss == "logistic" else "identity"
    edges = _bin_edges(x, n_thresholds)
    bins = [np.searchsorted(e, col, side="left") for e, col in zip(edges, x.T)]
    score = np.full(n, base)
    feats, thr, lefts, rights = [], [], [], []
    for _ in range(rounds * stumps_per_round):
        if loss == "logistic":
            p = expit(score)
            g, h = y - p, np.maximum(p * (1 - p), 1e-12)
        else:
            g, h = y - score, np.ones(n)
        best = (0.0, -1, 0.0, 0.0, 0.0)
        for j in range(d):
            nb = edges[j].size + 1
            if nb < 2:
                continue
            gs = np.cumsum(np.bincount(bins[j], weights=g, minlength=nb))
            hs = np.cumsum(np.bincount(bins[j], weights=h, minlength=nb))
            gl, hl = gs[:-1], hs[:-1]
            gr, hr = gs[-1] - gl, hs[-1] - hl
            ok = (hl > 1e-12) & (hr > 1e-12)
            if not ok.any():
                continue
            gain = np.where(ok, gl ** 2 / np.where(ok, hl, 1) + gr ** 2 / np.where(ok, hr, 1), -np.inf)
            b = int(np.argmax(gain))
            if gain[b] > best[0] or best[1] < 0:
                best = (float(gain[b]), j, float(edges[j][b]), gl[b] / hl[b], gr[b] / hr[b])
        _, j, c, lv, rv = best
        if j < 0:
            break
        lv, rv = learning_rate * lv, learning_rate * rv
        score += np.where(x[:, j] <= c, lv, rv)
        feats.append(j)
        thr.append(c)
        lefts.append(lv)
        rights.append(rv)
    return StumpEnsemble(base, np.asarray(feats, dtype=int), np.asarray(thr), np.asarray(lefts),
                         np.asarray(rights), link)


def resolve_omissions(spec: LearnerSpec, names: list[str]) -> tuple[LearnerSpec, NDArray]:
    """Unwrap misspecification layers, returning the base spec and the kept columns."""
    keep = np.ones(len(names), dtype=bool)
    while spec.kind is LearnerKind.MISSPECIFIED:
        for f in spec.omit_features:
            if isinstance(f, (int, np.integer)):
                if not 0 <= f < len(names):
                    raise LearnerError(f"omitted feature index {f} out of range")
                keep[f] = False
            else:
                hit = [i for i, nm in enumerate(names) if nm == f or nm.rstrip("0123456789") == f]
                if not hit:
                    raise LearnerError(f"unknown feature {f!r}; available {names}")
                keep[hit] = False
        spec = spec.wrapped
    return spec, np.flatnonzero(keep)


def _fit_base(spec: LearnerSpec, x: NDArray, y: NDArray, binary: bool) -> Any:
    if spec.kind is LearnerKind.BOOSTED_STUMPS:
        return fit_boosted_stumps(x, y, spec.rounds, spec.learning_rate, spec.n_thresholds,
                                  spec.stumps_per_round, "logistic" if binary else "squared")
    if binary:
        if spec.kind is not LearnerKind.LOGISTIC_IRLS:
            raise LearnerError(f"{spec.kind.value} cannot fit a binary propensity")
        return fit_logistic_irls(x, y, spec.ridge, spec.max_iter, spec.tol)
    if spec.kind is not LearnerKind.RIDGE_OLS:
        raise LearnerError(f"{spec.kind.value} cannot fit a regression")
    return fit_ridge(x, y, spec.ridge)


def fit_matrix(spec: LearnerSpec, features: NDArray, target: NDArray, names: list[str],
               binary: bool) -> Any:
    """Fit ``spec`` on a feature matrix whose columns are labelled by ``names``."""
    x, y = _check(features, target)
    base, keep = resolve_omissions(spec, names)
    if base.kind in (LearnerKind.ORACLE, LearnerKind.LABEL_RATE):
        raise LearnerError(f"{base.kind.value} is not a matrix learner")
    if binary:
        if not np.isin(y, (0.0, 1.0)).all():
            raise LearnerError("binary labels must be 0/1")
        if y.min() == y.max():
            return ConstantModel(float(y[0]))
    inner = _fit_base(base, x[:, keep], y, binary)
    return inner if keep.size == len(names) else _Projected(inner, keep)
