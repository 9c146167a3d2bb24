"""Fitted and oracle nuisance functions e, r, mu_tilde, mu and lambda.

Feature layouts are fixed: e and lambda see ``x``; r sees ``(t, x, s)`` (or
``(t, x)`` for the no-surrogate variant); mu_tilde sees ``(x, s)`` per arm or
pooled; mu sees ``x`` per arm.  Every handle evaluates on column arrays
``t`` (n,), ``x`` (n, d_x) and ``s`` (n, d_s).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.typing import NDArray

from .data import Dataset, dataset_split_counts
from .learners import ConstantModel, LearnerError, LearnerKind, LearnerSpec, fit_matrix, resolve_omissions

DEFAULT_CLIP_EPS = 0.01
DEFAULT_C_LAMBDA = 50.0


class NuisanceError(ValueError):
    """A nuisance function could not be fitted."""


def x_names(d_x: int) -> list[str]:
    return [f"x{j + 1}" for j in range(d_x)]


def s_names(d_s: int) -> list[str]:
    return [f"s{j + 1}" for j in range(d_s)]


def _oracle(spec: LearnerSpec) -> Any:
    truth = spec.truth
    # accept a TruthReport or a bare TrueNuisances
    return getattr(truth, "nuisances", truth)


def _is_oracle(spec: LearnerSpec) -> bool:
    return spec.kind is LearnerKind.ORACLE


# ---------------------------------------------------------------------------
# handles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PropensityHandle:
    """Treatment propensity x -> [lo, hi]."""

    model: Any
    lo: float
    hi: float
    oracle: Any = None

    def __call__(self, x: NDArray) -> NDArray:
        raw = self.oracle.e(x) if self.oracle is not None else self.model.predict(x)
        return np.clip(raw, self.lo, self.hi)


@dataclass(frozen=True)
class LabelPropensityHandle:
    """Labelling propensity (t, x, s) -> [lo, 1]."""

    model: Any
    lo: float
    use_s: bool = True
    oracle: Any = None

    def __call__(self, t: NDArray, x: NDArray, s: NDArray) -> NDArray:
        if self.oracle is not None:
            raw = self.oracle.r(t, x, s) if self.use_s else self.oracle.r_given_tx(t, x)
        else:
            cols = [np.asarray(t, dtype=float)[:, None], x] + ([s] if self.use_s else [])
            raw = self.model.predict(np.column_stack(cols))
        return np.clip(raw, self.lo, 1.0)


@dataclass(frozen=True)
class OutcomeHandle:
    """Outcome regression per arm; ``models[t]`` fitted on arm t, or one pooled model.

    ``use_s=False`` gives mu(t, x); otherwise mu_tilde(t, x, s).
    """

    models: tuple[Any, Any] | None
    use_s: bool
    pooled: bool = False
    oracle: Any = None
    labelled_mu: bool = False

    def __call__(self, t: int, x: NDArray, s: NDArray | None = None) -> NDArray:
        if self.oracle is not None:
            if not self.use_s:
                return self.oracle.mu_labelled(t, x) if self.labelled_mu else self.oracle.mu(t, x)
            if self.pooled:
                return self.oracle.pooled_mu_tilde(x, s)
            return self.oracle.mu_tilde(t, x, s)
        feats = np.column_stack([x, s]) if self.use_s else np.asarray(x, dtype=float)
        model = self.models[0] if self.pooled else self.models[t]
        return model.predict(feats)


@dataclass(frozen=True)
class DensityRatioHandle:
    """lambda(x) = clip(rate / q(x), 0, c_lambda) with q(x) ~ P(R=1 | x)."""

    model: Any
    rate: float
    lo: float
    c_lambda: float
    oracle: Any = None

    def __call__(self, x: NDArray) -> NDArray:
        if self.oracle is not None:
            return np.clip(self.oracle.density_ratio(x), 0.0, self.c_lambda)
        q = np.clip(self.model.predict(x), self.lo, 1.0)
        return np.clip(self.rate / q, 0.0, self.c_lambda)


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def _binary(spec: LearnerSpec, features: NDArray, labels: NDArray, names: list[str]) -> Any:
    base, _ = resolve_omissions(spec, names)
    if base.kind is LearnerKind.LABEL_RATE:
        raise NuisanceError("LabelRate is only valid for the labelling propensity")
    return fit_matrix(spec, features, labels, names, binary=True)


def fit_binary_propensity(features: NDArray, labels: NDArray, spec: LearnerSpec,
                          clip_eps: float = DEFAULT_CLIP_EPS, upper: float | None = None,
                          names: list[str] | None = None) -> PropensityHandle:
    """Fit P(label=1 | features), clipped to ``[clip_eps, upper]``.

    ``upper`` defaults to ``1 - clip_eps``.  A single observed class yields the
    constant function at that class, clipped.
    """
    features = np.asarray(features, dtype=float)
    if features.ndim != 2:
        raise NuisanceError("features must be a 2-d matrix")
    names = names or [f"f{j}" for j in range(features.shape[1])]
    model = _binary(spec, features, labels, names)
    return PropensityHandle(model, clip_eps, 1 - clip_eps if upper is None else upper)


def fit_regression(features: NDArray, targets: NDArray, spec: LearnerSpec,
                   names: list[str] | None = None) -> Any:
    features = np.asarray(features, dtype=float)
    if features.ndim != 2:
        raise NuisanceError("features must be a 2-d matrix")
    names = names or [f"f{j}" for j in range(features.shape[1])]
    return fit_matrix(spec, features, targets, names, binary=False)


def fit_treatment_propensity(ds: Dataset, train_idx: NDArray, spec: LearnerSpec,
                             clip_eps: float = DEFAULT_CLIP_EPS) -> PropensityHandle:
    lo, hi = clip_eps, 1 - clip_eps
    if _is_oracle(spec):
        return PropensityHandle(None, lo, hi, _oracle(spec))
    model = _binary(spec, ds.x[train_idx], ds.t[train_idx].astype(float), x_names(ds.d_x))
    return PropensityHandle(model, lo, hi)


def fit_label_propensity(ds: Dataset, train_idx: NDArray, spec: LearnerSpec,
                         clip_eps: float = DEFAULT_CLIP_EPS, use_s: bool = True) -> LabelPropensityHandle:
    if _is_oracle(spec):
        return LabelPropensityHandle(None, clip_eps, use_s, _oracle(spec))
    names = ["t"] + x_names(ds.d_x) + (s_names(ds.d_s) if use_s else [])
    base, _ = resolve_omissions(spec, names)
    if base.kind is LearnerKind.LABEL_RATE:
        # full-sample labelled fraction, so that the estimate matches the MCAR form exactly
        return LabelPropensityHandle(ConstantModel(dataset_split_counts(ds)[3]), clip_eps, use_s)
    cols = [ds.t[train_idx, None].astype(float), ds.x[train_idx]]
    if use_s:
        cols.append(ds.s[train_idx])
    model = _binary(spec, np.column_stack(cols), ds.r[train_idx].astype(float), names)
    return LabelPropensityHandle(model, clip_eps, use_s)


def _labelled_train(ds: Dataset, train_idx: NDArray) -> tuple[NDArray, NDArray]:
    """Labelled training units and their outcomes."""
    train_idx = np.asarray(train_idx)
    mask = ds.r[train_idx] == 1
    lab = train_idx[mask]
    return lab, ds.y_full()[lab]


def fit_outcome(ds: Dataset, train_idx: NDArray, spec: LearnerSpec, use_s: bool,
                pooled: bool = False, labelled_mu: bool = False) -> OutcomeHandle:
    """Fit mu_tilde (``use_s``) or mu on the labelled training units."""
    if _is_oracle(spec):
        return OutcomeHandle(None, use_s, pooled, _oracle(spec), labelled_mu)
    lab, y = _labelled_train(ds, train_idx)
    names = x_names(ds.d_x) + (s_names(ds.d_s) if use_s else [])
    feats = np.column_stack([ds.x[lab], ds.s[lab]]) if use_s else ds.x[lab]
    if pooled:
        if lab.size == 0:
            raise NuisanceError("no labelled training units")
        return OutcomeHandle((fit_matrix(spec, feats, y, names, binary=False),), use_s, True)
    models = []
    for arm in (0, 1):
        m = ds.t[lab] == arm
        if not m.any():
            raise NuisanceError(f"treatment arm {arm} absent among labelled training units")
        models.append(fit_matrix(spec, feats[m], y[m], names, binary=False))
    return OutcomeHandle(tuple(models), use_s)


def fit_mu_pair(ds: Dataset, train_idx: NDArray, spec: LearnerSpec,
                pooled: bool = False) -> tuple[OutcomeHandle, OutcomeHandle]:
    """``(mu_tilde_hat, mu_hat)`` fitted on the labelled training units."""
    return (fit_outcome(ds, train_idx, spec, use_s=True, pooled=pooled),
            fit_outcome(ds, train_idx, spec, use_s=False))


def fit_density_ratio(ds: Dataset, train_idx: NDArray, spec: LearnerSpec,
                      c_lambda: float = DEFAULT_C_LAMBDA,
                      clip_eps: float = DEFAULT_CLIP_EPS) -> DensityRatioHandle:
    """Bayes-rule density ratio: classify R on x, then invert."""
    if _is_oracle(spec):
        return DensityRatioHandle(None, float("nan"), clip_eps, c_lambda, _oracle(spec))
    train_idx = np.asarray(train_idx)
    r = ds.r[train_idx].astype(float)
    if r.sum() == 0:
        raise NuisanceError("no labelled training units")
    try:
        model = _binary(spec, ds.x[train_idx], r, x_names(ds.d_x))
    except LearnerError as exc:
        raise NuisanceError(f"density ratio classifier: {exc}") from exc
    return DensityRatioHandle(model, float(r.mean()), clip_eps, c_lambda)
