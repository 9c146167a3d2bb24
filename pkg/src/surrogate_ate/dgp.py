"""Linear-Gaussian data-generating processes with known nuisance functions.

Every family shares the structural model

    X ~ Uniform(-1, 1)^{d_x}
    T | X ~ Bernoulli(e*(X)),           e*(x) = sigmoid(e0 + e_x . x)
    S(t) = alpha t + phi x + nu,         nu ~ N(0, sigma_nu^2 I)
    Y(t) = tau t + (tau_x . x) t + beta . x + gamma . S(t) + sigma_eps eps

and differs only in how the labelling indicator R is drawn:

* ``LinearGaussianMAR2``: r*(t, x) = sigmoid(c0 + c_t t + c_x . x)
* ``LinearGaussianSurrogateDependentR``:
  r*(t, x, s) = floor + (1 - floor) sigmoid(c0 + c_t t + c_x . x + c_s . s)
* ``MCAR``: r* = label_prob
* ``VanishingLabelRegime``: r* = min(1, c n^{-gamma_r}), depending on sample size.

The surrogate noise and outcome noise are shared between the two potential
outcomes of a unit.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit
from scipy.stats import qmc

from .data import Dataset

MIN_OVERLAP = 1e-3
MIN_MC_BUDGET = 10_000
_HERMITE_NODES = 64
_LEGENDRE_NODES = {1: 96, 2: 48, 3: 24}


class SpecError(ValueError):
    """Invalid data-generating process specification."""


class Family(str, Enum):
    MAR2 = "LinearGaussianMAR2"
    SURROGATE_DEPENDENT_R = "LinearGaussianSurrogateDependentR"
    MCAR = "MCAR"
    VANISHING = "VanishingLabelRegime"


def _vec(v: Any) -> tuple[float, ...]:
    return tuple(float(a) for a in np.atleast_1d(np.asarray(v, dtype=float)).ravel())


@dataclass(frozen=True)
class DgpSpec:
    family: Family = Family.MAR2
    d_x: int = 1
    d_s: int = 1
    tau: float = 1.0
    beta: tuple[float, ...] = (1.0,)
    gamma: tuple[float, ...] = (0.5,)
    alpha: tuple[float, ...] = (2.0,)
    # d_s rows of d_x entries
    phi: tuple[tuple[float, ...], ...] = ((0.5,),)
    sigma_nu: float = 1.0
    sigma_eps: float = 1.0
    e_coef: tuple[float, ...] = (0.0, 0.5)
    r_coef: tuple[float, ...] = (1.0, 0.5, 0.5)
    label_prob: float | None = None
    r_floor: float = 0.05
    r_n_exponent: float = 0.0
    r_n_scale: float = 1.0
    tau_x: tuple[float, ...] | None = None
    x_law: str = "UniformCube"
    epsilon_overlap: float = field(init=False, compare=False)

    def __post_init__(self) -> None:
        set_ = object.__setattr__
        set_(self, "family", Family(self.family))
        for name in ("beta", "gamma", "alpha", "e_coef", "r_coef"):
            set_(self, name, _vec(getattr(self, name)))
        set_(self, "tau_x", _vec(self.tau_x) if self.tau_x is not None else (0.0,) * self.d_x)
        phi = np.asarray(self.phi, dtype=float).reshape(self.d_s, self.d_x) if np.size(self.phi) == self.d_s * self.d_x \
            else None
        if phi is None:
            raise SpecError(f"phi must have {self.d_s}x{self.d_x} entries")
        set_(self, "phi", tuple(tuple(float(v) for v in row) for row in phi))
        self._validate()
        set_(self, "epsilon_overlap", self._compute_overlap())
        if self.epsilon_overlap < MIN_OVERLAP:
            raise SpecError(
                f"strict overlap violated: epsilon={self.epsilon_overlap:.3g} < {MIN_OVERLAP}"
            )

    def _validate(self) -> None:
        if self.d_x < 1 or self.d_s < 1:
            raise SpecError("d_x >= 1 and d_s >= 1 required")
        if self.x_law != "UniformCube":
            raise SpecError(f"unsupported x_law {self.x_law!r}")
        for name, length in (("beta", self.d_x), ("tau_x", self.d_x), ("gamma", self.d_s),
                             ("alpha", self.d_s), ("e_coef", self.d_x + 1)):
            if len(getattr(self, name)) != length:
                raise SpecError(f"{name} must have length {length}")
        if not self.sigma_nu > 0:
            raise SpecError("sigma_nu must be positive")
        if not self.sigma_eps >= 0:
            raise SpecError("sigma_eps must be non-negative")
        fam = self.family
        if fam is Family.MAR2 and len(self.r_coef) != 2 + self.d_x:
            raise SpecError(f"MAR2 r_coef must be (c0, c_t, c_x[{self.d_x}])")
        if fam is Family.SURROGATE_DEPENDENT_R:
            if len(self.r_coef) != 2 + self.d_x + self.d_s:
                raise SpecError(f"surrogate-dependent r_coef must be (c0, c_t, c_x[{self.d_x}], c_s[{self.d_s}])")
            if not 0 < self.r_floor < 1:
                raise SpecError("r_floor must lie in (0, 1)")
        if fam is Family.MCAR and (self.label_prob is None or not 0 < self.label_prob <= 1):
            raise SpecError("MCAR needs label_prob in (0, 1]")
        if fam is Family.VANISHING:
            if not 0 <= self.r_n_exponent < 0.5:
                raise SpecError("vanishing regime needs r_n_exponent in [0, 0.5) so that r_N^2 N -> infinity")
            if not self.r_n_scale > 0:
                raise SpecError("r_n_scale must be positive")
        vals = [self.tau, self.sigma_nu, self.sigma_eps, *self.beta, *self.gamma, *self.alpha,
                *self.e_coef, *self.r_coef, *self.tau_x, *np.ravel(self.phi)]
        if not np.isfinite(vals).all():
            raise SpecError("all coefficients must be finite")

    def _compute_overlap(self) -> float:
        spread = float(np.abs(self.e_coef[1:]).sum())
        eps_e = min(expit(self.e_coef[0] - spread), 1 - expit(self.e_coef[0] + spread))
        fam = self.family
        if fam is Family.MAR2:
            c0, ct, cx = self.r_coef[0], self.r_coef[1], np.abs(self.r_coef[2:]).sum()
            eps_r = min(expit(c0 - cx), expit(c0 + ct - cx))
        elif fam is Family.SURROGATE_DEPENDENT_R:
            eps_r = self.r_floor
        elif fam is Family.MCAR:
            eps_r = float(self.label_prob)
        else:
            eps_r = 1.0
        return float(min(eps_e, eps_r))

    # -- convenience ---------------------------------------------------------

    @property
    def statistical_surrogate_holds(self) -> bool:
        """Y independent of T given (X, S, R=1): true iff the outcome has no direct T path."""
        return self.tau == 0 and not any(self.tau_x)

    @property
    def label_independent_of_treatment(self) -> bool:
        """R independent of (T, S) given X, the condition the density-ratio results need."""
        if self.family is Family.MAR2:
            return self.r_coef[1] == 0
        return self.family in (Family.MCAR, Family.VANISHING)

    def vanishing_label_rate(self, n: int) -> float:
        return float(min(1.0, self.r_n_scale * n ** (-self.r_n_exponent)))

    def replace(self, **changes: Any) -> "DgpSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.init}
        d["family"] = self.family.value
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = [list(row) if isinstance(row, tuple) else row for row in v]
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DgpSpec":
        known = {f.name for f in dataclasses.fields(cls) if f.init}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown DgpSpec fields: {sorted(unknown)}")
        return cls(**d)

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, text_or_path: str | Path) -> "DgpSpec":
        text = str(text_or_path)
        if not text.lstrip().startswith("{"):
            text = Path(text).read_text()
        return cls.from_dict(json.loads(text))


def lg1(**changes: Any) -> DgpSpec:
    """The reference MAR2 design: d_x = d_s = 1, r*(t, x) = sigmoid(1 + 0.5 t + 0.5 x)."""
    return DgpSpec(**changes)


def mcar(label_prob: float = 0.5, **changes: Any) -> DgpSpec:
    return DgpSpec(family=Family.MCAR, label_prob=label_prob, r_coef=(), **changes)


# ---------------------------------------------------------------------------
# true nuisance functions
# ---------------------------------------------------------------------------

def _as_2d(a: Any, d: int) -> NDArray:
    a = np.asarray(a, dtype=float)
    return a.reshape(-1, d) if a.ndim < 2 else a


class TrueNuisances:
    """Exact nuisance functions of a spec, vectorised over units.

    ``mu`` is E[Y | T=t, X=x] = E[mu_tilde(t, X, S) | T=t, X=x]; ``mu_labelled``
    is E[Y | T=t, R=1, X=x].  They coincide unless R depends on S.

    For the vanishing-label family ``n`` fixes the finite-sample label rate;
    ``n=None`` is the P(R=1)=0 limit, where only e, mu_tilde, mu and lambda
    are meaningful.
    """

    def __init__(self, spec: DgpSpec, n: int | None = None):
        self.spec = spec
        self.n = n
        self._phi = np.asarray(spec.phi, dtype=float)
        self._beta = np.asarray(spec.beta)
        self._gamma = np.asarray(spec.gamma)
        self._alpha = np.asarray(spec.alpha)
        self._tau_x = np.asarray(spec.tau_x)
        self._e = np.asarray(spec.e_coef)
        self._hz, hw = np.polynomial.hermite_e.hermegauss(_HERMITE_NODES)
        self._hw = hw / np.sqrt(2 * np.pi)

    # treatment ------------------------------------------------------------

    def e(self, x: Any) -> NDArray:
        x = _as_2d(x, self.spec.d_x)
        return expit(self._e[0] + x @ self._e[1:])

    # outcome regressions --------------------------------------------------

    def mu_tilde(self, t: Any, x: Any, s: Any) -> NDArray:
        x = _as_2d(x, self.spec.d_x)
        s = _as_2d(s, self.spec.d_s)
        t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        return self.spec.tau * t + (x @ self._tau_x) * t + x @ self._beta + s @ self._gamma

    def surrogate_mean(self, t: Any, x: Any) -> NDArray:
        x = _as_2d(x, self.spec.d_x)
        t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        return t[:, None] * self._alpha[None, :] + x @ self._phi.T

    def mu(self, t: Any, x: Any) -> NDArray:
        x = _as_2d(x, self.spec.d_x)
        return self.mu_tilde(t, x, self.surrogate_mean(t, x))

    def effect(self, x: Any) -> NDArray:
        """Conditional average treatment effect mu(1, x) - mu(0, x), written so that
        a homogeneous effect reproduces delta* bit-for-bit."""
        x = _as_2d(x, self.spec.d_x)
        return self.spec.tau + x @ self._tau_x + float(np.dot(self.spec.gamma, self.spec.alpha))

    def mu_labelled(self, t: Any, x: Any) -> NDArray:
        if self.spec.family is not Family.SURROGATE_DEPENDENT_R:
            return self.mu(t, x)
        x = _as_2d(x, self.spec.d_x)
        rbar, tilt = self._s_projection_moments(t, x)
        cs = np.asarray(self.spec.r_coef[2 + self.spec.d_x:])
        shift = (self._gamma @ cs) / (cs @ cs) * tilt / rbar if cs.any() else 0.0
        return self.mu(t, x) + shift

    def pooled_mu_tilde(self, x: Any, s: Any) -> NDArray:
        """E[Y | R=1, X=x, S=s], pooling both treatment arms."""
        x = _as_2d(x, self.spec.d_x)
        s = _as_2d(s, self.spec.d_s)
        ex = self.e(x)
        d1 = s - self.surrogate_mean(1, x)
        d0 = s - self.surrogate_mean(0, x)
        log_ratio = -((d1 ** 2).sum(1) - (d0 ** 2).sum(1)) / (2 * self.spec.sigma_nu ** 2)
        w1, w0 = ex, 1 - ex
        if self.spec.family in (Family.MAR2, Family.SURROGATE_DEPENDENT_R):
            w1 = w1 * self.r(1, x, s)
            w0 = w0 * self.r(0, x, s)
        p1 = expit(np.log(w1) - np.log(w0) + log_ratio)
        return p1 * self.mu_tilde(1, x, s) + (1 - p1) * self.mu_tilde(0, x, s)

    # labelling -------------------------------------------------------------

    def r(self, t: Any, x: Any, s: Any | None = None) -> NDArray:
        spec = self.spec
        x = _as_2d(x, spec.d_x)
        t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        fam = spec.family
        if fam is Family.MAR2:
            c = np.asarray(spec.r_coef)
            return expit(c[0] + c[1] * t + x @ c[2:])
        if fam is Family.SURROGATE_DEPENDENT_R:
            if s is None:
                raise ValueError("surrogate-dependent labelling needs s")
            s = _as_2d(s, spec.d_s)
            c = np.asarray(spec.r_coef)
            lin = c[0] + c[1] * t + x @ c[2:2 + spec.d_x] + s @ c[2 + spec.d_x:]
            return spec.r_floor + (1 - spec.r_floor) * expit(lin)
        return np.full(x.shape[0], self.label_rate)

    def _s_projection_moments(self, t: Any, x: NDArray) -> tuple[NDArray, NDArray]:
        """E[r | t, x] and E[(u - E u) r | t, x] for u = c_s . S, by Gauss-Hermite quadrature."""
        spec = self.spec
        c = np.asarray(spec.r_coef)
        cs = c[2 + spec.d_x:]
        t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        m = self.surrogate_mean(t, x)
        base = c[0] + c[1] * t + x @ c[2:2 + spec.d_x] + m @ cs
        sd = spec.sigma_nu * np.sqrt(cs @ cs)
        dev = sd * self._hz[None, :]
        rr = spec.r_floor + (1 - spec.r_floor) * expit(base[:, None] + dev)
        return rr @ self._hw, (rr * dev) @ self._hw

    def inv_r_given_tx(self, t: Any, x: Any) -> NDArray:
        """E[1 / r*(t, X, S) | T=t, X=x]."""
        x = _as_2d(x, self.spec.d_x)
        if self.spec.family is not Family.SURROGATE_DEPENDENT_R:
            return 1.0 / self.r(t, x)
        spec = self.spec
        c = np.asarray(spec.r_coef)
        cs = c[2 + spec.d_x:]
        t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        base = c[0] + c[1] * t + x @ c[2:2 + spec.d_x] + self.surrogate_mean(t, x) @ cs
        dev = spec.sigma_nu * np.sqrt(cs @ cs) * self._hz[None, :]
        rr = spec.r_floor + (1 - spec.r_floor) * expit(base[:, None] + dev)
        return (1.0 / rr) @ self._hw

    def r_given_tx(self, t: Any, x: Any) -> NDArray:
        """P(R=1 | T=t, X=x)."""
        x = _as_2d(x, self.spec.d_x)
        if self.spec.family is Family.SURROGATE_DEPENDENT_R:
            return self._s_projection_moments(t, x)[0]
        return self.r(t, x)

    def r_given_x(self, x: Any) -> NDArray:
        x = _as_2d(x, self.spec.d_x)
        ex = self.e(x)
        return ex * self.r_given_tx(1, x) + (1 - ex) * self.r_given_tx(0, x)

    @cached_property
    def label_rate(self) -> float:
        """P(R=1)."""
        spec = self.spec
        if spec.family is Family.MCAR:
            return float(spec.label_prob)
        if spec.family is Family.VANISHING:
            return 0.0 if self.n is None else spec.vanishing_label_rate(self.n)
        nodes, weights = _x_rule(spec.d_x)
        return float(weights @ self.r_given_x(nodes))

    def density_ratio(self, x: Any) -> NDArray:
        """lambda*(x) = f(x) / f(x | R=1) = P(R=1) / P(R=1 | X=x)."""
        x = _as_2d(x, self.spec.d_x)
        if self.spec.family in (Family.MCAR, Family.VANISHING):
            return np.ones(x.shape[0])
        return self.label_rate / self.r_given_x(x)

    def labelled_propensity(self, x: Any) -> NDArray:
        """P(T=1 | R=1, X=x)."""
        x = _as_2d(x, self.spec.d_x)
        ex = self.e(x)
        a = ex * self.r_given_tx(1, x)
        return a / (a + (1 - ex) * self.r_given_tx(0, x))

    def surrogate_ratio(self, t: Any, x: Any, s: Any) -> NDArray:
        """f(s | x, t) / f(s | x, t, R=1) = P(R=1 | t, x) / r*(t, x, s)."""
        return self.r_given_tx(t, x) / self.r(t, x, s)


def _x_rule(d_x: int) -> tuple[NDArray, NDArray]:
    """Nodes and weights integrating against Uniform(-1, 1)^{d_x}."""
    if d_x in _LEGENDRE_NODES:
        z, w = np.polynomial.legendre.leggauss(_LEGENDRE_NODES[d_x])
        grids = np.meshgrid(*([z] * d_x), indexing="ij")
        wgrid = np.meshgrid(*([w / 2] * d_x), indexing="ij")
        return np.column_stack([g.ravel() for g in grids]), np.prod([g.ravel() for g in wgrid], axis=0)
    pts = qmc.Sobol(d_x, scramble=True, seed=0).random_base2(16)
    return 2 * pts - 1, np.full(pts.shape[0], 1 / pts.shape[0])


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PotentialDraws:
    """Full draws including both potential surrogates and outcomes."""

    x: NDArray
    t: NDArray
    s0: NDArray
    s1: NDArray
    y0: NDArray
    y1: NDArray
    r: NDArray

    @property
    def s(self) -> NDArray:
        return np.where(self.t[:, None] == 1, self.s1, self.s0)

    @property
    def y(self) -> NDArray:
        return np.where(self.t == 1, self.y1, self.y0)


def simulate(spec: DgpSpec, n: int, rng: np.random.Generator, nuis: TrueNuisances | None = None) -> PotentialDraws:
    nuis = nuis or TrueNuisances(spec, n if spec.family is Family.VANISHING else None)
    x = rng.uniform(-1.0, 1.0, size=(n, spec.d_x))
    t = (rng.random(n) < nuis.e(x)).astype(np.int8)
    noise = spec.sigma_nu * rng.standard_normal((n, spec.d_s))
    eps = spec.sigma_eps * rng.standard_normal(n)
    s0 = nuis.surrogate_mean(0, x) + noise
    s1 = nuis.surrogate_mean(1, x) + noise
    y0 = nuis.mu_tilde(0, x, s0) + eps
    y1 = nuis.mu_tilde(1, x, s1) + eps
    s_obs = np.where(t[:, None] == 1, s1, s0)
    u = rng.random(n)
    r = (u < nuis.r(t, x, s_obs)).astype(np.int8)
    return PotentialDraws(x, t, s0, s1, y0, y1, r)


def generate(spec: DgpSpec, n: int, seed: int | np.random.SeedSequence) -> Dataset:
    """Draw ``n`` i.i.d. observations; deterministic given ``seed``."""
    if n < 1:
        raise SpecError("n must be at least 1")
    d = simulate(spec, n, np.random.default_rng(seed))
    return Dataset(x=d.x, t=d.t, s=d.s, r=d.r, y=d.y[d.r == 1])


# ---------------------------------------------------------------------------
# ground truth
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TruthReport:
    spec: DgpSpec
    delta_star: float
    xi1_star: float
    xi0_star: float
    nuisances: TrueNuisances
    bounds: Any
    epsilon_overlap: float

    def e(self, x: Any) -> NDArray:
        return self.nuisances.e(x)

    def r(self, t: Any, x: Any, s: Any | None = None) -> NDArray:
        return self.nuisances.r(t, x, s)

    def mu_tilde(self, t: Any, x: Any, s: Any) -> NDArray:
        return self.nuisances.mu_tilde(t, x, s)

    def mu(self, t: Any, x: Any) -> NDArray:
        return self.nuisances.mu(t, x)

    def lam(self, x: Any) -> NDArray:
        return self.nuisances.density_ratio(x)

    def pooled_mu_tilde(self, x: Any, s: Any) -> NDArray:
        return self.nuisances.pooled_mu_tilde(x, s)


def true_effects(spec: DgpSpec) -> tuple[float, float, float]:
    """``(delta*, xi1*, xi0*)``; E[X] = 0 under the uniform-cube law."""
    xi1 = spec.tau + float(np.dot(spec.gamma, spec.alpha))
    xi0 = 0.0
    return xi1 - xi0, xi1, xi0


def truth(spec: DgpSpec, mc_budget: int, seed: int, n: int | None = None) -> TruthReport:
    """Closed-form effects and nuisances plus every efficiency bound for ``spec``."""
    from .bounds import BoundRequest, compute_bounds

    if mc_budget < MIN_MC_BUDGET:
        raise SpecError("insufficient Monte Carlo budget")
    delta, xi1, xi0 = true_effects(spec)
    nuis = TrueNuisances(spec, n)
    bounds = compute_bounds(BoundRequest(spec=spec, mc_budget=mc_budget, seed=seed, n=n))
    return TruthReport(spec, delta, xi1, xi0, nuis, bounds, spec.epsilon_overlap)


def identification_estimates(spec: DgpSpec, n: int, seed: int) -> dict[str, tuple[float, float]]:
    """Monte-Carlo values of delta via the three identification formulas.

    Each outer conditional expectation is replaced by its inverse-propensity
    weighted sample analogue on freshly generated data:

    * ``full_outcomes``:       E[ E[Y | T=t, X] ]
    * ``labelled_surrogates``: E[ E[ mu_tilde(t, X, S) | R=1, T=t, X ] ]
    * ``labelled_outcomes``:   E[ E[Y | T=t, R=1, X] ]

    Each entry is ``(estimate, standard_error)``.
    """
    nuis = TrueNuisances(spec, n if spec.family is Family.VANISHING else None)
    d = simulate(spec, n, np.random.default_rng(seed), nuis)
    s, y = d.s, d.y
    ex = nuis.e(d.x)
    w1 = d.t / ex
    w0 = (1 - d.t) / (1 - ex)
    a = w1 * y - w0 * y
    l1 = d.r * w1 / nuis.r_given_tx(1, d.x)
    l0 = d.r * w0 / nuis.r_given_tx(0, d.x)
    b = l1 * nuis.mu_tilde(1, d.x, s) - l0 * nuis.mu_tilde(0, d.x, s)
    c = l1 * y - l0 * y
    return {k: (float(v.mean()), float(v.std(ddof=1) / np.sqrt(n)))
            for k, v in (("full_outcomes", a), ("labelled_surrogates", b), ("labelled_outcomes", c))}
