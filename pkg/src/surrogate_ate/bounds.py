"""Efficiency bounds, gains and gaps for a data-generating process.

Each quantity is computed two ways where possible:

* ``mc``: a Monte-Carlo mean over fresh potential-outcome draws of a per-unit
  term built from the influence function with the true nuisances plugged in;
* ``closed``: the variance decomposition in terms of X-conditional moments
  (Var(mu_tilde | X) = sigma_nu^2 |gamma|^2, Var(Y | X, S) = sigma_eps^2),
  with the outer expectation over X by scrambled Sobol points.

Differences such as the surrogate gain are Monte-Carlo means of per-unit
differences on the same draws, so their standard errors are paired.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from numpy.typing import NDArray
from scipy.stats import qmc

from .dgp import MIN_MC_BUDGET, DgpSpec, Family, SpecError, TrueNuisances, simulate, true_effects
from .estimators import _residual_term, delta_free_terms

ALL_BOUNDS = ("VStar", "VI", "VII", "VIII", "VIV", "GainI_III", "GapIII_IV", "VTildeStar", "VTilde",
              "MCARTrio", "ZbGap", "GeneralExtension")
MCAR_TRIO = ("V_i", "V_ii", "V_iii", "Gain_i_ii", "Gain_ii_iii")
SELF_TEST_SE = 5.0


class BoundError(RuntimeError):
    """Raised when the two computations of a bound disagree."""


@dataclass(frozen=True)
class BoundRequest:
    spec: DgpSpec
    which: frozenset[str] | None = None
    mc_budget: int = 1_000_000
    seed: int = 0
    n: int | None = None
    shard_size: int = 1 << 16
    n_threads: int = 1
    qmc_log2_points: int = 14
    qmc_scrambles: int = 8
    self_test: bool = True

    def __post_init__(self) -> None:
        if self.mc_budget < MIN_MC_BUDGET:
            raise SpecError("insufficient Monte Carlo budget")
        if self.which is not None:
            which = frozenset(self.which)
            if "all" in which:
                which = None
            else:
                unknown = which - set(ALL_BOUNDS) - {"VStarPooled", "VTildeI", "VX", "VS"}
                if unknown:
                    raise ValueError(f"unknown bounds {sorted(unknown)}")
            object.__setattr__(self, "which", which)


@dataclass(frozen=True)
class BoundValue:
    name: str
    mc: float | None = None
    mc_se: float | None = None
    closed: float | None = None
    closed_se: float | None = None

    @property
    def method(self) -> str:
        if self.mc is not None and self.closed is not None:
            return "mc+closed"
        return "mc" if self.mc is not None else "closed"

    @property
    def value(self) -> float:
        return self.closed if self.closed is not None else self.mc  # type: ignore[return-value]

    @property
    def se(self) -> float:
        return (self.closed_se if self.closed is not None else self.mc_se) or 0.0

    def discrepancy(self) -> float:
        """|mc - closed| in units of the combined standard error (inf if se = 0 and they differ)."""
        if self.mc is None or self.closed is None:
            return 0.0
        diff = abs(self.mc - self.closed)
        if diff <= 1e-12 * (1 + abs(self.closed)):
            return 0.0
        se = math.hypot(self.mc_se or 0.0, self.closed_se or 0.0)
        return diff / se if se > 0 else math.inf

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "value": self.value, "se": self.se, "method": self.method,
                "mc": self.mc, "mc_se": self.mc_se, "closed": self.closed, "closed_se": self.closed_se}


@dataclass(frozen=True)
class BoundSet:
    spec: DgpSpec
    label_rate: float
    values: dict[str, BoundValue] = field(default_factory=dict)

    def __getitem__(self, name: str) -> BoundValue:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def v_tilde(self, p: float) -> float:
        """Labelled-scale variance at label rate ``p``; equals VTildeStar at p = 0."""
        return self.values["VTildeStar"].closed + p * (self.values["VX"].closed + self.values["VS"].closed)

    def to_dict(self) -> dict[str, Any]:
        return {"label_rate": self.label_rate, "bounds": [v.to_dict() for v in self.values.values()]}


# ---------------------------------------------------------------------------
# streaming moments
# ---------------------------------------------------------------------------

@dataclass
class _Moments:
    n: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def add(self, a: NDArray) -> None:
        nb = a.shape[0]
        mb = float(np.mean(a))
        m2b = float(np.sum(np.square(a - mb)))
        tot = self.n + nb
        d = mb - self.mean
        self.mean += d * nb / tot
        self.m2 += m2b + d * d * self.n * nb / tot
        self.n = tot

    @property
    def se(self) -> float:
        return math.sqrt(self.m2 / (self.n - 1) / self.n) if self.n > 1 else 0.0


# ---------------------------------------------------------------------------
# availability
# ---------------------------------------------------------------------------

def available_bounds(spec: DgpSpec, n: int | None = None) -> list[str]:
    fam = spec.family
    p = TrueNuisances(spec, n).label_rate
    out = []
    if p > 0:
        out += ["VStar", "VStarPooled"]
        if fam is not Family.SURROGATE_DEPENDENT_R:
            out += ["VI", "VII", "VIII", "VIV", "GainI_III", "GapIII_IV"]
    if spec.label_independent_of_treatment:
        out += ["VTildeStar", "VTildeI", "VTilde"]
    out += ["VX", "VS"]
    if fam is Family.MCAR:
        out += ["MCARTrio"]
        if p < 1:
            out += ["ZbGap"]
    if fam is Family.SURROGATE_DEPENDENT_R:
        out += ["GeneralExtension"]
    return out


def _expand(names: list[str]) -> list[str]:
    out = []
    for nm in names:
        out += list(MCAR_TRIO) if nm == "MCARTrio" else [nm]
    return out


# ---------------------------------------------------------------------------
# per-unit Monte-Carlo terms
# ---------------------------------------------------------------------------

def _unit_terms(nuis: TrueNuisances, spec: DgpSpec, d: Any, delta: float, names: set[str]) -> dict[str, NDArray]:
    p = nuis.label_rate
    x, t, r = d.x, d.t.astype(float), d.r
    s, y = d.s, d.y
    e = nuis.e(x)
    m1, m0 = nuis.mu(1, x), nuis.mu(0, x)
    mt1, mt0 = nuis.mu_tilde(1, x, s), nuis.mu_tilde(0, x, s)
    dm = nuis.effect(x) - delta
    h = _base_term_centered(t, e, mt1, mt0, m1, m0)
    out: dict[str, NDArray] = {"VX": dm ** 2, "VS": h ** 2}

    def psi(q: NDArray, a1: NDArray, a0: NDArray, rr: NDArray = r, yy: NDArray = y) -> NDArray:
        base, corr = delta_free_terms(t, rr, np.where(rr == 1, yy, np.nan), e, q, a1, a0, m1, m0)
        return base + corr - delta

    if "VStar" in names:
        psi_star = psi(1.0 / nuis.r(d.t, x, s), mt1, mt0)
        out["VStar"] = psi_star ** 2
        if "VStarPooled" in names:
            pooled = nuis.pooled_mu_tilde(x, s)
            psi_pool = psi(1.0 / nuis.r(d.t, x, s), pooled, pooled)
            out["VStarPooled"] = psi_pool ** 2
            out["PooledMinusPerArm"] = psi_pool ** 2 - psi_star ** 2
    if "VI" in names:
        q = 1.0 / nuis.r_given_tx(d.t, x)
        p1 = psi(q, m1, m0) ** 2
        p3 = psi(q, mt1, mt0) ** 2
        p4 = psi(np.ones_like(q), m1, m0, np.ones_like(r)) ** 2
        out.update(VI=p1, VII=p1, VIII=p3, VIV=p4, GainI_III=p1 - p3, GapIII_IV=p3 - p4)
    if "VTildeStar" in names:
        lam = nuis.density_ratio(x)
        wr = nuis.r_given_x(x) / p if p > 0 else np.ones_like(e)
        pt = _residual_term(t, lam, e, y, mt1, mt0) ** 2
        pti = _residual_term(t, lam, e, y, m1, m0) ** 2
        out.update(VTildeStar=wr * pt, VTildeI=wr * pti, GainTildeI=wr * (pti - pt),
                   VTilde=wr * pt + p * (dm ** 2 + h ** 2))
    if "V_i" in names:
        one = np.ones_like(e)
        gi = _residual_term(t, one, e, y, m1, m0) ** 2
        giii = _residual_term(t, one, e, y, mt1, mt0) ** 2
        vi = gi + dm ** 2
        vii = giii + p * dm ** 2 + p * h ** 2
        out.update(V_i=vi, V_ii=vii, V_iii=giii, Gain_i_ii=vi - vii, Gain_ii_iii=vii - giii)
    if "ZbGap" in names:
        g = _residual_term(t, np.ones_like(e), e, y, m1, m0)
        rf = r.astype(float)
        our = dm + rf * g / p
        zb = (1 - rf) * dm / (1 - p) + rf * g / p
        out["ZbGap"] = zb ** 2 - our ** 2
    if "GeneralExtension" in names:
        lam = nuis.density_ratio(x)
        e1 = nuis.labelled_propensity(x)
        lt = nuis.surrogate_ratio(d.t, x, s)
        w1 = t * lam * lt / e1
        w0 = (1 - t) * lam * lt / (1 - e1)
        pg = w1 * (y - mt1) - w0 * (y - mt0)
        out["GeneralExtension"] = nuis.r(d.t, x, s) / p * pg ** 2
    return out


def _base_term_centered(t: NDArray, e: NDArray, mt1: NDArray, mt0: NDArray, m1: NDArray, m0: NDArray) -> NDArray:
    return t / e * (mt1 - m1) - (1 - t) / (1 - e) * (mt0 - m0)


# ---------------------------------------------------------------------------
# closed forms
# ---------------------------------------------------------------------------

def _closed_integrands(nuis: TrueNuisances, spec: DgpSpec, delta: float,
                       names: set[str]) -> dict[str, Callable[[NDArray], NDArray]]:
    p = nuis.label_rate
    vg = spec.sigma_nu ** 2 * float(np.dot(spec.gamma, spec.gamma))
    ve = spec.sigma_eps ** 2

    def inv_e(x: NDArray) -> tuple[NDArray, NDArray]:
        e = nuis.e(x)
        return 1 / e, 1 / (1 - e)

    def vx(x: NDArray) -> NDArray:
        return (nuis.effect(x) - delta) ** 2

    def vs(x: NDArray) -> NDArray:
        a, b = inv_e(x)
        return vg * (a + b)

    f: dict[str, Callable[[NDArray], NDArray]] = {"VX": vx, "VS": vs}

    if "VStar" in names:
        def vstar(x: NDArray) -> NDArray:
            a, b = inv_e(x)
            return vx(x) + vg * (a + b) + ve * (nuis.inv_r_given_tx(1, x) * a + nuis.inv_r_given_tx(0, x) * b)
        f["VStar"] = vstar
    if "VI" in names:
        def setting(weight_s: bool, weight_y: bool) -> Callable[[NDArray], NDArray]:
            def g(x: NDArray) -> NDArray:
                a, b = inv_e(x)
                ir1, ir0 = 1 / nuis.r_given_tx(1, x), 1 / nuis.r_given_tx(0, x)
                ws = a * ir1 + b * ir0 if weight_s else a + b
                wy = a * ir1 + b * ir0 if weight_y else a + b
                return vx(x) + vg * ws + ve * wy
            return g

        def excess(var: float) -> Callable[[NDArray], NDArray]:
            def g(x: NDArray) -> NDArray:
                a, b = inv_e(x)
                r1, r0 = nuis.r_given_tx(1, x), nuis.r_given_tx(0, x)
                return var * (a * (1 - r1) / r1 + b * (1 - r0) / r0)
            return g
        f.update(VI=setting(True, True), VII=setting(True, True), VIII=setting(False, True),
                 VIV=setting(False, False), GainI_III=excess(vg), GapIII_IV=excess(ve))
    if "VTildeStar" in names:
        def tilde(var: float) -> Callable[[NDArray], NDArray]:
            def g(x: NDArray) -> NDArray:
                a, b = inv_e(x)
                return nuis.density_ratio(x) * var * (a + b)
            return g
        f.update(VTildeStar=tilde(ve), VTildeI=tilde(ve + vg), GainTildeI=tilde(vg))
        f["VTilde"] = lambda x: tilde(ve)(x) + p * (vx(x) + vs(x))
    if "V_i" in names:
        def trio_i(x: NDArray) -> NDArray:
            a, b = inv_e(x)
            return (ve + vg) * (a + b) + vx(x)

        def trio_iii(x: NDArray) -> NDArray:
            a, b = inv_e(x)
            return ve * (a + b)
        f.update(V_i=trio_i, V_iii=trio_iii,
                 V_ii=lambda x: trio_iii(x) + p * vx(x) + p * vs(x),
                 Gain_i_ii=lambda x: (1 - p) * (vs(x) + vx(x)),
                 Gain_ii_iii=lambda x: p * (vs(x) + vx(x)))
    if "ZbGap" in names:
        f["ZbGap"] = lambda x: p / (1 - p) * vx(x)
    if "GeneralExtension" in names:
        def gen(x: NDArray) -> NDArray:
            e = nuis.e(x)
            e1 = nuis.labelled_propensity(x)
            lam = nuis.density_ratio(x)
            rb1, rb0 = nuis.r_given_tx(1, x), nuis.r_given_tx(0, x)
            t1 = e * rb1 ** 2 * nuis.inv_r_given_tx(1, x) / e1 ** 2
            t0 = (1 - e) * rb0 ** 2 * nuis.inv_r_given_tx(0, x) / (1 - e1) ** 2
            return ve * lam ** 2 / p * (t1 + t0)
        f["GeneralExtension"] = gen
    return f


def _qmc_means(funcs: dict[str, Callable[[NDArray], NDArray]], d_x: int, log2_points: int,
               scrambles: int, seed: int) -> dict[str, tuple[float, float]]:
    children = np.random.SeedSequence([seed, 0x51]).spawn(scrambles)
    vals: dict[str, list[float]] = {k: [] for k in funcs}
    for child in children:
        x = 2 * qmc.Sobol(d_x, scramble=True, seed=np.random.default_rng(child)).random_base2(log2_points) - 1
        for k, fn in funcs.items():
            vals[k].append(float(np.mean(fn(x))))
    out = {}
    for k, v in vals.items():
        arr = np.asarray(v)
        out[k] = (float(arr.mean()), float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0)
    return out


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def compute_bounds(req: BoundRequest) -> BoundSet:
    """Evaluate the requested bounds for ``req.spec``; see the module docstring."""
    spec = req.spec
    nuis = TrueNuisances(spec, req.n)
    delta, _, _ = true_effects(spec)
    avail = available_bounds(spec, req.n)
    if req.which is None:
        wanted = avail
    else:
        missing = [w for w in req.which if w not in avail]
        if missing:
            raise BoundError(f"bounds {sorted(missing)} are not defined for {spec.family.value}")
        wanted = [w for w in avail if w in req.which]
    # the pooled and tilde-I variants ride along with their parents
    groups = set(wanted)
    if "VTilde" in groups or "VTildeI" in groups:
        groups.add("VTildeStar")
    if groups & {"VII", "VIII", "VIV", "GainI_III", "GapIII_IV"}:
        groups.add("VI")
    if "VStarPooled" in groups:
        groups.add("VStar")
    names = set(_expand(sorted(groups)))

    n_shards = -(-req.mc_budget // req.shard_size)
    seeds = np.random.SeedSequence(req.seed).spawn(n_shards)

    def shard(i: int) -> dict[str, NDArray]:
        size = min(req.shard_size, req.mc_budget - i * req.shard_size)
        d = simulate(spec, size, np.random.default_rng(seeds[i]), nuis)
        return _unit_terms(nuis, spec, d, delta, names)

    moments: dict[str, _Moments] = {}
    if req.n_threads > 1:
        with ThreadPoolExecutor(req.n_threads) as pool:
            results = list(pool.map(shard, range(n_shards)))
    else:
        results = (shard(i) for i in range(n_shards))
    for res in results:
        for k, arr in res.items():
            moments.setdefault(k, _Moments()).add(arr)

    closed = _qmc_means(_closed_integrands(nuis, spec, delta, names), spec.d_x,
                        req.qmc_log2_points, req.qmc_scrambles, req.seed)
    values: dict[str, BoundValue] = {}
    for k in sorted(set(moments) | set(closed)):
        mc = moments.get(k)
        cf = closed.get(k)
        values[k] = BoundValue(k, mc.mean if mc else None, mc.se if mc else None,
                               cf[0] if cf else None, cf[1] if cf else None)
    if req.self_test:
        bad = [v for v in values.values() if v.discrepancy() > SELF_TEST_SE]
        if bad:
            detail = ", ".join(f"{v.name}: mc={v.mc:.6g} closed={v.closed:.6g}" for v in bad)
            raise BoundError(f"bound decomposition inconsistency ({detail})")
    return BoundSet(spec, nuis.label_rate, values)
