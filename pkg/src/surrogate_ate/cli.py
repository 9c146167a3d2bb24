"""Command-line interface: ``surrogate-ate <command> --config <json> --seed <int>``.

Every command accepts ``--config`` as a path or an inline JSON object.  Exit
status is 0 on success, 2 on invalid input and 3 when more than 20% of the
Monte-Carlo replications fail.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any

from .bounds import BoundRequest, compute_bounds
from .data import DataError, read_dataset, write_dataset
from .crossfit import CrossFitError
from .dgp import DgpSpec, Family, TrueNuisances, generate
from .estimators import EstimationError, EstimatorConfig, estimate
from .harness import (ReplicationFailure, ScenarioConfig, misspecification_matrix, regime_sweep, run_scenario,
                      version_string, write_mc_rows, zb_comparison)
from .learners import LearnerError

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_REPLICATION_FAILURE = 3

log = logging.getLogger("surrogate_ate")


def _load(text: str | None) -> dict[str, Any]:
    if text is None:
        return {}
    src = text if text.lstrip().startswith("{") else Path(text).read_text()
    out = json.loads(src)
    if not isinstance(out, dict):
        raise ValueError("config must be a JSON object")
    return out


def _spec(args: argparse.Namespace, cfg: dict[str, Any]) -> DgpSpec:
    if getattr(args, "spec", None):
        return DgpSpec.from_json(args.spec)
    if "spec" in cfg:
        return DgpSpec.from_dict(cfg["spec"])
    raise ValueError("a DGP spec is required (--spec or config key 'spec')")


def _emit(payload: dict[str, Any], out: str | None) -> None:
    text = json.dumps(payload, indent=2)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _scenario(args: argparse.Namespace, cfg: dict[str, Any]) -> ScenarioConfig:
    cfg = dict(cfg)
    if getattr(args, "spec", None):
        cfg["spec"] = DgpSpec.from_json(args.spec).to_dict()
    for key in ("n", "replications", "n_workers"):
        if getattr(args, key, None) is not None:
            cfg[key] = getattr(args, key)
    cfg["seed"] = args.seed
    cfg.pop("n_grid", None)
    return ScenarioConfig.from_dict(cfg)


def _csv_path(args: argparse.Namespace, default: str) -> Path:
    if args.csv:
        return Path(args.csv)
    if args.out:
        return Path(args.out).with_name(default)
    return Path(default)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(args: argparse.Namespace) -> int:
    cfg = _load(args.config)
    spec = _spec(args, cfg)
    n = args.n if args.n is not None else cfg.get("n")
    if n is None:
        raise ValueError("sample size required (--n or config key 'n')")
    if not args.out:
        raise ValueError("gen needs --out (a .csv or .jsonl path)")
    ds = generate(spec, int(n), args.seed)
    write_dataset(ds, args.out)
    log.info("wrote %d units (%d labelled) to %s", ds.n, ds.n_labelled, args.out)
    return EXIT_OK


def cmd_estimate(args: argparse.Namespace) -> int:
    cfg = _load(args.config)
    ds = read_dataset(args.data)
    est = dict(cfg.get("estimator", {}))
    if args.estimator:
        est["kind"] = args.estimator
    truth = None
    if "spec" in cfg or args.spec:
        spec = _spec(args, cfg)
        truth = TrueNuisances(spec, ds.n if spec.family is Family.VANISHING else None)
    report = estimate(ds, EstimatorConfig.from_dict(est, truth), args.seed)
    _emit({"version": version_string(), "seed": args.seed, **report.to_dict()}, args.out)
    return EXIT_OK


def cmd_bounds(args: argparse.Namespace) -> int:
    cfg = _load(args.config)
    spec = _spec(args, cfg)
    which = args.which or cfg.get("which", "all")
    which_set = frozenset(which.split(",") if isinstance(which, str) else which)
    req = BoundRequest(spec, which=which_set, mc_budget=int(args.mc or cfg.get("mc_budget", 1_000_000)),
                       seed=args.seed, n=cfg.get("n"), n_threads=args.threads)
    bs = compute_bounds(req)
    _emit({"version": version_string(), "spec": spec.to_dict(), "seed": args.seed, "mc_budget": req.mc_budget,
           **bs.to_dict()}, args.out)
    return EXIT_OK


def cmd_mc(args: argparse.Namespace) -> int:
    sc = _scenario(args, _load(args.config))
    rep = run_scenario(sc)
    rep.write_mc_csv(_csv_path(args, "mc.csv"))
    _emit(rep.to_dict(), args.out)
    return EXIT_OK


def cmd_dr_matrix(args: argparse.Namespace) -> int:
    sc = _scenario(args, _load(args.config))
    rep = misspecification_matrix(sc)
    rep.write_mc_csv(_csv_path(args, "mc.csv"))
    _emit(rep.to_dict(), args.out)
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _load(args.config)
    grid = args.n_grid or cfg.get("n_grid")
    if not grid:
        raise ValueError("an n grid is required (--n-grid or config key 'n_grid')")
    grid = [int(v) for v in (grid.split(",") if isinstance(grid, str) else grid)]
    cfg.setdefault("n", grid[0])
    sc = _scenario(args, cfg)
    rows = regime_sweep(sc, grid)
    write_mc_rows([r for row in rows for r in row.report.mc_rows()], _csv_path(args, "mc.csv"))
    _emit({"version": version_string(), "config": sc.to_dict(), "n_grid": grid,
           "rows": [r.to_dict() for r in rows]}, args.out)
    return EXIT_OK


def cmd_zb(args: argparse.Namespace) -> int:
    sc = _scenario(args, _load(args.config))
    res = zb_comparison(sc)
    res.report.write_mc_csv(_csv_path(args, "mc.csv"))
    _emit({"version": version_string(), "config": sc.to_dict(), **res.to_dict()}, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="surrogate-ate", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name: str, fn: Any, help_: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON config (path or inline object)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", help="output path (JSON report, or dataset for gen)")
        sp.set_defaults(func=fn)
        return sp

    g = add("gen", cmd_gen, "generate a synthetic dataset (.csv or .jsonl)")
    g.add_argument("--spec", help="DGP spec JSON (path or inline)")
    g.add_argument("--n", type=int)

    e = add("estimate", cmd_estimate, "run one estimator on a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--estimator", help="estimator kind, overrides the config")
    e.add_argument("--spec", help="DGP spec, needed for oracle estimators or learners")

    b = add("bounds", cmd_bounds, "compute efficiency bounds for a DGP")
    b.add_argument("--spec")
    b.add_argument("--which", help="comma-separated bound ids or 'all'")
    b.add_argument("--mc", type=int, help="Monte-Carlo budget")
    b.add_argument("--threads", type=int, default=1)

    for name, fn, help_ in (("mc", cmd_mc, "replicated Monte-Carlo study"),
                            ("dr-matrix", cmd_dr_matrix, "misspecification matrix for the general estimator"),
                            ("sweep", cmd_sweep, "label-regime sweep over sample sizes"),
                            ("zb", cmd_zb, "paired comparison with unlabelled-only imputation")):
        sp = add(name, fn, help_)
        sp.add_argument("--spec")
        sp.add_argument("--n", type=int)
        sp.add_argument("--replications", type=int)
        sp.add_argument("--n-workers", dest="n_workers", type=int)
        sp.add_argument("--csv", help="path of the per-replication CSV (default mc.csv beside --out)")
        if name == "sweep":
            sp.add_argument("--n-grid", dest="n_grid", help="comma-separated sample sizes")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ReplicationFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_REPLICATION_FAILURE
    except (ValueError, KeyError, TypeError, OSError, DataError, EstimationError, LearnerError,
            CrossFitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
