"""Observation and dataset containers, fold assignment, and dataset file IO.

A dataset holds covariates ``x``, treatment ``t``, surrogates ``s`` and the
labelling indicator ``r`` for every unit.  The primary outcome ``y`` exists only
for labelled units (``r == 1``) and is stored compressed, aligned with
``Dataset.labelled``; there is no missing-value sentinel anywhere.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from numpy.typing import NDArray


class DataError(ValueError):
    """Raised when input data violates a structural invariant."""


def _frozen(a: NDArray) -> NDArray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Observation:
    """One unit's record ``(x, t, s, y, r)``; ``y`` is present iff ``r == 1``."""

    x: tuple[float, ...]
    t: int
    s: tuple[float, ...]
    r: int
    y: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", tuple(float(v) for v in self.x))
        object.__setattr__(self, "s", tuple(float(v) for v in self.s))
        if len(self.x) < 1 or len(self.s) < 1:
            raise DataError("observation needs d_x >= 1 and d_s >= 1")
        if self.t not in (0, 1) or self.r not in (0, 1):
            raise DataError("t and r must be binary")
        if self.r == 1 and self.y is None:
            raise DataError("labelled observation (r=1) is missing y")
        if self.r == 0 and self.y is not None:
            raise DataError("unlabelled observation (r=0) must not carry y")
        vals = self.x + self.s + ((float(self.y),) if self.y is not None else ())
        if not all(math.isfinite(v) for v in vals):
            raise DataError("observation contains non-finite values")
        if self.y is not None:
            object.__setattr__(self, "y", float(self.y))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented, immutable collection of observations.

    ``y`` has one entry per labelled unit, in the order given by
    ``labelled`` (ascending unit index).
    """

    x: NDArray[np.float64]
    t: NDArray[np.int8]
    s: NDArray[np.float64]
    r: NDArray[np.int8]
    y: NDArray[np.float64]

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=float)
        s = np.asarray(self.s, dtype=float)
        if x.ndim != 2 or s.ndim != 2:
            raise DataError("x and s must be 2-D arrays (units x features)")
        n = x.shape[0]
        t = np.asarray(self.t)
        r = np.asarray(self.r)
        if t.shape != (n,) or r.shape != (n,) or s.shape[0] != n:
            raise DataError("column lengths disagree")
        if x.shape[1] < 1 or s.shape[1] < 1:
            raise DataError("d_x >= 1 and d_s >= 1 required")
        if not (np.isin(t, (0, 1)).all() and np.isin(r, (0, 1)).all()):
            raise DataError("t and r must be binary")
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if y.shape[0] != int(r.sum()):
            raise DataError(f"expected {int(r.sum())} outcomes for labelled units, got {y.shape[0]}")
        if not (np.isfinite(x).all() and np.isfinite(s).all() and np.isfinite(y).all()):
            raise DataError("dataset contains non-finite values")
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "s", _frozen(s))
        object.__setattr__(self, "t", _frozen(t.astype(np.int8)))
        object.__setattr__(self, "r", _frozen(r.astype(np.int8)))
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "_labelled", _frozen(np.flatnonzero(r == 1)))

    @classmethod
    def from_observations(cls, observations: Iterable[Observation], d_x: int | None = None,
                          d_s: int | None = None) -> "Dataset":
        obs = list(observations)
        if obs:
            d_x = len(obs[0].x) if d_x is None else d_x
            d_s = len(obs[0].s) if d_s is None else d_s
            if any(len(o.x) != d_x or len(o.s) != d_s for o in obs):
                raise DataError("observations have inconsistent dimensions")
        if d_x is None or d_s is None:
            raise DataError("empty dataset needs explicit d_x and d_s")
        return cls(
            x=np.array([o.x for o in obs], dtype=float).reshape(len(obs), d_x),
            t=np.array([o.t for o in obs], dtype=np.int8),
            s=np.array([o.s for o in obs], dtype=float).reshape(len(obs), d_s),
            r=np.array([o.r for o in obs], dtype=np.int8),
            y=np.array([o.y for o in obs if o.r == 1], dtype=float),
        )

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    @property
    def d_s(self) -> int:
        return self.s.shape[1]

    @property
    def labelled(self) -> NDArray[np.intp]:
        """Indices of labelled units, ascending."""
        return self._labelled  # type: ignore[attr-defined]

    @property
    def n_labelled(self) -> int:
        return int(self.labelled.shape[0])

    @property
    def n_unlabelled(self) -> int:
        return self.n - self.n_labelled

    def y_full(self) -> NDArray[np.float64]:
        """Outcomes aligned with units; NaN where unlabelled."""
        out = np.full(self.n, np.nan)
        out[self.labelled] = self.y
        return out

    def __len__(self) -> int:
        return self.n

    def __iter__(self) -> Iterator[Observation]:
        return iter(self.observations())

    def observations(self) -> list[Observation]:
        pos = np.cumsum(self.r) - 1
        out = []
        for i in range(self.n):
            y = float(self.y[pos[i]]) if self.r[i] else None
            out.append(Observation(tuple(self.x[i]), int(self.t[i]), tuple(self.s[i]), int(self.r[i]), y))
        return out

    def subset(self, idx: Sequence[int] | NDArray) -> "Dataset":
        """Units ``idx`` (sorted ascending) as a new dataset."""
        idx = np.sort(np.asarray(idx, dtype=np.intp))
        ypos = np.cumsum(self.r) - 1
        keep_lab = idx[self.r[idx] == 1]
        return Dataset(self.x[idx], self.t[idx], self.s[idx], self.r[idx], self.y[ypos[keep_lab]])

    def same_as(self, other: "Dataset") -> bool:
        """Bitwise equality of every column."""
        return all(
            a.shape == b.shape and np.array_equal(a, b)
            for a, b in ((self.x, other.x), (self.t, other.t), (self.s, other.s),
                         (self.r, other.r), (self.y, other.y))
        )


def dataset_split_counts(dataset: Dataset) -> tuple[int, int, int, float]:
    """Return ``(N, N_l, N_u, N_l / N)``."""
    if dataset.n == 0:
        raise DataError("empty dataset")
    return dataset.n, dataset.n_labelled, dataset.n_unlabelled, dataset.n_labelled / dataset.n


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    """Stratified K-fold partition; ``fold_of[i]`` is in ``0..k-1``."""

    k: int
    fold_of: NDArray[np.intp]
    seed: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "fold_of", _frozen(np.asarray(self.fold_of, dtype=np.intp)))

    def members(self, fold: int) -> NDArray[np.intp]:
        return np.flatnonzero(self.fold_of == fold)

    def complement(self, fold: int) -> NDArray[np.intp]:
        return np.flatnonzero(self.fold_of != fold)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FoldAssignment):
            return NotImplemented
        return (self.k, self.seed) == (other.k, other.seed) and np.array_equal(self.fold_of, other.fold_of)

    def __hash__(self) -> int:
        return hash((self.k, self.seed, self.fold_of.tobytes()))


def make_folds(dataset: Dataset, k: int, seed: int | np.random.SeedSequence) -> FoldAssignment:
    """Partition labelled and unlabelled units separately into ``k`` near-equal folds.

    Each stratum is shuffled, dealt round-robin, and the starting fold is
    randomised so the folds receiving one extra unit are themselves random.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    if dataset.n_labelled < k:
        raise DataError("too few labelled units for K folds")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(dataset.n, dtype=np.intp)
    for stratum in (dataset.labelled, np.flatnonzero(dataset.r == 0)):
        perm = rng.permutation(stratum)
        offset = int(rng.integers(k))
        fold_of[perm] = (np.arange(perm.size) + offset) % k
    seed_repr = seed if isinstance(seed, int) else int(np.random.default_rng(seed).integers(2**63))
    return FoldAssignment(k=k, fold_of=fold_of, seed=seed_repr)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _header(d_x: int, d_s: int) -> list[str]:
    return [f"x{j + 1}" for j in range(d_x)] + ["t"] + [f"s{j + 1}" for j in range(d_s)] + ["r", "y"]


def write_csv(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_header(dataset.d_x, dataset.d_s))
        for o in dataset.observations():
            w.writerow([_fmt(v) for v in o.x] + [o.t] + [_fmt(v) for v in o.s]
                       + [o.r, "" if o.y is None else _fmt(o.y)])


def _parse_header(cols: list[str]) -> tuple[int, int]:
    try:
        ti, ri = cols.index("t"), cols.index("r")
    except ValueError as exc:
        raise DataError("header must contain t and r columns") from exc
    d_x, d_s = ti, ri - ti - 1
    if cols != _header(d_x, d_s):
        raise DataError(f"unexpected header {cols}")
    return d_x, d_s


def _parse_binary(v: str, name: str, line: int) -> int:
    if v not in ("0", "1"):
        raise DataError(f"line {line}: {name} must be 0 or 1, got {v!r}")
    return int(v)


def read_csv(path: str | Path) -> Dataset:
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        d_x, d_s = _parse_header(next(rows))
        obs = []
        for line, row in enumerate(rows, start=2):
            if not row:
                continue
            x = [float(v) for v in row[:d_x]]
            t = _parse_binary(row[d_x], "t", line)
            s = [float(v) for v in row[d_x + 1:d_x + 1 + d_s]]
            r = _parse_binary(row[d_x + 1 + d_s], "r", line)
            yv = row[d_x + 2 + d_s]
            if r == 0 and yv != "":
                raise DataError(f"line {line}: unlabelled unit (r=0) has a recorded y")
            if r == 1 and yv == "":
                raise DataError(f"line {line}: labelled unit (r=1) has no y")
            obs.append(Observation(tuple(x), t, tuple(s), r, float(yv) if r else None))
    return Dataset.from_observations(obs, d_x=d_x, d_s=d_s)


def write_jsonl(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w") as fh:
        for o in dataset.observations():
            fh.write(json.dumps({"x": list(o.x), "t": o.t, "s": list(o.s), "r": o.r, "y": o.y}) + "\n")


def read_jsonl(path: str | Path, d_x: int | None = None, d_s: int | None = None) -> Dataset:
    obs = []
    with open(path) as fh:
        for line, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            rec = json.loads(raw)
            if rec["r"] == 0 and rec.get("y") is not None:
                raise DataError(f"line {line}: unlabelled unit (r=0) has a recorded y")
            obs.append(Observation(tuple(rec["x"]), int(rec["t"]), tuple(rec["s"]), int(rec["r"]), rec.get("y")))
    return Dataset.from_observations(obs, d_x=d_x, d_s=d_s)


def read_dataset(path: str | Path) -> Dataset:
    p = Path(path)
    return read_jsonl(p) if p.suffix in (".jsonl", ".ndjson") else read_csv(p)


def write_dataset(dataset: Dataset, path: str | Path) -> None:
    p = Path(path)
    (write_jsonl if p.suffix in (".jsonl", ".ndjson") else write_csv)(dataset, p)
