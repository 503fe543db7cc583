"""Train/test partitions and training-corpus assembly for strategies S1-S4.

Two evaluation protocols exist: a seeded random 80/20 split and 3x3 spatial
block cross-validation (fold k tests block k, trains on the rest). Strategy
assembly widens the training corpus across years (S2), cities (S3) or both
(S4) with proportional subsampling to a row budget, and is audited against
row-identity leakage into the target test fold. Under the spatial protocol,
rows of the target block are excluded from same-city sources in *all* years,
since blocks are geographic locations.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PROTOCOLS = ("random", "spatial")
STRATEGIES = ("S1", "S2", "S3", "S4")

DEFAULT_BUDGET = 480_000


class LeakageError(RuntimeError):
    """Raised when assembled training rows intersect the target test fold."""


@dataclass
class SampleTable:
    """Flattened pixel records: features plus both labels and the block id.

    Parallel arrays; a row's identity is the (city, year, cell) triple.
    """

    city: np.ndarray      # U8 strings, (n,)
    year: np.ndarray      # int32, (n,)
    cell: np.ndarray      # int64 flat cell index, (n,)
    block: np.ndarray     # uint8 block index 0..8, (n,)
    x: np.ndarray         # float64 features, (n, d)
    y_cls: np.ndarray     # uint8, (n,)
    y_reg: np.ndarray     # int32 sub-pixel counts, (n,)

    def __post_init__(self):
        n = len(self.cell)
        for name in ("city", "year", "block", "y_cls", "y_reg"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} length mismatch")
        if self.x.shape[0] != n:
            raise ValueError("feature matrix row count mismatch")
        if np.any((self.y_cls > 0) != (self.y_reg > 0)):
            raise ValueError("y_cls inconsistent with y_reg > 0")

    @property
    def n(self) -> int:
        return len(self.cell)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx: np.ndarray) -> "SampleTable":
        return SampleTable(
            city=self.city[idx],
            year=self.year[idx],
            cell=self.cell[idx],
            block=self.block[idx],
            x=self.x[idx],
            y_cls=self.y_cls[idx],
            y_reg=self.y_reg[idx],
        )

    def with_features(self, x: np.ndarray) -> "SampleTable":
        return SampleTable(self.city, self.year, self.cell, self.block, x, self.y_cls, self.y_reg)

    def row_keys(self) -> np.ndarray:
        """Unique row identities as "city|year|cell" strings."""
        return np.array(
            [f"{c}|{y}|{i}" for c, y, i in zip(self.city, self.year, self.cell)], dtype=object
        )


def concat_tables(tables) -> SampleTable:
    tables = list(tables)
    if not tables:
        raise ValueError("nothing to concatenate")
    return SampleTable(
        city=np.concatenate([t.city for t in tables]),
        year=np.concatenate([t.year for t in tables]),
        cell=np.concatenate([t.cell for t in tables]),
        block=np.concatenate([t.block for t in tables]),
        x=np.vstack([t.x for t in tables]),
        y_cls=np.concatenate([t.y_cls for t in tables]),
        y_reg=np.concatenate([t.y_reg for t in tables]),
    )


@dataclass(frozen=True)
class Split:
    """A train/test partition of one table. Row ids are table positions."""

    protocol: str
    fold: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    seed: int

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if np.intersect1d(self.train_idx, self.test_idx).size:
            raise ValueError("train/test overlap")


def random_split(table: SampleTable, seed: int) -> Split:
    """Seeded uniform 80/20 split; train size = round(0.8 n) exactly."""
    n = table.n
    if n < 5:
        raise ValueError(f"need at least 5 rows, got {n}")
    n_train = (4 * n + 2) // 5  # round(0.8 n), exact in integers
    perm = np.random.default_rng(seed).permutation(n)
    return Split(
        protocol="random",
        fold=0,
        train_idx=np.sort(perm[:n_train]),
        test_idx=np.sort(perm[n_train:]),
        seed=seed,
    )


def spatial_folds(table: SampleTable) -> list[Split]:
    """One fold per populated block: fold k tests block k, trains on the other
    blocks. Blocks without rows are skipped (derivable as 0..8 minus the
    returned fold indices)."""
    folds = []
    all_idx = np.arange(table.n)
    for k in range(9):
        test = all_idx[table.block == k]
        if test.size == 0:
            continue
        train = all_idx[table.block != k]
        folds.append(Split(protocol="spatial", fold=k, train_idx=train, test_idx=test, seed=0))
    return folds


def _source_seed(seed: int, city: str, year: int) -> list[int]:
    return [seed & 0xFFFFFFFF, zlib.crc32(f"{city}|{year}".encode())]


def _largest_remainder(sizes: np.ndarray, budget: int) -> np.ndarray:
    """Integer allocations proportional to sizes summing exactly to budget;
    ties broken by source order."""
    quotas = budget * sizes / sizes.sum()
    take = np.floor(quotas).astype(np.int64)
    short = budget - take.sum()
    if short > 0:
        frac = quotas - take
        order = np.lexsort((np.arange(len(sizes)), -frac))
        take[order[:short]] += 1
    return take


def assemble_strategy(
    code: str,
    target_city: str,
    target_year: int,
    corpus: dict[tuple[str, int], SampleTable],
    split: Split,
    budget: int = DEFAULT_BUDGET,
    seed: int = 0,
) -> SampleTable:
    """Build the training table for one strategy against one target fold.

    corpus maps (city, year) to that pair's full SampleTable and must contain
    the target pair. For S2-S4 the per-source row counts are aligned to
    `budget` by largest-remainder proportional sampling (exact-shares +-1 row);
    S1 ignores the budget and trains on the target's own train partition.
    """
    if code not in STRATEGIES:
        raise ValueError(f"unknown strategy {code!r}")
    target_key = (target_city, target_year)
    if target_key not in corpus:
        raise ValueError(f"target pair {target_key} missing from corpus")
    target_table = corpus[target_key]
    test_block = split.fold if split.protocol == "spatial" else None

    if code == "S1":
        return target_table.subset(split.train_idx)

    # Candidate sources in deterministic key order.
    sources: list[tuple[tuple[str, int], SampleTable]] = []
    for key in sorted(corpus):
        city, year = key
        if code == "S2" and city != target_city:
            continue
        if code == "S3" and (city == target_city or year != target_year):
            continue
        if code == "S4" and key == target_key:
            continue
        if key == target_key:
            if code == "S2":
                sources.append((key, target_table.subset(split.train_idx)))
            continue
        table = corpus[key]
        if city == target_city and test_block is not None:
            keep = np.flatnonzero(table.block != test_block)
            table = table.subset(keep)
        if table.n:
            sources.append((key, table))

    if not sources:
        raise ValueError(f"no source rows for strategy {code} on target {target_key}")

    sizes = np.array([t.n for _, t in sources], dtype=np.int64)
    total = int(sizes.sum())
    if total <= budget:
        return concat_tables(t for _, t in sources)

    takes = _largest_remainder(sizes, budget)
    parts = []
    for (key, table), k in zip(sources, takes):
        if k == 0:
            continue
        rng = np.random.default_rng(_source_seed(seed, *key))
        parts.append(table.subset(np.sort(rng.choice(table.n, size=int(k), replace=False))))
    return concat_tables(parts)


def audit_no_leakage(
    train: SampleTable,
    test: SampleTable,
    target_city: str,
    test_block: int | None = None,
) -> None:
    """Raise LeakageError if any test row identity appears in training, or
    (spatial protocol) any training row from the target city sits in the
    tested block."""
    overlap = np.intersect1d(train.row_keys().astype(str), test.row_keys().astype(str))
    if overlap.size:
        raise LeakageError(f"{overlap.size} test rows leaked into training (e.g. {overlap[0]})")
    if test_block is not None:
        bad = (train.city == target_city) & (train.block == test_block)
        if np.any(bad):
            raise LeakageError(
                f"{int(bad.sum())} training rows from target city occupy tested block {test_block}"
            )


# ---------------------------------------------------------------------------
# Split audit serialization
# ---------------------------------------------------------------------------

def split_to_json(split: Split, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(
            {
                "protocol": split.protocol,
                "fold": split.fold,
                "seed": split.seed,
                "train_idx": split.train_idx.tolist(),
                "test_idx": split.test_idx.tolist(),
            }
        )
    )


def split_from_json(path: str | Path) -> Split:
    d = json.loads(Path(path).read_text())
    return Split(
        protocol=d["protocol"],
        fold=d["fold"],
        train_idx=np.asarray(d["train_idx"], dtype=np.int64),
        test_idx=np.asarray(d["test_idx"], dtype=np.int64),
        seed=d["seed"],
    )
