"""Raster grid primitives shared by every stage of the pipeline.

A Grid is one band of float32 values on a regular cell grid with a NoData
sentinel (exact float equality, default -9999.0). This module provides
sentinel masking, the deterministic 3x3 block partition used by spatial
cross-validation, window downsampling, the adaptive downsampling factor for
autocorrelation statistics, and the BIF single-band container format
(little-endian float32 + JSON sidecar).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

DEFAULT_NODATA = -9999.0
DEFAULT_CELL_SIZE_M = 10.0

#: Largest downsampling factor applied before autocorrelation statistics.
MAX_DOWNSAMPLE_FACTOR = 8

BIF_SIDECAR_KEYS = ("width", "height", "cell_size_m", "nodata", "band_name", "city_code", "year")


@dataclass(frozen=True)
class Grid:
    """Single-band raster. Values are float32, shape (height, width), immutable."""

    width: int
    height: int
    values: np.ndarray
    cell_size_m: float = DEFAULT_CELL_SIZE_M
    nodata: float = DEFAULT_NODATA
    city_code: str = "UNK"
    year: int = 0
    band_name: str = "band"

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float32)
        if vals.ndim == 1:
            if vals.size != self.width * self.height:
                raise ValueError(
                    f"values length {vals.size} != width*height {self.width * self.height}"
                )
            vals = vals.reshape(self.height, self.width)
        elif vals.shape != (self.height, self.width):
            raise ValueError(f"values shape {vals.shape} != (height, width) ({self.height}, {self.width})")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    def valid_mask(self) -> np.ndarray:
        """Boolean (height, width) mask of non-sentinel cells."""
        return self.values != np.float32(self.nodata)

    def same_geometry(self, other: "Grid") -> bool:
        return (
            self.width == other.width
            and self.height == other.height
            and self.cell_size_m == other.cell_size_m
        )

    def with_values(self, values: np.ndarray, band_name: str | None = None) -> "Grid":
        return replace(self, values=values, band_name=band_name or self.band_name)


@dataclass(frozen=True)
class BlockId:
    """One of the nine contiguous rectangles of the 3x3 spatial partition."""

    row_band: int
    col_band: int

    def __post_init__(self):
        if not (0 <= self.row_band <= 2 and 0 <= self.col_band <= 2):
            raise ValueError(f"band indices out of range: ({self.row_band}, {self.col_band})")

    @property
    def index(self) -> int:
        return self.row_band * 3 + self.col_band


def mask_nodata(grid: Grid) -> np.ndarray:
    """Flat indices (row-major) of all non-sentinel cells."""
    return np.flatnonzero(grid.valid_mask().ravel())


def _band_edges(extent: int) -> tuple[int, int]:
    # Band b covers [floor(b*extent/3), floor((b+1)*extent/3)).
    return extent // 3, (2 * extent) // 3


def block_of(row: int, col: int, height: int, width: int) -> BlockId:
    """Block containing cell (row, col); bands split extents at floor(b*extent/3)."""
    if not (0 <= row < height and 0 <= col < width):
        raise ValueError(f"cell ({row}, {col}) outside {height}x{width} grid")
    r1, r2 = _band_edges(height)
    c1, c2 = _band_edges(width)
    row_band = 0 if row < r1 else (1 if row < r2 else 2)
    col_band = 0 if col < c1 else (1 if col < c2 else 2)
    return BlockId(row_band, col_band)


def block_index_map(height: int, width: int) -> np.ndarray:
    """(height, width) uint8 map of block indices 0..8 (vectorised block_of)."""
    r1, r2 = _band_edges(height)
    c1, c2 = _band_edges(width)
    rows = np.digitize(np.arange(height), [r1, r2]).astype(np.uint8)
    cols = np.digitize(np.arange(width), [c1, c2]).astype(np.uint8)
    return rows[:, None] * 3 + cols[None, :]


def downsample(grid: Grid, factor: int, reducer: str = "mean") -> Grid:
    """Reduce factor x factor windows; sentinel cells are excluded, all-sentinel
    windows stay sentinel. reducer is "mean" or "max"."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if reducer not in ("mean", "max"):
        raise ValueError(f"unknown reducer {reducer!r}")
    h2 = -(-grid.height // factor)
    w2 = -(-grid.width // factor)
    nod = np.float32(grid.nodata)
    padded = np.full((h2 * factor, w2 * factor), nod, dtype=np.float32)
    padded[: grid.height, : grid.width] = grid.values
    windows = (
        padded.reshape(h2, factor, w2, factor).transpose(0, 2, 1, 3).reshape(h2, w2, factor * factor)
    )
    valid = windows != nod
    counts = valid.sum(axis=-1)
    if reducer == "mean":
        sums = np.where(valid, windows, np.float32(0)).astype(np.float64).sum(axis=-1)
        out = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
        out = out.astype(np.float32)
    else:
        out = np.where(valid, windows, np.float32(-np.inf)).max(axis=-1)
    out[counts == 0] = nod
    return Grid(
        width=w2,
        height=h2,
        values=out,
        cell_size_m=grid.cell_size_m * factor,
        nodata=grid.nodata,
        city_code=grid.city_code,
        year=grid.year,
        band_name=grid.band_name,
    )


def adaptive_factor(n_valid: int, cap: int) -> int:
    """Smallest integer f >= 1 with ceil(n_valid / f^2) <= cap, clamped to [1, 8].

    Integer arithmetic: f^2 >= n/cap iff f^2 >= ceil(n/cap) since f^2 is integral.
    """
    if cap <= 0:
        raise ValueError(f"cap must be positive, got {cap}")
    if n_valid <= cap:
        return 1
    q = -(-n_valid // cap)
    f = math.isqrt(q)
    if f * f < q:
        f += 1
    return min(max(f, 1), MAX_DOWNSAMPLE_FACTOR)


# ---------------------------------------------------------------------------
# BIF container: <name>.bif (little-endian float32, row-major) + <name>.json
# ---------------------------------------------------------------------------

def write_bif(grid: Grid, base_path: str | Path, extra: dict | None = None) -> Path:
    """Write grid as <base>.bif + <base>.json. `extra` adds sidecar fields
    (e.g. an "imputed" flag) beyond the required schema. Returns the .bif path."""
    base = Path(base_path)
    if base.suffix == ".bif":
        base = base.with_suffix("")
    bif = base.with_suffix(".bif")
    bif.parent.mkdir(parents=True, exist_ok=True)
    grid.values.astype("<f4").tofile(bif)
    sidecar = {
        "width": grid.width,
        "height": grid.height,
        "cell_size_m": grid.cell_size_m,
        "nodata": grid.nodata,
        "band_name": grid.band_name,
        "city_code": grid.city_code,
        "year": grid.year,
    }
    if extra:
        sidecar.update(extra)
    base.with_suffix(".json").write_text(json.dumps(sidecar, indent=1))
    return bif


def read_bif(base_path: str | Path) -> Grid:
    """Read a grid written by write_bif; round-trips bit-exactly."""
    base = Path(base_path)
    if base.suffix == ".bif":
        base = base.with_suffix("")
    meta = json.loads(base.with_suffix(".json").read_text())
    missing = [k for k in BIF_SIDECAR_KEYS if k not in meta]
    if missing:
        raise ValueError(f"sidecar {base}.json missing keys: {missing}")
    values = np.fromfile(base.with_suffix(".bif"), dtype="<f4")
    return Grid(
        width=meta["width"],
        height=meta["height"],
        values=values,
        cell_size_m=meta["cell_size_m"],
        nodata=meta["nodata"],
        city_code=meta["city_code"],
        year=meta["year"],
        band_name=meta["band_name"],
    )
