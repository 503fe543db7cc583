"""Supervision labels built from sub-pixel presence masks.

A SubpixelMask covers the parent cell grid at `subfactor` sub-pixels per
cell edge (default 17, i.e. 289 sub-pixels per cell). Aggregation yields a
LabelPair per cell: an integer slum sub-pixel count (the regression target),
its ratio to subfactor^2 (the density in [0, 1]) and a binary presence flag
(count > 0). Overlapping label sources merge by per-cell maximum.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import DEFAULT_CELL_SIZE_M, DEFAULT_NODATA

DEFAULT_SUBFACTOR = 17

#: Density histogram bin edges: {0}, (0, .3], (.3, .6], (.6, .9], (.9, 1].
DENSITY_BIN_EDGES = (0.3, 0.6, 0.9)


@dataclass(frozen=True)
class SubpixelMask:
    """Binary presence mask at sub-pixel resolution, aligned to a cell grid."""

    width: int            # parent cells
    height: int           # parent cells
    bits: np.ndarray      # bool, (height*subfactor, width*subfactor)
    subfactor: int = DEFAULT_SUBFACTOR
    cell_size_m: float = DEFAULT_CELL_SIZE_M
    city_code: str = "UNK"
    year: int = 0

    def __post_init__(self):
        bits = np.ascontiguousarray(self.bits, dtype=bool)
        expected = (self.height * self.subfactor, self.width * self.subfactor)
        if bits.shape != expected:
            raise ValueError(f"mask shape {bits.shape} != {expected} (cells x subfactor)")
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    @property
    def subpixels_per_cell(self) -> int:
        return self.subfactor * self.subfactor


@dataclass(frozen=True)
class LabelPair:
    """Per-cell classification/regression supervision.

    count holds the slum sub-pixel count in 0..subfactor^2; density and cls
    are derived so the invariants density = count/subfactor^2 and
    cls = (count > 0) hold by construction.
    """

    width: int
    height: int
    count: np.ndarray     # int32, (height, width)
    subfactor: int = DEFAULT_SUBFACTOR
    cell_size_m: float = DEFAULT_CELL_SIZE_M
    city_code: str = "UNK"
    year: int = 0

    def __post_init__(self):
        count = np.ascontiguousarray(self.count, dtype=np.int32)
        if count.shape != (self.height, self.width):
            raise ValueError(f"count shape {count.shape} != ({self.height}, {self.width})")
        n_max = self.subfactor * self.subfactor
        if count.min(initial=0) < 0 or count.max(initial=0) > n_max:
            raise ValueError(f"counts must lie in [0, {n_max}]")
        count.flags.writeable = False
        object.__setattr__(self, "count", count)

    @property
    def cls(self) -> np.ndarray:
        return (self.count > 0).astype(np.uint8)

    @property
    def density(self) -> np.ndarray:
        return self.count.astype(np.float64) / (self.subfactor * self.subfactor)

    def same_geometry(self, other: "LabelPair") -> bool:
        return (
            self.width == other.width
            and self.height == other.height
            and self.subfactor == other.subfactor
        )


def aggregate(mask: SubpixelMask) -> LabelPair:
    """Count set sub-pixels per cell window."""
    s = mask.subfactor
    count = (
        mask.bits.reshape(mask.height, s, mask.width, s)
        .sum(axis=(1, 3))
        .astype(np.int32)
    )
    return LabelPair(
        width=mask.width,
        height=mask.height,
        count=count,
        subfactor=mask.subfactor,
        cell_size_m=mask.cell_size_m,
        city_code=mask.city_code,
        year=mask.year,
    )


def merge_overlap(a: LabelPair, b: LabelPair) -> LabelPair:
    """Merge overlapping label sources: per-cell maximum count (and therefore
    maximum cls and density)."""
    if not a.same_geometry(b):
        raise ValueError("label geometry mismatch")
    return LabelPair(
        width=a.width,
        height=a.height,
        count=np.maximum(a.count, b.count),
        subfactor=a.subfactor,
        cell_size_m=a.cell_size_m,
        city_code=a.city_code,
        year=a.year,
    )


def density_histogram(labels: LabelPair, valid: np.ndarray) -> np.ndarray:
    """Shares of valid cells in the five density bins {0}, (0,.3], (.3,.6],
    (.6,.9], (.9,1]. `valid` is a boolean mask or flat index array."""
    valid = np.asarray(valid)
    if valid.dtype == bool:
        idx = np.flatnonzero(valid.ravel())
    else:
        idx = valid.ravel()
    if idx.size == 0:
        raise ValueError("empty valid set")
    count = labels.count.ravel()[idx]
    density = count.astype(np.float64) / (labels.subfactor * labels.subfactor)
    shares = np.zeros(5, dtype=np.float64)
    zero = count == 0
    shares[0] = zero.mean()
    pos = density[~zero]
    if pos.size:
        # right-closed bins: (0,.3] -> 0, (.3,.6] -> 1, (.6,.9] -> 2, (.9,1] -> 3
        binned = np.digitize(pos, DENSITY_BIN_EDGES, right=True)
        shares[1:] = np.bincount(binned, minlength=4) / idx.size
    return shares


# ---------------------------------------------------------------------------
# Mask container: bit-packed binary + BIF-style sidecar with "subfactor"
# ---------------------------------------------------------------------------

def write_mask(mask: SubpixelMask, base_path: str | Path) -> Path:
    base = Path(base_path)
    if base.suffix == ".bits":
        base = base.with_suffix("")
    bits_path = base.with_suffix(".bits")
    bits_path.parent.mkdir(parents=True, exist_ok=True)
    np.packbits(mask.bits.ravel()).tofile(bits_path)
    sidecar = {
        "width": mask.width,
        "height": mask.height,
        "cell_size_m": mask.cell_size_m,
        "nodata": DEFAULT_NODATA,
        "band_name": "mask",
        "city_code": mask.city_code,
        "year": mask.year,
        "subfactor": mask.subfactor,
    }
    base.with_suffix(".json").write_text(json.dumps(sidecar, indent=1))
    return bits_path


def read_mask(base_path: str | Path) -> SubpixelMask:
    base = Path(base_path)
    if base.suffix == ".bits":
        base = base.with_suffix("")
    meta = json.loads(base.with_suffix(".json").read_text())
    sub = meta["subfactor"]
    shape = (meta["height"] * sub, meta["width"] * sub)
    packed = np.fromfile(base.with_suffix(".bits"), dtype=np.uint8)
    bits = np.unpackbits(packed)[: shape[0] * shape[1]].astype(bool).reshape(shape)
    return SubpixelMask(
        width=meta["width"],
        height=meta["height"],
        bits=bits,
        subfactor=sub,
        cell_size_m=meta["cell_size_m"],
        city_code=meta["city_code"],
        year=meta["year"],
    )
