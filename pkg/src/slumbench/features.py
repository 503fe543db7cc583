"""Per-pixel feature vector assembly.

Feature bands are grouped into five fixed categories with pinned widths
(AEF 64, NTL 18, RS 3, Spatial 9, POI 24). A combination code C0..C5 picks
a subset of categories; stacking concatenates bands in the fixed order
AEF | NTL | RS | Spatial | POI restricted to the combination. Robust
scaling (median / IQR, fitted on training rows only) is provided for the
linearly sensitive models; tree ensembles and the MLP consume raw values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import Grid, read_bif

CATEGORY_ORDER = ("AEF", "NTL", "RS", "Spatial", "POI")
CATEGORY_DIMS = {"AEF": 64, "NTL": 18, "RS": 3, "Spatial": 9, "POI": 24}

_COMBO_CATEGORIES = {
    "C0": ("AEF",),
    "C1": ("AEF", "NTL"),
    "C2": ("AEF", "RS"),
    "C3": ("AEF", "Spatial"),
    "C4": ("AEF", "POI"),
    "C5": ("AEF", "NTL", "RS", "Spatial", "POI"),
}


@dataclass(frozen=True)
class ComboCode:
    """A named feature combination (C0..C5) with its category list and width."""

    code: str
    categories: tuple[str, ...]

    @property
    def total_dim(self) -> int:
        return sum(CATEGORY_DIMS[c] for c in self.categories)


def combo(code: str) -> ComboCode:
    if code not in _COMBO_CATEGORIES:
        raise ValueError(f"unknown combination code {code!r} (expected C0..C5)")
    return ComboCode(code, _COMBO_CATEGORIES[code])


def combo_columns(code: str) -> np.ndarray:
    """Column indices of combination `code` within a full 118-wide stack."""
    offsets = {}
    pos = 0
    for cat in CATEGORY_ORDER:
        offsets[cat] = pos
        pos += CATEGORY_DIMS[cat]
    cols = []
    for cat in combo(code).categories:
        cols.extend(range(offsets[cat], offsets[cat] + CATEGORY_DIMS[cat]))
    return np.asarray(cols, dtype=np.intp)


@dataclass(frozen=True)
class FeatureBlock:
    """All bands of one feature category over a shared grid geometry."""

    category: str
    bands: tuple[Grid, ...]

    def __post_init__(self):
        if self.category not in CATEGORY_DIMS:
            raise ValueError(f"unknown category {self.category!r}")
        expected = CATEGORY_DIMS[self.category]
        if len(self.bands) != expected:
            raise ValueError(
                f"category {self.category} needs {expected} bands, got {len(self.bands)}"
            )
        first = self.bands[0]
        for g in self.bands[1:]:
            if not g.same_geometry(first):
                raise ValueError(f"band geometry mismatch within {self.category}")
        object.__setattr__(self, "bands", tuple(self.bands))

    @property
    def dim(self) -> int:
        return len(self.bands)

    def values_at(self, cells: np.ndarray) -> np.ndarray:
        """(len(cells), dim) float64 matrix of band values at flat cell indices."""
        out = np.empty((len(cells), self.dim), dtype=np.float64)
        for j, g in enumerate(self.bands):
            out[:, j] = g.values.ravel()[cells]
        return out

    def valid_mask(self) -> np.ndarray:
        """Cells valid in every band of the category."""
        mask = self.bands[0].valid_mask()
        for g in self.bands[1:]:
            mask &= g.valid_mask()
        return mask


def stack(blocks: dict[str, FeatureBlock], combo_code: ComboCode | str, cells: np.ndarray) -> np.ndarray:
    """Concatenate category blocks at the given flat cell indices in fixed
    order. Stacked cells must be sentinel-free in every selected band."""
    cc = combo(combo_code) if isinstance(combo_code, str) else combo_code
    missing = [c for c in cc.categories if c not in blocks]
    if missing:
        raise ValueError(f"missing feature categories: {missing}")
    geom = blocks[cc.categories[0]].bands[0]
    parts = []
    for cat in cc.categories:
        block = blocks[cat]
        if not block.bands[0].same_geometry(geom):
            raise ValueError(f"geometry mismatch between categories ({cat})")
        vals = block.values_at(cells)
        for j, g in enumerate(block.bands):
            if np.any(vals[:, j] == g.nodata):
                raise ValueError(f"sentinel value in stacked cells: {cat} band {j}")
        parts.append(vals)
    return np.concatenate(parts, axis=1)


# ---------------------------------------------------------------------------
# Robust scaling (median / IQR), fitted on training rows only
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RobustScaleParams:
    median: np.ndarray   # (d,)
    iqr: np.ndarray      # (d,) Q3 - Q1, linear-interpolation quantiles

    def __post_init__(self):
        if np.any(self.iqr < 0):
            raise ValueError("negative IQR")

    @property
    def divisor(self) -> np.ndarray:
        # iqr == 0 -> pass-through centering
        return np.where(self.iqr == 0, 1.0, self.iqr)


def fit_robust_scale(train_rows: np.ndarray) -> RobustScaleParams:
    x = np.asarray(train_rows, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least 2 training rows")
    q1, med, q3 = np.quantile(x, [0.25, 0.5, 0.75], axis=0, method="linear")
    return RobustScaleParams(median=med, iqr=q3 - q1)


def apply_robust_scale(params: RobustScaleParams, rows: np.ndarray) -> np.ndarray:
    x = np.asarray(rows, dtype=np.float64)
    return (x - params.median) / params.divisor


def cross_city_cv(city_means) -> float:
    """Cross-city variability: population SD of city-level means divided by
    the mean of city means."""
    m = np.asarray(list(city_means), dtype=np.float64)
    if m.size < 2:
        raise ValueError("need means from at least 2 cities")
    gm = m.mean()
    if gm == 0:
        raise ValueError("zero global mean")
    return float(m.std() / gm)


# ---------------------------------------------------------------------------
# Feature manifests: JSON mapping category -> band file paths
# ---------------------------------------------------------------------------

def write_feature_manifest(paths_by_category: dict[str, list[str]], path: str | Path) -> None:
    Path(path).write_text(json.dumps(paths_by_category, indent=1))


def load_feature_manifest(path: str | Path) -> dict[str, FeatureBlock]:
    """Load and validate a feature manifest; band paths are relative to the
    manifest location."""
    p = Path(path)
    listing = json.loads(p.read_text())
    blocks = {}
    for cat, band_paths in listing.items():
        if cat not in CATEGORY_DIMS:
            raise ValueError(f"manifest names unknown category {cat!r}")
        if len(band_paths) != CATEGORY_DIMS[cat]:
            raise ValueError(
                f"category {cat} lists {len(band_paths)} bands, expected {CATEGORY_DIMS[cat]}"
            )
        bands = tuple(read_bif(p.parent / bp) for bp in band_paths)
        blocks[cat] = FeatureBlock(category=cat, bands=bands)
    return blocks
