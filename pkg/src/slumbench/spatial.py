"""Spatial-structure validation: Queen-contiguity weights, global and
residual Moran's I with permutation inference, LISA quadrant maps, binary
SSIM and aggregate area error.

Weights are row-standardised Queen contiguity over valid cells (isolates
keep a zero row and are flagged). Global Moran permutation p-values are
two-sided on |I| with the add-one convention; LISA uses conditional
permutation (hold the focal cell, draw its neighbours from the remaining
cells) with the folded one-tail p of the smaller tail, matching the usual
local-Moran convention. Permutation streams are seeded per replicate index,
so results do not depend on scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .grid import Grid

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_L = 1.0
SSIM_WIN = 7

MORAN_CELL_CAP = 600_000
LISA_CELL_CAP = 250_000

LISA_CODES = {"NS": 0, "HH": 1, "LL": 2, "HL": 3, "LH": 4}
LISA_NAMES = {v: k for k, v in LISA_CODES.items()}


@dataclass(frozen=True)
class SpatialWeights:
    """Sparse row-standardised Queen weights over the valid cells of a grid.

    Cell i's neighbours are neighbors[indptr[i]:indptr[i+1]], each with
    weight 1/degree(i); rows of isolated cells sum to zero.
    """

    n: int
    indptr: np.ndarray     # (n+1,)
    neighbors: np.ndarray  # (n_edges,) compact cell ids
    weights: np.ndarray    # (n_edges,)
    cell_ids: np.ndarray   # (n,) flat indices into the source grid

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    @property
    def isolates(self) -> np.ndarray:
        return np.flatnonzero(self.degrees == 0)

    @property
    def s0(self) -> float:
        return float(self.weights.sum())

    def lag(self, z: np.ndarray) -> np.ndarray:
        """Row-standardised spatial lag: mean of each cell's neighbours."""
        contrib = self.weights * z[self.neighbors]
        src = np.repeat(np.arange(self.n), self.degrees)
        return np.bincount(src, weights=contrib, minlength=self.n)

    def dense(self) -> np.ndarray:
        """Full (n, n) weight matrix; test-scale only."""
        w = np.zeros((self.n, self.n))
        src = np.repeat(np.arange(self.n), self.degrees)
        w[src, self.neighbors] = self.weights
        return w


def queen_weights(height: int, width: int, valid: np.ndarray | None = None) -> SpatialWeights:
    """Row-standardised 8-neighbour weights over the valid cells of an
    height x width grid. valid is a boolean (height, width) mask (default all)."""
    if valid is None:
        valid = np.ones((height, width), dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != (height, width):
        raise ValueError("valid mask shape mismatch")
    compact = np.full(height * width, -1, dtype=np.int64)
    cell_ids = np.flatnonzero(valid.ravel())
    n = cell_ids.size
    compact[cell_ids] = np.arange(n)
    compact2d = compact.reshape(height, width)

    src_list, dst_list = [], []
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            r0, r1 = max(0, dr), height + min(0, dr)
            a = compact2d[r0:r1, max(0, dc) : width + min(0, dc)]
            b = compact2d[r0 - dr : r1 - dr, max(0, dc) - dc : width + min(0, dc) - dc]
            ok = (a >= 0) & (b >= 0)
            src_list.append(a[ok])
            dst_list.append(b[ok])
    src = np.concatenate(src_list)
    dst = np.concatenate(dst_list)
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    degrees = np.bincount(src, minlength=n)
    indptr = np.concatenate([[0], np.cumsum(degrees)]).astype(np.int64)
    weights = 1.0 / np.repeat(np.maximum(degrees, 1), degrees)
    return SpatialWeights(n=n, indptr=indptr, neighbors=dst, weights=weights, cell_ids=cell_ids)


@dataclass(frozen=True)
class MoranResult:
    I: float
    expected: float        # -1/(n-1)
    p_perm: float
    n_perm: int
    perm_mean: float
    perm_std: float


def _moran_stat(z: np.ndarray, w: SpatialWeights, denom: float) -> float:
    return w.n / w.s0 * float(np.dot(z, w.lag(z))) / denom


def morans_i(values: np.ndarray, w: SpatialWeights, n_perm: int = 99, seed: int = 0) -> MoranResult:
    """Global Moran's I with permutation inference (two-sided on |I|,
    add-one p)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size != w.n:
        raise ValueError("values length must match weights")
    if w.n < 3:
        raise ValueError("need at least 3 cells")
    z = v - v.mean()
    denom = float(np.dot(z, z))
    if denom == 0.0:
        raise ValueError("constant field: Moran's I undefined")
    i_obs = _moran_stat(z, w, denom)
    rng = np.random.default_rng(seed)
    sims = np.empty(n_perm)
    for r in range(n_perm):
        zp = rng.permutation(z)
        sims[r] = _moran_stat(zp, w, denom)
    p = (np.sum(np.abs(sims) >= abs(i_obs)) + 1) / (n_perm + 1)
    return MoranResult(
        I=i_obs,
        expected=-1.0 / (w.n - 1),
        p_perm=float(p),
        n_perm=n_perm,
        perm_mean=float(sims.mean()),
        perm_std=float(sims.std()),
    )


def residual_moran(gt: np.ndarray, pred: np.ndarray, w: SpatialWeights,
                   n_perm: int = 99, seed: int = 0) -> MoranResult:
    """Moran's I of the prediction residual (pred - gt)."""
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if gt.shape != pred.shape:
        raise ValueError("gt/pred length mismatch")
    return morans_i(pred - gt, w, n_perm=n_perm, seed=seed)


@dataclass(frozen=True)
class LisaMap:
    """Per-cell local Moran classification over the weights' cells."""

    quadrant: np.ndarray   # int8 codes per LISA_CODES
    local_i: np.ndarray
    p: np.ndarray
    alpha: float
    n_perm: int

    def counts(self) -> dict[str, int]:
        return {name: int(np.sum(self.quadrant == code)) for name, code in LISA_CODES.items()}


def lisa(values: np.ndarray, w: SpatialWeights, n_perm: int = 99, seed: int = 0,
         alpha: float = 0.05) -> LisaMap:
    """Local Moran's I with conditional permutation.

    local_i = z_i * lag(z)_i on standardised values. For each replicate a
    fresh permutation of "other cell" slots is drawn (seeded by replicate
    index) and every cell's neighbour values are resampled from it; the
    folded one-tail count gives the p-value. Cells with p >= alpha and
    isolates are NS; quadrants come from the signs of z and its lag.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size != w.n:
        raise ValueError("values length must match weights")
    sd = v.std()
    if sd == 0.0:
        raise ValueError("constant field: LISA undefined")
    z = (v - v.mean()) / sd
    lag_obs = w.lag(z)
    local_i = z * lag_obs

    deg = w.degrees
    max_k = int(deg.max()) if w.n else 0
    if max_k == 0:
        return LisaMap(quadrant=np.zeros(w.n, dtype=np.int8), local_i=local_i,
                       p=np.ones(w.n), alpha=alpha, n_perm=n_perm)
    has_nb = deg > 0
    k = np.maximum(deg, 1)
    cells = np.arange(w.n)
    larger = np.zeros(w.n, dtype=np.int64)
    for r in range(n_perm):
        rng = np.random.default_rng([seed & 0xFFFFFFFF, r])
        pi = rng.permutation(w.n - 1)[:max_k]
        # slot j of cell i draws cell (pi[j] + (pi[j] >= i)): uniform over others
        ids = pi[None, :] + (pi[None, :] >= cells[:, None])
        zs = z[ids]
        csum = np.cumsum(zs, axis=1)
        lag_perm = csum[cells, k - 1] / k
        i_perm = z * lag_perm
        larger += (i_perm >= local_i).astype(np.int64)
    larger = np.minimum(larger, n_perm - larger)
    p = (larger + 1) / (n_perm + 1)

    quad = np.zeros(w.n, dtype=np.int8)
    sig = (p < alpha) & has_nb
    hi = z > 0
    lag_hi = lag_obs > 0
    quad[sig & hi & lag_hi] = LISA_CODES["HH"]
    quad[sig & ~hi & ~lag_hi] = LISA_CODES["LL"]
    quad[sig & hi & ~lag_hi] = LISA_CODES["HL"]
    quad[sig & ~hi & lag_hi] = LISA_CODES["LH"]
    p = np.where(has_nb, p, 1.0)
    quad[~has_nb] = LISA_CODES["NS"]
    return LisaMap(quadrant=quad, local_i=local_i, p=p, alpha=alpha, n_perm=n_perm)


# ---------------------------------------------------------------------------
# SSIM and area error on binary maps
# ---------------------------------------------------------------------------

def ssim_binary(gt: Grid, pred: Grid, win: int = SSIM_WIN) -> float:
    """Mean SSIM over uniform win x win sliding windows (stride 1,
    edge-cropped) with K1=0.01, K2=0.03, L=1. Windows touching sentinel
    cells in either map are excluded."""
    if not gt.same_geometry(pred):
        raise ValueError("geometry mismatch")
    if gt.height < win or gt.width < win:
        raise ValueError(f"grid smaller than {win}x{win} window")
    vx = gt.valid_mask()
    vy = pred.valid_mask()
    both = vx & vy
    x = np.where(both, gt.values.astype(np.float64), 0.0)
    y = np.where(both, pred.values.astype(np.float64), 0.0)

    r = win // 2
    crop = (slice(r, -r), slice(r, -r))
    frac_valid = uniform_filter(both.astype(np.float64), size=win)[crop]
    full = frac_valid > 1.0 - 1e-9
    if not full.any():
        raise ValueError("no fully valid windows")

    mu_x = uniform_filter(x, size=win)[crop]
    mu_y = uniform_filter(y, size=win)[crop]
    exx = uniform_filter(x * x, size=win)[crop]
    eyy = uniform_filter(y * y, size=win)[crop]
    exy = uniform_filter(x * y, size=win)[crop]
    var_x = exx - mu_x * mu_x
    var_y = eyy - mu_y * mu_y
    cov = exy - mu_x * mu_y

    c1 = (SSIM_K1 * SSIM_L) ** 2
    c2 = (SSIM_K2 * SSIM_L) ** 2
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    )
    return float(ssim_map[full].mean())


def area_pct_err(gt: Grid, pred: Grid) -> float:
    """|pred area - gt area| / gt area x 100, over cells valid in both maps."""
    if not gt.same_geometry(pred):
        raise ValueError("geometry mismatch")
    both = gt.valid_mask() & pred.valid_mask()
    gt_area = float(np.sum(gt.values[both] > 0.5))
    pred_area = float(np.sum(pred.values[both] > 0.5))
    if gt_area == 0:
        raise ValueError("zero ground-truth area")
    return abs(pred_area - gt_area) / gt_area * 100.0
