"""Deterministic synthetic worlds for desk-scale evaluation runs.

Ground truth is planted as disk-shaped settlement clusters in sub-pixel
space: full density in the disk core, linearly decaying to zero at the rim.
Sub-pixel counts are realised deterministically (count = round of the
summed per-sub-pixel intensity), which makes the zero-density share and the
high-density share exactly controllable:

  * the zero share is met by placing disks until the target number of
    non-zero cells is reached, shrinking the final disk by bisection;
  * the > 0.9-density share is met by bisecting the core fraction and
    replaying the placement.

Embeddings are a low-rank function of the true density field: `signal_rank`
coefficient maps (density and fixed transforms of it, plus spatially
correlated noise at 1/snr) are mixed through a fixed orthonormal basis,
with small isotropic noise in the remaining dimensions, a per-city affine
drift inside the signal span, and an optional per-year offset. Auxiliary
categories carry category-specific correlation with density; POI bands are
anti-correlated. Everything is keyed on (seed, city, year), so equal seeds
give byte-identical worlds.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .features import CATEGORY_DIMS, FeatureBlock, write_feature_manifest, load_feature_manifest
from .grid import DEFAULT_NODATA, Grid, write_bif
from .labels import SubpixelMask, read_mask, write_mask

_TRAIL_SD = 0.05          # iso noise in non-signal embedding dimensions
_SMOOTH_SIZE = 7          # spatial correlation window for noise fields
_AUX_RHO = {"NTL": 0.25, "RS": 0.55, "Spatial": 0.5, "POI": -0.55}

WORLD_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class SyntheticWorldSpec:
    n_cities: int = 3
    years: tuple = (2021, 2022)
    height: int = 72
    width: int = 72
    cell_size_m: float = 10.0
    subfactor: int = 17
    n_clusters: int = 40            # cap on seeded disk draws per city-year
    cluster_radius: float = 4.0     # mean disk radius, cells
    core_frac: float = 0.85        # full-density core as a fraction of the radius
    zero_share: float | None = 0.893
    high_share: float | None = None  # target share of cells with density > 0.9
    signal_rank: int = 8
    snr: float | None = 4.0        # None -> noiseless embeddings
    drift: float = 0.0             # per-city embedding shift (signal-span units)
    year_jitter: float = 0.0       # per-year cluster + embedding perturbation
    nodata_share: float = 0.0
    ntl_growth_cv: float = 3.0     # cross-city CV target of the NTL growth band
    unlabeled_years: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.zero_share is not None and not 0.0 <= self.zero_share <= 1.0:
            raise ValueError(f"zero_share out of [0, 1]: {self.zero_share}")
        if self.high_share is not None:
            if self.zero_share is None:
                raise ValueError("high_share target requires a zero_share target")
            if not 0.0 <= self.high_share <= 1.0 - self.zero_share:
                raise ValueError("infeasible high_share target")
        if self.n_cities < 1 or self.n_cities > 26:
            raise ValueError("n_cities must be in 1..26")
        if not self.years:
            raise ValueError("need at least one year")

    def city_codes(self) -> list[str]:
        return [f"SY{chr(ord('A') + i)}" for i in range(self.n_cities)]


@dataclass
class CityYear:
    city: str
    year: int
    blocks: dict               # category -> FeatureBlock
    mask: SubpixelMask | None  # None for unlabeled years


@dataclass
class World:
    spec: SyntheticWorldSpec
    city_years: list

    def labeled(self) -> list:
        return [cy for cy in self.city_years if cy.mask is not None]

    def get(self, city: str, year: int) -> CityYear:
        for cy in self.city_years:
            if cy.city == city and cy.year == year:
                return cy
        raise KeyError((city, year))


# ---------------------------------------------------------------------------
# Cluster rendering
# ---------------------------------------------------------------------------

def _render_disk(p_field: np.ndarray, cx: float, cy: float, radius: float,
                 core_frac: float, sub: int) -> None:
    """Max-merge one disk's intensity profile into the sub-pixel field.
    Coordinates and radius are in cell units."""
    hs, ws = p_field.shape
    r_sub = radius * sub
    cx_s, cy_s = cx * sub, cy * sub
    x0 = max(0, int(cx_s - r_sub) - 1)
    x1 = min(ws, int(cx_s + r_sub) + 2)
    y0 = max(0, int(cy_s - r_sub) - 1)
    y1 = min(hs, int(cy_s + r_sub) + 2)
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.ogrid[y0:y1, x0:x1]
    dist = np.sqrt((yy + 0.5 - cy_s) ** 2 + (xx + 0.5 - cx_s) ** 2) / sub
    core = core_frac * radius
    decay = max(radius - core, 1e-9)
    prof = np.clip((radius - dist) / decay, 0.0, 1.0)
    np.maximum(p_field[y0:y1, x0:x1], prof, out=p_field[y0:y1, x0:x1])


def _cell_counts(p_field: np.ndarray, height: int, width: int, sub: int) -> np.ndarray:
    sums = p_field.reshape(height, sub, width, sub).sum(axis=(1, 3))
    return np.rint(sums).astype(np.int32)


def _place_disks(disks, height, width, sub, core_frac, target_nonzero):
    """Render disks until the non-zero cell target is met (None -> all disks).
    The last disk shrinks by bisection instead of overshooting. Returns the
    sub-pixel intensity field and the disks actually placed."""
    p = np.zeros((height * sub, width * sub), dtype=np.float64)
    placed = []
    if target_nonzero is None:
        for cx, cy, r in disks:
            _render_disk(p, cx, cy, r, core_frac, sub)
            placed.append((cx, cy, r))
        return p, placed
    for cx, cy, r in disks:
        nonzero = int(np.count_nonzero(_cell_counts(p, height, width, sub)))
        remaining = target_nonzero - nonzero
        if remaining <= 0:
            break
        trial = np.array(p)
        _render_disk(trial, cx, cy, r, core_frac, sub)
        new = int(np.count_nonzero(_cell_counts(trial, height, width, sub))) - nonzero
        if new <= remaining:
            p = trial
            placed.append((cx, cy, r))
            continue
        # bisect the radius so the increment lands within the remainder
        lo, hi = 0.0, r
        best = None
        for _ in range(24):
            mid = (lo + hi) / 2
            trial = np.array(p)
            _render_disk(trial, cx, cy, mid, core_frac, sub)
            new = int(np.count_nonzero(_cell_counts(trial, height, width, sub))) - nonzero
            if new <= remaining:
                best, lo = trial, mid
            else:
                hi = mid
        if best is not None:
            p = best
            placed.append((cx, cy, lo))
    return p, placed


def _build_mask(spec: SyntheticWorldSpec, rng: np.random.Generator):
    """Plant clusters for one city-year, honouring the zero/high share
    targets. Returns (SubpixelMask, placed disk list)."""
    h, w, sub = spec.height, spec.width, spec.subfactor
    n_sub = sub * sub
    n_cells = h * w
    target_nonzero = None
    if spec.zero_share is not None:
        target_nonzero = int(round((1.0 - spec.zero_share) * n_cells))

    # Oversample candidates: the placement loop stops at the target.
    n_cand = spec.n_clusters if target_nonzero is None else max(spec.n_clusters, 400)
    margin = spec.cluster_radius
    disks = [
        (
            float(rng.uniform(margin, w - margin)),
            float(rng.uniform(margin, h - margin)),
            float(spec.cluster_radius * rng.uniform(0.6, 1.4)),
        )
        for _ in range(n_cand)
    ]
    if spec.year_jitter > 0:
        disks = [
            (cx + float(rng.normal(0, spec.year_jitter)),
             cy + float(rng.normal(0, spec.year_jitter)), r)
            for cx, cy, r in disks
        ]

    def render(core_frac):
        return _place_disks(disks, h, w, sub, core_frac, target_nonzero)

    core_frac = spec.core_frac
    p, placed = render(core_frac)
    if spec.high_share is not None:
        # share of density > 0.9 cells is monotone in the core fraction
        hi_cut = int(np.floor(0.9 * n_sub)) + 1

        def high_share_of(field):
            return np.count_nonzero(_cell_counts(field, h, w, sub) >= hi_cut) / n_cells

        lo_cf, hi_cf = 0.05, 0.98
        for _ in range(14):
            if abs(high_share_of(p) - spec.high_share) <= 0.002:
                break
            if high_share_of(p) < spec.high_share:
                lo_cf = core_frac
            else:
                hi_cf = core_frac
            core_frac = (lo_cf + hi_cf) / 2
            p, placed = render(core_frac)

    counts = _cell_counts(p, h, w, sub)
    # Deterministic realisation: per cell, switch on the `count` highest-
    # intensity sub-pixels (stable argsort; matches the profile shape).
    per_cell = p.reshape(h, sub, w, sub).transpose(0, 2, 1, 3).reshape(n_cells, n_sub)
    order = np.argsort(-per_cell, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.broadcast_to(np.arange(n_sub), (n_cells, n_sub)).copy(), axis=1)
    bits_cells = rank < counts.reshape(-1, 1)
    bits = (
        bits_cells.reshape(h, w, sub, sub).transpose(0, 2, 1, 3).reshape(h * sub, w * sub)
    )
    mask = SubpixelMask(width=w, height=h, bits=bits, subfactor=sub,
                        cell_size_m=spec.cell_size_m)
    return mask, placed


# ---------------------------------------------------------------------------
# Feature synthesis
# ---------------------------------------------------------------------------

def _smooth_unit_field(rng: np.random.Generator, shape) -> np.ndarray:
    """Spatially correlated noise: smoothed white noise, re-standardised."""
    f = uniform_filter(rng.normal(size=shape), size=_SMOOTH_SIZE, mode="reflect")
    sd = f.std()
    return (f - f.mean()) / sd if sd > 1e-12 else np.zeros(shape)


def _standardize(g: np.ndarray) -> np.ndarray:
    sd = g.std()
    return (g - g.mean()) / sd if sd > 1e-12 else np.zeros_like(g)


def _signal_maps(density: np.ndarray, rank: int) -> list:
    d = density
    sm1 = uniform_filter(d, size=3, mode="reflect")
    sm2 = uniform_filter(d, size=9, mode="reflect")
    gy, gx = np.gradient(sm1)
    base = [
        d,
        sm1,
        d * d,
        np.sqrt(d),
        np.hypot(gx, gy),
        sm2,
        (d > 0).astype(np.float64),
        uniform_filter(d * d, size=5, mode="reflect"),
    ]
    maps = [base[i % len(base)] for i in range(rank)]
    return [_standardize(m) for m in maps]


def _orthonormal_basis(seed: int, d: int = 64) -> np.ndarray:
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0xB4515])
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    return q.T  # rows orthonormal


def _grid(values, spec, city, year, name) -> Grid:
    return Grid(width=spec.width, height=spec.height, values=values.astype(np.float32),
                cell_size_m=spec.cell_size_m, nodata=DEFAULT_NODATA,
                city_code=city, year=year, band_name=name)


def _city_year_features(spec, city, ci, year, yi, density, centers, nodata_mask):
    h, w = spec.height, spec.width
    basis = _orthonormal_basis(spec.seed)
    rank = spec.signal_rank
    gains = np.linspace(1.5, 0.8, rank)
    rng = np.random.default_rng([spec.seed & 0xFFFFFFFF, 7, ci, yi])
    rng_city = np.random.default_rng([spec.seed & 0xFFFFFFFF, 11, ci])

    sig = _signal_maps(density, rank)
    coeff = np.empty((h * w, rank))
    noiseless = spec.snr is None
    for j in range(rank):
        c = gains[j] * sig[j]
        if not noiseless:
            c = c + (gains[j] / spec.snr) * _smooth_unit_field(rng, (h, w))
        coeff[:, j] = c.ravel()
    if spec.drift > 0:
        u = rng_city.normal(size=rank)
        coeff += spec.drift * (u / np.linalg.norm(u))[None, :]
    if spec.year_jitter > 0:
        v = rng.normal(size=rank)
        coeff += spec.year_jitter * (v / np.linalg.norm(v))[None, :]
    n_trail = 64 - rank
    trail = np.zeros((h * w, n_trail)) if noiseless else rng.normal(0, _TRAIL_SD, size=(h * w, n_trail))
    embed = coeff @ basis[:rank] + trail @ basis[rank:]

    blocks = {}
    aef_bands = []
    for j in range(64):
        vals = embed[:, j].reshape(h, w).astype(np.float32)
        if nodata_mask is not None:
            vals = np.where(nodata_mask, np.float32(DEFAULT_NODATA), vals)
        aef_bands.append(_grid(vals, spec, city, year, f"aef_{j:02d}"))
    blocks["AEF"] = FeatureBlock("AEF", tuple(aef_bands))

    base_sig = _standardize(uniform_filter(density, size=5, mode="reflect"))
    dist = np.full((h, w), np.hypot(h, w), dtype=np.float64)
    if centers:
        yy, xx = np.mgrid[0:h, 0:w]
        for cx, cy in centers:
            np.minimum(dist, np.hypot(yy + 0.5 - cy, xx + 0.5 - cx), out=dist)
    dist_n = _standardize(dist)

    for cat in ("NTL", "RS", "Spatial", "POI"):
        rho = _AUX_RHO[cat]
        mix = np.sqrt(max(0.0, 1.0 - rho * rho))
        bands = []
        for b in range(CATEGORY_DIMS[cat]):
            name = f"{cat.lower()}_{b:02d}"
            if cat == "NTL" and b == CATEGORY_DIMS[cat] - 1:
                # growth-like band: city multipliers with an exact target CV
                t = spec.ntl_growth_cv * np.sqrt(max(spec.n_cities - 1, 1))
                dev = t if ci == 0 else -t / max(spec.n_cities - 1, 1)
                vals = (1.0 + dev) * (1.0 + 0.05 * _smooth_unit_field(rng, (h, w)))
                name = "ntl_growth"
            elif cat == "Spatial" and b < 3:
                # locational bands from the distance to the nearest cluster core
                variant = (-dist_n, _standardize(np.sqrt(dist - dist.min() + 1e-9)) * -1.0,
                           _standardize(dist**2) * -1.0)[b]
                vals = 0.7 * variant + 0.5 * _smooth_unit_field(rng, (h, w))
            else:
                scale = float(np.exp(rng.normal(0, 0.8)))
                offset = float(rng.normal(0, 2.0))
                vals = (rho * base_sig + mix * _smooth_unit_field(rng, (h, w))) * scale + offset
            vals = vals.astype(np.float32)
            if nodata_mask is not None:
                vals = np.where(nodata_mask, np.float32(DEFAULT_NODATA), vals)
            bands.append(_grid(vals, spec, city, year, name))
        blocks[cat] = FeatureBlock(cat, tuple(bands))
    return blocks


def _nodata_mask(spec, rng) -> np.ndarray | None:
    if spec.nodata_share <= 0:
        return None
    h, w = spec.height, spec.width
    mask = np.zeros((h, w), dtype=bool)
    target = spec.nodata_share * h * w
    while mask.sum() < target:
        bh = int(rng.integers(2, max(3, h // 8)))
        bw = int(rng.integers(2, max(3, w // 8)))
        r0 = int(rng.integers(0, h - bh))
        c0 = int(rng.integers(0, w - bw))
        mask[r0 : r0 + bh, c0 : c0 + bw] = True
    return mask


def synth_world(spec: SyntheticWorldSpec) -> World:
    """Generate the full world deterministically from spec.seed.

    year_jitter = 0 makes years exact replicas of each other (a static
    world); any per-year variation flows exclusively through that knob.
    """
    city_years = []
    for ci, city in enumerate(spec.city_codes()):
        for yi, year in enumerate(spec.years):
            # static worlds reuse the first year's random stream
            yi_eff = yi if spec.year_jitter > 0 else 0
            rng_mask = np.random.default_rng([spec.seed & 0xFFFFFFFF, 3, ci, yi_eff])
            mask, placed = _build_mask(spec, rng_mask)
            mask = SubpixelMask(width=mask.width, height=mask.height, bits=mask.bits,
                                subfactor=mask.subfactor, cell_size_m=mask.cell_size_m,
                                city_code=city, year=year)
            counts = (
                mask.bits.reshape(spec.height, spec.subfactor, spec.width, spec.subfactor)
                .sum(axis=(1, 3))
            )
            density = counts.astype(np.float64) / mask.subpixels_per_cell
            centers = [(cx, cy) for cx, cy, _ in placed]
            nod = _nodata_mask(spec, np.random.default_rng([spec.seed & 0xFFFFFFFF, 5, ci, yi_eff]))
            blocks = _city_year_features(spec, city, ci, year, yi_eff, density, centers, nod)
            labeled = year not in spec.unlabeled_years
            city_years.append(CityYear(city=city, year=year, blocks=blocks,
                                       mask=mask if labeled else None))
    return World(spec=spec, city_years=city_years)


# ---------------------------------------------------------------------------
# World storage: one directory per city-year with BIF bands + manifest
# ---------------------------------------------------------------------------

def write_world(world: World, outdir: str | Path) -> Path:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    listing = []
    for cy in world.city_years:
        sub = out / f"{cy.city}_{cy.year}"
        sub.mkdir(exist_ok=True)
        manifest = {}
        for cat, block in cy.blocks.items():
            paths = []
            for g in block.bands:
                write_bif(g, sub / g.band_name)
                paths.append(f"{g.band_name}.bif")
            manifest[cat] = paths
        write_feature_manifest(manifest, sub / "manifest.json")
        if cy.mask is not None:
            write_mask(cy.mask, sub / "mask")
        listing.append({"city": cy.city, "year": cy.year, "dir": sub.name,
                        "labeled": cy.mask is not None})
    spec_dict = asdict(world.spec)
    spec_dict["years"] = list(spec_dict["years"])
    spec_dict["unlabeled_years"] = list(spec_dict["unlabeled_years"])
    (out / "world.json").write_text(json.dumps(
        {"schema_version": WORLD_SCHEMA_VERSION, "spec": spec_dict, "city_years": listing},
        indent=1))
    return out


def load_world(path: str | Path) -> World:
    root = Path(path)
    meta = json.loads((root / "world.json").read_text())
    if meta.get("schema_version") != WORLD_SCHEMA_VERSION:
        raise ValueError(f"unsupported world schema {meta.get('schema_version')!r}")
    spec_dict = dict(meta["spec"])
    spec_dict["years"] = tuple(spec_dict["years"])
    spec_dict["unlabeled_years"] = tuple(spec_dict["unlabeled_years"])
    spec = SyntheticWorldSpec(**spec_dict)
    city_years = []
    for entry in meta["city_years"]:
        sub = root / entry["dir"]
        blocks = load_feature_manifest(sub / "manifest.json")
        mask = read_mask(sub / "mask") if entry["labeled"] else None
        city_years.append(CityYear(city=entry["city"], year=entry["year"],
                                   blocks=blocks, mask=mask))
    return World(spec=spec, city_years=city_years)
