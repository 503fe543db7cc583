"""Config-driven orchestration of the experiment matrix.

A run manifest describes the data source (a stored world or a synthetic
generator spec) and the strategy x combo x model x protocol grid. Every grid
cell is executed independently, keyed by a content hash of its coordinates
plus the seed, and cached as one JSON file, so interrupted runs resume by
skipping completed cells and a failed cell never aborts the grid. Cell
seeds derive from content, never from scheduling, so reports are
byte-identical across worker counts.
"""

from __future__ import annotations

import concurrent.futures
import json
import multiprocessing
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import models as model_zoo
from .features import CATEGORY_ORDER, combo, combo_columns
from .grid import Grid, adaptive_factor, block_index_map, downsample, mask_nodata
from .labels import LabelPair, aggregate, density_histogram
from .metrics import (DEFAULT_THRESHOLD, EvalRecord, cls_metrics, decompose_r2,
                      make_cls_record, make_reg_record, reg_metrics)
from .spatial import (LISA_CELL_CAP, MORAN_CELL_CAP, area_pct_err, lisa,
                      morans_i, queen_weights, residual_moran, ssim_binary)
from .splits import (SampleTable, Split, assemble_strategy, audit_no_leakage,
                     random_split, spatial_folds)
from .synth import SyntheticWorldSpec, World, load_world, synth_world
from .util import content_hash, derive_seed

DENSITY_MAX = 289.0


class ManifestError(ValueError):
    """Invalid run manifest (CLI exit code 2)."""


@dataclass
class RunManifest:
    """Declarative description of one experiment grid."""

    world: str | None = None                  # path to a stored world
    synth: dict | None = None                 # SyntheticWorldSpec kwargs
    strategies: list = field(default_factory=lambda: ["S1"])
    combos: list = field(default_factory=lambda: ["C0"])
    models: list = field(default_factory=lambda: ["linear", "hist_gbt", "rf", "mlp"])
    tasks: list = field(default_factory=lambda: ["cls", "reg"])
    protocols: list = field(default_factory=lambda: ["random", "spatial"])
    targets: list | None = None               # [[city, year], ...] subset
    k_grid: list | None = None                # dims command only
    seed: int = 0
    budget: int = 480_000
    threshold: float = DEFAULT_THRESHOLD
    model_overrides: dict = field(default_factory=dict)
    attribution: dict = field(default_factory=dict)
    infer: dict = field(default_factory=dict)

    def validate(self) -> None:
        if (self.world is None) == (self.synth is None):
            raise ManifestError("exactly one of 'world' and 'synth' is required")
        if self.world is not None and not Path(self.world).exists():
            raise ManifestError(f"world path does not exist: {self.world}")
        for name, values, allowed in (
            ("strategies", self.strategies, {"S1", "S2", "S3", "S4"}),
            ("combos", self.combos, {"C0", "C1", "C2", "C3", "C4", "C5"}),
            ("models", self.models, set(model_zoo.FAMILIES)),
            ("tasks", self.tasks, set(model_zoo.TASKS)),
            ("protocols", self.protocols, {"random", "spatial"}),
        ):
            if not values:
                raise ManifestError(f"{name} must be non-empty")
            bad = set(values) - allowed
            if bad:
                raise ManifestError(f"unknown {name}: {sorted(bad)}")
        if self.budget < 1:
            raise ManifestError("budget must be positive")
        if self.k_grid is not None and any(not 1 <= int(k) <= 64 for k in self.k_grid):
            raise ManifestError("k_grid entries must lie in 1..64")
        for fam in self.model_overrides:
            if fam not in model_zoo.FAMILIES:
                raise ManifestError(f"model_overrides names unknown family {fam!r}")
        if self.synth is not None:
            try:
                self.synth_spec()
            except (TypeError, ValueError) as e:
                raise ManifestError(f"invalid synth spec: {e}") from e

    def synth_spec(self) -> SyntheticWorldSpec:
        kwargs = dict(self.synth or {})
        for key in ("years", "unlabeled_years"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        kwargs.setdefault("seed", self.seed)
        return SyntheticWorldSpec(**kwargs)

    def manifest_hash(self) -> str:
        return content_hash(asdict(self))

    @classmethod
    def from_file(cls, path: str | Path) -> "RunManifest":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ManifestError(f"cannot read manifest {path}: {e}") from e
        known = {f.name for f in __import__("dataclasses").fields(cls)}
        bad = set(data) - known
        if bad:
            raise ManifestError(f"unknown manifest keys: {sorted(bad)}")
        m = cls(**data)
        m.validate()
        return m


def load_manifest_world(manifest: RunManifest) -> World:
    if manifest.world is not None:
        return load_world(manifest.world)
    return synth_world(manifest.synth_spec())


# ---------------------------------------------------------------------------
# Corpus construction: world -> SampleTable per labeled city-year
# ---------------------------------------------------------------------------

def build_corpus(world: World) -> dict[tuple[str, int], SampleTable]:
    """Full-width (all categories) tables over cells valid in every band."""
    corpus = {}
    for cy in world.labeled():
        corpus[(cy.city, cy.year)] = build_table(cy.blocks, aggregate(cy.mask), cy.city, cy.year)
    return corpus


def build_table(blocks: dict, labels: LabelPair, city: str, year: int) -> SampleTable:
    geom = blocks["AEF"].bands[0]
    valid = np.ones((geom.height, geom.width), dtype=bool)
    for cat in CATEGORY_ORDER:
        if cat in blocks:
            valid &= blocks[cat].valid_mask()
    cells = np.flatnonzero(valid.ravel())
    x = np.concatenate(
        [blocks[cat].values_at(cells) for cat in CATEGORY_ORDER if cat in blocks], axis=1
    )
    blocks_map = block_index_map(geom.height, geom.width).ravel()[cells]
    y_reg = labels.count.ravel()[cells]
    return SampleTable(
        city=np.full(cells.size, city, dtype="U8"),
        year=np.full(cells.size, year, dtype=np.int32),
        cell=cells.astype(np.int64),
        block=blocks_map.astype(np.uint8),
        x=x,
        y_cls=(y_reg > 0).astype(np.uint8),
        y_reg=y_reg.astype(np.int32),
    )


# ---------------------------------------------------------------------------
# Grid cells
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Cell:
    city: str
    year: int
    strategy: str
    combo: str
    family: str
    protocol: str
    fold: int

    def key(self, manifest_hash: str, seed: int) -> str:
        return content_hash([manifest_hash, seed, *astuple_cell(self)])


def astuple_cell(c: Cell):
    return (c.city, c.year, c.strategy, c.combo, c.family, c.protocol, c.fold)


def enumerate_cells(manifest: RunManifest, corpus: dict) -> list[Cell]:
    targets = (
        [(c, int(y)) for c, y in manifest.targets] if manifest.targets else sorted(corpus)
    )
    missing = [t for t in targets if t not in corpus]
    if missing:
        raise ManifestError(f"targets not in corpus: {missing}")
    cells = []
    for city, year in targets:
        table = corpus[(city, year)]
        for protocol in manifest.protocols:
            folds = folds_for(table, protocol, manifest.seed, city, year)
            for split in folds:
                for strategy in manifest.strategies:
                    for combo_code in manifest.combos:
                        for family in manifest.models:
                            cells.append(Cell(city, year, strategy, combo_code,
                                              family, protocol, split.fold))
    return cells


def folds_for(table: SampleTable, protocol: str, seed: int, city: str, year: int) -> list[Split]:
    if protocol == "random":
        return [random_split(table, seed=derive_seed(seed, "split", city, year))]
    return spatial_folds(table)


def execute_cell(cell: Cell, manifest: RunManifest, corpus: dict) -> list[EvalRecord]:
    """Train/evaluate one grid cell; returns its records (cls and/or reg)."""
    table = corpus[(cell.city, cell.year)]
    split = next(
        s for s in folds_for(table, cell.protocol, manifest.seed, cell.city, cell.year)
        if s.fold == cell.fold
    )
    sample_seed = derive_seed(manifest.seed, "sample", cell.strategy, cell.city,
                              cell.year, cell.protocol, cell.fold)
    train_table = assemble_strategy(cell.strategy, cell.city, cell.year, corpus,
                                    split, budget=manifest.budget, seed=sample_seed)
    test_table = table.subset(split.test_idx)
    test_block = cell.fold if cell.protocol == "spatial" else None
    audit_no_leakage(train_table, test_table, cell.city, test_block)

    cols = combo_columns(cell.combo)
    x_tr, x_te = train_table.x[:, cols], test_table.x[:, cols]
    overrides = manifest.model_overrides.get(cell.family, {})
    base = dict(city=cell.city, year=cell.year, strategy=cell.strategy, combo=cell.combo,
                model=cell.family, protocol=cell.protocol, fold=cell.fold,
                seed=manifest.seed, threshold=manifest.threshold,
                n_train=train_table.n, n_test=test_table.n,
                manifest_hash=manifest.manifest_hash())

    records = []
    cls_pred_bin = None
    if "cls" in manifest.tasks:
        spec = model_zoo.ModelSpec(
            task="cls", family=cell.family, params=overrides,
            seed=derive_seed(manifest.seed, "model", *astuple_cell(cell), "cls") & 0x7FFFFFFF)
        m = model_zoo.train(spec, x_tr, train_table.y_cls)
        proba = m.predict_proba(x_te)
        records.append(make_cls_record(base, cls_metrics(test_table.y_cls, proba,
                                                          manifest.threshold)))
        cls_pred_bin = proba >= manifest.threshold
    if "reg" in manifest.tasks:
        spec = model_zoo.ModelSpec(
            task="reg", family=cell.family, params=overrides,
            seed=derive_seed(manifest.seed, "model", *astuple_cell(cell), "reg") & 0x7FFFFFFF)
        m = model_zoo.train(spec, x_tr, train_table.y_reg)
        pred = m.predict_density(x_te)
        rm = reg_metrics(test_table.y_reg, pred)
        decomp = None
        if cls_pred_bin is not None:
            decomp = decompose_r2(test_table.y_reg, pred, cls_pred_bin, test_table.y_cls)
        records.append(make_reg_record(base, rm, decomp))
    return records


# ---------------------------------------------------------------------------
# The run loop: content-addressed cells, resumable, parallel
# ---------------------------------------------------------------------------

_WORKER_STATE: dict = {}


def _run_cell_worker(args):
    cell, key = args
    manifest = _WORKER_STATE["manifest"]
    corpus = _WORKER_STATE["corpus"]
    try:
        records = execute_cell(cell, manifest, corpus)
        return key, [asdict(r) for r in records], None
    except Exception:
        return key, None, traceback.format_exc()


@dataclass
class RunResult:
    records: list
    failures: dict            # cell key -> error text
    n_cells: int
    n_skipped: int


def run(manifest: RunManifest, out_dir: str | Path, jobs: int = 1) -> RunResult:
    """Execute the manifest grid, caching per-cell results under out/cells.
    Completed cells are skipped on rerun; failures are isolated per cell."""
    out = Path(out_dir)
    cells_dir = out / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    world = load_manifest_world(manifest)
    corpus = build_corpus(world)
    cells = enumerate_cells(manifest, corpus)
    mhash = manifest.manifest_hash()

    pending = []
    n_skipped = 0
    for cell in cells:
        key = cell.key(mhash, manifest.seed)
        if (cells_dir / f"{key}.json").exists():
            n_skipped += 1
        else:
            pending.append((cell, key))

    _WORKER_STATE["manifest"] = manifest
    _WORKER_STATE["corpus"] = corpus
    failures: dict[str, str] = {}
    try:
        if jobs <= 1 or not pending:
            results = map(_run_cell_worker, pending)
            for key, rec_dicts, err in results:
                _store_cell(cells_dir, key, rec_dicts, err, failures)
        else:
            ctx = multiprocessing.get_context("fork")
            with concurrent.futures.ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as ex:
                for key, rec_dicts, err in ex.map(_run_cell_worker, pending, chunksize=1):
                    _store_cell(cells_dir, key, rec_dicts, err, failures)
    finally:
        _WORKER_STATE.clear()

    records = collect_records(cells_dir, [c.key(mhash, manifest.seed) for c in cells], failures)
    return RunResult(records=records, failures=failures,
                     n_cells=len(cells), n_skipped=n_skipped)


def _store_cell(cells_dir: Path, key: str, rec_dicts, err, failures: dict) -> None:
    if err is not None:
        failures[key] = err
        (cells_dir / f"{key}.error.json").write_text(json.dumps({"error": err}))
        return
    (cells_dir / f"{key}.json").write_text(json.dumps(rec_dicts))


def collect_records(cells_dir: Path, keys: list, failures: dict) -> list:
    records = []
    for key in keys:
        path = cells_dir / f"{key}.json"
        if not path.exists():
            err_path = cells_dir / f"{key}.error.json"
            if err_path.exists() and key not in failures:
                failures[key] = json.loads(err_path.read_text())["error"]
            continue
        for d in json.loads(path.read_text()):
            records.append(EvalRecord(**d))
    records.sort(key=lambda r: (r.city, r.year, r.strategy, r.combo, r.model,
                                r.task, r.protocol, r.fold, r.k if r.k is not None else -1))
    return records


# ---------------------------------------------------------------------------
# Full-AOI multi-year inference
# ---------------------------------------------------------------------------

@dataclass
class InferenceResult:
    city: str
    year: int
    cls_grid: Grid
    density_grid: Grid
    imputed: bool             # no labels existed for this year


def full_scene_infer(
    world: World,
    city: str,
    family: str = "mlp",
    combo_code: str = "C0",
    years: list | None = None,
    seed: int = 0,
    threshold: float = DEFAULT_THRESHOLD,
    model_overrides: dict | None = None,
) -> list[InferenceResult]:
    """Train one cls + one reg model per city on all labeled years, then map
    every requested year (labeled or not). Density is clamped to [0, 289];
    classification binarises the probability at the threshold."""
    labeled = [cy for cy in world.labeled() if cy.city == city]
    if not labeled:
        raise ValueError(f"no labeled years for city {city}")
    all_years = sorted({cy.year for cy in world.city_years if cy.city == city})
    years = list(years) if years is not None else all_years
    missing = [y for y in years if y not in all_years]
    if missing:
        raise ValueError(f"no feature bands for requested years {missing} of {city}")

    tables = [build_table(cy.blocks, aggregate(cy.mask), city, cy.year) for cy in labeled]
    from .splits import concat_tables

    train_table = concat_tables(tables)
    cols = combo_columns(combo_code)
    x_tr = train_table.x[:, cols]
    overrides = (model_overrides or {}).get(family, {})
    cls_model = model_zoo.train(
        model_zoo.ModelSpec(task="cls", family=family, params=overrides,
                            seed=derive_seed(seed, "infer", city, "cls") & 0x7FFFFFFF),
        x_tr, train_table.y_cls)
    reg_model = model_zoo.train(
        model_zoo.ModelSpec(task="reg", family=family, params=overrides,
                            seed=derive_seed(seed, "infer", city, "reg") & 0x7FFFFFFF),
        x_tr, train_table.y_reg)

    labeled_years = {cy.year for cy in labeled}
    results = []
    for year in years:
        cy = world.get(city, year)
        geom = cy.blocks["AEF"].bands[0]
        valid = np.ones((geom.height, geom.width), dtype=bool)
        for cat in CATEGORY_ORDER:
            if cat in cy.blocks:
                valid &= cy.blocks[cat].valid_mask()
        cells = np.flatnonzero(valid.ravel())
        x = np.concatenate(
            [cy.blocks[cat].values_at(cells) for cat in CATEGORY_ORDER if cat in cy.blocks],
            axis=1)[:, cols]
        proba = cls_model.predict_proba(x)
        dens = np.clip(reg_model.predict_density(x), 0.0, DENSITY_MAX)
        cls_vals = np.full(geom.height * geom.width, geom.nodata, dtype=np.float32)
        den_vals = np.full(geom.height * geom.width, geom.nodata, dtype=np.float32)
        cls_vals[cells] = (proba >= threshold).astype(np.float32)
        den_vals[cells] = dens.astype(np.float32)
        mk = lambda v, name: Grid(width=geom.width, height=geom.height, values=v,
                                  cell_size_m=geom.cell_size_m, nodata=geom.nodata,
                                  city_code=city, year=year, band_name=name)
        results.append(InferenceResult(
            city=city, year=year,
            cls_grid=mk(cls_vals.reshape(geom.height, geom.width), "pred_cls"),
            density_grid=mk(den_vals.reshape(geom.height, geom.width), "pred_density"),
            imputed=year not in labeled_years))
    return results


# ---------------------------------------------------------------------------
# Spatial-structure validation of full-scene predictions
# ---------------------------------------------------------------------------

@dataclass
class SpatialValidation:
    city: str
    year: int
    f1: float
    iou: float
    ssim_cls: float
    moran_gt: float
    moran_gt_p: float
    moran_pred: float
    moran_pred_p: float
    residual_moran: float
    residual_moran_p: float
    area_err_pct: float
    lisa_gt_counts: dict
    lisa_pred_counts: dict
    lisa_gt: object = None     # (LisaMap, Grid geometry) when exported
    lisa_pred: object = None


def _moran_on_grid(grid: Grid, cap: int, reducer: str, n_perm: int, seed: int):
    n_valid = int(grid.valid_mask().sum())
    g = downsample(grid, adaptive_factor(n_valid, cap), reducer)
    vm = g.valid_mask()
    w = queen_weights(g.height, g.width, vm)
    return g, vm, w


def validate_spatial(
    gt_cls: Grid, pred_cls: Grid, gt_density: Grid, pred_density: Grid,
    n_perm: int = 99, seed: int = 0, alpha: float = 0.05,
    moran_cap: int = MORAN_CELL_CAP, lisa_cap: int = LISA_CELL_CAP,
) -> SpatialValidation:
    """SSIM + area error at full resolution; Moran/LISA on adaptively
    downsampled grids (max-reduced for binary maps, mean-reduced for the
    density residual)."""
    cm = cls_metrics((gt_cls.values[gt_cls.valid_mask() & pred_cls.valid_mask()] > 0.5).astype(int),
                     (pred_cls.values[gt_cls.valid_mask() & pred_cls.valid_mask()] > 0.5).astype(float),
                     threshold=0.5)
    ssim = ssim_binary(gt_cls, pred_cls)
    area = area_pct_err(gt_cls, pred_cls)

    g_gt, vm_gt, w_gt = _moran_on_grid(gt_cls, moran_cap, "max", n_perm, seed)
    mor_gt = morans_i(g_gt.values[vm_gt].astype(np.float64), w_gt, n_perm=n_perm,
                      seed=derive_seed(seed, "moran", "gt"))
    g_pr, vm_pr, w_pr = _moran_on_grid(pred_cls, moran_cap, "max", n_perm, seed)
    mor_pr = morans_i(g_pr.values[vm_pr].astype(np.float64), w_pr, n_perm=n_perm,
                      seed=derive_seed(seed, "moran", "pred"))

    # residual structure on the density error field, mean-reduced
    n_valid = int((gt_density.valid_mask() & pred_density.valid_mask()).sum())
    f = adaptive_factor(n_valid, moran_cap)
    g_dg = downsample(gt_density, f, "mean")
    g_dp = downsample(pred_density, f, "mean")
    vm = g_dg.valid_mask() & g_dp.valid_mask()
    w_res = queen_weights(g_dg.height, g_dg.width, vm)
    mor_res = residual_moran(g_dg.values[vm].astype(np.float64),
                             g_dp.values[vm].astype(np.float64), w_res,
                             n_perm=n_perm, seed=derive_seed(seed, "moran", "residual"))

    lisa_maps = {}
    for tag, grid in (("gt", gt_cls), ("pred", pred_cls)):
        g_l, vm_l, w_l = _moran_on_grid(grid, lisa_cap, "max", n_perm, seed)
        lisa_maps[tag] = (lisa(g_l.values[vm_l].astype(np.float64), w_l, n_perm=n_perm,
                               seed=derive_seed(seed, "lisa", tag), alpha=alpha), g_l, vm_l)

    return SpatialValidation(
        city=gt_cls.city_code, year=gt_cls.year,
        f1=cm.f1, iou=cm.iou, ssim_cls=ssim,
        moran_gt=mor_gt.I, moran_gt_p=mor_gt.p_perm,
        moran_pred=mor_pr.I, moran_pred_p=mor_pr.p_perm,
        residual_moran=mor_res.I, residual_moran_p=mor_res.p_perm,
        area_err_pct=area,
        lisa_gt_counts=lisa_maps["gt"][0].counts(),
        lisa_pred_counts=lisa_maps["pred"][0].counts(),
        lisa_gt=lisa_maps["gt"], lisa_pred=lisa_maps["pred"])


def lisa_to_grid(lisa_map, grid: Grid, valid_mask: np.ndarray) -> Grid:
    """Expand a LisaMap over a downsampled grid into a BIF-exportable band of
    integer quadrant codes (sentinel outside valid cells)."""
    vals = np.full(grid.height * grid.width, grid.nodata, dtype=np.float32)
    vals[np.flatnonzero(valid_mask.ravel())] = lisa_map.quadrant.astype(np.float32)
    return grid.with_values(vals.reshape(grid.height, grid.width), band_name="lisa_quadrant")
