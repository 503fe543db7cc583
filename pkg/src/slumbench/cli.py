"""Command-line entry point.

Subcommands: synth (generate a world), labels (aggregate masks into label
bands and distribution diagnostics), run (execute a manifest grid), dims
(PCA ablation + attribution suite), validate-spatial (SSIM / Moran / LISA),
infer (full-scene multi-year mapping), report (re-emit tables from stored
records). Exit codes: 0 success, 2 manifest validation error, 3 partial
cell failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_MANIFEST = 2
EXIT_PARTIAL = 3


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="override the manifest/spec seed")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers")


def _load_manifest(args):
    from .pipeline import RunManifest

    m = RunManifest.from_file(args.manifest)
    if args.seed is not None:
        m.seed = args.seed
        m.validate()
    return m


def cmd_synth(args) -> int:
    from .pipeline import ManifestError
    from .synth import SyntheticWorldSpec, synth_world, write_world

    try:
        kwargs = json.loads(Path(args.spec).read_text()) if args.spec else {}
        for key in ("years", "unlabeled_years"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        if args.seed is not None:
            kwargs["seed"] = args.seed
        spec = SyntheticWorldSpec(**kwargs)
    except (ValueError, TypeError, OSError, json.JSONDecodeError) as e:
        print(f"invalid synth spec: {e}", file=sys.stderr)
        return EXIT_MANIFEST
    world = synth_world(spec)
    write_world(world, args.out)
    print(f"world written to {args.out} ({len(world.city_years)} city-years)")
    return EXIT_OK


def cmd_labels(args) -> int:
    import csv

    from .grid import write_bif
    from .labels import aggregate, density_histogram
    from .synth import load_world

    world = load_world(args.world)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for cy in world.labeled():
        lp = aggregate(cy.mask)
        count_grid = cy.blocks["AEF"].bands[0].with_values(
            lp.count.astype(np.float32), band_name="label_count")
        write_bif(count_grid, out / f"{cy.city}_{cy.year}_count")
        valid = cy.blocks["AEF"].valid_mask()
        shares = density_histogram(lp, valid)
        rows.append([cy.city, cy.year] + [f"{s:.6f}" for s in shares])
    with (out / "label_histograms.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["city", "year", "share_zero", "share_0_03", "share_03_06",
                    "share_06_09", "share_09_1"])
        w.writerows(sorted(rows))
    print(f"labels for {len(rows)} city-years written to {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    from .pipeline import ManifestError, run
    from .report import emit_report

    try:
        manifest = _load_manifest(args)
    except ManifestError as e:
        print(f"manifest error: {e}", file=sys.stderr)
        return EXIT_MANIFEST
    result = run(manifest, args.out, jobs=args.jobs)
    emit_report(result.records, args.out,
                summary_extra={"manifest_hash": manifest.manifest_hash(),
                               "n_cells": result.n_cells,
                               "n_failed": len(result.failures)})
    (Path(args.out) / "failures.json").write_text(json.dumps(result.failures, indent=1,
                                                             sort_keys=True))
    print(f"{result.n_cells} cells ({result.n_skipped} cached), "
          f"{len(result.records)} records, {len(result.failures)} failures")
    return EXIT_PARTIAL if result.failures else EXIT_OK


def cmd_dims(args) -> int:
    from .dims import (PCA_K_GRID, ImportanceTable, ablation_run, attribute,
                       consensus_and_significance)
    from .pipeline import ManifestError, build_corpus, load_manifest_world
    from .report import emit_report, write_importance
    from .splits import random_split
    from .util import derive_seed
    from . import models as model_zoo

    try:
        manifest = _load_manifest(args)
    except ManifestError as e:
        print(f"manifest error: {e}", file=sys.stderr)
        return EXIT_MANIFEST
    world = load_manifest_world(manifest)
    corpus = build_corpus(world)
    if manifest.targets:
        corpus = {tuple(t): corpus[tuple(t)] for t in
                  [(c, int(y)) for c, y in manifest.targets]}
    k_grid = [int(k) for k in (manifest.k_grid or PCA_K_GRID)]
    records, wil = ablation_run(corpus, k_grid=k_grid, families=manifest.models,
                                tasks=manifest.tasks, protocols=manifest.protocols,
                                seed=manifest.seed, threshold=manifest.threshold)

    att = manifest.attribution
    n_orderings = int(att.get("n_orderings", 100))
    max_explain = int(att.get("max_explain_rows", 64))
    max_background = int(att.get("max_background_rows", 512))
    n_perm = int(att.get("n_perm", 1000))
    keys = sorted(corpus)
    for task in manifest.tasks:
        values = np.zeros((len(keys), len(manifest.models), 64))
        for ci, key in enumerate(keys):
            table = corpus[key]
            emb = table.with_features(table.x[:, :64])
            split = random_split(emb, seed=derive_seed(manifest.seed, "attr", *key))
            rng = np.random.default_rng(derive_seed(manifest.seed, "attr-rows", *key))
            bg_idx = split.train_idx[rng.permutation(len(split.train_idx))[:max_background]]
            ex_idx = split.test_idx[rng.permutation(len(split.test_idx))[:max_explain]]
            for mi, family in enumerate(manifest.models):
                spec = model_zoo.ModelSpec(
                    task=task, family=family,
                    params=manifest.model_overrides.get(family, {}),
                    seed=derive_seed(manifest.seed, "attr-model", *key, family, task)
                    & 0x7FFFFFFF)
                y = emb.y_cls if task == "cls" else emb.y_reg
                m = model_zoo.train(spec, emb.x[split.train_idx], y[split.train_idx])
                values[ci, mi] = attribute(m, emb.x[bg_idx], emb.x[ex_idx],
                                           n_orderings=n_orderings,
                                           seed=derive_seed(manifest.seed, "attr-mc",
                                                            *key, family, task)
                                           & 0x7FFFFFFF)
        imp = ImportanceTable(cities=[f"{c}_{y}" for c, y in keys],
                              models=list(manifest.models), values=values)
        if len(keys) >= 2 or len(manifest.models) >= 2:
            consensus_and_significance(imp, n_perm=n_perm,
                                       seed=derive_seed(manifest.seed, "attr-perm", task))
        write_importance(imp, args.out, tag=task)
    emit_report(records, args.out, ablation_rows=wil,
                summary_extra={"manifest_hash": manifest.manifest_hash(),
                               "k_grid": k_grid})
    print(f"dims suite: {len(records)} ablation records, {len(wil)} Wilcoxon rows")
    return EXIT_OK


def _infer_plan(manifest, world):
    plan = manifest.infer or {}
    cities = plan.get("cities") or sorted({cy.city for cy in world.labeled()})
    return (cities, plan.get("family", "mlp"), plan.get("combo", "C0"),
            plan.get("years"))


def cmd_infer(args) -> int:
    from .grid import write_bif
    from .pipeline import ManifestError, full_scene_infer, load_manifest_world

    try:
        manifest = _load_manifest(args)
    except ManifestError as e:
        print(f"manifest error: {e}", file=sys.stderr)
        return EXIT_MANIFEST
    world = load_manifest_world(manifest)
    cities, family, combo_code, years = _infer_plan(manifest, world)
    out = Path(args.out)
    n = 0
    for city in cities:
        results = full_scene_infer(world, city, family=family, combo_code=combo_code,
                                   years=years, seed=manifest.seed,
                                   threshold=manifest.threshold,
                                   model_overrides=manifest.model_overrides)
        for r in results:
            extra = {"imputed": r.imputed, "family": family, "combo": combo_code}
            write_bif(r.cls_grid, out / city / f"{r.year}_cls", extra=extra)
            write_bif(r.density_grid, out / city / f"{r.year}_density", extra=extra)
            n += 1
    print(f"full-scene inference written for {n} city-years under {out}")
    return EXIT_OK


def cmd_validate_spatial(args) -> int:
    from .grid import write_bif
    from .labels import aggregate
    from .pipeline import (ManifestError, full_scene_infer, lisa_to_grid,
                           load_manifest_world, validate_spatial)
    from .report import emit_report

    try:
        manifest = _load_manifest(args)
    except ManifestError as e:
        print(f"manifest error: {e}", file=sys.stderr)
        return EXIT_MANIFEST
    world = load_manifest_world(manifest)
    cities, family, combo_code, years = _infer_plan(manifest, world)
    out = Path(args.out)
    results = []
    for city in cities:
        labeled_years = sorted({cy.year for cy in world.labeled() if cy.city == city})
        infers = {r.year: r for r in full_scene_infer(
            world, city, family=family, combo_code=combo_code, years=labeled_years,
            seed=manifest.seed, threshold=manifest.threshold,
            model_overrides=manifest.model_overrides)}
        for year in labeled_years:
            cy = world.get(city, year)
            lp = aggregate(cy.mask)
            geom = cy.blocks["AEF"].bands[0]
            valid = geom.valid_mask()
            gt_cls = geom.with_values(
                np.where(valid, lp.cls.astype(np.float32), np.float32(geom.nodata)),
                band_name="gt_cls")
            gt_den = geom.with_values(
                np.where(valid, lp.count.astype(np.float32), np.float32(geom.nodata)),
                band_name="gt_density")
            r = infers[year]
            v = validate_spatial(gt_cls, r.cls_grid, gt_den, r.density_grid,
                                 seed=manifest.seed)
            for tag, payload in (("gt", v.lisa_gt), ("pred", v.lisa_pred)):
                lmap, lgrid, lvalid = payload
                write_bif(lisa_to_grid(lmap, lgrid, lvalid),
                          out / city / f"{year}_lisa_{tag}",
                          extra={"legend": {"0": "NS", "1": "HH", "2": "LL",
                                            "3": "HL", "4": "LH"}})
            results.append(v)
    emit_report([], out, spatial_results=results,
                summary_extra={"manifest_hash": manifest.manifest_hash()})
    print(f"spatial validation for {len(results)} city-years written to {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import emit_report, read_records_csv

    records = read_records_csv(args.records)
    emit_report(records, args.out)
    print(f"report rebuilt from {len(records)} records into {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="slumbench",
                                     description="Dual-task slum-mapping evaluation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic world")
    p.add_argument("--spec", type=Path, default=None, help="generator spec JSON")
    _common_flags(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("labels", help="aggregate masks into label bands + diagnostics")
    p.add_argument("--world", type=Path, required=True)
    _common_flags(p)
    p.set_defaults(fn=cmd_labels)

    p = sub.add_parser("run", help="execute a manifest grid")
    p.add_argument("--manifest", type=Path, required=True)
    _common_flags(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("dims", help="PCA ablation + attribution suite")
    p.add_argument("--manifest", type=Path, required=True)
    _common_flags(p)
    p.set_defaults(fn=cmd_dims)

    p = sub.add_parser("validate-spatial", help="SSIM / Moran / LISA validation")
    p.add_argument("--manifest", type=Path, required=True)
    _common_flags(p)
    p.set_defaults(fn=cmd_validate_spatial)

    p = sub.add_parser("infer", help="full-scene multi-year inference")
    p.add_argument("--manifest", type=Path, required=True)
    _common_flags(p)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("report", help="re-emit report tables from records.csv")
    p.add_argument("--records", type=Path, required=True)
    _common_flags(p)
    p.set_defaults(fn=cmd_report)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
