"""Plot-ready report tables emitted from evaluation records.

Every table family is one CSV with a fixed, documented column order; floats
are written at 6 decimal places (round-half-even) and missing values as
empty fields. Rows are fully sorted, so identical records always produce
byte-identical files. Empty inputs yield headers-only files.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .metrics import (RECORD_COLUMNS, RECORD_SCHEMA_VERSION, EvalRecord,
                      cross_sample_median, fold_median, fold_std,
                      marginal_gain, rank_models, usability_gate)
from .util import fmt_float

REPORT_PRECISION = 6


def _write_csv(path: Path, header: list, rows: list) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(x):
    return fmt_float(x, REPORT_PRECISION)


def write_records_csv(records: list, path: str | Path) -> None:
    rows = []
    for r in records:
        d = asdict(r)
        rows.append([
            d[c] if not isinstance(d[c], float) else _fmt(d[c]) for c in RECORD_COLUMNS
        ])
    _write_csv(Path(path), RECORD_COLUMNS, rows)


_INT_COLS = {"year", "fold", "seed", "n_train", "n_test", "k"}
_STR_COLS = {"city", "strategy", "combo", "model", "task", "protocol", "flags",
             "manifest_hash"}


def read_records_csv(path: str | Path) -> list:
    """Inverse of write_records_csv (floats at report precision)."""
    records = []
    with Path(path).open() as fh:
        for row in csv.DictReader(fh):
            kwargs = {}
            for col, raw in row.items():
                if col in _STR_COLS:
                    kwargs[col] = raw
                elif col in _INT_COLS:
                    kwargs[col] = int(raw) if raw != "" else None
                else:
                    kwargs[col] = float(raw) if raw != "" else None
            if kwargs.get("k") is None:
                kwargs["k"] = None
            records.append(EvalRecord(**kwargs))
    return records


def write_records_json(records: list, path: str | Path) -> None:
    """Records nested by city -> strategy for programmatic consumers."""
    nested: dict = {}
    for r in records:
        nested.setdefault(r.city, {}).setdefault(r.strategy, []).append(asdict(r))
    Path(path).write_text(json.dumps(
        {"schema_version": RECORD_SCHEMA_VERSION, "records": nested}, indent=1,
        sort_keys=True, allow_nan=True))


def _metric_for(task: str) -> str:
    return "f1" if task == "cls" else "r2"


def strategy_comparison_rows(records: list) -> list:
    rows = []
    groups = sorted({(r.strategy, r.model, r.task, r.protocol) for r in records})
    for strategy, model, task, protocol in groups:
        sub = [r for r in records
               if (r.strategy, r.model, r.task, r.protocol) == (strategy, model, task, protocol)]
        metric = _metric_for(task)
        med = cross_sample_median(sub, metric)
        stds = fold_std(sub, metric)
        std_med = float(np.median(list(stds.values()))) if stds else float("nan")
        rows.append([strategy, model, task, protocol, metric, _fmt(med), _fmt(std_med),
                     len(fold_median(sub, metric))])
    return rows


def per_city_rows(records: list) -> list:
    rows = []
    groups = sorted({(r.city, r.strategy, r.combo, r.model, r.task, r.protocol) for r in records})
    for city, strategy, combo, model, task, protocol in groups:
        sub = [r for r in records if (r.city, r.strategy, r.combo, r.model, r.task, r.protocol)
               == (city, strategy, combo, model, task, protocol)]
        metric = _metric_for(task)
        per_year = fold_median(sub, metric)
        med = float(np.median([v for v in per_year.values() if not np.isnan(v)])) \
            if any(not np.isnan(v) for v in per_year.values()) else float("nan")
        rows.append([city, strategy, combo, model, task, protocol, metric,
                     _fmt(med), len(per_year)])
    return rows


def decomposition_rows(records: list) -> list:
    """Per-city diagnostic decomposition: city, n_yr, cls F1, single R^2,
    two-stage gain, oracle gain, pos R^2."""
    reg = [r for r in records if r.task == "reg" and r.single_r2 is not None]
    cls = [r for r in records if r.task == "cls"]
    rows = []
    for city in sorted({r.city for r in reg}):
        sub = [r for r in reg if r.city == city]
        csub = [r for r in cls if r.city == city]
        n_yr = len({r.year for r in sub})

        def med(rs, metric):
            per_year = fold_median(rs, metric)
            vals = [v for v in per_year.values() if not np.isnan(v)]
            return float(np.median(vals)) if vals else float("nan")

        rows.append([city, n_yr, _fmt(med(csub, "f1")), _fmt(med(sub, "single_r2")),
                     _fmt(med(sub, "two_stage_gain")), _fmt(med(sub, "oracle_gain")),
                     _fmt(med(sub, "pos_r2"))])
    return rows


def marginal_gain_rows(records: list) -> list:
    rows = []
    combos = sorted({r.combo for r in records} - {"C0"})
    base = [r for r in records if r.combo == "C0"]
    for combo in combos:
        sub = [r for r in records if r.combo == combo]
        for task, metrics in (("cls", ("f1", "iou")), ("reg", ("r2",))):
            for metric in metrics:
                gains, dropped = marginal_gain(
                    [r for r in sub if r.task == task],
                    [r for r in base if r.task == task], metric)
                for city in sorted(gains):
                    rows.append([combo, city, task, f"delta_{metric}",
                                 _fmt(gains[city]), dropped])
    return rows


def usability_rows(records: list) -> list:
    """Per-city best-configuration table with the dual-task gate label."""
    rows = []
    cities = sorted({r.city for r in records})
    for city in cities:
        def best(task):
            metric = _metric_for(task)
            per_combo = {}
            for combo in sorted({r.combo for r in records}):
                sub = [r for r in records if r.city == city and r.combo == combo
                       and r.task == task]
                if not sub:
                    continue
                per_year = fold_median(sub, metric)
                vals = [v for v in per_year.values() if not np.isnan(v)]
                if vals:
                    per_combo[combo] = float(np.median(vals))
            if not per_combo:
                return None, float("nan"), float("nan")
            c0 = per_combo.get("C0", float("nan"))
            best_combo = max(per_combo, key=lambda c: per_combo[c])
            return best_combo, per_combo[best_combo], c0

        f1_cfg, f1_best, f1_c0 = best("cls")
        r2_cfg, r2_best, r2_c0 = best("reg")
        gate = usability_gate(f1_best if f1_best == f1_best else float("-inf"),
                              r2_best if r2_best == r2_best else float("-inf"))
        rows.append([city, _fmt(f1_c0), f1_cfg or "", _fmt(f1_best),
                     _fmt(f1_best - f1_c0 if f1_best == f1_best and f1_c0 == f1_c0 else None),
                     _fmt(r2_c0), r2_cfg or "", _fmt(r2_best),
                     _fmt(r2_best - r2_c0 if r2_best == r2_best and r2_c0 == r2_c0 else None),
                     gate])
    return rows


def ranking_rows(records: list) -> list:
    rows = []
    groups = sorted({(r.strategy, r.combo, r.task, r.protocol) for r in records})
    for strategy, combo, task, protocol in groups:
        sub = [r for r in records
               if (r.strategy, r.combo, r.task, r.protocol) == (strategy, combo, task, protocol)]
        models = sorted({r.model for r in sub})
        if len(models) < 2:
            continue
        metric = _metric_for(task)
        per_model = {m: fold_median([r for r in sub if r.model == m], metric) for m in models}
        common = set.intersection(*(set(v) for v in per_model.values()))
        scores = {m: {s: per_model[m][s] for s in common} for m in models}
        if not common:
            continue
        avg_rank, wins = rank_models(scores)
        for m in models:
            rows.append([strategy, combo, task, protocol, m,
                         _fmt(avg_rank[m]), wins[m], len(common)])
    return rows


TABLES = {
    "strategy_comparison.csv": (
        ["strategy", "model", "task", "protocol", "metric", "median", "fold_std_median",
         "n_samples"], strategy_comparison_rows),
    "per_city.csv": (
        ["city", "strategy", "combo", "model", "task", "protocol", "metric", "median",
         "n_years"], per_city_rows),
    "decomposition.csv": (
        ["city", "n_yr", "cls_f1", "single_r2", "two_stage_gain", "oracle_gain", "pos_r2"],
        decomposition_rows),
    "marginal_gains.csv": (
        ["combo", "city", "task", "metric", "gain", "n_dropped"], marginal_gain_rows),
    "usability.csv": (
        ["city", "f1_c0", "f1_best_cfg", "f1_best", "df1", "r2_c0", "r2_best_cfg",
         "r2_best", "dr2", "gate"], usability_rows),
    "model_rankings.csv": (
        ["strategy", "combo", "task", "protocol", "model", "avg_rank", "wins",
         "n_samples"], ranking_rows),
}


def write_importance(importance, out_dir: str | Path, tag: str = "") -> None:
    """Importance table (model x dimension CSV) plus the consensus-grid JSON."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    suffix = f"_{tag}" if tag else ""
    header = ["model", "dimension", "mean_abs_attribution", "rank"]
    rows = []
    cons = {}
    if importance is not None and importance.model_ranks is not None:
        per_model = importance.values.mean(axis=0)
        for mi, model in enumerate(importance.models):
            for dim in range(importance.d):
                rows.append([model, dim, _fmt(per_model[mi, dim]),
                             _fmt(importance.model_ranks[mi, dim])])
        cons = {
            "models": list(importance.models),
            "cities": list(importance.cities),
            "consensus": importance.consensus.tolist(),
            "perm_p": [round(float(p), REPORT_PRECISION) for p in importance.perm_p],
        }
    _write_csv(out / f"importance{suffix}.csv", header, rows)
    (out / f"importance_consensus{suffix}.json").write_text(json.dumps(cons, indent=1))


def emit_report(records: list, out_dir: str | Path,
                spatial_results: list | None = None,
                ablation_rows: list | None = None,
                summary_extra: dict | None = None) -> Path:
    """Write every table family plus the JSON summary. Inputs absent from
    this run produce headers-only files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_records_csv(records, out / "records.csv")
    write_records_json(records, out / "records.json")
    for name, (header, fn) in TABLES.items():
        _write_csv(out / name, header, fn(records))

    spat_header = ["city", "year", "f1", "iou", "ssim_cls", "moran_gt", "moran_gt_p",
                   "moran_pred", "moran_pred_p", "residual_moran", "residual_moran_p",
                   "area_err_pct", "lisa_gt_hh", "lisa_pred_hh"]
    spat_rows = []
    for s in sorted(spatial_results or [], key=lambda s: (s.city, s.year)):
        spat_rows.append([s.city, s.year, _fmt(s.f1), _fmt(s.iou), _fmt(s.ssim_cls),
                          _fmt(s.moran_gt), _fmt(s.moran_gt_p), _fmt(s.moran_pred),
                          _fmt(s.moran_pred_p), _fmt(s.residual_moran),
                          _fmt(s.residual_moran_p), _fmt(s.area_err_pct, ),
                          s.lisa_gt_counts.get("HH", 0), s.lisa_pred_counts.get("HH", 0)])
    _write_csv(out / "spatial_validation.csv", spat_header, spat_rows)

    abl_header = ["model", "task", "protocol", "k", "median_delta", "p_value", "pct_of_full"]
    abl_rows = [[r.model, r.task, r.protocol, r.k, _fmt(r.median_delta), _fmt(r.p_value),
                 _fmt(r.pct_of_full)]
                for r in sorted(ablation_rows or [],
                                key=lambda r: (r.model, r.task, r.protocol, r.k))]
    _write_csv(out / "pca_ablation.csv", abl_header, abl_rows)

    summary = {
        "record_schema_version": RECORD_SCHEMA_VERSION,
        "report_precision": REPORT_PRECISION,
        "n_records": len(records),
        "headline": {},
    }
    for task in ("cls", "reg"):
        metric = _metric_for(task)
        sub = [r for r in records if r.task == task]
        for protocol in ("random", "spatial"):
            psub = [r for r in sub if r.protocol == protocol]
            if psub:
                summary["headline"][f"median_{metric}_{protocol}"] = round(
                    cross_sample_median(psub, metric), REPORT_PRECISION)
    summary.update(summary_extra or {})
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return out
