"""Pixel-level metrics, R-squared decomposition, fold aggregation, model
rankings, marginal gains, the usability gate, and the Wilcoxon signed-rank
test.

Conventions pinned here because they shape reported tables: the positive
class drives F1/IoU; binarisation threshold defaults to 0.5; even-length
medians take the midpoint; tied ranks share their average; win counts use
the shared-first rule (all tied leaders win); MAPE is a percentage over the
y > 0 subset only; targets with (near-)zero variance carry an instability
flag instead of being suppressed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np
from scipy.stats import norm, rankdata

DEFAULT_THRESHOLD = 0.5

#: Relative variance below which R^2 is flagged unstable (target variance
#: tiny against target scale -> denominator of R^2 approaches zero).
UNSTABLE_VARIANCE_REL = 1e-8

#: Largest effective n for which the Wilcoxon null is enumerated exactly.
WILCOXON_EXACT_N = 12

GATE_F1 = 0.5
GATE_R2 = 0.3


@dataclass(frozen=True)
class ClsMetrics:
    f1: float
    iou: float
    precision: float
    recall: float
    accuracy: float
    auc_roc: float          # NaN when undefined (single-class y)
    auc_defined: bool = True


@dataclass(frozen=True)
class RegMetrics:
    r2: float               # NaN when target variance is zero
    mae: float
    rmse: float
    mape_pos: float         # percent over y > 0 rows; NaN when no positives
    r2_defined: bool = True
    r2_unstable: bool = False


@dataclass(frozen=True)
class Decomposition:
    single_r2: float
    two_stage_gain: float
    oracle_gain: float
    pos_r2: float           # NaN when < 2 positive rows
    pos_r2_defined: bool = True


def cls_metrics(y: np.ndarray, proba: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> ClsMetrics:
    """Positive-class confusion metrics plus rank-statistic AUC with tie
    averaging. Single-class y flags AUC undefined but computes the rest."""
    y = np.asarray(y).astype(np.int64)
    proba = np.asarray(proba, dtype=np.float64)
    if y.shape != proba.shape:
        raise ValueError("y/proba length mismatch")
    pred = (proba >= threshold).astype(np.int64)
    tp = int(np.sum((pred == 1) & (y == 1)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    tn = int(np.sum((pred == 0) & (y == 0)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0
    iou = tp / (tp + fp + fn) if tp + fp + fn else 0.0
    accuracy = (tp + tn) / y.size if y.size else 0.0
    n_pos, n_neg = tp + fn, fp + tn
    if n_pos and n_neg:
        ranks = rankdata(proba)
        auc = (ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)
        return ClsMetrics(f1, iou, precision, recall, accuracy, float(auc), True)
    return ClsMetrics(f1, iou, precision, recall, accuracy, float("nan"), False)


def _r2(y: np.ndarray, pred: np.ndarray) -> float:
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return float("nan")
    return 1.0 - ss_res / ss_tot


def reg_metrics(y: np.ndarray, pred: np.ndarray) -> RegMetrics:
    y = np.asarray(y, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if y.size < 2:
        raise ValueError("need at least 2 rows")
    if y.shape != pred.shape:
        raise ValueError("y/pred length mismatch")
    err = pred - y
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err**2)))
    var = float(np.var(y))
    r2 = _r2(y, pred)
    unstable = 0.0 < var < UNSTABLE_VARIANCE_REL * max(1.0, float(np.mean(y**2)))
    pos = y > 0
    mape = float(np.mean(np.abs(err[pos]) / y[pos]) * 100.0) if pos.any() else float("nan")
    return RegMetrics(r2=r2, mae=mae, rmse=rmse, mape_pos=mape,
                      r2_defined=var > 0.0, r2_unstable=unstable)


def decompose_r2(y, reg_pred, cls_pred, y_cls) -> Decomposition:
    """R^2 diagnostics: gain from zeroing predictions where the classifier
    says zero (two-stage), where the truth says zero (oracle), and R^2 over
    positive rows only."""
    y = np.asarray(y, dtype=np.float64)
    reg_pred = np.asarray(reg_pred, dtype=np.float64)
    cls_pred = np.asarray(cls_pred).astype(bool)
    y_cls = np.asarray(y_cls).astype(bool)
    if not (y.shape == reg_pred.shape == cls_pred.shape == y_cls.shape):
        raise ValueError("length mismatch")
    single = _r2(y, reg_pred)
    two_stage = _r2(y, np.where(cls_pred, reg_pred, 0.0)) - single
    oracle = _r2(y, np.where(y_cls, reg_pred, 0.0)) - single
    pos = y > 0
    if pos.sum() >= 2:
        pos_r2, pos_def = _r2(y[pos], reg_pred[pos]), True
    else:
        pos_r2, pos_def = float("nan"), False
    return Decomposition(single, two_stage, oracle, pos_r2, pos_def)


# ---------------------------------------------------------------------------
# Evaluation records and aggregation
# ---------------------------------------------------------------------------

@dataclass
class EvalRecord:
    """One completed (city-year x strategy x combo x model x protocol x fold)."""

    city: str
    year: int
    strategy: str
    combo: str
    model: str
    task: str
    protocol: str
    fold: int
    seed: int
    threshold: float = DEFAULT_THRESHOLD
    n_train: int = 0
    n_test: int = 0
    k: Optional[int] = None       # retained PCA components, ablation runs only
    f1: Optional[float] = None
    iou: Optional[float] = None
    precision: Optional[float] = None
    recall: Optional[float] = None
    accuracy: Optional[float] = None
    auc_roc: Optional[float] = None
    r2: Optional[float] = None
    mae: Optional[float] = None
    rmse: Optional[float] = None
    mape_pos: Optional[float] = None
    single_r2: Optional[float] = None
    two_stage_gain: Optional[float] = None
    oracle_gain: Optional[float] = None
    pos_r2: Optional[float] = None
    flags: str = ""
    manifest_hash: str = ""

    def sample_key(self) -> tuple[str, int]:
        return (self.city, self.year)


RECORD_COLUMNS = [f.name for f in fields(EvalRecord)]
RECORD_SCHEMA_VERSION = 1


def make_cls_record(base: dict, m: ClsMetrics) -> EvalRecord:
    flags = [] if m.auc_defined else ["auc_undefined"]
    return EvalRecord(task="cls", f1=m.f1, iou=m.iou, precision=m.precision,
                      recall=m.recall, accuracy=m.accuracy, auc_roc=m.auc_roc,
                      flags=";".join(flags), **base)


def make_reg_record(base: dict, m: RegMetrics, d: Decomposition | None = None) -> EvalRecord:
    flags = []
    if not m.r2_defined:
        flags.append("r2_undefined")
    if m.r2_unstable:
        flags.append("r2_unstable")
    extra = {}
    if d is not None:
        if not d.pos_r2_defined:
            flags.append("pos_r2_undefined")
        extra = dict(single_r2=d.single_r2, two_stage_gain=d.two_stage_gain,
                     oracle_gain=d.oracle_gain, pos_r2=d.pos_r2)
    return EvalRecord(task="reg", r2=m.r2, mae=m.mae, rmse=m.rmse, mape_pos=m.mape_pos,
                      flags=";".join(flags), **extra, **base)


def _median(values) -> float:
    vals = [v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    if not vals:
        return float("nan")
    return float(np.median(vals))


def fold_median(records, metric: str, keys=("city", "year")) -> dict[tuple, float]:
    """Median of `metric` across folds within each sample group."""
    groups: dict[tuple, list] = {}
    for r in records:
        groups.setdefault(tuple(getattr(r, k) for k in keys), []).append(getattr(r, metric))
    return {g: _median(vals) for g, vals in groups.items()}


def fold_std(records, metric: str, keys=("city", "year")) -> dict[tuple, float]:
    """Population SD of `metric` across folds within each sample group
    (the cross-fold stability statistic, e.g. F1_std)."""
    groups: dict[tuple, list] = {}
    for r in records:
        v = getattr(r, metric)
        if v is not None and not math.isnan(v):
            groups.setdefault(tuple(getattr(r, k) for k in keys), []).append(v)
    return {g: float(np.std(vals)) for g, vals in groups.items() if vals}


def cross_sample_median(records, metric: str, keys=("city", "year")) -> float:
    """Fold-median within samples, then median across samples."""
    return _median(fold_median(records, metric, keys).values())


def rank_models(scores: dict[str, dict]) -> tuple[dict[str, float], dict[str, int]]:
    """Cross-sample average ranks (1 = best, higher metric wins, ties share
    the average rank) and win counts under the shared-first rule."""
    models = sorted(scores)
    if len(models) < 2:
        raise ValueError("need at least 2 models to rank")
    samples = set(scores[models[0]])
    for m in models[1:]:
        if set(scores[m]) != samples:
            raise ValueError("models scored on different sample sets")
    ranks = {m: [] for m in models}
    wins = {m: 0 for m in models}
    for s in samples:
        vals = np.array([scores[m][s] for m in models], dtype=np.float64)
        r = rankdata(-vals, method="average")
        best = vals.max()
        for m, ri, v in zip(models, r, vals):
            ranks[m].append(ri)
            if v == best:
                wins[m] += 1
    return {m: float(np.mean(ranks[m])) for m in models}, wins


def marginal_gain(combo_records, baseline_records, metric: str) -> tuple[dict[str, float], int]:
    """Per-city gain of a combination over the C0 baseline.

    Records are matched on (city, year, model, protocol, fold); per-pair
    differences are fold-median aggregated within (city, year), then median
    across years per city. Returns (per-city gains, dropped-pair count)."""
    def key(r):
        return (r.city, r.year, r.model, r.protocol, r.fold)

    base = {key(r): getattr(r, metric) for r in baseline_records}
    diffs = []
    dropped = 0
    for r in combo_records:
        b = base.get(key(r))
        v = getattr(r, metric)
        if b is None or v is None or math.isnan(v) or math.isnan(b):
            dropped += 1
            continue
        diffs.append((r.city, r.year, v - b))
    per_sample: dict[tuple, list] = {}
    for city, year, d in diffs:
        per_sample.setdefault((city, year), []).append(d)
    per_city: dict[str, list] = {}
    for (city, _), vals in per_sample.items():
        per_city.setdefault(city, []).append(float(np.median(vals)))
    return {c: float(np.median(v)) for c, v in per_city.items()}, dropped


def usability_gate(f1: float, r2: float) -> str:
    """Inclusive dual-task gate: F1 >= 0.5 and R^2 >= 0.3."""
    cls_ok = f1 >= GATE_F1
    reg_ok = r2 >= GATE_R2
    if cls_ok and reg_ok:
        return "both"
    if cls_ok:
        return "cls-only"
    if reg_ok:
        return "reg-only"
    return "neither"


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank test
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float   # V+ = sum of ranks of positive differences
    p_value: float     # two-sided
    n_effective: int   # pairs after dropping zero differences
    mode: str          # "exact" | "normal" | "degenerate"


def wilcoxon_signed_rank(a, b) -> WilcoxonResult:
    """Two-sided paired signed-rank test. Zero differences are dropped; the
    null is enumerated over all sign assignments (midranks, so ties are
    handled exactly) for n <= 12, and normally approximated with tie
    correction beyond. All-zero differences give p = 1 by convention."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, "degenerate")
    ranks = rankdata(np.abs(d))
    v_obs = float(ranks[d > 0].sum())
    mu = ranks.sum() / 2.0
    if n <= WILCOXON_EXACT_N:
        # V over all 2^n sign assignments.
        signs = (np.arange(2**n)[:, None] >> np.arange(n)[None, :]) & 1
        v_all = signs @ ranks
        p = float(np.mean(np.abs(v_all - mu) >= abs(v_obs - mu) - 1e-12))
        return WilcoxonResult(v_obs, p, n, "exact")
    # Normal approximation with tie correction and 0.5 continuity correction.
    _, counts = np.unique(ranks, return_counts=True)
    sigma2 = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(counts**3 - counts) / 48.0
    if sigma2 <= 0:
        return WilcoxonResult(v_obs, 1.0, n, "normal")
    z = max(abs(v_obs - mu) - 0.5, 0.0) / math.sqrt(sigma2)
    p = min(1.0, 2.0 * float(norm.sf(z)))
    return WilcoxonResult(v_obs, p, n, "normal")
