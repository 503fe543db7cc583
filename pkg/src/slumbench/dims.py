"""Embedding dimension analysis: PCA fitting/ablation, saturation-point
detection, Shapley-style per-dimension attribution, and cross-model
consensus with permutation significance.

Attribution uses one estimator family: exact closed-form attribution for
linear models (phi_j = w_j (x_j - ref_j)) and Monte-Carlo permutation
Shapley against the background-mean reference for everything else. Both
satisfy local accuracy: sum(phi) = f(x) - f(reference).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from . import models as model_zoo
from .metrics import (EvalRecord, WilcoxonResult, cls_metrics, decompose_r2,
                      fold_median, make_cls_record, make_reg_record,
                      reg_metrics, wilcoxon_signed_rank)
from .splits import SampleTable, Split, random_split, spatial_folds

PCA_K_GRID = (8, 16, 24, 32, 38, 48, 56, 64)
SATURATION_FRACTION = 0.95
CONSENSUS_TOP = 10


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray          # (d,)
    components: np.ndarray    # (d, d) orthonormal rows, descending eigenvalue
    evr: np.ndarray           # (d,) explained-variance ratios, sums to 1
    rank_deficient: bool = False


def pca_fit(rows: np.ndarray) -> PcaModel:
    """Full PCA of (n, d) rows; needs n >= d + 1 for a full-rank fit.
    Rank-deficient inputs are allowed (trailing ratios 0, flagged)."""
    x = np.asarray(rows, dtype=np.float64)
    n, d = x.shape
    if n < d + 1:
        raise ValueError(f"need at least {d + 1} rows for a full-rank fit, got {n}")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    # Deterministic sign: largest-|entry| coordinate positive.
    flip = np.sign(vt[np.arange(d), np.argmax(np.abs(vt), axis=1)])
    flip[flip == 0] = 1.0
    vt = vt * flip[:, None]
    var = s**2
    total = var.sum()
    evr = var / total if total > 0 else np.zeros(d)
    deficient = bool(np.any(s <= s[0] * 1e-12)) if s.size else True
    return PcaModel(mean=mean, components=vt, evr=evr, rank_deficient=deficient)


def pca_transform(model: PcaModel, rows: np.ndarray, k: int) -> np.ndarray:
    x = np.asarray(rows, dtype=np.float64)
    if not 1 <= k <= model.components.shape[0]:
        raise ValueError(f"k must be in 1..{model.components.shape[0]}")
    return (x - model.mean) @ model.components[:k].T


def pca_inverse(model: PcaModel, scores: np.ndarray) -> np.ndarray:
    z = np.asarray(scores, dtype=np.float64)
    return z @ model.components[: z.shape[1]] + model.mean


def saturation_point(ks: Sequence[int], values: Sequence[float]) -> Optional[int]:
    """Smallest grid k whose metric reaches 95% of the curve maximum; None
    when the maximum is <= 0 (no valid saturation)."""
    ks = list(ks)
    vals = np.asarray(list(values), dtype=np.float64)
    if len(ks) != vals.size or vals.size == 0:
        raise ValueError("k grid and curve must align and be non-empty")
    best = np.nanmax(vals)
    if not best > 0:
        return None
    cut = SATURATION_FRACTION * best
    for k, v in sorted(zip(ks, vals)):
        if v >= cut:
            return k
    return None


# ---------------------------------------------------------------------------
# Attribution
# ---------------------------------------------------------------------------

def linear_attribution(weights: np.ndarray, x: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Exact per-feature attribution of a linear score w.x + b against a
    reference point: phi_j = w_j (x_j - ref_j)."""
    return np.asarray(weights, dtype=np.float64) * (
        np.asarray(x, dtype=np.float64) - np.asarray(reference, dtype=np.float64)
    )


def mc_shapley(
    predict_fn: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    reference: np.ndarray,
    n_orderings: int,
    seed: int = 0,
    chunk: int = 256,
) -> np.ndarray:
    """Monte-Carlo permutation Shapley values of f at x against a single
    reference point. Each sampled feature ordering contributes the telescoped
    marginal f-differences, so sum(phi) = f(x) - f(reference) exactly."""
    if n_orderings < 1:
        raise ValueError("need at least one sampled ordering")
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    d = x.size
    rng = np.random.default_rng(seed)
    phi = np.zeros(d)
    done = 0
    while done < n_orderings:
        m = min(chunk, n_orderings - done)
        orders = np.array([rng.permutation(d) for _ in range(m)])
        pos = np.argsort(orders, axis=1)                     # pos[r, j]: step feature j enters
        # points[r, t] = reference with the first t features of ordering r set to x
        mask = pos[:, None, :] < np.arange(d + 1)[None, :, None]
        points = np.where(mask, x[None, None, :], ref[None, None, :])
        vals = np.asarray(predict_fn(points.reshape(-1, d)), dtype=np.float64).reshape(m, d + 1)
        deltas = np.diff(vals, axis=1)                       # marginal of orders[r, t]
        np.add.at(phi, orders.ravel(), deltas.ravel())
        done += m
    return phi / n_orderings


def attribute(
    model: "model_zoo.TrainedModel",
    background: np.ndarray,
    explain_rows: np.ndarray,
    n_orderings: int = 200,
    seed: int = 0,
) -> np.ndarray:
    """Mean |attribution| per dimension of the model score over the explain
    rows, against the background-mean reference. Linear models use the exact
    closed form; others Monte-Carlo permutation Shapley."""
    background = np.asarray(background, dtype=np.float64)
    if background.size == 0:
        raise ValueError("background must be non-empty")
    explain_rows = np.atleast_2d(np.asarray(explain_rows, dtype=np.float64))
    ref = background.mean(axis=0)
    if model.spec.family == "linear":
        w, _ = model.linear_coefficients()
        return np.abs(explain_rows - ref).mean(axis=0) * np.abs(w)
    total = np.zeros(explain_rows.shape[1])
    for i, row in enumerate(explain_rows):
        total += np.abs(
            mc_shapley(model.decision_function, row, ref, n_orderings, seed=seed + i)
        )
    return total / len(explain_rows)


# ---------------------------------------------------------------------------
# Importance tables, consensus, permutation significance
# ---------------------------------------------------------------------------

@dataclass
class ImportanceTable:
    """Mean |attribution| per (city, model, dimension) with derived ranks,
    cross-model consensus and permutation significance."""

    cities: list
    models: list
    values: np.ndarray                      # (n_cities, n_models, d)
    model_ranks: np.ndarray | None = None   # (n_models, d), 1 = most important
    consensus: np.ndarray | None = None     # (d,)
    perm_p: np.ndarray | None = None        # (d,)

    @property
    def d(self) -> int:
        return self.values.shape[2]

    def per_city_model_ranks(self) -> np.ndarray:
        """(n_cities, n_models, d) ranks, 1 = largest mean |attribution|."""
        flat = self.values.reshape(-1, self.d)
        ranks = np.vstack([rankdata(-row, method="average") for row in flat])
        return ranks.reshape(self.values.shape)


def consensus_and_significance(table: ImportanceTable, n_perm: int = 1000, seed: int = 0) -> ImportanceTable:
    """Fill per-model ranks, top-10 consensus counts, and the add-one tail
    probability of each dimension's observed mean rank under independent
    random rank permutations per (city, model)."""
    n_cities, n_models, d = table.values.shape
    if n_cities < 2 and n_models < 2:
        raise ValueError("need at least 2 models or 2 cities")
    # Cross-city aggregated importance per model -> per-model ranks and consensus.
    per_model = table.values.mean(axis=0)
    model_ranks = np.vstack([rankdata(-row, method="average") for row in per_model])
    consensus = (model_ranks <= CONSENSUS_TOP).sum(axis=0).astype(np.int64)

    cm_ranks = table.per_city_model_ranks().reshape(-1, d)   # (n_cities*n_models, d)
    observed = cm_ranks.mean(axis=0)
    rng = np.random.default_rng(seed)
    hits = np.zeros(d, dtype=np.int64)
    for _ in range(n_perm):
        perm_mean = np.zeros(d)
        for row in cm_ranks:
            perm_mean += row[rng.permutation(d)]
        perm_mean /= cm_ranks.shape[0]
        hits += (perm_mean <= observed).astype(np.int64)
    p = (hits + 1) / (n_perm + 1)
    table.model_ranks = model_ranks
    table.consensus = consensus
    table.perm_p = p
    return table


# ---------------------------------------------------------------------------
# PCA ablation over the k grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WilcoxonRow:
    model: str
    task: str
    protocol: str
    k: int
    median_delta: float          # median over samples of metric(k) - metric(64)
    p_value: float
    pct_of_full: float           # median metric(k) / median metric(64) * 100


def _eval_fold(table, split, k, pca_k_models, family, task, seed, threshold):
    train_x = table.x[split.train_idx]
    test_x = table.x[split.test_idx]
    pca = pca_k_models  # fitted on train rows by caller
    ztr = pca_transform(pca, train_x, k)
    zte = pca_transform(pca, test_x, k)
    spec = model_zoo.ModelSpec(task=task, family=family, seed=seed)
    if task == "cls":
        y_tr = table.y_cls[split.train_idx]
        y_te = table.y_cls[split.test_idx]
        m = model_zoo.train(spec, ztr, y_tr)
        return cls_metrics(y_te, m.predict_proba(zte), threshold)
    y_tr = table.y_reg[split.train_idx]
    y_te = table.y_reg[split.test_idx]
    m = model_zoo.train(spec, ztr, y_tr)
    return reg_metrics(y_te, m.predict_density(zte))


def ablation_run(
    tables: dict[tuple[str, int], SampleTable],
    k_grid: Sequence[int] = PCA_K_GRID,
    families: Sequence[str] = ("linear", "hist_gbt", "rf", "mlp"),
    tasks: Sequence[str] = ("cls", "reg"),
    protocols: Sequence[str] = ("random", "spatial"),
    seed: int = 0,
    threshold: float = 0.5,
) -> tuple[list[EvalRecord], list[WilcoxonRow]]:
    """Retrain every family at every retained-component count k over the
    embedding columns (the first 64) of each table, under the target-city
    protocol folds (S1). Emits per-fold records plus the per-k Wilcoxon
    comparison against k = 64 across samples."""
    k_grid = sorted(set(int(k) for k in k_grid))
    d_embed = 64
    if any(k < 1 or k > d_embed for k in k_grid):
        raise ValueError("k grid must lie within 1..64")
    records: list[EvalRecord] = []
    for (city, year), table in sorted(tables.items()):
        emb = table.with_features(table.x[:, :d_embed])
        for protocol in protocols:
            if protocol == "random":
                splits = [random_split(emb, seed=seed)]
            else:
                splits = spatial_folds(emb)
            for split in splits:
                # PCA is fitted on the training partition only.
                pca = pca_fit(emb.x[split.train_idx])
                for family in families:
                    for task in tasks:
                        for k in k_grid:
                            m = _eval_fold(emb, split, k, pca, family, task, seed, threshold)
                            base = dict(city=city, year=year, strategy="S1", combo="C0",
                                        model=family, protocol=protocol, fold=split.fold,
                                        seed=seed, threshold=threshold, k=k,
                                        n_train=len(split.train_idx), n_test=len(split.test_idx))
                            if task == "cls":
                                records.append(make_cls_record(base, m))
                            else:
                                records.append(make_reg_record(base, m))
    wil = wilcoxon_table(records, k_grid)
    return records, wil


def wilcoxon_table(records: Sequence[EvalRecord], k_grid: Sequence[int]) -> list[WilcoxonRow]:
    """Per (model, task, protocol, k): paired signed-rank test of the
    per-sample fold-medians at k against k = 64."""
    if 64 not in k_grid:
        return []
    rows: list[WilcoxonRow] = []
    combos = sorted({(r.model, r.task, r.protocol) for r in records})
    for model, task, protocol in combos:
        metric = "f1" if task == "cls" else "r2"
        sub = [r for r in records if (r.model, r.task, r.protocol) == (model, task, protocol)]
        per_k = {
            k: fold_median([r for r in sub if r.k == k], metric) for k in k_grid
        }
        base = per_k[64]
        samples = sorted(base)
        base_vals = np.array([base[s] for s in samples])
        base_med = float(np.median(base_vals)) if samples else float("nan")
        for k in k_grid:
            cur = per_k[k]
            vals = np.array([cur[s] for s in samples])
            res = wilcoxon_signed_rank(vals, base_vals)
            med_delta = float(np.median(vals - base_vals)) if samples else float("nan")
            pct = float(np.median(vals) / base_med * 100.0) if base_med else float("nan")
            rows.append(WilcoxonRow(model=model, task=task, protocol=protocol, k=k,
                                    median_delta=med_delta, p_value=res.p_value, pct_of_full=pct))
    return rows
