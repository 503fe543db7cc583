"""Histogram gradient-boosted trees.

Features are pre-binned into at most `max_bins` quantile bins (cuts are
midpoints between adjacent order statistics, so bin membership — and hence
the whole ensemble — is invariant to strictly monotone feature transforms
for values drawn from the training value set). Split search runs on bin
histograms of gradient/hessian sums; sibling histograms are obtained by
subtraction from the parent. Classification boosts the logistic loss with
Newton leaf values; regression boosts the Huber loss (delta-clipped
gradients, unit curvature). Training is fully deterministic: no RNG is
involved anywhere.

The histogram / split-scan / tree-walk kernels are numba-compiled; they are
plain loops over the same arithmetic the docstrings above describe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

_EPS_HESS = 1e-12
_MIN_GAIN = 1e-12


def huber_loss(residual: np.ndarray, delta: float) -> np.ndarray:
    """Elementwise Huber loss: 0.5 r^2 for |r| <= delta, else delta(|r| - delta/2)."""
    r = np.abs(np.asarray(residual, dtype=np.float64))
    return np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def quantile_bin_thresholds(col: np.ndarray, max_bins: int) -> np.ndarray:
    """Bin cut points for one feature.

    Few distinct values: midpoints between every adjacent pair. Otherwise
    cuts at quantile rank positions, again as midpoints of the two bracketing
    order statistics (never interpolated values, preserving partition
    stability under monotone transforms).
    """
    distinct = np.unique(col)
    if distinct.size <= 1:
        return np.empty(0, dtype=np.float64)
    if distinct.size <= max_bins:
        return (distinct[:-1] + distinct[1:]) / 2.0
    s = np.sort(col)
    idx = (s.size * np.arange(1, max_bins) / max_bins).astype(np.int64)
    lo, hi = s[idx - 1], s[idx]
    keep = lo < hi
    return np.unique((lo[keep] + hi[keep]) / 2.0)


def bin_features(x: np.ndarray, thresholds: list[np.ndarray]) -> np.ndarray:
    """(n, d) uint16 bin indices: bin = number of thresholds <= value."""
    n, d = x.shape
    binned = np.empty((n, d), dtype=np.uint16)
    for j in range(d):
        binned[:, j] = np.searchsorted(thresholds[j], x[:, j], side="right")
    return binned


@njit(cache=True)
def _hist_kernel(binned, idx, grad, hess, stride):
    d = binned.shape[1]
    cnt = np.zeros((d, stride), dtype=np.float64)
    g = np.zeros((d, stride), dtype=np.float64)
    h = np.zeros((d, stride), dtype=np.float64)
    for ii in range(idx.size):
        i = idx[ii]
        gi = grad[i]
        hi = hess[i]
        for j in range(d):
            b = binned[i, j]
            cnt[j, b] += 1.0
            g[j, b] += gi
            h[j, b] += hi
    return cnt, g, h


@njit(cache=True)
def _split_kernel(cnt, g, h, n_bins, min_samples_leaf, eps, min_gain):
    """Best Newton-gain cut; first encountered wins ties (feature, then bin).
    Returns (gain, feature, bin); feature -1 means no admissible split."""
    d = cnt.shape[0]
    best_gain = min_gain
    best_j = -1
    best_b = -1
    for j in range(d):
        nb = n_bins[j]
        if nb < 2:
            continue
        ctot = 0.0
        gtot = 0.0
        htot = 0.0
        for b in range(nb):
            ctot += cnt[j, b]
            gtot += g[j, b]
            htot += h[j, b]
        base = gtot * gtot / (htot + eps)
        cl = 0.0
        gl = 0.0
        hl = 0.0
        for b in range(nb - 1):
            cl += cnt[j, b]
            gl += g[j, b]
            hl += h[j, b]
            if cl < min_samples_leaf or ctot - cl < min_samples_leaf:
                continue
            gr = gtot - gl
            hr = htot - hl
            gain = gl * gl / (hl + eps) + gr * gr / (hr + eps) - base
            if gain > best_gain:
                best_gain = gain
                best_j = j
                best_b = b
    return best_gain, best_j, best_b


@njit(cache=True)
def _walk_kernel(feature, bin_split, left, right, value, binned):
    n = binned.shape[0]
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        nid = 0
        while feature[nid] >= 0:
            if binned[i, feature[nid]] <= bin_split[nid]:
                nid = left[nid]
            else:
                nid = right[nid]
        out[i] = value[nid]
    return out


@dataclass
class _Tree:
    """Flat node arrays; feature -1 marks a leaf."""

    feature: np.ndarray
    bin_split: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def apply(self, binned: np.ndarray) -> np.ndarray:
        return _walk_kernel(self.feature, self.bin_split, self.left, self.right,
                            self.value, binned)


def _grow_tree(binned, grad, hess, max_depth, min_samples_leaf, n_bins_per_feature):
    stride = int(n_bins_per_feature.max())
    feature, bin_split, left, right, value = [], [], [], [], []

    def new_node():
        feature.append(-1)
        bin_split.append(-1)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    root = new_node()
    stack = [(root, 0, np.arange(binned.shape[0]), None)]
    while stack:
        node_id, depth, idx, hists = stack.pop()
        if hists is None:
            hists = _hist_kernel(binned, idx, grad, hess, stride)
        cnt, g, h = hists
        # Feature 0's histogram partitions all node rows, so its sums are the node totals.
        value[node_id] = float(-g[0].sum() / (h[0].sum() + _EPS_HESS))
        if depth >= max_depth or idx.size < 2 * min_samples_leaf:
            continue
        gain, feat, b = _split_kernel(cnt, g, h, n_bins_per_feature, min_samples_leaf,
                                      _EPS_HESS, _MIN_GAIN)
        if feat < 0:
            continue
        go_left = binned[idx, feat] <= b
        left_idx, right_idx = idx[go_left], idx[~go_left]
        feature[node_id], bin_split[node_id] = feat, b
        left[node_id], right[node_id] = new_node(), new_node()
        # Histogram subtraction: build the smaller child, derive the sibling.
        if left_idx.size <= right_idx.size:
            small_id, small_idx = left[node_id], left_idx
            big_id, big_idx = right[node_id], right_idx
        else:
            small_id, small_idx = right[node_id], right_idx
            big_id, big_idx = left[node_id], left_idx
        small_h = _hist_kernel(binned, small_idx, grad, hess, stride)
        big_h = (cnt - small_h[0], g - small_h[1], h - small_h[2])
        stack.append((small_id, depth + 1, small_idx, small_h))
        stack.append((big_id, depth + 1, big_idx, big_h))
    return _Tree(
        feature=np.asarray(feature, dtype=np.int64),
        bin_split=np.asarray(bin_split, dtype=np.int64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        value=np.asarray(value, dtype=np.float64),
    )


@dataclass
class HistGBT:
    """Histogram gradient-boosted ensemble for binary classification
    (loss="logistic") or regression (loss="huber")."""

    loss: str = "logistic"
    n_iter: int = 200
    learning_rate: float = 0.1
    max_depth: int = 6
    max_bins: int = 256
    min_samples_leaf: int = 20
    huber_delta: float = 10.0
    thresholds_: list = field(default_factory=list, repr=False)
    trees_: list = field(default_factory=list, repr=False)
    base_score_: float = 0.0
    n_features_: int = 0

    def fit(self, x: np.ndarray, y: np.ndarray) -> "HistGBT":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if self.loss not in ("logistic", "huber"):
            raise ValueError(f"unknown loss {self.loss!r}")
        self.n_features_ = x.shape[1]
        self.thresholds_ = [quantile_bin_thresholds(x[:, j], self.max_bins) for j in range(x.shape[1])]
        binned = bin_features(x, self.thresholds_)
        n_bins = np.array([t.size + 1 for t in self.thresholds_], dtype=np.int64)

        if self.loss == "logistic":
            p = min(max(y.mean(), 1e-6), 1 - 1e-6)
            self.base_score_ = float(np.log(p / (1 - p)))
        else:
            self.base_score_ = float(y.mean())

        score = np.full(y.size, self.base_score_, dtype=np.float64)
        self.trees_ = []
        for _ in range(self.n_iter):
            if self.loss == "logistic":
                prob = _sigmoid(score)
                grad = prob - y
                hess = np.maximum(prob * (1 - prob), _EPS_HESS)
            else:
                grad = np.clip(score - y, -self.huber_delta, self.huber_delta)
                hess = np.ones_like(grad)
            tree = _grow_tree(binned, grad, hess, self.max_depth, self.min_samples_leaf, n_bins)
            self.trees_.append(tree)
            score += self.learning_rate * tree.apply(binned)
        return self

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1] != self.n_features_:
            raise ValueError(f"expected {self.n_features_} features, got {x.shape[1]}")
        binned = bin_features(x, self.thresholds_)
        score = np.full(x.shape[0], self.base_score_, dtype=np.float64)
        for tree in self.trees_:
            score += self.learning_rate * tree.apply(binned)
        return score

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        if self.loss != "logistic":
            raise ValueError("predict_proba requires logistic loss")
        return _sigmoid(self.decision_function(x))

    def predict(self, x: np.ndarray) -> np.ndarray:
        if self.loss != "huber":
            raise ValueError("predict requires huber loss")
        return self.decision_function(x)
