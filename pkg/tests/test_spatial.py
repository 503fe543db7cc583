import numpy as np
import pytest
from scipy.ndimage import minimum_filter

from slumbench.grid import Grid
from slumbench.spatial import (SpatialWeights, area_pct_err, lisa, morans_i,
                               queen_weights, residual_moran, ssim_binary)


def dense_moran_oracle(values, w):
    """O(n^2) double-loop statistic over the full weight matrix."""
    dense = w.dense()
    z = values - values.mean()
    num = 0.0
    for i in range(w.n):
        for j in range(w.n):
            num += dense[i, j] * z[i] * z[j]
    return w.n / dense.sum() * num / float(z @ z)


def test_queen_weights_examples():
    w = queen_weights(3, 3)
    assert w.degrees[4] == 8  # interior
    assert w.degrees[0] == 3  # corner
    assert np.allclose(w.weights[w.indptr[4]:w.indptr[5]], 1 / 8)
    assert np.allclose(w.weights[w.indptr[0]:w.indptr[1]], 1 / 3)
    # row sums: 1 for connected cells
    lag = w.lag(np.ones(9))
    assert np.allclose(lag, 1.0)


def test_queen_isolate_flagged():
    valid = np.zeros((5, 5), dtype=bool)
    valid[0, 0] = True
    valid[3:, 3:] = True
    w = queen_weights(5, 5, valid)
    assert 0 in w.isolates  # the lone corner cell
    assert w.lag(np.ones(w.n))[0] == 0.0


def test_moran_matches_dense_oracle(rng):
    for _ in range(10):
        h, w_ = int(rng.integers(4, 13)), int(rng.integers(4, 13))
        valid = rng.random((h, w_)) < 0.9
        valid.ravel()[:3] = True
        w = queen_weights(h, w_, valid)
        vals = rng.normal(size=w.n)
        res = morans_i(vals, w, n_perm=9, seed=0)
        assert res.I == pytest.approx(dense_moran_oracle(vals, w), abs=1e-9)


def test_moran_halfplane_strongly_positive():
    v = np.zeros((50, 50))
    v[:, 25:] = 1.0
    w = queen_weights(50, 50)
    res = morans_i(v.ravel(), w, n_perm=99, seed=0)
    assert res.I > 0.9
    assert res.p_perm <= 0.01


def test_moran_checkerboard_negative(rng):
    v = (np.indices((4, 4)).sum(axis=0) % 2).astype(float)
    w = queen_weights(4, 4)
    res = morans_i(v.ravel(), w, n_perm=9, seed=0)
    assert res.I < 0
    assert res.I == pytest.approx(dense_moran_oracle(v.ravel(), w), abs=1e-12)


def test_moran_permutation_mean_near_expectation(rng):
    v = rng.normal(size=15 * 15)
    w = queen_weights(15, 15)
    res = morans_i(v, w, n_perm=999, seed=3)
    se = res.perm_std / np.sqrt(res.n_perm)
    assert abs(res.perm_mean - res.expected) < 3 * se


def test_moran_affine_invariance(rng):
    v = rng.normal(size=100)
    w = queen_weights(10, 10)
    base = morans_i(v, w, n_perm=9, seed=0).I
    assert morans_i(3.5 * v - 11.0, w, n_perm=9, seed=0).I == pytest.approx(base, abs=1e-12)


def test_moran_raw_weight_scale_invariance(rng):
    # multiplying all raw weights by a positive constant rescales S0 and the
    # numerator identically
    v = rng.normal(size=36)
    w = queen_weights(6, 6)
    scaled = SpatialWeights(n=w.n, indptr=w.indptr, neighbors=w.neighbors,
                            weights=w.weights * 7.3, cell_ids=w.cell_ids)
    assert morans_i(v, scaled, n_perm=9, seed=0).I == pytest.approx(
        morans_i(v, w, n_perm=9, seed=0).I, abs=1e-12)


def test_moran_constant_field_errors():
    w = queen_weights(4, 4)
    with pytest.raises(ValueError, match="constant"):
        morans_i(np.ones(16), w)


def test_residual_moran(rng):
    h = w_ = 20
    gt = rng.normal(size=(h, w_))
    w = queen_weights(h, w_)
    # iid residuals: no structure
    res = residual_moran(gt.ravel(), gt.ravel() + rng.normal(size=h * w_), w,
                         n_perm=99, seed=0)
    assert abs(res.I - res.perm_mean) < 3 * res.perm_std
    # one block uniformly shifted: strong structure
    pred = gt.copy()
    pred[:10, :10] += 5.0
    res2 = residual_moran(gt.ravel(), pred.ravel(), w, n_perm=99, seed=0)
    assert res2.I > 0.5 and res2.p_perm <= 0.01
    with pytest.raises(ValueError):
        residual_moran(gt.ravel(), gt.ravel(), w)


def test_lisa_planted_clusters():
    h = w_ = 60
    v = np.zeros((h, w_))
    yy, xx = np.mgrid[0:h, 0:w_]
    for cy, cx, r in [(15, 15, 8), (42, 44, 8)]:
        v[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 1.0
    w = queen_weights(h, w_)
    lm = lisa(v.ravel(), w, n_perm=99, seed=7, alpha=0.05)
    quad = lm.quadrant.reshape(h, w_)
    inside = v == 1
    interior = minimum_filter(inside.astype(int), size=3, mode="constant") == 1
    assert interior.sum() > 100
    assert np.all(quad[interior] == 1)              # HH
    assert np.sum(quad[~inside] == 1) == 0           # no HH in background
    far = minimum_filter((~inside).astype(int), size=5, mode="constant") == 1
    assert np.all(np.isin(quad[far], [0, 2]))        # LL or NS only


def test_lisa_quadrant_counts_partition(rng):
    v = rng.normal(size=81)
    w = queen_weights(9, 9)
    lm = lisa(v, w, n_perm=99, seed=1)
    counts = lm.counts()
    assert sum(counts.values()) == w.n - len(w.isolates)  # plus isolates as NS
    assert counts["NS"] + counts["HH"] + counts["LL"] + counts["HL"] + counts["LH"] == w.n


def test_lisa_isolates_are_ns(rng):
    valid = np.zeros((5, 5), dtype=bool)
    valid[0, 0] = True
    valid[3:, 3:] = True
    w = queen_weights(5, 5, valid)
    lm = lisa(rng.normal(size=w.n), w, n_perm=49, seed=0)
    assert lm.quadrant[0] == 0 and lm.p[0] == 1.0


def test_lisa_constant_errors():
    w = queen_weights(4, 4)
    with pytest.raises(ValueError, match="constant"):
        lisa(np.ones(16), w)


def _bgrid(vals):
    vals = np.asarray(vals, dtype=np.float32)
    return Grid(width=vals.shape[1], height=vals.shape[0], values=vals)


def test_ssim_identity_and_symmetry(rng):
    a = _bgrid((rng.random((20, 20)) < 0.4).astype(float))
    b = _bgrid((rng.random((20, 20)) < 0.4).astype(float))
    assert ssim_binary(a, a) == 1.0
    assert abs(ssim_binary(a, b) - ssim_binary(b, a)) < 1e-12
    s = ssim_binary(a, b)
    # standard formula range; anti-correlated windows can push below zero
    assert -1.0 <= s < 1.0


def test_ssim_all_zero_vs_all_one():
    z = _bgrid(np.zeros((12, 12)))
    o = _bgrid(np.ones((12, 12)))
    c1 = 1e-4
    assert ssim_binary(z, o) == pytest.approx(c1 / (1 + c1), abs=1e-7)


def test_ssim_excludes_sentinel_windows(rng):
    vals = (rng.random((20, 20)) < 0.5).astype(np.float32)
    withhole = vals.copy()
    withhole[8:12, 8:12] = -9999.0
    a = _bgrid(vals)
    h = _bgrid(withhole)
    s = ssim_binary(h, h)
    assert s == 1.0  # identical windows, hole excluded
    with pytest.raises(ValueError, match="geometry"):
        ssim_binary(a, _bgrid(np.zeros((10, 10))))
    with pytest.raises(ValueError, match="window"):
        ssim_binary(_bgrid(np.zeros((5, 5))), _bgrid(np.ones((5, 5))))


def test_area_pct_err_examples():
    gt = _bgrid(np.array([[1, 1, 0, 0]], dtype=float))
    assert area_pct_err(gt, gt) == 0.0
    pred = _bgrid(np.array([[1, 1, 1, 0]], dtype=float))
    assert area_pct_err(gt, pred) == pytest.approx(50.0)
    with pytest.raises(ValueError, match="zero ground-truth"):
        area_pct_err(_bgrid(np.zeros((1, 4))), pred)
