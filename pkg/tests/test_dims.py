import numpy as np
import pytest

from slumbench.dims import (ImportanceTable, PcaModel, attribute,
                            consensus_and_significance, linear_attribution,
                            mc_shapley, pca_fit, pca_inverse, pca_transform,
                            saturation_point, wilcoxon_table)
from slumbench.metrics import EvalRecord
from slumbench.models import ModelSpec, train


def test_pca_roundtrip_and_evr(rng):
    x = rng.normal(size=(200, 64)) * rng.uniform(0.1, 5.0, size=64)
    p = pca_fit(x)
    z = pca_transform(p, x, 64)
    assert np.sqrt(np.mean((pca_inverse(p, z) - x) ** 2)) < 1e-6
    assert np.all(np.diff(p.evr) <= 1e-12)
    assert p.evr.sum() == pytest.approx(1.0, abs=1e-9)
    eye = p.components @ p.components.T
    assert np.max(np.abs(eye - np.eye(64))) < 1e-9


def test_pca_rank2_plane(rng):
    basis = np.linalg.qr(rng.normal(size=(64, 2)))[0]
    coeff = rng.normal(size=(300, 2)) * [3.0, 1.0]
    x = coeff @ basis.T
    p = pca_fit(x)
    assert p.rank_deficient
    assert np.all(p.evr[2:] < 1e-12)
    z = pca_transform(p, x, 2)
    assert np.max(np.abs(pca_inverse(p, z) - x)) < 1e-9


def test_pca_isometry_at_full_rank(rng):
    x = rng.normal(size=(100, 64))
    p = pca_fit(x)
    z = pca_transform(p, x, 64)
    d_x = np.linalg.norm(x[0] - x[1])
    d_z = np.linalg.norm(z[0] - z[1])
    assert d_z == pytest.approx(d_x, abs=1e-9)
    # cumulative EVR non-decreasing in k
    cum = np.cumsum(p.evr)
    assert np.all(np.diff(cum) >= -1e-15)


def test_pca_requires_enough_rows(rng):
    with pytest.raises(ValueError, match="full-rank"):
        pca_fit(rng.normal(size=(64, 64)))


def test_saturation_examples():
    assert saturation_point([8, 16, 24, 32], [0.50, 0.58, 0.60, 0.60]) == 16
    # earlier values below 95% of the final peak
    assert saturation_point([8, 16, 32, 64], [0.50, 0.60, 0.70, 0.80]) == 64
    assert saturation_point([8, 16], [-0.2, 0.0]) is None
    # invariant under positive rescaling
    assert saturation_point([8, 16, 24], np.array([0.5, 0.58, 0.6]) * 7.0) == 16
    with pytest.raises(ValueError):
        saturation_point([8], [0.1, 0.2])


def test_linear_attribution_worked_example():
    phi = linear_attribution([2.0, -1.0], [3.0, 4.0], [1.0, 2.0])
    assert phi.tolist() == [4.0, -2.0]
    assert phi.sum() == 2.0  # f(x) - f(reference)


def test_mc_shapley_efficiency_and_dummy(rng):
    w = rng.normal(size=5)
    f = lambda X: np.tanh(X @ w) + 0.3 * X[:, 0] ** 2
    x, ref = rng.normal(size=5), rng.normal(size=5)
    phi = mc_shapley(f, x, ref, n_orderings=300, seed=1)
    gap = f(x[None])[0] - f(ref[None])[0]
    assert phi.sum() == pytest.approx(gap, abs=1e-10)

    # feature 4 unused -> zero attribution
    g = lambda X: X[:, 0] * 2.0 + np.abs(X[:, 1])
    phi_g = mc_shapley(g, x, ref, n_orderings=200, seed=2)
    assert abs(phi_g[4]) < 1e-12


def test_mc_shapley_matches_closed_form_linear(rng):
    for trial in range(3):
        d = int(rng.integers(3, 10))
        w = rng.normal(size=d)
        b = float(rng.normal())
        f = lambda X: X @ w + b
        x, ref = rng.normal(size=d), rng.normal(size=d)
        exact = linear_attribution(w, x, ref)
        mc = mc_shapley(f, x, ref, n_orderings=2000, seed=trial)
        scale = np.max(np.abs(exact)) + 1e-12
        assert np.max(np.abs(mc - exact)) / scale < 0.02


def test_attribute_linear_model_closed_form(rng):
    x = rng.normal(size=(300, 6))
    y = x @ np.array([3.0, -2.0, 0.0, 0.0, 1.0, 0.0]) + 5
    m = train(ModelSpec(task="reg", family="linear", seed=0), x, y)
    imp = attribute(m, x[:200], x[200:], n_orderings=50, seed=0)
    assert imp.shape == (6,)
    # ridge leaves only shrinkage-scale weight on unused features
    assert imp[2] < 0.01 * imp[0] and imp[3] < 0.01 * imp[0]
    assert imp[0] > imp[4] > imp[2]


def test_attribute_nonlinear_dummy_property(rng):
    x = rng.normal(size=(300, 4))
    y = (x[:, 0] > 0).astype(np.uint8)
    m = train(ModelSpec(task="cls", family="hist_gbt", seed=0,
                        params={"n_iter": 30}), x, y)
    imp = attribute(m, x[:200], x[200:210], n_orderings=64, seed=0)
    assert imp[0] > 10 * max(imp[1], imp[2], imp[3])


def test_consensus_full_agreement():
    values = np.zeros((1, 4, 64))
    values[:, :, 36] = 5.0            # one dimension leads for all models
    values[:, :, :36] = np.linspace(0.1, 0.5, 36)
    values += np.random.default_rng(0).uniform(0, 0.01, values.shape)
    t = consensus_and_significance(
        ImportanceTable(cities=["X"], models=list("ABCD"), values=values), n_perm=100, seed=0)
    assert t.consensus[36] == 4
    assert all(t.model_ranks[m, 36] == 1 for m in range(4))


def test_consensus_null_calibration(rng):
    hits = 0
    total = 0
    for trial in range(6):
        values = rng.random((3, 2, 64))
        t = consensus_and_significance(
            ImportanceTable(cities=list("XYZ"), models=["a", "b"], values=values),
            n_perm=400, seed=trial)
        hits += int(np.sum(t.perm_p <= 0.05))
        total += 64
    rate = hits / total
    assert 0.01 <= rate <= 0.10


def test_consensus_single_model():
    values = np.random.default_rng(1).random((2, 1, 64))
    t = consensus_and_significance(
        ImportanceTable(cities=["X", "Y"], models=["m"], values=values), n_perm=50, seed=0)
    assert set(np.unique(t.consensus)) <= {0, 1}
    with pytest.raises(ValueError):
        consensus_and_significance(
            ImportanceTable(cities=["X"], models=["m"],
                            values=np.zeros((1, 1, 4))), n_perm=10)


def _abl_rec(k, f1, city="AAA", fold=0):
    return EvalRecord(city=city, year=2022, strategy="S1", combo="C0", model="linear",
                      task="cls", protocol="random", fold=fold, seed=0, k=k, f1=f1)


def test_wilcoxon_table_self_comparison():
    recs = []
    for city, base in (("AAA", 0.6), ("BBB", 0.5), ("CCC", 0.7)):
        for k, delta in ((8, -0.1), (64, 0.0)):
            recs.append(_abl_rec(k, base + delta, city=city))
    rows = wilcoxon_table(recs, [8, 64])
    row64 = next(r for r in rows if r.k == 64)
    assert row64.median_delta == 0.0 and row64.p_value == 1.0
    assert row64.pct_of_full == pytest.approx(100.0)
    row8 = next(r for r in rows if r.k == 8)
    assert row8.median_delta == pytest.approx(-0.1)
    assert row8.pct_of_full < 100.0
