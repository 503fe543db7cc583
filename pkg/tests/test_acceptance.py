"""Acceptance gate: one test per criterion, each at its stated tolerance.

A one-line PASS/FAIL verdict per criterion is printed in the terminal
summary (see conftest). The full suite is CPU-heavy (criterion 11 trains
the whole model zoo over a spatial-CV grid); expect roughly 10-20 minutes
on a laptop.
"""

import itertools
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from slumbench.dims import (linear_attribution, mc_shapley, pca_fit,
                            pca_inverse, pca_transform, saturation_point)
from slumbench.labels import SubpixelMask, aggregate
from slumbench.metrics import (cls_metrics, cross_sample_median, decompose_r2,
                               usability_gate, wilcoxon_signed_rank)
from slumbench.models import ModelSpec, train
from slumbench.pipeline import RunManifest, run
from slumbench.spatial import lisa, morans_i, queen_weights, ssim_binary
from slumbench.splits import (assemble_strategy, audit_no_leakage, random_split,
                              spatial_folds)
from slumbench.synth import SyntheticWorldSpec, synth_world

from test_metrics import wilcoxon_enumeration_oracle
from test_models import xor_table
from test_splits import make_table


def check(cid: str, ok: bool, detail: str = ""):
    ACCEPTANCE_LINES.append(f"{cid}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"{cid} failed: {detail}"


def test_c01_label_aggregation_oracle():
    """50 random 170x170 sub-pixel masks: aggregate == brute force, exactly."""
    rng = np.random.default_rng(1)
    t0 = time.time()
    mismatches = 0
    density_exact = True
    for _ in range(50):
        bits = rng.random((170, 170)) < rng.uniform(0.02, 0.9)
        mask = SubpixelMask(width=10, height=10, bits=bits)
        lp = aggregate(mask)
        counts = np.zeros((10, 10), dtype=np.int64)
        for r in range(170):
            for c in range(170):
                if bits[r, c]:
                    counts[r // 17, c // 17] += 1
        mismatches += int(np.sum(lp.count != counts))
        density_exact &= bool(np.all(lp.density == lp.count / 289.0))
    elapsed = time.time() - t0
    check("C01 label aggregation", mismatches == 0 and density_exact and elapsed < 5.0,
          f"mismatching cells={mismatches}, density exact={density_exact}, {elapsed:.2f}s")


def test_c02_moran_dense_oracle_and_permutation_mean():
    rng = np.random.default_rng(2)
    max_err = 0.0
    for _ in range(100):
        h, w_ = int(rng.integers(4, 31)), int(rng.integers(4, 31))
        w = queen_weights(h, w_)
        vals = rng.normal(size=w.n)
        sparse_i = morans_i(vals, w, n_perm=9, seed=0).I
        dense = w.dense()
        z = vals - vals.mean()
        dense_i = w.n / dense.sum() * float(z @ dense @ z) / float(z @ z)
        max_err = max(max_err, abs(sparse_i - dense_i))
    w = queen_weights(30, 30)
    res = morans_i(rng.normal(size=900), w, n_perm=999, seed=5)
    se = res.perm_std / np.sqrt(res.n_perm)
    mean_ok = abs(res.perm_mean - res.expected) < 3 * se
    check("C02 Moran oracle", max_err <= 1e-9 and mean_ok,
          f"max |sparse-dense|={max_err:.2e}, perm mean {res.perm_mean:+.5f} vs "
          f"E[I]={res.expected:+.5f} (3SE={3*se:.5f})")


def test_c03_lisa_planted_clusters():
    from scipy.ndimage import minimum_filter

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
    far_bg = minimum_filter((~inside).astype(int), size=5, mode="constant") == 1
    interior_hh = bool(np.all(quad[interior] == 1))
    bg_hh = int(np.sum(quad[~inside] == 1))
    far_ok = bool(np.all(np.isin(quad[far_bg], [0, 2])))
    check("C03 LISA clusters", interior_hh and bg_hh == 0 and far_ok,
          f"interior HH={interior_hh}, background HH cells={bg_hh}, far bg LL/NS={far_ok}")


def test_c04_ssim_fixtures():
    from slumbench.grid import Grid

    rng = np.random.default_rng(4)
    a_vals = (rng.random((15, 15)) < 0.5).astype(np.float32)
    b_vals = (rng.random((15, 15)) < 0.5).astype(np.float32)
    a = Grid(width=15, height=15, values=a_vals)
    b = Grid(width=15, height=15, values=b_vals)
    ident = ssim_binary(a, a)
    sym = abs(ssim_binary(a, b) - ssim_binary(b, a))
    z = Grid(width=10, height=10, values=np.zeros((10, 10)))
    o = Grid(width=10, height=10, values=np.ones((10, 10)))
    c1 = 1e-4
    zo_err = abs(ssim_binary(z, o) - c1 / (1 + c1))
    check("C04 SSIM", ident == 1.0 and sym <= 1e-12 and zo_err <= 1e-7,
          f"identity={ident}, symmetry gap={sym:.1e}, zeros-vs-ones err={zo_err:.1e}")


def test_c05_r2_decomposition():
    d = decompose_r2([0, 0, 10, 20], [2, 2, 12, 18], [0, 1, 1, 1], [0, 0, 1, 1])
    # exact fractions of the 4-point example: 1 - 16/275, 4/275, 8/275
    err = max(abs(d.single_r2 - (1 - 16 / 275)), abs(d.two_stage_gain - 4 / 275),
              abs(d.oracle_gain - 8 / 275))
    rng = np.random.default_rng(5)
    y = np.concatenate([np.zeros(30), rng.integers(1, 290, 30)]).astype(float)
    pred = y + rng.normal(0, 8, 60)
    y_cls = (y > 0).astype(int)
    d2 = decompose_r2(y, pred, y_cls, y_cls)
    equal_gains = d2.two_stage_gain == d2.oracle_gain
    d3 = decompose_r2([0, 0, 10, 20], [0, 0, 15, 15], [0, 0, 1, 1], [0, 0, 1, 1])
    pos_zero = abs(d3.pos_r2) < 1e-15
    check("C05 R2 decomposition", err <= 1e-6 and equal_gains and pos_zero,
          f"worked-example err={err:.2e}, cls=y_cls gains equal={equal_gains}, "
          f"pos-mean pos_r2={d3.pos_r2}")


def test_c06_splits_partition_and_leakage():
    rng = np.random.default_rng(6)
    partition_ok = True
    for seed in range(20):
        t = make_table(int(rng.integers(40, 500)), seed=seed)
        folds = spatial_folds(t)
        union = np.sort(np.concatenate([f.test_idx for f in folds]))
        partition_ok &= bool(np.array_equal(union, np.arange(t.n)))
        partition_ok &= all(
            np.intersect1d(f.test_idx, g.test_idx).size == 0
            for f, g in itertools.combinations(folds, 2))
    corpus = {}
    for i, key in enumerate([("PAK", 2021), ("PAK", 2022), ("HTI", 2021), ("HTI", 2022)]):
        corpus[key] = make_table(180, city=key[0], year=key[1], seed=30 + i)
    target = corpus[("PAK", 2022)]
    leak_ok = True
    for split in [random_split(target, seed=1)] + spatial_folds(target):
        block = split.fold if split.protocol == "spatial" else None
        for code in ("S1", "S2", "S3", "S4"):
            train_t = assemble_strategy(code, "PAK", 2022, corpus, split,
                                        budget=300, seed=3)
            audit_no_leakage(train_t, target.subset(split.test_idx), "PAK",
                             test_block=block)
    # proportional shares within +-1 row
    corpus2 = {("PAK", 2022): make_table(100, city="PAK", seed=50),
               ("HTI", 2022): make_table(300, city="HTI", year=2022, seed=51),
               ("KEN", 2022): make_table(700, city="KEN", year=2022, seed=52)}
    split = random_split(corpus2[("PAK", 2022)], seed=0)
    tr = assemble_strategy("S3", "PAK", 2022, corpus2, split, budget=480, seed=1)
    prop_ok = (tr.n == 480
               and abs(int(np.sum(tr.city == "HTI")) - 144) <= 1
               and abs(int(np.sum(tr.city == "KEN")) - 336) <= 1)
    check("C06 splits", partition_ok and leak_ok and prop_ok,
          f"partition={partition_ok}, leakage audits passed, proportional +-1={prop_ok}")


def test_c07_model_zoo():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2000, 12))
    w = rng.normal(size=12)
    y = x @ w
    ridge = train(ModelSpec(task="reg", family="linear", seed=0), x[:1500], y[:1500])
    pred = ridge.predict_density(x[1500:])
    ridge_r2 = 1 - np.sum((pred - y[1500:]) ** 2) / np.sum((y[1500:] - y[1500:].mean()) ** 2)

    xs = rng.normal(size=(1000, 6))
    ys = (xs @ np.array([2.0, -1.0, 0.5, 0, 0, 1.0]) > 0.7).astype(np.uint8)
    sep = train(ModelSpec(task="cls", family="linear", seed=0), xs[:800], ys[:800])
    sep_f1 = cls_metrics(ys[800:], sep.predict_proba(xs[800:])).f1

    xx, yx = xor_table()
    ntr = int(0.75 * len(yx))
    f1 = {}
    for fam in ("linear", "hist_gbt", "rf"):
        m = train(ModelSpec(task="cls", family=fam, seed=0), xx[:ntr], yx[:ntr])
        f1[fam] = cls_metrics(yx[ntr:], m.predict_proba(xx[ntr:])).f1

    xg = rng.integers(0, 12, size=(600, 6)).astype(float)
    yg = (xg[:, 0] + 2 * xg[:, 1] + rng.normal(0, 1, 600) > 12).astype(np.uint8)
    probe = rng.integers(0, 12, size=(200, 6)).astype(float)
    g1 = train(ModelSpec(task="cls", family="hist_gbt", seed=0), xg, yg)
    g2 = train(ModelSpec(task="cls", family="hist_gbt", seed=0), xg**3, yg)
    gbt_invariant = np.array_equal(g1.predict_proba(probe), g2.predict_proba(probe**3))
    rf_params = {"bootstrap": False, "n_estimators": 50}
    r1 = train(ModelSpec(task="cls", family="rf", seed=3, params=rf_params), xg, yg)
    r2_ = train(ModelSpec(task="cls", family="rf", seed=3, params=rf_params), xg**3, yg)
    rf_invariant = np.array_equal(r1.predict_proba(xg), r2_.predict_proba(xg**3))

    seed_ok = True
    for fam in ("linear", "hist_gbt", "rf"):
        a = train(ModelSpec(task="cls", family=fam, seed=9), xg, yg)
        b = train(ModelSpec(task="cls", family=fam, seed=9), xg, yg)
        seed_ok &= bool(np.array_equal(a.predict_proba(probe), b.predict_proba(probe)))

    ok = (ridge_r2 >= 0.999 and sep_f1 >= 0.99 and f1["linear"] <= 0.7
          and f1["hist_gbt"] >= 0.9 and f1["rf"] >= 0.9
          and gbt_invariant and rf_invariant and seed_ok)
    check("C07 model zoo", ok,
          f"ridge R2={ridge_r2:.4f}, sep F1={sep_f1:.3f}, XOR linear={f1['linear']:.2f} "
          f"gbt={f1['hist_gbt']:.2f} rf={f1['rf']:.2f}, monotone gbt={gbt_invariant} "
          f"rf={rf_invariant}, seed bit-exact={seed_ok}")


def test_c08_wilcoxon_exact():
    rng = np.random.default_rng(8)
    max_err = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 13))
        a = rng.normal(size=n)
        b = a + rng.normal(size=n) * rng.uniform(0.1, 2.0)
        if rng.random() < 0.35:
            d = rng.choice([-2.0, -1.0, 0.0, 1.0, 2.0], size=n)
            b = a - d
        res = wilcoxon_signed_rank(a, b)
        max_err = max(max_err, abs(res.p_value - wilcoxon_enumeration_oracle(a, b)))
    res5 = wilcoxon_signed_rank([1, 2, 3, 4, 5], [0, 0, 0, 0, 0])
    check("C08 Wilcoxon", max_err <= 1e-12 and res5.p_value == 0.0625,
          f"max enumeration gap={max_err:.1e}, n=5 all-positive p={res5.p_value}")


def test_c09_attribution():
    rng = np.random.default_rng(9)
    phi = linear_attribution([2.0, -1.0], [3.0, 4.0], [1.0, 2.0])
    worked = phi.tolist() == [4.0, -2.0] and phi.sum() == 2.0

    mc_ok = True
    for trial in range(5):
        d = int(rng.integers(3, 9))
        w = rng.normal(size=d)
        f = lambda X: X @ w + 1.7
        x, ref = rng.normal(size=d), rng.normal(size=d)
        exact = linear_attribution(w, x, ref)
        mc = mc_shapley(f, x, ref, n_orderings=2000, seed=trial)
        scale = np.max(np.abs(exact)) + 1e-12
        mc_ok &= bool(np.max(np.abs(mc - exact)) / scale < 0.02)

    g = lambda X: X[:, 0] * 3.0 + np.sin(X[:, 1])
    x, ref = rng.normal(size=4), rng.normal(size=4)
    phi_g = mc_shapley(g, x, ref, n_orderings=500, seed=0)
    dummy_ok = abs(phi_g[2]) < 1e-3 and abs(phi_g[3]) < 1e-3
    eff = abs(phi_g.sum() - (g(x[None])[0] - g(ref[None])[0]))
    check("C09 attribution", worked and mc_ok and dummy_ok and eff < 1e-10,
          f"worked example={worked}, MC within 2%={mc_ok}, dummy |phi|<1e-3={dummy_ok}, "
          f"efficiency gap={eff:.1e}")


def test_c10_pca_and_saturation():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(300, 64)) * rng.uniform(0.2, 3.0, size=64)
    p = pca_fit(x)
    rms = np.sqrt(np.mean((pca_inverse(p, pca_transform(p, x, 64)) - x) ** 2))
    evr_ok = bool(np.all(np.diff(p.evr) <= 1e-12))

    spec = SyntheticWorldSpec(n_cities=1, years=(2022,), height=48, width=48,
                              zero_share=0.8, snr=4.0, drift=0.0, signal_rank=8,
                              cluster_radius=4.0, seed=20)
    cy = synth_world(spec).city_years[0]
    emb = np.stack([g.values.ravel() for g in cy.blocks["AEF"].bands], axis=1).astype(float)
    y = (aggregate(cy.mask).count.ravel() > 0).astype(np.uint8)
    n = len(y)
    rng2 = np.random.default_rng(0)
    perm = rng2.permutation(n)
    tr, te = perm[: int(0.8 * n)], perm[int(0.8 * n):]
    pca = pca_fit(emb[tr])
    ks = (8, 16, 24, 32, 38, 48, 56, 64)
    curve = []
    for k in ks:
        m = train(ModelSpec(task="cls", family="linear", seed=0),
                  pca_transform(pca, emb[tr], k), y[tr])
        curve.append(cls_metrics(y[te], m.predict_proba(pca_transform(pca, emb[te], k))).f1)
    k_star = saturation_point(ks, curve)
    check("C10 PCA", rms < 1e-6 and evr_ok and k_star == 8,
          f"k=64 roundtrip RMS={rms:.1e}, EVR non-increasing={evr_ok}, "
          f"rank-8 world k*={k_star} (curve {[round(v, 3) for v in curve]})")


@pytest.mark.slow
def test_c11_qualitative_pattern(tmp_path):
    t0 = time.time()
    manifest = RunManifest(
        synth={"n_cities": 3, "years": [2021, 2022], "height": 48, "width": 48,
               "zero_share": 0.82, "snr": 0.8, "drift": 8.0, "year_jitter": 0.5,
               "cluster_radius": 4.0, "seed": 11},
        strategies=["S2", "S3"], combos=["C0"],
        models=["linear", "hist_gbt", "rf", "mlp"], tasks=["cls"],
        protocols=["random", "spatial"],
        targets=[["SYA", 2022], ["SYB", 2022], ["SYC", 2022]], seed=11)
    manifest.validate()
    res = run(manifest, tmp_path, jobs=8)
    assert not res.failures, list(res.failures.values())[:1]

    def med(strategy, protocol, model=None):
        sub = [r for r in res.records if r.strategy == strategy
               and r.protocol == protocol and (model is None or r.model == model)]
        return cross_sample_median(sub, "f1")

    gap = med("S2", "spatial") - med("S3", "spatial")
    rnd_ge_spa = {m: (med("S2", "random", m) >= med("S2", "spatial", m)
                      and med("S3", "random", m) >= med("S3", "spatial", m))
                  for m in ("linear", "hist_gbt", "rf", "mlp")}
    elapsed = time.time() - t0
    ok = gap >= 0.05 and all(rnd_ge_spa.values()) and elapsed < 1800
    check("C11 drift pattern", ok,
          f"spatial S2-S3 gap={gap:+.3f} (>=0.05), random>=spatial per model="
          f"{rnd_ge_spa}, runtime={elapsed:.0f}s (<1800)")


def test_c12_usability_fixture():
    table6 = {"PAK": (0.794, 0.576), "HTI": (0.773, 0.552), "BFA": (0.715, 0.564),
              "EGY": (0.687, 0.362), "HON": (0.586, 0.400), "IND": (0.508, 0.356),
              "KEN": (0.470, 0.346), "VEN": (0.429, 0.246), "COL": (0.477, 0.107),
              "BRA": (0.287, 0.218), "ZAF": (0.296, 0.194), "LKA": (0.156, -0.002)}
    gates = {city: usability_gate(f1, r2) for city, (f1, r2) in table6.items()}
    both = {c for c, g in gates.items() if g == "both"}
    ok = (both == {"PAK", "HTI", "BFA", "EGY", "HON", "IND"}
          and gates["KEN"] == "reg-only" and gates["LKA"] == "neither")
    check("C12 usability fixture", ok, f"both={sorted(both)}, KEN={gates['KEN']}, "
                                       f"LKA={gates['LKA']}")


@pytest.mark.slow
def test_c13_determinism_across_workers(tmp_path):
    import json

    from slumbench.cli import main

    manifest = {"synth": {"n_cities": 2, "years": [2021, 2022], "height": 40,
                          "width": 40, "zero_share": 0.8, "snr": 2.0, "drift": 1.0,
                          "year_jitter": 0.3, "cluster_radius": 4.0, "seed": 13},
                "strategies": ["S1", "S2"], "combos": ["C0"], "models": ["linear"],
                "tasks": ["cls", "reg"], "protocols": ["random", "spatial"],
                "targets": [["SYA", 2021], ["SYB", 2022]], "seed": 13}
    mpath = tmp_path / "m.json"
    mpath.write_text(json.dumps(manifest))
    assert main(["run", "--manifest", str(mpath), "--out", str(tmp_path / "j1"),
                 "--jobs", "1"]) == 0
    assert main(["run", "--manifest", str(mpath), "--out", str(tmp_path / "j8"),
                 "--jobs", "8"]) == 0
    names = ["records.csv", "strategy_comparison.csv", "per_city.csv",
             "decomposition.csv", "marginal_gains.csv", "usability.csv",
             "model_rankings.csv", "summary.json"]
    same = {n: (tmp_path / "j1" / n).read_bytes() == (tmp_path / "j8" / n).read_bytes()
            for n in names}
    check("C13 determinism", all(same.values()),
          f"byte-identical: {same}")
