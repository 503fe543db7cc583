import numpy as np
import pytest

from slumbench.splits import (LeakageError, SampleTable, assemble_strategy,
                              audit_no_leakage, concat_tables, random_split,
                              spatial_folds, split_from_json, split_to_json)


def make_table(n, city="AAA", year=2022, seed=0, d=4, blocks=9):
    rng = np.random.default_rng(seed)
    y_reg = rng.integers(0, 290, size=n) * (rng.random(n) < 0.3)
    return SampleTable(
        city=np.full(n, city, dtype="U8"),
        year=np.full(n, year, dtype=np.int32),
        cell=np.arange(n, dtype=np.int64),
        block=rng.integers(0, blocks, size=n).astype(np.uint8),
        x=rng.normal(size=(n, d)),
        y_cls=(y_reg > 0).astype(np.uint8),
        y_reg=y_reg.astype(np.int32),
    )


def test_random_split_sizes():
    t = make_table(100)
    s = random_split(t, seed=0)
    assert len(s.train_idx) == 80 and len(s.test_idx) == 20
    s101 = random_split(make_table(101), seed=0)
    assert len(s101.train_idx) == 81  # round(0.8 * 101)
    with pytest.raises(ValueError):
        random_split(make_table(4), seed=0)


def test_random_split_deterministic():
    t = make_table(57)
    a, b = random_split(t, seed=9), random_split(t, seed=9)
    assert np.array_equal(a.train_idx, b.train_idx)
    assert np.array_equal(a.test_idx, b.test_idx)
    c = random_split(t, seed=10)
    assert not np.array_equal(a.train_idx, c.train_idx)


def test_spatial_folds_partition(rng):
    for seed in range(20):
        t = make_table(int(rng.integers(30, 400)), seed=seed)
        folds = spatial_folds(t)
        test_union = np.concatenate([f.test_idx for f in folds])
        assert np.array_equal(np.sort(test_union), np.arange(t.n))
        for f in folds:
            assert np.intersect1d(f.train_idx, f.test_idx).size == 0
            assert np.all(t.block[f.test_idx] == f.fold)
            assert len(f.train_idx) + len(f.test_idx) == t.n


def test_spatial_folds_skip_empty_blocks():
    t = make_table(50, blocks=2)  # rows only in blocks 0 and 1
    folds = spatial_folds(t)
    assert sorted(f.fold for f in folds) == [0, 1]


def _corpus(sizes, seed=0):
    corpus = {}
    i = 0
    for (city, year), n in sizes.items():
        corpus[(city, year)] = make_table(n, city=city, year=year, seed=seed + i)
        i += 1
    return corpus


def test_s1_uses_own_train_partition():
    corpus = _corpus({("PAK", 2022): 100})
    split = random_split(corpus[("PAK", 2022)], seed=0)
    train = assemble_strategy("S1", "PAK", 2022, corpus, split, budget=10)
    assert train.n == 80  # budget ignored
    audit_no_leakage(train, corpus[("PAK", 2022)].subset(split.test_idx), "PAK")


def test_s3_proportional_sampling():
    corpus = _corpus({("PAK", 2022): 100, ("HTI", 2022): 300, ("KEN", 2022): 700})
    split = random_split(corpus[("PAK", 2022)], seed=0)
    train = assemble_strategy("S3", "PAK", 2022, corpus, split, budget=480, seed=1)
    assert train.n == 480
    n_hti = int(np.sum(train.city == "HTI"))
    n_ken = int(np.sum(train.city == "KEN"))
    assert abs(n_hti - 144) <= 1 and abs(n_ken - 336) <= 1
    assert not np.any(train.city == "PAK")


def test_s4_excludes_exactly_target_pair():
    corpus = _corpus({("PAK", 2022): 60, ("PAK", 2021): 60, ("HTI", 2022): 60})
    split = random_split(corpus[("PAK", 2022)], seed=0)
    train = assemble_strategy("S4", "PAK", 2022, corpus, split, budget=10_000)
    pairs = set(zip(train.city.tolist(), train.year.tolist()))
    assert pairs == {("PAK", 2021), ("HTI", 2022)}


def test_s2_same_city_all_years():
    corpus = _corpus({("PAK", 2022): 80, ("PAK", 2020): 70, ("HTI", 2022): 90})
    split = random_split(corpus[("PAK", 2022)], seed=0)
    train = assemble_strategy("S2", "PAK", 2022, corpus, split, budget=10_000)
    pairs = set(zip(train.city.tolist(), train.year.tolist()))
    assert pairs == {("PAK", 2022), ("PAK", 2020)}
    # target-year rows come only from the train partition
    own = train.cell[train.year == 2022]
    assert np.all(np.isin(own, split.train_idx))


def test_s3_empty_source_errors():
    corpus = _corpus({("PAK", 2022): 60, ("PAK", 2021): 60})
    split = random_split(corpus[("PAK", 2022)], seed=0)
    with pytest.raises(ValueError, match="no source rows"):
        assemble_strategy("S3", "PAK", 2022, corpus, split)


def test_spatial_block_excluded_across_years():
    """Under the spatial protocol, the tested block of the target city is
    excluded from that city's other years too."""
    corpus = _corpus({("PAK", 2022): 200, ("PAK", 2021): 200, ("HTI", 2022): 200})
    folds = spatial_folds(corpus[("PAK", 2022)])
    for split in folds:
        for code in ("S2", "S4"):
            train = assemble_strategy(code, "PAK", 2022, corpus, split, budget=10_000)
            same_city = train.block[(train.city == "PAK")]
            assert not np.any(same_city == split.fold)
            audit_no_leakage(train, corpus[("PAK", 2022)].subset(split.test_idx),
                             "PAK", test_block=split.fold)


def test_no_leakage_all_strategies_and_protocols():
    corpus = _corpus({("PAK", 2022): 150, ("PAK", 2021): 150,
                      ("HTI", 2022): 150, ("HTI", 2021): 150})
    target = corpus[("PAK", 2022)]
    splits = [random_split(target, seed=4)] + spatial_folds(target)
    for split in splits:
        block = split.fold if split.protocol == "spatial" else None
        for code in ("S1", "S2", "S3", "S4"):
            train = assemble_strategy(code, "PAK", 2022, corpus, split, budget=400, seed=2)
            audit_no_leakage(train, target.subset(split.test_idx), "PAK", test_block=block)


def test_audit_detects_leakage():
    t = make_table(50)
    with pytest.raises(LeakageError):
        audit_no_leakage(t, t.subset(np.arange(5)), "AAA")


def test_proportional_sampling_is_seeded():
    corpus = _corpus({("PAK", 2022): 100, ("HTI", 2022): 400, ("KEN", 2022): 400})
    split = random_split(corpus[("PAK", 2022)], seed=0)
    a = assemble_strategy("S3", "PAK", 2022, corpus, split, budget=200, seed=5)
    b = assemble_strategy("S3", "PAK", 2022, corpus, split, budget=200, seed=5)
    assert np.array_equal(a.cell, b.cell) and np.array_equal(a.city, b.city)


def test_split_json_roundtrip(tmp_path):
    t = make_table(40)
    s = random_split(t, seed=3)
    split_to_json(s, tmp_path / "s.json")
    s2 = split_from_json(tmp_path / "s.json")
    assert s2.protocol == "random" and s2.seed == 3
    assert np.array_equal(s.train_idx, s2.train_idx)
    assert np.array_equal(s.test_idx, s2.test_idx)


def test_concat_and_subset_consistency():
    a, b = make_table(10, city="AAA"), make_table(12, city="BBB", seed=1)
    c = concat_tables([a, b])
    assert c.n == 22 and c.dim == a.dim
    sub = c.subset(np.arange(10))
    assert np.all(sub.city == "AAA")
