import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layerlab.analysis import roc_auc
from layerlab.errors import ConfigError, SplitError
from layerlab.prior import Table, TaskPrior, Teacher, sample_task, split_episode
from layerlab.probing import fit_linear_probe

from oracles import linearly_separable


def test_same_seed_same_table():
    prior = TaskPrior(seed=11)
    a, b = sample_task(prior), sample_task(prior)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)
    c, d = sample_task(prior, np.random.default_rng(5)), sample_task(prior, np.random.default_rng(5))
    assert np.array_equal(c.X, d.X) and np.array_equal(c.y, d.y)


def test_sizes_fall_in_ranges():
    prior = TaskPrior(feature_count_range=(3, 5), sample_count_range=(20, 30))
    rng = np.random.default_rng(0)
    for _ in range(50):
        t = sample_task(prior, rng)
        assert 20 <= t.n_rows <= 30 and 3 <= t.X.shape[1] <= 5
        assert set(np.unique(t.y)) <= {0, 1}


@pytest.mark.parametrize("seed", range(5))
def test_noiseless_linear_teacher_is_separable(seed):
    prior = TaskPrior(noise_std=0.0, teacher="linear")
    t = sample_task(prior, np.random.default_rng(seed))
    assert linearly_separable(t.X, t.y)
    probe = fit_linear_probe(t.X, t.y, reg_strength=0.0, max_iter=500)
    assert roc_auc(probe.score(t.X), t.y) == 1.0


@pytest.mark.parametrize("teacher", list(Teacher))
def test_both_classes_in_1000_task_sweep(teacher):
    prior = TaskPrior(feature_count_range=(1, 6), sample_count_range=(2, 60), teacher=teacher, noise_std=0.3)
    rng = np.random.default_rng(123)
    for _ in range(1000):
        y = sample_task(prior, rng).y
        assert y.min() == 0 and y.max() == 1


@pytest.mark.parametrize(
    "kw",
    [
        dict(feature_count_range=(5, 3)),
        dict(sample_count_range=(0, 10)),
        dict(sample_count_range=(1, 1)),
        dict(noise_std=-0.1),
        dict(teacher="tree"),
    ],
)
def test_degenerate_prior_rejected(kw):
    with pytest.raises((ConfigError, ValueError)):
        TaskPrior(**kw)


def _table(n, seed=0, pos_fraction=0.5):
    rng = np.random.default_rng(seed)
    y = np.zeros(n, dtype=np.int64)
    y[rng.permutation(n)[: int(round(pos_fraction * n))]] = 1
    return Table(rng.standard_normal((n, 2)), y)


def test_split_example_100_rows():
    ep = split_episode(_table(100), 0.4, 0.2, rng=np.random.default_rng(0))
    assert (len(ep.support_idx), len(ep.probe_idx), len(ep.query_idx)) == (40, 20, 40)
    parts = [set(ep.support_idx), set(ep.probe_idx), set(ep.query_idx)]
    assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
    assert parts[0] | parts[1] | parts[2] == set(range(100))


def test_default_probe_partition_matches_support():
    ep = split_episode(_table(100), 0.3, rng=np.random.default_rng(1))
    assert len(ep.probe_idx) == len(ep.support_idx) == 30


@settings(max_examples=80, deadline=None)
@given(
    n=st.integers(30, 300),
    pos=st.floats(0.25, 0.75),
    fs=st.floats(0.1, 0.45),
    fp=st.floats(0.1, 0.45),
    seed=st.integers(0, 2**31),
)
def test_split_partitions_and_stratification(n, pos, fs, fp, seed):
    table = _table(n, seed, pos)
    try:
        ep = split_episode(table, fs, fp, rng=np.random.default_rng(seed))
    except SplitError:
        return
    idx = [ep.support_idx, ep.probe_idx, ep.query_idx]
    allidx = np.concatenate(idx)
    assert len(allidx) == n and set(allidx.tolist()) == set(range(n))
    ratio = table.y.mean()
    for part in idx:
        assert abs(table.y[part].sum() - ratio * len(part)) <= 1.0
        for c in (0, 1):
            assert (table.y[part] == c).sum() >= 2


def test_split_is_seed_deterministic():
    t = _table(80)
    a = split_episode(t, 0.35, rng=np.random.default_rng(9))
    b = split_episode(t, 0.35, rng=np.random.default_rng(9))
    for x, y in zip((a.support_idx, a.probe_idx, a.query_idx), (b.support_idx, b.probe_idx, b.query_idx)):
        assert np.array_equal(x, y)


def test_split_rejects_tiny_tables_and_bad_fractions():
    with pytest.raises(SplitError):
        split_episode(_table(8), 0.35)
    with pytest.raises(SplitError):
        split_episode(_table(100), 0.6, 0.4)
    with pytest.raises(SplitError):
        split_episode(_table(100), 0.0)


def test_episode_views_follow_indices():
    t = _table(60)
    ep = split_episode(t, 0.35, rng=np.random.default_rng(2))
    assert np.array_equal(ep.query_x, t.X[ep.query_idx])
    assert np.array_equal(ep.probe_y, t.y[ep.probe_idx])
