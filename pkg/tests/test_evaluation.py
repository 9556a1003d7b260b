import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from udd.data_io import LabeledImages, SyntheticDataset
from udd.evaluation import (
    EvalConfig, MueConfig, as_synthetic, class_separation, coreset_herding, coreset_random,
    dataset_mue, evaluate_synthetic, export_embeddings, herding_order, mue, normal_std_sweep,
    utilization_entropy,
)
from udd.model import init_convnet

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_uniform_histogram_gives_one():
    # 2520 = lcm(5..10): every d splits the grid evenly
    x = (np.arange(2520) + 0.5) / 2520
    assert abs(mue(x) - 1.0) <= 1e-9


def test_constant_map_gives_zero():
    assert mue(np.full((4, 4), 3.25)) == 0.0


def test_two_point_map():
    x = np.array([0.0, 1.0])
    expected = np.mean([math.log(2) / math.log(d) for d in range(5, 11)])
    assert mue(x) == pytest.approx(expected, abs=1e-12)


def test_hand_histogram():
    x = np.array([0.0, 0.1, 0.1, 0.9, 1.0])
    # d=5 bins of width 0.2: counts [3, 0, 0, 0, 2]
    p = np.array([0.6, 0.4])
    assert utilization_entropy(x, 5) == pytest.approx(-(p * np.log(p)).sum() / math.log(5), abs=1e-12)


def test_literal_formula_flag():
    x = np.array([0.0, 0.1, 0.1, 0.9, 1.0])
    p = np.array([0.6, 0.4])
    expected = 1 + (p * np.log(p)).sum() / (5 * math.log(5))
    assert utilization_entropy(x, 5, literal=True) == pytest.approx(expected, abs=1e-12)
    assert mue(x, MueConfig(literal=True)) > 0.9


def test_empty_map_rejected():
    with pytest.raises(ValueError):
        mue(np.zeros((0,)))


def test_mue_config_validation():
    with pytest.raises(ValueError):
        MueConfig(ds=(1, 5))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(2, 60), elements=st.floats(-10, 10, allow_nan=False)),
       st.floats(0.01, 100), st.floats(-50, 50))
def test_affine_invariance(x, a, b):
    # powers of two keep a*x + b exact enough that bin edges do not move
    a = 2.0 ** round(math.log2(a))
    b = float(round(b))
    assert abs(mue(a * x + b) - mue(x)) <= 1e-9


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 60), elements=finite), st.randoms())
def test_permutation_invariance_and_range(x, rnd):
    y = x.copy()
    rnd.shuffle(y)
    v = mue(x)
    assert v == mue(y)
    assert 0.0 <= v <= 1.0 + 1e-12


def test_std_sweep_rises_then_plateaus():
    stds = [0.001, 0.002, 0.004, 0.01, 0.02, 0.04, 0.06, 0.08, 0.1]
    v = normal_std_sweep(stds)
    assert v[0] < 0.5
    assert all(b >= a - 0.02 for a, b in zip(v, v[1:]))
    plateau = v[-4:]
    assert plateau.max() - plateau.min() < 0.05
    assert abs(plateau.mean() - 0.86) <= 0.10


def test_dataset_mue_shape():
    p = init_convnet(2, 4, (1, 8, 8), 3, np.random.default_rng(0))
    vals = dataset_mue(p, np.random.default_rng(1).standard_normal((5, 1, 8, 8)))
    assert vals.shape == (5,)
    assert np.all((vals >= 0) & (vals <= 1))


# ------------------------------------------------------------- coresets

def test_herding_worked_example():
    assert herding_order(np.array([[0.0], [1.0], [10.0]]), 2) == [1, 2]


def _brute_herding(f, k):
    mu = f.mean(axis=0)
    chosen = []
    for _ in range(k):
        best = min((i for i in range(len(f)) if i not in chosen),
                   key=lambda i: (np.linalg.norm(f[chosen + [i]].mean(axis=0) - mu), i))
        chosen.append(best)
    return chosen


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 8), st.integers(1, 3))
def test_herding_matches_brute_force(seed, n, dim):
    f = np.random.default_rng(seed).integers(-5, 6, (n, dim)).astype(np.float64)
    k = min(n, 1 + seed % n)
    assert herding_order(f, k) == _brute_herding(f, k)


def test_herding_full_class_returns_everything():
    f = np.random.default_rng(0).standard_normal((6, 3))
    assert sorted(herding_order(f, 6)) == list(range(6))


def test_herding_ties_break_by_index():
    f = np.array([[1.0], [-1.0], [1.0], [-1.0]])
    assert herding_order(f, 2) == [0, 1]


def _real(n_per=5, classes=3, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.tile(np.arange(classes), n_per)
    return LabeledImages(rng.standard_normal((len(labels), 1, 8, 8)), labels, classes)


def test_coreset_random_reproducible_and_balanced():
    real = _real()
    a = coreset_random(real, 2, np.random.default_rng(3))
    b = coreset_random(real, 2, np.random.default_rng(3))
    assert np.array_equal(a.images, b.images)
    assert np.bincount(a.labels).tolist() == [2, 2, 2]


def test_coreset_too_few():
    with pytest.raises(ValueError):
        coreset_random(_real(n_per=2), 3, np.random.default_rng(0))


def test_coreset_herding_whole_class():
    real = _real()
    p = init_convnet(2, 4, (1, 8, 8), 3, np.random.default_rng(0))
    core = coreset_herding(real, 5, p)
    for c in range(3):
        got = core.images[core.labels == c]
        want = real.images[real.labels == c]
        assert sorted(map(bytes, got)) == sorted(map(bytes, want))


def test_as_synthetic_is_class_major():
    real = _real()
    syn = as_synthetic(coreset_random(real, 2, np.random.default_rng(0)), [0.0], [1.0])
    assert syn.images.shape == (3, 2, 1, 8, 8)
    assert np.array_equal(syn.flat().labels, [0, 0, 1, 1, 2, 2])


# ------------------------------------------------------------- evaluation

def test_evaluate_synthetic_learns_separable_data():
    rng = np.random.default_rng(0)
    protos = rng.standard_normal((3, 1, 8, 8)) * 2
    labels = np.repeat(np.arange(3), 4)
    train = LabeledImages(protos[labels] + 0.1 * rng.standard_normal((12, 1, 8, 8)), labels, 3)
    tl = np.repeat(np.arange(3), 10)
    test = LabeledImages(protos[tl] + 0.1 * rng.standard_normal((30, 1, 8, 8)), tl, 3)
    res = evaluate_synthetic(train, test, EvalConfig(epochs=30, width=8, depth=2, repeats=3, batch_size=4))
    assert len(res.accuracies) == 3
    assert all(0.0 <= a <= 1.0 for a in res.accuracies)
    assert res.std >= 0
    assert res.mean > 0.9


def test_evaluate_is_deterministic():
    real = _real()
    cfg = EvalConfig(epochs=2, width=4, depth=2, repeats=2)
    a = evaluate_synthetic(real, real, cfg)
    b = evaluate_synthetic(real, real, cfg)
    assert a.accuracies == b.accuracies


def test_eval_config_validation():
    with pytest.raises(ValueError):
        EvalConfig(repeats=0)


# ------------------------------------------------------------- embeddings

def _syn():
    rng = np.random.default_rng(0)
    return SyntheticDataset(rng.standard_normal((3, 2, 1, 8, 8)), np.zeros(1), np.ones(1))


def test_export_embeddings(tmp_path):
    p = init_convnet(2, 5, (1, 8, 8), 3, np.random.default_rng(0))
    syn = _syn()
    emb = export_embeddings(syn, p, tmp_path / "a.csv")
    export_embeddings(syn, p, tmp_path / "b.csv")
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "class,e0,e1,e2,e3,e4"
    assert len(lines) == 1 + 3 * 2
    assert emb.shape == (6, 5)
    assert [ln.split(",")[0] for ln in lines[1:]] == ["0", "0", "1", "1", "2", "2"]
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    back = np.array([[float(v) for v in ln.split(",")[1:]] for ln in lines[1:]])
    assert np.array_equal(back, emb)


def test_separation_identical_means():
    e = np.ones((4, 3))
    assert class_separation(e, [0, 0, 1, 1]) == pytest.approx(0.0, abs=1e-12)


def test_separation_orthogonal():
    assert class_separation(np.eye(3), [0, 1, 2]) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 5))
def test_separation_brute_force(seed, k):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(k), 3)
    e = rng.standard_normal((len(labels), 4))
    means = [e[labels == c].mean(axis=0) for c in range(k)]
    d = [1 - a @ b / (np.linalg.norm(a) * np.linalg.norm(b)) for a, b in itertools.combinations(means, 2)]
    assert class_separation(e, labels) == pytest.approx(np.mean(d), abs=1e-12)


def test_separation_needs_two_classes():
    with pytest.raises(ValueError):
        class_separation(np.ones((3, 2)), [1, 1, 1])
