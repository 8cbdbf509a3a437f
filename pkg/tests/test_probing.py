import numpy as np
import pytest

from layerlab.analysis import roc_auc
from layerlab.errors import FitError
from layerlab.model import EmbeddingStack, build_model, forward, forward_early_exit
from layerlab.probing import (
    ProbeKind,
    build_transfer_matrix,
    extract_embeddings,
    fit_decoder_probe,
    fit_knn_probe,
    fit_linear_probe,
)
from layerlab.surgery import plan_exit

from conftest import make_episode, tiny_config
from oracles import brute_knn_scores, irls_logistic, linearly_separable


def _problem(seed, n=60, d=4):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d)) * rng.uniform(0.5, 3, d) + rng.normal(0, 2, d)
    w = rng.standard_normal(d)
    y = (X @ w + rng.normal(0, 1.5, n) > np.median(X @ w)).astype(int)
    return X, y


@pytest.mark.parametrize("seed", range(10))
def test_linear_probe_matches_irls(seed):
    X, y = _problem(seed)
    probe = fit_linear_probe(X, y, reg_strength=1e-2)
    coef, intercept = irls_logistic(X, y, 1e-2)
    assert np.max(np.abs(probe.coef - coef)) < 1e-4
    assert abs(probe.intercept - intercept) < 1e-4


def test_linear_probe_separable_toy():
    X = np.array([[0.0, 0.0], [1.0, 0.2], [0.3, 1.0], [3.0, 3.0], [4.0, 2.5], [2.8, 4.0]])
    y = np.array([0, 0, 0, 1, 1, 1])
    assert linearly_separable(X, y)
    probe = fit_linear_probe(X, y)
    assert roc_auc(probe.score(X), y) == 1.0


def test_constant_column_gets_zero_weight():
    X, y = _problem(3)
    X = np.hstack([X[:, :2], np.full((len(X), 1), 7.0), X[:, 2:]])
    probe = fit_linear_probe(X, y)
    assert probe.coef[2] == 0.0


def test_linear_probe_is_deterministic_and_converges():
    X, y = _problem(5)
    a, b = fit_linear_probe(X, y), fit_linear_probe(X, y)
    assert np.array_equal(a.coef, b.coef) and a.intercept == b.intercept
    assert a.grad_norm < 1e-8


def test_linear_probe_needs_two_rows_per_class():
    X = np.random.default_rng(0).standard_normal((6, 2))
    with pytest.raises(FitError):
        fit_linear_probe(X, np.zeros(6, dtype=int))
    with pytest.raises(FitError):
        fit_linear_probe(X, np.array([0, 0, 0, 0, 0, 1]))


def test_knn_self_neighbor():
    X, y = _problem(1, n=30)
    probe = fit_knn_probe(X, y, k=1)
    assert np.array_equal(probe.score(X), y.astype(float))


def test_knn_tie_goes_to_lower_index():
    X = np.array([[-1.0], [1.0]])
    probe = fit_knn_probe(X, np.array([1, 0]), k=1)
    assert probe.neighbors(np.array([[0.0]])).tolist() == [[0]]
    probe = fit_knn_probe(X, np.array([0, 1]), k=1)
    assert probe.score(np.array([[0.0]])).tolist() == [0.0]


@pytest.mark.parametrize("k", [1, 4, 7])
def test_knn_matches_brute_force_scan(k):
    rng = np.random.default_rng(k)
    X = rng.integers(-2, 3, size=(100, 3)).astype(float)  # many exact distance ties
    y = rng.integers(0, 2, 100)
    y[:2] = [0, 1]
    Q = rng.integers(-2, 3, size=(100, 3)).astype(float)
    probe = fit_knn_probe(X, y, k=k)
    expected = brute_knn_scores(probe.train, y, probe.standardizer(Q), k)
    assert np.array_equal(probe.score(Q), expected)


def test_knn_parameter_errors_and_full_k():
    X, y = _problem(2, n=20)
    with pytest.raises(FitError):
        fit_knn_probe(X, y, k=21)
    with pytest.raises(FitError):
        fit_knn_probe(X, y, k=0)
    probe = fit_knn_probe(X, y, k=20)
    scores = probe.score(np.random.default_rng(0).standard_normal((15, 4)))
    assert np.all(scores == y.mean())
    assert roc_auc(scores, np.r_[np.zeros(7), np.ones(8)]) == 0.5


def test_decoder_probe_zero_steps_is_early_exit_readout(variant):
    model = build_model(tiny_config(variant, layers=3))
    ep = make_episode(seed=2)
    stack = extract_embeddings(model, ep)
    n_query = len(ep.query_idx)
    for k in range(3):
        probe = fit_decoder_probe(model, stack.probe_states[k + 1], stack.probe_labels, steps=0)
        assert np.array_equal(probe.logits(stack.states[k + 1])[:n_query], forward_early_exit(model, ep, k))


def test_decoder_probe_copy_semantics_and_loss_decrease():
    model = build_model(tiny_config("row", model_dim=16))
    ep = make_episode(seed=5, n_rows=80)
    stack = extract_embeddings(model, ep)
    before = {k: v.data.copy() for k, v in model.decoder.items()}
    probe = fit_decoder_probe(model, stack.probe_states[-1], stack.probe_labels, steps=200, learning_rate=1e-2)
    for k, v in model.decoder.items():
        assert np.array_equal(v.data, before[k])
    losses = probe.losses
    assert losses[-20:].mean() < losses[:20].mean()
    # mostly downhill: every 20-step window mean is at most the previous one (with slack)
    windows = losses.reshape(10, 20).mean(axis=1)
    assert np.all(np.diff(windows) < 1e-3)
    with pytest.raises(ValueError):
        probe.params["w1"][0, 0] = 1.0


def test_probe_scoring_does_not_mutate():
    X, y = _problem(4)
    for probe in (fit_linear_probe(X, y), fit_knn_probe(X, y, 3)):
        first = probe.score(X).copy()
        assert np.array_equal(probe.score(X), first)


def test_extract_embeddings_rows_and_depth():
    model = build_model(tiny_config("row", layers=4))
    ep = make_episode(seed=1, n_rows=60)
    stack = extract_embeddings(model, ep)
    assert stack.depth == 5
    assert stack.states.shape[1] == len(ep.query_idx) + len(ep.probe_idx)
    assert np.array_equal(stack.labels, np.r_[ep.query_y, ep.probe_y])
    # partitions are disjoint from the support by construction
    assert not set(ep.support_idx) & (set(ep.query_idx) | set(ep.probe_idx))
    for k in range(1, 5):
        truncated = forward(model, ep, plan_exit(4, k - 1), capture=True).stack
        assert np.array_equal(truncated.states[-1], stack.states[k])


def test_transfer_matrix_shape_and_diagonal():
    model = build_model(tiny_config("row", layers=3))
    ep = make_episode(seed=6, n_rows=80)
    stack = extract_embeddings(model, ep)
    for kind in ProbeKind:
        tm = build_transfer_matrix(stack, kind, model=model, hyper={"steps": 5})
        assert tm.auc.shape == (4, 4) and not tm.failures
        assert np.all((tm.auc >= 0) & (tm.auc <= 1))
    tm = build_transfer_matrix(stack, "linear")
    for i in range(4):
        probe = fit_linear_probe(stack.probe_states[i], stack.probe_labels)
        assert tm.diagonal[i] == roc_auc(probe.score(stack.eval_states[i]), stack.eval_labels)


def test_failed_transfer_cells_are_missing_not_zero():
    rng = np.random.default_rng(0)
    states = rng.standard_normal((3, 12, 4))
    labels = np.r_[0, 1, 0, 1, 0, 1, 0, 0, 0, 0, 0, 1]
    is_probe = np.r_[np.zeros(6, bool), np.ones(6, bool)]  # probe rows have only one positive
    tm = build_transfer_matrix(EmbeddingStack(states, labels, is_probe), "linear")
    assert np.all(np.isnan(tm.auc)) and len(tm.failures) == 3
    with pytest.raises(FitError):
        build_transfer_matrix(EmbeddingStack(states, labels, is_probe), "decoder")
