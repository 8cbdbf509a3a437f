"""Probing classifiers on per-layer embeddings and cross-layer transfer matrices."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .analysis import roc_auc
from .errors import FitError, LayerLabError, TrainingError
from .model import Adam, EmbeddingStack, Model, Params, decode, apply_decoder, forward
from .prior import Episode
from .tensor import Tensor, cross_entropy

DEFAULT_REG = 1e-4
DEFAULT_K = 5


class ProbeKind(str, enum.Enum):
    LINEAR = "linear"
    KNN = "knn"
    DECODER = "decoder"


def extract_embeddings(model: Model, episode: Episode, plan=None) -> EmbeddingStack:
    """Hidden states of the query and probe-train rows; support rows are never included."""
    return forward(model, episode, plan, capture=True).stack


def _check_labels(labels: np.ndarray, n_rows: int, min_per_class: int = 1) -> np.ndarray:
    y = np.asarray(labels).astype(np.int64)
    if y.shape != (n_rows,):
        raise FitError(f"labels shape {y.shape} does not match {n_rows} rows")
    counts = [int(np.sum(y == c)) for c in (0, 1)]
    if min(counts) < min_per_class or counts[0] + counts[1] != n_rows:
        raise FitError(f"need >= {min_per_class} rows of each class 0/1, got counts {counts}")
    return y


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray
    constant: np.ndarray  # columns with a single value; mapped to exactly 0

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        constant = np.ptp(X, axis=0) == 0
        mean = X.mean(axis=0)
        scale = np.where(constant, 1.0, X.std(axis=0))
        return cls(mean, scale, constant)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        Z = (np.asarray(X, dtype=np.float64) - self.mean) / self.scale
        Z[:, self.constant] = 0.0
        return Z


@dataclass(frozen=True)
class LinearProbe:
    coef: np.ndarray  # in standardised coordinates
    intercept: float
    standardizer: Standardizer
    reg_strength: float
    trained_on_layer: int | None = None
    n_iter: int = 0
    grad_norm: float = 0.0
    kind: ProbeKind = ProbeKind.LINEAR

    def decision(self, X: np.ndarray) -> np.ndarray:
        return self.standardizer(X) @ self.coef + self.intercept

    def score(self, X: np.ndarray) -> np.ndarray:
        return self.decision(X)


def _logistic_objective(Z, y, w, b, reg):
    z = Z @ w + b
    # log(1 + e^z) - y z, stable for large |z|
    loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * reg * float(w @ w)
    return loss, z


def fit_linear_probe(
    embeddings: np.ndarray,
    labels,
    reg_strength: float = DEFAULT_REG,
    trained_on_layer: int | None = None,
    max_iter: int = 200,
    tol: float = 1e-8,
) -> LinearProbe:
    """L2-regularised logistic regression on standardised embeddings.

    Minimises ``mean(log-loss) + reg/2 * |w|^2`` (intercept unpenalised) by
    Newton's method with backtracking, stopping when the gradient's max-norm
    drops below ``tol`` or after ``max_iter`` steps.  Constant columns are
    left out of the solve and keep weight 0.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2:
        raise FitError(f"embeddings must be a matrix, got shape {X.shape}")
    y = _check_labels(labels, X.shape[0], min_per_class=2).astype(np.float64)
    if reg_strength < 0:
        raise FitError(f"reg_strength must be >= 0, got {reg_strength}")
    std = Standardizer.fit(X)
    Z = std(X)[:, ~std.constant]
    n, d = Z.shape
    A = np.hstack([Z, np.ones((n, 1))])
    theta = np.zeros(d + 1)
    penalty = np.full(d + 1, reg_strength)
    penalty[-1] = 0.0

    def objective(t):
        return _logistic_objective(Z, y, t[:-1], t[-1], reg_strength)

    loss, z = objective(theta)
    gnorm = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        grad = A.T @ (p - y) / n + penalty * theta
        gnorm = float(np.max(np.abs(grad)))
        if gnorm < tol:
            break
        H = (A * (p * (1.0 - p))[:, None]).T @ A / n + np.diag(penalty)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = theta - t * step
            cand_loss, cand_z = objective(cand)
            if cand_loss <= loss - 1e-4 * t * float(grad @ step) or t < 1e-10:
                break
            t *= 0.5
        if cand_loss > loss:
            break
        theta, loss, z = cand, cand_loss, cand_z
    coef = np.zeros(X.shape[1])
    coef[~std.constant] = theta[:-1]
    return LinearProbe(coef, float(theta[-1]), std, reg_strength, trained_on_layer, it, gnorm)


@dataclass(frozen=True)
class KnnProbe:
    train: np.ndarray  # standardised training rows
    labels: np.ndarray
    k: int
    standardizer: Standardizer
    trained_on_layer: int | None = None
    kind: ProbeKind = ProbeKind.KNN

    def neighbors(self, X: np.ndarray, chunk: int = 128) -> np.ndarray:
        """Indices of the k nearest training rows; equal distances go to the lower row index."""
        Q = self.standardizer(X)
        out = np.empty((Q.shape[0], self.k), dtype=np.int64)
        for start in range(0, Q.shape[0], chunk):
            diff = Q[start:start + chunk, None, :] - self.train[None, :, :]
            dist = np.sum(diff * diff, axis=-1)
            out[start:start + chunk] = np.argsort(dist, axis=1, kind="stable")[:, : self.k]
        return out

    def score(self, X: np.ndarray) -> np.ndarray:
        """Fraction of positive labels among the k nearest neighbours."""
        return self.labels[self.neighbors(X)].mean(axis=1)


def fit_knn_probe(
    embeddings: np.ndarray,
    labels,
    k: int = DEFAULT_K,
    trained_on_layer: int | None = None,
) -> KnnProbe:
    X = np.asarray(embeddings, dtype=np.float64)
    y = _check_labels(labels, X.shape[0])
    if not 1 <= k <= X.shape[0]:
        raise FitError(f"k={k} must lie in [1, {X.shape[0]}]")
    std = Standardizer.fit(X)
    return KnnProbe(std(X), y.astype(np.float64), int(k), std, trained_on_layer)


@dataclass(frozen=True)
class DecoderProbe:
    params: Mapping[str, np.ndarray]
    trained_on_layer: int | None = None
    steps: int = 0
    learning_rate: float = 0.0
    losses: np.ndarray = field(default_factory=lambda: np.zeros(0))
    kind: ProbeKind = ProbeKind.DECODER

    def as_decoder(self) -> Params:
        return {k: Tensor(v) for k, v in self.params.items()}

    def logits(self, X: np.ndarray) -> np.ndarray:
        return apply_decoder(self.as_decoder(), np.asarray(X, dtype=np.float64))

    def score(self, X: np.ndarray) -> np.ndarray:
        lg = self.logits(X)
        return lg[:, 1] - lg[:, 0]


def fit_decoder_probe(
    model: Model | Params,
    layer_embeddings: np.ndarray,
    labels,
    steps: int = 100,
    learning_rate: float = 1e-2,
    trained_on_layer: int | None = None,
) -> DecoderProbe:
    """Fine-tune a copy of the model's decoder on (embedding, label) pairs.

    Full-batch adaptive-moment steps on the cross-entropy.  The model's own
    decoder is never modified; with ``steps=0`` the probe is the frozen decoder.
    """
    decoder = model.decoder if isinstance(model, Model) else model
    X = np.asarray(layer_embeddings, dtype=np.float64)
    d = decoder["ln.g"].shape[0]
    if X.ndim != 2 or X.shape[1] != d:
        raise FitError(f"embeddings of shape {X.shape} do not have {d} columns")
    y = _check_labels(labels, X.shape[0])
    params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in decoder.items()}
    opt = Adam(list(params.values()))
    losses = np.empty(steps)
    inputs = Tensor(X)
    for step in range(steps):
        for p in params.values():
            p.grad = None
        loss = cross_entropy(decode(params, inputs), y)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingError("non-finite decoder-probe loss", step, float("nan"))
        loss.backward()
        grads = [p.grad for p in params.values()]
        gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
        if not math.isfinite(gnorm):
            raise TrainingError("non-finite decoder-probe gradient", step, gnorm)
        losses[step] = value
        opt.step(grads, learning_rate)
    frozen = {}
    for k, p in params.items():
        arr = p.data.copy()
        arr.flags.writeable = False
        frozen[k] = arr
    return DecoderProbe(frozen, trained_on_layer, steps, learning_rate, losses)


def fit_probe(kind: ProbeKind | str, embeddings, labels, *, layer=None, model=None, hyper: Mapping | None = None):
    kind = ProbeKind(kind)
    hyper = dict(hyper or {})
    if kind is ProbeKind.LINEAR:
        return fit_linear_probe(embeddings, labels, hyper.get("reg_strength", DEFAULT_REG), layer)
    if kind is ProbeKind.KNN:
        return fit_knn_probe(embeddings, labels, hyper.get("k", DEFAULT_K), layer)
    if model is None:
        raise FitError("decoder probes need the model whose decoder they copy")
    return fit_decoder_probe(
        model, embeddings, labels, hyper.get("steps", 100), hyper.get("learning_rate", 1e-2), layer
    )


@dataclass
class TransferMatrix:
    """AUC of a probe trained on layer i (row) and evaluated on layer j (column)."""

    auc: np.ndarray
    probe_kind: ProbeKind
    failures: list[str] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return self.auc.shape[0]

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.auc).copy()


def build_transfer_matrix(
    stack: EmbeddingStack,
    probe_kind: ProbeKind | str = ProbeKind.LINEAR,
    *,
    model: Model | None = None,
    hyper: Mapping | None = None,
) -> TransferMatrix:
    """Fit one probe per layer on the probe-train rows, score the query rows at every layer.

    A cell whose fit or evaluation fails is NaN and its reason is listed in
    ``failures``; it is never reported as zero.
    """
    kind = ProbeKind(probe_kind)
    if kind is ProbeKind.DECODER and model is None:
        raise FitError("decoder probes need the model whose decoder they copy")
    depth = stack.depth
    grid = np.full((depth, depth), np.nan)
    failures = []
    train_x, train_y = stack.probe_states, stack.probe_labels
    eval_x, eval_y = stack.eval_states, stack.eval_labels
    for i in range(depth):
        try:
            probe = fit_probe(kind, train_x[i], train_y, layer=i, model=model, hyper=hyper)
        except LayerLabError as exc:
            failures.append(f"fit layer {i}: {exc}")
            continue
        for j in range(depth):
            try:
                grid[i, j] = roc_auc(probe.score(eval_x[j]), eval_y)
            except LayerLabError as exc:
                failures.append(f"eval {i}->{j}: {exc}")
    return TransferMatrix(grid, kind, failures)
