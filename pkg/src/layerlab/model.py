"""Small in-context-learning transformers for binary tabular classification.

Three variants share one episode layout, ``[support rows; target rows]``:

* ``ROW`` - one token per row (a vanilla transformer over rows).
* ``DUAL`` - one token per cell plus a label cell per row; each block attends
  across the cells of a row, then across rows within each column.
* ``TWO_STAGE`` - cell-level embedding blocks compress each row into a CLS
  token, then row-level ICL blocks predict from those row embeddings.

Support tokens attend to the support set; target tokens attend to the support
set and themselves only.  There are no positional encodings, so predictions
are equivariant to row order and each target is scored independently.

Blocks are pre-norm residual and addressable by index, so a
:class:`~layerlab.surgery.LayerPlan` can run them in any order.  Surgery only
touches the ICL-stage ``layers``; ``TWO_STAGE``'s ``embed_layers`` belong to
the encoder.
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .analysis import roc_auc
from .data_io import standardize_by_support, standardize_episode
from .errors import ConfigError, PlanError, ShapeError, TrainingError
from .prior import Episode, TaskPrior, sample_task, split_episode
from .surgery import LayerPlan, plan_exit, plan_identity, validate_plan
from .tensor import (
    Tensor,
    concat,
    cross_entropy,
    gelu,
    layer_norm,
    multi_head_attention,
    no_grad,
    support_self_attention,
    swapaxes,
    take,
)

Params = dict[str, Tensor]


class Variant(str, enum.Enum):
    ROW = "row"
    DUAL = "dual"
    TWO_STAGE = "two_stage"


@dataclass(frozen=True)
class ModelConfig:
    variant: Variant = Variant.ROW
    layers: int = 6
    model_dim: int = 64
    heads: int = 4
    ff_dim: int = 128
    embed_stage_layers: int = 1  # TWO_STAGE only
    max_features: int = 8  # ROW only: width of the zero-padded feature encoder
    seed: int = 0

    def __post_init__(self):
        try:
            object.__setattr__(self, "variant", Variant(self.variant))
        except ValueError as exc:
            raise ConfigError(f"unknown variant {self.variant!r}") from exc
        for name in ("layers", "model_dim", "heads", "ff_dim", "embed_stage_layers", "max_features"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.layers < 2:
            raise ConfigError("layer surgery needs at least 2 layers")
        if self.model_dim % self.heads:
            raise ConfigError(f"heads={self.heads} does not divide model_dim={self.model_dim}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys {sorted(extra)}")
        return cls(**d)


@dataclass
class Model:
    config: ModelConfig
    encoder: Params
    embed_layers: list[Params]
    layers: list[Params]
    decoder: Params

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [(f"encoder.{k}", t) for k, t in self.encoder.items()]
        for i, block in enumerate(self.embed_layers):
            out += [(f"embed.{i}.{k}", t) for k, t in block.items()]
        for i, block in enumerate(self.layers):
            out += [(f"layers.{i}.{k}", t) for k, t in block.items()]
        out += [(f"decoder.{k}", t) for k, t in self.decoder.items()]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    @property
    def n_layers(self) -> int:
        return len(self.layers)


# construction


def _param(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def _fill(shape, value: float) -> Tensor:
    return Tensor(np.full(shape, value), requires_grad=True)


def _norm(p: Params, prefix: str, d: int) -> None:
    p[prefix + ".g"] = _fill(d, 1.0)
    p[prefix + ".b"] = _fill(d, 0.0)


def _attention(rng, p: Params, prefix: str, d: int, out_std: float) -> None:
    for k in ("q", "k", "v"):
        p[f"{prefix}.{k}"] = _param(rng, (d, d), 1.0 / math.sqrt(d))
    p[f"{prefix}.o"] = _param(rng, (d, d), out_std / math.sqrt(d))
    p[f"{prefix}.bo"] = _fill(d, 0.0)


def _feedforward(rng, p: Params, d: int, ff: int, out_std: float) -> None:
    p["ff.w1"] = _param(rng, (d, ff), 1.0 / math.sqrt(d))
    p["ff.b1"] = _fill(ff, 0.0)
    p["ff.w2"] = _param(rng, (ff, d), out_std / math.sqrt(ff))
    p["ff.b2"] = _fill(d, 0.0)


def _row_block_params(rng, d: int, ff: int, out_std: float) -> Params:
    p: Params = {}
    _norm(p, "ln1", d)
    _attention(rng, p, "attn", d, out_std)
    _norm(p, "ln2", d)
    _feedforward(rng, p, d, ff, out_std)
    return p


def _cell_block_params(rng, d: int, ff: int, out_std: float) -> Params:
    p: Params = {}
    _norm(p, "lnf", d)
    _attention(rng, p, "fattn", d, out_std)
    _norm(p, "lns", d)
    _attention(rng, p, "sattn", d, out_std)
    _norm(p, "ln2", d)
    _feedforward(rng, p, d, ff, out_std)
    return p


def build_model(config: ModelConfig) -> Model:
    """Initialise all parameters from ``config.seed`` (same config -> identical parameters)."""
    if not isinstance(config, ModelConfig):
        raise ConfigError("build_model expects a ModelConfig")
    rng = np.random.default_rng(config.seed)
    d, ff, v = config.model_dim, config.ff_dim, config.variant
    n_blocks = config.layers + (config.embed_stage_layers if v is Variant.TWO_STAGE else 0)
    out_std = 1.0 / math.sqrt(2 * n_blocks)

    enc: Params = {}
    if v is Variant.ROW:
        enc["feat.w"] = _param(rng, (config.max_features, d), 1.0 / math.sqrt(config.max_features))
        enc["feat.b"] = _fill(d, 0.0)
    else:
        enc["val.w"] = _param(rng, d, 1.0)
        enc["val.b"] = _param(rng, d, 1.0)
    if v is Variant.TWO_STAGE:
        enc["cls"] = _param(rng, d, 1.0)
        _norm(enc, "rowln", d)
    enc["label"] = _param(rng, (2, d), 1.0)
    enc["unknown"] = _param(rng, d, 1.0)

    embed_layers = []
    if v is Variant.TWO_STAGE:
        embed_layers = [_cell_block_params(rng, d, ff, out_std) for _ in range(config.embed_stage_layers)]
    make_block = _cell_block_params if v is Variant.DUAL else _row_block_params
    layers = [make_block(rng, d, ff, out_std) for _ in range(config.layers)]

    dec: Params = {}
    _norm(dec, "ln", d)
    dec["w1"] = _param(rng, (d, d), 1.0 / math.sqrt(d))
    dec["b1"] = _fill(d, 0.0)
    # near-zero readout so an untrained model predicts ~uniform class probabilities
    dec["w2"] = _param(rng, (d, 2), 0.01 / math.sqrt(d))
    dec["b2"] = _fill(2, 0.0)
    return Model(config, enc, embed_layers, layers, dec)


def row_parameter_count(layers: int, model_dim: int, ff_dim: int, max_features: int) -> int:
    """Closed-form parameter count of a ROW model."""
    d, f = model_dim, ff_dim
    encoder = max_features * d + d + 2 * d + d
    block = 2 * d + 4 * d * d + d + 2 * d + d * f + f + f * d + d
    decoder = 2 * d + d * d + d + 2 * d + 2
    return encoder + layers * block + decoder


# forward computation


def _self_attention(h: Tensor, p: Params, prefix: str, heads: int, n_support: int | None) -> Tensor:
    q = h @ p[prefix + ".q"]
    k = h @ p[prefix + ".k"]
    v = h @ p[prefix + ".v"]
    if n_support is None:
        a = multi_head_attention(q, k, v, heads)
    else:
        a = support_self_attention(q, k, v, n_support, heads)
    return a @ p[prefix + ".o"] + p[prefix + ".bo"]


def _feedforward_apply(h: Tensor, p: Params) -> Tensor:
    return gelu(h @ p["ff.w1"] + p["ff.b1"]) @ p["ff.w2"] + p["ff.b2"]


def _row_block(h: Tensor, p: Params, n_support: int, heads: int) -> Tensor:
    h = h + _self_attention(layer_norm(h, p["ln1.g"], p["ln1.b"]), p, "attn", heads, n_support)
    return h + _feedforward_apply(layer_norm(h, p["ln2.g"], p["ln2.b"]), p)


def _cell_block(h: Tensor, p: Params, n_support: int, heads: int) -> Tensor:
    # h: (..., rows, cells, d); attend within a row, then across rows per column
    h = h + _self_attention(layer_norm(h, p["lnf.g"], p["lnf.b"]), p, "fattn", heads, None)
    hc = swapaxes(h, -3, -2)
    hc = hc + _self_attention(layer_norm(hc, p["lns.g"], p["lns.b"]), p, "sattn", heads, n_support)
    h = swapaxes(hc, -3, -2)
    return h + _feedforward_apply(layer_norm(h, p["ln2.g"], p["ln2.b"]), p)


def _label_tokens(enc: Params, support_y: np.ndarray, n_targets: int) -> Tensor:
    lead = support_y.shape[:-1]
    d = enc["unknown"].shape[0]
    unknown = Tensor(np.zeros((*lead, n_targets, d))) + enc["unknown"]
    return concat([take(enc["label"], support_y), unknown], axis=-2)


def _cells(enc: Params, x: np.ndarray) -> Tensor:
    return Tensor(x[..., None]) * enc["val.w"] + enc["val.b"]


def _encode(model: Model, sx: np.ndarray, sy: np.ndarray, tx: np.ndarray) -> Tensor:
    cfg, enc = model.config, model.encoder
    x = np.concatenate([sx, tx], axis=-2)
    n_support, n_targets = sx.shape[-2], tx.shape[-2]
    labels = _label_tokens(enc, sy, n_targets)
    if cfg.variant is Variant.ROW:
        d = x.shape[-1]
        padded = np.zeros((*x.shape[:-1], cfg.max_features))
        # rescale so the padded row keeps the squared norm of a full-width row
        padded[..., :d] = x * math.sqrt(cfg.max_features / d)
        return Tensor(padded) @ enc["feat.w"] + enc["feat.b"] + labels
    cells = _cells(enc, x)
    if cfg.variant is Variant.DUAL:
        return concat([cells, labels.reshape(*labels.shape[:-1], 1, labels.shape[-1])], axis=-2)
    cls = Tensor(np.zeros((*x.shape[:-1], 1, cfg.model_dim))) + enc["cls"]
    h = concat([cells, cls], axis=-2)
    for p in model.embed_layers:
        h = _cell_block(h, p, n_support, cfg.heads)
    rows = take(h, (Ellipsis, -1, slice(None)))
    return layer_norm(rows, enc["rowln.g"], enc["rowln.b"]) + labels


def _targets(model: Model, h: Tensor, n_support: int) -> Tensor:
    if model.config.variant is Variant.DUAL:
        return take(h, (Ellipsis, slice(n_support, None), -1, slice(None)))
    return take(h, (Ellipsis, slice(n_support, None), slice(None)))


def decode(decoder: Params, z: Tensor) -> Tensor:
    z = layer_norm(z, decoder["ln.g"], decoder["ln.b"])
    return gelu(z @ decoder["w1"] + decoder["b1"]) @ decoder["w2"] + decoder["b2"]


def apply_decoder(decoder: Params, embeddings: np.ndarray) -> np.ndarray:
    """Decode residual-stream embeddings (..., d) to 2-class logits, without recording gradients."""
    with no_grad():
        return decode(decoder, Tensor(embeddings)).data


def _check_inputs(model: Model, sx: np.ndarray, sy: np.ndarray, tx: np.ndarray) -> None:
    d = sx.shape[-1]
    if sx.shape[-2] < 1:
        raise ShapeError("episode has an empty support set")
    if tx.shape[-1] != d:
        raise ShapeError(f"support has {d} features but targets have {tx.shape[-1]}")
    if d < 1:
        raise ShapeError("episode has no features")
    if model.config.variant is Variant.ROW and d > model.config.max_features:
        raise ShapeError(f"episode has {d} features but the ROW encoder accepts at most {model.config.max_features}")
    if sy.shape != sx.shape[:-1]:
        raise ShapeError(f"support labels {sy.shape} do not match support rows {sx.shape}")


def _plan_layers(model: Model, plan) -> tuple[int, ...]:
    if plan is None:
        return tuple(range(model.n_layers))
    if isinstance(plan, LayerPlan):
        if plan.n_layers != model.n_layers:
            raise PlanError(f"plan built for {plan.n_layers} layers, model has {model.n_layers}")
        return plan.layers
    layers = tuple(int(i) for i in plan)
    validate_plan(layers, model.n_layers)
    return layers


def run(
    model: Model,
    support_x: np.ndarray,
    support_y: np.ndarray,
    target_x: np.ndarray,
    plan=None,
    capture: bool = False,
    decoder: Params | None = None,
) -> tuple[Tensor, list[np.ndarray]]:
    """Low-level forward over (optionally batched) arrays.

    Returns target logits (..., n_targets, 2) and, if ``capture``, the target
    rows' residual stream after the encoder and after every executed block.
    Gradients are recorded unless called under :func:`no_grad`.
    """
    sx = np.asarray(support_x, dtype=np.float64)
    sy = np.asarray(support_y, dtype=np.int64)
    tx = np.asarray(target_x, dtype=np.float64)
    _check_inputs(model, sx, sy, tx)
    order = _plan_layers(model, plan)
    n_support = sx.shape[-2]
    block = _cell_block if model.config.variant is Variant.DUAL else _row_block

    h = _encode(model, sx, sy, tx)
    states = [_targets(model, h, n_support).data] if capture else []
    for i in order:
        h = block(h, model.layers[i], n_support, model.config.heads)
        if capture:
            states.append(_targets(model, h, n_support).data)
    logits = decode(model.decoder if decoder is None else decoder, _targets(model, h, n_support))
    return logits, states


@dataclass
class EmbeddingStack:
    """Per-layer hidden states of the target rows of one episode.

    ``states[0]`` is the encoder output and ``states[k]`` the residual stream
    after the k-th executed block.  Rows are the query partition followed by the
    probe-train partition; ``is_probe`` marks the latter.
    """

    states: np.ndarray
    labels: np.ndarray
    is_probe: np.ndarray
    plan: tuple[int, ...] = ()

    @property
    def depth(self) -> int:
        return self.states.shape[0]

    @property
    def probe_states(self) -> np.ndarray:
        return self.states[:, self.is_probe]

    @property
    def probe_labels(self) -> np.ndarray:
        return self.labels[self.is_probe]

    @property
    def eval_states(self) -> np.ndarray:
        return self.states[:, ~self.is_probe]

    @property
    def eval_labels(self) -> np.ndarray:
        return self.labels[~self.is_probe]


@dataclass
class ForwardResult:
    logits: np.ndarray  # query rows only
    stack: EmbeddingStack | None = None
    probe_logits: np.ndarray | None = None

    @property
    def scores(self) -> np.ndarray:
        return self.logits[:, 1] - self.logits[:, 0]


def forward(model: Model, episode: Episode, plan=None, capture: bool = False, decoder: Params | None = None) -> ForwardResult:
    """Inference on an episode: query and probe-train rows are both scored as targets.

    Each target sees only the support set and itself, so adding the probe rows
    does not change the query logits.
    """
    n_query = len(episode.query_idx)
    tx = np.concatenate([episode.query_x, episode.probe_x])
    with no_grad():
        logits, states = run(model, episode.support_x, episode.support_y, tx, plan, capture, decoder)
    stack = None
    if capture:
        is_probe = np.zeros(len(tx), dtype=bool)
        is_probe[n_query:] = True
        labels = np.concatenate([episode.query_y, episode.probe_y])
        stack = EmbeddingStack(np.stack(states), labels, is_probe, _plan_layers(model, plan))
    return ForwardResult(logits.data[:n_query], stack, logits.data[n_query:])


def forward_early_exit(model: Model, episode: Episode, exit_after: int, decoder_override: Params | None = None) -> np.ndarray:
    """Run blocks ``0..exit_after`` then decode (with the original decoder unless overridden)."""
    if not 0 <= exit_after < model.n_layers:
        raise PlanError(f"exit_after={exit_after} outside [0, {model.n_layers})")
    return forward(model, episode, plan_exit(model.n_layers, exit_after), decoder=decoder_override).logits


def early_exit_curve(model: Model, episode: Episode, decoder: Params | None = None) -> list[np.ndarray]:
    """Query logits for every exit point from a single captured pass."""
    result = forward(model, episode, plan_identity(model.n_layers), capture=True)
    dec = model.decoder if decoder is None else decoder
    n_query = len(episode.query_idx)
    return [apply_decoder(dec, result.stack.states[k + 1])[:n_query] for k in range(model.n_layers)]


# training


class Adam:
    """Adaptive-moment optimiser with bias correction, updating tensors in place."""

    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.betas = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray], lr: float) -> None:
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainOptions:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_fraction: float = 0.05
    clip_norm: float = 1.0
    support_fraction_range: tuple[float, float] = (0.3, 0.7)


def learning_rate_at(step: int, steps: int, base: float, warmup_fraction: float) -> float:
    """Linear warmup then cosine decay to zero."""
    warmup = max(1, int(round(warmup_fraction * steps)))
    if step < warmup:
        return base * (step + 1) / warmup
    progress = (step - warmup) / max(1, steps - warmup)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


def training_batch(prior: TaskPrior, batch_tasks: int, rng: np.random.Generator, options: TrainOptions):
    """Equal-shape batch of tasks split into support and target rows, standardised by support."""
    lo_n, hi_n = prior.sample_count_range
    lo_d, hi_d = prior.feature_count_range
    n = int(rng.integers(lo_n, hi_n + 1))
    d = int(rng.integers(lo_d, hi_d + 1))
    f_lo, f_hi = options.support_fraction_range
    n_support = int(rng.integers(max(1, math.ceil(f_lo * n)), min(n - 1, math.floor(f_hi * n)) + 1))
    sx, sy, tx, ty = [], [], [], []
    for _ in range(batch_tasks):
        table = sample_task(prior, rng, n_rows=n, n_features=d)
        perm = rng.permutation(n)
        s, t = perm[:n_support], perm[n_support:]
        a, b = standardize_by_support(table.X[s], table.X[t])
        sx.append(a)
        tx.append(b)
        sy.append(table.y[s])
        ty.append(table.y[t])
    return np.stack(sx), np.stack(sy), np.stack(tx), np.stack(ty)


def train(
    model: Model,
    prior: TaskPrior,
    steps: int,
    batch_tasks: int = 8,
    learning_rate: float = 1e-3,
    rng=None,
    options: TrainOptions | None = None,
) -> np.ndarray:
    """Fit ``model`` in place to predict target labels of freshly sampled tasks.

    Returns the per-step mean cross-entropy (measured before each update).
    """
    if steps < 0:
        raise ConfigError(f"steps must be >= 0, got {steps}")
    if batch_tasks < 1:
        raise ConfigError(f"batch_tasks must be >= 1, got {batch_tasks}")
    options = options or TrainOptions()
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    params = model.parameters()
    opt = Adam(params, options.betas, options.eps)
    losses = np.empty(steps)
    for step in range(steps):
        sx, sy, tx, ty = training_batch(prior, batch_tasks, rng, options)
        for p in params:
            p.grad = None
        logits, _ = run(model, sx, sy, tx)
        loss = cross_entropy(logits, ty)
        loss.backward()
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
        gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
        value = float(loss.data)
        if not (math.isfinite(value) and math.isfinite(gnorm)):
            raise TrainingError("non-finite training loss", step, gnorm)
        if options.clip_norm and gnorm > options.clip_norm:
            grads = [g * (options.clip_norm / gnorm) for g in grads]
        losses[step] = value
        lr = learning_rate_at(step, steps, learning_rate, options.warmup_fraction)
        if lr:
            opt.step(grads, lr)
    return losses


def heldout_auc(
    model: Model,
    prior: TaskPrior,
    n_tasks: int = 50,
    rng=None,
    support_fraction: float = 0.35,
) -> list[float]:
    """Query-set AUC on ``n_tasks`` fresh tasks from ``prior``."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    aucs = []
    for _ in range(n_tasks):
        table = sample_task(prior, rng)
        episode = standardize_episode(split_episode(table, support_fraction, rng=rng))
        aucs.append(roc_auc(forward(model, episode).scores, episode.query_y))
    return aucs


__all__ = [
    "Variant",
    "ModelConfig",
    "Model",
    "build_model",
    "row_parameter_count",
    "run",
    "forward",
    "forward_early_exit",
    "early_exit_curve",
    "apply_decoder",
    "EmbeddingStack",
    "ForwardResult",
    "Adam",
    "TrainOptions",
    "train",
    "heldout_auc",
    "learning_rate_at",
]
