"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation that involves a tensor with ``requires_grad`` set records its
parents and a backward closure; :meth:`Tensor.backward` replays that tape in
reverse topological order.  Only first derivatives are supported.

Two matrix-product kernels are used.  With gradients enabled the product goes
through BLAS (``np.matmul``), which is fast but may round a given output row
differently depending on how many other rows are in the operand.  Under
:func:`no_grad` a row-stable ``einsum`` kernel is used instead, so an output
row depends only on the matching input row.  Inference relies on this for the
exact query-independence guarantees of the ICL models.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ShapeError

LAYER_NORM_EPS = 1e-5

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording (and switch to the row-stable product kernel)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        needs = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._backward = backward if needs else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return swapaxes(self, a, b)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return Tensor._result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return Tensor._result(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._result(out, (x,), lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation (smooth everywhere, so finite differences stay valid)."""
    z = x.data
    z2 = z * z
    t = np.tanh(_GELU_C * z * (1.0 + 0.044715 * z2))
    out = 0.5 * z * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * z2)
        return (g * (0.5 * (1.0 + t) + 0.5 * z * dt),)

    return Tensor._result(out, (x,), backward)


# shape manipulation and reductions


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return Tensor._result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return Tensor._result(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._result(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / count)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is Ellipsis or p is None or isinstance(p, (slice, int, np.integer)) for p in parts)


def take(x: Tensor, index) -> Tensor:
    out = x.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._result(np.array(out), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(out, tensors, backward)


# matrix product


def _product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if not is_grad_enabled():
        return np.einsum("...ik,...kj->...ij", a, b)
    if b.ndim == 2 and a.ndim > 2:
        # one GEMM over the folded batch instead of a loop of small ones
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(*a.shape[:-1], b.shape[-1])
    return np.matmul(a, b)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    try:
        out = _product(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = gb = None
        if b.ndim == 2 and a.ndim > 2:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._result(out, (a, b), backward)


# normalisation


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-shifted softmax; ``mask`` (True = disallowed) entries get exactly zero weight."""
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            mask = np.broadcast_to(mask, z.shape)
        except ValueError as exc:
            raise ShapeError(f"mask shape {mask.shape} does not broadcast to scores {z.shape}") from exc
        if np.any(np.all(mask, axis=axis)):
            raise ShapeError("softmax mask disallows every position of some row")
        z = np.where(mask, -np.inf, z)
    m = np.max(z, axis=axis, keepdims=True)
    e = np.exp(z - m)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return Tensor._result(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    out = z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return Tensor._result(out, (x,), backward)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits`` (..., classes)."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {logits.shape} do not match targets {targets.shape}")
    lp = log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    return mul(tsum(mul(lp, onehot)), -1.0 / max(targets.size, 1))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    z = x.data
    mu = z.mean(axis=-1, keepdims=True)
    xc = z - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xh = xc * inv
    out = xh * gain.data + bias.data

    def backward(g):
        gxh = g * gain.data
        gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True) - xh * (gxh * xh).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xh, gain.shape), _unbroadcast(g, bias.shape)

    return Tensor._result(out, (x, gain, bias), backward)


# attention


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    return swapaxes(reshape(x, (*lead, n, heads, d // heads)), -3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    return reshape(swapaxes(x, -3, -2), (*lead, n, h * dh))


def _check_heads(d: int, heads: int) -> None:
    if heads < 1 or d % heads:
        raise ShapeError(f"head count {heads} does not divide model dimension {d}")


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over already-projected ``q`` (..., nq, d) and ``k``/``v`` (..., nk, d).

    ``mask`` is boolean, True where a query may NOT attend to a key; its trailing
    two dimensions must be (nq, nk).
    """
    d = q.shape[-1]
    _check_heads(d, heads)
    if k.shape != v.shape or k.shape[-1] != d:
        raise ShapeError(f"key/value shapes {k.shape}, {v.shape} incompatible with queries {q.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-2:] != (q.shape[-2], k.shape[-2]):
            raise ShapeError(f"mask shape {mask.shape} does not match (queries, keys) = {(q.shape[-2], k.shape[-2])}")
        mask = mask[..., None, :, :]
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scores = mul(matmul(qh, swapaxes(kh, -1, -2)), 1.0 / math.sqrt(d // heads))
    weights = softmax(scores, axis=-1, mask=mask)
    return _merge_heads(matmul(weights, vh))


def support_self_attention(q: Tensor, k: Tensor, v: Tensor, n_support: int, heads: int) -> Tensor:
    """Episode attention: support tokens see the support; every other token sees the support and itself.

    Tokens are laid out as ``[support; targets]`` along axis -2.  This is the same
    as :func:`multi_head_attention` with the target-target block masked out
    except its diagonal, but the keys of a target token are built from the
    support plus that token alone.  The reduction length is therefore fixed at
    ``n_support + 1`` and a target row's output cannot depend on other targets,
    not even through rounding.
    """
    d = q.shape[-1]
    _check_heads(d, heads)
    n = q.shape[-2]
    if not 1 <= n_support <= n:
        raise ShapeError(f"n_support={n_support} invalid for {n} tokens")
    scale = 1.0 / math.sqrt(d // heads)
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    ks = take(kh, (Ellipsis, slice(0, n_support), slice(None)))
    vs = take(vh, (Ellipsis, slice(0, n_support), slice(None)))
    s_support = matmul(qh, swapaxes(ks, -1, -2))
    s_self = tsum(mul(qh, kh), axis=-1, keepdims=True)
    scores = mul(concat([s_support, s_self], axis=-1), scale)
    # support rows already see themselves through the support block
    mask = np.zeros((n, n_support + 1), dtype=bool)
    mask[:n_support, n_support] = True
    weights = softmax(scores, axis=-1, mask=mask)
    w_support = take(weights, (Ellipsis, slice(0, n_support)))
    w_self = take(weights, (Ellipsis, slice(n_support, n_support + 1)))
    return _merge_heads(add(matmul(w_support, vs), mul(w_self, vh)))


def episode_mask(n_support: int, n_total: int) -> np.ndarray:
    """Boolean (n_total, n_total) mask, True where attention is disallowed."""
    mask = np.ones((n_total, n_total), dtype=bool)
    mask[:, :n_support] = False
    idx = np.arange(n_support, n_total)
    mask[idx, idx] = False
    return mask


# finite-difference checking


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    seed: int = 0,
) -> float:
    """Return the worst norm-wise relative error between reverse-mode and central-difference gradients.

    The output of ``fn`` is contracted with a fixed random projection so every
    output element contributes to the scalar that is differentiated.
    Inputs are marked as requiring gradients.
    """
    rng = np.random.default_rng(seed)
    for t in inputs:
        t.requires_grad = True
        t.data = np.ascontiguousarray(t.data)
        t.grad = None
    out = fn(*inputs)
    proj = rng.normal(size=out.shape)
    tsum(mul(out, proj)).backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def scalar() -> float:
        return float(np.sum(fn(*inputs).data * proj))

    worst = 0.0
    with no_grad():
        for t, a in zip(inputs, analytic):
            num = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = scalar()
                flat[i] = orig - eps
                fm = scalar()
                flat[i] = orig
                num.reshape(-1)[i] = (fp - fm) / (2 * eps)
            denom = max(np.linalg.norm(a), np.linalg.norm(num), 1e-12)
            worst = max(worst, float(np.linalg.norm(a - num) / denom))
    return worst
