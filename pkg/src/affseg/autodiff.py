"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

The graph is built per forward pass (define by run); `backward` walks it once
and accumulates gradients into every tensor that requires them. All values and
gradients are float64, reductions use numpy's fixed left-to-right order, so
results are bit-reproducible for identical inputs.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_bw", "_done")

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        bw: Callable | None = None,
    ):
        v = np.asarray(values, dtype=np.float64)
        self.values = v
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._bw = bw
        self._done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape}, grad={'set' if self.grad is not None else 'none'})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gd, sd) in enumerate(zip(g.shape, shape)):
        if sd == 1 and gd != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --- elementwise and linear ops --------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.values + b.values,
        parents=(a, b),
        bw=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.values - b.values,
        parents=(a, b),
        bw=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.values * b.values,
        parents=(a, b),
        bw=lambda g: (
            _unbroadcast(g * b.values, a.shape),
            _unbroadcast(g * a.values, b.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.values / b.values,
        parents=(a, b),
        bw=lambda g: (
            _unbroadcast(g / b.values, a.shape),
            _unbroadcast(-g * a.values / (b.values * b.values), b.shape),
        ),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = g @ np.swapaxes(b.values, -1, -2)
        gb = np.swapaxes(a.values, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(a.values @ b.values, parents=(a, b), bw=bw)


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    y = expit(a.values)
    return Tensor(y, parents=(a,), bw=lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    keep = a.values > 0
    return Tensor(np.where(keep, a.values, 0.0), parents=(a,), bw=lambda g: (g * keep,))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return Tensor(np.log(a.values), parents=(a,), bw=lambda g: (g / a.values,))


def pow_(a: Tensor, p: float) -> Tensor:
    a = as_tensor(a)
    y = a.values**p
    return Tensor(y, parents=(a,), bw=lambda g: (g * p * a.values ** (p - 1.0),))


def maximum_const(a: Tensor, c: float) -> Tensor:
    """Elementwise max with a constant; gradient flows where a wins."""
    a = as_tensor(a)
    keep = a.values > c
    return Tensor(np.where(keep, a.values, c), parents=(a,), bw=lambda g: (g * keep,))


def minimum_const(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    keep = a.values < c
    return Tensor(np.where(keep, a.values, c), parents=(a,), bw=lambda g: (g * keep,))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    y = a.values.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g)
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor(y, parents=(a,), bw=bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.values.size
    else:
        count = a.values.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return Tensor(
        np.transpose(a.values, axes),
        parents=(a,),
        bw=lambda g: (np.transpose(g, inv),),
    )


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.values.reshape(shape), parents=(a,), bw=lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.values.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(
        np.concatenate([t.values for t in tensors], axis=axis),
        parents=tuple(tensors),
        bw=bw,
    )


def take(a: Tensor, key) -> Tensor:
    """Basic slicing / integer indexing with gradient scatter-add."""
    a = as_tensor(a)
    y = a.values[key]

    def bw(g):
        out = np.zeros(a.shape, dtype=np.float64)
        np.add.at(out, key, g)
        return (out,)

    return Tensor(np.array(y), parents=(a,), bw=bw)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Write `value` where mask is True. No gradient through filled entries."""
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    return Tensor(
        np.where(mask, value, a.values),
        parents=(a,),
        bw=lambda g: (np.where(mask, 0.0, g),),
    )


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return Tensor(y, parents=(a,), bw=bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.values.mean(axis=-1, keepdims=True)
    xc = x.values - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.values + beta.values

    def bw(g):
        dxhat = g * gamma.values
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        dgamma = _unbroadcast(g * xhat, gamma.shape)
        dbeta = _unbroadcast(g, beta.shape)
        return dx, dgamma, dbeta

    return Tensor(y, parents=(x, gamma, beta), bw=bw)


MASK_FILL_VALUE = -1e30


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    attn_mask: np.ndarray | None = None,
) -> Tensor:
    """Scaled dot-product attention over (M, D) queries and (N, D) keys.

    `attn_mask` is a boolean (M, N) array; True blocks that key. A fully
    blocked query row degrades to uniform attention over all keys: every
    score in the row is the same fill constant, so the max-shifted softmax
    is exactly uniform and no gradient flows back through the scores.
    """
    m_len = q.values.shape[0]
    n_len = k.values.shape[0]
    dim = wq.values.shape[1]
    if dim % heads:
        raise ValueError("model dim must divide into heads")
    dh = dim // heads

    def split(t: Tensor) -> Tensor:  # (L, D) -> (heads, L, dh)
        return transpose(reshape(t, (-1, heads, dh)), (1, 0, 2))

    qh = split(add(matmul(q, wq), bq))
    kh = split(add(matmul(k, wk), bk))
    vh = split(add(matmul(v, wv), bv))

    scores = mul(matmul(qh, transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(dh))
    if attn_mask is not None:
        mask3 = np.broadcast_to(np.asarray(attn_mask, bool), (heads, m_len, n_len))
        scores = masked_fill(scores, mask3, MASK_FILL_VALUE)
    weights = softmax(scores, axis=-1)
    mixed = matmul(weights, vh)  # (heads, M, dh)
    merged = reshape(transpose(mixed, (1, 0, 2)), (m_len, dim))
    return add(matmul(merged, wo), bo)


# --- backward ----------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss. One sweep per forward build."""
    if loss.values.size != 1:
        raise ValueError("backward needs a scalar loss")
    if loss._done:
        raise RuntimeError("backward already ran on this graph; rebuild the forward")
    loss._done = True

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.values)
    for node in reversed(topo):
        if node._bw is None or node.grad is None:
            continue
        grads = node._bw(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


# --- parameters and the optimizer -------------------------------------------

class ParameterStore:
    """Named trainable leaves plus Adam moment state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        self._m[name] = np.zeros_like(t.values)
        self._v[name] = np.zeros_like(t.values)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return sorted(self._params)

    def n_values(self) -> int:
        return sum(p.values.size for p in self._params.values())

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad = None

    def grads_finite(self) -> bool:
        return all(
            p.grad is None or np.isfinite(p.grad).all() for p in self._params.values()
        )

    def adam_step(
        self,
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ) -> None:
        """One decoupled-weight-decay Adam update over all parameters."""
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - beta1**t
        c2 = 1.0 - beta2**t
        for name in self.names():
            p = self._params[name]
            g = p.grad if p.grad is not None else np.zeros_like(p.values)
            m = self._m[name]
            v = self._v[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + eps)
            if weight_decay:
                update = update + weight_decay * p.values
            p.values = p.values - lr * update

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.values.copy() for k, v in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ValueError(f"parameter mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, arr in state.items():
            p = self._params[k]
            if p.values.shape != arr.shape:
                raise ValueError(f"shape mismatch for {k}")
            p.values = np.array(arr, dtype=np.float64)


# --- finite-difference verification ------------------------------------------

def grad_check(
    build: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords_per_tensor: int | None = None,
    seed: int = 0,
    atol: float = 1e-8,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    `build` must construct the scalar loss from the current values of
    `tensors`. Differences below `atol` count as zero: central differences
    carry cancellation noise around |loss| * 1e-16 / (2 * eps), so tighter
    disagreements on near-zero gradients are not measurable. The relative
    denominator has a 1e-6 floor for the same reason.
    """
    for t in tensors:
        t.grad = None
    loss = build()
    backward(loss)
    analytic = []
    for t in tensors:
        analytic.append(np.zeros_like(t.values) if t.grad is None else t.grad.copy())

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, ana in zip(tensors, analytic):
        flat = t.values.reshape(-1)
        n = flat.size
        if max_coords_per_tensor is not None and n > max_coords_per_tensor:
            coords = rng.choice(n, size=max_coords_per_tensor, replace=False)
        else:
            coords = range(n)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f1 = float(build().values)
            flat[i] = orig - eps
            f2 = float(build().values)
            flat[i] = orig
            num = (f1 - f2) / (2.0 * eps)
            a = float(ana.reshape(-1)[i])
            diff = abs(num - a)
            if diff <= atol:
                continue
            err = diff / max(abs(num), abs(a), 1e-6)
            if err > worst:
                worst = err
    return worst
