"""
Minimal reverse-mode autograd over numpy arrays.

Every differentiable op returns a new ``Tensor`` that remembers its parents
and a closure mapping the output gradient to parent gradients. ``backward``
walks the graph in reverse topological order. Gradients accumulate only on
leaf tensors with ``requires_grad=True``; intermediate gradients live in a
scratch dict for the duration of one backward call, so the graph can be
re-used (calling backward twice doubles leaf grads).

Parents that do not require grad are skipped entirely. A frozen weight
therefore costs no weight-gradient matmul, which is what makes frozen
embedding/head layers cheap during layer-selective training.
"""

from __future__ import annotations

import contextlib
import hashlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import EmptyLossError, InvalidShape, NonFiniteError, ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}

_grad_enabled = True
_check_finite = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation / decoding)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_debug_finite(enabled: bool) -> None:
    """When enabled, every forward op verifies its output is finite."""
    global _check_finite
    _check_finite = bool(enabled)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # operator sugar used by tests and the model
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _result(data: np.ndarray, parents: Sequence[Tensor], fn) -> Tensor:
    if _check_finite and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {getattr(fn, '__qualname__', fn)}")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# construction

def name_seed(seed: int, name: str) -> np.random.SeedSequence:
    """Seed stream for one named tensor: independent of construction order."""
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int.from_bytes(digest, "little")])


def create_tensor(
    shape: Sequence[int],
    init: str = "zeros",
    *,
    std: float = 0.02,
    values=None,
    seed: int = 0,
    name: str = "",
    dtype: str = "f32",
    requires_grad: bool = False,
) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise InvalidShape(f"shape must be non-empty with all dims >= 1, got {shape}")
    np_dtype = DTYPES[dtype]
    if init == "zeros":
        data = np.zeros(shape, dtype=np_dtype)
    elif init == "ones":
        data = np.ones(shape, dtype=np_dtype)
    elif init == "normal":
        if not std > 0:
            raise ValueError(f"normal init needs std > 0, got {std}")
        rng = np.random.default_rng(name_seed(seed, name))
        data = (rng.standard_normal(shape) * std).astype(np_dtype)
    elif init == "explicit":
        data = np.asarray(values, dtype=np_dtype)
        if data.size != int(np.prod(shape)):
            raise InvalidShape(f"{data.size} values do not fill shape {shape}")
        data = data.reshape(shape)
    else:
        raise ValueError(f"unknown init {init!r}")
    return Tensor(data, requires_grad=requires_grad, name=name or None)


# ---------------------------------------------------------------------------
# elementwise and shape ops

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _result(a.data + b.data, (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _result(a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def tsum(a: Tensor) -> Tensor:
    def bw(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _result(np.asarray(a.data.sum(), dtype=a.dtype), (a,), bw)


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2 * a.data * g,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _result(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def bw(g):
        return (g * (sig * (1 + a.data * (1 - sig))),)

    return _result(out, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b``.

    ``b`` may be a 2-D weight applied to the last axis of ``a`` (any leading
    dims), or have the same rank as ``a`` for batched products.
    """
    if a.dtype != b.dtype:
        raise ShapeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    if a.data.ndim < 2 and b.data.ndim < 2:
        raise ShapeError("matmul needs at least 2-D operands")
    if a.shape[-1] != b.shape[-2 if b.data.ndim >= 2 else 0]:
        raise ShapeError(f"inner dims differ: {a.shape} @ {b.shape}")
    if b.data.ndim != 2 and b.data.ndim != a.data.ndim:
        raise ShapeError(f"unsupported operand ranks: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    weight = b.data.ndim == 2

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if weight:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(out, (a, b), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return _result(table.data[ids], (table,), bw)


# ---------------------------------------------------------------------------
# normalisation, attention pieces, loss

def softmax_rows(x: Tensor, causal: bool = False) -> Tensor:
    """Softmax over the last axis with row-max subtraction.

    With ``causal=True`` the last two axes are treated as (query, key) and
    keys after the query are excluded exactly (probability 0).
    """
    z = x.data
    if causal:
        s_q, s_k = z.shape[-2], z.shape[-1]
        mask = np.triu(np.ones((s_q, s_k), dtype=bool), k=1 + s_k - s_q)
        z = np.where(mask, -np.inf, z)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (x,), bw)


def rms_norm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    if not eps >= 0:
        raise ValueError("eps must be >= 0")
    d = x.shape[-1]
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    denom = np.sqrt(ms + x.dtype.type(eps))
    # all-zero rows with eps=0 would divide by zero; treat them as zeros
    inv = np.divide(1.0, denom, out=np.zeros_like(denom), where=denom > 0).astype(x.dtype)
    xhat = x.data * inv
    out = xhat * gain.data

    def bw(g):
        gx = gg = None
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg

    return _result(out, (x, gain), bw)


def _rotate_half(x: np.ndarray) -> np.ndarray:
    h = x.shape[-1] // 2
    return np.concatenate([-x[..., h:], x[..., :h]], axis=-1)


def _rotate_half_t(g: np.ndarray) -> np.ndarray:
    h = g.shape[-1] // 2
    return np.concatenate([g[..., h:], -g[..., :h]], axis=-1)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position encoding on the last axis; ``cos``/``sin`` are [s, hd]."""
    out = x.data * cos + _rotate_half(x.data) * sin

    def bw(g):
        return (g * cos + _rotate_half_t(g * sin),)

    return _result(out, (x,), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean next-token NLL over positions where ``mask`` is true."""
    v = logits.shape[-1]
    z = logits.data.reshape(-1, v)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != z.shape[0]:
        raise ShapeError(f"{t.shape[0]} targets for {z.shape[0]} positions")
    if mask is None:
        m = np.ones(t.shape, dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool).reshape(-1)
    count = int(m.sum())
    if count == 0:
        raise EmptyLossError("every position is masked")
    t_safe = np.where(m, t, 0)
    if t_safe.min() < 0 or t_safe.max() >= v:
        raise IndexError(f"target id out of range [0, {v})")
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=-1))
    nll = lse - shifted[np.arange(z.shape[0]), t_safe]
    loss = np.asarray((nll * m).sum() / count, dtype=logits.dtype)

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(z.shape[0]), t_safe] -= 1
        p *= (m / count)[:, None].astype(p.dtype)
        return ((p * g).reshape(logits.shape).astype(logits.dtype),)

    return _result(loss, (logits,), bw)


# ---------------------------------------------------------------------------
# backward

def _topo(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor) -> None:
    if loss.data.size != 1 or loss.data.ndim not in (0, 1):
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# finite-difference validation

def grad_check(
    f: Callable[[list[Tensor]], Tensor],
    params: list[Tensor],
    h: float = 1e-4,
    n_samples: int = 32,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    At most ``n_samples`` coordinates per tensor are probed (all of them for
    smaller tensors). Error is ``|analytic - numeric| / max(1, |numeric|)``.
    Run in f64.
    """
    for p in params:
        p.grad = None
        p.requires_grad = True
    f(params).backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            if flat.size <= n_samples:
                coords = np.arange(flat.size)
            else:
                coords = rng.choice(flat.size, size=n_samples, replace=False)
            for c in coords:
                orig = flat[c]
                flat[c] = orig + h
                fp = float(f(params).data)
                flat[c] = orig - h
                fm = float(f(params).data)
                flat[c] = orig
                num = (fp - fm) / (2 * h)
                err = abs(float(ga.reshape(-1)[c]) - num) / max(1.0, abs(num))
                worst = max(worst, err)
    return worst


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in tensors)
