"""Small reverse-mode autodiff engine over float64 numpy arrays.

Only the operations the dialogue policies need are provided: affine maps,
relu, dropout, reductions, gathers, a masked log-softmax and a max
reduction for the margin loss.  Every op records a closure that pushes the
upstream gradient to its parents; ``Tensor.backward`` walks the tape in
reverse topological order.
"""

from __future__ import annotations

import contextlib
import io
import json
import struct
from typing import Iterable, Iterator

import numpy as np

DTYPE = np.float64

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """``x[..., i] @ w[i, j]`` with ``w`` two-dimensional."""
    x, w = _as_tensor(x), _as_tensor(w)
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"shape mismatch in matmul: {x.shape} @ {w.shape}")
    xd, wd = x.data, w.data

    def backward(g):
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return gx, gw

    return _make(xd @ wd, (x, w), backward)


def linear_forward(w: Tensor, b: Tensor, h: Tensor) -> Tensor:
    """Affine map ``h @ W + b`` (rows of ``h`` are samples)."""
    w, b, h = _as_tensor(w), _as_tensor(b), _as_tensor(h)
    if b.shape != (w.shape[1],):
        raise ValueError(f"bias shape {b.shape} does not match weight {w.shape}")
    return add(matmul(h, w), b)


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _make(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity when ``train`` is false or ``rate`` is zero."""
    if not train or rate <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, Tensor(keep))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def gather(a: Tensor, index: np.ndarray) -> Tensor:
    """``out[..., k] = a[..., index[..., k]]`` along the last axis."""
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def backward(g):
        ga = np.zeros(shape, dtype=DTYPE)
        # indices may repeat, so accumulate rather than assign
        flat_idx = np.indices(index.shape)
        lead = tuple(flat_idx[:-1]) + (index,)
        np.add.at(ga, lead, g)
        return (ga,)

    return _make(np.take_along_axis(a.data, index, axis=-1), (a,), backward)


def take_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    """Select rows of ``a`` along axis 0 (may repeat or permute)."""
    rows = np.asarray(rows, dtype=np.intp)
    shape = a.shape

    def backward(g):
        ga = np.zeros(shape, dtype=DTYPE)
        np.add.at(ga, rows, g)
        return (ga,)

    return _make(a.data[rows], (a,), backward)


def pad_last(a: Tensor, width: int) -> Tensor:
    """Right-pad the last axis with zeros up to ``width``."""
    extra = width - a.shape[-1]
    if extra == 0:
        return a
    if extra < 0:
        raise ValueError("pad width smaller than tensor")
    zeros = Tensor(np.zeros(a.shape[:-1] + (extra,)))
    return concat([a, zeros], axis=-1)


def masked_log_softmax(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Log-softmax over the last axis restricted to ``mask``; masked entries are -inf."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("every row needs at least one valid entry")
    x = np.where(mask, logits.data, -np.inf)
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.where(mask, np.exp(out), 0.0)

    def backward(g):
        g = np.where(mask, g, 0.0)
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _make(out, (logits,), backward)


def masked_fill(a: Tensor, mask: np.ndarray, value: float = 0.0) -> Tensor:
    """Replace entries outside ``mask`` with ``value``; they receive no gradient."""
    mask = np.asarray(mask, dtype=bool)
    return _make(np.where(mask, a.data, value), (a,), lambda g: (np.where(mask, g, 0.0),))


def masked_max(a: Tensor, mask: np.ndarray) -> Tensor:
    """Max over the last axis among ``mask`` entries; gradient to the first argmax."""
    x = np.where(mask, a.data, -np.inf)
    idx = x.argmax(axis=-1)

    def backward(g):
        ga = np.zeros(a.shape, dtype=DTYPE)
        np.put_along_axis(ga, idx[..., None], g[..., None], axis=-1)
        return (ga,)

    return _make(np.take_along_axis(x, idx[..., None], axis=-1)[..., 0], (a,), backward)


def softmax(v: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Plain (non-differentiable) softmax used for sampling and reports."""
    v = np.asarray(v, dtype=DTYPE)
    if mask is not None:
        v = np.where(mask, v, -np.inf)
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# modules


class Module:
    """Container of named parameters; children are registered by attribute name."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((prefix + name, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(prefix + name + "."))
            elif isinstance(value, dict):
                for key in value:
                    child = value[key]
                    if isinstance(child, Module):
                        out.extend(child.named_parameters(f"{prefix}{name}.{key}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(np.sum([p.data.size for p in self.parameters()], dtype=np.int64))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) ^ set(state))
            raise ValueError(f"parameter names do not match checkpoint: {missing[:5]}")
        for name, p in params.items():
            if p.data.shape != state[name].shape:
                raise ValueError(f"shape mismatch for {name}: {p.data.shape} vs {state[name].shape}")
            p.data = np.array(state[name], dtype=DTYPE)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = parameter(rng.uniform(-bound, bound, size=(n_in, n_out)))
        self.bias = parameter(rng.uniform(-bound, bound, size=(n_out,)))

    def __call__(self, h: Tensor) -> Tensor:
        return linear_forward(self.weight, self.bias, h)


# ---------------------------------------------------------------------------
# optimisation


class Adam:
    """Adam with bias correction; state is kept per parameter name."""

    def __init__(self, named_params: Iterable[tuple[str, Tensor]], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(named_params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in self.params.items()}
        state = {"t": self.t, "m": self.m, "v": self.v}
        new = adam_step({k: p.data for k, p in self.params.items()}, grads, self.lr, state,
                        self.betas, self.eps)
        for k, p in self.params.items():
            p.data = new[k]
        self.t = state["t"]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array([self.t], dtype=DTYPE)}
        for k in self.params:
            out[f"adam.m/{k}"] = self.m[k]
            out[f"adam.v/{k}"] = self.v[k]
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["adam.t"][0])
        for k in self.params:
            self.m[k] = np.array(state[f"adam.m/{k}"], dtype=DTYPE)
            self.v[k] = np.array(state[f"adam.v/{k}"], dtype=DTYPE)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float,
              state: dict, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> dict[str, np.ndarray]:
    """One Adam update.  ``state`` holds ``t``, ``m`` and ``v`` and is updated in place."""
    b1, b2 = betas
    t = state.get("t", 0) + 1
    m = state.setdefault("m", {})
    v = state.setdefault("v", {})
    out = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {k} {p.shape}")
        m[k] = b1 * m.get(k, 0.0) + (1 - b1) * g
        v[k] = b2 * v.get(k, 0.0) + (1 - b2) * g * g
        m_hat = m[k] / (1 - b1 ** t)
        v_hat = v[k] / (1 - b2 ** t)
        out[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    state["t"] = t
    return out


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout (little endian):
#   magic   b"DMCK"
#   u32     format version (1)
#   u32     length of UTF-8 JSON metadata, followed by the metadata bytes
#   u32     number of entries
#   entry:  u32 name length, name bytes, u32 ndim, ndim x u64 dims,
#           prod(dims) x f64 raw data (C order)
# Entries are written in sorted name order so output is canonical.

MAGIC = b"DMCK"
VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_checkpoint(tensors, meta))


def dump_checkpoint(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8", order="C")  # keeps 0-d shape
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def parse_checkpoint(raw: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if raw[:4] != MAGIC:
        raise ValueError("not a checkpoint file")
    pos = 4
    (version,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (mlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    meta = json.loads(raw[pos:pos + mlen].decode())
    pos += mlen
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
        pos += 8 * ndim
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    if pos != len(raw):
        raise ValueError("trailing bytes in checkpoint")
    return tensors, meta
