"""Dense float64 tensors with reverse-mode automatic differentiation.

Small and deliberately boring: enough operations for two miniature
transformer encoders and the loss suite built on top of them, plus a
central-finite-difference gradient oracle. Everything is double
precision and single threaded; matrix products and axis reductions go
through ``np.einsum`` with ``optimize=False`` so results are
bit-reproducible run to run (no BLAS threading, no pairwise-summation
regrouping).

Operations never mutate their input buffers; every op allocates a fresh
result. Gradients accumulate into ``.grad`` on every tensor with
``requires_grad=True`` that participates in the graph.
"""

from __future__ import annotations

import io
import os
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, IntegrityError, NumericDomainError

_LETTERS = "abcdefghijkl"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple[Callable[[np.ndarray], np.ndarray], ...] = ()

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() expects a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- graph construction --------------------------------------------------

    @staticmethod
    def _op(data: np.ndarray, parents: Sequence["Tensor"], vjps: Sequence[Callable]) -> "Tensor":
        out = Tensor(data)
        kept = [(p, v) for p, v in zip(parents, vjps) if p.requires_grad]
        if kept:
            out.requires_grad = True
            out._parents = tuple(p for p, _ in kept)
            out._vjps = tuple(v for _, v in kept)
        return out

    def backward(self):
        """Populate ``.grad`` on every reachable requires_grad tensor.

        The loss must be scalar. Grad buffers accumulate across calls;
        zero them between fresh graphs.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() expects a scalar loss, got shape {self.shape}")
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
        flowing: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad = node.grad + g
            for parent, vjp in zip(node._parents, node._vjps):
                contrib = vjp(g)
                prev = flowing.get(id(parent))
                flowing[id(parent)] = contrib if prev is None else prev + contrib

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        data = self.data + other.data
        return Tensor._op(
            data,
            (self, other),
            (
                lambda g: _unbroadcast(g, self.data.shape),
                lambda g: _unbroadcast(g, other.data.shape),
            ),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)
        data = self.data - other.data
        return Tensor._op(
            data,
            (self, other),
            (
                lambda g: _unbroadcast(g, self.data.shape),
                lambda g: _unbroadcast(-g, other.data.shape),
            ),
        )

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other)
        data = self.data * other.data
        return Tensor._op(
            data,
            (self, other),
            (
                lambda g: _unbroadcast(g * other.data, self.data.shape),
                lambda g: _unbroadcast(g * self.data, other.data.shape),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        data = self.data / other.data
        return Tensor._op(
            data,
            (self, other),
            (
                lambda g: _unbroadcast(g / other.data, self.data.shape),
                lambda g: _unbroadcast(-g * self.data / (other.data**2), other.data.shape),
            ),
        )

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __neg__(self):
        return Tensor._op(-self.data, (self,), (lambda g: -g,))

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise ContractError("only scalar exponents are supported")
        data = self.data**p
        return Tensor._op(data, (self,), (lambda g: g * p * self.data ** (p - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        data = self.data[key]
        if data.base is not None:
            data = data.copy()

        def vjp(g):
            out = np.zeros_like(self.data)
            out[key] = g
            return out

        return Tensor._op(data, (self,), (vjp,))

    # -- elementwise functions -------------------------------------------

    def exp(self):
        data = np.exp(self.data)
        return Tensor._op(data, (self,), (lambda g: g * data,))

    def log(self):
        return Tensor._op(np.log(self.data), (self,), (lambda g: g / self.data,))

    def sqrt(self):
        data = np.sqrt(self.data)
        return Tensor._op(data, (self,), (lambda g: g * 0.5 / data,))

    def tanh(self):
        data = np.tanh(self.data)
        return Tensor._op(data, (self,), (lambda g: g * (1.0 - data**2),))

    def abs(self):
        return Tensor._op(np.abs(self.data), (self,), (lambda g: g * np.sign(self.data),))

    def clamp_min(self, floor: float):
        """max(x, floor); gradient passes where x >= floor."""
        data = np.maximum(self.data, floor)
        mask = (self.data >= floor).astype(np.float64)
        return Tensor._op(data, (self,), (lambda g: g * mask,))

    def softplus(self):
        """log(1 + exp(x)), numerically stable; gradient is sigmoid(x)."""
        data = np.logaddexp(0.0, self.data)
        sig = 0.5 * (1.0 + np.tanh(0.5 * self.data))
        return Tensor._op(data, (self,), (lambda g: g * sig,))

    # -- reductions ------------------------------------------------------

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False):
        nd = self.data.ndim
        if axis is None:
            axes = tuple(range(nd))
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(a % nd for a in axes)
            for a in axes:
                if a >= nd:
                    raise DimensionError(f"axis {a} out of range for shape {self.shape}")
        subs_in = _LETTERS[:nd]
        subs_out = "".join(c for i, c in enumerate(subs_in) if i not in axes)
        data = np.einsum(f"{subs_in}->{subs_out}", self.data, optimize=False)
        out_shape = data.shape
        if keepdims:
            kshape = tuple(1 if i in axes else s for i, s in enumerate(self.data.shape))
            data = data.reshape(kshape)

        def vjp(g):
            if keepdims:
                gg = g
            else:
                kshape = tuple(1 if i in axes else s for i, s in enumerate(self.data.shape))
                gg = g.reshape(kshape)
            return np.broadcast_to(gg, self.data.shape).copy()

        del out_shape
        return Tensor._op(data, (self,), (vjp,))

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            n = 1
            for a in axes:
                n *= self.data.shape[a % self.data.ndim]
        if n == 0:
            raise DimensionError(f"mean over empty axis of shape {self.shape}")
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- shape manipulation ----------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = self.data.reshape(shape)
        src = self.data.shape
        return Tensor._op(data, (self,), (lambda g: g.reshape(src),))

    def transpose(self, axes: tuple[int, ...]):
        data = np.transpose(self.data, axes)
        inv = tuple(np.argsort(axes))
        return Tensor._op(data, (self,), (lambda g: np.transpose(g, inv),))

    def broadcast_to(self, shape: tuple[int, ...]):
        data = np.broadcast_to(self.data, shape).copy()
        src = self.data.shape
        return Tensor._op(data, (self,), (lambda g: _unbroadcast(g, src),))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- linear algebra --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product on the trailing two axes.

    Supports ``(..., m, k) @ (..., k, n)`` with identical leading axes,
    and ``(..., m, k) @ (k, n)``. Implemented with einsum so the
    accumulation order is fixed regardless of backend threading.
    """
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    if b.ndim == 2:
        lead = _LETTERS[: a.ndim - 2]
        data = np.einsum(f"{lead}mk,kn->{lead}mn", a.data, b.data, optimize=False)
        vjp_a = lambda g: np.einsum(f"{lead}mn,kn->{lead}mk", g, b.data, optimize=False)
        vjp_b = lambda g: np.einsum(f"{lead}mk,{lead}mn->kn", a.data, g, optimize=False)
    elif a.ndim == b.ndim:
        if a.shape[:-2] != b.shape[:-2]:
            raise DimensionError(f"matmul leading dimensions disagree: {a.shape} vs {b.shape}")
        lead = _LETTERS[: a.ndim - 2]
        data = np.einsum(f"{lead}mk,{lead}kn->{lead}mn", a.data, b.data, optimize=False)
        vjp_a = lambda g: np.einsum(f"{lead}mn,{lead}kn->{lead}mk", g, b.data, optimize=False)
        vjp_b = lambda g: np.einsum(f"{lead}mk,{lead}mn->{lead}kn", a.data, g, optimize=False)
    else:
        raise DimensionError(f"unsupported matmul ranks: {a.shape} @ {b.shape}")
    return Tensor._op(data, (a, b), (vjp_a, vjp_b))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    nd = tensors[0].ndim
    axis = axis % nd
    data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.data.shape[axis] for t in tensors])

    def make_vjp(i):
        sl = [slice(None)] * nd
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return Tensor._op(data, tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors))))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward into the table."""
    ids = np.asarray(ids)
    data = table.data[ids]

    def vjp(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        return out

    return Tensor._op(data.copy(), (table,), (vjp,))


# -- composed numeric operations -------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis``; outputs sum to one along that axis."""
    x = _as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericDomainError("softmax input contains non-finite values")
    axis = axis % x.ndim
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    e = (x - shift).exp()
    return e / e.sum(axis=axis, keepdims=True)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    axis = axis % x.ndim
    m = np.max(x.data, axis=axis, keepdims=True)
    shift = Tensor(m)
    lse = (x - shift).exp().sum(axis=axis, keepdims=False).log()
    return lse + Tensor(np.squeeze(m, axis=axis))


def moments(x: Tensor, axis: int = 0, epsilon: float = 1e-5) -> tuple[Tensor, Tensor]:
    """Mean and sqrt(population variance + epsilon) along ``axis``."""
    x = _as_tensor(x)
    if epsilon < 0:
        raise ContractError("epsilon must be nonnegative")
    nd = x.ndim
    ax = axis % nd
    if x.data.shape[ax] < 1:
        raise DimensionError(f"moments over empty axis {axis} of shape {x.shape}")
    mu = x.mean(axis=ax, keepdims=True)
    var = ((x - mu) * (x - mu)).mean(axis=ax, keepdims=True)
    std = (var + epsilon).sqrt()
    squeeze = lambda t: t.reshape(tuple(s for i, s in enumerate(t.shape) if i != ax))
    return squeeze(mu), squeeze(std)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"cosine_similarity shapes disagree: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na == 0.0 or nb == 0.0:
        raise NumericDomainError("cosine_similarity of a zero-norm vector")
    dot = (a * b).sum()
    return dot / ((a * a).sum().sqrt() * (b * b).sum().sqrt())


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    norm = (x * x).sum(axis=axis, keepdims=True).sqrt()
    if np.any(norm.data == 0.0):
        raise NumericDomainError("cannot l2-normalize a zero-norm row")
    return x / norm


def gelu(x: Tensor) -> Tensor:
    # tanh form of the Gaussian error linear unit
    c = 0.7978845608028654  # sqrt(2/pi)
    inner = (x + (x * x * x) * 0.044715) * c
    return x * 0.5 * (inner.tanh() + 1.0)


# -- gradient checking ------------------------------------------------------


def finite_difference_check(
    f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5
) -> float:
    """Max relative error between backward() and central differences.

    The relative error uses denominator max(|analytic|, |numeric|, 1e-8)
    componentwise.
    """
    x0 = Tensor(x.data.copy(), requires_grad=True)
    y = f(x0)
    if y.data.size != 1:
        raise ContractError("finite_difference_check expects a scalar-valued function")
    if not np.isfinite(y.data).all():
        raise NumericDomainError("function value is non-finite at the check point")
    y.backward()
    analytic = x0.grad if x0.grad is not None else np.zeros_like(x0.data)

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + step
        f_plus = f(Tensor(bumped.reshape(x.data.shape))).item()
        bumped[i] = flat[i] - step
        f_minus = f(Tensor(bumped.reshape(x.data.shape))).item()
        numeric[i] = (f_plus - f_minus) / (2.0 * step)
    numeric = numeric.reshape(x.data.shape)
    return max_relative_error(analytic, numeric)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def finite_difference_check_params(
    f: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-5
) -> float:
    """FD check of a closure against the grads it leaves on ``params``.

    ``f`` must rebuild its graph from the live ``params`` tensors on every
    call. Grad buffers are zeroed here before the analytic pass.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    y = f()
    if y.data.size != 1:
        raise ContractError("finite_difference_check_params expects a scalar loss")
    if not np.isfinite(y.data).all():
        raise NumericDomainError("loss is non-finite at the check point")
    y.backward()
    # snapshot now: f() may clear grad buffers on re-evaluation
    analytics = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]
    worst = 0.0
    for p, analytic in zip(params, analytics):
        flat = p.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = f().item()
            flat[i] = orig - step
            f_minus = f().item()
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2.0 * step)
        worst = max(worst, max_relative_error(analytic, numeric.reshape(p.data.shape)))
    return worst


# -- binary serialization ----------------------------------------------------

TENSOR_MAGIC = b"TNS1"


def tensor_to_bytes(t: Tensor) -> bytes:
    buf = io.BytesIO()
    buf.write(TENSOR_MAGIC)
    buf.write(struct.pack("<q", t.data.ndim))
    for dim in t.data.shape:
        buf.write(struct.pack("<q", dim))
    buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return buf.getvalue()


def tensor_from_bytes(raw: bytes, context: str = "tensor record") -> Tensor:
    view = memoryview(raw)
    t, rest = _read_tensor_record(view, context)
    if len(rest) != 0:
        raise IntegrityError(f"{context}: {len(rest)} trailing bytes")
    return t


def _read_tensor_record(view: memoryview, context: str) -> tuple[Tensor, memoryview]:
    if len(view) < 12 or bytes(view[:4]) != TENSOR_MAGIC:
        raise IntegrityError(f"{context}: bad magic bytes")
    (rank,) = struct.unpack("<q", view[4:12])
    if rank < 0 or rank > 16:
        raise IntegrityError(f"{context}: implausible rank {rank}")
    header = 12 + 8 * rank
    if len(view) < header:
        raise IntegrityError(f"{context}: truncated dimension header")
    dims = struct.unpack(f"<{rank}q", view[12:header]) if rank else ()
    if any(d < 0 for d in dims):
        raise IntegrityError(f"{context}: negative dimension")
    count = int(np.prod(dims)) if rank else 1
    end = header + 8 * count
    if len(view) < end:
        raise IntegrityError(f"{context}: truncated data payload")
    data = np.frombuffer(view[header:end], dtype="<f8").reshape(dims).copy()
    return Tensor(data), view[end:]


def save_tensor(t: Tensor, path: str | os.PathLike):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path: str | os.PathLike) -> Tensor:
    with open(path, "rb") as fh:
        raw = fh.read()
    return tensor_from_bytes(raw, context=str(path))
