"""Dense tensors with tape-based reverse-mode differentiation on top of numpy.

Every tensor produced by an op remembers its parents and a closure that maps
the upstream gradient to one gradient per parent.  ``Tensor.backward`` walks
the tape in reverse topological order and accumulates into leaf tensors.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPES = {"float32": np.float32, "float64": np.float64}
_dtype = np.float32
_grad_enabled = True
_faults: set[str] = set()


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(RuntimeError):
    """A caller broke a documented precondition."""


class EvaluationError(ArithmeticError):
    pass


def set_precision(name: str) -> None:
    global _dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _dtype = _DTYPES[name]


def get_dtype():
    return _dtype


def get_precision() -> str:
    return "float64" if _dtype is np.float64 else "float32"


@contextlib.contextmanager
def precision(name: str):
    old = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(old)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


@contextlib.contextmanager
def inject_fault(op: str):
    """Corrupt the backward rule of ``op`` (mutation testing of grad checks)."""
    _faults.add(op)
    try:
        yield
    finally:
        _faults.discard(op)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return _wrap(self.data)

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(_topological_order(self)):
            g = pending.pop(id(node), None)
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
                pending[key] = pg if key not in pending else pending[key] + pg

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return gather(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)


class Parameter(Tensor):
    """Leaf tensor owned by a module.

    Frozen parameters (``trainable=False``) still receive gradients so that
    upstream trainable blocks can be differentiated through them; the
    optimizer simply never touches them.
    """

    __slots__ = ("trainable",)

    def __init__(self, data, trainable: bool = True, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)
        self.trainable = trainable

    @property
    def value(self) -> np.ndarray:
        return self.data

    @property
    def gradient(self) -> np.ndarray:
        return np.zeros_like(self.data) if self.grad is None else self.grad


def _wrap(x, like: np.ndarray | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    t = Tensor.__new__(Tensor)
    dtype = like.dtype if like is not None else _dtype
    t.data = np.asarray(x, dtype=dtype)
    t.grad = None
    t.requires_grad = False
    t._parents = ()
    t._backward = None
    t.name = None
    return t


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.name = None
    t.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if t.requires_grad:
        t._parents = parents
        t._backward = backward
    else:
        t._parents = ()
        t._backward = None
    return t


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
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _wrap(b, a.data)
    b = _wrap(b)
    return _wrap(a, b.data), b


def _broadcast(op, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        return op(a, b)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = _broadcast(np.add, a.data, b.data)
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = _broadcast(np.subtract, a.data, b.data)
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = _broadcast(np.multiply, a.data, b.data)
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = _broadcast(np.divide, a.data, b.data)
    return _result(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * x.data.dtype.type(c), (x,), lambda g: (g * x.data.dtype.type(c),))


def power(x: Tensor, exponent: float) -> Tensor:
    out = x.data**exponent
    return _result(out, (x,), lambda g: (g * exponent * x.data ** (exponent - 1),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if x.data.size == 0:
        raise DomainError("log of an empty tensor")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    out[~pos] = e / (1.0 + e)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def clamp_min(x: Tensor, lo: float) -> Tensor:
    keep = x.data >= lo
    return _result(np.where(keep, x.data, x.data.dtype.type(lo)), (x,), lambda g: (g * keep,))


# reductions ----------------------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    if count == 0:
        raise DomainError("mean over an empty axis")
    return scale(sum_(x, axis, keepdims), 1.0 / float(count))


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product along the last axis."""
    return sum_(mul(a, b), axis=-1)


# linear algebra and shape ---------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align") from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        if "matmul" in _faults:
            gb = gb * 1.01
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concat shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tuple(tensors), backward)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _result(out, (x,), lambda g: (np.transpose(g, inverse),))


def gather(x: Tensor, index) -> Tensor:
    """Numpy-style indexing; repeated indices accumulate in the backward pass."""
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    out = x.data[index]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _result(np.asarray(out), (x,), backward)


def segment_sum(x: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``x`` that share a segment id (scatter-add along axis 0)."""
    if len(segment_ids) != x.shape[0]:
        raise ShapeError(f"{len(segment_ids)} segment ids for {x.shape[0]} rows")
    out = np.zeros((num_segments,) + x.shape[1:], dtype=x.data.dtype)
    np.add.at(out, segment_ids, x.data)
    return _result(out, (x,), lambda g: (g[segment_ids],))


# normalisers ---------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.data.size == 0 or x.shape[axis] == 0:
        raise DomainError("softmax over an empty axis")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)
    return _result(
        out, (x,), lambda g: (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)
    )


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.data.size == 0 or x.shape[axis] == 0:
        raise DomainError("log_softmax over an empty axis")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    probs = np.exp(out)
    return _result(out, (x,), lambda g: (g - probs * np.sum(g, axis=axis, keepdims=True),))


def segment_softmax(x: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Softmax over the rows of ``x`` sharing a segment id, per trailing column."""
    if x.shape[0] == 0:
        raise DomainError("segment softmax over zero rows")
    peak = np.full((num_segments,) + x.shape[1:], -np.inf, dtype=x.data.dtype)
    np.maximum.at(peak, segment_ids, x.data)
    e = np.exp(x.data - peak[segment_ids])
    denom = np.zeros_like(peak)
    np.add.at(denom, segment_ids, e)
    out = e / denom[segment_ids]

    def backward(g):
        weighted = np.zeros_like(peak)
        np.add.at(weighted, segment_ids, g * out)
        return (out * (g - weighted[segment_ids]),)

    return _result(out, (x,), backward)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise ContractError("cannot L2-normalize a zero vector")
    out = x.data / norm
    return _result(
        out, (x,), lambda g: ((g - out * np.sum(g * out, axis=axis, keepdims=True)) / norm,)
    )


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data
    width = x.shape[-1]

    def backward(g):
        gxhat = g * gain.data
        gx = (
            inv_std
            / width
            * (
                width * gxhat
                - gxhat.sum(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True)
            )
        )
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _result(out, (x, gain, bias), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return mul(x, _wrap(keep / (1.0 - rate), x.data))


# gradient checking -----------------------------------------------------------

def _as_float(value) -> float:
    if isinstance(value, Tensor):
        if value.data.size != 1:
            raise ContractError(f"loss must be scalar, got shape {value.shape}")
        value = value.data.reshape(-1)[0]
    return float(value)


def finite_diff_grad(
    loss_fn: Callable[[], object],
    params: Sequence[Tensor],
    h: float = 1e-5,
    kink_tol: float = 1e-3,
) -> list[np.ndarray]:
    """Central-difference gradient estimate for every coordinate of ``params``.

    ``loss_fn`` is re-evaluated with the current parameter values.  Coordinates
    where the one-sided slopes disagree (a kink such as relu at 0) come back as
    NaN so callers can skip them.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise ContractError("finite differences require 64-bit parameters")
    base = _as_float(loss_fn())
    if not math.isfinite(base):
        raise EvaluationError(f"loss is not finite: {base}")
    grads = []
    for p in params:
        flat = p.data.reshape(-1)
        est = np.empty(flat.shape, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = _as_float(loss_fn())
            flat[i] = orig - h
            down = _as_float(loss_fn())
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise EvaluationError(f"loss not finite near coordinate {i} of {p.name or p.shape}")
            central = (up - down) / (2 * h)
            jump = abs(up - 2 * base + down) / h
            est[i] = np.nan if jump > kink_tol * max(1.0, abs(central)) else central
        grads.append(est.reshape(p.shape))
    return grads


@dataclass
class BlockReport:
    name: str
    max_rel_err: float
    analytic_norm: float
    numeric_norm: float
    skipped: int
    passed: bool


@dataclass
class GradReport:
    tol: float
    blocks: list[BlockReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(b.passed for b in self.blocks)

    @property
    def failed(self) -> list[str]:
        return [b.name for b in self.blocks if not b.passed]

    def __str__(self) -> str:
        lines = [f"gradient check (tol {self.tol:g})"]
        for b in self.blocks:
            mark = "ok  " if b.passed else "FAIL"
            lines.append(
                f"  {mark} {b.name:<40} rel_err={b.max_rel_err:.3e} "
                f"|a|={b.analytic_norm:.4e} |n|={b.numeric_norm:.4e} skipped={b.skipped}"
            )
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), eps)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[tuple[str, Tensor]] | dict[str, Tensor],
    tol: float = 1e-4,
    h: float = 1e-5,
) -> GradReport:
    named = list(params.items()) if isinstance(params, dict) else list(params)
    report = GradReport(tol=tol)
    if not named:
        return report
    tensors = [t for _, t in named]
    for t in tensors:
        t.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    with no_grad():
        numeric = finite_diff_grad(lambda: loss_fn(), tensors, h=h)
    for (name, _), a, n in zip(named, analytic, numeric):
        usable = ~np.isnan(n)
        err = relative_error(a[usable], n[usable])
        worst = float(err.max()) if err.size else 0.0
        report.blocks.append(
            BlockReport(
                name=name,
                max_rel_err=worst,
                analytic_norm=float(np.linalg.norm(a)),
                numeric_norm=float(np.linalg.norm(n[usable])),
                skipped=int((~usable).sum()),
                passed=worst < tol,
            )
        )
    return report
