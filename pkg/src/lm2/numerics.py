"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation in the package goes through this module. A
:class:`Tape` records operations executed while it is active; ``backward``
walks the record in reverse and accumulates gradients into the leaf tensors
(parameters). Outside an active tape nothing is recorded, which makes
inference and finite-difference probing cheap.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "DimensionError", "NonFiniteError", "TapeError", "ConfigError",
    "precision", "set_precision", "get_dtype", "finite_checks",
    "tensor", "matmul", "softmax_rows", "SoftmaxDiagnostic", "elementwise", "sigmoid",
    "tanh", "silu", "rms_norm", "rope_apply", "cross_entropy", "embedding", "concat",
    "backward", "grad_check", "GradCheckReport",
]


class DimensionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN/Inf while finite checks are on."""

    def __init__(self, op: str, where: str = "forward"):
        super().__init__(f"non-finite values produced by '{op}' during {where} pass")
        self.op = op
        self.where = where


_DTYPES = {32: np.float32, 64: np.float64}
_settings = {"dtype": np.float32, "check_finite": True}
_tape_stack: list["Tape"] = []
_ids = itertools.count()


def get_dtype():
    return _settings["dtype"]


def set_precision(bits: int) -> None:
    if bits not in _DTYPES:
        raise ConfigError(f"precision must be 32 or 64, got {bits}")
    _settings["dtype"] = _DTYPES[bits]


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the default floating dtype (32 or 64 bit)."""
    old = _settings["dtype"]
    set_precision(bits)
    try:
        yield
    finally:
        _settings["dtype"] = old


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Toggle NaN/Inf detection on every forward output and backward gradient."""
    old = _settings["check_finite"]
    _settings["check_finite"] = enabled
    try:
        yield
    finally:
        _settings["check_finite"] = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "name", "op",
                 "_parents", "_backward", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or get_dtype())
        if arr.ndim and 0 in arr.shape:
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.name = name
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward = None
        self._tape = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, op={self.op})"

    # arithmetic sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

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
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; operations whose inputs require gradients are
    appended in execution order, so the record is topologically sorted by
    construction.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        for node in self.nodes:
            node._backward = None
            node._parents = ()
        self.nodes = []
        self.consumed = False


def _active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def _check(data: np.ndarray, op: str) -> None:
    if _settings["check_finite"] and not np.isfinite(data).all():
        raise NonFiniteError(op)


def _result(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    _check(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = next(_ids)
    out.name = None
    out.op = op
    out._parents = ()
    out._backward = None
    out._tape = None
    tape = _active_tape()
    if tape is not None and not tape.consumed and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._tape = tape
        tape.nodes.append(out)
    else:
        out.requires_grad = False
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementary arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw, "div")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, with numpy broadcasting of the rest."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    flat = b.ndim == 2 and a.ndim > 2
    if flat:
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(*a.shape[:-1], b.shape[-1])
    else:
        out = a.data @ b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(out, (a, b), bw, "matmul")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), bw, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / float(n))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,),
                   lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(x: Tensor, index) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(x.data[index]), (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]``; ids may have any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise DimensionError(f"token id out of range for table with {weight.shape[0]} rows")

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return _result(weight.data[ids], (weight,), bw, "embedding")


# nonlinearities --------------------------------------------------------

def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, z) / (1.0 + z)


def elementwise(x: Tensor, kind: str) -> Tensor:
    """Pointwise ``sigmoid``, ``tanh`` or ``silu``."""
    if kind == "sigmoid":
        s = _sigmoid_np(x.data)
        return _result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")
    if kind == "tanh":
        t = np.tanh(x.data)
        return _result(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")
    if kind == "silu":
        s = _sigmoid_np(x.data)
        return _result(x.data * s, (x,), lambda g: (g * s * (1.0 + x.data * (1.0 - s)),), "silu")
    raise ValueError(f"unknown elementwise kind {kind!r}")


def sigmoid(x: Tensor) -> Tensor:
    return elementwise(x, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    return elementwise(x, "tanh")


def silu(x: Tensor) -> Tensor:
    return elementwise(x, "silu")


@dataclass
class SoftmaxDiagnostic:
    fully_masked_rows: np.ndarray  # indices (over leading axes) of rows with no admissible entry

    @property
    def any(self) -> bool:
        return bool(len(self.fully_masked_rows))


def softmax_rows(x: Tensor, mask=None, top_k: int | None = None, return_diagnostic: bool = False):
    """Softmax over the last axis.

    ``mask`` is boolean and broadcastable to ``x``; ``True`` marks entries that
    may receive probability. With ``top_k`` only the k largest admissible
    logits of each row survive. A row with no admissible entry comes out as
    all zeros and is listed in the diagnostic.
    """
    logits = x.data
    n = logits.shape[-1]
    keep = None if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    if top_k is not None:
        if not 1 <= top_k <= n:
            raise ValueError(f"top_k must be in [1, {n}], got {top_k}")
        if top_k < n:
            z = logits if keep is None else np.where(keep, logits, -np.inf)
            idx = np.argpartition(-z, top_k - 1, axis=-1)[..., :top_k]
            sel = np.zeros(logits.shape, dtype=bool)
            np.put_along_axis(sel, idx, True, axis=-1)
            keep = sel if keep is None else (sel & keep)
    if keep is None:
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        p = e / e.sum(axis=-1, keepdims=True)
        empty = np.zeros(logits.shape[:-1], dtype=bool)
    else:
        z = np.where(keep, logits, -np.inf)
        empty = ~keep.any(axis=-1)
        m = np.where(empty[..., None], 0.0, z.max(axis=-1, keepdims=True))
        e = np.exp(z - m)
        s = e.sum(axis=-1, keepdims=True)
        p = e / np.where(empty[..., None], 1.0, s)
    p = p.astype(logits.dtype, copy=False)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    out = _result(p, (x,), bw, "softmax")
    if return_diagnostic:
        return out, SoftmaxDiagnostic(np.argwhere(empty))
    return out


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    if eps <= 0:
        raise ConfigError("rms_norm eps must be positive")
    xd = x.data
    r = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xn = xd * r

    def bw(g):
        gx = None
        if x.requires_grad:
            gy = g * gain.data
            gx = r * (gy - xn * (gy * xn).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xn, gain.shape) if gain.requires_grad else None
        return gx, gg

    return _result(xn * gain.data, (x, gain), bw, "rms_norm")


def _rope_tables(T: int, d_h: int, base: float, pos_offset: int, dtype):
    inv = base ** (-np.arange(0, d_h, 2, dtype=np.float64) / d_h)
    ang = (pos_offset + np.arange(T, dtype=np.float64))[:, None] * inv[None, :]
    return np.cos(ang).astype(dtype)[:, None, :], np.sin(ang).astype(dtype)[:, None, :]


def rope_apply(x: Tensor, base: float = 10000.0, pos_offset: int = 0) -> Tensor:
    """Rotary embedding for ``x`` shaped (..., T, heads, d_h).

    Adjacent coordinate pairs (2i, 2i+1) are rotated by angle
    ``(pos_offset + t) * base**(-2i/d_h)``.
    """
    if x.ndim < 3:
        raise DimensionError(f"rope_apply expects (..., T, heads, d_h), got {x.shape}")
    T, d_h = x.shape[-3], x.shape[-1]
    if d_h % 2:
        raise ConfigError(f"rotary embedding needs an even head dimension, got {d_h}")
    if pos_offset < 0:
        raise ConfigError("pos_offset must be non-negative")
    cos, sin = _rope_tables(T, d_h, base, pos_offset, x.dtype)
    x1, x2 = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos

    def bw(g):
        g1, g2 = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = g1 * cos + g2 * sin
        gx[..., 1::2] = -g1 * sin + g2 * cos
        return (gx,)

    return _result(out, (x,), bw, "rope")


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted mean next-token cross-entropy over the last (vocabulary) axis."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != targets.shape:
        raise DimensionError(f"weights shape {w.shape} does not match targets {targets.shape}")
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy needs at least one positively weighted target")
    l = logits.data
    m = l.max(axis=-1, keepdims=True)
    e = np.exp(l - m)
    s = e.sum(axis=-1, keepdims=True)
    lse = (m + np.log(s))[..., 0]
    picked = np.take_along_axis(l, targets[..., None], axis=-1)[..., 0]
    loss = float(((lse - picked) * w).sum() / total)

    def bw(g):
        p = e / s
        np.put_along_axis(p, targets[..., None],
                          np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
        return ((p * (w / total)[..., None] * g).astype(l.dtype, copy=False),)

    return _result(np.asarray(loss, dtype=l.dtype), (logits,), bw, "cross_entropy")


# reverse pass ----------------------------------------------------------

def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Fill ``.grad`` of every leaf tensor that ``loss`` depends on.

    Gradients accumulate into existing ``.grad`` buffers, so batches can be
    accumulated across several tapes. A tape can be traversed once.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else loss._tape
    if tape is None:
        raise TapeError("loss was not recorded on a tape (no tracked inputs or no active Tape)")
    if tape.consumed:
        raise TapeError("backward already ran on this tape; call tape.reset() and recompute")
    tape.consumed = True
    check = _settings["check_finite"]
    pending = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(node.node_id, None)
        if g is None:
            continue
        grads = node._backward(g)
        for parent, pg in zip(node._parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            if check and not np.isfinite(pg).all():
                raise NonFiniteError(node.op, "backward")
            if parent._backward is None:
                parent.grad = pg.astype(parent.dtype, copy=True) if parent.grad is None \
                    else parent.grad + pg
            elif parent.node_id in pending:
                pending[parent.node_id] = pending[parent.node_id] + pg
            else:
                pending[parent.node_id] = pg
    for node in tape.nodes:
        node._backward = None
        node._parents = ()


@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float]
    tol: float
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(err <= self.tol for err in self.max_rel_err.values())

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.max_rel_err, key=self.max_rel_err.get)
        return name, self.max_rel_err[name]

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [f"grad_check {status} (tol={self.tol:g})"]
        lines += [f"  {k}: {v:.3e}" for k, v in self.max_rel_err.items()]
        return "\n".join(lines)


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-4,
               tol: float = 1e-3, max_coords: int = 64, seed: int = 0,
               floor: float = 1e-7) -> GradCheckReport:
    """Compare tape gradients with central differences on sampled coordinates.

    The step for coordinate i is ``h * max(1, |theta_i|)``. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise ConfigError("grad_check requires 64-bit parameters")
        p.grad = None
    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    rng = np.random.default_rng(seed)
    errs, counts = {}, {}
    for i, p in enumerate(params):
        name = p.name or f"param{i}"
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        coords = rng.choice(flat.size, size=min(max_coords, flat.size), replace=False)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            step = h * max(1.0, abs(orig))
            flat[c] = orig + step
            lp = f().item()
            flat[c] = orig - step
            lm = f().item()
            flat[c] = orig
            num = (lp - lm) / (2 * step)
            a = analytic.reshape(-1)[c]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
        errs[name] = worst
        counts[name] = len(coords)
    return GradCheckReport(errs, tol, counts)
