"""Dense float64 tensors with reverse-mode automatic differentiation.

The computation graph lives on the tensors themselves: every operation
attaches to its output the tuple of parent tensors and a closure mapping the
output gradient to parent gradients.  ``Tensor.backward`` walks that graph in
reverse topological order, which reproduces the chain rule exactly.

Conventions
-----------
* All data is float64.  Tensors are immutable once created; only ``grad``
  accumulates.  (``grad_check`` perturbs ``data`` in place as the one
  sanctioned exception.)
* A graph is single-threaded.  Distinct graphs may run on distinct threads.
* Randomness comes from the counter-based Philox generator (through
  ``numpy.random.Generator``), so a fixed seed yields a bit-identical stream
  on every platform.  All stochastic entry points take explicit seeds.

Binary layout (``save_tensor``/``load_tensor``): little-endian int64 rank,
int64 dims, then float64 values in row-major order.  ``save_tensors`` packs
several named tensors into one container file (see its docstring).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (forward-only)."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self):
        """Populate ``grad`` on every reachable requires_grad tensor.

        The receiver must be a scalar (the loss)."""
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def relu(self):
        return relu(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _record(data, parents, backward) -> Tensor:
    """Wrap an op result; record the backward rule when autograd is active."""
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise -----------------------------------------------------------


def _ew_shapes(a: Tensor, b: Tensor, opname: str):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ValueError(
            f"{opname}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _ew_shapes(a, b, "add")

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _record(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _ew_shapes(a, b, "sub")

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.data.shape))

    return _record(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _ew_shapes(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _record(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _ew_shapes(a, b, "div")

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _record(a.data / b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        if a.requires_grad:
            a._accum(-g)

    return _record(-a.data, (a,), bw)


def pow_(a: Tensor, p) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    out = a.data**p

    def bw(g):
        if a.requires_grad:
            a._accum(g * p * a.data ** (p - 1.0))

    return _record(out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        if a.requires_grad:
            a._accum(g * out)

    return _record(out, (a,), bw)


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        if a.requires_grad:
            a._accum(g / a.data)

    return _record(np.log(a.data), (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)

    def bw(g):
        if a.requires_grad:
            a._accum(g * 0.5 / out)

    return _record(out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        if a.requires_grad:
            a._accum(g * (a.data > 0.0))

    return _record(np.maximum(a.data, 0.0), (a,), bw)


# -- contractions and reductions --------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.  2-D tensors or stacked ND with identical batch dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(
            f"matmul needs rank >= 2 operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.ndim != b.data.ndim or a.data.shape[:-2] != b.data.shape[:-2]:
        raise ValueError(
            f"matmul batch dims must match, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul inner dims differ: {a.data.shape} vs {b.data.shape}"
        )

    def bw(g):
        if a.requires_grad:
            a._accum(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            b._accum(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _record(np.matmul(a.data, b.data), (a, b), bw)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axes(axis, x.data.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if x.requires_grad:
            gg = g if keepdims else np.expand_dims(g, axes)
            x._accum(np.broadcast_to(gg, x.data.shape))

    return _record(out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axes(axis, x.data.ndim)
    count = 1
    for ax in axes:
        count *= x.data.shape[ax]
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if x.requires_grad:
            gg = g if keepdims else np.expand_dims(g, axes)
            x._accum(np.broadcast_to(gg, x.data.shape) / count)

    return _record(out, (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    out = x.data.reshape(shape)

    def bw(g):
        if x.requires_grad:
            x._accum(g.reshape(x.data.shape))

    return _record(out, (x,), bw)


def transpose(x: Tensor, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        if x.requires_grad:
            x._accum(np.transpose(g, inv))

    return _record(np.transpose(x.data, axes), (x,), bw)


def concat(tensors, axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of zero tensors")
    axis = axis % tensors[0].data.ndim
    ref = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != len(ref) or any(
            s[d] != ref[d] for d in range(len(ref)) if d != axis
        ):
            raise ValueError(
                "concat: non-concat dims differ: "
                + ", ".join(str(t.data.shape) for t in tensors)
            )
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.data.shape[axis] for t in tensors])

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return _record(out, tuple(tensors), bw)


def getitem(x: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing; the adjoint scatters into a zero tensor."""
    x = _as_tensor(x)

    def bw(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[key] += g
            x._accum(gx)

    return _record(x.data[key], (x,), bw)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Numerically stable softmax along ``axis``; rejects non-finite input."""
    x = _as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise ValueError("softmax requires finite input")
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            x._accum((g - dot) * y)

    return _record(y, (x,), bw)


def log_softmax(x: Tensor, axis: int) -> Tensor:
    x = _as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def bw(g):
        if x.requires_grad:
            x._accum(g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return _record(y, (x,), bw)


# -- gather / scatter --------------------------------------------------------


def take(x: Tensor, indices, axis: int) -> Tensor:
    """Select ``indices`` along one axis (numpy.take); adjoint scatter-adds."""
    x = _as_tensor(x)
    indices = np.asarray(indices, dtype=np.intp).copy()
    axis = axis % x.data.ndim

    def bw(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            sl: list = [slice(None)] * x.data.ndim
            sl[axis] = indices
            np.add.at(gx, tuple(sl), g)
            x._accum(gx)

    return _record(np.take(x.data, indices, axis=axis), (x,), bw)


def _index_grids(shape, axis, idx_full):
    grids = []
    for d in range(len(shape)):
        if d == axis:
            grids.append(idx_full)
        else:
            view = [1] * len(shape)
            view[d] = -1
            grids.append(np.arange(shape[d]).reshape(view))
    return tuple(grids)


def take_along(x: Tensor, idx, axis: int) -> Tensor:
    """``numpy.take_along_axis`` with broadcastable integer indices."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    axis = axis % x.data.ndim
    out = np.take_along_axis(x.data, idx, axis=axis)

    def bw(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            idx_full = np.broadcast_to(idx, g.shape)
            np.add.at(gx, _index_grids(g.shape, axis, idx_full), g)
            x._accum(gx)

    return _record(out, (x,), bw)


def expand_along(x: Tensor, idx, axis: int, size: int) -> Tensor:
    """Adjoint of ``take_along``: scatter ``x`` into a zero tensor whose
    ``axis`` has length ``size``.  Indices must not repeat within a slice."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    axis = axis % x.data.ndim
    shape = list(x.data.shape)
    shape[axis] = size
    out = np.zeros(shape, dtype=np.float64)
    idx_full = np.broadcast_to(idx, x.data.shape)
    np.put_along_axis(out, idx_full, x.data, axis=axis)

    def bw(g):
        if x.requires_grad:
            x._accum(np.take_along_axis(g, idx_full, axis=axis))

    return _record(out, (x,), bw)


# -- constructors ------------------------------------------------------------


def zeros(*shape, requires_grad: bool = False) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(*shape, requires_grad: bool = False) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def rng(seed: int) -> np.random.Generator:
    """Deterministic generator: counter-based Philox keyed by ``seed``."""
    return np.random.Generator(np.random.Philox(key=seed))


def randn(gen: np.random.Generator, shape, requires_grad: bool = False) -> Tensor:
    return Tensor(gen.standard_normal(shape), requires_grad=requires_grad)


def uniform(
    gen: np.random.Generator,
    shape,
    low: float = 0.0,
    high: float = 1.0,
    requires_grad: bool = False,
) -> Tensor:
    return Tensor(gen.uniform(low, high, shape), requires_grad=requires_grad)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# -- gradient checking --------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    worst_index: tuple
    passed: bool


@dataclass
class GradCheckReport:
    step: float
    tolerance: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def summary(self) -> str:
        lines = [
            f"grad_check step={self.step:g} tolerance={self.tolerance:g}"
        ]
        for e in self.entries:
            status = "ok" if e.passed else "FAIL"
            lines.append(
                f"  {status:4s} {e.name}: max rel err {e.max_rel_err:.3e}"
                f" at {e.worst_index}"
            )
        return "\n".join(lines)


def grad_check(fn, inputs, step: float = 1e-5, tolerance: float = 1e-4,
               names=None) -> GradCheckReport:
    """Compare analytic gradients of ``fn(*inputs)`` (a scalar) against
    central finite differences, element by element.

    Relative error per element is |a - n| / max(|a|, |n|, 1e-6)."""
    if step <= 0:
        raise ValueError("grad_check step must be positive")
    inputs = list(inputs)
    if names is None:
        names = [f"input{i}" for i in range(len(inputs))]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    loss = fn(*inputs)
    if loss.data.size != 1:
        raise ValueError("grad_check target must map to a scalar")
    loss.backward()
    analytic = [
        np.array(t.grad) if t.grad is not None else np.zeros_like(t.data)
        for t in inputs
    ]
    report = GradCheckReport(step=step, tolerance=tolerance)
    with no_grad():
        for name, t, ana in zip(names, inputs, analytic):
            flat = t.data.reshape(-1)
            num = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = float(fn(*inputs).data)
                flat[i] = orig - step
                fm = float(fn(*inputs).data)
                flat[i] = orig
                num[i] = (fp - fm) / (2.0 * step)
            num = num.reshape(t.data.shape)
            denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-6)
            rel = np.abs(ana - num) / denom
            worst = np.unravel_index(int(np.argmax(rel)), rel.shape)
            err = float(rel.max()) if rel.size else 0.0
            report.entries.append(
                GradCheckEntry(name, err, worst, err < tolerance)
            )
    return report


# -- serialization -------------------------------------------------------------

_CKPT_MAGIC = b"GSEGTNS1"


def save_tensor(t, path) -> None:
    """Flat binary layout: little-endian int64 rank, int64 dims, float64 data."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(_tensor_bytes(data))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as f:
        blob = f.read()
    arr, used = _tensor_from_bytes(blob, 0)
    if used != len(blob):
        raise ValueError(f"trailing bytes in tensor file {path}")
    return Tensor(arr)


def _tensor_bytes(data: np.ndarray) -> bytes:
    head = struct.pack("<q", data.ndim)
    head += struct.pack(f"<{data.ndim}q", *data.shape) if data.ndim else b""
    return head + np.ascontiguousarray(data, dtype="<f8").tobytes()


def _tensor_from_bytes(blob: bytes, pos: int):
    (rank,) = struct.unpack_from("<q", blob, pos)
    pos += 8
    dims = struct.unpack_from(f"<{rank}q", blob, pos) if rank else ()
    pos += 8 * rank
    count = int(np.prod(dims)) if rank else 1
    arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos)
    pos += 8 * count
    return arr.astype(np.float64).reshape(dims), pos


def save_tensors(named: dict, path) -> None:
    """Indexed container: magic, int64 count, then per entry an int64 name
    length, the UTF-8 name, and the tensor in the flat binary layout."""
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<q", len(named)))
        for name, t in named.items():
            data = t.data if isinstance(t, Tensor) else np.asarray(t, np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<q", len(nb)))
            f.write(nb)
            f.write(_tensor_bytes(data))


def load_tensors(path) -> dict:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise ValueError(f"{path} is not a tensor container")
    pos = len(_CKPT_MAGIC)
    (count,) = struct.unpack_from("<q", blob, pos)
    pos += 8
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<q", blob, pos)
        pos += 8
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        arr, pos = _tensor_from_bytes(blob, pos)
        out[name] = arr
    return out


def tensor_to_csv(t, path) -> None:
    """CSV dump for small tensors: first row is the shape, following rows are
    the data reshaped to (-1, last_dim)."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    with open(path, "w") as f:
        f.write(",".join(str(d) for d in data.shape) + "\n")
        last = data.shape[-1] if data.ndim else 1
        for row in data.reshape(-1, last):
            f.write(",".join(repr(v) for v in row) + "\n")
