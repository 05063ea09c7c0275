"""Dense arrays with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable op returns a new
tensor and, when any input requires a gradient, records a node on an implicit
tape. Nodes carry a monotonically increasing sequence number, so the record
order is a topological order of the computation DAG and :func:`backward`
simply walks the reachable nodes in reverse sequence order.

Broadcasting is deliberately limited to scalars. Use :func:`broadcast_to`
(and :func:`sum` for the reverse direction) to expand explicitly.
"""
from __future__ import annotations

import contextlib
import itertools
import json
import threading
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "tensor",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "neg",
    "exp",
    "log",
    "relu",
    "sqrt",
    "clip_min",
    "elementwise",
    "matmul",
    "reduce",
    "sum",
    "mean",
    "var",
    "softmax",
    "reshape",
    "transpose",
    "broadcast_to",
    "concat",
    "pick",
    "take_rows",
    "backward",
    "check_gradients",
    "save_raw",
    "load_raw",
]

_seq = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if not np.isfinite(arr).all():
            raise FloatingPointError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_seq)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(self, other)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: add(neg(self), other)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(self, other)
    __truediv__ = lambda self, other: div(self, other)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _is_scalar(x) -> bool:
    if isinstance(x, Tensor):
        return x.data.ndim == 0
    return np.ndim(x) == 0


def _make(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite value produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_seq)
    out.op = op
    needs = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = grad_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _sum_to_scalar(g: np.ndarray) -> np.ndarray:
    return np.asarray(g.sum(), dtype=g.dtype)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor, bool, bool]:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    a_s, b_s = a.data.ndim == 0, b.data.ndim == 0
    if not (a_s or b_s) and a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return a, b, a_s and not b_s, b_s and not a_s


def add(a, b) -> Tensor:
    a, b, a_bc, b_bc = _binary_operands(a, b, "add")

    def grad_fn(g):
        ga = _sum_to_scalar(g) if a_bc else g
        gb = _sum_to_scalar(g) if b_bc else g
        return ga, gb

    return _make(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b, a_bc, b_bc = _binary_operands(a, b, "sub")

    def grad_fn(g):
        ga = _sum_to_scalar(g) if a_bc else g
        gb = _sum_to_scalar(-g) if b_bc else -g
        return ga, gb

    return _make(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b, a_bc, b_bc = _binary_operands(a, b, "mul")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = g * bd
        gb = g * ad
        return (_sum_to_scalar(ga) if a_bc else ga), (_sum_to_scalar(gb) if b_bc else gb)

    return _make(ad * bd, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    a, b, a_bc, b_bc = _binary_operands(a, b, "div")
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise ZeroDivisionError("div: zero in denominator")
    out = ad / bd

    def grad_fn(g):
        ga = g / bd
        gb = -g * out / bd
        return (_sum_to_scalar(ga) if a_bc else ga), (_sum_to_scalar(gb) if b_bc else gb)

    return _make(out, (a, b), grad_fn, "div")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * a.data.dtype.type(s), (a,), lambda g: (g * s,), "scale")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def sqrt(a: Tensor) -> Tensor:
    """Square root; the derivative at exactly 0 is taken as 0 (subgradient)."""
    if np.any(a.data < 0):
        raise ValueError("sqrt: input must be non-negative")
    out = np.sqrt(a.data)

    def grad_fn(g):
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, 0.5 * g / safe, 0).astype(g.dtype),)

    return _make(out, (a,), grad_fn, "sqrt")


def clip_min(a: Tensor, floor: float) -> Tensor:
    mask = a.data >= floor
    out = np.where(mask, a.data, a.dtype.type(floor))
    return _make(out, (a,), lambda g: (g * mask,), "clip_min")


_UNARY = {"exp": exp, "log": log, "relu": relu}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: add|sub|mul|scale|exp|log|relu."""
    if op in _BINARY:
        return _BINARY[op](a, b)
    if op == "scale":
        return scale(a, b)
    if op in _UNARY:
        return _UNARY[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# linear algebra, reductions, shape ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner extents differ {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for {ndim}-D tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def _expand_back(g: np.ndarray, shape: tuple[int, ...], axes: tuple[int, ...], keepdims: bool):
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    ax = _norm_axes(axes, x.ndim)
    shape = x.shape

    def grad_fn(g):
        return (np.array(_expand_back(g, shape, ax, keepdims)),)

    return _make(np.asarray(x.data.sum(axis=ax, keepdims=keepdims)), (x,), grad_fn, "sum")


def mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axes(axes, x.ndim)
    n = int(np.prod([x.shape[a] for a in ax])) if ax else 1
    if n == 0:
        raise ValueError("mean over an empty axis")
    shape = x.shape

    def grad_fn(g):
        return (np.array(_expand_back(g, shape, ax, keepdims)) / n,)

    return _make(np.asarray(x.data.mean(axis=ax, keepdims=keepdims)), (x,), grad_fn, "mean")


def var(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Population variance (divides by N)."""
    ax = _norm_axes(axes, x.ndim)
    n = int(np.prod([x.shape[a] for a in ax])) if ax else 1
    if n == 0:
        raise ValueError("var over an empty axis")
    centered = x.data - x.data.mean(axis=ax, keepdims=True)
    out = np.asarray((centered * centered).mean(axis=ax, keepdims=keepdims))
    shape = x.shape

    def grad_fn(g):
        return (np.array(_expand_back(g, shape, ax, keepdims)) * centered * (2.0 / n),)

    return _make(out, (x,), grad_fn, "var")


def reduce(op: str, x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    if op == "mean":
        return mean(x, axes, keepdims)
    if op == "var":
        return var(x, axes, keepdims)
    if op == "sum":
        return sum(x, axes, keepdims)
    raise ValueError(f"unknown reduction {op!r}")


def softmax(logits: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    if logits.ndim == 0 or logits.shape[-1] < 1:
        raise ValueError("softmax needs at least one class on the last axis")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (logits,), grad_fn, "softmax")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit expansion; size-1 (or missing leading) axes are repeated."""
    shape = tuple(shape)
    src = x.shape
    lead = len(shape) - len(src)
    if lead < 0:
        raise ValueError(f"cannot broadcast {src} to {shape}")
    padded = (1,) * lead + src
    for s, t in zip(padded, shape):
        if s != t and s != 1:
            raise ValueError(f"cannot broadcast {src} to {shape}")
    red = tuple(i for i, (s, t) in enumerate(zip(padded, shape)) if s == 1 and t != 1)

    def grad_fn(g):
        g = g.sum(axis=red, keepdims=True) if red else g
        return (g.reshape(src),)

    return _make(np.array(np.broadcast_to(x.data, shape)), (x,), grad_fn, "broadcast_to")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ValueError("concat of an empty list")
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), grad_fn, "concat")


def pick(x: Tensor, index: Sequence[int]) -> Tensor:
    """Row-wise gather: ``out[i] = x[i, index[i]]`` for a 2-D ``x``."""
    idx = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ValueError(f"pick expects [N,C] and N indices, got {x.shape} and {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise IndexError("pick: index out of range")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def grad_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[rows, idx] = g
        return (full,)

    return _make(x.data[rows, idx], (x,), grad_fn, "pick")


def take_rows(x: Tensor, rows: Sequence[int]) -> Tensor:
    """Select rows along axis 0 (repeats allowed; gradients scatter-add back)."""
    idx = np.asarray(rows, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError("take_rows: index out of range")
    shape = x.shape

    def grad_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), grad_fn, "take_rows")


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


class Graph:
    """Nodes reachable from a root, in record (topological) order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def collect(cls, root: Tensor) -> "Graph":
        seen: dict[int, Tensor] = {}
        stack = [root]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen[id(node)] = node
            stack.extend(node._parents)
        return cls(sorted(seen.values(), key=lambda t: t._seq))

    def __len__(self) -> int:
        return len(self.nodes)

    def reverse(self) -> Iterable[Tensor]:
        return reversed(self.nodes)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    graph = Graph.collect(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in graph.reverse():
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
            grads[key] = grads[key] + pg if key in grads else pg


def check_gradients(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, eps: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` builds a scalar from ``x``; both passes run in double precision.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    backward(out)
    analytic = np.zeros_like(base) if leaf.grad is None else leaf.grad

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(Tensor(base.copy())).data)
            flat[i] = orig - eps
            fm = float(f(Tensor(base.copy())).data)
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2 * eps)
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(rel.max()) if rel.size else 0.0


# ---------------------------------------------------------------------------
# raw container: <name>.bin (little-endian, row-major) + <name>.json manifest
# ---------------------------------------------------------------------------

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "uint8": "u1"}


def _container_paths(path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".bin", ".json"):
        path = path.with_suffix("")
    return Path(f"{path}.bin"), Path(f"{path}.json")


def save_raw(path: str | Path, array) -> Path:
    """Write ``array`` to ``path.bin`` with an adjacent ``path.json`` manifest."""
    if isinstance(array, Tensor):
        array = array.data
    arr = np.asarray(array)
    name = arr.dtype.name
    if name not in _DTYPES:
        raise TypeError(f"unsupported dtype {name}")
    bin_path, json_path = _container_paths(path)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    bin_path.write_bytes(np.ascontiguousarray(arr, dtype=_DTYPES[name]).tobytes())
    manifest = {"dtype": name, "shape": list(arr.shape), "order": "row-major"}
    json_path.write_text(json.dumps(manifest))
    return bin_path


def load_raw(path: str | Path) -> np.ndarray:
    bin_path, json_path = _container_paths(path)
    manifest = json.loads(json_path.read_text())
    if manifest.get("order") != "row-major":
        raise ValueError(f"unsupported order {manifest.get('order')!r}")
    dtype = np.dtype(_DTYPES[manifest["dtype"]])
    shape = tuple(manifest["shape"])
    raw = bin_path.read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(manifest["dtype"])
