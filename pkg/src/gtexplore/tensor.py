"""Dense float64 tensors with a scoped reverse-mode tape.

Values are plain numpy arrays. Operations record themselves on the tape
only inside a ``with trace():`` block and only when at least one operand
requires a gradient, so inference code pays nothing for differentiation.
"""

from __future__ import annotations

import contextlib
import json
import struct
import threading
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from . import _kernels

__all__ = [
    "Tensor",
    "trace",
    "paused",
    "is_tracing",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "hadamard",
    "scale",
    "tanh",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "tsum",
    "mean",
    "reshape",
    "transpose",
    "take",
    "concat",
    "softmax_rows",
    "log_softmax_rows",
    "layer_norm",
    "EdgeIndex",
    "gated_aggregate",
    "ParamStore",
    "adam_step",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
    "numeric_grad",
    "gradcheck",
]

_state = threading.local()


def is_tracing() -> bool:
    return getattr(_state, "depth", 0) > 0


@contextlib.contextmanager
def trace():
    """Record differentiable operations issued in this thread."""
    _state.depth = getattr(_state, "depth", 0) + 1
    try:
        yield
    finally:
        _state.depth -= 1


@contextlib.contextmanager
def paused():
    """Suspend recording inside a trace, for values used only as constants."""
    depth = getattr(_state, "depth", 0)
    _state.depth = 0
    try:
        yield
    finally:
        _state.depth = depth


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) or data.dtype != np.float64 else data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a python scalar is supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _result(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    out = Tensor(data)
    if is_tracing() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Sweep the tape in reverse and accumulate ``.grad`` on leaf tensors."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss was not produced under an active trace")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}") from None

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ValueError(f"sub: incompatible shapes {a.shape} and {b.shape}") from None

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(data, (a, b), fn)


def mul(a, b) -> Tensor:
    """Hadamard product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ValueError(f"hadamard: incompatible shapes {a.shape} and {b.shape}") from None

    def fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), fn)


hadamard = mul


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _result(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _result(np.log(x), (a,), lambda g: (g / x,))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(data, dtype=np.float64), (a,), fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# -------------------------------------------------------------------- shaping


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def take(a: Tensor, index) -> Tensor:
    """Gather rows along axis 0; repeated indices accumulate on the way back."""
    index = np.asarray(index, dtype=np.int64)

    def fn(g):
        flat = g.reshape(index.size, -1)
        out = np.zeros((a.shape[0], flat.shape[1]))
        np.add.at(out, index.reshape(-1), flat)
        return (out.reshape(a.shape),)

    return _result(a.data[index], (a,), fn)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    edges = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def fn(g):
        return tuple(np.split(g, edges, axis=axis))

    return _result(data, parts, fn)


# ------------------------------------------------------------------- products


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b``.

    Supported layouts: 2D x 2D, ND x 2D (shared right operand), and ND x ND
    with identical leading batch dimensions.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch dims differ {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(data, (a, b), fn)


# -------------------------------------------------------------------- softmax


def _masked_softmax(x: np.ndarray, mask) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (softmax, log-sum-exp with a trailing unit axis, dense mask)."""
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("softmax_rows: a row has no active entries")
    # numpy's vectorised exp is far quicker than a compiled scalar loop here
    y = np.where(mask, x, -np.inf)
    top = y.max(axis=-1, keepdims=True)
    y -= top
    np.exp(y, out=y)
    total = y.sum(axis=-1, keepdims=True)
    y /= total
    return y, top + np.log(total), mask


def softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis restricted to ``mask``; inactive slots are 0."""
    y, _, _ = _masked_softmax(x.data, mask)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), fn)


def log_softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Log-softmax over active entries; inactive slots hold 0."""
    y, lse, mask = _masked_softmax(x.data, mask)
    out = np.where(mask, x.data - lse, 0.0)

    def fn(g):
        g = np.where(mask, g, 0.0)
        return (np.where(mask, g - y * g.sum(axis=-1, keepdims=True), 0.0),)

    return _result(out, (x,), fn)


# ----------------------------------------------------------------- fused ops


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gain`` and shift by ``bias``."""
    dim = x.shape[-1]
    if gain.shape != (dim,) or bias.shape != (dim,):
        raise ValueError(f"layer_norm: gain/bias {gain.shape}, {bias.shape} for width {dim}")
    flat = np.ascontiguousarray(x.data).reshape(-1, dim)
    y, xhat, inv = _kernels.layer_norm_forward(flat, gain.data, bias.data, eps)

    def fn(g):
        gx, gg, gb = _kernels.layer_norm_backward(np.ascontiguousarray(g).reshape(-1, dim), xhat, inv, gain.data)
        return gx.reshape(x.shape), gg, gb

    return _result(y.reshape(x.shape), (x, gain, bias), fn)


class EdgeIndex:
    """Directed edge list over ``num_nodes`` rows with cached incidence matrices."""

    def __init__(self, dst, src, num_nodes: int):
        self.dst = np.asarray(dst, dtype=np.int64)
        self.src = np.asarray(src, dtype=np.int64)
        if self.dst.shape != self.src.shape:
            raise ValueError("dst and src must have equal length")
        self.num_nodes = int(num_nodes)
        e = self.dst.size
        cols = np.arange(e)
        ones = np.ones(e)
        self._to_dst = sp.csr_matrix((ones, (self.dst, cols)), shape=(self.num_nodes, e))
        self._to_src = sp.csr_matrix((ones, (self.src, cols)), shape=(self.num_nodes, e))

    def __len__(self) -> int:
        return self.dst.size

    def sum_to_dst(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(self._to_dst @ values)

    def sum_to_src(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(self._to_src @ values)


def gated_aggregate(a: Tensor, b: Tensor, c: Tensor, edges: EdgeIndex) -> Tensor:
    """``out[i] = sum over edges (i <- j) of sigmoid(a[i] + b[j]) * c[j]``.

    ``a``, ``b`` and ``c`` are ``(num_nodes, d)`` row blocks. Nodes with no
    incoming edge receive zeros.
    """
    if not (a.shape == b.shape == c.shape) or a.shape[0] != edges.num_nodes:
        raise ValueError(f"gated_aggregate: shapes {a.shape}, {b.shape}, {c.shape} vs {edges.num_nodes} nodes")
    gates = _kernels.edge_logits(a.data, b.data, edges.dst, edges.src)
    np.exp(gates, out=gates)
    gates += 1.0
    np.reciprocal(gates, out=gates)
    data = _kernels.gated_scatter(gates, c.data, edges.dst, edges.src)

    def fn(g):
        return _kernels.gated_backward(gates, c.data, edges.dst, edges.src, np.ascontiguousarray(g))

    return _result(data, (a, b, c), fn)


# ---------------------------------------------------------------- parameters


class ParamStore:
    """Named parameters plus Adam moment slots and a step counter."""

    def __init__(self):
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def names(self) -> list[str]:
        return list(self.params)

    def manifest(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, tuple(t.shape)) for k, t in self.params.items()]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def num_values(self) -> int:
        return sum(t.size for t in self.params.values())

    def snapshot(self) -> "ParamStore":
        """Independent deep copy of values and optimizer slots."""
        out = ParamStore()
        for k, t in self.params.items():
            out.add(k, t.data.copy())
            out.m[k] = self.m[k].copy()
            out.v[k] = self.v[k].copy()
        out.step = self.step
        return out

    def copy_values_from(self, other: "ParamStore") -> None:
        if self.manifest() != other.manifest():
            raise ValueError("parameter manifests differ")
        for k, t in self.params.items():
            t.data = other.params[k].data.copy()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update over every parameter, then clear grads."""
    missing = [k for k, t in store.params.items() if t.grad is None]
    if missing:
        raise ValueError(f"adam_step: no gradient for {missing}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k, p in store.params.items():
        g = p.grad
        m = store.m[k]
        v = store.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.grad = None


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"GTXCKPT\x00"
_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, stores: dict[str, ParamStore], meta: dict | None = None) -> None:
    """Write stores as a JSON manifest followed by little-endian float64 blocks.

    Per parameter, the payload holds values, first moment, second moment.
    """
    manifest = {
        "version": _VERSION,
        "meta": meta or {},
        "stores": {
            sname: {"step": s.step, "params": [[k, list(shape)] for k, shape in s.manifest()]}
            for sname, s in stores.items()
        },
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(head)))
        fh.write(head)
        # payload order must follow the sorted manifest
        for sname in sorted(stores):
            s = stores[sname]
            for k, t in s.params.items():
                for arr in (t.data, s.m[k], s.v[k]):
                    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path, into: dict[str, ParamStore] | None = None) -> tuple[dict[str, ParamStore], dict]:
    """Read a checkpoint; with ``into``, verify manifests and load in place."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path}: bad magic header")
    off = len(_MAGIC)
    version, hlen = struct.unpack_from("<II", blob, off)
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off += 8
    try:
        manifest = json.loads(blob[off : off + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from None
    off += hlen

    if into is not None:
        diff = _manifest_diff(manifest["stores"], into)
        if diff:
            raise CheckpointError(f"{path}: manifest mismatch:\n" + "\n".join(diff))

    expected = sum(
        3 * int(np.prod(shape)) for s in manifest["stores"].values() for _, shape in s["params"]
    )
    if len(blob) - off != 8 * expected:
        raise CheckpointError(f"{path}: payload holds {len(blob) - off} bytes, manifest needs {8 * expected}")

    out = {}
    for sname, sdesc in manifest["stores"].items():
        store = into[sname] if into is not None else ParamStore()
        for name, shape in sdesc["params"]:
            n = int(np.prod(shape))
            arrs = []
            for _ in range(3):
                arrs.append(np.frombuffer(blob, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape))
                off += 8 * n
            if into is None:
                store.add(name, arrs[0])
            else:
                store.params[name].data = arrs[0]
                store.params[name].grad = None
            store.m[name], store.v[name] = arrs[1], arrs[2]
        store.step = int(sdesc["step"])
        out[sname] = store
    return out, manifest["meta"]


def _manifest_diff(found: dict, stores: dict[str, ParamStore]) -> list[str]:
    diff = []
    for sname in sorted(set(found) | set(stores)):
        if sname not in found:
            diff.append(f"- store {sname}: missing from file")
            continue
        if sname not in stores:
            diff.append(f"+ store {sname}: unexpected in file")
            continue
        have = {k: tuple(shape) for k, shape in found[sname]["params"]}
        want = dict(stores[sname].manifest())
        for k in sorted(set(have) | set(want)):
            if k not in have:
                diff.append(f"- {sname}.{k} {want[k]}: missing from file")
            elif k not in want:
                diff.append(f"+ {sname}.{k} {have[k]}: unexpected in file")
            elif have[k] != want[k]:
                diff.append(f"~ {sname}.{k}: file {have[k]} vs expected {want[k]}")
    return diff


# ------------------------------------------------------- finite differences


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return g


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Iterable[Tensor],
    h: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Max elementwise relative error between tape and central-difference gradients.

    The error of one entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with trace():
        out = fn(*inputs)
        backward(out)
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_grad(lambda: fn(*inputs).item(), t.data, h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst
