"""Dense tensors with tape-based reverse-mode differentiation.

Everything the networks need lives here: a thin :class:`Tensor` wrapper over
numpy arrays, a :class:`Tape` that records differentiable operations while
active, segment reductions over graph nodes, multilayer perceptrons, a named
parameter store with a small binary checkpoint format, and a central
finite-difference oracle used to verify gradients at 64-bit.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

LEAKY_SLOPE = 0.01
PARAM_FORMAT_VERSION = 1

_ACTIVE_TAPES: list["Tape"] = []
_CANONICAL = [False]


@contextmanager
def canonical_order(enabled: bool = True):
    """Make every output row of :func:`matmul` independent of the other rows.

    BLAS picks kernels by block position, so a row's result can change in the
    last bit when rows are shuffled.  Inside this context the product is
    accumulated one inner index at a time (slow; meant for exactness tests).
    """
    prev = _CANONICAL[0]
    _CANONICAL[0] = prev or enabled
    try:
        yield
    finally:
        _CANONICAL[0] = prev


def _row_exact_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.result_type(a, b))
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k]
    return out


class Tensor:
    """An n-dimensional array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of executed differentiable operations.

    Use as a context manager; every operation on tensors that require a
    gradient is appended while the tape is active.
    """

    def __init__(self):
        self.records: list[tuple[str, tuple[Tensor, ...], Tensor, Callable]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward_fn) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs and _ACTIVE_TAPES:
        _ACTIVE_TAPES[-1].records.append((op, inputs, out, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), a.data + b.data, back)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _record("sub", (a, b), a.data - b.data, back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", (a, b), a.data * b.data, back)


def square(a: Tensor) -> Tensor:
    return _record("square", (a,), a.data * a.data, lambda g: (2.0 * a.data * g,))


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    mask = a.data > 0
    scale = np.where(mask, 1.0, slope).astype(a.dtype)
    return _record("leaky_relu", (a,), a.data * scale, lambda g: (g * scale,))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _record("reciprocal", (a,), out, lambda g: (-g * out * out,))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------- shape / linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def back(g):
        return g @ b.data.T, a.data.T @ g

    out = _row_exact_matmul(a.data, b.data) if _CANONICAL[0] else a.data @ b.data
    return _record("matmul", (a, b), out, back)


def transpose(a: Tensor) -> Tensor:
    return _record("transpose", (a,), a.data.T, lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", tensors, np.concatenate([t.data for t in tensors], axis=axis), back)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.int64)

    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _record("gather_rows", (x,), x.data[index], back)


def total(a: Tensor) -> Tensor:
    """Sum of all entries as a scalar tensor."""
    shape = a.shape
    return _record("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = a.data.size
        shape = a.shape
        return _record(
            "mean", (a,), np.asarray(a.data.mean()), lambda g: (np.full(shape, g / n, dtype=a.dtype),)
        )
    n = a.shape[axis]

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).copy(),)

    return _record("mean_axis", (a,), a.data.mean(axis=axis), back)


def max_axis0(a: Tensor) -> Tensor:
    """Element-wise maximum over the leading axis (first occurrence wins ties)."""
    arg = np.argmax(a.data, axis=0)
    out = np.take_along_axis(a.data, arg[None], axis=0)[0]

    def back(g):
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, arg[None], g[None], axis=0)
        return (grad,)

    return _record("max_axis0", (a,), out, back)


# ---------------------------------------------------------------- segment reductions


def _check_segments(segment_of: np.ndarray, n_segments: int, n_rows: int) -> np.ndarray:
    seg = np.asarray(segment_of, dtype=np.int64)
    if seg.shape != (n_rows,):
        raise DimensionError(f"segment index shape {seg.shape} does not match {n_rows} rows")
    if seg.size and (seg.min() < 0 or seg.max() >= n_segments):
        raise IndexError(f"segment index out of range [0, {n_segments})")
    return seg


def _ordered_segment_sum(values: np.ndarray, seg: np.ndarray, n_segments: int) -> np.ndarray:
    # Canonical order (segment, then value per column) makes the result
    # independent of row order, bit for bit.
    out = np.zeros((n_segments,) + values.shape[1:], dtype=values.dtype)
    if values.shape[0] == 0:
        return out
    flat = values.reshape(values.shape[0], -1)
    for j in range(flat.shape[1]):
        order = np.lexsort((flat[:, j], seg))
        col = out.reshape(n_segments, -1)
        np.add.at(col[:, j], seg[order], flat[order, j])
    return out


def segment_reduce(
    values: Tensor,
    segment_of: np.ndarray,
    n_segments: int,
    mode: str = "sum",
    ordered: bool = False,
) -> Tensor:
    """Reduce the rows of ``values`` that share a segment index.

    Empty segments give 0 for every mode. With ``ordered=True`` the sum is
    accumulated in a canonical order so that shuffling rows (together with
    their segment indices) leaves the result unchanged bit for bit.
    """
    values = _as_tensor(values)
    seg = _check_segments(segment_of, n_segments, values.shape[0])
    counts = np.bincount(seg, minlength=n_segments).astype(values.dtype)
    count_shape = (n_segments,) + (1,) * (values.data.ndim - 1)

    if mode in ("sum", "mean"):
        if ordered:
            out = _ordered_segment_sum(values.data, seg, n_segments)
        else:
            out = np.zeros((n_segments,) + values.shape[1:], dtype=values.dtype)
            np.add.at(out, seg, values.data)
        if mode == "mean":
            denom = np.maximum(counts, 1).reshape(count_shape)
            out = out / denom

            def back(g):
                return ((g / denom)[seg],)
        else:

            def back(g):
                return (g[seg],)

        return _record("segment_" + mode, (values,), out, back)

    if mode == "max":
        out = np.full((n_segments,) + values.shape[1:], -np.inf, dtype=values.dtype)
        np.maximum.at(out, seg, values.data)
        empty = counts == 0
        out[empty] = 0.0
        # first row attaining the max receives the gradient
        hit = values.data == out[seg]
        owner = np.full(out.shape, values.shape[0], dtype=np.int64)
        rows = np.broadcast_to(
            np.arange(values.shape[0]).reshape((-1,) + (1,) * (values.data.ndim - 1)), values.shape
        )
        np.minimum.at(owner, seg, np.where(hit, rows, values.shape[0]))

        def back(g):
            grad = np.zeros_like(values.data)
            winner = owner[seg] == rows
            grad[winner] = g[seg][winner]
            return (grad,)

        return _record("segment_max", (values,), out, back)

    raise ContractError(f"unknown segment reduction mode {mode!r}")


def segment_indicator(segment_of: np.ndarray, n_segments: int, dtype=np.float64) -> np.ndarray:
    """Dense [n_segments x n_rows] 0/1 matrix; ``indicator @ values`` is the segment sum."""
    seg = np.asarray(segment_of, dtype=np.int64)
    ind = np.zeros((n_segments, seg.size), dtype=dtype)
    ind[seg, np.arange(seg.size)] = 1.0
    return ind


# ---------------------------------------------------------------- interpolation


def hermite_lookup(values: np.ndarray, slopes: np.ndarray, spacing: float, s: Tensor) -> Tensor:
    """Cubic Hermite interpolation of tabulated columns at positions ``s``.

    ``values``/``slopes`` are [G x C] samples of functions and their
    derivatives on the uniform grid ``k * spacing``. Returns [len(s) x C]; the
    gradient with respect to ``s`` is the exact derivative of the interpolant.
    """
    s = _as_tensor(s)
    g_max = (values.shape[0] - 1) * spacing
    pos = s.data / spacing
    if np.any(pos < -1e-9) or np.any(s.data > g_max * (1 + 1e-9)):
        raise ContractError(f"lookup position outside table range [0, {g_max}]")
    idx = np.clip(np.floor(pos).astype(np.int64), 0, values.shape[0] - 2)
    u = np.clip(pos - idx, 0.0, 1.0)[:, None]
    u2, u3 = u * u, u * u * u
    v0, v1 = values[idx], values[idx + 1]
    d0, d1 = slopes[idx] * spacing, slopes[idx + 1] * spacing
    out = (2 * u3 - 3 * u2 + 1) * v0 + (u3 - 2 * u2 + u) * d0 + (-2 * u3 + 3 * u2) * v1 + (u3 - u2) * d1
    deriv = ((6 * u2 - 6 * u) * v0 + (3 * u2 - 4 * u + 1) * d0 + (6 * u - 6 * u2) * v1 + (3 * u2 - 2 * u) * d1) / spacing

    def back(g):
        return ((g * deriv).sum(axis=1),)

    return _record("hermite_lookup", (s,), out.astype(values.dtype, copy=False), back)


# ---------------------------------------------------------------- backward pass


def backward(tape: Tape, loss: Tensor, params: "ParamStore | None" = None) -> dict[int, np.ndarray]:
    """Propagate d(loss) back through ``tape`` in reverse execution order.

    Gradients of parameters in ``params`` are added to their slots. Returns
    the gradient of every tensor reached, keyed by ``id``. The tape is cleared.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for _, inputs, out, fn in reversed(tape.records):
        g = grads.get(id(out))
        if g is None:
            continue
        for inp, gi in zip(inputs, fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    if params is not None:
        for name, p in params.items():
            g = grads.get(id(p))
            if g is not None:
                params.grads[name] += g.astype(params.grads[name].dtype, copy=False)
    tape.clear()
    return grads


# ---------------------------------------------------------------- parameters


class ParamStore:
    """Named trainable tensors with matching gradient slots."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        self.grads[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise ConfigError(f"missing parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def n_values(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype)
        for name, p in self._params.items():
            out.add(name, p.data)
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, value in state.items():
            p = self[name]
            if p.shape != value.shape:
                raise DimensionError(f"{name}: stored shape {value.shape} != {p.shape}")
            p.data[...] = value

    def save(self, path: str | Path) -> None:
        parts = [struct.pack("<II", PARAM_FORMAT_VERSION, len(self._params))]
        for name, p in self._params.items():
            raw = name.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)) + raw)
            parts.append(struct.pack(f"<I{p.data.ndim}I", p.data.ndim, *p.shape))
            parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        Path(path).write_bytes(b"".join(parts))

    @classmethod
    def load(cls, path: str | Path, dtype=np.float32) -> "ParamStore":
        buf = Path(path).read_bytes()
        version, count = struct.unpack_from("<II", buf, 0)
        if version != PARAM_FORMAT_VERSION:
            raise ConfigError(f"{path}: unsupported parameter format version {version}")
        off = 8
        store = cls(dtype)
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
            store.add(name, arr)
        return store


def init_linear(store: ParamStore, name: str, fan_in: int, fan_out: int, rng: np.random.Generator, scale: float = 1.0):
    """Uniform fan-in initialisation of ``name.w`` [fan_in x fan_out] and zero ``name.b``."""
    bound = scale / np.sqrt(fan_in)
    store.add(f"{name}.w", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    store.add(f"{name}.b", np.zeros(fan_out))


def init_mlp(store: ParamStore, prefix: str, widths: Sequence[int], rng: np.random.Generator, last_scale: float = 1.0):
    """Create the layers of an MLP with layer widths ``widths`` (input first)."""
    n = len(widths) - 1
    for i in range(n):
        init_linear(store, f"{prefix}.l{i}", widths[i], widths[i + 1], rng, last_scale if i == n - 1 else 1.0)


def linear(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return add(matmul(x, store[f"{name}.w"]), store[f"{name}.b"])


def mlp_forward(store: ParamStore, prefix: str, x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    """Affine + leaky-ReLU per layer, linear final layer."""
    n = 0
    while f"{prefix}.l{n}.w" in store:
        n += 1
    if n == 0:
        raise ConfigError(f"no layers found for MLP {prefix!r}")
    if x.shape[-1] != store[f"{prefix}.l0.w"].shape[0]:
        raise ConfigError(f"MLP {prefix!r} expects width {store[f'{prefix}.l0.w'].shape[0]}, got {x.shape[-1]}")
    for i in range(n):
        x = linear(store, f"{prefix}.l{i}", x)
        if i < n - 1:
            x = leaky_relu(x, slope)
    return x


# ---------------------------------------------------------------- finite differences


def finite_difference_grads(
    loss_fn: Callable[[], float], store: ParamStore, h: float = 1e-5, names: Iterable[str] | None = None
) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``loss_fn`` with respect to parameters in ``store``."""
    out = {}
    for name in names if names is not None else store.names():
        p = store[name].data
        grad = np.zeros_like(p)
        flat, gflat = p.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        out[name] = grad
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Largest element-wise ``|a-b| / max(|a|, |b|, floor)``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
