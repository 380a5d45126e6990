"""Dense tensors with reverse-mode differentiation on an explicit tape.

The operation set is deliberately small: exactly what the decoder stack
needs. Recording is opt-in via ``with Tape() as tape:``; outside a tape
context every op is a plain forward computation, which is the inference
path. Backward walks the tape in exact reverse recording order and
accumulates gradients additively on every tensor that requires them.

Float64 is the default dtype and is mandatory for gradient checks; float32
is used in benchmark mode. Ops never mix dtypes.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Iterable

import numpy as np

from . import rng

LAYER_NORM_EPS = 1e-5

# Finite stand-in for -inf in masked softmax / densified heatmaps. Large
# enough that exp(x - max) underflows to 0, small enough to stay finite in
# float32.
NEG_FILL = -1e30

_CHECKPOINT_MAGIC = b"SPOTCKPT"


class AutodiffError(Exception):
    pass


class NonFiniteError(AutodiffError):
    """An op produced NaN or Inf."""


class CheckpointError(Exception):
    """Malformed checkpoint file or shape mismatch on load."""


class Tensor:
    """A dense real-valued array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


_tls = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_tls, "tape", None)


class Tape:
    """Ordered record of differentiable ops for one forward pass.

    A tape is single-threaded and single-use: ``backward`` may run once,
    after which the tape must be discarded (or a fresh one opened).
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise AutodiffError("a Tape is already active on this thread")
        _tls.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tls.tape = None

    def record(self, out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        self._nodes.append((out, backward))

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every requires_grad tensor reachable from loss."""
        if self._consumed:
            raise AutodiffError("backward already ran on this tape")
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise AutodiffError(f"loss must be scalar, got shape {loss.shape}")
        if not self._nodes:
            raise AutodiffError("tape is empty")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for out, backward in reversed(self._nodes):
            if out.grad is None:
                continue  # branch not reachable from the loss
            backward(out.grad)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _same_dtype(op: str, *tensors: Tensor):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise AutodiffError(f"{op}: mixed dtypes {dt} and {t.dtype}")
    return dt


def _finish(
    op: str,
    out_data: np.ndarray,
    inputs: Iterable[Tensor],
    backward: Callable[[np.ndarray], None],
) -> Tensor:
    """Wrap a forward result; record the backward closure if a tape is live."""
    _check_finite(out_data, op)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = _active_tape()
    if tape is not None and needs:
        tape.record(out, backward)
    return out


def custom_op(
    name: str,
    out_data: np.ndarray,
    inputs: Iterable[Tensor],
    backward: Callable[[np.ndarray], None],
) -> Tensor:
    """Public hook for fused ops with hand-written backwards.

    ``backward(g)`` receives the output gradient and must accumulate into
    each input's ``.grad`` (use :func:`accumulate_grad`).
    """
    return _finish(name, out_data, list(inputs), backward)


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    _accum(t, g)


# ---------------------------------------------------------------------------
# core ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("matmul", a, b)
    if a.data.shape[-1] != b.data.shape[0]:
        raise AutodiffError(f"matmul: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _finish("matmul", out, (a, b), backward)


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    """a @ b.T without a transpose node."""
    _same_dtype("matmul_nt", a, b)
    if a.data.shape[-1] != b.data.shape[-1]:
        raise AutodiffError(f"matmul_nt: {a.shape} @ {b.shape}.T")
    out = a.data @ b.data.T

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data)
        if b.requires_grad:
            _accum(b, g.T @ a.data)

    return _finish("matmul_nt", out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("add", a, b)
    if a.shape != b.shape:
        raise AutodiffError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return _finish("add", out, (a, b), backward)


def mul_elementwise(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise product; ``b`` may also be a scalar (0-d / size-1) tensor."""
    _same_dtype("mul", a, b)
    if a.shape != b.shape and b.data.size != 1:
        raise AutodiffError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, (g * b.data).reshape(a.shape))
        if b.requires_grad:
            gb = g * a.data
            if b.data.size == 1 and b.shape != a.shape:
                gb = np.sum(gb).reshape(b.shape)
            _accum(b, gb)

    return _finish("mul", out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * c

    def backward(g):
        if a.requires_grad:
            _accum(a, g * c)

    return _finish("scale", out, (a,), backward)


def add_const(a: Tensor, arr: np.ndarray) -> Tensor:
    """Add a non-differentiable constant (e.g. an attention mask bias)."""
    out = a.data + np.asarray(arr, dtype=a.dtype)

    def backward(g):
        if a.requires_grad:
            _accum(a, g)

    return _finish("add_const", out, (a,), backward)


def concat_rows(tensors: list[Tensor]) -> Tensor:
    _same_dtype("concat_rows", *tensors)
    out = np.concatenate([t.data for t in tensors], axis=0)
    sizes = [t.data.shape[0] for t in tensors]

    def backward(g):
        off = 0
        for t, n in zip(tensors, sizes):
            if t.requires_grad:
                _accum(t, g[off : off + n])
            off += n

    return _finish("concat_rows", out, tensors, backward)


def concat_cols(tensors: list[Tensor]) -> Tensor:
    _same_dtype("concat_cols", *tensors)
    out = np.concatenate([t.data for t in tensors], axis=1)
    sizes = [t.data.shape[1] for t in tensors]

    def backward(g):
        off = 0
        for t, n in zip(tensors, sizes):
            if t.requires_grad:
                _accum(t, g[:, off : off + n])
            off += n

    return _finish("concat_cols", out, tensors, backward)


def gather_rows(a: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    out = a.data[idx]

    def backward(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, idx, g)

    return _finish("gather_rows", out, (a,), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    out = a.data[:, start:stop].copy()

    def backward(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[:, start:stop] += g

    return _finish("slice_cols", out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * (a.data > 0))

    return _finish("relu", out, (a,), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with w of shape (in, out) and b of shape (out,)."""
    _same_dtype("linear", x, w, b)
    if x.data.shape[-1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[0]:
        raise AutodiffError(f"linear: x{x.shape} w{w.shape} b{b.shape}")
    out = x.data @ w.data + b.data

    def backward(g):
        if x.requires_grad:
            _accum(x, g @ w.data.T)
        if w.requires_grad:
            _accum(w, x.data.T @ g)
        if b.requires_grad:
            _accum(b, g.sum(axis=tuple(range(g.ndim - 1))))

    return _finish("linear", out, (x, w, b), backward)


def softmax_lastdim(a: Tensor) -> Tensor:
    out = softmax_rows(a.data)

    def backward(g):
        if a.requires_grad:
            inner = np.sum(g * out, axis=-1, keepdims=True)
            _accum(a, (g - inner) * out)

    return _finish("softmax_lastdim", out, (a,), backward)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis (plain ndarray helper)."""
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Layer normalization over the last dimension, eps=1e-5."""
    _same_dtype("layer_norm", x, gain, bias)
    n = x.data.shape[-1]
    mu = np.mean(x.data, axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            _accum(gain, np.sum(g * xhat, axis=tuple(range(g.ndim - 1))))
        if bias.requires_grad:
            _accum(bias, np.sum(g, axis=tuple(range(g.ndim - 1))))
        if x.requires_grad:
            gx = g * gain.data
            # d/dx of (x - mu) * inv_std with mu, var functions of x
            s1 = np.sum(gx, axis=-1, keepdims=True)
            s2 = np.sum(gx * xhat, axis=-1, keepdims=True)
            _accum(x, inv_std * (gx - s1 / n - xhat * s2 / n))

    return _finish("layer_norm", out, (x, gain, bias), backward)


def l2_normalize_lastdim(a: Tensor) -> Tensor:
    out, norms = l2_normalize_rows(a.data)

    def backward(g):
        if a.requires_grad:
            safe = np.where(norms > 0.0, norms, 1.0)
            inner = np.sum(g * out, axis=-1, keepdims=True)
            ga = (g - out * inner) / safe
            ga = np.where(norms > 0.0, ga, 0.0)
            _accum(a, ga)

    return _finish("l2_normalize", out, (a,), backward)


def l2_normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise unit-norm; all-zero rows stay zero. Returns (normed, norms)."""
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)
    return x / safe, norms


def dropout(a: Tensor, p: float, train: bool, seed: int, step: int, site: int) -> Tensor:
    """Inverted dropout with a counter-based mask.

    The mask depends only on (seed, step, site), never on draw order, so
    training runs replay exactly. ``train=False`` or ``p == 0`` is the
    identity.
    """
    if not 0.0 <= p < 1.0:
        raise AutodiffError(f"dropout: p={p} outside [0, 1)")
    if not train or p == 0.0:
        out = a.data.copy()

        def backward_id(g):
            if a.requires_grad:
                _accum(a, g)

        return _finish("dropout", out, (a,), backward_id)

    gen = rng.counter_stream(seed, "dropout", (step, site))
    keep = (gen.random(a.shape) >= p).astype(a.dtype)
    factor = 1.0 / (1.0 - p)
    out = a.data * keep * factor

    def backward(g):
        if a.requires_grad:
            _accum(a, g * keep * factor)

    return _finish("dropout", out, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(np.sum(a.data))

    def backward(g):
        if a.requires_grad:
            _accum(a, np.broadcast_to(g, a.shape).astype(a.dtype))

    return _finish("sum_all", out, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(np.sum(a.data) / n)

    def backward(g):
        if a.requires_grad:
            _accum(a, np.broadcast_to(g / n, a.shape).astype(a.dtype))

    return _finish("mean_all", out, (a,), backward)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


def _require_grads(params: dict[str, Tensor]) -> None:
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise AutodiffError(f"missing gradients for: {', '.join(sorted(missing))}")


def sgd_step(params: dict[str, Tensor], lr: float) -> None:
    _require_grads(params)
    for p in params.values():
        p.data = p.data - lr * p.grad


class AdamW:
    """Decoupled weight decay Adam. State is keyed by parameter name."""

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor]) -> None:
        _require_grads(params)
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, p in params.items():
            g = p.grad
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self._v[name] = np.zeros_like(p.data)
            v = self._v[name]
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self._m[name] = m
            self._v[name] = v
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - self.lr * update - self.lr * self.weight_decay * p.data


def adamw_step(
    opt: AdamW | None,
    params: dict[str, Tensor],
    lr: float,
    betas=(0.9, 0.999),
    weight_decay: float = 0.01,
) -> AdamW:
    """Functional wrapper: creates state on first call, returns it for reuse."""
    if opt is None:
        opt = AdamW(lr=lr, betas=betas, weight_decay=weight_decay)
    opt.lr = lr
    opt.step(params)
    return opt


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: dict[str, Tensor]) -> None:
    """Binary checkpoint: magic, then per named parameter the UTF-8 name,
    rank, shape and float32 data, all little-endian."""
    with open(path, "wb") as f:
        f.write(_CHECKPOINT_MAGIC)
        for name in sorted(params):
            data = params[name].data.astype("<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes(order="C"))


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back as name -> float32 array."""
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        magic = f.read(len(_CHECKPOINT_MAGIC))
        if magic != _CHECKPOINT_MAGIC:
            raise CheckpointError("malformed header: bad magic")
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise CheckpointError("truncated checkpoint while reading name length")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(f, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "shape"))
            count = int(np.prod(shape)) if ndim else 1
            raw = _read_exact(f, 4 * count, f"data of {name}")
            out[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return out


def load_into(params: dict[str, Tensor], path) -> None:
    """Load a checkpoint into an existing parameter set, validating shapes."""
    loaded = load_checkpoint(path)
    missing = set(params) - set(loaded)
    extra = set(loaded) - set(params)
    if missing or extra:
        raise CheckpointError(
            f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}"
        )
    for name, p in params.items():
        if loaded[name].shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: file {loaded[name].shape}, model {p.shape}"
            )
        p.data = loaded[name].astype(p.dtype)
