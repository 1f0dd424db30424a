"""Reverse-mode automatic differentiation on numpy arrays, plus Adam.

Define-by-run: every operation on :class:`Tensor` records a backward closure,
and :func:`backward` replays the recorded tape in reverse topological order.
The engine is deliberately small -- double precision only, 2-D matrices and
scalars, and no broadcasting beyond adding a bias row vector to every row of
a matrix.  Any other shape mismatch is a hard error carrying both shapes.
"""
from __future__ import annotations

import struct
import warnings
from contextlib import contextmanager
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"ORDL"
CHECKPOINT_VERSION = 1
LOG_FLOOR = 1e-300

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (pure forward evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    pass


class Tensor:
    """A float64 array with an optional gradient and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar for the common cases; the named functions below are the
    # real surface.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    def __rmul__(self, other):
        return mul_scalar(self, float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


class Tape:
    """Reverse-topological record of the operations reaching a root tensor."""

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.nodes = order  # topological: parents before consumers

    def backward(self) -> None:
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    Tape(loss).backward()


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# Primitive operations.

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also accepts a (k,) bias added to every row of (n,k)."""
    if a.shape == b.shape:
        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(g)
        return _make(a.data + b.data, (a, b), bw)
    if a.data.ndim == 2 and _is_row_of(b, a):
        brow = b.data.reshape(1, -1)

        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(g.sum(axis=0).reshape(b.shape))
        return _make(a.data + brow, (a, b), bw)
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} are not compatible")


def _is_row_of(b: Tensor, a: Tensor) -> bool:
    return b.shape == (a.shape[1],) or b.shape == (1, a.shape[1])


def mul_rowvec(a: Tensor, b: Tensor) -> Tensor:
    """Scale every row of a matrix elementwise by a row vector."""
    if a.data.ndim != 2 or not _is_row_of(b, a):
        raise ShapeError(f"mul_rowvec: shapes {a.shape} and {b.shape} are not compatible")
    brow = b.data.reshape(1, -1)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * brow)
        if b.requires_grad:
            b.accumulate_grad((g * a.data).sum(axis=0).reshape(b.shape))
    return _make(a.data * brow, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-g)
    return _make(a.data - b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(-g)
    return _make(-a.data, (a,), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)
    return _make(a.data * b.data, (a, b), bw)


def mul_scalar(a: Tensor, c: float) -> Tensor:
    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * c)
    return _make(a.data * c, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not chain")

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)
    return _make(a.data @ b.data, (a, b), bw)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * (1.0 - out_data**2))
    return _make(out_data, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    out_data = 0.5 * (1.0 + np.tanh(0.5 * a.data))  # overflow-safe

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * out_data * (1.0 - out_data))
    return _make(out_data, (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * mask)
    return _make(np.where(mask, a.data, 0.0), (a,), bw)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * out_data)
    return _make(out_data, (a,), bw)


def log(a: Tensor) -> Tensor:
    clamped = np.maximum(a.data, LOG_FLOOR)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g / clamped)
    return _make(np.log(clamped), (a,), bw)


def softmax_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax; entries where ``mask`` is True get probability 0."""
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a matrix, got shape {a.shape}")
    if mask is None:
        shifted = a.data - a.data.max(axis=1, keepdims=True)
        expd = np.exp(shifted)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape:
            raise ShapeError(f"softmax_rows: data {a.shape} vs mask {mask.shape}")
        if np.all(mask, axis=1).any():
            raise ShapeError("softmax_rows: a row is fully masked")
        shifted = a.data - np.where(mask, -np.inf, a.data).max(axis=1, keepdims=True)
        expd = np.exp(np.where(mask, -np.inf, shifted))
    out_data = expd / expd.sum(axis=1, keepdims=True)

    def bw(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=1, keepdims=True)
            a.accumulate_grad(out_data * (g - dot))
    return _make(out_data, (a,), bw)


def log_softmax_rows(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"log_softmax_rows needs a matrix, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out_data = shifted - lse
    probs = np.exp(out_data)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g - probs * g.sum(axis=1, keepdims=True))
    return _make(out_data, (a,), bw)


def masked_log_softmax(a: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise log-softmax with ``mask==True`` entries forced to prob 0.

    Masked outputs are -inf; gradient to masked inputs is exactly zero.
    """
    mask = np.asarray(mask, dtype=bool)
    if a.data.ndim != 2 or mask.shape != a.shape:
        raise ShapeError(f"masked_log_softmax: data {a.shape} vs mask {mask.shape}")
    if np.all(mask, axis=1).any():
        raise ShapeError("masked_log_softmax: a row is fully masked")
    neg_inf = np.where(mask, -np.inf, a.data)
    rowmax = np.max(np.where(mask, -np.inf, a.data), axis=1, keepdims=True)
    expd = np.where(mask, 0.0, np.exp(neg_inf - rowmax))
    lse = np.log(expd.sum(axis=1, keepdims=True))
    out_data = np.where(mask, -np.inf, a.data - rowmax - lse)
    probs = np.where(mask, 0.0, expd / expd.sum(axis=1, keepdims=True))

    def bw(g):
        if a.requires_grad:
            g = np.where(mask, 0.0, g)
            a.accumulate_grad(g - probs * g.sum(axis=1, keepdims=True))
    return _make(out_data, (a,), bw)


def entropy_from_log_probs(log_probs: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """-sum(p * log p) over unmasked entries of a row of log-probabilities."""
    mask = np.zeros(log_probs.shape, dtype=bool) if mask is None else np.asarray(mask, bool)
    if mask.shape != log_probs.shape:
        raise ShapeError(f"entropy: data {log_probs.shape} vs mask {mask.shape}")
    lp = np.where(mask, 0.0, log_probs.data)
    p = np.where(mask, 0.0, np.exp(lp))
    out_data = np.array(-(p * lp).sum())

    def bw(g):
        if log_probs.requires_grad:
            local = np.where(mask, 0.0, -p * (lp + 1.0))
            log_probs.accumulate_grad(g * local)
    return _make(out_data, (log_probs,), bw)


def layer_norm_rows(a: Tensor, eps: float = 1e-6) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"layer_norm_rows needs a matrix, got shape {a.shape}")
    mu = a.data.mean(axis=1, keepdims=True)
    var = a.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    x_hat = (a.data - mu) * inv

    def bw(g):
        if a.requires_grad:
            gm = g.mean(axis=1, keepdims=True)
            gx = (g * x_hat).mean(axis=1, keepdims=True)
            a.accumulate_grad(inv * (g - gm - x_hat * gx))
    return _make(x_hat, (a,), bw)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    if axis not in (0, 1):
        raise ShapeError(f"concat axis must be 0 or 1, got {axis}")
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t.accumulate_grad(g[lo:hi] if axis == 0 else g[:, lo:hi])
    return _make(np.concatenate(datas, axis=axis), tuple(tensors), bw)


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= lo < hi <= a.shape[1]):
        raise ShapeError(f"slice_cols [{lo}:{hi}] invalid for shape {a.shape}")

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, lo:hi] = g
            a.accumulate_grad(full)
    return _make(a.data[:, lo:hi].copy(), (a,), bw)


def transpose(a: Tensor) -> Tensor:
    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g.T)
    return _make(a.data.T.copy(), (a,), bw)


def gather_rows(a: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=int)
    if a.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"gather_rows: data {a.shape}, indices {idx.shape}")

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a.accumulate_grad(full)
    return _make(a.data[idx].copy(), (a,), bw)


def pick(a: Tensor, i: int, j: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"pick needs a matrix, got shape {a.shape}")

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[i, j] = g
            a.accumulate_grad(full)
    return _make(np.array(a.data[i, j]), (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, float(g)))
    return _make(np.array(a.data.sum()), (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, float(g) / n))
    return _make(np.array(a.data.mean()), (a,), bw)


def mean_axis(a: Tensor, axis: int) -> Tensor:
    if a.data.ndim != 2 or axis not in (0, 1):
        raise ShapeError(f"mean_axis: shape {a.shape}, axis {axis}")
    n = a.shape[axis]

    def bw(g):
        if a.requires_grad:
            if axis == 0:
                a.accumulate_grad(np.repeat(g, n, axis=0) / n)
            else:
                a.accumulate_grad(np.repeat(g, n, axis=1) / n)
    out_data = a.data.mean(axis=axis, keepdims=True)
    return _make(out_data, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    if int(np.prod(shape)) != a.data.size and -1 not in tuple(shape):
        raise ShapeError(f"reshape: {a.shape} has {a.data.size} elements, target {shape}")

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.data.shape))
    return _make(a.data.reshape(shape).copy(), (a,), bw)


def repeat_rows(a: Tensor, k: int) -> Tensor:
    """Repeat each row k times consecutively: (n, c) -> (n*k, c)."""
    if a.data.ndim != 2 or k < 1:
        raise ShapeError(f"repeat_rows: shape {a.shape}, k={k}")
    n, c = a.shape

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(n, k, c).sum(axis=1))
    return _make(np.repeat(a.data, k, axis=0), (a,), bw)


def mean_groups(a: Tensor, k: int) -> Tensor:
    """Mean over consecutive groups of k rows: (n*k, c) -> (n, c)."""
    if a.data.ndim != 2 or k < 1 or a.shape[0] % k:
        raise ShapeError(f"mean_groups: shape {a.shape} not divisible into groups of {k}")
    n = a.shape[0] // k

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(np.repeat(g, k, axis=0) / k)
    return _make(a.data.reshape(n, k, -1).mean(axis=1), (a,), bw)


def pick_per_row(a: Tensor, cols) -> Tensor:
    """One entry per row: out[i, 0] = a[i, cols[i]]."""
    idx = np.asarray(cols, dtype=int)
    if a.data.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError(f"pick_per_row: data {a.shape}, cols {idx.shape}")
    rows = np.arange(a.shape[0])

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[rows, idx] = g[:, 0]
            a.accumulate_grad(full)
    return _make(a.data[rows, idx].reshape(-1, 1).copy(), (a,), bw)


def dot_const(a: Tensor, weights) -> Tensor:
    """Scalar sum(a * weights) against a constant array of the same shape."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != a.shape:
        raise ShapeError(f"dot_const: data {a.shape} vs weights {w.shape}")

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(float(g) * w)
    return _make(np.array((a.data * w).sum()), (a,), bw)


def weighted_sum(tensors: list[Tensor], weights) -> Tensor:
    """sum_i w_i * t_i over scalar tensors, one fused tape node."""
    w = np.asarray(weights, dtype=np.float64)
    if len(tensors) != w.size:
        raise ShapeError(f"weighted_sum: {len(tensors)} tensors vs {w.size} weights")
    for t in tensors:
        if t.data.size != 1:
            raise ShapeError(f"weighted_sum needs scalars, got shape {t.shape}")
    out_data = np.array(sum(wi * float(t.data) for wi, t in zip(w, tensors)))

    def bw(g):
        for wi, t in zip(w, tensors):
            if t.requires_grad:
                t.accumulate_grad(np.full_like(t.data, float(g) * wi))
    return _make(out_data, tuple(tensors), bw)


# ---------------------------------------------------------------------------
# Adam optimizer.

class Adam:
    """Adam with bias correction over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.skipped_updates = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> bool:
        """Apply one update; returns False (and skips) if any grad has NaN."""
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        if any(not np.all(np.isfinite(g)) for g in grads.values()):
            self.skipped_updates += 1
            warnings.warn("non-finite gradient; skipping Adam step", RuntimeWarning)
            return False
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.beta1**t
        bias2 = 1.0 - self.beta2**t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g**2
            m_hat = self.m[k] / bias1
            v_hat = self.v[k] / bias2
            self.params[k].data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return True


# ---------------------------------------------------------------------------
# Flat binary checkpoints: magic, version, then per-parameter records of
# (name length u32, name, rank u32, dims u32*, little-endian f64 payload).

def save_checkpoint(path, params: dict[str, Tensor]) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, tensor in params.items():
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(tensor.data, dtype="<f8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint (bad magic {blob[:4]!r})")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset = 8
    params: dict[str, np.ndarray] = {}
    while offset < len(blob):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", blob, offset) if rank else ()
        offset += 4 * rank
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(dims)
        offset += 8 * count
        params[name] = arr.astype(np.float64)
    return params
