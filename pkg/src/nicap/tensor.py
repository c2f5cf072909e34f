"""Dense float64 tensors with reverse-mode gradients.

Implements exactly the layer set the caption/classifier model needs
(affine maps, gate nonlinearities, softmax cross-entropy, inverted
dropout), a finite-difference gradient checker, a deterministic random
stream, and the little-endian tensor serialization used by checkpoints.

Forward/backward over one computation graph is single-threaded; distinct
graphs may run on distinct threads. An Rng must never be shared between
threads.
"""

from __future__ import annotations

import struct

import numpy as np


class Tensor:
    """A node in the computation graph wrapping a float64 ndarray."""

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return self.data.item()

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep seeding d(self)/d(self) = 1.

        Only valid on scalar outputs (losses). Gradients accumulate into
        ``.grad`` of every reachable node; parameters keep theirs until
        :func:`zero_grads`.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        self._accumulate(np.ones_like(self.data))
        for node in reversed(_topo_order(self)):
            if node._backward is not None:
                node._backward()

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


class Parameter(Tensor):
    """Named trainable tensor; ``grad`` is allocated eagerly."""

    def __init__(self, name: str, data):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _topo_order(root: Tensor) -> list[Tensor]:
    # iterative DFS: recursion depth would scale with unrolled sequence length
    order: list[Tensor] = []
    visited = {id(root)}
    stack: list[tuple[Tensor, object]] = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        pushed = False
        for p in parents:
            if id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                pushed = True
                break
        if not pushed:
            order.append(node)
            stack.pop()
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` back down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)
    out._parents = (a, b)

    def backward():
        a._accumulate(_unbroadcast(out.grad, a.data.shape))
        b._accumulate(_unbroadcast(out.grad, b.data.shape))

    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)
    out._parents = (a, b)

    def backward():
        a._accumulate(_unbroadcast(out.grad * b.data, a.data.shape))
        b._accumulate(_unbroadcast(out.grad * a.data, b.data.shape))

    out._backward = backward
    return out


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a python constant (no gradient flows into the constant)."""
    out = Tensor(x.data * factor)
    out._parents = (x,)

    def backward():
        x._accumulate(out.grad * factor)

    out._backward = backward
    return out


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} x {b.data.shape}")
    out = Tensor(a.data @ b.data)
    out._parents = (a, b)

    def backward():
        a._accumulate(out.grad @ b.data.T)
        b._accumulate(a.data.T @ out.grad)

    out._backward = backward
    return out


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    # piecewise form never exponentiates a large positive argument
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_values(x.data)
    out = Tensor(s)
    out._parents = (x,)

    def backward():
        x._accumulate(out.grad * s * (1.0 - s))

    out._backward = backward
    return out


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = Tensor(t)
    out._parents = (x,)

    def backward():
        x._accumulate(out.grad * (1.0 - t * t))

    out._backward = backward
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    out._parents = (x,)

    def backward():
        x._accumulate(out.grad * (x.data > 0.0))

    out._backward = backward
    return out


def log_softmax_values(logits: np.ndarray) -> np.ndarray:
    """Numerically stable log-softmax of a 1-D logit vector (forward only).

    The decoding paths and the cross-entropy loss share this exact
    computation so that beam scores and sequence losses agree bitwise.
    """
    m = logits.max()
    return logits - (m + np.log(np.exp(logits - m).sum()))


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis, computed with max-subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)
    out._parents = (x,)

    def backward():
        inner = (out.grad * s).sum(axis=-1, keepdims=True)
        x._accumulate(s * (out.grad - inner))

    out._backward = backward
    return out


def cross_entropy_from_logits(logits: Tensor, target_index: int) -> Tensor:
    """Negative log-probability of ``target_index`` under softmax(logits).

    Fused log-softmax keeps the loss finite for any finite logits. The
    forward probabilities are exposed on the result as ``.probs``.
    """
    flat = logits.data.reshape(-1)
    if not 0 <= target_index < flat.size:
        raise ValueError(f"target index {target_index} outside logits of size {flat.size}")
    m = flat.max()
    e = np.exp(flat - m)
    s = e.sum()
    probs = e / s
    if flat[target_index] == m:
        # log1p over the non-target mass keeps the loss exact (and
        # positive) at extreme margins, where log(sum) would round to 0
        loss = np.log1p(np.delete(e, target_index).sum())
    else:
        loss = (m - flat[target_index]) + np.log(s)
    out = Tensor(loss)
    out._parents = (logits,)
    out.probs = probs

    def backward():
        g = probs.copy()
        g[target_index] -= 1.0
        logits._accumulate(float(out.grad) * g.reshape(logits.data.shape))

    out._backward = backward
    return out


def binary_cross_entropy_from_logit(logit: Tensor, target: float) -> Tensor:
    """BCE of sigmoid(logit) against a {0, 1} target, in stable form."""
    if target not in (0.0, 1.0):
        raise ValueError("target must be 0 or 1")
    z = logit.data.item()
    loss = max(z, 0.0) - z * target + np.log1p(np.exp(-abs(z)))
    out = Tensor(loss)
    out._parents = (logit,)

    def backward():
        g = _sigmoid_values(np.array([z]))[0] - target
        logit._accumulate(float(out.grad) * g * np.ones_like(logit.data))

    out._backward = backward
    return out


def embedding_row(table: Tensor, index: int) -> Tensor:
    """Row ``index`` of a 2-D table as a (1, D) tensor."""
    out = Tensor(table.data[index : index + 1].copy())
    out._parents = (table,)

    def backward():
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        table.grad[index] += out.grad[0]

    out._backward = backward
    return out


def dropout_mask(shape, rate: float, rng: "Rng") -> Tensor:
    """Inverted-dropout mask: entries are 0 with probability ``rate``,
    otherwise 1/(1-rate), so the expected mask entry is always 1."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return Tensor(np.ones(shape))
    keep = rng.random(shape) >= rate
    return Tensor(keep / (1.0 - rate))


class Rng:
    """Deterministic random stream (PCG64 behind numpy's Generator).

    The same seed and child-key path produce the same stream on every
    platform. ``child(k)`` derives an independent stream as a pure function
    of (seed, key path): no draws on the parent affect it, which is what
    makes resumed training replays exact.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._key = tuple(int(k) for k in _key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self._key)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def child(self, *key: int) -> "Rng":
        return Rng(self.seed, self._key + tuple(key))

    def random(self, shape=None):
        return self._gen.random(shape)

    def uniform(self, low: float, high: float, shape=None):
        return self._gen.uniform(low, high, shape)

    def normal(self, loc: float = 0.0, scale: float = 1.0, shape=None):
        return self._gen.normal(loc, scale, shape)

    def integers(self, low: int, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int):
        return self._gen.permutation(n)


def zero_grads(params) -> None:
    for p in params:
        p.grad[...] = 0.0


def sgd_step(params, learning_rate: float) -> None:
    """value <- value - lr * grad, elementwise, in place."""
    for p in params:
        p.data -= learning_rate * p.grad


def scale_grads(params, factor: float) -> None:
    for p in params:
        p.grad *= factor


def clip_gradients(params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the pre-clip norm.
    """
    total = float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params)))
    if max_norm > 0 and total > max_norm:
        scale_grads(params, max_norm / total)
    return total


def gradcheck(loss_fn, params, epsilon: float = 1e-5, samples: int = 200, rng: Rng | None = None) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Samples up to ``samples`` coordinates from every parameter. ``loss_fn``
    must be deterministic (run with dropout disabled); it is re-evaluated
    with single coordinates nudged by +/- ``epsilon``. The error for one
    coordinate is |a - n| / max(|a|, |n|, 1e-8).
    """
    rng = rng or Rng(0)
    zero_grads(params)
    loss_fn().backward()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        n = p.data.size
        coords = np.arange(n) if n <= samples else rng.permutation(n)[:samples]
        for flat in coords:
            orig = p.data.flat[flat]
            p.data.flat[flat] = orig + epsilon
            f_plus = float(loss_fn().data)
            p.data.flat[flat] = orig - epsilon
            f_minus = float(loss_fn().data)
            p.data.flat[flat] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = float(ga.flat[flat])
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    return worst


def write_tensor(fh, name: str, values: np.ndarray) -> None:
    """Serialize one named tensor: u16 name length + utf-8 name, u32 rank,
    u32 dims, then float64 values, all little-endian, row-major."""
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    arr = np.ascontiguousarray(values, dtype="<f8")
    fh.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("truncated tensor data")
    return buf


def read_tensor(fh) -> tuple[str, np.ndarray]:
    """Inverse of :func:`write_tensor`. Raises ValueError on truncation."""
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, name_len).decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").reshape(shape)
    return name, data.astype(np.float64)
