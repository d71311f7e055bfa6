"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: numpy arrays hold the values, a Tape
records every differentiable operation in execution order (which is a
topological order by construction), and backward() replays the records
in reverse, accumulating gradients with a fixed, sequential reduction
order so results are bit-identical across runs.

Every forward op checks its output for NaN/Inf; a non-finite value is an
error state, not something to propagate.
"""

from __future__ import annotations

import math

import numpy as np

from .rng import Rng

# Toggle for the per-op finiteness guard. Kept on by default; training
# loops rely on it to catch divergence at the op that produced it.
finite_checks = True

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715


def _check(data: np.ndarray, op: str) -> np.ndarray:
    # A NaN/Inf anywhere poisons the sum, so one reduction replaces a
    # full isfinite scan. Magnitude bounds keep legitimate sums finite.
    if finite_checks and not math.isfinite(float(data.sum())):
        raise FloatingPointError(f"{op} produced non-finite values")
    return data


class Tensor:
    """A shaped float64 value, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; heavy lifting lives in the module functions.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("division only supported by a scalar constant")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


class Tape:
    """Ordered record of differentiable ops for one forward pass.

    Records are appended in execution order, so inputs always precede
    consumers; the reverse sweep therefore visits each node exactly once
    and every consumer's contribution lands before a producer fires.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, object]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _TAPES.pop()
        return False

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Populate .grad on every requires_grad tensor feeding loss."""
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._records):
            if out.grad is not None:
                fn(out.grad)


_TAPES: list[Tape] = []


def _wrap(data, inputs, backward_builder, op: str) -> Tensor:
    """Create the output tensor and record a backward rule if needed."""
    _check(data, op)
    if _TAPES and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        _TAPES[-1]._records.append((out, backward_builder(out)))
        return out
    return Tensor(data)


def _accum(t: Tensor, g: np.ndarray, own: bool = False) -> None:
    """Accumulate into t.grad; own=True means g is a fresh buffer we may keep."""
    if t.grad is None:
        t.grad = g if own else np.array(g)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to the given broadcast-source shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _as_operand(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def add(a, b) -> Tensor:
    a, b = _as_operand(a), _as_operand(b)
    data = a.data + b.data

    def build(out):
        def backward(g):
            if a.requires_grad:
                ga = _unbroadcast(g, a.data.shape)
                _accum(a, ga, own=ga is not g)
            if b.requires_grad:
                gb = _unbroadcast(g, b.data.shape)
                _accum(b, gb, own=gb is not g)
        return backward

    return _wrap(data, (a, b), build, "add")


def sub(a, b) -> Tensor:
    a, b = _as_operand(a), _as_operand(b)
    data = a.data - b.data

    def build(out):
        def backward(g):
            if a.requires_grad:
                ga = _unbroadcast(g, a.data.shape)
                _accum(a, ga, own=ga is not g)
            if b.requires_grad:
                _accum(b, _unbroadcast(-g, b.data.shape), own=True)
        return backward

    return _wrap(data, (a, b), build, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_operand(a), _as_operand(b)
    data = a.data * b.data

    def build(out):
        def backward(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g * b.data, a.data.shape), own=True)
            if b.requires_grad:
                _accum(b, _unbroadcast(g * a.data, b.data.shape), own=True)
        return backward

    return _wrap(data, (a, b), build, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    data = a.data * c

    def build(out):
        def backward(g):
            _accum(a, g * c, own=True)
        return backward

    return _wrap(data, (a,), build, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports 2D weights on either side and stacked
    (batched) operands with identical leading dimensions."""
    a, b = _as_operand(a), _as_operand(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ValueError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    if b.data.ndim == 2 and a.data.ndim > 2:
        # One big GEMM instead of a batched loop.
        k, n = b.data.shape
        a2 = a.data.reshape(-1, k)
        data = (a2 @ b.data).reshape(a.data.shape[:-1] + (n,))

        def build(out):
            def backward(g):
                g2 = g.reshape(-1, n)
                if a.requires_grad:
                    _accum(a, (g2 @ b.data.T).reshape(a.data.shape), own=True)
                if b.requires_grad:
                    _accum(b, a2.T @ g2, own=True)
            return backward

        return _wrap(data, (a, b), build, "matmul")

    data = a.data @ b.data

    def build(out):
        def backward(g):
            if a.requires_grad:
                ga = g @ np.swapaxes(b.data, -1, -2)
                _accum(a, _unbroadcast(ga, a.data.shape), own=True)
            if b.requires_grad:
                gb = np.swapaxes(a.data, -1, -2) @ g
                _accum(b, _unbroadcast(gb, b.data.shape), own=True)
        return backward

    return _wrap(data, (a, b), build, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def build(out):
        def backward(g):
            _accum(a, g.reshape(a.data.shape), own=True)
        return backward

    return _wrap(data, (a,), build, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    data = np.transpose(a.data, axes)
    inverse = np.argsort(axes)

    def build(out):
        def backward(g):
            _accum(a, np.transpose(g, inverse), own=True)
        return backward

    return _wrap(data, (a,), build, "transpose")


def getitem(a: Tensor, key) -> Tensor:
    data = a.data[key]

    def build(out):
        def backward(g):
            full = np.zeros_like(a.data)
            full[key] = g
            _accum(a, full, own=True)
        return backward

    return _wrap(data, (a,), build, "getitem")


def embedding(weight: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = weight[idx[...], :]."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= weight.data.shape[0]):
        raise ValueError(
            f"embedding index out of range [0, {weight.data.shape[0]}): "
            f"min={idx.min()}, max={idx.max()}"
        )
    data = weight.data[idx]

    def build(out):
        def backward(g):
            # sort + reduceat scatter-add: much faster than np.add.at and
            # still a fixed, deterministic accumulation order
            gw = np.zeros_like(weight.data)
            flat_idx = idx.ravel()
            g2 = g.reshape(-1, weight.data.shape[1])
            order = np.argsort(flat_idx, kind="stable")
            si = flat_idx[order]
            cuts = np.flatnonzero(np.r_[True, si[1:] != si[:-1]])
            gw[si[cuts]] = np.add.reduceat(g2[order], cuts, axis=0)
            _accum(weight, gw, own=True)
        return backward

    return _wrap(data, (weight,), build, "embedding")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Exponentiate-and-normalize along axis, with max subtraction."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def build(out):
        y = data

        def backward(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            _accum(x, y * (g - dot), own=True)
        return backward

    return _wrap(data, (x,), build, "softmax")


def masked_softmax(x: Tensor, bias: np.ndarray, scale: float = 1.0) -> Tensor:
    """softmax(x * scale + bias) along the last axis, fused.

    bias is a constant additive mask (e.g. -1e9 at PAD keys); gradients
    flow to x only. Same math as scale/add/softmax composed, with fewer
    large temporaries.
    """
    t = x.data * scale
    t += bias
    t -= t.max(axis=-1, keepdims=True)
    np.exp(t, out=t)
    t /= t.sum(axis=-1, keepdims=True)

    def build(out):
        y = t

        def backward(g):
            dot = (g * y).sum(axis=-1, keepdims=True)
            _accum(x, (scale * y) * (g - dot), own=True)
        return backward

    return _wrap(t, (x,), build, "masked_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Zero-mean unit-variance normalization over the last axis, then affine."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def build(out):
        def backward(g):
            if gain.requires_grad:
                _accum(gain, (g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0), own=True)
            if bias.requires_grad:
                _accum(bias, g.reshape(-1, xhat.shape[-1]).sum(axis=0), own=True)
            if x.requires_grad:
                dxhat = g * gain.data
                m1 = dxhat.mean(axis=-1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
                _accum(x, inv * (dxhat - m1 - xhat * m2), own=True)
        return backward

    return _wrap(data, (x, gain, bias), build, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715 x^3)))."""
    u = _SQRT_2_OVER_PI * (x.data + _GELU_CUBIC * x.data * x.data * x.data)
    t = np.tanh(u)
    data = 0.5 * x.data * (1.0 + t)

    def build(out):
        def backward(g):
            du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_CUBIC * x.data * x.data)
            d = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
            _accum(x, g * d, own=True)
        return backward

    return _wrap(data, (x,), build, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    data = _sigmoid_stable(x.data)

    def build(out):
        def backward(g):
            _accum(x, g * data * (1.0 - data), own=True)
        return backward

    return _wrap(data, (x,), build, "sigmoid")


def _sigmoid_stable(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def log(x: Tensor) -> Tensor:
    data = np.log(x.data)

    def build(out):
        def backward(g):
            _accum(x, g / x.data, own=True)
        return backward

    return _wrap(data, (x,), build, "log")


def sum_(x: Tensor, axis=None) -> Tensor:
    data = x.data.sum(axis=axis)

    def build(out):
        def backward(g):
            if axis is None:
                _accum(x, np.broadcast_to(g, x.data.shape))
            else:
                _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape))
        return backward

    return _wrap(data, (x,), build, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return scale(sum_(x, axis), 1.0 / n)


def dropout(x: Tensor, rate: float, rng: Rng) -> Tensor:
    """Inverted dropout with a seeded mask. Identity at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if rate == 0.0:
        return x
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    data = x.data * mask

    def build(out):
        def backward(g):
            _accum(x, g * mask, own=True)
        return backward

    return _wrap(data, (x,), build, "dropout")


def cross_entropy_logits(logits: Tensor, targets: np.ndarray, ignore_index: int = -100) -> Tensor:
    """Mean negative log-softmax at the target class over non-ignored rows.

    All rows ignored yields a zero loss with a zero gradient.
    """
    targets = np.asarray(targets)
    if logits.data.ndim != 2 or targets.shape != (logits.data.shape[0],):
        raise ValueError("cross_entropy_logits expects [n, vocab] logits and [n] targets")
    keep = targets != ignore_index
    n_keep = int(keep.sum())
    vocab = logits.data.shape[1]
    if n_keep and (targets[keep].min() < 0 or targets[keep].max() >= vocab):
        raise ValueError("target id outside vocabulary")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    if n_keep == 0:
        data = np.float64(0.0)
    else:
        rows = np.nonzero(keep)[0]
        nll = logz[rows, 0] - shifted[rows, targets[rows]]
        data = nll.sum() / n_keep

    def build(out):
        def backward(g):
            dl = np.zeros_like(logits.data)
            if n_keep:
                rows = np.nonzero(keep)[0]
                p = np.exp(shifted[rows] - logz[rows])
                p[np.arange(len(rows)), targets[rows]] -= 1.0
                dl[rows] = p * (float(g) / n_keep)
            _accum(logits, dl, own=True)
        return backward

    return _wrap(data, (logits,), build, "cross_entropy_logits")


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on logits, numerically stable."""
    y = np.asarray(targets, dtype=np.float64)
    z = logits.data
    if z.shape != y.shape:
        raise ValueError("bce_with_logits shapes differ")
    data = (np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean()

    def build(out):
        def backward(g):
            _accum(logits, (float(g) / z.size) * (_sigmoid_stable(z) - y), own=True)
        return backward

    return _wrap(data, (logits,), build, "bce_with_logits")


def backward(loss: Tensor) -> None:
    """Run backward on the innermost active tape."""
    if not _TAPES:
        raise RuntimeError("backward called with no active tape")
    _TAPES[-1].backward(loss)
