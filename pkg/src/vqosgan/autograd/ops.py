"""Differentiable operations on :class:`Tensor`.

Convolutions use im2col / col2im with zero padding. The weight layouts follow
the common convention: ``conv2d`` takes ``(K, C, kh, kw)`` and
``conv_transpose2d`` takes ``(C_in, C_out, kh, kw)``, so that a kernel of
shape ``(K, C, kh, kw)`` used by both is an adjoint pair.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ..errors import NumericError
from .tensor import Tensor

BCE_EPS = 1e-7


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_finite(x: Tensor, what: str) -> None:
    if not np.isfinite(x.data).all():
        raise NumericError(f"{what}: non-finite input")


# ---------------------------------------------------------------------------
# elementwise / structural


def add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._from_op(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._from_op(ad * bd, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return Tensor._from_op(ad @ bd, (a, b), backward)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return Tensor._from_op(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ValueError("mean of empty tensor")
    shape, n = a.shape, a.size
    return Tensor._from_op(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return Tensor._from_op(a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(old),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def spatial_mean(a: Tensor) -> Tensor:
    """Global average pool: ``(N, C, H, W) -> (N, C)``."""
    if a.ndim != 4 or a.shape[2] * a.shape[3] == 0:
        raise ValueError(f"spatial_mean expects non-empty (N, C, H, W), got {a.shape}")
    shape = a.shape
    hw = shape[2] * shape[3]
    return Tensor._from_op(a.data.mean(axis=(2, 3)), (a,),
                           lambda g: (np.broadcast_to(g[:, :, None, None] / hw, shape).copy(),))


def rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``a[start:stop]`` along the leading axis."""
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return Tensor._from_op(a.data[start:stop], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    _check_finite(x, "relu")
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    _check_finite(x, "leaky_relu")
    slope = np.where(x.data > 0, 1.0, alpha)
    return Tensor._from_op(x.data * slope, (x,), lambda g: (g * slope,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    _check_finite(x, "sigmoid")
    s = _sigmoid(x.data)
    return Tensor._from_op(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    _check_finite(x, "tanh")
    t = np.tanh(x.data)
    return Tensor._from_op(t, (x,), lambda g: (g * (1.0 - t * t),))


def _log_softmax(z: np.ndarray, axis: int) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x, "softmax")
    s = np.exp(_log_softmax(x.data, axis))

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(s, (x,), backward)


def softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(_log_softmax(np.asarray(z, dtype=np.float64), axis))


# ---------------------------------------------------------------------------
# losses (all mean-reduced scalars)


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError(f"{what}: empty tensors")


def bce(pred: Tensor, target) -> Tensor:
    """Binary cross-entropy on probabilities, clamped to [1e-7, 1 - 1e-7]."""
    target = target if isinstance(target, Tensor) else Tensor(np.broadcast_to(target, pred.shape))
    _same_shape(pred, target, "bce")
    _check_finite(pred, "bce")
    p = np.clip(pred.data, BCE_EPS, 1.0 - BCE_EPS)
    t = target.data
    n = p.size
    loss = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).mean()
    inside = (pred.data > BCE_EPS) & (pred.data < 1.0 - BCE_EPS)

    def backward(g):
        gp = float(g) * (p - t) / (p * (1.0 - p)) / n
        return gp * inside, None

    return Tensor._from_op(np.asarray(loss), (pred, target), backward)


def cross_entropy(logits: Tensor, target: np.ndarray | Sequence[int]) -> Tensor:
    """Softmax cross-entropy of ``(N, K)`` logits against integer class indices."""
    idx = np.asarray(target, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != idx.size:
        raise ValueError(f"cross_entropy: logits {logits.shape} vs {idx.size} targets")
    if idx.size == 0:
        raise ValueError("cross_entropy: empty tensors")
    k = logits.shape[1]
    if idx.min() < 0 or idx.max() >= k:
        raise ValueError(f"cross_entropy: class index outside [0, {k})")
    _check_finite(logits, "cross_entropy")
    n = idx.size
    logp = _log_softmax(logits.data, 1)
    rows = np.arange(n)
    loss = -logp[rows, idx].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, idx] -= 1.0
        return (d * (float(g) / n),)

    return Tensor._from_op(np.asarray(loss), (logits,), backward)


def l1(a: Tensor, b: Tensor) -> Tensor:
    b = b if isinstance(b, Tensor) else Tensor(b)
    _same_shape(a, b, "l1")
    diff = a.data - b.data
    n = diff.size
    sign = np.sign(diff)

    def backward(g):
        return sign * (float(g) / n), -sign * (float(g) / n)

    return Tensor._from_op(np.asarray(np.abs(diff).mean()), (a, b), backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    b = b if isinstance(b, Tensor) else Tensor(b)
    _same_shape(a, b, "mse")
    diff = a.data - b.data
    n = diff.size

    def backward(g):
        d = diff * (2.0 * float(g) / n)
        return d, -d

    return Tensor._from_op(np.asarray((diff * diff).mean()), (a, b), backward)


# ---------------------------------------------------------------------------
# dense / convolution


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped ``(out, in)``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"dense: bias {bias.shape} != ({weight.shape[0]},)")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gb = g.sum(axis=0) if bias is not None else None
        return g @ wd, g.T @ xd, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward)


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """``(N, C, H, W)`` -> ``(N, C*kh*kw, Ho*Wo)``."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    x = np.ascontiguousarray(x)
    s0, s1, s2, s3 = x.strides
    view = as_strided(x, (n, c, kh, kw, ho, wo), (s0, s1, s2, s3, s2 * stride, s3 * stride), writeable=False)
    return view.reshape(n, c * kh * kw, ho * wo)


def col2im(cols: np.ndarray, shape: tuple[int, int, int, int], kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back into ``shape``."""
    n, c, h, w = shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        hi = i + stride * ho
        for j in range(kw):
            out[:, :, i:hi:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return out


def _check_conv(x: Tensor, weight: Tensor, bias: Tensor | None, in_axis: int, out_axis: int,
                stride: int, what: str) -> None:
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"{what}: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[in_axis]:
        raise ValueError(f"{what}: input has {x.shape[1]} channels but weight {weight.shape} expects "
                         f"{weight.shape[in_axis]}")
    if bias is not None and bias.shape != (weight.shape[out_axis],):
        raise ValueError(f"{what}: bias {bias.shape} != ({weight.shape[out_axis]},)")
    if stride < 1:
        raise ValueError(f"{what}: stride must be >= 1, got {stride}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    _check_conv(x, weight, bias, 1, 0, stride, "conv2d")
    n, c, h, w = x.shape
    k, _, kh, kw = weight.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho <= 0 or wo <= 0 or h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(f"conv2d: kernel {kh}x{kw} (stride {stride}, pad {padding}) yields empty output on {h}x{w}")
    cols = im2col(x.data, kh, kw, stride, padding)
    w2 = weight.data.reshape(k, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, k, ho, wo)

    def backward(g):
        g2 = g.reshape(n, k, ho * wo)
        gw = np.einsum("nkl,ncl->kc", g2, cols, optimize=True).reshape(weight.shape)
        gx = col2im(np.matmul(w2.T, g2), (n, c, h, w), kh, kw, stride, padding) if x.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward)


def conv_transpose_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size - 1) * stride - 2 * pad + k


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    _check_conv(x, weight, bias, 0, 1, stride, "conv_transpose2d")
    n, cin, h, w = x.shape
    _, cout, kh, kw = weight.shape
    ho = conv_transpose_output_size(h, kh, stride, padding)
    wo = conv_transpose_output_size(w, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv_transpose2d: kernel {kh}x{kw} (stride {stride}, pad {padding}) "
                         f"yields empty output on {h}x{w}")
    w2 = weight.data.reshape(cin, -1)
    xd = x.data.reshape(n, cin, h * w)
    out = col2im(np.matmul(w2.T, xd), (n, cout, ho, wo), kh, kw, stride, padding)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gcols = im2col(g, kh, kw, stride, padding)
        gx = np.matmul(w2, gcols).reshape(x.shape) if x.requires_grad else None
        gw = np.einsum("ncl,nkl->ck", xd, gcols, optimize=True).reshape(weight.shape)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward)
