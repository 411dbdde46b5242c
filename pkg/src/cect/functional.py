"""Differentiable primitives: matmul, convolutions, activations, normalization."""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ContractError, DimensionError, ParameterError
from .tensor import Tensor, unbroadcast


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with numpy broadcasting over leading batch axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    x, y = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(y, -1, -2)
        gb = np.swapaxes(x, -1, -2) @ g
        return unbroadcast(ga, x.shape), unbroadcast(gb, y.shape)

    return Tensor._make(x @ y, (a, b), "matmul", backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as [out, in]."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = matmul(x, weight.T)
    return out + bias if bias is not None else out


# convolution ------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def transposed_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + kernel


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    view = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return view[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    kh, kw = w.shape[2:]
    ho = conv_output_size(x.shape[2], kh, stride, padding)
    wo = conv_output_size(x.shape[3], kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _windows(xp, kh, kw, stride, ho, wo)  # [N, C, Ho, Wo, kh, kw]
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # [N, Ho, Wo, O]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_input_grad(g: np.ndarray, w: np.ndarray, in_hw: tuple[int, int], stride: int, padding: int) -> np.ndarray:
    """Adjoint of ``_conv_forward`` w.r.t. its input; ``g`` is [N, O, Ho, Wo]."""
    n, _, ho, wo = g.shape
    kh, kw = w.shape[2:]
    hp, wp = in_hw[0] + 2 * padding, in_hw[1] + 2 * padding
    cols = np.tensordot(g, w, axes=([1], [0]))  # [N, Ho, Wo, C, kh, kw]
    cols = cols.transpose(0, 3, 4, 5, 1, 2)  # [N, C, kh, kw, Ho, Wo]
    out = np.zeros((n, w.shape[1], hp, wp), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding : hp - padding, padding : wp - padding]
    return np.ascontiguousarray(out)


def _conv_weight_grad(g: np.ndarray, x: np.ndarray, kernel_hw: tuple[int, int], stride: int, padding: int) -> np.ndarray:
    """Gradient of ``_conv_forward`` w.r.t. its kernel; result is [O, C, kh, kw]."""
    kh, kw = kernel_hw
    ho, wo = g.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _windows(xp, kh, kw, stride, ho, wo)
    return np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of x [N,C,H,W] with weight [O,C,kh,kw], zero padding."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d: input channels {x.shape[1]} != kernel channels {weight.shape[1]}")
    if stride < 1 or padding < 0:
        raise ParameterError(f"conv2d: invalid stride={stride} or padding={padding}")
    kh, kw = weight.shape[2:]
    ho = conv_output_size(x.shape[2], kh, stride, padding)
    wo = conv_output_size(x.shape[3], kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv2d: input {x.shape} with kernel {weight.shape}, stride {stride}, padding {padding} gives empty output")
    xd, wd = x.data, weight.data
    in_hw = xd.shape[2:]

    def backward(g):
        return (
            _conv_input_grad(g, wd, in_hw, stride, padding),
            _conv_weight_grad(g, xd, (kh, kw), stride, padding),
        )

    out = Tensor._make(_conv_forward(xd, wd, stride, padding), (x, weight), "conv2d", backward)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out


def transposed_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution of x [N,C,H,W] with weight [C,O,kh,kw].

    Computed as the adjoint of ``conv2d``: the forward pass is the input
    gradient of a convolution with the same kernel.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"transposed_conv2d expects 4-D input and kernel, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(f"transposed_conv2d: input channels {x.shape[1]} != kernel in-channels {weight.shape[0]}")
    if stride < 1 or padding < 0:
        raise ParameterError(f"transposed_conv2d: invalid stride={stride} or padding={padding}")
    kh, kw = weight.shape[2:]
    ho = transposed_output_size(x.shape[2], kh, stride, padding)
    wo = transposed_output_size(x.shape[3], kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"transposed_conv2d: input {x.shape} with kernel {weight.shape}, stride {stride}, padding {padding} gives empty output")
    xd, wd = x.data, weight.data

    def backward(g):
        gx = _conv_forward(g, wd, stride, padding)
        gw = _conv_weight_grad(xd, g, (kh, kw), stride, padding)
        return gx, gw

    out = Tensor._make(_conv_input_grad(xd, wd, (ho, wo), stride, padding), (x, weight), "transposed_conv2d", backward)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ParameterError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    return Tensor._make(
        out,
        (x,),
        "upsample_nearest",
        lambda g: (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),),
    )


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C]."""
    return x.mean(axis=(2, 3))


# activations ------------------------------------------------------------

_kink_log: list | None = None


class record_kinks:
    """Collect the on/off pattern of every ReLU evaluated inside the block."""

    def __enter__(self) -> list:
        global _kink_log
        self._outer, _kink_log = _kink_log, []
        return _kink_log

    def __exit__(self, *exc):
        global _kink_log
        _kink_log = self._outer


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _kink_log is not None:
        _kink_log.append(mask)
    return Tensor._make(np.where(mask, x.data, 0).astype(x.dtype), (x,), "relu", lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF via erf."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
    return Tensor._make((xd * cdf).astype(x.dtype), (x,), "gelu", lambda g: ((g * (cdf + xd * pdf)).astype(g.dtype),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return Tensor._make(y, (x,), "softmax", lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)
    return Tensor._make(y, (x,), "log_softmax", lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (population variance), then scale and shift."""
    d = x.shape[-1]
    if d == 0:
        raise DimensionError("layer_norm over an empty last axis")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last extent {d}")
    xd, gd = x.data, gain.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    lead = tuple(range(xd.ndim - 1))

    def backward(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._make(xhat * gd + bias.data, (x, gain, bias), "layer_norm", backward)


# losses -----------------------------------------------------------------

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ContractError(f"cross_entropy: logits {logits.shape} and labels {labels.shape} disagree")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k or not np.all(labels == np.round(labels))):
        raise ContractError(f"cross_entropy: labels must be integers in [0, {k - 1}]")
    labels = labels.astype(np.intp)
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = (lse - shifted[np.arange(n), labels]).mean()
    probs = np.exp(shifted - lse[:, None])

    def backward(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return Tensor._make(np.asarray(loss, dtype=z.dtype), (logits,), "cross_entropy", backward)
