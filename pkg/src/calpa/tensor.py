"""Dense tensor kernels with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects in NCHW (or CHW) layout.  The
``*_cnhw`` convolution kernels take channel-major ``(C, N, H, W)`` tensors,
which is what :class:`calpa.network.Network` uses internally.  Pooling and
elementwise kernels only touch the trailing spatial axes and work in both.
Filter banks follow the ``(J, K, kh, kw)`` layout: ``weight[j, k]`` is the
kernel linking input channel ``j`` to output channel ``k``.

Convolution is cross-correlation (no kernel flip).  Every kernel keeps the
dtype of its inputs so that gradient probes can run in float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

BN_EPS = 1e-5

BLOB_MAGIC = b"CLPT"
BLOB_VERSION = 1


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible.

    ``dim`` names the offending dimension (e.g. ``"channels"``).
    """

    def __init__(self, message: str, dim: str | None = None):
        super().__init__(message)
        self.dim = dim


@dataclass(frozen=True)
class FilterBank:
    """Convolution weights of shape ``(J, K, kh, kw)``."""

    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 4:
            raise ShapeError(f"filter bank must be 4-D, got {self.values.shape}", "rank")

    @property
    def in_channels(self) -> int:
        return self.values.shape[0]

    @property
    def out_channels(self) -> int:
        return self.values.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.values.shape[2], self.values.shape[3]

    def kernel(self, j: int, k: int) -> np.ndarray:
        return self.values[j, k]

    def output_filter(self, k: int) -> np.ndarray:
        """All kernels feeding output channel ``k``, shape ``(J, kh, kw)``."""
        return self.values[:, k]


@dataclass(frozen=True)
class Patch:
    """Receptive-field cube of shape ``(J, kh, kw)`` with its origin."""

    values: np.ndarray
    origin: tuple


def _pads(padding) -> tuple[int, int, int, int]:
    if isinstance(padding, (int, np.integer)):
        p = int(padding)
        return p, p, p, p
    top, bottom, left, right = (int(v) for v in padding)
    return top, bottom, left, right


def conv_output_size(size: int, kernel: int, stride: int, pad_before: int, pad_after: int | None = None) -> int:
    if pad_after is None:
        pad_after = pad_before
    return (size + pad_before + pad_after - kernel) // stride + 1


def _pad(x: np.ndarray, padding) -> np.ndarray:
    top, bottom, left, right = _pads(padding)
    if not (top or bottom or left or right):
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    return np.pad(x, widths)


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeError(f"expected CHW or NCHW tensor, got shape {x.shape}", "rank")
    return x, False


# Convolution kernels work on channel-major (J, N, H, W) tensors: im2col is
# then a handful of contiguous block copies and the GEMM output needs no
# transpose.  The NCHW entry points below wrap them.

def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding) -> tuple[np.ndarray, tuple[int, int]]:
    """Unfold a ``(J, N, H, W)`` tensor into a ``(kh*kw*J, N*Ho*Wo)`` matrix."""
    xp = _pad(x, padding)
    j, n, hp, wp = xp.shape
    if hp < kh or wp < kw:
        raise ShapeError(f"kernel {kh}x{kw} exceeds padded input {hp}x{wp}", "spatial")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = np.empty((kh, kw, j, n, ho, wo), dtype=x.dtype)
    for a in range(kh):
        for b in range(kw):
            cols[a, b] = xp[:, :, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride]
    return cols.reshape(kh * kw * j, n * ho * wo), (ho, wo)


def col2im(dcols: np.ndarray, x_shape: tuple, kh: int, kw: int, stride: int, padding, out_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of :func:`im2col`; returns a ``(J, N, H, W)`` tensor."""
    j, n, h, w = x_shape
    top, bottom, left, right = _pads(padding)
    ho, wo = out_hw
    d = dcols.reshape(kh, kw, j, n, ho, wo)
    dxp = np.zeros((j, n, h + top + bottom, w + left + right), dtype=dcols.dtype)
    for a in range(kh):
        for b in range(kw):
            dxp[:, :, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride] += d[a, b]
    return dxp[:, :, top:top + h, left:left + w]


def _wmat(weight: np.ndarray) -> np.ndarray:
    j, k, kh, kw = weight.shape
    return weight.transpose(1, 2, 3, 0).reshape(k, kh * kw * j)


def conv_cnhw(x: np.ndarray, weight: np.ndarray, stride: int = 1, padding=0):
    """Channel-major convolution; returns ``(out, cols)``."""
    if weight.ndim != 4:
        raise ShapeError(f"weight must be (J, K, kh, kw), got {weight.shape}", "rank")
    if x.shape[0] != weight.shape[0]:
        raise ShapeError(
            f"input has {x.shape[0]} channels but filter bank expects J={weight.shape[0]}",
            "channels",
        )
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    j, k, kh, kw = weight.shape
    cols, (ho, wo) = im2col(x, kh, kw, stride, padding)
    out = (_wmat(weight) @ cols).reshape(k, x.shape[1], ho, wo)
    return out, cols


def conv_cnhw_backward(x_shape: tuple, weight: np.ndarray, grad_out: np.ndarray, stride: int, padding,
                       cols: np.ndarray, need_input_grad: bool = True):
    j, k, kh, kw = weight.shape
    _, n, ho, wo = grad_out.shape
    g2 = grad_out.reshape(k, n * ho * wo)
    dweight = (g2 @ cols.T).reshape(k, kh, kw, j).transpose(3, 0, 1, 2)
    dbias = g2.sum(axis=1)
    dx = None
    if need_input_grad:
        dx = col2im(_wmat(weight).T @ g2, x_shape, kh, kw, stride, padding, (ho, wo))
    return dx, np.ascontiguousarray(dweight), dbias


def conv2d(x: np.ndarray, weight, stride: int = 1, padding=0, bias: np.ndarray | None = None) -> np.ndarray:
    """Multi-channel cross-correlation.

    ``out[:, k] = sum_j x[:, j] * weight[j, k] (+ bias[k])``.  ``padding`` is an
    int or a ``(top, bottom, left, right)`` tuple of zero padding.
    """
    if isinstance(weight, FilterBank):
        weight = weight.values
    xb, squeeze = _as_batch(x)
    out, _ = conv_cnhw(xb.transpose(1, 0, 2, 3), weight, stride, padding)
    out = out.transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)
    return out[0] if squeeze else out


def conv2d_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray, stride: int = 1, padding=0):
    """Gradients ``(dx, dweight, dbias)`` of :func:`conv2d` (NCHW tensors)."""
    xc = x.transpose(1, 0, 2, 3)
    kh, kw = weight.shape[2:]
    cols, _ = im2col(xc, kh, kw, stride, padding)
    dx, dweight, dbias = conv_cnhw_backward(
        xc.shape, weight, np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3)), stride, padding, cols
    )
    return np.ascontiguousarray(dx.transpose(1, 0, 2, 3)), dweight, dbias


def _check_channels(x: np.ndarray, axis: int, *stats: np.ndarray):
    c = x.shape[axis]
    for s in stats:
        if s.shape != (c,):
            raise ShapeError(f"per-channel stats of shape {s.shape} do not match {c} channels", "channels")


def _bshape(x: np.ndarray, axis: int) -> list[int]:
    shape = [1] * x.ndim
    shape[axis] = x.shape[axis]
    return shape


def batch_norm(x: np.ndarray, mean, var, scale, shift, eps: float = BN_EPS, axis: int = 1) -> np.ndarray:
    """Inference-mode normalization with fixed per-channel statistics.

    ``axis`` is the channel axis (1 for NCHW, 0 for CHW or channel-major).
    """
    mean, var, scale, shift = (np.asarray(a) for a in (mean, var, scale, shift))
    if x.ndim == 3 and axis == 1:
        axis = 0
    _check_channels(x, axis, mean, var, scale, shift)
    if np.any(var < 0):
        raise ValueError("variance must be non-negative")
    shape = _bshape(x, axis)
    inv = (scale / np.sqrt(var + eps)).reshape(shape)
    out = (x - mean.reshape(shape)) * inv + shift.reshape(shape)
    return out.astype(x.dtype, copy=False)


def batch_norm_train(x: np.ndarray, scale: np.ndarray, shift: np.ndarray, eps: float = BN_EPS, axis: int = 1):
    """Training-mode normalization using batch statistics.

    Returns ``(out, cache)``; ``cache`` holds what :func:`batch_norm_backward`
    needs plus the batch ``mean`` and ``var`` for running averages.
    """
    _check_channels(x, axis, scale, shift)
    red = tuple(i for i in range(x.ndim) if i != axis)
    shape = _bshape(x, axis)
    mean = x.mean(axis=red)
    centered = x - mean.reshape(shape)
    var = (centered * centered).mean(axis=red)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered * inv_std.reshape(shape)
    out = xhat * scale.reshape(shape) + shift.reshape(shape)
    return out, {"xhat": xhat, "inv_std": inv_std, "mean": mean, "var": var, "axis": axis}


def batch_norm_backward(grad_out: np.ndarray, scale: np.ndarray, cache: dict):
    xhat, inv_std, axis = cache["xhat"], cache["inv_std"], cache["axis"]
    red = tuple(i for i in range(grad_out.ndim) if i != axis)
    shape = _bshape(grad_out, axis)
    m = grad_out.size // grad_out.shape[axis]
    dshift = grad_out.sum(axis=red)
    dscale = (grad_out * xhat).sum(axis=red)
    coef = (scale * inv_std / m).reshape(shape)
    dx = coef * (m * grad_out - dshift.reshape(shape) - xhat * dscale.reshape(shape))
    return dx.astype(grad_out.dtype, copy=False), dscale, dshift


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def truncate(x: np.ndarray, threshold: float) -> np.ndarray:
    if threshold <= 0:
        raise ValueError(f"truncation threshold must be > 0, got {threshold}")
    return np.clip(x, -threshold, threshold)


def truncate_backward(x: np.ndarray, grad_out: np.ndarray, threshold: float) -> np.ndarray:
    return grad_out * (np.abs(x) < threshold)


def activate(x: np.ndarray, kind: str = "relu", threshold: float | None = None) -> np.ndarray:
    if kind == "relu":
        return relu(x)
    if kind == "truncate":
        if threshold is None:
            raise ValueError("truncate needs a threshold")
        return truncate(x, threshold)
    raise ValueError(f"unknown activation {kind!r}")


def avg_pool(x: np.ndarray, kernel: int, stride: int, padding=0) -> np.ndarray:
    """Average pooling; zero padding counts towards the divisor."""
    xb, squeeze = _as_batch(x)
    top, bottom, left, right = _pads(padding)
    if kernel > xb.shape[2] + top + bottom or kernel > xb.shape[3] + left + right:
        raise ShapeError(f"pool kernel {kernel} exceeds spatial extent {xb.shape[2:]}", "spatial")
    xp = _pad(xb, padding)
    ho = (xp.shape[2] - kernel) // stride + 1
    wo = (xp.shape[3] - kernel) // stride + 1
    out = np.zeros(xb.shape[:2] + (ho, wo), dtype=xb.dtype)
    for a in range(kernel):
        for b in range(kernel):
            out += xp[:, :, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride]
    out /= kernel * kernel
    return out[0] if squeeze else out


def avg_pool_backward(x_shape: tuple, grad_out: np.ndarray, kernel: int, stride: int, padding=0) -> np.ndarray:
    n, c, h, w = x_shape
    top, bottom, left, right = _pads(padding)
    ho, wo = grad_out.shape[2:]
    g = grad_out / (kernel * kernel)
    dxp = np.zeros((n, c, h + top + bottom, w + left + right), dtype=grad_out.dtype)
    for a in range(kernel):
        for b in range(kernel):
            dxp[:, :, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride] += g
    return dxp[:, :, top:top + h, left:left + w]


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Per-channel spatial mean, keeping ``(…, C, 1, 1)``."""
    return x.mean(axis=(-2, -1), keepdims=True)


def global_avg_pool_backward(x_shape: tuple, grad_out: np.ndarray) -> np.ndarray:
    h, w = x_shape[-2:]
    return np.broadcast_to(grad_out / (h * w), x_shape).copy()


def pool(x: np.ndarray, kind: str = "avg", kernel: int = 2, stride: int = 2, padding=0) -> np.ndarray:
    if kind == "global_avg":
        return global_avg_pool(x)
    if kind == "avg":
        return avg_pool(x, kernel, stride, padding)
    raise ValueError(f"unknown pool kind {kind!r}")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"cannot add tensors of shapes {a.shape} and {b.shape}", "shape")
    return a + b


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Fully connected layer; ``weight`` has shape ``(J, K)``."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"input width {x.shape[-1]} does not match J={weight.shape[0]}", "channels")
    out = x @ weight
    return out if bias is None else out + bias


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. ``logits``."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def extract_patch(
    x: np.ndarray,
    kernel_size: int | tuple[int, int] | FilterBank,
    out_location: tuple[int, int, int],
    stride: int = 1,
    padding=0,
    origin: tuple = (),
) -> Patch:
    """Input cube (J, kh, kw) that produces output element ``(k, y, x)``.

    Areas falling into the zero padding are zero-filled.
    """
    if isinstance(kernel_size, FilterBank):
        kh, kw = kernel_size.kernel_size
    elif isinstance(kernel_size, (int, np.integer)):
        kh = kw = int(kernel_size)
    else:
        kh, kw = kernel_size
    if x.ndim != 3:
        raise ShapeError(f"expected a CHW tensor, got {x.shape}", "rank")
    top, bottom, left, right = _pads(padding)
    j, h, w = x.shape
    ho = conv_output_size(h, kh, stride, top, bottom)
    wo = conv_output_size(w, kw, stride, left, right)
    _, oy, ox = out_location
    if not (0 <= oy < ho and 0 <= ox < wo):
        raise IndexError(f"output location ({oy}, {ox}) outside {ho}x{wo} output")
    y0, x0 = oy * stride - top, ox * stride - left
    patch = np.zeros((j, kh, kw), dtype=x.dtype)
    ys, ye = max(y0, 0), min(y0 + kh, h)
    xs, xe = max(x0, 0), min(x0 + kw, w)
    if ys < ye and xs < xe:
        patch[:, ys - y0:ye - y0, xs - x0:xe - x0] = x[:, ys:ye, xs:xe]
    return Patch(patch, tuple(origin) + (tuple(out_location),))


def fft2d_amplitude(channel: np.ndarray) -> np.ndarray:
    """``|DFT(channel)|`` with the DC bin shifted to the center."""
    channel = np.asarray(channel, dtype=np.float64)
    if channel.ndim != 2:
        raise ShapeError(f"expected a 2-D channel, got {channel.shape}", "rank")
    return np.abs(np.fft.fftshift(np.fft.fft2(channel)))


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what} contains non-finite values")
    return x


def to_blob(x: np.ndarray) -> bytes:
    """Serialize to the CLPT blob: 16-byte header, uint32 dims, float32 data."""
    x = np.asarray(x)
    header = BLOB_MAGIC + struct.pack("<III", BLOB_VERSION, x.ndim, 0)
    dims = struct.pack(f"<{x.ndim}I", *x.shape)
    return header + dims + np.ascontiguousarray(x, dtype="<f4").tobytes()


def from_blob(blob: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Inverse of :func:`to_blob`; returns the array and the end offset."""
    if blob[offset:offset + 4] != BLOB_MAGIC:
        raise ValueError("not a CLPT tensor blob")
    version, rank, _ = struct.unpack_from("<III", blob, offset + 4)
    if version != BLOB_VERSION:
        raise ValueError(f"unsupported blob version {version}")
    pos = offset + 16
    dims = struct.unpack_from(f"<{rank}I", blob, pos)
    pos += 4 * rank
    count = int(np.prod(dims, dtype=np.int64))
    arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
    return arr, pos + 4 * count


def stack_blobs(arrays: Sequence[np.ndarray]) -> bytes:
    return b"".join(to_blob(a) for a in arrays)
