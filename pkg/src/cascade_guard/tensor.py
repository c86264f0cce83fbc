"""Dense H x W x C tensors and the layer primitives used by the victim CNN.

All arithmetic is float64 end to end so gradient checks hold to 1e-6 and runs
are bit-reproducible. Public ops take single images; the private batched
kernels (leading axis N) are shared with the training and attack code paths,
which keeps single-image and batched results bit-identical.
"""
from __future__ import annotations

import numpy as np

from .errors import ValidationError

__all__ = [
    "Tensor",
    "ConvFilterBank",
    "conv2d",
    "relu",
    "maxpool",
    "dense",
    "softmax",
]


class Tensor:
    """Immutable dense image tensor with explicit (height, width, channels) layout.

    Data is stored row-major: height, then width, then channels. Construction
    rejects non-finite values, so every value reachable through the public ops
    is finite.
    """

    __slots__ = ("array",)

    def __init__(self, data, dims=None):
        arr = np.asarray(data, dtype=np.float64)
        if dims is not None:
            h, w, c = (int(d) for d in dims)
            if h <= 0 or w <= 0 or c <= 0:
                raise ValidationError(f"tensor dims must be positive, got {(h, w, c)}")
            if arr.size != h * w * c:
                raise ValidationError(
                    f"data length {arr.size} does not match dims {h}x{w}x{c}"
                )
            arr = arr.reshape(h, w, c)
        else:
            if arr.ndim == 2:
                arr = arr[:, :, None]
            if arr.ndim != 3 or arr.size == 0:
                raise ValidationError(
                    f"tensor data must be HxW or HxWxC, got shape {arr.shape}"
                )
        arr = np.array(arr, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise ValidationError("tensor contains non-finite values")
        arr.flags.writeable = False
        self.array = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Adopt a freshly computed float64 array without copying it.
        if not np.isfinite(arr).all():
            raise ValidationError("operation produced non-finite values")
        t = cls.__new__(cls)
        arr.flags.writeable = False
        t.array = arr
        return t

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.array.shape  # type: ignore[return-value]

    @property
    def height(self) -> int:
        return self.array.shape[0]

    @property
    def width(self) -> int:
        return self.array.shape[1]

    @property
    def channels(self) -> int:
        return self.array.shape[2]

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view (height, then width, then channels)."""
        return self.array.reshape(-1)

    def __repr__(self) -> str:
        h, w, c = self.dims
        return f"Tensor({h}x{w}x{c})"


class ConvFilterBank:
    """A stack of K same-shaped convolution kernels plus biases, stride and padding.

    Kernels are stored as a (K, kH, kW, C_in) array; padding is zero-fill.
    """

    __slots__ = ("weights", "biases", "stride", "padding")

    def __init__(self, weights, biases=None, stride=1, padding=0):
        w = np.array(weights, dtype=np.float64)
        if w.ndim != 4 or w.shape[0] < 1:
            raise ValidationError(
                f"filters must stack to K x kH x kW x C_in, got shape {w.shape}"
            )
        if not np.isfinite(w).all():
            raise ValidationError("filter weights contain non-finite values")
        k = w.shape[0]
        b = np.zeros(k) if biases is None else np.array(biases, dtype=np.float64)
        if b.shape != (k,):
            raise ValidationError(f"need {k} biases, got shape {b.shape}")
        if not np.isfinite(b).all():
            raise ValidationError("biases contain non-finite values")
        stride = int(stride)
        padding = int(padding)
        if stride < 1:
            raise ValidationError(f"stride must be positive, got {stride}")
        if padding < 0:
            raise ValidationError(f"padding must be non-negative, got {padding}")
        w.flags.writeable = False
        b.flags.writeable = False
        self.weights = w
        self.biases = b
        self.stride = stride
        self.padding = padding

    @property
    def count(self) -> int:
        return self.weights.shape[0]

    @property
    def kernel_dims(self) -> tuple[int, int, int]:
        return self.weights.shape[1:]  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# Batched kernels. x has shape (N, H, W, C); gradients mirror the inputs.
# ---------------------------------------------------------------------------

def _conv_out_dims(h, w, kh, kw, stride, padding):
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if h + 2 * padding < kh or w + 2 * padding < kw or ho < 1 or wo < 1:
        raise ValidationError(
            f"kernel {kh}x{kw} (stride {stride}, padding {padding}) does not fit "
            f"input {h}x{w}: output would be {ho}x{wo}"
        )
    return ho, wo


def _conv_forward(x, weights, biases, stride, padding):
    n, h, w, cin = x.shape
    k, kh, kw, ck = weights.shape
    if ck != cin:
        raise ValidationError(
            f"input has {cin} channels but kernels expect {ck} input channels"
        )
    ho, wo = _conv_out_dims(h, w, kh, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x
    wmat = weights.transpose(1, 2, 3, 0)  # (kH, kW, C_in, K)
    out = np.broadcast_to(biases, (n, ho, wo, k)).copy()
    s = stride
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s, :]
            out += xs @ wmat[i, j]
    return out


def _conv_backward(x, weights, stride, padding, gy):
    n, h, w, cin = x.shape
    k, kh, kw, _ = weights.shape
    ho, wo = gy.shape[1], gy.shape[2]
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x
    wmat = weights.transpose(1, 2, 3, 0)
    gxp = np.zeros_like(xp)
    gw = np.zeros((kh, kw, cin, k))
    s = stride
    for i in range(kh):
        for j in range(kw):
            rows = slice(i, i + (ho - 1) * s + 1, s)
            cols = slice(j, j + (wo - 1) * s + 1, s)
            xs = xp[:, rows, cols, :]
            gw[i, j] = np.tensordot(xs, gy, axes=([0, 1, 2], [0, 1, 2]))
            gxp[:, rows, cols, :] += gy @ wmat[i, j].T
    gx = gxp[:, padding : padding + h, padding : padding + w, :] if padding else gxp
    gweights = gw.transpose(3, 0, 1, 2)
    gbiases = gy.sum(axis=(0, 1, 2))
    return gx, gweights, gbiases


def _maxpool_forward(x, window, stride):
    n, h, w, c = x.shape
    window = int(window)
    stride = int(stride)
    if window < 1 or stride < 1:
        raise ValidationError(f"window and stride must be positive, got {window}, {stride}")
    if h < window or w < window:
        raise ValidationError(f"pool window {window} exceeds spatial extent {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    best = np.full((n, ho, wo, c), -np.inf)
    arg = np.zeros((n, ho, wo, c), dtype=np.int16)
    idx = 0
    for i in range(window):
        for j in range(window):
            xs = x[:, i : i + (ho - 1) * stride + 1 : stride,
                   j : j + (wo - 1) * stride + 1 : stride, :]
            better = xs > best  # strict: ties resolve to the first offset in scan order
            best = np.where(better, xs, best)
            arg = np.where(better, idx, arg)
            idx += 1
    return best, arg


def _maxpool_backward(x_shape, window, stride, arg, gy):
    gx = np.zeros(x_shape)
    ho, wo = gy.shape[1], gy.shape[2]
    idx = 0
    for i in range(window):
        for j in range(window):
            rows = slice(i, i + (ho - 1) * stride + 1, stride)
            cols = slice(j, j + (wo - 1) * stride + 1, stride)
            gx[:, rows, cols, :] += np.where(arg == idx, gy, 0.0)
            idx += 1
    return gx


def _relu_forward(x):
    return np.maximum(x, 0.0)


def _relu_backward(x, gy):
    # Subgradient 0 at exactly 0.
    return gy * (x > 0.0)


def _dense_forward(xflat, weights, bias):
    # weights has one row per output unit: (units, in_dim).
    return xflat @ weights.T + bias


def _dense_backward(xflat, weights, gy):
    gx = gy @ weights
    gweights = gy.T @ xflat
    gbias = gy.sum(axis=0)
    return gx, gweights, gbias


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Public single-image operations.
# ---------------------------------------------------------------------------

def conv2d(input: Tensor, bank: ConvFilterBank) -> Tensor:
    """Cross-correlate the input with every kernel in the bank.

    Output has one channel per kernel:
    out(h, w, k) = bias_k + sum over the kernel window of kernel_k * patch.
    """
    out = _conv_forward(input.array[None], bank.weights, bank.biases,
                        bank.stride, bank.padding)
    return Tensor._wrap(out[0])


def relu(input: Tensor) -> Tensor:
    """Elementwise max(0, x)."""
    return Tensor._wrap(_relu_forward(input.array))


def maxpool(input: Tensor, window: int, stride: int) -> Tensor:
    """Per-channel sliding-window maximum."""
    out, _ = _maxpool_forward(input.array[None], window, stride)
    return Tensor._wrap(out[0])


def dense(input: Tensor, weights, bias) -> np.ndarray:
    """Affine map of the flattened input; weights carry one row per output unit."""
    w = np.asarray(weights, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64)
    flat = input.data
    if w.ndim != 2 or w.shape[1] != flat.size:
        raise ValidationError(
            f"weight rows have length {w.shape[-1] if w.ndim else 0} "
            f"but flattened input has length {flat.size}"
        )
    if b.shape != (w.shape[0],):
        raise ValidationError(f"need {w.shape[0]} bias entries, got shape {b.shape}")
    out = w @ flat + b
    if not np.isfinite(out).all():
        raise ValidationError("dense produced non-finite values")
    return out


def softmax(raw) -> np.ndarray:
    """Numerically stable softmax (max-subtracted); output sums to 1."""
    z = np.asarray(raw, dtype=np.float64)
    if not np.isfinite(z).all():
        raise ValidationError("softmax input contains non-finite values")
    return _softmax(z)
