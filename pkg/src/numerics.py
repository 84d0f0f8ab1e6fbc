"""Dense tensor kernels and the repository tensor binary format.

Tensors are contiguous row-major ``float32`` numpy arrays. Reductions
(matmul, convolution, softmax) accumulate in float64 and round once to
float32, so identical inputs always produce bit-identical outputs.
"""

import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import expit, softmax

Tensor = np.ndarray

TENSOR_MAGIC = b"VTLT"
TENSOR_VERSION = 1


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible."""
    pass


class NumericalDomainError(ArithmeticError):
    """Raised when an operation leaves the finite real domain."""
    pass


class TensorFormatError(ValueError):
    """Raised when a serialized tensor is malformed."""
    pass


def as_tensor(x) -> Tensor:
    """Return ``x`` as a contiguous float32 array."""
    return np.ascontiguousarray(x, dtype=np.float32)


def _check_finite(out: np.ndarray, op: str) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericalDomainError(f"{op} produced non-finite values")
    return as_tensor(out)


def _require_rank(x: np.ndarray, rank: int, name: str) -> None:
    if x.ndim != rank:
        raise DimensionError(f"{name} must have rank {rank}, got shape {tuple(x.shape)}")


# ==================== Kernels ====================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product ``c[i, j] = sum_r a[i, r] * b[r, j]``.

    Args:
        a: Tensor of shape [m, k]
        b: Tensor of shape [k, n]

    Returns:
        Tensor of shape [m, n]

    Raises:
        DimensionError: If the inner dimensions disagree
    """
    a = np.asarray(a)
    b = np.asarray(b)
    _require_rank(a, 2, "a")
    _require_rank(b, 2, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {tuple(a.shape)} x {tuple(b.shape)}"
        )
    out = a.astype(np.float64) @ b.astype(np.float64)
    return _check_finite(out, "matmul")


def softmax_rows(a: Tensor) -> Tensor:
    """
    Numerically stable softmax over each row.

    Args:
        a: Tensor of shape [m, n] with finite entries

    Returns:
        Tensor of shape [m, n] whose rows sum to one
    """
    a = np.asarray(a)
    _require_rank(a, 2, "a")
    if not np.all(np.isfinite(a)):
        raise NumericalDomainError("softmax_rows requires finite input")
    return _check_finite(softmax(a.astype(np.float64), axis=1), "softmax_rows")


def conv2d(
    x: Tensor,
    kernel: Tensor,
    padding: int = 0,
    bias: Optional[Tensor] = None
) -> Tensor:
    """
    Stride-1 2D cross-correlation with zero padding.

    Args:
        x: Input of shape [c_in, h, w]
        kernel: Weights of shape [c_out, c_in, kh, kw], kh and kw odd
        padding: Zero padding added on every side
        bias: Optional bias of shape [c_out]

    Returns:
        Tensor of shape [c_out, h + 2*padding - kh + 1, w + 2*padding - kw + 1]

    Raises:
        DimensionError: If channels disagree or the kernel exceeds the padded input
    """
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    _require_rank(x, 3, "input")
    _require_rank(kernel, 4, "kernel")
    c_out, c_in, kh, kw = kernel.shape
    if x.shape[0] != c_in:
        raise DimensionError(
            f"conv2d channel mismatch: input {tuple(x.shape)}, kernel {tuple(kernel.shape)}"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d kernel sizes must be odd, got {kh}x{kw}")
    if padding < 0:
        raise DimensionError(f"padding must be non-negative, got {padding}")
    if x.shape[1] + 2 * padding < kh or x.shape[2] + 2 * padding < kw:
        raise DimensionError(
            f"conv2d kernel {kh}x{kw} larger than padded input {tuple(x.shape)} (padding {padding})"
        )
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (c_out,):
            raise DimensionError(f"bias must have shape ({c_out},), got {tuple(bias.shape)}")

    with torch.no_grad():
        out = F.conv2d(
            torch.from_numpy(x.astype(np.float64))[None],
            torch.from_numpy(kernel.astype(np.float64)),
            bias=None if bias is None else torch.from_numpy(bias.astype(np.float64)),
            padding=padding,
        )[0].numpy()
    return _check_finite(out, "conv2d")


# ==================== Elementwise & pointwise ops ====================

def silu(x: Tensor) -> Tensor:
    """Sigmoid-gated linear unit."""
    x64 = np.asarray(x, dtype=np.float64)
    return as_tensor(x64 * expit(x64))


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row of a [n, c] tensor to zero mean and unit variance."""
    x64 = np.asarray(x, dtype=np.float64)
    _require_rank(x64, 2, "x")
    mean = x64.mean(axis=1, keepdims=True)
    var = x64.var(axis=1, keepdims=True)
    return as_tensor((x64 - mean) / np.sqrt(var + eps))


def group_norm(x: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Group normalization of a single [c, h, w] feature map."""
    x64 = np.asarray(x, dtype=np.float64)
    _require_rank(x64, 3, "x")
    c, h, w = x64.shape
    if c % groups != 0:
        raise DimensionError(f"{c} channels cannot be split into {groups} groups")
    g = x64.reshape(groups, -1)
    g = (g - g.mean(axis=1, keepdims=True)) / np.sqrt(g.var(axis=1, keepdims=True) + eps)
    return as_tensor(g.reshape(c, h, w))


def avg_pool2d(x: Tensor, factor: int = 2) -> Tensor:
    """Non-overlapping average pooling of a [c, h, w] map."""
    x = np.asarray(x)
    _require_rank(x, 3, "x")
    c, h, w = x.shape
    if h % factor or w % factor:
        raise DimensionError(f"spatial size {h}x{w} not divisible by pooling factor {factor}")
    pooled = x.astype(np.float64).reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))
    return as_tensor(pooled)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of a [c, h, w] map."""
    x = np.asarray(x)
    _require_rank(x, 3, "x")
    return as_tensor(np.repeat(np.repeat(x, factor, axis=1), factor, axis=2))


def cosine_similarity(a: Tensor, b: Tensor) -> float:
    """Cosine similarity of two tensors, flattened."""
    a64 = np.asarray(a, dtype=np.float64).ravel()
    b64 = np.asarray(b, dtype=np.float64).ravel()
    if a64.shape != b64.shape:
        raise DimensionError(f"cosine_similarity shape mismatch: {a.shape} vs {b.shape}")
    denom = np.linalg.norm(a64) * np.linalg.norm(b64)
    if denom == 0.0:
        return 0.0
    return float(np.dot(a64, b64) / denom)


# ==================== Binary format ====================

def encode_tensor(x: Tensor) -> bytes:
    """
    Serialize a tensor.

    Layout: magic ``VTLT``, 1-byte version, 1-byte rank, rank x uint32 LE dims,
    then float32 LE values in row-major order.
    """
    x = as_tensor(x)
    if x.ndim > 255:
        raise TensorFormatError(f"rank {x.ndim} does not fit in one byte")
    header = TENSOR_MAGIC + struct.pack("<BB", TENSOR_VERSION, x.ndim)
    dims = struct.pack(f"<{x.ndim}I", *x.shape)
    return header + dims + x.astype("<f4").tobytes()


def decode_tensor(data: bytes) -> Tensor:
    """Deserialize bytes produced by :func:`encode_tensor`."""
    if len(data) < 6 or data[:4] != TENSOR_MAGIC:
        raise TensorFormatError("missing VTLT magic bytes")
    version, rank = struct.unpack_from("<BB", data, 4)
    if version != TENSOR_VERSION:
        raise TensorFormatError(f"unsupported tensor format version {version}")
    offset = 6 + 4 * rank
    if len(data) < offset:
        raise TensorFormatError("truncated tensor header")
    shape = struct.unpack_from(f"<{rank}I", data, 6)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(data) - offset != 4 * count:
        raise TensorFormatError(
            f"payload holds {len(data) - offset} bytes, shape {shape} needs {4 * count}"
        )
    values = np.frombuffer(data, dtype="<f4", offset=offset, count=count)
    return as_tensor(values.reshape(shape))


def save_tensor(x: Tensor, path: Union[str, Path]) -> None:
    """Write a tensor to ``path`` in the binary format."""
    Path(path).write_bytes(encode_tensor(x))


def load_tensor(path: Union[str, Path]) -> Tensor:
    """Read a tensor written by :func:`save_tensor`."""
    return decode_tensor(Path(path).read_bytes())
