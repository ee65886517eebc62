"""Dense float64 helpers shared by the model, attribution and training code.

A "matrix" throughout the package is a 2-D ``numpy.ndarray`` of ``float64``.
Functions here are pure; none of them mutate their inputs.
"""

from __future__ import annotations

import ctypes
import zlib
from typing import Optional

import numpy as np
from scipy.special import erf

Matrix = np.ndarray

LN_EPS = 1e-5
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericalError(ArithmeticError):
    """Raised when a computation produces NaN or Inf.

    Attributes:
        where: location of the failure, e.g. ``"block 1"``.
        tensor: name of the offending tensor.
    """

    def __init__(self, message: str, where: str = "", tensor: str = ""):
        super().__init__(message)
        self.where = where
        self.tensor = tensor


def as_matrix(x) -> Matrix:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def check_finite(x: np.ndarray, where: str = "", tensor: str = "") -> None:
    if not np.all(np.isfinite(x)):
        raise NumericalError(
            f"non-finite values in {tensor or 'tensor'}" + (f" at {where}" if where else ""),
            where=where,
            tensor=tensor,
        )


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with a fixed summation order.

    Accumulates ``a[:, k] * b[k, :]`` for ``k = 0, 1, ...`` in turn, so every
    entry equals the textbook triple loop bit for bit regardless of the BLAS
    build underneath.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += np.multiply.outer(a[:, k], b[k, :])
    return out


def stable_div(num: Matrix, den: Matrix, eps: float) -> Matrix:
    """Element-wise ``num / (den + eps * sign(den))`` with ``sign(0) = +1``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    if num.shape != den.shape:
        raise ShapeError(f"stable_div shape mismatch: {num.shape} vs {den.shape}")
    return num / (den + eps * np.where(den >= 0, 1.0, -1.0))


def softmax_rows(x: Matrix) -> Matrix:
    x = np.asarray(x, dtype=np.float64)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def layer_norm(x: Matrix, gain, bias, eps: float = LN_EPS) -> Matrix:
    """Per-row layer normalization (works on any leading batch shape)."""
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm gain/bias must have length {x.shape[-1]}, got {gain.shape}/{bias.shape}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gain + bias


def gelu(x: Matrix) -> Matrix:
    """Exact GELU, ``x * Phi(x)``."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def normal_cdf(x: Matrix) -> Matrix:
    return 0.5 * (1.0 + erf(np.asarray(x, dtype=np.float64) / _SQRT2))


def gelu_grad(x: Matrix, cdf: Optional[Matrix] = None) -> Matrix:
    """Derivative of :func:`gelu`; pass ``cdf = normal_cdf(x)`` if already known."""
    x = np.asarray(x, dtype=np.float64)
    if cdf is None:
        cdf = normal_cdf(x)
    out = x * x
    out *= -0.5
    np.exp(out, out=out)
    out *= x
    out *= _INV_SQRT_2PI
    out += cdf
    return out


def tune_allocator() -> bool:
    """Keep large temporaries on the glibc heap instead of fresh mmaps.

    Training allocates many ~1 MB scratch arrays per step; with the default
    mmap threshold each one page-faults in from scratch. Process-wide and a
    no-op off glibc. Returns whether the call succeeded.
    """
    try:
        libc = ctypes.CDLL("libc.so.6")
        m_trim_threshold, m_mmap_threshold = -1, -3
        ok = libc.mallopt(m_mmap_threshold, 64 << 20) and libc.mallopt(m_trim_threshold, 256 << 20)
        return bool(ok)
    except (OSError, AttributeError):
        return False


def make_rng(seed: int, label: Optional[str] = None) -> np.random.Generator:
    """PCG64 generator for ``seed``; ``label`` selects an independent substream.

    Streams depend only on ``(seed, label)`` so e.g. data generation can be
    rerun without replaying model initialisation.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    if label is not None:
        entropy.append(zlib.crc32(label.encode("utf-8")))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
