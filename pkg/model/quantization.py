"""
Stochastic uniform quantization of feature tensors (unbiased rounding), used before any feature transfer.
During back-propagation the quantizer is an identity (straight-through, see GradTape.identity).
"""

from typing import Tuple

import numpy as np

from utils.exception import EncodeError


MAX_BITS = 32


def code_dtype(bits: int):
    if bits <= 8:
        return np.dtype('<u1')
    elif bits <= 16:
        return np.dtype('<u2')
    else:
        return np.dtype('<u4')


class QuantizedTensor:
    def __init__(self, shape: Tuple[int, ...], bits: int, lo: float, hi: float, codes: np.ndarray):
        """ codes: integers in [0, 2^bits - 1], with the given shape. Dequantized values lie in [lo, hi]. """
        if not 1 <= bits <= MAX_BITS:
            raise ValueError("bits must be in 1..{} (got {})".format(MAX_BITS, bits))
        if not hi >= lo:
            raise ValueError("Invalid quantization range [{}, {}]".format(lo, hi))
        self.shape = tuple(int(s) for s in shape)
        self.bits = int(bits)
        self.lo, self.hi = float(lo), float(hi)
        codes = np.asarray(codes)
        if codes.shape != self.shape:
            raise ValueError("codes shape {} does not match shape {}".format(codes.shape, self.shape))
        if codes.size > 0 and (codes.min() < 0 or codes.max() > self.levels - 1):
            raise ValueError("codes must be in [0, {}]".format(self.levels - 1))
        self.codes = codes.astype(code_dtype(self.bits))

    @property
    def levels(self) -> int:
        return 2 ** self.bits

    @property
    def step(self) -> float:
        """ Distance between adjacent levels. """
        return (self.hi - self.lo) / (self.levels - 1)

    def __eq__(self, other):
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        return self.shape == other.shape and self.bits == other.bits and self.lo == other.lo \
            and self.hi == other.hi and np.array_equal(self.codes, other.codes)

    def __repr__(self):
        return "QuantizedTensor(shape={}, bits={}, range=[{:.4g}, {:.4g}])".format(
            self.shape, self.bits, self.lo, self.hi)


def quantize(z: np.ndarray, bits: int, rng: np.random.Generator) -> QuantizedTensor:
    """ Each value is rounded to one of its two adjacent levels; up with probability equal to its fractional
    position between them, so that E[dequantize(quantize(z))] = z. lo == hi encodes exactly. """
    z = np.asarray(z, dtype=np.float64)
    if not 1 <= bits <= MAX_BITS:
        raise ValueError("bits must be in 1..{} (got {})".format(MAX_BITS, bits))
    if z.size == 0:
        raise EncodeError("Cannot quantize an empty tensor")
    if not np.all(np.isfinite(z)):
        raise ValueError("Cannot quantize non-finite values")
    lo, hi = float(np.min(z)), float(np.max(z))
    n_max = 2 ** bits - 1
    if hi == lo:
        return QuantizedTensor(z.shape, bits, lo, hi, np.zeros(z.shape, dtype=np.int64))
    scaled = (z - lo) / (hi - lo) * n_max
    floor = np.floor(scaled)
    frac = scaled - floor
    codes = floor + (rng.random(z.shape) < frac)
    codes = np.clip(codes, 0, n_max).astype(np.int64)
    return QuantizedTensor(z.shape, bits, lo, hi, codes)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    if q.hi == q.lo:
        return np.full(q.shape, q.lo)
    values = q.lo + (q.hi - q.lo) * (q.codes.astype(np.float64) / (q.levels - 1))
    return np.clip(values, q.lo, q.hi)
