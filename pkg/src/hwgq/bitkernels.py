"""Bit-packed XNOR/popcount arithmetic for binary weights and quantized activations.

Vectors are packed into little-endian 64-bit words: element ``j`` lives in
bit ``j % 64`` of word ``j // 64``, and bits past ``logical_len`` are zero.

Activations from a half-wave quantizer take the value 0 for ``x <= 0``, which
plain XNOR algebra over signs cannot express (it would count a zero as -1).
Every quantized dot product here is therefore restricted to the positions
where the activation is non-zero.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .layers import BinaryWeightState, packable
from .quantizer import QuantizerSpec, level_table, quantize_index_array
from .tensor import DTYPE, Rng, Tensor, conv_output_size, filters_as_rows, im2row

WORD = 64

_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)


def popcount_portable(words: np.ndarray) -> np.ndarray:
    """SWAR popcount of each uint64 word (no hardware instruction needed)."""
    x = np.asarray(words, dtype=np.uint64)
    x = x - ((x >> np.uint64(1)) & _M1)
    x = (x & _M2) + ((x >> np.uint64(2)) & _M2)
    x = (x + (x >> np.uint64(4))) & _M4
    return ((x * _H01) >> np.uint64(56)).astype(np.uint8)


if hasattr(np, "bitwise_count"):

    def popcount(words: np.ndarray) -> np.ndarray:
        return np.bitwise_count(np.asarray(words, dtype=np.uint64))

else:  # pragma: no cover - numpy < 2.0
    popcount = popcount_portable


@dataclass(frozen=True)
class PackedBits:
    words: np.ndarray  # uint64, shape (..., ceil(logical_len / 64))
    logical_len: int

    def __post_init__(self):
        if self.words.shape[-1] != -(-self.logical_len // WORD):
            raise ValueError(f"{self.words.shape[-1]} words cannot hold {self.logical_len} bits")

    def unpack(self) -> np.ndarray:
        """Boolean array of the valid bits."""
        b = np.unpackbits(self.words.astype("<u8").view(np.uint8), axis=-1, bitorder="little")
        return b[..., : self.logical_len].astype(bool)

    def count(self) -> int:
        return int(popcount(self.words).sum())


def pack_bits(bits) -> PackedBits:
    """Pack a boolean array along its last axis."""
    bits = np.asarray(bits, dtype=bool)
    n = bits.shape[-1]
    nwords = -(-n // WORD)
    by = np.packbits(bits, axis=-1, bitorder="little")
    pad = nwords * 8 - by.shape[-1]
    if pad:
        by = np.concatenate([by, np.zeros(by.shape[:-1] + (pad,), np.uint8)], axis=-1)
    words = np.ascontiguousarray(by).view("<u8").astype(np.uint64)
    return PackedBits(words, n)


def pack_signs(x) -> PackedBits:
    """Bit j is 1 iff x_j >= 0 (sign(0) = +1)."""
    return pack_bits(np.asarray(x) >= 0)


def unpack_signs(p: PackedBits) -> np.ndarray:
    return np.where(p.unpack(), 1.0, -1.0).astype(DTYPE)


def _check_len(a: PackedBits, b: PackedBits) -> None:
    if a.logical_len != b.logical_len:
        raise ValueError(f"length mismatch: {a.logical_len} vs {b.logical_len}")


def xnor_dot(a: PackedBits, b: PackedBits) -> int:
    """Dot product of the +-1 vectors encoded by ``a`` and ``b``."""
    _check_len(a, b)
    # padding bits are zero in both operands, so they never differ
    mismatches = int(popcount(a.words ^ b.words).sum())
    return a.logical_len - 2 * mismatches


def masked_xnor_dot(a: PackedBits, b: PackedBits, mask: PackedBits) -> int:
    """+-1 dot product of ``a`` and ``b`` over the positions set in ``mask`` only."""
    _check_len(a, b)
    _check_len(a, mask)
    diff = int(popcount((a.words ^ b.words) & mask.words).sum())
    return mask.count() - 2 * diff


@dataclass(frozen=True)
class BitplaneActivations:
    planes: tuple[PackedBits, ...]  # plane b holds bit b of each level index
    delta: float
    nonzero_mask: PackedBits

    @classmethod
    def from_values(cls, x, spec: QuantizerSpec) -> "BitplaneActivations":
        idx = quantize_index_array(np.ravel(x), spec)
        return cls.from_indices(idx, spec)

    @classmethod
    def from_indices(cls, idx, spec: QuantizerSpec) -> "BitplaneActivations":
        if not packable(spec):
            raise ValueError("bitplanes need a uniform quantizer (or a single level)")
        idx = np.asarray(idx)
        planes = tuple(pack_bits((idx >> b) & 1) for b in range(spec.index_bits))
        return cls(planes, scale_of(spec), pack_bits(idx > 0))

    def indices(self) -> np.ndarray:
        out = np.zeros(self.nonzero_mask.logical_len, dtype=np.int64)
        for b, plane in enumerate(self.planes):
            out += plane.unpack().astype(np.int64) << b
        return out

    def reconstruct(self, dtype=DTYPE) -> np.ndarray:
        return (self.indices() * self.delta).astype(dtype)


def scale_of(spec: QuantizerSpec) -> float:
    """Step between consecutive levels; for m = 1 the single level itself."""
    return spec.delta if spec.uniform else spec.levels[0]


def integer_dot(act: BitplaneActivations, w: PackedBits) -> int:
    """Sum over positions of (level index) * (+-1 weight), from packed operands."""
    _check_len(act.nonzero_mask, w)
    acc = 0
    for b, plane in enumerate(act.planes):
        # nonzero_mask is all ones wherever the plane is set: sign(+x) = +1
        acc += masked_xnor_dot(act.nonzero_mask, w, plane) << b
    return acc


def quantized_binary_dot(act: BitplaneActivations, w: PackedBits, alpha: float) -> float:
    """alpha * delta * integer_dot, rounded once from the exact product."""
    acc = integer_dot(act, w)
    return float(Fraction(alpha) * Fraction(act.delta) * acc)


def binary_conv2d_packed(
    input_q: Tensor,
    state: BinaryWeightState,
    spec: QuantizerSpec,
    stride: int = 1,
    padding: int = 0,
    chunk: int = 4096,
) -> Tensor:
    """Binary-weight convolution of quantized activations with integer accumulation.

    Input patches are unfolded row-wise (im2row), each bit of the level index
    is packed into words along the k_h*k_w*C_in axis, and every output is
    ``alpha[c] * delta * sum_b 2^b (2 popcount(P_b & W_c) - popcount(P_b))``.
    Zero padding maps to level index 0 and so contributes nothing.
    """
    if not packable(spec):
        raise ValueError(
            "packed convolution needs a uniform quantizer or m = 1; "
            "use the float path (hwgq.layers.binary_conv2d without spec) for non-uniform levels"
        )
    master = state.master
    if input_q.ndim != 4 or master.ndim != 4 or input_q.shape[1] != master.shape[1]:
        raise ValueError(f"shape mismatch: input {input_q.shape}, filters {master.shape}")
    idx = quantize_index_array(input_q, spec)
    if not np.array_equal(level_table(spec, input_q.dtype)[idx], input_q):
        raise ValueError("input contains values outside the quantizer's output alphabet")
    co, _, kh, kw = master.shape
    n, _, h, w = input_q.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    rows = im2row(idx, kh, kw, stride, padding).reshape(n * ho * wo, -1)
    # weights flattened in the same (k_h, k_w, C_in) order as the patch rows
    wbits = pack_bits(filters_as_rows(state.binary) > 0).words  # (co, nw)
    planes = [pack_bits((rows >> b) & 1).words for b in range(spec.index_bits)]
    acc = np.zeros((rows.shape[0], co), dtype=np.int64)
    for start in range(0, rows.shape[0], chunk):
        sl = slice(start, start + chunk)
        for b, pw in enumerate(planes):
            p = pw[sl]
            hits = popcount(p[:, None, :] & wbits[None, :, :]).sum(axis=-1, dtype=np.int64)
            ones = popcount(p).sum(axis=-1, dtype=np.int64)
            acc[sl] += (2 * hits - ones[:, None]) << b
    scale = state.alpha.astype(np.float64) * scale_of(spec)
    out = acc.astype(np.float64) * scale[None, :]
    return np.ascontiguousarray(out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2), dtype=DTYPE)


# --------------------------------------------------------------------------
# benchmark
# --------------------------------------------------------------------------

BENCH_FIELDS = ("size", "path", "ns_per_call", "gops", "checksum")


def _time_call(fn, min_time: float) -> float:
    fn()
    calls, start = 0, time.perf_counter()
    while True:
        fn()
        calls += 1
        elapsed = time.perf_counter() - start
        if elapsed >= min_time:
            return elapsed * 1e9 / calls


def bench_kernels(sizes, seed: int = 0, min_time: float = 0.05) -> list[dict]:
    """Time a float +-1 dot product against the packed XNOR/popcount dot.

    One row per (size, path); ``gops`` counts one multiply-accumulate per
    element. Checksums are the dot products and must agree between paths.
    """
    rows = []
    rng = Rng(seed)
    for n in sizes:
        a = np.where(rng.uniform(n) < 0.5, -1.0, 1.0).astype(DTYPE)
        b = np.where(rng.uniform(n) < 0.5, -1.0, 1.0).astype(DTYPE)
        pa, pb = pack_signs(a), pack_signs(b)
        results = {
            "float": (lambda: float(np.dot(a, b))),
            "packed": (lambda: xnor_dot(pa, pb)),
        }
        for path, fn in results.items():
            ns = _time_call(fn, min_time)
            rows.append(
                {
                    "size": int(n),
                    "path": path,
                    "ns_per_call": round(ns, 1),
                    "gops": round(n / ns, 4),
                    "checksum": int(fn()),
                }
            )
    return rows


def write_bench_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
