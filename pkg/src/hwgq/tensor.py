"""Dense float32 tensors and the full-precision reference operations.

Tensors are plain ``numpy.ndarray`` objects in row-major NCHW layout with
``float32`` elements. Reductions inside ``conv2d`` and ``matmul`` accumulate
in float64 by default and round once to float32 on the way out; callers that
trade accuracy for speed (the training loop) may pass ``acc=np.float32``.
"""

from __future__ import annotations

import contextlib
from typing import Iterator

import numpy as np

Tensor = np.ndarray

DTYPE = np.float32
ACC = np.float64  # accumulator type inside conv2d/matmul reductions


def as_tensor(x, shape=None) -> Tensor:
    """Return ``x`` as a contiguous float32 array, optionally reshaped."""
    t = np.ascontiguousarray(x, dtype=DTYPE)
    if shape is not None:
        t = t.reshape(shape)
    return t


class Rng:
    """Seeded pseudorandom stream built on numpy's PCG64 bit generator.

    Uniform draws come straight from PCG64 (``Generator.random``, 53-bit
    doubles). Gaussian draws use the Box-Muller transform on pairs of those
    uniforms so that the normal stream is a documented function of the
    uniform stream rather than an implementation detail of numpy.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, n: int) -> np.ndarray:
        return self._gen.random(n)

    def normal(self, n: int) -> np.ndarray:
        """``n`` standard-normal float64 draws via Box-Muller.

        Each pair of uniforms (u1, u2) yields ``r cos(2 pi u2)`` and
        ``r sin(2 pi u2)`` with ``r = sqrt(-2 log(1 - u1))``; draws are
        interleaved cos, sin, cos, sin, ...
        """
        pairs = (n + 1) // 2
        u = self._gen.random(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        out = np.empty((pairs, 2))
        out[:, 0] = r * np.cos(theta)
        out[:, 1] = r * np.sin(theta)
        return out.reshape(-1)[:n]

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self, *keys: int) -> "Rng":
        """Child stream keyed on ``(seed, *keys)``; independent of this stream's position."""
        child = Rng.__new__(Rng)
        child.seed = self.seed
        child._gen = np.random.Generator(np.random.PCG64([self.seed, *keys]))
        return child

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state

    @state.setter
    def state(self, value: dict) -> None:
        self._gen.bit_generator.state = value


def gaussian_samples(rng: Rng, n: int) -> Tensor:
    """Draw ``n`` i.i.d. standard-normal samples as a float32 tensor."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return rng.normal(n).astype(DTYPE)


@contextlib.contextmanager
def deterministic() -> Iterator[None]:
    """Pin BLAS to one thread so float reductions run in a fixed order."""
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def matmul(a: Tensor, b: Tensor, acc=ACC) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    return (a.astype(acc) @ b.astype(acc)).astype(DTYPE)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _check_conv(input: Tensor, filters: Tensor, stride: int, padding: int) -> None:
    if input.ndim != 4 or filters.ndim != 4:
        raise ValueError(
            f"conv2d expects NCHW input and OIHW filters, got input {input.shape} "
            f"and filters {filters.shape}"
        )
    if input.shape[1] != filters.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input {input.shape} has {input.shape[1]} channels, "
            f"filters {filters.shape} expect {filters.shape[1]}"
        )
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    h = input.shape[2] + 2 * padding
    w = input.shape[3] + 2 * padding
    if filters.shape[2] > h or filters.shape[3] > w:
        raise ValueError(
            f"conv2d kernel larger than padded input: input {input.shape}, filters {filters.shape}"
        )


def im2row(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Unfold NCHW ``x`` into patch rows of shape (N, H', W', kh*kw*C).

    The innermost axis is ordered (kernel row, kernel column, channel),
    matching :func:`filters_as_rows`. Patches are gathered from an NHWC copy
    so every inner copy moves a contiguous run of channels.
    """
    xh = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    if padding:
        xh = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    n, h, w, c = xh.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sn, sh, sw, sc = xh.strides
    win = np.lib.stride_tricks.as_strided(
        xh, (n, ho, wo, kh, kw, c), (sn, sh * stride, sw * stride, sh, sw, sc), writeable=False
    )
    return win.reshape(n, ho, wo, kh * kw * c)


def filters_as_rows(filters: np.ndarray) -> np.ndarray:
    """OIHW filters as (C_out, kh*kw*C_in), in :func:`im2row` order."""
    return filters.transpose(0, 2, 3, 1).reshape(filters.shape[0], -1)


def row2im(rows: np.ndarray, input_shape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2row`: scatter-add patch rows back onto an NCHW array."""
    n, c, h, w = input_shape
    ho, wo = rows.shape[1], rows.shape[2]
    cols = rows.reshape(n, ho, wo, kh, kw, c)
    out = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=rows.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += cols[:, :, :, i, j, :]
    out = out[:, padding : padding + h, padding : padding + w, :]
    return out.transpose(0, 3, 1, 2)


def conv2d(input: Tensor, filters: Tensor, stride: int = 1, padding: int = 0, acc=ACC) -> Tensor:
    """Cross-correlation of NCHW ``input`` with OIHW ``filters`` (no flip).

    ``acc`` is the dtype the patch products are summed in.
    """
    _check_conv(input, filters, stride, padding)
    _, _, kh, kw = filters.shape
    rows = im2row(input.astype(acc, copy=False), kh, kw, stride, padding)
    return conv2d_rows(rows, filters, acc)


def conv2d_rows(rows: np.ndarray, filters: Tensor, acc=ACC) -> Tensor:
    """:func:`conv2d` on patch rows already unfolded by :func:`im2row`."""
    out = rows @ filters_as_rows(filters).astype(acc).T  # N, H', W', C_out
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2), dtype=DTYPE)


def conv2d_backward(
    grad_out: Tensor,
    input: Tensor,
    filters: Tensor,
    stride: int = 1,
    padding: int = 0,
    acc=ACC,
    rows: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """Gradients of :func:`conv2d` w.r.t. its input and its filters.

    ``rows`` may carry the forward pass's :func:`im2row` unfolding of ``input``.
    """
    co, ci, kh, kw = filters.shape
    g = grad_out.transpose(0, 2, 3, 1).astype(acc).reshape(-1, co)  # N*H'*W', C_out
    if rows is None:
        rows = im2row(input.astype(acc, copy=False), kh, kw, stride, padding)
    ho, wo = rows.shape[1:3]
    grad_w = (g.T @ rows.reshape(g.shape[0], -1).astype(acc, copy=False)).reshape(co, kh, kw, ci)
    grad_rows = (g @ filters_as_rows(filters).astype(acc)).reshape(input.shape[0], ho, wo, -1)
    grad_x = row2im(grad_rows, input.shape, kh, kw, stride, padding)
    return (
        np.ascontiguousarray(grad_x, dtype=DTYPE),
        np.ascontiguousarray(grad_w.transpose(0, 3, 1, 2), dtype=DTYPE),
    )


def _pool_geometry(input: Tensor, k: int, stride: int) -> tuple[int, int]:
    if k < 1 or stride < 1:
        raise ValueError(f"invalid pooling window k={k}, stride={stride}")
    if input.ndim != 4:
        raise ValueError(f"max_pool2d expects NCHW input, got shape {input.shape}")
    if k > input.shape[2] or k > input.shape[3]:
        raise ValueError(f"pooling window {k}x{k} larger than input {input.shape}")
    return (input.shape[2] - k) // stride + 1, (input.shape[3] - k) // stride + 1


def _window_offsets(input: Tensor, k: int, stride: int, ho: int, wo: int):
    """Yield (di, dj, view) for each window offset, in row-major order."""
    for di in range(k):
        for dj in range(k):
            yield di, dj, input[:, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride]


def max_pool2d(input: Tensor, k: int, stride: int | None = None) -> Tensor:
    stride = k if stride is None else stride
    ho, wo = _pool_geometry(input, k, stride)
    out = None
    for _, _, view in _window_offsets(input, k, stride, ho, wo):
        out = view.copy() if out is None else np.maximum(out, view, out=out)
    return out


def max_pool2d_backward(grad_out: Tensor, input: Tensor, k: int, stride: int | None = None) -> Tensor:
    """Route each output gradient to its window's argmax (first index on ties)."""
    stride = k if stride is None else stride
    ho, wo = _pool_geometry(input, k, stride)
    top = max_pool2d(input, k, stride)
    taken = np.zeros(top.shape, dtype=bool)
    grad = np.zeros_like(input, dtype=grad_out.dtype)
    for di, dj, view in _window_offsets(input, k, stride, ho, wo):
        hit = (view == top) & ~taken
        taken |= hit
        target = grad[:, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride]
        target += np.where(hit, grad_out, 0)
    return grad
