"""Half-wave quantizer design and application.

A half-wave quantizer maps ``x <= 0`` to 0 and ``x`` in ``(t_i, t_{i+1}]``
to the positive level ``q_i`` (``t_1 = 0``, ``t_{m+1} = inf``). Designs are
fitted to the positive part of a sample set only; the zero branch is fixed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import DTYPE, Rng, gaussian_samples

DEFAULT_SAMPLES = 1_000_000
DEFAULT_SEED = 0
DEFAULT_TOL = 0.0  # run to the exact fixed point of the partition
DEFAULT_MAX_ITERS = 1000


@dataclass(frozen=True)
class QuantizerSpec:
    levels: tuple[float, ...]
    thresholds: tuple[float, ...]  # t_1 = 0 ... t_{m+1} = inf
    uniform: bool = False
    delta: float | None = None
    mse: float = float("nan")
    seed: int | None = None
    sample_count: int | None = None
    iterations: int = field(default=0, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(float(q) for q in self.levels))
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        self.validate()

    @property
    def m(self) -> int:
        return len(self.levels)

    @property
    def top(self) -> float:
        """Largest level q_m (the clipping point of the clipped/log-tailed backward)."""
        return self.levels[-1]

    @property
    def index_bits(self) -> int:
        return max(1, math.ceil(math.log2(self.m + 1)))

    def validate(self) -> None:
        q, t = self.levels, self.thresholds
        if not q:
            raise ValueError("quantizer needs at least one level")
        if len(t) != len(q) + 1:
            raise ValueError(f"expected {len(q) + 1} thresholds, got {len(t)}")
        if t[0] != 0.0 or t[-1] != math.inf:
            raise ValueError("thresholds must start at 0 and end at +inf")
        if q[0] <= 0 or any(b <= a for a, b in zip(q, q[1:])):
            raise ValueError(f"levels must be positive and strictly increasing: {q}")
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError(f"thresholds must be strictly increasing: {t}")
        for i in range(1, len(q)):
            if abs(t[i] - 0.5 * (q[i - 1] + q[i])) > 1e-6:
                raise ValueError(f"threshold t_{i + 1} = {t[i]} is not the midpoint of its neighbouring levels")
        if self.uniform:
            if self.delta is None or not self.delta > 0:
                raise ValueError("uniform quantizer requires delta > 0")
            for i, qi in enumerate(q, start=1):
                if abs(qi - i * self.delta) > 1e-9:
                    raise ValueError(f"level {i} = {qi} is not {i} * delta")

    def to_json(self) -> str:
        def num(v):
            if v is None:
                return "null"
            if v == math.inf:
                return '"inf"'
            return "%.17g" % v

        def arr(vs):
            return "[" + ", ".join(num(v) for v in vs) + "]"

        lines = [
            f'  "m": {self.m}',
            f'  "uniform": {"true" if self.uniform else "false"}',
            f'  "delta": {num(self.delta)}',
            f'  "levels": {arr(self.levels)}',
            f'  "thresholds": {arr(self.thresholds)}',
            f'  "mse": {num(self.mse)}',
            f'  "seed": {"null" if self.seed is None else int(self.seed)}',
            f'  "sample_count": {"null" if self.sample_count is None else int(self.sample_count)}',
        ]
        return "{\n" + ",\n".join(lines) + "\n}\n"

    @classmethod
    def from_json(cls, text: str) -> "QuantizerSpec":
        d = json.loads(text)
        thresholds = [math.inf if t == "inf" else t for t in d["thresholds"]]
        spec = cls(
            levels=d["levels"],
            thresholds=thresholds,
            uniform=bool(d["uniform"]),
            delta=d.get("delta"),
            mse=d.get("mse", float("nan")),
            seed=d.get("seed"),
            sample_count=d.get("sample_count"),
        )
        if spec.m != d["m"]:
            raise ValueError(f"document says m={d['m']} but lists {spec.m} levels")
        return spec

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "QuantizerSpec":
        return cls.from_json(Path(path).read_text())


class _SortedSamples:
    """Positive samples, sorted, with prefix sums for O(log n) cell statistics."""

    def __init__(self, samples, m: int):
        x = np.asarray(samples, dtype=np.float64).ravel()
        if x.size == 0:
            raise ValueError("samples must be non-empty")
        if m < 1:
            raise ValueError(f"m must be >= 1, got {m}")
        x = np.sort(x[x > 0])
        if x.size == 0 or np.count_nonzero(np.diff(x)) + 1 < m:
            raise ValueError(f"need at least {m} distinct positive samples")
        self.x = x
        self.n = x.size
        self.s1 = np.concatenate([[0.0], np.cumsum(x)])
        self.s2 = np.concatenate([[0.0], np.cumsum(x * x)])

    def bounds(self, interior) -> np.ndarray:
        # cell i holds x in (t_i, t_{i+1}]: the split index counts x <= t
        cut = np.searchsorted(self.x, interior, side="right")
        return np.concatenate([[0], cut, [self.n]])

    def cell_sums(self, b):
        return np.diff(b), np.diff(self.s1[b]), np.diff(self.s2[b])

    def mse(self, levels, b) -> float:
        cnt, s1, s2 = self.cell_sums(b)
        levels = np.asarray(levels)
        return float(np.sum(s2 - 2.0 * levels * s1 + levels * levels * cnt) / self.n)

    def initial_levels(self, m: int) -> np.ndarray:
        probs = (2.0 * np.arange(1, m + 1) - 1.0) / (2.0 * m)
        return np.quantile(self.x, probs)


def _midpoints(levels) -> np.ndarray:
    levels = np.asarray(levels)
    return 0.5 * (levels[:-1] + levels[1:])


def _spec(levels, interior, mse, *, uniform=False, delta=None, seed=None, n=None, iters=0):
    return QuantizerSpec(
        levels=tuple(levels),
        thresholds=(0.0, *interior, math.inf),
        uniform=uniform,
        delta=delta,
        mse=mse,
        seed=seed,
        sample_count=n,
        iterations=iters,
    )


def lloyd_design(
    samples,
    m: int,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
    *,
    seed: int | None = None,
    history: list | None = None,
) -> QuantizerSpec:
    """MSE-optimal non-uniform half-wave quantizer by Lloyd's algorithm.

    Negative and zero samples are discarded. Levels start at the
    (2i-1)/(2m) quantiles of the positive samples; each iteration replaces
    every level by the mean of its cell and then every interior threshold by
    the midpoint of its neighbouring levels. Iteration stops when the
    partition of the samples no longer changes (an exact fixed point), when
    the MSE improves by less than ``tol``, or after ``max_iters`` rounds.

    An empty cell has its level moved to the sample with the largest current
    quantization error.

    If ``history`` is a list, the MSE after every iteration is appended to it.
    """
    data = _SortedSamples(samples, m)
    levels = data.initial_levels(m)
    interior = _midpoints(levels)
    b = data.bounds(interior)
    prev = data.mse(levels, b)
    iters = 0
    for iters in range(1, max_iters + 1):
        cnt, s1, _ = data.cell_sums(b)
        new = levels.copy()
        full = cnt > 0
        new[full] = s1[full] / cnt[full]
        if not full.all():
            new = _refill_empty(data, new, b, full)
        levels = new
        interior = _midpoints(levels)
        new_b = data.bounds(interior)
        cur = data.mse(levels, new_b)
        if history is not None:
            history.append(cur)
        # an unchanged partition is an exact fixed point
        done = np.array_equal(new_b, b) or prev - cur < tol
        b, prev = new_b, cur
        if done:
            break
    return _spec(levels, interior, prev, seed=seed, n=data.n, iters=iters)


def _refill_empty(data: _SortedSamples, levels, b, full) -> np.ndarray:
    levels = levels.copy()
    for i in np.flatnonzero(~full):
        # worst-served sample: the extreme ends of the occupied cells
        err = -1.0
        worst = levels[i]
        for j in np.flatnonzero(full):
            for k in (b[j], b[j + 1] - 1):
                e = abs(data.x[k] - levels[j])
                if e > err:
                    err, worst = e, data.x[k]
        levels[i] = worst
        full = full.copy()
        full[i] = True
    levels = np.unique(levels)
    if levels.size < len(full):
        # duplicates collapsed: pad with the largest samples not yet used
        extra = [v for v in data.x[::-1] if v not in levels][: len(full) - levels.size]
        levels = np.sort(np.concatenate([levels, extra]))
    return levels


def uniform_design(
    samples,
    m: int,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
    *,
    seed: int | None = None,
    history: list | None = None,
) -> QuantizerSpec:
    """MSE-optimal half-wave quantizer with levels ``q_i = i * delta``.

    Alternates nearest-level assignment (thresholds at ``(i + 1/2) delta``,
    the last cell unbounded) with the least-squares step update
    ``delta = sum(i_x * x) / sum(i_x ** 2)``.
    """
    data = _SortedSamples(samples, m)
    idx = np.arange(1, m + 1, dtype=np.float64)
    q0 = data.initial_levels(m)
    delta = float(np.dot(idx, q0) / np.dot(idx, idx))
    b = data.bounds((idx[:-1] + 0.5) * delta)
    prev = data.mse(idx * delta, b)
    iters = 0
    for iters in range(1, max_iters + 1):
        cnt, s1, _ = data.cell_sums(b)
        delta = float(np.dot(idx, s1) / np.dot(idx * idx, cnt))
        new_b = data.bounds((idx[:-1] + 0.5) * delta)
        cur = data.mse(idx * delta, new_b)
        if history is not None:
            history.append(cur)
        done = np.array_equal(new_b, b) or prev - cur < tol
        b, prev = new_b, cur
        if done:
            break
    levels = idx * delta
    interior = (idx[:-1] + 0.5) * delta
    return _spec(levels, interior, prev, uniform=True, delta=delta, seed=seed, n=data.n, iters=iters)


def design(
    m: int,
    uniform: bool = False,
    n: int = DEFAULT_SAMPLES,
    seed: int = DEFAULT_SEED,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
) -> QuantizerSpec:
    """Design a quantizer for the standard Gaussian from ``n`` seeded draws."""
    samples = gaussian_samples(Rng(seed), n)
    fn = uniform_design if uniform else lloyd_design
    spec = fn(samples, m, max_iters, tol, seed=seed)
    return spec


def quantize(x: float, spec: QuantizerSpec) -> float:
    i = quantize_index(x, spec)
    return 0.0 if i == 0 else spec.levels[i - 1]


def quantize_index(x: float, spec: QuantizerSpec) -> int:
    """Cell index of ``x``: 0 for ``x <= 0``, else i with x in (t_i, t_{i+1}]."""
    if not x > 0:
        return 0
    t = spec.thresholds
    for i in range(1, spec.m):
        if x <= t[i]:
            return i
    return spec.m


def quantize_index_array(x: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    """Vectorised :func:`quantize_index`; returns a uint8 array shaped like ``x``."""
    x = np.asarray(x)
    interior = np.asarray(spec.thresholds[1:-1], dtype=np.float64)
    idx = np.searchsorted(interior, x.astype(np.float64), side="left") + 1
    idx[~(x > 0)] = 0
    return idx.astype(np.uint8)


def level_table(spec: QuantizerSpec, dtype=DTYPE) -> np.ndarray:
    """Lookup table mapping a cell index to its output value (index 0 -> 0)."""
    return np.array((0.0, *spec.levels), dtype=np.float64).astype(dtype)


def quantize_array(x: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    x = np.asarray(x)
    dtype = x.dtype if x.dtype.kind == "f" else DTYPE
    return level_table(spec, dtype)[quantize_index_array(x, spec)]
