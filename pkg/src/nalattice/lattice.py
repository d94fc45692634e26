"""Multi-index arithmetic and partial sums over boxes of the lattice N^d.

Indices in the public API are 1-based, so the box ``{k : k <= n}`` starts at
``(1, ..., 1)``.  Arrays are stored 0-based in C order (last coordinate
fastest).  All logarithms use the clipped convention ``log x = ln(max(x, e))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Iterator, Sequence

import mpmath
import numpy as np

MAX_DIM = 8
INT64_MAX = 2**63 - 1


@dataclass(frozen=True)
class MultiIndex:
    """A point ``n = (n_1, ..., n_d)`` of the positive integer lattice."""

    coords: tuple[int, ...]

    def __post_init__(self):
        coords = tuple(int(c) for c in self.coords)
        if not coords:
            raise ValueError("a multi-index needs at least one coordinate")
        if any(c < 1 for c in coords):
            raise ValueError(f"coordinates must be >= 1, got {coords}")
        object.__setattr__(self, "coords", coords)

    @classmethod
    def of(cls, value: "MultiIndex | Iterable[int] | int | str") -> "MultiIndex":
        if isinstance(value, MultiIndex):
            return value
        if isinstance(value, str):
            return cls.parse(value)
        if isinstance(value, (int, np.integer)):
            return cls((int(value),))
        return cls(tuple(value))

    @classmethod
    def parse(cls, text: str) -> "MultiIndex":
        """Parse the shell form ``n1xn2x...xnd`` (e.g. ``32x32``)."""
        parts = text.strip().lower().split("x")
        try:
            return cls(tuple(int(p) for p in parts))
        except ValueError as exc:
            raise ValueError(f"bad shape {text!r}; expected e.g. 32x32") from exc

    @classmethod
    def diagonal(cls, value: int, d: int) -> "MultiIndex":
        return cls((value,) * d)

    @property
    def d(self) -> int:
        return len(self.coords)

    @property
    def size(self) -> int:
        """``|n| = n_1 * ... * n_d``."""
        return math.prod(self.coords)

    @property
    def norm1(self) -> int:
        """``||n|| = n_1 + ... + n_d``."""
        return sum(self.coords)

    def le(self, other: "MultiIndex") -> bool:
        """Componentwise order ``self <= other``."""
        other = MultiIndex.of(other)
        self._check_dim(other)
        return all(a <= b for a, b in zip(self.coords, other.coords))

    def __le__(self, other):
        return self.le(other)

    def __ge__(self, other):
        return MultiIndex.of(other).le(self)

    def __add__(self, other: "MultiIndex") -> "MultiIndex":
        other = MultiIndex.of(other)
        self._check_dim(other)
        return MultiIndex(tuple(a + b for a, b in zip(self.coords, other.coords)))

    def scale(self, other: "MultiIndex | int") -> "MultiIndex":
        """Componentwise product ``k n`` (or ``k m`` for an integer ``m``)."""
        if isinstance(other, (int, np.integer)):
            return MultiIndex(tuple(c * int(other) for c in self.coords))
        other = MultiIndex.of(other)
        self._check_dim(other)
        return MultiIndex(tuple(a * b for a, b in zip(self.coords, other.coords)))

    def __iter__(self) -> Iterator[int]:
        return iter(self.coords)

    def __len__(self) -> int:
        return len(self.coords)

    def __str__(self) -> str:
        return "x".join(str(c) for c in self.coords)

    def _check_dim(self, other: "MultiIndex") -> None:
        if other.d != self.d:
            raise ValueError(f"dimension mismatch: {self.d} vs {other.d}")


@dataclass(frozen=True)
class Field:
    """A realized sample ``{X_k : k <= shape}`` with flat C-order values."""

    shape: MultiIndex
    values: np.ndarray

    def __post_init__(self):
        shape = MultiIndex.of(self.shape)
        values = np.asarray(self.values)
        if values.dtype.kind not in "iuf":
            values = values.astype(np.float64)
        values = values.reshape(-1)
        if values.size != shape.size:
            raise ValueError(
                f"field has {values.size} values but shape {shape} needs {shape.size}"
            )
        if values.dtype.kind == "f" and not np.all(np.isfinite(values)):
            raise ValueError("field values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_array(cls, array) -> "Field":
        array = np.asarray(array)
        if array.ndim == 0:
            array = array.reshape(1)
        return cls(MultiIndex(array.shape), array.reshape(-1))

    @property
    def d(self) -> int:
        return self.shape.d

    @property
    def array(self) -> np.ndarray:
        return self.values.reshape(self.shape.coords)

    def __getitem__(self, k) -> float:
        k = MultiIndex.of(k)
        return self.array[tuple(c - 1 for c in k)]


@dataclass(frozen=True)
class PartialSumSummary:
    """``S_n``, ``M_n = max |T_k|``, ``max T_k`` and ``max T_k^2`` over ``k <= n``."""

    total: float
    max_abs: float
    max_signed: float
    second_moment_proxy: float


def _check_dim(d: int) -> None:
    if d > MAX_DIM:
        raise ValueError(f"dimension {d} exceeds the supported maximum {MAX_DIM}")


def _acc_dtype(dtype: np.dtype) -> np.dtype:
    return np.dtype(np.int64) if dtype.kind in "iu" else np.dtype(np.float64)


def _slab_prefix(slab: np.ndarray, dtype) -> np.ndarray:
    out = np.asarray(slab, dtype=dtype)
    for axis in range(out.ndim):
        out = np.cumsum(out, axis=axis, dtype=dtype)
    return out


class PrefixScanner:
    """Streaming prefix-sum engine fed one hyperplane (first coordinate) at a time.

    Keeps a running plane of prefix sums over the remaining ``d - 1`` axes, so
    memory is ``O(|n| / n_1)``.  Float planes are accumulated with Kahan
    compensation across slabs; integer planes are exact in int64.

    ``push`` returns the plane of ``T_k`` for the slab just consumed.
    """

    def __init__(self, plane_shape: Sequence[int], dtype=np.float64, track_max: bool = False):
        self.plane_shape = tuple(int(c) for c in plane_shape)
        _check_dim(len(self.plane_shape) + 1)
        self.dtype = _acc_dtype(np.dtype(dtype))
        self.plane = np.zeros(self.plane_shape, dtype=self.dtype)
        self._comp = np.zeros(self.plane_shape, dtype=self.dtype) if self.dtype.kind == "f" else None
        self.rows = 0
        self.max_abs = 0.0
        self.max_signed = -math.inf
        self.min_signed = math.inf
        # prefix maxima of |T| over the box seen so far, as a plane
        self.max_plane = np.zeros(self.plane_shape, dtype=np.float64) if track_max else None

    def push(self, slab: np.ndarray) -> np.ndarray:
        slab = np.asarray(slab)
        if slab.shape != self.plane_shape:
            raise ValueError(f"slab shape {slab.shape} != plane shape {self.plane_shape}")
        inc = _slab_prefix(slab, self.dtype)
        if self._comp is None:
            self.plane = self.plane + inc
        else:
            y = inc - self._comp
            t = self.plane + y
            self._comp = (t - self.plane) - y
            self.plane = t
        self.rows += 1
        if self.plane.size:
            hi = float(self.plane.max())
            lo = float(self.plane.min())
            self.max_signed = max(self.max_signed, hi)
            self.min_signed = min(self.min_signed, lo)
            self.max_abs = max(self.max_abs, hi, -lo)
        if self.max_plane is not None:
            running = np.abs(self.plane).astype(np.float64)
            for axis in range(running.ndim):
                running = np.maximum.accumulate(running, axis=axis)
            np.maximum(self.max_plane, running, out=self.max_plane)
        return self.plane

    def summary(self) -> PartialSumSummary:
        if self.rows == 0:
            raise ValueError("no slabs consumed")
        total = self.plane[(-1,) * self.plane.ndim] if self.plane.ndim else self.plane
        return PartialSumSummary(
            total=float(total),
            max_abs=float(self.max_abs),
            max_signed=float(self.max_signed),
            second_moment_proxy=float(self.max_abs) ** 2,
        )


def partial_sums_scan(field: Field) -> PartialSumSummary:
    """Single pass over the field computing ``S_n``, ``M_n`` and ``max T_k``.

    Cells are visited in lexicographic order one hyperplane at a time.  The
    in-plane prefix is separable (one cumulative sum per axis), which gives the
    same ``T_k`` as the ``2^d``-term inclusion-exclusion recurrence.
    """
    _check_dim(field.d)
    arr = field.array
    scanner = PrefixScanner(arr.shape[1:], dtype=arr.dtype)
    for slab in arr:
        scanner.push(slab)
    return scanner.summary()


def batch_partial_sums(values: np.ndarray) -> dict[str, np.ndarray]:
    """Vectorized summaries for a batch of fields with shape ``(reps, *shape)``.

    Returns arrays ``total``, ``max_abs`` and ``max_signed`` of length ``reps``.
    Integer input is accumulated exactly in int64.
    """
    values = np.asarray(values)
    if values.ndim < 2:
        raise ValueError("expected a batch with shape (reps, *shape)")
    _check_dim(values.ndim - 1)
    dtype = _acc_dtype(values.dtype)
    # int8 cells sum to at most 127 * |n| in magnitude
    if values.dtype.itemsize == 1 and values.dtype.kind in "iu" and values[0].size < 2**24:
        dtype = np.dtype(np.int32)
    t = values
    for axis in range(1, values.ndim):
        t = np.cumsum(t, axis=axis, dtype=dtype)
    flat = t.reshape(t.shape[0], -1)
    hi = flat.max(axis=1)
    lo = flat.min(axis=1)
    return {
        "total": flat[:, -1].astype(np.float64),
        "max_abs": np.maximum(hi, -lo).astype(np.float64),
        "max_signed": hi.astype(np.float64),
    }


class PrefixTable:
    """Retained prefix-sum table ``T`` padded with a zero layer on each axis.

    ``table[k]`` (0-based on the padded array) equals ``T_k`` for the 1-based
    multi-index ``k``; ``table[..0..] = 0``.
    """

    def __init__(self, field: Field):
        _check_dim(field.d)
        self.shape = field.shape
        dtype = _acc_dtype(field.values.dtype)
        t = np.zeros(tuple(c + 1 for c in field.shape.coords), dtype=dtype)
        inner = tuple(slice(1, None) for _ in range(field.d))
        t[inner] = _slab_prefix(field.array, dtype)
        self.table = t

    def T(self, k) -> float:
        k = MultiIndex.of(k)
        self._check_range(k)
        return float(self.table[k.coords])

    def rectangle_sum(self, lo, hi) -> float:
        """Sum of ``X_k`` over ``lo <= k <= hi`` by ``2^d`` inclusion-exclusion."""
        lo, hi = MultiIndex.of(lo), MultiIndex.of(hi)
        if not lo.le(hi):
            raise ValueError(f"need lo <= hi, got {lo} and {hi}")
        self._check_range(hi)
        d = lo.d
        total = 0
        for corner in range(1 << d):
            idx = []
            sign = 1
            for axis in range(d):
                if corner >> axis & 1:
                    idx.append(lo.coords[axis] - 1)
                    sign = -sign
                else:
                    idx.append(hi.coords[axis])
            total += sign * self.table[tuple(idx)]
        return float(total)

    def increment_max(self, base, delta_shape) -> float:
        """``max_{1 <= k <= delta} |T_{base+k} - T_base|``."""
        base, delta = MultiIndex.of(base), MultiIndex.of(delta_shape)
        self._check_range(base + delta)
        window = tuple(slice(b + 1, b + dl + 1) for b, dl in zip(base.coords, delta.coords))
        diffs = self.table[window] - self.table[base.coords]
        return float(np.abs(diffs).max())

    def _check_range(self, k: MultiIndex) -> None:
        if k.d != self.shape.d or not k.le(self.shape):
            raise IndexError(f"index {k} outside box {self.shape}")


def rectangle_sum(field: Field, lo, hi) -> float:
    return PrefixTable(field).rectangle_sum(lo, hi)


def increment_max(field: Field, base, delta_shape) -> float:
    """Largest ``|S_{base+k} - S_base|`` over ``1 <= k <= delta_shape``."""
    return PrefixTable(field).increment_max(base, delta_shape)


def clipped_log(x):
    """``log x = ln(max(x, e))``; works on scalars and arrays."""
    if np.ndim(x):
        return np.log(np.maximum(np.asarray(x, dtype=np.float64), math.e))
    return math.log(max(float(x), math.e))


def loglog_norm(n, d: int | None = None):
    """LIL normalizer ``sqrt(2 d |n| log log |n|)`` with clipped logs.

    ``n`` may be a MultiIndex or a cell count (scalar or array).
    """
    if isinstance(n, MultiIndex):
        size = n.size
        d = n.d if d is None else d
    else:
        size = n
        if d is None:
            raise ValueError("d is required when n is a cell count")
    return np.sqrt(2.0 * d * np.asarray(size, dtype=np.float64) * clipped_log(clipped_log(size))) \
        if np.ndim(size) else math.sqrt(2.0 * d * size * clipped_log(clipped_log(size)))


@dataclass(frozen=True)
class BlockEntry:
    k: int
    m: int
    p: int
    N: int

    def big_blocks(self) -> list[tuple[int, int]]:
        """1-based closed intervals of the ``k^4`` big blocks of length ``m``,
        each followed by a gap of length ``p``."""
        step = self.m + self.p
        return [(i * step + 1, i * step + self.m) for i in range(self.k**4)]


@dataclass(frozen=True)
class BlockSchedule:
    epsilon: float
    entries: tuple[BlockEntry, ...]


def blocking_schedule(epsilon: float, k_max: int) -> BlockSchedule:
    """Big-block / gap schedule ``m_k = [2^{k^{1+eps}}]``, ``p_k = [k^-2 2^{k^{1+eps}}]``,
    ``N_k = (m_k + p_k) k^4`` for ``k = 1..k_max``.

    Floors are taken at 60 significant digits so the integers are exact.
    Raises OverflowError once ``N_k`` no longer fits in a signed 64-bit integer.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    entries = []
    with mpmath.workdps(60):
        eps = mpmath.mpf(epsilon)
        for k in range(1, k_max + 1):
            power = mpmath.power(2, mpmath.power(k, 1 + eps))
            m = int(mpmath.floor(power))
            p = int(mpmath.floor(power / k**2))
            N = (m + p) * k**4
            if N > INT64_MAX:
                raise OverflowError(f"N_{k} = {N} exceeds the 64-bit integer range")
            entries.append(BlockEntry(k, m, p, N))
    return BlockSchedule(float(epsilon), tuple(entries))


def geometric_subsequence(theta: float, d: int, k_max: int) -> list[MultiIndex]:
    """Diagonal points ``([theta^k], ..., [theta^k])``, ``k = 1..k_max``, deduplicated.

    Powers are floored in exact rational arithmetic.
    """
    if not theta > 1:
        raise ValueError(f"theta must be > 1, got {theta}")
    base = Fraction(theta)
    out: list[MultiIndex] = []
    last = None
    power = Fraction(1)
    for _ in range(k_max):
        power *= base
        side = math.floor(power)
        if side != last:
            out.append(MultiIndex.diagonal(side, d))
            last = side
    return out
