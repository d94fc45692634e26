"""Negatively associated field sources with known covariance structure.

Kinds
-----
``IidNormal(variance)``, ``IidRademacher()``, ``IidHeavyTail(a, q)``
    Independent cells (independence implies NA).
``GaussianNearestNeighbor(rho)``
    Stationary Gaussian field with ``Cov(X_i, X_j) = 1`` on the diagonal,
    ``-rho`` for nearest neighbours and 0 otherwise.  A Gaussian vector with
    nonpositive off-diagonal covariances is NA.  Sampled exactly by circulant
    embedding on a torus of side ``n_i + 2`` (rounded up to a fast FFT length).
``Multinomial(total_balls)``
    ``total_balls`` balls dropped uniformly into the cells; cell counts
    centred by their exact mean.  Multinomial counts are NA.
``TruncatedCentered(inner, level | schedule_epsilon)``
    ``g_b(X) - E g_b(X)`` with ``g_b(x) = max(-b, min(x, b))``.  ``g_b`` is
    nondecreasing, so NA is preserved.  The level is either fixed or follows
    ``b_m = (eps/40) (E X^2)^{1/2} (m / log log m)^{1/2}`` with ``m = |k|``.

Heavy tails use ``P(|X| > x) = min(1, x^{-a} (log x)^{-q})`` with a symmetric
sign (``q >= 0``, clipped log), which is a proper law with constant 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, Union

import numpy as np
from scipy import fft as sfft
from scipy import integrate, special, stats

from .lattice import Field, MultiIndex, clipped_log
from . import rng as _rng


# --------------------------------------------------------------------------
# kinds and specs


@dataclass(frozen=True)
class IidNormal:
    variance: float = 1.0

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError("variance must be positive")


@dataclass(frozen=True)
class IidRademacher:
    pass


@dataclass(frozen=True)
class IidHeavyTail:
    tail_exponent: float
    log_power: float = 0.0

    def __post_init__(self):
        if not self.tail_exponent > 0:
            raise ValueError("tail_exponent must be positive")
        if self.log_power < 0:
            raise ValueError("log_power must be >= 0 (monotone tail)")


@dataclass(frozen=True)
class GaussianNearestNeighbor:
    rho: float


@dataclass(frozen=True)
class Multinomial:
    total_balls: int

    def __post_init__(self):
        if int(self.total_balls) < 1:
            raise ValueError("total_balls must be >= 1")


@dataclass(frozen=True)
class TruncatedCentered:
    inner: "Kind"
    level: float | None = None
    schedule_epsilon: float | None = None

    def __post_init__(self):
        if (self.level is None) == (self.schedule_epsilon is None):
            raise ValueError("give exactly one of level or schedule_epsilon")
        if self.level is not None and not self.level > 0:
            raise ValueError("truncation level must be positive")
        if self.schedule_epsilon is not None and not self.schedule_epsilon > 0:
            raise ValueError("schedule epsilon must be positive")
        if isinstance(self.inner, TruncatedCentered):
            raise ValueError("nested truncation is not supported")


Kind = Union[IidNormal, IidRademacher, IidHeavyTail, GaussianNearestNeighbor, Multinomial, TruncatedCentered]
IID_KINDS = (IidNormal, IidRademacher, IidHeavyTail)


@dataclass(frozen=True)
class GeneratorSpec:
    kind: Kind
    shape: MultiIndex
    seed: int = 0

    def __post_init__(self):
        shape = MultiIndex.of(self.shape)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "seed", int(self.seed) & 0xFFFFFFFFFFFFFFFF)
        inner = self.kind.inner if isinstance(self.kind, TruncatedCentered) else self.kind
        if isinstance(inner, GaussianNearestNeighbor):
            if not 0 < inner.rho <= 1.0 / (2 * shape.d):
                raise ValueError(f"rho must lie in (0, 1/(2d)] = (0, {1 / (2 * shape.d)}], got {inner.rho}")

    def with_shape(self, shape) -> "GeneratorSpec":
        return GeneratorSpec(self.kind, MultiIndex.of(shape), self.seed)

    def with_seed(self, seed: int) -> "GeneratorSpec":
        return GeneratorSpec(self.kind, self.shape, seed)


@dataclass(frozen=True)
class CovarianceModel:
    gamma_at: dict[tuple[int, ...], float]
    support_radius: int

    def __post_init__(self):
        d = len(next(iter(self.gamma_at)))
        zero = (0,) * d
        if not self.gamma_at.get(zero, 0) > 0:
            raise ValueError("Upsilon(0) must be positive")
        for j, v in self.gamma_at.items():
            if any(j) and v > 0:
                raise ValueError(f"Upsilon({j}) = {v} > 0 breaks negative association")
            if self.gamma_at.get(tuple(-c for c in j)) != v:
                raise ValueError("covariance must be symmetric")

    def __call__(self, j) -> float:
        return self.gamma_at.get(tuple(int(c) for c in j), 0.0)

    @property
    def sigma_squared(self) -> float:
        return float(sum(self.gamma_at.values()))


# --------------------------------------------------------------------------
# one-dimensional marginal laws


def _quad(fn: Callable[[float], float], lo: float, hi: float, points=()) -> float:
    cuts = sorted(p for p in set(points) if lo < p < hi)
    edges = [lo, *cuts, hi]
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        val, _ = integrate.quad(fn, a, b, limit=200, epsabs=1e-13, epsrel=1e-11)
        total += val
    return total


class DiscreteMarginal:
    def __init__(self, values, probs):
        self.values = np.asarray(values, dtype=np.float64)
        self.probs = np.asarray(probs, dtype=np.float64)

    def expect(self, fn, points=()) -> float:
        return float(np.sum(self.probs * fn(self.values)))

    def prob_greater(self, t: float) -> float:
        return float(self.probs[self.values > t].sum())

    @property
    def bound(self) -> float:
        return float(np.abs(self.values[self.probs > 0]).max())

    def abs_moment(self, p: float) -> float:
        return self.expect(lambda x: np.abs(x) ** p)


class NormalMarginal:
    bound = None

    def __init__(self, variance: float):
        self.variance = float(variance)
        self.sd = math.sqrt(self.variance)

    def expect(self, fn, points=()) -> float:
        pdf = lambda x: math.exp(-0.5 * (x / self.sd) ** 2) / (self.sd * math.sqrt(2 * math.pi))
        return _quad(lambda x: float(fn(x)) * pdf(x), -math.inf, math.inf, points=(0.0, *points))

    def prob_greater(self, t: float) -> float:
        return float(special.ndtr(-t / self.sd))

    def abs_moment(self, p: float) -> float:
        return gaussian_abs_moment(self.variance, p)


def gaussian_abs_moment(variance: float, p: float) -> float:
    """``E|Z|^p`` for ``Z ~ N(0, variance)``."""
    return variance ** (p / 2) * 2 ** (p / 2) * math.gamma((p + 1) / 2) / math.sqrt(math.pi)


class HeavyTailMarginal:
    """Symmetric law with ``P(|X| > x) = min(1, x^{-a} (log x)^{-q})``."""

    bound = None

    def __init__(self, tail_exponent: float, log_power: float):
        self.a = float(tail_exponent)
        self.q = float(log_power)

    def tail_abs(self, x):
        x = np.asarray(x, dtype=np.float64)
        with np.errstate(divide="ignore"):
            t = np.power(np.maximum(x, 1.0), -self.a) * np.power(clipped_log(np.maximum(x, 1.0)), -self.q)
        return np.where(x <= 1.0, 1.0, t)

    def density_abs(self, x: float) -> float:
        if x < 1.0:
            return 0.0
        if x <= math.e:
            return self.a * x ** (-self.a - 1)
        lx = math.log(x)
        return x ** (-self.a - 1) * lx ** (-self.q) * (self.a + self.q / lx)

    def ppf_abs(self, u):
        """Inverse of the tail: ``x`` with ``P(|X| > x) = u`` for ``u`` in (0, 1]."""
        u = np.asarray(u, dtype=np.float64)
        target = -np.log(u)
        x = np.power(u, -1.0 / self.a)
        far = target > self.a
        if np.any(far) and self.q > 0:
            L = target[far]
            y = L / self.a
            for _ in range(60):
                step = (self.a * y + self.q * np.log(y) - L) / (self.a + self.q / y)
                y = np.maximum(y - step, 1.0)
                if np.all(np.abs(step) <= 1e-14 * y):
                    break
            x = x.copy()
            x[far] = np.exp(y)
        return x

    def expect(self, fn, points=()) -> float:
        sym = lambda x: 0.5 * (float(fn(x)) + float(fn(-x))) * self.density_abs(x)
        pts = [abs(p) for p in points if abs(p) > 1.0]
        return _quad(sym, 1.0, math.e, pts) + _quad(sym, math.e, math.inf, pts)

    def prob_greater(self, t: float) -> float:
        if t < 0:
            return 1.0 - 0.5 * float(self.tail_abs(-t))
        return 0.5 * float(self.tail_abs(t))

    def abs_moment(self, p: float) -> float:
        a, q = self.a, self.q
        if p > a or (p == a and q <= 1):
            return math.inf
        mid = p * (math.e ** (p - a) - 1) / (p - a) if p != a else p
        if p == a:
            far = p / (q - 1)
        else:
            far, _ = integrate.quad(lambda y: p * math.exp((p - a) * y) * y ** (-q), 1.0, math.inf, limit=200)
        return 1.0 + mid + far


class TruncatedMarginal:
    """Law of ``g_b(X) - c``."""

    def __init__(self, inner, level: float, center: float):
        self.inner = inner
        self.level = float(level)
        self.center = float(center)

    def transform(self, x):
        return np.clip(x, -self.level, self.level) - self.center

    def expect(self, fn, points=()) -> float:
        return self.inner.expect(lambda x: fn(self.transform(x)), points=(-self.level, self.level, *points))

    def prob_greater(self, t: float) -> float:
        s = t + self.center
        if s >= self.level:
            return 0.0
        if s < -self.level:
            return 1.0
        return self.inner.prob_greater(s)

    @property
    def bound(self) -> float:
        return self.level + abs(self.center)

    def abs_moment(self, p: float) -> float:
        return self.expect(lambda x: np.abs(x) ** p)


def marginal(kind: Kind, shape: MultiIndex | None = None):
    """Law of a single cell (for identically distributed kinds)."""
    if isinstance(kind, IidNormal):
        return NormalMarginal(kind.variance)
    if isinstance(kind, IidRademacher):
        return DiscreteMarginal([-1.0, 1.0], [0.5, 0.5])
    if isinstance(kind, IidHeavyTail):
        return HeavyTailMarginal(kind.tail_exponent, kind.log_power)
    if isinstance(kind, GaussianNearestNeighbor):
        return NormalMarginal(1.0)
    if isinstance(kind, Multinomial):
        if shape is None:
            raise ValueError("the multinomial marginal depends on the shape")
        cells = shape.size
        counts = np.arange(kind.total_balls + 1)
        return DiscreteMarginal(counts - kind.total_balls / cells, stats.binom.pmf(counts, kind.total_balls, 1.0 / cells))
    if isinstance(kind, TruncatedCentered):
        if kind.level is None:
            raise ValueError("scheduled truncation is not identically distributed; use FieldModel")
        inner = marginal(kind.inner, shape)
        b = kind.level
        return TruncatedMarginal(inner, b, inner.expect(lambda x: np.clip(x, -b, b), points=(-b, b)))
    raise TypeError(f"unknown kind {kind!r}")


# --------------------------------------------------------------------------
# truncation helpers


def g_trunc(x, b):
    """``g_b(x) = (-b) v (x ^ b)``."""
    return np.clip(x, -np.asarray(b), np.asarray(b))


def h_trunc(x, b):
    """``h_b(x) = x - g_b(x)``."""
    return np.asarray(x) - g_trunc(x, b)


def truncate_center(field: Field, b, centers=None) -> tuple[Field, Field]:
    """Split ``X = g_b(X) + h_b(X)`` and subtract the given centering constants.

    ``b`` is a positive scalar or an array of per-cell levels with the field's
    shape.  ``centers`` is ``None`` (no centering) or ``(E g_b(X), E h_b(X))``
    as scalars or per-cell arrays; ``truncation_centers`` computes them
    exactly.  Returns ``(X_bar, X_hat)`` with ``X = X_bar + X_hat + c_g + c_h``.
    """
    b_arr = np.asarray(b, dtype=np.float64)
    if np.any(b_arr <= 0):
        raise ValueError("truncation level must be positive")
    if b_arr.ndim:
        b_arr = b_arr.reshape(field.shape.coords)
    x = field.array.astype(np.float64)
    g = g_trunc(x, b_arr)
    h = x - g
    if centers is not None:
        c_g, c_h = (np.asarray(c, dtype=np.float64) for c in centers)
        g = g - (c_g.reshape(field.shape.coords) if c_g.ndim else c_g)
        h = h - (c_h.reshape(field.shape.coords) if c_h.ndim else c_h)
    return Field(field.shape, g.reshape(-1)), Field(field.shape, h.reshape(-1))


def truncation_centers(kind: Kind, b: float, shape: MultiIndex | None = None) -> tuple[float, float]:
    """Exact ``(E g_b(X), E h_b(X))`` for one cell of ``kind``."""
    m = marginal(kind, shape)
    c_g = m.expect(lambda x: np.clip(x, -b, b), points=(-b, b))
    c_x = m.expect(lambda x: x)
    return c_g, c_x - c_g


def truncation_schedule(m, epsilon: float, second_moment: float):
    """``b_m = (eps/40) sqrt(E Y^2) sqrt(m / log log m)`` with clipped logs."""
    if not second_moment > 0:
        raise ValueError("second_moment must be positive")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if np.any(np.asarray(m) < 1):
        raise ValueError("m must be >= 1")
    ll = clipped_log(clipped_log(m))
    out = (epsilon / 40.0) * np.sqrt(second_moment) * np.sqrt(np.asarray(m, dtype=np.float64) / ll)
    return float(out) if np.ndim(out) == 0 else out


def heavy_tail_condition_check(tail_exponent: float, log_power: float, d: int) -> bool:
    """Is ``E X^2 log^{d-1}|X| / log log |X|`` finite for the heavy-tail class?

    With ``P(|X| > x) ~ x^{-a} (ln x)^{-q}`` the moment is finite iff ``a > 2``
    or ``a == 2`` and ``q > d``.  At ``a == 2, q == d`` the integral behaves
    like ``int dy / (y log y)`` and diverges, so the boundary is infinite.
    """
    if not tail_exponent > 0:
        raise ValueError("tail_exponent must be positive")
    if tail_exponent > 2:
        return True
    if tail_exponent < 2:
        return False
    return log_power > d


# --------------------------------------------------------------------------
# covariance and sigma^2


def covariance_model(spec: GeneratorSpec) -> CovarianceModel:
    d = spec.shape.d
    zero = (0,) * d
    kind = spec.kind
    if isinstance(kind, GaussianNearestNeighbor):
        gamma = {zero: 1.0}
        for axis in range(d):
            for s in (1, -1):
                j = [0] * d
                j[axis] = s
                gamma[tuple(j)] = -kind.rho
        return CovarianceModel(gamma, 1)
    stationary_truncation = (isinstance(kind, TruncatedCentered) and isinstance(kind.inner, IID_KINDS)
                             and kind.level is not None)
    if isinstance(kind, IID_KINDS) or stationary_truncation:
        return CovarianceModel({zero: FieldModel(spec).marginal_second_moment()}, 0)
    raise ValueError(f"{type(kind).__name__} has no stationary covariance on Z^d")


def exact_sigma_squared(spec: GeneratorSpec) -> float:
    """``sigma^2 = sum_j Upsilon(j)`` in closed form.

    ``IidNormal(v) -> v``; ``GaussianNearestNeighbor(rho) -> 1 - 2 d rho``.
    """
    kind = spec.kind
    if isinstance(kind, IidNormal):
        return float(kind.variance)
    if isinstance(kind, IidRademacher):
        return 1.0
    if isinstance(kind, GaussianNearestNeighbor):
        return 1.0 - 2 * spec.shape.d * kind.rho
    if isinstance(kind, IidHeavyTail):
        return HeavyTailMarginal(kind.tail_exponent, kind.log_power).abs_moment(2.0)
    return covariance_model(spec).sigma_squared


# --------------------------------------------------------------------------
# samplers


def _fast_len(n: int) -> int:
    return sfft.next_fast_len(n, real=False)


def circulant_eigenvalues(shape: MultiIndex, rho: float) -> np.ndarray:
    torus = tuple(_fast_len(n + 2) for n in shape.coords)
    c = np.zeros(torus)
    zero = (0,) * shape.d
    c[zero] = 1.0
    for axis in range(shape.d):
        for s in (1, -1):
            j = [0] * shape.d
            j[axis] = s % torus[axis]
            c[tuple(j)] = -rho
    lam = sfft.fftn(c).real
    if lam.min() < -1e-9:
        raise RuntimeError(f"circulant embedding is not PSD (min eigenvalue {lam.min():.3e})")
    return np.maximum(lam, 0.0)


def _sample_gaussian_nn(shape: MultiIndex, rho: float, rng: np.random.Generator, reps: int) -> np.ndarray:
    lam = circulant_eigenvalues(shape, rho)
    torus = lam.shape
    scale = np.sqrt(lam / lam.size)
    pairs = (reps + 1) // 2
    axes = tuple(range(1, len(torus) + 1))
    w = rng.standard_normal((pairs, *torus)) + 1j * rng.standard_normal((pairs, *torus))
    y = sfft.fftn(w * scale, axes=axes)
    crop = (slice(None),) + tuple(slice(0, n) for n in shape.coords)
    out = np.empty((reps, *shape.coords))
    out[0::2] = y.real[crop]
    out[1::2] = y.imag[crop][: reps // 2]
    return out


def _sample_heavy(kind: IidHeavyTail, rng: np.random.Generator, size) -> np.ndarray:
    m = HeavyTailMarginal(kind.tail_exponent, kind.log_power)
    u = 1.0 - rng.random(size)  # (0, 1]
    sign = rng.integers(0, 2, size=size, dtype=np.int8) * 2 - 1
    return sign * m.ppf_abs(u)


def _multinomial_batch(total: int, shape: MultiIndex, rng: np.random.Generator, reps: int) -> np.ndarray:
    cells = shape.size
    counts = rng.multinomial(total, np.full(cells, 1.0 / cells), size=reps)
    return (counts - total / cells).reshape(reps, *shape.coords)


def _keyed_iid(kind, seed: int, starts, shape) -> np.ndarray:
    if isinstance(kind, IidNormal):
        return special.ndtri(_rng.keyed_uniforms(seed, 0, starts, shape)) * math.sqrt(kind.variance)
    if isinstance(kind, IidRademacher):
        bits = _rng.keyed_bits(seed, 0, starts, shape)
        return ((bits >> np.uint64(63)).astype(np.int8) * 2 - 1).astype(np.int8)
    if isinstance(kind, IidHeavyTail):
        m = HeavyTailMarginal(kind.tail_exponent, kind.log_power)
        u = _rng.keyed_uniforms(seed, 0, starts, shape)
        sign = (_rng.keyed_bits(seed, 1, starts, shape) >> np.uint64(63)).astype(np.int8) * 2 - 1
        return sign * m.ppf_abs(u)
    raise TypeError(f"{type(kind).__name__} has no coordinate-keyed sampler")


class FieldModel:
    """Sampling and closed-form moments for one ``GeneratorSpec``.

    Methods returning ``float | None`` give ``None`` when no closed form is
    available; verifiers then fall back to Monte Carlo.  Test doubles subclass
    this and override ``sample_batch``.
    """

    name = "field"

    def __init__(self, spec: GeneratorSpec):
        self.spec = spec
        self.kind = spec.kind
        self.shape = spec.shape
        self._levels = None
        if isinstance(self.kind, TruncatedCentered):
            self._init_truncation()

    # -- structure ------------------------------------------------------

    @property
    def d(self) -> int:
        return self.shape.d

    @property
    def size(self) -> int:
        return self.shape.size

    @property
    def independent(self) -> bool:
        k = self.kind
        return isinstance(k, IID_KINDS) or (isinstance(k, TruncatedCentered) and isinstance(k.inner, IID_KINDS))

    @property
    def keyed(self) -> bool:
        """True when cells are generated from coordinate-keyed randomness."""
        return self.independent

    @property
    def bound(self) -> float | None:
        """Almost-sure bound on ``|X_k|`` when one exists."""
        k = self.kind
        if isinstance(k, IidRademacher):
            return 1.0
        if isinstance(k, Multinomial):
            mean = k.total_balls / self.size
            return max(mean, k.total_balls - mean)
        if isinstance(k, TruncatedCentered):
            return float(np.max(self._levels + np.abs(self._centers)))
        return None

    def _init_truncation(self):
        k = self.kind
        inner = marginal(k.inner, self.shape)
        if k.level is not None:
            levels = np.array([k.level])
            inverse = np.zeros(self.size, dtype=np.int64)
            counts = np.array([self.size])
        else:
            second = inner.expect(lambda x: x * x)
            sizes = _cell_products(self.shape)
            uniq, inverse, counts = np.unique(sizes, return_inverse=True, return_counts=True)
            levels = np.atleast_1d(truncation_schedule(uniq, k.schedule_epsilon, second))
        centers = np.array([inner.expect(lambda x, b=b: np.clip(x, -b, b), points=(-b, b)) for b in levels])
        self._inner_marginal = inner
        self._levels = levels
        self._centers = centers
        self._inverse = inverse.reshape(-1)
        self._counts = counts

    def level_field(self) -> np.ndarray:
        """Per-cell truncation levels (TruncatedCentered only)."""
        return self._levels[self._inverse].reshape(self.shape.coords)

    def center_field(self) -> np.ndarray:
        return self._centers[self._inverse].reshape(self.shape.coords)

    def _marginal_groups(self):
        """``[(marginal, number_of_cells), ...]`` covering every cell."""
        k = self.kind
        if isinstance(k, TruncatedCentered):
            return [(TruncatedMarginal(self._inner_marginal, b, c), int(n))
                    for b, c, n in zip(self._levels, self._centers, self._counts)]
        return [(marginal(k, self.shape), self.size)]

    # -- sampling -------------------------------------------------------

    def sample_batch(self, rng: np.random.Generator, reps: int) -> np.ndarray:
        """``reps`` independent fields, shape ``(reps, *shape)``."""
        k, shape = self.kind, self.shape
        size = (reps, *shape.coords)
        if isinstance(k, TruncatedCentered):
            inner = FieldModel(GeneratorSpec(k.inner, shape, self.spec.seed)).sample_batch(rng, reps)
            return g_trunc(inner, self.level_field()) - self.center_field()
        if isinstance(k, IidNormal):
            return rng.standard_normal(size) * math.sqrt(k.variance)
        if isinstance(k, IidRademacher):
            return (rng.integers(0, 2, size=size, dtype=np.int8) * 2 - 1).astype(np.int8)
        if isinstance(k, IidHeavyTail):
            return _sample_heavy(k, rng, size)
        if isinstance(k, GaussianNearestNeighbor):
            return _sample_gaussian_nn(shape, k.rho, rng, reps)
        if isinstance(k, Multinomial):
            return _multinomial_batch(k.total_balls, shape, rng, reps)
        raise TypeError(f"unknown kind {k!r}")

    def sample_totals(self, rng: np.random.Generator, reps: int) -> np.ndarray:
        """Only the totals ``S_n`` of ``reps`` fields."""
        if isinstance(self.kind, IidRademacher):
            # popcount over raw 64-bit words: 2 * (#ones) - n
            n = self.size
            words, rem = divmod(n, 64)
            raw = rng.bit_generator.random_raw((reps, words + (1 if rem else 0))).astype(np.uint64)
            if rem:
                raw[:, -1] &= np.uint64((1 << rem) - 1)
            ones = np.bitwise_count(raw).sum(axis=1, dtype=np.int64)
            return (2 * ones - n).astype(np.float64)
        step = max(1, _rng.CELLS_PER_CHUNK // self.size)
        out = []
        for start in range(0, reps, step):
            batch = self.sample_batch(rng, min(step, reps - start))
            out.append(batch.reshape(batch.shape[0], -1).sum(axis=1, dtype=np.float64))
        return np.concatenate(out)

    # -- closed-form moments -------------------------------------------

    def second_moment_sum(self) -> float | None:
        """``B_n^2 = sum_k E Y_k^2``."""
        if isinstance(self.kind, Multinomial):
            t, c = self.kind.total_balls, self.size
            return t * (1 - 1 / c)
        return self._group_sum(lambda m: m.expect(lambda x: x * x) if not isinstance(m, NormalMarginal) else m.variance)

    def abs_moment_sum(self, p: float) -> float | None:
        """``sum_k E |Y_k|^p``."""
        return self._group_sum(lambda m: m.abs_moment(p))

    def _group_sum(self, per_cell) -> float:
        return float(sum(per_cell(m) * n for m, n in self._marginal_groups()))

    def cross_cov_abs_sum(self) -> float | None:
        """``sum_{i != j} |E Y_i Y_j|``."""
        k = self.kind
        if self.independent:
            return 0.0
        if isinstance(k, GaussianNearestNeighbor):
            return k.rho * _ordered_neighbor_pairs(self.shape)
        if isinstance(k, Multinomial):
            c = self.size
            return c * (c - 1) * k.total_balls / c**2
        return None

    def total_variance(self) -> float | None:
        """``Var(S_n) = sum_{i,j} E Y_i Y_j``."""
        k = self.kind
        if self.independent:
            return self.second_moment_sum()
        if isinstance(k, GaussianNearestNeighbor):
            return self.size - k.rho * _ordered_neighbor_pairs(self.shape)
        if isinstance(k, Multinomial):
            return 0.0
        return None

    def total_law(self):
        """Exact law of ``S_n``: ``("normal", var)``, ``("discrete", values, probs)`` or None."""
        k = self.kind
        if isinstance(k, (IidNormal, GaussianNearestNeighbor)):
            return ("normal", self.total_variance())
        if isinstance(k, IidRademacher):
            n = self.size
            j = np.arange(n + 1)
            return ("discrete", 2.0 * j - n, stats.binom.pmf(j, n, 0.5))
        if isinstance(k, Multinomial):
            return ("discrete", np.array([0.0]), np.array([1.0]))
        return None

    def independent_total_law(self):
        """Exact law of ``sum Y*_k`` for independent copies with the same marginals."""
        k = self.kind
        if isinstance(k, (IidNormal, GaussianNearestNeighbor)):
            return ("normal", self.second_moment_sum())
        if isinstance(k, IidRademacher):
            return self.total_law()
        if isinstance(k, Multinomial):
            t, c = k.total_balls, self.size
            j = np.arange(t * c + 1)
            return ("discrete", j - float(t), stats.binom.pmf(j, t * c, 1.0 / c))
        return None

    def max_exceed_prob(self, a: float) -> float | None:
        """``P(max_k Y_k > a)`` when available in closed form."""
        if self.bound is not None and a >= self.bound:
            return 0.0
        if not self.independent:
            return None
        log_keep = 0.0
        for m, n in self._marginal_groups():
            q = m.prob_greater(a)
            if q >= 1.0:
                return 1.0
            log_keep += n * math.log1p(-q)
        return float(-math.expm1(log_keep))

    def marginal_second_moment(self) -> float:
        """``E Y_1^2`` (cell at the origin)."""
        groups = self._marginal_groups()
        if isinstance(self.kind, TruncatedCentered):
            m = TruncatedMarginal(self._inner_marginal, self._levels[self._inverse[0]], self._centers[self._inverse[0]])
            return m.expect(lambda x: x * x)
        m = groups[0][0]
        return m.variance if isinstance(m, NormalMarginal) else m.expect(lambda x: x * x)

    def sup_second_moment(self) -> float:
        return max(m.variance if isinstance(m, NormalMarginal) else m.expect(lambda x: x * x)
                   for m, _ in self._marginal_groups())


def _ordered_neighbor_pairs(shape: MultiIndex) -> int:
    total = 0
    for n in shape.coords:
        total += 2 * (n - 1) * (shape.size // n)
    return total


def _cell_products(shape: MultiIndex, starts=None, block=None) -> np.ndarray:
    """``|k|`` for every cell of a block (1-based products), flattened."""
    starts = starts or (0,) * shape.d
    block = block or shape.coords
    prod = np.ones((1,) * len(block), dtype=np.int64)
    for axis, (s, n) in enumerate(zip(starts, block)):
        view = [1] * len(block)
        view[axis] = n
        prod = prod * np.arange(s + 1, s + n + 1, dtype=np.int64).reshape(view)
    return np.broadcast_to(prod, tuple(block)).reshape(-1)


def field_model(spec_or_model) -> FieldModel:
    return spec_or_model if isinstance(spec_or_model, FieldModel) else FieldModel(spec_or_model)


def sample_field(spec: GeneratorSpec) -> Field:
    """One realization, deterministic in ``spec.seed``.

    Independent kinds use coordinate-keyed randomness, so the field on a
    smaller box is the restriction of the field on a larger one.
    """
    arr = np.concatenate(list(iter_slab_blocks(spec, spec.shape)), axis=0)
    return Field(spec.shape, arr.reshape(-1))


def iter_slab_blocks(spec: GeneratorSpec, shape=None, cells_per_block: int = 1 << 20) -> Iterator[np.ndarray]:
    """Yield the field restricted to ``shape`` in blocks of consecutive slabs.

    Keyed kinds are generated block by block (memory ``O(block)``).  Other
    kinds are realized once at ``spec.shape`` (the master window) and cropped;
    ``shape`` must then fit inside ``spec.shape``.
    """
    shape = spec.shape if shape is None else MultiIndex.of(shape)
    model = FieldModel(spec)
    kind = spec.kind
    plane = shape.coords[1:]
    plane_cells = max(1, math.prod(plane))
    rows = max(1, cells_per_block // plane_cells)
    if model.keyed:
        inner = kind.inner if isinstance(kind, TruncatedCentered) else kind
        for start in range(0, shape.coords[0], rows):
            n = min(rows, shape.coords[0] - start)
            starts = (start,) + (0,) * (shape.d - 1)
            block_shape = (n, *plane)
            x = _keyed_iid(inner, spec.seed, starts, block_shape)
            if isinstance(kind, TruncatedCentered):
                if kind.level is None:
                    # levels depend on |k| only; recompute for this block's global coordinates
                    prods = _cell_products(shape, starts, block_shape)
                    lv = truncation_schedule(prods, kind.schedule_epsilon,
                                             model._inner_marginal.expect(lambda v: v * v))
                    lv = np.asarray(lv).reshape(block_shape)
                    ctr = _interp_centers(model, lv)
                else:
                    lv, ctr = kind.level, model._centers[0]
                x = g_trunc(x, lv) - ctr
            yield x
        return
    if not shape.le(spec.shape):
        raise ValueError(f"shape {shape} exceeds the master window {spec.shape} of a non-keyed generator")
    full = FieldModel(spec).sample_batch(_rng.chunk_rng(spec.seed, 0, 0), 1)[0]
    crop = full[tuple(slice(0, n) for n in shape.coords)]
    for start in range(0, shape.coords[0], rows):
        yield crop[start:start + rows]


def _interp_centers(model: FieldModel, levels: np.ndarray) -> np.ndarray:
    uniq, inv = np.unique(levels, return_inverse=True)
    inner = model._inner_marginal
    c = np.array([inner.expect(lambda x, b=b: np.clip(x, -b, b), points=(-b, b)) for b in uniq])
    return c[inv].reshape(levels.shape)


# --------------------------------------------------------------------------
# (de)serialization


_KIND_NAMES = {
    IidNormal: "iid-normal",
    IidRademacher: "rademacher",
    IidHeavyTail: "heavy-tail",
    GaussianNearestNeighbor: "gauss-nn",
    Multinomial: "multinomial",
    TruncatedCentered: "truncated",
}
_ALIASES = {
    "iid-normal": IidNormal, "normal": IidNormal,
    "rademacher": IidRademacher, "iid-rademacher": IidRademacher,
    "heavy-tail": IidHeavyTail, "heavy": IidHeavyTail,
    "gauss-nn": GaussianNearestNeighbor, "gaussian-nn": GaussianNearestNeighbor,
    "multinomial": Multinomial,
    "truncated": TruncatedCentered,
}
_PARAM_ALIASES = {
    "var": "variance", "tail": "tail_exponent", "logpow": "log_power", "total": "total_balls",
    "b": "level", "eps": "schedule_epsilon",
}


def kind_to_dict(kind: Kind) -> dict:
    out = {"kind": _KIND_NAMES[type(kind)]}
    for name, value in vars(kind).items():
        if name == "inner":
            out["inner"] = kind_to_dict(value)
        elif value is not None:
            out[name] = value
    return out


def kind_from_dict(data: dict) -> Kind:
    data = dict(data)
    cls = _ALIASES[data.pop("kind")]
    if "inner" in data:
        data["inner"] = kind_from_dict(data["inner"])
    params = {_PARAM_ALIASES.get(k, k): v for k, v in data.items()}
    if cls is Multinomial:
        params["total_balls"] = int(params["total_balls"])
    return cls(**params)


def spec_to_dict(spec: GeneratorSpec) -> dict:
    return {"kind": kind_to_dict(spec.kind), "shape": str(spec.shape), "seed": spec.seed}


def spec_from_dict(data: dict) -> GeneratorSpec:
    return GeneratorSpec(kind_from_dict(data["kind"]), MultiIndex.parse(str(data["shape"])), int(data.get("seed", 0)))


def parse_kind(text: str) -> Kind:
    """Parse ``name[:key=value,...]``; truncation wraps an inner kind after ``@``.

    Examples: ``rademacher``, ``iid-normal:variance=2``, ``gauss-nn:rho=0.2``,
    ``heavy-tail:tail=3,logpow=1``, ``multinomial:total=100``,
    ``truncated:b=1@heavy-tail:tail=3``, ``truncated:eps=0.5@iid-normal``.
    """
    text = text.strip()
    inner = None
    if "@" in text:
        text, inner_text = text.split("@", 1)
        inner = kind_to_dict(parse_kind(inner_text))
    name, _, rest = text.partition(":")
    if name not in _ALIASES:
        raise ValueError(f"unknown generator {name!r}; choose from {sorted(set(_KIND_NAMES.values()))}")
    data: dict = {"kind": name}
    for item in filter(None, rest.split(",")):
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"bad parameter {item!r} in {text!r}")
        data[key.strip()] = float(value)
    if inner is not None:
        data["inner"] = inner
    elif _ALIASES[name] is TruncatedCentered:
        raise ValueError("truncated needs an inner generator after '@'")
    return kind_from_dict(data)
