"""Brute-force references for the fast engine and the statistical verifiers."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .generators import field_model
from .lattice import Field, MultiIndex, PartialSumSummary
from .rng import replicate
from .stats import McEstimate, jackknife_estimate

BRUTE_FORCE_MAX_CELLS = 10_000
MAX_ATOMS = 1_000_000


def brute_force_partial_sums(field: Field) -> PartialSumSummary:
    """Every ``T_k`` summed directly over its box (``O(|n|^2)`` work).

    Float boxes are summed with ``math.fsum`` (exactly rounded); integer boxes
    are exact.
    """
    if field.shape.size > BRUTE_FORCE_MAX_CELLS:
        raise ValueError(f"brute force is capped at {BRUTE_FORCE_MAX_CELLS} cells")
    arr = field.array
    exact_int = arr.dtype.kind in "iu"
    total = max_signed = None
    max_abs = 0.0
    for k in itertools.product(*(range(1, n + 1) for n in field.shape.coords)):
        box = arr[tuple(slice(0, c) for c in k)]
        t = float(int(box.sum(dtype=np.int64))) if exact_int else math.fsum(box.ravel().tolist())
        max_signed = t if max_signed is None else max(max_signed, t)
        max_abs = max(max_abs, abs(t))
        total = t
    return PartialSumSummary(total, max_abs, max_signed, max_abs**2)


@dataclass(frozen=True)
class DiscreteLaw:
    """Finite law of a whole field: ``outcomes[i]`` has probability ``probs[i]``."""

    shape: MultiIndex
    outcomes: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        shape = MultiIndex.of(self.shape)
        outcomes = np.asarray(self.outcomes, dtype=np.float64).reshape(-1, shape.size)
        probs = np.asarray(self.probs, dtype=np.float64)
        if outcomes.shape[0] != probs.size:
            raise ValueError("one probability per outcome")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError("probabilities must be >= 0 and sum to 1")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "outcomes", outcomes)
        object.__setattr__(self, "probs", probs)

    @property
    def atoms(self) -> list[tuple[Field, float]]:
        return [(Field(self.shape, o), float(p)) for o, p in zip(self.outcomes, self.probs)]

    @classmethod
    def iid(cls, values: Sequence[float], probs: Sequence[float], shape) -> "DiscreteLaw":
        shape = MultiIndex.of(shape)
        if len(values) ** shape.size > MAX_ATOMS:
            raise ValueError(f"product law would exceed {MAX_ATOMS} atoms")
        outcomes = np.array(list(itertools.product(values, repeat=shape.size)), dtype=np.float64)
        weights = np.array([math.prod(c) for c in itertools.product(probs, repeat=shape.size)])
        return cls(shape, outcomes, weights)

    @classmethod
    def multinomial(cls, total: int, shape, centered: bool = True) -> "DiscreteLaw":
        """Uniform multinomial cell counts, optionally centred by ``total / cells``."""
        shape = MultiIndex.of(shape)
        cells = shape.size
        if math.comb(total + cells - 1, cells - 1) > MAX_ATOMS:
            raise ValueError(f"multinomial law would exceed {MAX_ATOMS} atoms")
        outcomes, probs = [], []
        for bars in itertools.combinations(range(total + cells - 1), cells - 1):
            edges = (-1, *bars, total + cells - 1)
            counts = [edges[i + 1] - edges[i] - 1 for i in range(cells)]
            coef = math.factorial(total)
            for c in counts:
                coef //= math.factorial(c)
            outcomes.append(counts)
            probs.append(coef / cells**total)
        outcomes = np.array(outcomes, dtype=np.float64)
        if centered:
            outcomes -= total / cells
        return cls(shape, outcomes, np.array(probs))


def _statistic(name) -> Callable[[Field], float]:
    if callable(name):
        return name
    if name == "S":
        return lambda f: math.fsum(f.values.tolist())
    if name == "M":
        return lambda f: brute_force_partial_sums(f).max_abs
    if name == "max_signed":
        return lambda f: brute_force_partial_sums(f).max_signed
    if name == "max_T2":
        return lambda f: brute_force_partial_sums(f).second_moment_proxy
    if name.startswith("abs_S_pow:"):
        p = float(name.split(":", 1)[1])
        return lambda f: abs(math.fsum(f.values.tolist())) ** p
    if name.startswith("M_pow:"):
        p = float(name.split(":", 1)[1])
        return lambda f: brute_force_partial_sums(f).max_abs ** p
    raise ValueError(f"unknown statistic {name!r}")


def exact_distribution_tiny(law: DiscreteLaw, statistic) -> list[tuple[float, float]]:
    """Exact pushforward law of ``statistic`` under ``law``, sorted by value.

    ``statistic`` is a callable on Field or one of ``S``, ``M``,
    ``max_signed``, ``max_T2``, ``abs_S_pow:<p>``, ``M_pow:<p>``.
    """
    if law.outcomes.shape[0] > MAX_ATOMS:
        raise ValueError(f"law has more than {MAX_ATOMS} atoms")
    stat = _statistic(statistic)
    merged: dict[float, float] = {}
    for field, p in law.atoms:
        v = float(stat(field))
        key = float(f"{v:.12g}") if v else 0.0
        merged[key] = merged.get(key, 0.0) + p
    return sorted(merged.items())


def exact_expectation(law: DiscreteLaw, statistic) -> float:
    dist = exact_distribution_tiny(law, statistic)
    return math.fsum(v * p for v, p in dist)


# -- negative-association probe ------------------------------------------

MONOTONE_FUNCTIONS = ("sum", "max", "min", "first", "clip_sum:<c>", "indicator_sum_gt:<t>")


def monotone_function(name: str) -> Callable[[np.ndarray], np.ndarray]:
    """Coordinatewise nondecreasing functions of a ``(reps, |A|)`` block."""
    if name in ("sum", "identity"):
        return lambda x: x.sum(axis=1)
    if name == "max":
        return lambda x: x.max(axis=1)
    if name == "min":
        return lambda x: x.min(axis=1)
    if name == "first":
        return lambda x: x[:, 0]
    if name.startswith("clip_sum:"):
        c = float(name.split(":", 1)[1])
        return lambda x: np.clip(x, -c, c).sum(axis=1)
    if name.startswith("indicator_sum_gt:"):
        t = float(name.split(":", 1)[1])
        return lambda x: (x.sum(axis=1) > t).astype(np.float64)
    raise ValueError(f"unknown monotone function {name!r}; choose from {MONOTONE_FUNCTIONS}")


@dataclass(frozen=True)
class CovarianceProbe:
    estimate: McEstimate
    consistent: bool


def na_covariance_probe(spec, set_a, set_b, f_id: str = "sum", g_id: str = "sum",
                        reps: int = 10_000, seed: int | None = None, threads: int | None = None) -> CovarianceProbe:
    """Monte Carlo ``Cov(f(X_A), g(X_B))`` for disjoint index sets (1-based).

    The probe is consistent with NA iff the estimate is at most ``3 * stderr``.
    """
    model = field_model(spec)
    a = [MultiIndex.of(k) for k in set_a]
    b = [MultiIndex.of(k) for k in set_b]
    if not a or not b:
        raise ValueError("index sets must be nonempty")
    if set(a) & set(b):
        raise ValueError("index sets must be disjoint")
    for k in a + b:
        if not k.le(model.shape):
            raise IndexError(f"{k} outside {model.shape}")
    ia = np.array([np.ravel_multi_index(tuple(c - 1 for c in k), model.shape.coords) for k in a])
    ib = np.array([np.ravel_multi_index(tuple(c - 1 for c in k), model.shape.coords) for k in b])
    f, g = monotone_function(f_id), monotone_function(g_id)

    def run(rng, n):
        x = model.sample_batch(rng, n).reshape(n, -1).astype(np.float64)
        return {"f": f(x[:, ia]), "g": g(x[:, ib])}

    seed = model.spec.seed if seed is None else seed
    out = replicate(run, reps, seed, stream=11, cells=model.size, threads=threads)
    fv, gv = out["f"], out["g"]
    est = jackknife_estimate(lambda mf, mg, mfg: mfg - mf * mg, fv, gv, fv * gv)
    return CovarianceProbe(est, est.mean <= 3 * est.stderr)


def multinomial_exact_cov(total: int, cells: int) -> float:
    """Pairwise covariance of uniform multinomial counts, ``-total / cells^2``.

    For ``total <= 4`` the value is obtained by enumerating where each ball
    lands (cell 1, cell 2 or elsewhere), which is the reference for the closed form.
    """
    if total < 1 or cells < 2:
        raise ValueError("need total >= 1 and cells >= 2")
    if total > 4:
        return -total / cells**2
    p = 1.0 / cells
    probs = (p, p, 1.0 - 2 * p)
    e1 = e2 = e12 = 0.0
    for path in itertools.product(range(3), repeat=total):
        w = math.prod(probs[i] for i in path)
        n1, n2 = path.count(0), path.count(1)
        e1 += w * n1
        e2 += w * n2
        e12 += w * n1 * n2
    return e12 - e1 * e2
