"""Monte Carlo estimates and their error bars."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import special

DEFAULT_CI = 0.999


@dataclass(frozen=True)
class McEstimate:
    """A Monte Carlo (or exact, ``exact=True``) estimate.

    ``ci`` is a two-sided interval at ``ci_level``: Wilson score for
    proportions, ``mean +- z * stderr`` otherwise.
    """

    mean: float
    stderr: float
    reps: int
    ci_level: float = DEFAULT_CI
    ci: tuple[float, float] | None = None
    exact: bool = False

    def __post_init__(self):
        if self.stderr < 0 or math.isnan(self.stderr):
            raise ValueError("stderr must be >= 0")
        if not self.exact and self.reps < 2:
            raise ValueError("a Monte Carlo estimate needs reps >= 2")
        if self.ci is None:
            z = z_value(self.ci_level)
            object.__setattr__(self, "ci", (self.mean - z * self.stderr, self.mean + z * self.stderr))

    @classmethod
    def exact_value(cls, value: float) -> "McEstimate":
        return cls(float(value), 0.0, 0, ci=(float(value), float(value)), exact=True)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "reps": self.reps, "exact": self.exact}


def z_value(level: float) -> float:
    """Two-sided normal quantile for confidence ``level``."""
    return float(special.ndtri(0.5 + level / 2))


def normal_cdf(x):
    """``Phi(x)`` via the complementary error function, ``Phi(x) = erfc(-x/sqrt 2)/2``."""
    return 0.5 * special.erfc(-np.asarray(x, dtype=np.float64) / math.sqrt(2.0))


def normal_sf(x):
    """``1 - Phi(x)`` without cancellation: ``erfc(x/sqrt 2)/2``."""
    return 0.5 * special.erfc(np.asarray(x, dtype=np.float64) / math.sqrt(2.0))


def mean_estimate(samples, ci_level: float = DEFAULT_CI) -> McEstimate:
    x = np.asarray(samples, dtype=np.float64)
    n = x.size
    if n < 2:
        raise ValueError("need at least two replications")
    return McEstimate(float(x.mean()), float(x.std(ddof=1) / math.sqrt(n)), n, ci_level)


def wilson_interval(successes: int, n: int, level: float = DEFAULT_CI) -> tuple[float, float]:
    z = z_value(level)
    p = successes / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    # the endpoints are exactly 0 and 1 at k = 0 and k = n; avoid rounding residue
    lo = 0.0 if successes == 0 else max(0.0, centre - half)
    hi = 1.0 if successes == n else min(1.0, centre + half)
    return lo, hi


def proportion_estimate(indicators, ci_level: float = DEFAULT_CI) -> McEstimate:
    """Proportion with a Wilson score interval.

    ``stderr`` is the Wilson half-width divided by ``z``, which stays positive
    when no event is observed.
    """
    x = np.asarray(indicators, dtype=bool)
    n = x.size
    if n < 2:
        raise ValueError("need at least two replications")
    k = int(x.sum())
    lo, hi = wilson_interval(k, n, ci_level)
    z = z_value(ci_level)
    return McEstimate(k / n, (hi - lo) / (2 * z), n, ci_level, ci=(lo, hi))


def jackknife(fn: Callable[..., np.ndarray], *columns: np.ndarray) -> tuple[float, float]:
    """Delete-one jackknife for a smooth function of column means.

    ``fn`` takes one mean per column and must broadcast over arrays.  The
    leave-one-out means are formed in closed form, so this is ``O(reps)``.
    Returns ``(fn(full means), jackknife stderr)``.
    """
    cols = [np.asarray(c, dtype=np.float64) for c in columns]
    n = cols[0].size
    if n < 2:
        raise ValueError("need at least two replications")
    sums = [c.sum() for c in cols]
    full = float(fn(*[s / n for s in sums]))
    loo = np.asarray(fn(*[(s - c) / (n - 1) for s, c in zip(sums, cols)]), dtype=np.float64)
    var = (n - 1) / n * np.sum((loo - loo.mean()) ** 2)
    return full, float(math.sqrt(var))


def jackknife_estimate(fn, *columns, ci_level: float = DEFAULT_CI) -> McEstimate:
    value, se = jackknife(fn, *columns)
    return McEstimate(value, se, int(np.asarray(columns[0]).size), ci_level)
