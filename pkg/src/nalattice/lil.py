"""Law-of-the-iterated-logarithm trajectories on one evolving sample path.

A trajectory follows the diagonal subsequence ``N_k = ([theta^k], ...)`` and
records ``S_{N_k}`` (or ``M_{N_k}``) divided by ``sqrt(2 d |N_k| LL|N_k|)``.
The field is streamed slab by slab through a :class:`PrefixScanner`, so only
one prefix plane is held in memory.  For coordinate-keyed generators the
field on a smaller box is the restriction of the field on a larger box, which
makes every point of a trajectory part of the same realization.  Other
generators are realized once on the spec's window and cropped.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from ._version import __version__
from .generators import (GeneratorSpec, IidHeavyTail, IidNormal, IidRademacher,
                         TruncatedCentered, exact_sigma_squared, field_model, heavy_tail_condition_check,
                         iter_slab_blocks, marginal, spec_to_dict)
from .lattice import MultiIndex, PrefixScanner, loglog_norm
from .rng import default_threads, replicate
from .stats import McEstimate, mean_estimate, normal_sf

STATISTICS = ("signed", "abs", "max")
DEFAULT_MAX_CELLS = 20_000_000


@dataclass(frozen=True)
class LilConfig:
    spec: GeneratorSpec
    theta: float = 1.5
    k_max: int = 20
    seeds: tuple[int, ...] = (1,)
    statistic: str = "abs"
    max_cells: int = DEFAULT_MAX_CELLS

    def __post_init__(self):
        if not self.theta > 1:
            raise ValueError("theta must be > 1")
        if self.k_max < 2:
            raise ValueError("k_max must be >= 2")
        if self.statistic not in STATISTICS:
            raise ValueError(f"statistic must be one of {STATISTICS}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    @property
    def d(self) -> int:
        return self.spec.shape.d

    def to_dict(self) -> dict:
        return {"spec": spec_to_dict(self.spec), "theta": self.theta, "k_max": self.k_max,
                "seeds": list(self.seeds), "statistic": self.statistic, "max_cells": self.max_cells}


@dataclass(frozen=True)
class TrajectoryPoint:
    k: int
    n: MultiIndex
    cells: int
    statistic: float
    running_max: float


@dataclass(frozen=True)
class Trajectory:
    points: tuple[TrajectoryPoint, ...]
    normalization: str
    sigma_ref: float
    seed: int
    flags: tuple[str, ...] = ()
    ceiling: float | None = None

    @property
    def final_running_max(self) -> float:
        return self.points[-1].running_max if self.points else 0.0

    @property
    def tail_max(self) -> float:
        """Largest statistic over the last third of the points."""
        if not self.points:
            return 0.0
        start = len(self.points) - max(1, len(self.points) // 3)
        return max(p.statistic for p in self.points[start:])

    def limsup_report(self) -> dict:
        return {"seed": self.seed, "final_running_max": self.final_running_max, "tail_max": self.tail_max,
                "sigma_ref": self.sigma_ref, "points": len(self.points), "flags": list(self.flags),
                "ceiling": self.ceiling}


def _subsequence(config: LilConfig, extra: float = 0.0) -> tuple[list[tuple[int, MultiIndex]], list[str]]:
    """Diagonal points ``(k, N_k)`` within the cell budget (``extra`` widens each side)."""
    base, power, last = Fraction(config.theta), Fraction(1), None
    points, flags = [], []
    for k in range(1, config.k_max + 1):
        power *= base
        side = math.floor(power)
        if side == last:
            continue
        last = side
        if (side + math.floor(extra * side)) ** config.d > config.max_cells:
            flags.append("truncated-at-max-cells")
            break
        points.append((k, MultiIndex.diagonal(side, config.d)))
    return points, flags


def sigma_reference(spec: GeneratorSpec) -> tuple[float, tuple[str, ...]]:
    """``sigma`` for stationary kinds, else ``sqrt(E X_1^2)`` (flagged)."""
    try:
        return math.sqrt(max(exact_sigma_squared(spec), 0.0)), ()
    except (ValueError, TypeError, NotImplementedError):
        return math.sqrt(field_model(spec).marginal_second_moment()), ("sigma-ref-marginal",)


def _window_spec(config: LilConfig, seed: int, side: int) -> GeneratorSpec:
    spec = config.spec.with_seed(seed)
    if field_model(spec).keyed:
        return spec.with_shape(MultiIndex.diagonal(side, config.d))
    if not MultiIndex.diagonal(side, config.d).le(spec.shape):
        raise ValueError(f"trajectory needs a {side}^{config.d} window but the non-keyed spec is {spec.shape}; "
                         "enlarge the spec shape or lower k_max")
    return spec


def _stream(spec: GeneratorSpec, side: int, d: int):
    """Yield ``(row_index, slab)`` for rows ``1..side`` of the diagonal box."""
    shape = MultiIndex.diagonal(side, d)
    row = 0
    for block in iter_slab_blocks(spec, shape):
        for slab in block:
            row += 1
            yield row, slab


def _diag_corner(plane: np.ndarray, side: int):
    return plane[(side - 1,) * plane.ndim] if plane.ndim else plane


def run_lil_trajectory(config: LilConfig, seed: int | None = None) -> Trajectory:
    """Normalized statistic along the diagonal subsequence for one seed."""
    seed = config.seeds[0] if seed is None else int(seed)
    points, flags = _subsequence(config)
    sigma, sflags = sigma_reference(config.spec)
    flags = list(flags) + list(sflags)
    if sigma == 0.0:
        warnings.warn("sigma = 0: the normalized statistic has a degenerate limit", RuntimeWarning, stacklevel=2)
        flags.append("sigma-zero")
    if not points:
        return Trajectory((), config.statistic, sigma, seed, tuple(flags))
    d = config.d
    last = points[-1][1].coords[0]
    spec = _window_spec(config, seed, last)
    scanner = PrefixScanner((last,) * (d - 1), track_max=config.statistic == "max")
    targets = {n.coords[0]: (k, n) for k, n in points}
    out, best = [], -math.inf
    for row, slab in _stream(spec, last, d):
        plane = scanner.push(slab)
        if row not in targets:
            continue
        k, n = targets[row]
        if config.statistic == "max":
            value = float(scanner.max_plane[(slice(0, row),) * (d - 1)].max()) if d > 1 else float(scanner.max_plane)
        else:
            value = float(_diag_corner(plane, row))
            if config.statistic == "abs":
                value = abs(value)
        stat = value / float(loglog_norm(n))
        best = max(best, stat)
        out.append(TrajectoryPoint(k, n, n.size, stat, best))
    return Trajectory(tuple(out), config.statistic, sigma, seed, tuple(flags))


def _map_seeds(fn, seeds: Sequence[int], threads: int | None):
    threads = default_threads() if threads is None else max(1, int(threads))
    if threads == 1 or len(seeds) == 1:
        return [fn(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, seeds))


def run_lil_trajectories(config: LilConfig, threads: int | None = None) -> list[Trajectory]:
    """One trajectory per seed, in seed order."""
    return _map_seeds(lambda s: run_lil_trajectory(config, s), config.seeds, threads)


# --------------------------------------------------------------------------
# increments


def increment_ceiling(delta: float, d: int, sup_second_moment: float) -> float:
    """``80 d sqrt(delta (1 + 2 delta)^d) sqrt(sup E X^2)``."""
    if not 0 < delta <= 1:
        raise ValueError("delta must lie in (0, 1]")
    return 80.0 * d * math.sqrt(delta * (1.0 + 2.0 * delta) ** d) * math.sqrt(sup_second_moment)


def increment_trajectory(config: LilConfig, delta: float, seed: int | None = None) -> Trajectory:
    """``max_{0 <= k <= delta n} |S_{n+k} - S_n| / loglog_norm(n)`` along the diagonal.

    ``k`` runs over all multi-indices with ``k_i <= floor(delta n_i)``.  The
    spec must be almost surely bounded (use ``TruncatedCentered`` for
    unbounded laws); the returned trajectory carries the asymptotic ceiling.
    """
    if not 0 < delta <= 1:
        raise ValueError("delta must lie in (0, 1]")
    model = field_model(config.spec)
    if model.bound is None:
        raise ValueError("increment trajectories need an a.s. bounded spec (e.g. truncated)")
    seed = config.seeds[0] if seed is None else int(seed)
    points, flags = _subsequence(config, extra=delta)
    sigma, sflags = sigma_reference(config.spec)
    flags = list(flags) + list(sflags)
    d = config.d
    ceiling = increment_ceiling(delta, d, model.sup_second_moment())
    if not points:
        return Trajectory((), "increment", sigma, seed, tuple(flags), ceiling)
    windows = []
    for k, n in points:
        side = n.coords[0]
        windows.append((k, n, side, side + math.floor(delta * side)))
    end = max(w[3] for w in windows)
    spec = _window_spec(config, seed, end)
    scanner = PrefixScanner((end,) * (d - 1))
    base = {}
    incr = {k: 0.0 for k, *_ in windows}
    for row, slab in _stream(spec, end, d):
        plane = scanner.push(slab)
        for k, n, lo, hi in windows:
            if row < lo or row > hi:
                continue
            box = plane[(slice(lo - 1, hi),) * (d - 1)] if d > 1 else plane
            if row == lo:
                base[k] = float(_diag_corner(plane, lo))
            incr[k] = max(incr[k], float(np.max(np.abs(box - base[k]))))
    out, best = [], -math.inf
    for k, n, _, _ in windows:
        stat = incr[k] / float(loglog_norm(n))
        best = max(best, stat)
        out.append(TrajectoryPoint(k, n, n.size, stat, best))
    return Trajectory(tuple(out), "increment", sigma, seed, tuple(flags), ceiling)


def increment_trajectories(config: LilConfig, delta: float, threads: int | None = None) -> list[Trajectory]:
    return _map_seeds(lambda s: increment_trajectory(config, delta, s), config.seeds, threads)


# --------------------------------------------------------------------------
# necessity of the tail condition


def abs_tail_ge(spec: GeneratorSpec, t):
    """``P(|X| >= t)`` for iid kinds with a closed-form marginal tail."""
    kind = spec.kind
    t = np.asarray(t, dtype=np.float64)
    if isinstance(kind, IidNormal):
        return 2.0 * normal_sf(t / math.sqrt(kind.variance))
    if isinstance(kind, IidRademacher):
        return (t <= 1.0).astype(np.float64)
    if isinstance(kind, IidHeavyTail):
        return np.asarray(marginal(kind).tail_abs(t), dtype=np.float64)
    if isinstance(kind, TruncatedCentered) and kind.level is not None and isinstance(
            kind.inner, (IidNormal, IidRademacher, IidHeavyTail)):
        # symmetric inner law: the centring constant is 0 and clipping only removes mass above b
        inner = GeneratorSpec(kind.inner, spec.shape, spec.seed)
        return np.where(t <= kind.level, abs_tail_ge(inner, t), 0.0)
    raise ValueError(f"no closed-form tail for {type(kind).__name__}")


@dataclass(frozen=True)
class NecessityReport:
    windows: tuple[int, ...]
    exact_partial_sums: tuple[float, ...]
    mc_partial_sums: tuple[McEstimate | None, ...]
    increment_ratio: float
    flattening: bool
    analytic_condition: bool | None
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "windows": list(self.windows),
            "exact_partial_sums": list(self.exact_partial_sums),
            "mc_partial_sums": [None if m is None else m.to_dict() for m in self.mc_partial_sums],
            "increment_ratio": self.increment_ratio,
            "flattening": self.flattening,
            "analytic_condition": self.analytic_condition,
            "flags": list(self.flags),
        }


FLATTENING_RATIO = 0.9
MC_CELL_BUDGET = 50_000_000


def _thresholds(const: float, prods: np.ndarray, d: int) -> np.ndarray:
    return 2.0 * const * np.asarray(loglog_norm(prods.astype(np.float64), d), dtype=np.float64)


def _shell_index(grid_max: np.ndarray) -> np.ndarray:
    return np.ceil(np.log2(grid_max.astype(np.float64))).astype(np.int64)


def necessity_probe(spec: GeneratorSpec, threshold_const: float, k_max: int, reps: int = 200,
                    seed: int | None = None, threads: int | None = None) -> NecessityReport:
    """Partial sums of ``P(|X_k| >= 2C sqrt(2d|k| LL|k|))`` over windows ``[1, 2^j]^d``.

    The exact column evaluates the marginal tail on every cell; the Monte
    Carlo column counts exceedances in simulated fields for windows that fit
    the cell budget.  ``flattening`` is True when the last three window
    increments shrink by a geometric-mean factor below ``0.9``; this is a
    heuristic read of convergence, shown next to the analytic tail criterion
    (heavy-tailed kinds only).
    """
    if threshold_const <= 0:
        raise ValueError("threshold constant must be positive")
    if k_max < 2:
        raise ValueError("k_max must be >= 2")
    model = field_model(spec)
    if not model.independent:
        raise ValueError("the necessity probe needs an iid spec")
    abs_tail_ge(spec, np.array([1.0]))  # raises for kinds without a tail formula
    d = spec.shape.d
    jmax = int(math.floor(math.log2(k_max)))
    windows = tuple(2**j for j in range(jmax + 1))
    side = windows[-1]
    shells = np.zeros(jmax + 1)
    rest = (side,) * (d - 1)
    rest_prod = np.ones(1, dtype=np.int64)
    rest_max = np.ones(1, dtype=np.int64)
    for n in rest:
        ax = np.arange(1, n + 1, dtype=np.int64)
        rest_prod = np.multiply.outer(rest_prod, ax).reshape(-1)
        rest_max = np.maximum.outer(rest_max, ax).reshape(-1)
    for k1 in range(1, side + 1):
        prods = k1 * rest_prod
        probs = abs_tail_ge(spec, _thresholds(threshold_const, prods, d))
        shell = _shell_index(np.maximum(rest_max, k1))
        shells += np.bincount(shell, weights=probs, minlength=jmax + 1)
    exact = tuple(float(x) for x in np.cumsum(shells))

    seed = spec.seed if seed is None else int(seed)
    mc: list[McEstimate | None] = []
    flags = []
    for w in windows:
        if w**d * reps > MC_CELL_BUDGET:
            mc.append(None)
            if "mc-window-capped" not in flags:
                flags.append("mc-window-capped")
            continue
        sub = field_model(spec.with_shape(MultiIndex.diagonal(w, d)))
        grid = np.ones((1,) * d, dtype=np.int64)
        for axis in range(d):
            view = [1] * d
            view[axis] = w
            grid = grid * np.arange(1, w + 1, dtype=np.int64).reshape(view)
        thr = _thresholds(threshold_const, grid.reshape(-1), d)

        def fn(rng, n, sub=sub, thr=thr):
            x = np.abs(sub.sample_batch(rng, n).reshape(n, -1).astype(np.float64))
            return {"count": (x >= thr).sum(axis=1).astype(np.float64)}

        counts = replicate(fn, reps, seed, 13, sub.size, threads)["count"]
        mc.append(mean_estimate(counts))

    inc = np.diff(np.concatenate([[0.0], exact]))
    tail = inc[-4:]
    ratios = [b / a for a, b in zip(tail[:-1], tail[1:]) if a > 0]
    if not ratios or exact[-1] == 0:
        ratio = 0.0
    else:
        ratio = float(np.exp(np.mean(np.log(np.maximum(ratios, 1e-300)))))
    analytic = None
    if isinstance(spec.kind, IidHeavyTail):
        analytic = heavy_tail_condition_check(spec.kind.tail_exponent, spec.kind.log_power, d)
    elif model.bound is not None or isinstance(spec.kind, IidNormal):
        analytic = True
    return NecessityReport(windows, exact, tuple(mc), ratio, ratio < FLATTENING_RATIO, analytic, tuple(flags))


# --------------------------------------------------------------------------
# output


def trajectory_csv(trajectory: Trajectory, d: int | None = None) -> str:
    """Columns ``k, n_1..n_d, cells, statistic, running_max, sigma_ref``."""
    if d is None:
        d = trajectory.points[0].n.d if trajectory.points else 1
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["k", *[f"n_{i + 1}" for i in range(d)], "cells", "statistic", "running_max", "sigma_ref"])
    for p in trajectory.points:
        writer.writerow([p.k, *p.n.coords, p.cells, repr(p.statistic), repr(p.running_max),
                         repr(trajectory.sigma_ref)])
    return buf.getvalue()


def run_manifest(config: LilConfig, trajectories: Sequence[Trajectory], extra: dict | None = None) -> str:
    data = {
        "schema": "nalattice.lil/1",
        "version": __version__,
        "config": config.to_dict(),
        "limsup": [t.limsup_report() for t in trajectories],
    }
    if extra:
        data.update(extra)
    return json.dumps(data, indent=2, sort_keys=True, allow_nan=False) + "\n"
