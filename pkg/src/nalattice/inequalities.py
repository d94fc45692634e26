"""Monte Carlo checks of the moment, tail and maximal inequalities for NA fields.

Every verifier returns an :class:`InequalityReport`.  Deterministic bounds are
evaluated by pure functions; moment sums come from closed forms whenever the
field model provides them, otherwise from a separate Monte Carlo pass (noted
as ``mc-moments`` in the report).

Verdicts use a one-sided rule at three combined standard errors: a bound of
the form ``lhs <= rhs`` HOLDS when ``lhs <= rhs``, is VIOLATED when
``lhs - rhs > 3 se`` and INCONCLUSIVE in between.  Lower bounds
(``lhs >= rhs``) use the mirrored rule.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np

from .generators import FieldModel, field_model, gaussian_abs_moment
from .lattice import MultiIndex, batch_partial_sums
from .rng import replicate
from .stats import (McEstimate, jackknife, jackknife_estimate, mean_estimate, normal_sf,
                    proportion_estimate)

SCHEMA_VERSION = "nalattice.report/1"
SIGMA_RULE = 3.0
SLOPE_LIMIT = 0.25

# replication streams; distinct per verifier and stage
_STREAM = {
    "rosenthal": 1, "tail": 2, "normal_lower": 3, "convex": 4, "convex_indep": 5,
    "symmetrization": 6, "ratio": 7, "kolmogorov_mean": 8, "kolmogorov_tail": 9,
    "borel_cantelli": 10, "moments": 12,
}


class Verdict(str, Enum):
    HOLDS = "HOLDS"
    VIOLATED = "VIOLATED"
    INCONCLUSIVE = "INCONCLUSIVE"
    BOUNDED = "BOUNDED"
    UNBOUNDED = "UNBOUNDED"


@dataclass(frozen=True)
class InequalityReport:
    name: str
    params: dict
    lhs: McEstimate
    rhs: float | McEstimate
    margin: float
    verdict: Verdict
    notes: tuple[str, ...] = ()

    @property
    def rhs_value(self) -> float:
        return self.rhs.mean if isinstance(self.rhs, McEstimate) else float(self.rhs)

    def to_dict(self) -> dict:
        rhs = self.rhs.to_dict() if isinstance(self.rhs, McEstimate) else _json_float(self.rhs)
        return {
            "schema": SCHEMA_VERSION,
            "name": self.name,
            "params": {k: _json_value(v) for k, v in self.params.items()},
            "lhs": {k: _json_value(v) for k, v in self.lhs.to_dict().items()},
            "rhs": rhs if not isinstance(rhs, dict) else {k: _json_value(v) for k, v in rhs.items()},
            "margin": _json_float(self.margin),
            "verdict": self.verdict.value,
            "notes": list(self.notes),
        }


CSV_COLUMNS = ("schema", "name", "params", "lhs_mean", "lhs_stderr", "lhs_reps",
               "rhs", "rhs_stderr", "margin", "verdict", "notes")


def report_csv_row(report: InequalityReport) -> dict:
    d = report.to_dict()
    rhs = d["rhs"]
    return {
        "schema": d["schema"],
        "name": d["name"],
        "params": json.dumps(d["params"], sort_keys=True, separators=(",", ":")),
        "lhs_mean": repr(report.lhs.mean),
        "lhs_stderr": repr(report.lhs.stderr),
        "lhs_reps": report.lhs.reps,
        "rhs": repr(report.rhs_value),
        "rhs_stderr": repr(report.rhs.stderr) if isinstance(report.rhs, McEstimate) else "0.0",
        "margin": str(d["margin"]),
        "verdict": d["verdict"],
        "notes": ";".join(report.notes),
    }


def reports_to_csv(reports: Iterable[InequalityReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(report_csv_row(r))
    return buf.getvalue()


def reports_to_json(reports: Iterable[InequalityReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True, allow_nan=False) + "\n"


def _json_float(x):
    if x is None:
        return None
    x = float(x)
    if math.isfinite(x):
        return x
    return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")


def _json_value(v):
    if isinstance(v, (bool, str)) or v is None:
        return v
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return _json_float(v)
    if isinstance(v, MultiIndex):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_json_value(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _json_value(x) for k, x in v.items()}
    return str(v)


# --------------------------------------------------------------------------
# verdict rule


def judge(lhs: float, rhs: float, se: float, direction: str = "le") -> tuple[Verdict, float]:
    """Verdict and margin for ``lhs <= rhs`` (``direction="le"``) or ``lhs >= rhs``.

    ``margin`` is the slack in units of ``se``; with ``se == 0`` it is
    ``+inf`` when the bound holds and ``-inf`` otherwise.
    """
    excess = lhs - rhs if direction == "le" else rhs - lhs
    if se > 0:
        margin = -excess / se
    else:
        margin = math.inf if excess <= 0 else -math.inf
    if excess <= 0:
        return Verdict.HOLDS, margin
    if excess > SIGMA_RULE * se:
        return Verdict.VIOLATED, margin
    return Verdict.INCONCLUSIVE, margin


# --------------------------------------------------------------------------
# deterministic right-hand sides


def rosenthal_constant(p: float) -> float:
    """``2 (15 p / ln p)^p``."""
    if p < 2:
        raise ValueError("p must be >= 2")
    return 2.0 * (15.0 * p / math.log(p)) ** p


def rosenthal_bound(p: float, second_moment_sum: float, abs_moment_sum: float) -> float:
    return rosenthal_constant(p) * (second_moment_sum ** (p / 2) + abs_moment_sum)


def tail_exponential_term(x: float, a: float, second_moment_sum: float) -> float:
    """``exp(-x^2 / (2 (a x + B^2)))``."""
    return math.exp(-x * x / (2.0 * (a * x + second_moment_sum)))


def normal_lower_bound(x: float, second_moment_sum: float, cross_sum: float, third_sum: float) -> float:
    """``1 - Phi(x + 1) - 6 B^-2 sum|E Y_i Y_j| - 12 B^-3 sum E|Y|^3``."""
    if second_moment_sum <= 0:
        raise ValueError("B_n must be positive")
    b = math.sqrt(second_moment_sum)
    return float(normal_sf(x + 1.0)) - 6.0 * cross_sum / b**2 - 12.0 * third_sum / b**3


def kolmogorov_bound(x: float, b: float, second_moment_sum: float, d: int) -> float:
    """``2^{d+1} exp(-x^2 / (2 (b x + B^2)))``."""
    return 2.0 ** (d + 1) * math.exp(-x * x / (2.0 * (b * x + second_moment_sum)))


def borel_cantelli_slack(p_union: float, p_sum: float) -> float:
    """``2 P(union) - (1 - P(union))^2 sum P(A_k)``; nonnegative when the bound holds."""
    return 2.0 * p_union - (1.0 - p_union) ** 2 * p_sum


# --------------------------------------------------------------------------
# sampling helpers


def _seed(model: FieldModel, seed: int | None) -> int:
    return model.spec.seed if seed is None else int(seed)


def _run(model: FieldModel, fn, reps: int, seed: int, stream: str, threads) -> dict[str, np.ndarray]:
    def chunk(rng, n):
        return fn(model.sample_batch(rng, n), rng)

    return replicate(chunk, reps, seed, _STREAM[stream], model.size, threads)


def _totals(model: FieldModel, reps: int, seed: int, stream: str, threads) -> np.ndarray:
    out = replicate(lambda rng, n: {"S": model.sample_totals(rng, n)}, reps, seed, _STREAM[stream],
                    model.size, threads)
    return out["S"]


def _moment_sums(model: FieldModel, p: float | None, reps: int, seed: int, threads):
    """``(B^2, sum E|Y|^p, notes)`` from closed forms, or Monte Carlo when missing."""
    b2 = model.second_moment_sum()
    ap = model.abs_moment_sum(p) if p is not None else 0.0
    if b2 is not None and ap is not None:
        return b2, ap, ()
    pp = 2.0 if p is None else p

    def fn(batch, rng):
        x = batch.reshape(batch.shape[0], -1).astype(np.float64)
        return {"y2": (x * x).sum(axis=1), "yp": (np.abs(x) ** pp).sum(axis=1)}

    out = _run(model, fn, max(reps, 2), seed, "moments", threads)
    b2 = float(out["y2"].mean()) if b2 is None else b2
    ap = float(out["yp"].mean()) if ap is None else ap
    return b2, ap, ("mc-moments",)


def _exact_expectation(law, fn: Callable[[np.ndarray], np.ndarray], convex_id: str | None = None):
    """``E f(S)`` under ``("normal", var)`` or ``("discrete", values, probs)``."""
    if law is None:
        return None
    if law[0] == "discrete":
        _, values, probs = law
        return float(np.sum(probs * fn(values)))
    var = float(law[1])
    sd = math.sqrt(max(var, 0.0))
    if convex_id is None:
        return None
    if sd == 0.0:
        return float(fn(np.array([0.0]))[0])
    if convex_id == "square":
        return var
    if convex_id == "abs_cube":
        return gaussian_abs_moment(var, 3.0)
    if convex_id.startswith("exp:"):
        t = float(convex_id.split(":", 1)[1])
        return math.exp(0.5 * t * t * var)
    if convex_id.startswith("hinge:"):
        c = float(convex_id.split(":", 1)[1])
        z = c / sd
        return sd * math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi) - c * float(normal_sf(z))
    return None


# --------------------------------------------------------------------------
# verifiers


def verify_rosenthal(spec, p: float, reps: int = 10_000, seed: int | None = None,
                     threads: int | None = None) -> InequalityReport:
    """``E|S_n|^p <= 2 (15p/ln p)^p {(sum E Y^2)^{p/2} + sum E|Y|^p}``.

    The left side is exact when the law of ``S_n`` is known in closed form
    (Gaussian kinds, Rademacher, multinomial), else Monte Carlo.
    """
    if p < 2:
        raise ValueError("p must be >= 2")
    model = field_model(spec)
    seed = _seed(model, seed)
    b2, ap, notes = _moment_sums(model, p, reps, seed, threads)
    if not math.isfinite(ap):
        raise ValueError(f"E|Y|^{p} is infinite for this spec")
    rhs = rosenthal_bound(p, b2, ap)
    law = model.total_law()
    if law is not None and law[0] == "normal":
        lhs = McEstimate.exact_value(gaussian_abs_moment(law[1], p))
    elif law is not None:
        lhs = McEstimate.exact_value(_exact_expectation(law, lambda s: np.abs(s) ** p))
    else:
        s = _totals(model, reps, seed, "rosenthal", threads)
        lhs = mean_estimate(np.abs(s) ** p)
        notes += ("mc-lhs",)
    verdict, margin = judge(lhs.mean, rhs, lhs.stderr)
    ratio = lhs.mean / rhs if rhs > 0 else (0.0 if lhs.mean == 0 else math.inf)
    params = {"p": p, "shape": model.shape, "constant": rosenthal_constant(p), "B2": b2,
              "abs_moment_sum": ap, "ratio": ratio}
    return InequalityReport("rosenthal", params, lhs, rhs, margin, verdict, notes)


def verify_tail_exponential(spec, x: float, a: float, reps: int = 10_000, seed: int | None = None,
                            threads: int | None = None) -> InequalityReport:
    """``P(T_n >= x) <= P(max Y_k > a) + exp(-x^2 / (2 (a x + B^2)))``."""
    if not (x > 0 and a > 0):
        raise ValueError("x and a must be positive")
    model = field_model(spec)
    seed = _seed(model, seed)
    b2, _, notes = _moment_sums(model, None, reps, seed, threads)
    analytic = tail_exponential_term(x, a, b2)
    p_max = model.max_exceed_prob(a)

    def fn(batch, rng):
        flat = batch.reshape(batch.shape[0], -1)
        return {"S": flat.sum(axis=1, dtype=np.float64), "maxY": flat.max(axis=1).astype(np.float64)}

    if p_max is None:
        out = _run(model, fn, reps, seed, "tail", threads)
        s = out["S"]
        pm = proportion_estimate(out["maxY"] > a)
        rhs: float | McEstimate = McEstimate(pm.mean + analytic, pm.stderr, pm.reps,
                                             ci=(pm.ci[0] + analytic, pm.ci[1] + analytic))
        notes += ("mc-max",)
    else:
        s = _totals(model, reps, seed, "tail", threads)
        rhs = p_max + analytic
    lhs = proportion_estimate(s >= x)
    rhs_se = rhs.stderr if isinstance(rhs, McEstimate) else 0.0
    rhs_val = rhs.mean if isinstance(rhs, McEstimate) else rhs
    verdict, margin = judge(lhs.mean, rhs_val, math.hypot(lhs.stderr, rhs_se))
    params = {"x": x, "a": a, "shape": model.shape, "B2": b2, "exp_term": analytic,
              "p_max": p_max if p_max is not None else rhs_val - analytic}
    if rhs_val >= 1:
        notes += ("vacuous",)
    return InequalityReport("tail_exponential", params, lhs, rhs, margin, verdict, notes)


def verify_normal_lower(spec, x: float, reps: int = 1_000, seed: int | None = None,
                        threads: int | None = None) -> InequalityReport:
    """``P(T_n >= x B_n) >= 1 - Phi(x+1) - 6 B^-2 sum_{i!=j}|E Y_iY_j| - 12 B^-3 sum E|Y|^3``."""
    model = field_model(spec)
    seed = _seed(model, seed)
    b2, third, notes = _moment_sums(model, 3.0, reps, seed, threads)
    if b2 <= 0:
        raise ValueError("B_n = 0: the normalized event is undefined")
    cross = model.cross_cov_abs_sum()
    if cross is None:
        raise ValueError("pairwise covariances are not available for this spec")
    rhs = normal_lower_bound(x, b2, cross, third)
    s = _totals(model, reps, seed, "normal_lower", threads)
    lhs = proportion_estimate(s >= x * math.sqrt(b2))
    verdict, margin = judge(lhs.mean, rhs, lhs.stderr, direction="ge")
    if rhs <= 0:
        notes += ("vacuous",)
    params = {"x": x, "shape": model.shape, "B2": b2, "cross_sum": cross, "third_moment_sum": third,
              "normal_term": float(normal_sf(x + 1.0))}
    return InequalityReport("normal_lower", params, lhs, rhs, margin, verdict, notes)


CONVEX_FUNCTIONS = ("square", "abs_cube", "exp:<t>", "hinge:<c>")


def convex_function(convex_id: str) -> Callable[[np.ndarray], np.ndarray]:
    if convex_id == "square":
        return lambda s: np.asarray(s, dtype=np.float64) ** 2
    if convex_id == "abs_cube":
        return lambda s: np.abs(np.asarray(s, dtype=np.float64)) ** 3
    if convex_id.startswith("exp:"):
        t = float(convex_id.split(":", 1)[1])
        return lambda s: np.exp(t * np.asarray(s, dtype=np.float64))
    if convex_id.startswith("hinge:"):
        c = float(convex_id.split(":", 1)[1])
        return lambda s: np.maximum(0.0, np.asarray(s, dtype=np.float64) - c)
    raise ValueError(f"unknown convex function {convex_id!r}; choose from {CONVEX_FUNCTIONS}")


def verify_convex_comparison(spec, convex_id: str = "square", reps: int = 10_000, seed: int | None = None,
                             threads: int | None = None) -> InequalityReport:
    """``E f(sum Y_k) <= E f(sum Y*_k)`` with independent ``Y*_k`` of the same marginals.

    Dependent fields with a closed-form law of the sum (Gaussian NN,
    multinomial) get an exact left side; otherwise the field is simulated.
    The right side is exact when the independent sum has a known law; else
    independent copies are simulated by permuting every cell's values across
    replications, which keeps the marginals and removes the dependence.
    """
    f = convex_function(convex_id)
    model = field_model(spec)
    seed = _seed(model, seed)
    notes: tuple[str, ...] = ()
    lhs_exact = None if model.independent else _exact_expectation(model.total_law(), f, convex_id)
    rhs_exact = _exact_expectation(model.independent_total_law(), f, convex_id)

    if lhs_exact is not None:
        lhs = McEstimate.exact_value(lhs_exact)
    else:
        s = _totals(model, reps, seed, "convex", threads)
        lhs = mean_estimate(f(s))
        notes += ("mc-lhs",)
    if rhs_exact is not None:
        rhs: float | McEstimate = rhs_exact
        rhs_se = 0.0
    else:
        def fn(batch, rng):
            flat = batch.reshape(batch.shape[0], -1).astype(np.float64)
            shuffled = rng.permuted(flat, axis=0)
            return {"S": shuffled.sum(axis=1)}

        s_ind = _run(model, fn, reps, seed, "convex_indep", threads)["S"]
        rhs = mean_estimate(f(s_ind))
        rhs_se = rhs.stderr
        notes += ("mc-rhs",)
    rhs_val = rhs.mean if isinstance(rhs, McEstimate) else rhs
    verdict, margin = judge(lhs.mean, rhs_val, math.hypot(lhs.stderr, rhs_se))
    params = {"convex": convex_id, "shape": model.shape, "independent": model.independent}
    return InequalityReport("convex_comparison", params, lhs, rhs, margin, verdict, notes)


def verify_symmetrization(spec, p: float = 2.0, reps: int = 10_000, seed: int | None = None,
                          threads: int | None = None) -> InequalityReport:
    """``||M_n||_p <= 5 ||M~_n||_p + ||M_n||_1`` where ``M~`` uses ``eps_k Y_k``.

    The Rademacher multipliers are drawn independently of the field.  The
    combined standard error is the jackknife error of the slack, which
    accounts for both sides sharing replications.
    """
    if p < 2:
        raise ValueError("p must be >= 2")
    model = field_model(spec)
    seed = _seed(model, seed)

    def fn(batch, rng):
        signs = rng.integers(0, 2, size=batch.shape, dtype=np.int8) * 2 - 1
        m = batch_partial_sums(batch)["max_abs"]
        mt = batch_partial_sums(batch * signs)["max_abs"]
        return {"M": m, "Mt": mt}

    out = _run(model, fn, reps, seed, "symmetrization", threads)
    mp, mtp, m1 = out["M"] ** p, out["Mt"] ** p, out["M"]
    root = lambda v: np.power(np.maximum(v, 0.0), 1.0 / p)
    lhs = jackknife_estimate(lambda a: root(a), mp)
    rhs = jackknife_estimate(lambda b, c: 5.0 * root(b) + c, mtp, m1)
    slack, se = jackknife(lambda a, b, c: 5.0 * root(b) + c - root(a), mp, mtp, m1)
    verdict, margin = judge(lhs.mean, rhs.mean, se)
    params = {"p": p, "shape": model.shape, "slack": slack, "slack_stderr": se}
    return InequalityReport("symmetrization", params, lhs, rhs, margin, verdict)


def _growth_slope(sizes: Sequence[int], running: Sequence[float]) -> float:
    start = min(len(sizes) // 2, len(sizes) - 2)
    xs = np.log(np.asarray(sizes[start:], dtype=np.float64))
    ys = np.log(np.maximum(np.asarray(running[start:], dtype=np.float64), 1e-300))
    if xs.size < 2 or np.ptp(xs) == 0:
        return 0.0
    return float(np.polyfit(xs, ys, 1)[0])


def max_moment_ratio(spec, p: float, shapes: Sequence, reps: int = 2_000, seed: int | None = None,
                     threads: int | None = None) -> list[InequalityReport]:
    """Empirical boundedness of the maximal moment ratios along a shape ladder.

    For each shape: ``r1 = E M_n / B_n``,
    ``r2 = E M_n^p / (B_n^p + sum E|Y|^p)`` and
    ``r3 = E max_k T_k^2 / (|n| E Y_1^2)``.  A ratio is BOUNDED when its
    running maximum grows slower than ``|n|^0.25`` (least-squares log-log slope)
    over the largest half of the ladder.  No certified constant is claimed.
    """
    if p < 2:
        raise ValueError("p must be >= 2")
    base = field_model(spec)
    seed = _seed(base, seed)
    rows = []
    for shape in shapes:
        shape = MultiIndex.of(shape)
        model = field_model(base.spec.with_shape(shape))
        b2, ap, notes = _moment_sums(model, p, reps, seed, threads)
        ey2 = model.marginal_second_moment()
        if b2 <= 0 or ey2 <= 0:
            raise ValueError("zero-variance field: ratios are undefined")

        def fn(batch, rng):
            return {"M": batch_partial_sums(batch)["max_abs"]}

        m = _run(model, fn, reps, seed, "ratio", threads)["M"]
        r1 = mean_estimate(m / math.sqrt(b2))
        r2 = mean_estimate(m**p / (b2 ** (p / 2) + ap))
        r3 = mean_estimate(m**2 / (shape.size * ey2))
        rows.append((shape, {"r1": r1, "r2": r2, "r3": r3}, notes))

    reports = []
    sizes = [shape.size for shape, _, _ in rows]
    for key in ("r1", "r2", "r3"):
        running, best = [], -math.inf
        for _, est, _ in rows:
            best = max(best, est[key].mean)
            running.append(best)
        slope = _growth_slope(sizes, running)
        verdict = Verdict.BOUNDED if slope <= SLOPE_LIMIT else Verdict.UNBOUNDED
        for (shape, est, notes), run_max in zip(rows, running):
            params = {"p": p, "shape": shape, "ratio": key, "running_max": run_max, "slope": slope,
                      "slope_limit": SLOPE_LIMIT}
            reports.append(InequalityReport(f"max_moment_ratio.{key}", params, est[key], run_max,
                                            SLOPE_LIMIT - slope, verdict, notes))
    return reports


def verify_kolmogorov_exponential(spec, x_grid: Sequence[float], reps: int = 100_000,
                                  reps_mean: int | None = None, seed: int | None = None,
                                  threads: int | None = None) -> list[InequalityReport]:
    """``P(M_n - 2 E M_n >= 20 x) <= 2^{d+1} exp(-x^2 / (2 (b x + B^2)))`` for bounded fields.

    Stage 1 estimates ``E M_n`` and stage 2 estimates the tail on disjoint
    replication streams.  The verdict is taken on the event with the
    boundary moved by one standard error of ``2 E M_n`` (``2 se``) in the
    lenient direction; the point-estimate probability is reported as ``lhs``.
    """
    model = field_model(spec)
    b = model.bound
    if b is None:
        raise ValueError("the Kolmogorov inequality needs an a.s. bounded field")
    seed = _seed(model, seed)
    b2, _, notes = _moment_sums(model, None, reps, seed, threads)

    def fn(batch, rng):
        return {"M": batch_partial_sums(batch)["max_abs"]}

    m1 = _run(model, fn, reps_mean or reps, seed, "kolmogorov_mean", threads)["M"]
    em = mean_estimate(m1)
    m2 = _run(model, fn, reps, seed, "kolmogorov_tail", threads)["M"]
    reports = []
    for x in x_grid:
        x = float(x)
        if x <= 0:
            raise ValueError("x must be positive")
        rhs = kolmogorov_bound(x, b, b2, model.d)
        lhs = proportion_estimate(m2 - 2.0 * em.mean >= 20.0 * x)
        shifted = proportion_estimate(m2 - 2.0 * (em.mean + em.stderr) >= 20.0 * x)
        verdict, margin = judge(shifted.mean, rhs, shifted.stderr)
        params = {"x": x, "shape": model.shape, "b": b, "B2": b2, "d": model.d,
                  "mean_M": em.mean, "mean_M_stderr": em.stderr, "mean_M_reps": em.reps,
                  "lhs_shifted": shifted.mean}
        flags = notes + (("vacuous",) if rhs >= 1 else ())
        reports.append(InequalityReport("kolmogorov_exponential", params, lhs, rhs, margin, verdict, flags))
    return reports


def verify_borel_cantelli_bound(spec, threshold_rule, index_set=None, reps: int = 10_000,
                                seed: int | None = None, threads: int | None = None) -> InequalityReport:
    """``(1 - P(U A_k))^2 sum P(A_k) <= 2 P(U A_k)`` for ``A_k = {|X_k| >= threshold(k)}``.

    ``threshold_rule`` is a constant or a callable on 1-based MultiIndex;
    ``index_set`` is a list of multi-indices or a window shape (all ``k <= window``),
    defaulting to the whole field.  The error bar is the jackknife error of
    the slack ``2 P(U) - (1 - P(U))^2 sum P(A_k)``.
    """
    model = field_model(spec)
    seed = _seed(model, seed)
    if index_set is None:
        index_set = model.shape
    if isinstance(index_set, (MultiIndex, str)):
        window = MultiIndex.of(index_set)
        indices = [MultiIndex(k) for k in itertools.product(*(range(1, n + 1) for n in window.coords))]
    else:
        indices = [MultiIndex.of(k) for k in index_set]
    if not indices:
        raise ValueError("index set is empty")
    for k in indices:
        if not k.le(model.shape):
            raise IndexError(f"{k} outside {model.shape}")
    flat_idx = np.array([np.ravel_multi_index(tuple(c - 1 for c in k), model.shape.coords) for k in indices])
    thr = np.array([threshold_rule(k) if callable(threshold_rule) else float(threshold_rule) for k in indices])

    def fn(batch, rng):
        x = np.abs(batch.reshape(batch.shape[0], -1)[:, flat_idx].astype(np.float64))
        hits = x >= thr
        return {"U": hits.any(axis=1).astype(np.float64), "C": hits.sum(axis=1).astype(np.float64)}

    out = _run(model, fn, reps, seed, "borel_cantelli", threads)
    u, c = out["U"], out["C"]
    lhs = jackknife_estimate(lambda pu, ps: (1.0 - pu) ** 2 * ps, u, c)
    rhs = jackknife_estimate(lambda pu: 2.0 * pu, u)
    slack, se = jackknife(lambda pu, ps: 2.0 * pu - (1.0 - pu) ** 2 * ps, u, c)
    verdict, margin = judge(lhs.mean, rhs.mean, se)
    params = {"events": len(indices), "p_union": float(u.mean()), "p_sum": float(c.mean()),
              "slack": slack, "slack_stderr": se}
    return InequalityReport("borel_cantelli", params, lhs, rhs, margin, verdict)
