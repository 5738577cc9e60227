"""Fixed-point Richardson iteration ``x_{k+1} = x_k - tau A^T A x_k + b``.

The Gram matrix ``G = tau A^T A`` is quantized once; each step forms the
exact integer product ``G x_k``, requantizes it, and adds the three terms
exactly at a common LSB before requantizing the new iterate.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import stats

from . import systolic
from .errors import ConfigInvalid, DivergenceDetected, InsufficientData
from .fxlinalg import (CirculantStencil, FixedStencil, apply, condition_number, eta_empirical,
                       gram_of, int_matvec, product_exponent, quantize_operator, spectral_norm)
from .fxnum import (Distribution, ExponentPolicy, FixedArray, MaxAbs, Fixed, align,
                    as_wide, quantize, requantize, wide_to_float)

BACKENDS = ("direct", "systolic")
STATUSES = ("converged", "stagnated", "max_iters", "diverged")


# --------------------------------------------------------------------------
# closed-form pieces
# --------------------------------------------------------------------------

def step_size(op_norm: float, chi: float) -> float:
    """Largest step with safety margin ``chi``: ``(2 - chi) / ||A^T A||``."""
    if op_norm <= 0:
        raise ConfigInvalid("operator norm must be positive")
    if not 0 < chi < 1:
        raise ConfigInvalid("chi must lie in (0, 1)")
    return (2.0 - chi) / op_norm


def convergence_criteria(tau: float, op_norm: float, kappa: float, eta: float):
    """Return ``(ok, eta_max)`` for the fixed-point convergence condition.

    ``eta_max`` is ``inf`` when ``kappa <= tau * op_norm`` (no constraint).
    """
    t = tau * op_norm
    eta_max = math.inf if kappa <= t else t / (kappa - t)
    ok = (0.0 < t < 2.0) and eta < eta_max
    return ok, eta_max


def theta_bound(eta: float, tau: float, op_norm: float, kappa: float) -> float:
    """Upper bound on the asymptotic normalized error: ``eta (kappa / (tau ||A^T A||) - 1)``."""
    return eta * (kappa / (tau * op_norm) - 1.0)


def iteration_norm(tau: float, op_norm: float, kappa: float) -> float:
    """``||I - tau A^T A||`` on the slow end of the spectrum, ``1 - tau ||A^T A|| / kappa``."""
    return 1.0 - tau * op_norm / kappa


def theta_trajectory_bound(k, eta: float, b_norm: float):
    """Error envelope after ``k`` steps from ``x0 = 0`` (works elementwise on arrays)."""
    if not 0 < b_norm < 1:
        raise ValueError("need 0 < ||B|| < 1")
    floor = eta * b_norm / (1.0 - b_norm)
    if floor >= 1:
        raise ValueError("eta too large for a decaying envelope")
    return floor + (1.0 - floor) * np.power(b_norm, k)


# --------------------------------------------------------------------------
# configuration and state
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SolverConfig:
    """Knobs of one fixed-point Richardson solve.

    ``tau=None`` derives the step from ``chi``; ``epsilon=None`` uses
    ``2**(2-L) * sqrt(N)``; ``epsilon=0`` disables the step-change stop.
    ``rounding=None`` means truncation for the direct backend and an
    arithmetic shift for the systolic one.
    """

    bits: int = 8
    chi: float = 0.2
    tau: Optional[float] = None
    epsilon: Optional[float] = None
    max_iters: int = 200
    exponent_policy: ExponentPolicy = MaxAbs()
    b_policy: ExponentPolicy = MaxAbs()
    backend: str = "direct"
    rounding: Optional[str] = None
    divergence_factor: float = 1e3

    def __post_init__(self):
        if not 2 <= self.bits <= 64:
            raise ConfigInvalid(f"bits must lie in [2, 64], got {self.bits}")
        if not 0 < self.chi < 1:
            raise ConfigInvalid("chi must lie in (0, 1)")
        if self.max_iters < 1:
            raise ConfigInvalid("max_iters must be >= 1")
        if self.epsilon is not None and self.epsilon < 0:
            raise ConfigInvalid("epsilon must be >= 0")
        if self.backend not in BACKENDS:
            raise ConfigInvalid(f"backend must be one of {BACKENDS}")
        if self.rounding not in (None, "trunc", "floor"):
            raise ConfigInvalid(f"unknown rounding {self.rounding!r}")

    @property
    def rounding_mode(self) -> str:
        if self.rounding is not None:
            return self.rounding
        return "floor" if self.backend == "systolic" else "trunc"

    def resolved_tau(self, op_norm: float) -> float:
        tau = self.tau if self.tau is not None else step_size(op_norm, self.chi)
        if not 0 < tau * op_norm < 2:
            raise ConfigInvalid(f"step {tau} violates 0 < tau < 2/||A^T A||")
        return tau

    def resolved_epsilon(self, n: int) -> float:
        if self.epsilon is not None:
            return self.epsilon
        return 2.0 ** (2 - self.bits) * math.sqrt(n)


@dataclass(frozen=True)
class IterationMatrix:
    """Precomputed pieces of the iteration: ``G = tau A^T A`` and ``b = tau A^T y``."""

    gram: object            # real G, dense array or CirculantStencil
    ata_fixed: object       # quantized G
    b: np.ndarray
    b_fixed: FixedArray
    tau: float
    op_norm: float
    kappa: float
    eta: Optional[float] = None

    def __post_init__(self):
        if self.op_norm <= 0:
            raise ConfigInvalid("operator norm must be positive")
        if self.kappa < 1 - 1e-9:
            raise ConfigInvalid("condition number must be >= 1")

    @property
    def n(self) -> int:
        return int(self.b.size)

    def with_rhs(self, b: np.ndarray, policy: ExponentPolicy, step: int = 0):
        """Same operator, new right-hand side (already scaled by tau)."""
        b = np.asarray(b, dtype=float).ravel()
        return replace(self, b=b, b_fixed=quantize(b, self.b_fixed.bits, policy, step))


def rmatvec(a, y) -> np.ndarray:
    if hasattr(a, "rmatvec"):
        return a.rmatvec(y)
    return np.asarray(a, dtype=float).T @ np.asarray(y, dtype=float)


def matvec(a, x) -> np.ndarray:
    if hasattr(a, "matvec"):
        return a.matvec(x)
    return np.asarray(a, dtype=float) @ np.asarray(x, dtype=float)


def build_iteration(a, y, config: SolverConfig, *, gram=None, op_norm=None, kappa=None,
                    eta=None) -> IterationMatrix:
    """Quantize ``tau A^T A`` (MaxAbs) and ``tau A^T y`` (``config.b_policy``)."""
    g = gram if gram is not None else gram_of(a)
    op_norm = spectral_norm(g) if op_norm is None else op_norm
    kappa = condition_number(g) if kappa is None else kappa
    tau = config.resolved_tau(op_norm)
    scaled = g.scaled(tau) if isinstance(g, CirculantStencil) else tau * np.asarray(g)
    b = tau * rmatvec(a, y)
    return IterationMatrix(
        gram=scaled,
        ata_fixed=quantize_operator(scaled, config.bits, MaxAbs()),
        b=np.asarray(b, dtype=float).ravel(),
        b_fixed=quantize(b, config.bits, config.b_policy),
        tau=tau, op_norm=op_norm, kappa=kappa, eta=eta)


# --------------------------------------------------------------------------
# traces
# --------------------------------------------------------------------------

@dataclass
class ConvergenceTrace:
    """Per-step record of a solve; ``theta`` is NaN when no reference was given."""

    k: list = field(default_factory=list)
    theta: list = field(default_factory=list)
    expo: list = field(default_factory=list)
    stop_metric: list = field(default_factory=list)
    outer_l: list = field(default_factory=list)
    residual_norm: list = field(default_factory=list)
    status: str = "max_iters"
    flags: list = field(default_factory=list)
    stats: dict = field(default_factory=lambda: {"saturated": 0, "block_issues": 0})
    final_residual_norm: float = math.nan

    def record(self, k, theta, expo, stop_metric, outer_l=1, residual_norm=math.nan):
        if self.k and k <= self.k[-1]:
            raise ValueError("trace steps must increase")
        self.k.append(int(k))
        self.theta.append(float(theta))
        self.expo.append(int(expo))
        self.stop_metric.append(float(stop_metric))
        self.outer_l.append(int(outer_l))
        self.residual_norm.append(float(residual_norm))

    def __len__(self):
        return len(self.k)

    @property
    def thetas(self) -> np.ndarray:
        return np.asarray(self.theta, dtype=float)

    @property
    def terminal_theta(self) -> float:
        return self.theta[-1] if self.theta else math.nan

    def asymptote(self, tail: float = 0.1) -> float:
        """Mean of the last ``tail`` fraction of theta."""
        th = self.thetas
        n = max(1, int(math.ceil(tail * len(th))))
        return float(np.mean(th[-n:]))

    def asymptotic_theta(self, tail: float = 0.1) -> float:
        """Largest theta over the last ``tail`` fraction (a finite-run limsup)."""
        th = self.thetas
        n = max(1, int(math.ceil(tail * len(th))))
        return float(np.max(th[-n:]))

    def extend(self, other: "ConvergenceTrace"):
        for row in zip(other.k, other.theta, other.expo, other.stop_metric,
                       other.outer_l, other.residual_norm):
            self.record(*row)
        for key, val in other.stats.items():
            self.stats[key] = self.stats.get(key, 0) + val
        self.flags.extend(f for f in other.flags if f not in self.flags)
        self.status = other.status

    def to_csv(self, residual_columns: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        if residual_columns:
            writer.writerow(["k", "outer_l", "theta", "expo", "stop_metric", "residual_norm"])
            rows = zip(self.k, self.outer_l, self.theta, self.expo, self.stop_metric,
                       self.residual_norm)
        else:
            writer.writerow(["k", "theta", "expo", "stop_metric"])
            rows = zip(self.k, self.theta, self.expo, self.stop_metric)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ConvergenceTrace":
        trace = cls()
        for row in csv.DictReader(io.StringIO(text)):
            trace.record(int(row["k"]), float(row["theta"]), int(row["expo"]),
                         float(row["stop_metric"]), int(row.get("outer_l", 1)),
                         float(row.get("residual_norm", "nan")))
        return trace


# --------------------------------------------------------------------------
# the solver
# --------------------------------------------------------------------------

def _product(problem: IterationMatrix, x: FixedArray, config: SolverConfig):
    """Exact accumulator of ``G x`` plus a requantizer for the chosen backend."""
    gq = problem.ata_fixed
    if config.backend == "systolic":
        if isinstance(gq, FixedStencil):
            raise ConfigInvalid("the systolic backend needs a dense matrix")
        ops = systolic.decompose(gq, x)
        grid = systolic.block_multiply(ops)
        acc = systolic.grid_to_matrix(grid)[:, 0].astype(np.int64)
        lsb = gq.lsb_exp + x.lsb_exp

        def finish(expo):
            out = systolic.mask_result(grid, expo, gq.expo, x.expo, config.bits,
                                       rounding=config.rounding_mode)
            return FixedArray(out.mant[:, 0], out.expo, out.bits,
                              n_saturated=out.n_saturated)
        return acc, lsb, finish, grid.cycles

    acc, lsb = int_matvec(gq, x)

    def finish(expo):
        return requantize(acc, lsb, config.bits, expo, config.rounding_mode)
    return acc, lsb, finish, 0


def _stateless(policy) -> bool:
    return isinstance(policy, (MaxAbs, Fixed)) or (
        isinstance(policy, Distribution) and policy.period == 1)


def richardson_solve(problem: IterationMatrix, config: SolverConfig, x_star=None, *,
                     x_offset=None, step_offset: int = 0, outer_l: int = 1,
                     residual_norm: float = math.nan, record_initial: bool = True):
    """Run fixed-point Richardson iterations from ``x0 = 0``.

    Returns ``(x_final, trace)``. ``theta_k = ||x* - (x_offset + x_k)|| / ||x*||``
    is logged when ``x_star`` is given and never influences control flow.
    Raises :class:`DivergenceDetected` when the iterate norm passes
    ``divergence_factor * ||b|| / (tau ||A^T A||)``.
    """
    if problem.ata_fixed.bits != config.bits or problem.b_fixed.bits != config.bits:
        raise ConfigInvalid("iteration matrix was quantized at a different bit width")
    n = problem.n
    eps = config.resolved_epsilon(n)
    policy = config.exponent_policy
    rounding = config.rounding_mode
    trace = ConvergenceTrace()
    trace.stats["saturated"] += problem.b_fixed.n_saturated

    if x_star is not None:
        x_star = np.asarray(x_star, dtype=float).ravel()
        ref_norm = float(np.linalg.norm(x_star))
        offset = np.zeros(n) if x_offset is None else np.asarray(x_offset, dtype=float)

        def theta_of(xq):
            return float(np.linalg.norm(x_star - offset - xq.dequantize()) / ref_norm)
    else:
        def theta_of(xq):
            return math.nan

    guard = config.divergence_factor * np.linalg.norm(problem.b) / (problem.tau * problem.op_norm)
    x = FixedArray(np.zeros(n, dtype=np.int64), 0, config.bits)
    x_val = np.zeros(n)
    if record_initial:
        trace.record(step_offset, theta_of(x), x.expo, math.nan, outer_l, residual_norm)
    prod_expo = None
    x_expo = None
    trace.status = "max_iters"
    for k in range(config.max_iters):
        step = step_offset + k
        acc, lsb, finish, issues = _product(problem, x, config)
        prod_expo = policy.choose(step, prod_expo, lambda: wide_to_float(acc, lsb),
                                  maxabs=lambda: product_exponent(acc, lsb))
        p = finish(prod_expo)
        trace.stats["block_issues"] += issues
        trace.stats["saturated"] += p.n_saturated

        (xi, pi, bi), lsb_sum = align([x, p, problem.b_fixed])
        if any(arr.dtype == object for arr in (xi, pi, bi)):
            xi, pi, bi = (arr.astype(object) for arr in (xi, pi, bi))
            total = as_wide(xi - pi + bi)
        else:
            total = xi - pi + bi
        x_expo = policy.choose(step, x_expo, lambda: wide_to_float(total, lsb_sum),
                               maxabs=lambda: product_exponent(total, lsb_sum))
        x_new = requantize(total, lsb_sum, config.bits, x_expo, rounding)
        trace.stats["saturated"] += x_new.n_saturated

        new_val = x_new.dequantize()
        metric = float(np.linalg.norm(new_val - x_val))
        trace.record(step + 1, theta_of(x_new), x_new.expo, metric, outer_l, residual_norm)
        unchanged = x_new == x
        x, x_val = x_new, new_val
        if not np.isfinite(metric) or np.linalg.norm(x_val) > guard > 0:
            trace.status = "diverged"
            trace.flags.append("diverged")
            raise DivergenceDetected(
                f"iterate norm {np.linalg.norm(x_val):.3g} exceeded guard {guard:.3g} "
                f"at step {step + 1}", trace)
        if metric < eps:
            trace.status = "converged"
            break
        if unchanged and _stateless(policy):
            trace.status = "stagnated"
            break

    if problem.eta is not None:
        ok, eta_max = convergence_criteria(problem.tau, problem.op_norm, problem.kappa,
                                           problem.eta)
        if not ok:
            trace.flags.append("criteria_violated")
        elif x_star is not None and x_offset is None and math.isfinite(eta_max):
            # with kappa <= tau ||A^T A|| the bound is negative and says nothing
            bound = theta_bound(problem.eta, problem.tau, problem.op_norm, problem.kappa)
            if trace.asymptotic_theta() > bound:
                trace.flags.append("above_bound")
        if trace.flags:
            warnings.warn(f"fixed-point solve flagged: {', '.join(trace.flags)}",
                          RuntimeWarning, stacklevel=2)
    return x, trace


def float_richardson(gram, b, n_iters: int, x_star=None):
    """Reference-precision Richardson ``x <- x - G x + b`` with ``G`` already scaled."""
    b = np.asarray(b, dtype=float).ravel()
    x = np.zeros_like(b)
    xs = [x.copy()]
    for _ in range(n_iters):
        x = x - apply(gram, x) + b
        xs.append(x.copy())
    xs = np.array(xs)
    if x_star is None:
        return xs
    x_star = np.asarray(x_star, dtype=float).ravel()
    return xs, np.linalg.norm(xs - x_star, axis=1) / np.linalg.norm(x_star)


# --------------------------------------------------------------------------
# rate fitting
# --------------------------------------------------------------------------

def fit_convergence_rate(trace, asymptote: float | None = None, margin: float = 1.05,
                         min_points: int = 10):
    """Fit ``theta_k - asymptote ~ exp(-gamma k)`` on the pre-asymptotic segment.

    Uses the leading run of samples with ``theta_k > margin * asymptote``;
    returns ``(gamma, ci95)`` where ``ci95`` is the 95% half-width of the
    slope from its standard error. ``trace`` may be a :class:`ConvergenceTrace`
    or an array of theta values indexed by step.
    """
    if isinstance(trace, ConvergenceTrace):
        ks = np.asarray(trace.k, dtype=float)
        th = trace.thetas
        if asymptote is None:
            asymptote = trace.asymptote()
    else:
        th = np.asarray(trace, dtype=float)
        ks = np.arange(th.size, dtype=float)
        if asymptote is None:
            n = max(1, int(math.ceil(0.1 * th.size)))
            asymptote = float(np.mean(th[-n:]))
    above = th > margin * asymptote
    stop = int(np.argmin(above)) if not above.all() else th.size
    if stop < min_points:
        raise InsufficientData(
            f"only {stop} samples above {margin} x asymptote; need {min_points}")
    x, y = ks[:stop], np.log(th[:stop] - asymptote)
    fit = stats.linregress(x, y)
    half = stats.t.ppf(0.975, stop - 2) * fit.stderr
    return float(-fit.slope), float(half)


# --------------------------------------------------------------------------
# matrix inversion
# --------------------------------------------------------------------------

def invert_matrix(a, config: SolverConfig, *, n_samples: int = 200, seed: int = 0):
    """Column-by-column inverse of a square matrix: column ``i`` solves ``A x = e_i``.

    Returns ``(inverse, trace, eta)``. The combined trace holds the Frobenius
    error ``||X* - X_k||_F / ||X*||_F`` (finished columns keep their last
    iterate), the largest exponent over columns and the Frobenius norm of
    the per-column step changes. ``eta`` is the per-column measured product
    error averaged over columns.
    """
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ConfigInvalid("invert_matrix needs a square matrix")
    exact = np.linalg.inv(a)
    g = a.T @ a
    op_norm, kappa = spectral_norm(g), condition_number(g)
    cols, traces, etas = [], [], []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        it = build_iteration(a, e, config, gram=g, op_norm=op_norm, kappa=kappa)
        eta = eta_empirical(a, it.b, exact[:, i], config.bits, n_samples, seed + i, gram=it.gram)
        etas.append(eta)
        x, tr = richardson_solve(it, config, exact[:, i])
        cols.append(x.dequantize())
        traces.append(tr)

    eta = float(np.mean(etas))
    weights = np.linalg.norm(exact, axis=0) ** 2
    steps = max(len(tr) for tr in traces)

    def padded(values, fill_last=True):
        out = np.empty((n, steps))
        for i, tr in enumerate(traces):
            v = np.asarray(values(tr), dtype=float)
            out[i, :v.size] = v
            out[i, v.size:] = v[-1] if fill_last else 0.0
        return out

    theta = np.sqrt(weights @ padded(lambda t: t.thetas) ** 2 / weights.sum())
    expo = padded(lambda t: t.expo).max(axis=0)
    metric = padded(lambda t: np.nan_to_num(t.stop_metric), fill_last=False)
    combined = ConvergenceTrace()
    for k in range(steps):
        combined.record(k, theta[k], int(expo[k]),
                        math.nan if k == 0 else float(np.linalg.norm(metric[:, k])))
    order = {s: j for j, s in enumerate(STATUSES)}
    combined.status = max((tr.status for tr in traces), key=order.__getitem__)
    for tr in traces:
        for key, val in tr.stats.items():
            combined.stats[key] = combined.stats.get(key, 0) + val
    tau = config.resolved_tau(op_norm)
    ok, eta_max = convergence_criteria(tau, op_norm, kappa, eta)
    if not ok:
        combined.flags.append("criteria_violated")
    elif math.isfinite(eta_max) and combined.asymptotic_theta() > theta_bound(eta, tau, op_norm, kappa):
        combined.flags.append("above_bound")
    if combined.flags:
        warnings.warn(f"fixed-point inversion flagged: {', '.join(combined.flags)}",
                      RuntimeWarning, stacklevel=2)
    return np.column_stack(cols), combined, eta
