"""Residual iteration: refine a fixed-point Richardson solution past its native precision.

Each outer loop solves ``A dx = r`` from ``dx = 0`` with the fixed-point
solver, then updates ``x += dx`` and ``r = y - A x`` in double precision.
Smaller residues get smaller exponents, so every loop resolves finer detail.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import (ConfigInvalid, DegenerateDistribution, DivergenceDetected, InnerDiverged,
                     ThetaNotContractive)
from .fxlinalg import condition_number, gram_of, spectral_norm
from .fxnum import ExponentPolicy, FixedArray, MaxAbs, distribution_exponent
from .richardson import (ConvergenceTrace, SolverConfig, build_iteration, matvec,
                         richardson_solve, rmatvec)


@dataclass(frozen=True)
class ResidualConfig:
    """Outer-loop settings.

    ``exponent_schedule`` replaces the inner solver's exponent policy and is
    keyed by the global step count. ``b_policy=None`` quantizes each
    right-hand side with the schedule as well.
    """

    inner: SolverConfig = field(default_factory=SolverConfig)
    outer_loops: int = 5
    exponent_schedule: ExponentPolicy = MaxAbs()
    b_policy: Optional[ExponentPolicy] = None

    def __post_init__(self):
        if self.outer_loops < 1:
            raise ConfigInvalid("outer_loops must be >= 1")


def theorem2_bound(theta: float, loops: int) -> float:
    """Error bound after ``loops`` residue updates: ``theta ** loops``."""
    if loops < 1:
        raise ValueError("loops must be >= 1")
    if not 0 <= theta < 1:
        raise ThetaNotContractive(f"theta={theta} >= 1 cannot be refined")
    return theta ** loops


def adaptive_exponent_update(xq: FixedArray, period: int, k: int) -> int:
    """Distribution exponent of ``xq`` every ``period`` steps, else its current exponent."""
    if period < 1:
        raise ValueError("period must be >= 1")
    if k % period != 0:
        return xq.expo
    try:
        return distribution_exponent(xq.dequantize())
    except DegenerateDistribution:
        return 0


def residual_solve(a, y, config: ResidualConfig, x_star=None, *, gram=None,
                   op_norm=None, kappa=None, eta=None):
    """Run ``config.outer_loops`` residue updates.

    Returns ``(x, traces)``: the refined solution in double precision and one
    trace per outer loop with global step numbering. Trace ``l`` records the
    norm of the residue it solved for; ``final_residual_norm`` holds the norm
    after its update.
    """
    y = np.asarray(y, dtype=float).ravel()
    g = gram if gram is not None else gram_of(a)
    op_norm = spectral_norm(g) if op_norm is None else op_norm
    kappa = condition_number(g) if kappa is None else kappa
    inner = replace(config.inner, exponent_policy=config.exponent_schedule)
    b_policy = config.b_policy if config.b_policy is not None else config.exponent_schedule
    base = build_iteration(a, y, replace(inner, b_policy=b_policy), gram=g,
                           op_norm=op_norm, kappa=kappa, eta=eta)

    x = np.zeros(base.n)
    r = y.copy()
    step = 0
    traces = []
    for loop in range(1, config.outer_loops + 1):
        b = base.tau * rmatvec(a, r)
        problem = base if loop == 1 else base.with_rhs(b, b_policy, step)
        r_norm = float(np.linalg.norm(r))
        try:
            dx, trace = richardson_solve(
                problem, inner, x_star, x_offset=x, step_offset=step, outer_l=loop,
                residual_norm=r_norm, record_initial=loop == 1)
        except DivergenceDetected as exc:
            raise InnerDiverged(loop, traces + [exc.trace]) from exc
        x = x + dx.dequantize()
        r = y - matvec(a, x)
        trace.final_residual_norm = float(np.linalg.norm(r))
        traces.append(trace)
        step = trace.k[-1]
    return x, traces


def concat_traces(traces) -> ConvergenceTrace:
    out = ConvergenceTrace()
    for tr in traces:
        out.extend(tr)
    if traces:
        out.final_residual_norm = traces[-1].final_residual_norm
    return out


def loop_thetas(traces):
    """Terminal theta of each outer loop (the accumulated error after that loop)."""
    return [tr.terminal_theta for tr in traces]
