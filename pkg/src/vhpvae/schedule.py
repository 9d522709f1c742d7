"""Constraint-schedule state machines for weighted-objective training.

The objective is  beta * F + E[C]  with F the KL-style regulariser and C the
reconstruction constraint.  The schedules move beta (equivalently a Lagrange
multiplier lambda = 1/beta) in response to the running constraint value:

* ``rewo``   - two-phase scheme: reconstruct first with beta frozen tiny,
               then push beta toward 1 once the constraint is satisfied.
* ``geco``   - plain multiplicative multiplier update.
* ``warmup`` - deterministic linear ramp of beta from 0 to 1 over T steps.
* ``none``   - beta fixed at its initial value.

All transitions are pure: they take (state, batch constraint, config) and
return a new state plus the set of network groups to optimise this step.
"""

from __future__ import annotations

import dataclasses
import math

ALGORITHMS = ("rewo", "geco", "warmup", "none")

SCOPE_OUTER = frozenset({"encoder", "decoder"})
SCOPE_ALL = frozenset({"encoder", "decoder", "prior_encoder", "prior_decoder"})

PHASE_INITIAL = "initial"
PHASE_MAIN = "main"


@dataclasses.dataclass(frozen=True)
class ScheduleConfig:
    """Hyperparameters of the beta schedule."""

    kappa: float = 0.02
    nu: float = 1.0
    tau: float = 3.0
    alpha: float = 0.99
    beta0: float = 1e-3
    algorithm: str = "rewo"
    warmup_steps: int | None = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown schedule algorithm '{self.algorithm}'")
        if not (self.kappa > 0 and math.isfinite(self.kappa)):
            raise ValueError("kappa must be positive and finite")
        if not (self.nu > 0 and math.isfinite(self.nu)):
            raise ValueError("nu must be positive and finite")
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ValueError("tau must be positive and finite")
        if not (0.0 <= self.alpha < 1.0):
            raise ValueError("alpha must lie in [0, 1)")
        if not (self.beta0 > 0 and math.isfinite(self.beta0)):
            raise ValueError("beta0 must be positive and finite")
        if self.algorithm == "warmup":
            if self.warmup_steps is None or self.warmup_steps < 1:
                raise ValueError("warmup requires warmup_steps >= 1")


@dataclasses.dataclass(frozen=True)
class ScheduleState:
    """Mutable-in-spirit schedule state, threaded through pure transitions."""

    beta: float
    c_t: float | None = None
    initial_phase: bool = True
    t: int = 0

    @property
    def phase(self):
        return PHASE_INITIAL if self.initial_phase else PHASE_MAIN


def initial_state(cfg):
    """Fresh state for a run.

    The fixed-multiplier scheme starts from lambda = 1 (beta = 1); the other
    algorithms start from beta0.  Only the two-phase scheme begins in the
    initial (reconstruction-only) phase.
    """
    if cfg.algorithm == "geco":
        return ScheduleState(beta=1.0, initial_phase=False)
    return ScheduleState(beta=cfg.beta0, initial_phase=(cfg.algorithm == "rewo"))


def running_cost(c_prev, c_ba, alpha):
    """EMA of the constraint; the very first call passes the batch through."""
    if not math.isfinite(c_ba):
        raise ValueError("batch constraint value is not finite")
    if c_prev is None:
        return float(c_ba)
    return (1.0 - alpha) * float(c_ba) + alpha * float(c_prev)


def _heaviside(delta):
    # H(0) = 0: delta == 0 still satisfies the inequality constraint
    return 1.0 if delta > 0.0 else 0.0


def f_beta(beta, delta, tau):
    """Direction factor: -1 when the constraint is violated, else tanh(tau*(beta-1))."""
    h = _heaviside(delta)
    return (1.0 - h) * math.tanh(tau * (beta - 1.0)) - h


def rewo_beta_step(beta, c_t, cfg):
    """Multiplicative beta update toward the fixed point beta = 1."""
    delta = c_t - cfg.kappa ** 2
    return beta * math.exp(cfg.nu * f_beta(beta, delta, cfg.tau) * delta)


def geco_lambda_step(lam, c_t, cfg):
    """Multiplicative multiplier update: grow lambda while the constraint is violated."""
    delta = c_t - cfg.kappa ** 2
    return lam * math.exp(cfg.nu * delta)


def alt_beta_step(gamma, c_t, cfg):
    """Alternative parameterisation lambda = 1 + gamma, beta = 1/(1 + tau*gamma)."""
    delta = c_t - cfg.kappa ** 2
    gamma_next = gamma * math.exp(cfg.nu * delta)
    return gamma_next, 1.0 / (1.0 + cfg.tau * gamma_next)


def warmup_beta(t, big_t):
    """Linear ramp min(t/T, 1)."""
    if big_t < 1:
        raise ValueError("warmup horizon must be >= 1")
    return min(t / big_t, 1.0)


def rewo_step(state, c_ba, cfg):
    """One transition of the two-phase schedule.

    Updates the running constraint, flips out of the initial phase permanently
    once it drops below kappa^2, and in the main phase moves beta.  Returns the
    new state and the scope of network groups to optimise this step.
    """
    c_t = running_cost(state.c_t, c_ba, cfg.alpha)
    initial = state.initial_phase and not (c_t < cfg.kappa ** 2)
    if initial:
        beta = state.beta
        scope = SCOPE_OUTER
    else:
        beta = rewo_beta_step(state.beta, c_t, cfg)
        scope = SCOPE_ALL
    return ScheduleState(beta=beta, c_t=c_t, initial_phase=initial,
                         t=state.t + 1), scope


def geco_step(state, c_ba, cfg):
    c_t = running_cost(state.c_t, c_ba, cfg.alpha)
    lam = geco_lambda_step(1.0 / state.beta, c_t, cfg)
    return ScheduleState(beta=1.0 / lam, c_t=c_t, initial_phase=False,
                         t=state.t + 1), SCOPE_ALL


def warmup_step(state, c_ba, cfg):
    c_t = running_cost(state.c_t, c_ba, cfg.alpha)
    # t+1 keeps beta strictly positive from the first optimised step on
    beta = warmup_beta(state.t + 1, cfg.warmup_steps)
    return ScheduleState(beta=beta, c_t=c_t, initial_phase=False,
                         t=state.t + 1), SCOPE_ALL


def fixed_step(state, c_ba, cfg):
    c_t = running_cost(state.c_t, c_ba, cfg.alpha)
    return ScheduleState(beta=state.beta, c_t=c_t, initial_phase=False,
                         t=state.t + 1), SCOPE_ALL


_STEPS = {
    "rewo": rewo_step,
    "geco": geco_step,
    "warmup": warmup_step,
    "none": fixed_step,
}


def schedule_step(state, c_ba, cfg):
    """Dispatch one schedule transition for the configured algorithm."""
    return _STEPS[cfg.algorithm](state, c_ba, cfg)
