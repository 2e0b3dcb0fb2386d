"""Evolution of the chain's law conditioned on survival.

Two independent routes to the conditioned law: the exact semigroup ratio, and
the nonlinear forward equations integrated with fixed-step RK4. Iterating the
semigroup ratio in blocks drives the law to its long-time (Yaglom) limit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .chain import ChainError, Distribution, RateMatrix, semigroup

ODE_NEG_TOL = 1e-9  # discretization undershoot tolerated before aborting


class ConditioningError(ValueError):
    """The survival event conditioned on has vanishing probability."""


class OdeStepError(ValueError):
    """The integration step is too large for the requested system."""


class ConvergenceError(RuntimeError):
    """Iteration failed to meet its tolerance; carries the last delta."""

    def __init__(self, message: str, final_delta: float, iterations: int):
        super().__init__(message)
        self.final_delta = final_delta
        self.iterations = iterations


@dataclass(frozen=True)
class ConditionedPath:
    """Conditioned law along a time grid.

    ``norm_drift`` is the largest deviation of the raw integrated vector from
    unit mass seen before renormalization; it exposes the discretization error
    instead of hiding it.
    """

    times: np.ndarray
    phis: list[Distribution]
    norm_drift: float

    def final(self) -> Distribution:
        return self.phis[-1]


@dataclass(frozen=True)
class YaglomResult:
    limit: Distribution
    iterations: int
    final_delta: float
    decay_rate: float  # sum over states of limit(y) * q(y, 0)


def phi_semigroup(rates: RateMatrix, mu: Distribution, t: float) -> Distribution:
    """Conditioned law at time t: the semigroup ratio.

    phi_t(x) = (mu P_t)(x) / (1 - mu P_t(., absorbing)).
    """
    kernel = semigroup(rates, t)
    numer = mu.weights @ kernel.entries
    survival = 1.0 - float(mu.weights @ kernel.absorb_col)
    if survival <= np.finfo(float).eps:
        raise ConditioningError(
            f"conditioning event has vanishing probability (survival={survival:g} "
            f"at t={t:g})"
        )
    return Distribution(rates.space, numer / survival)


def _phi_derivative(Q: np.ndarray, absorb: np.ndarray, phi: np.ndarray) -> np.ndarray:
    # d/dt phi(x) = sum_y phi(y) [q(y,x) + q(y,0) phi(x)]
    return phi @ Q + float(phi @ absorb) * phi


def phi_ode(
    rates: RateMatrix,
    mu: Distribution,
    t_end: float,
    step: float,
    neg_tol: float = ODE_NEG_TOL,
) -> ConditionedPath:
    """Integrate the nonlinear forward equations of the conditioned law.

    Classical fixed-step RK4; after every step the vector is renormalized onto
    the simplex and the pre-renormalization mass defect is accumulated into
    ``norm_drift``. Undershoots below ``-neg_tol`` abort with advice to reduce
    the step. Fixed stepping keeps runs bit-reproducible.
    """
    if step <= 0:
        raise ChainError("step must positive")
    if t_end < 0:
        raise ChainError("t_end must be >= 0")
    Q = rates.generator()
    absorb = rates.absorb
    phi = mu.weights.copy()
    times = [0.0]
    phis = [mu]
    drift = 0.0
    n_steps = int(math.ceil(t_end / step - 1e-12))
    t = 0.0
    for k in range(n_steps):
        h = min(step, t_end - t)
        k1 = _phi_derivative(Q, absorb, phi)
        k2 = _phi_derivative(Q, absorb, phi + 0.5 * h * k1)
        k3 = _phi_derivative(Q, absorb, phi + 0.5 * h * k2)
        k4 = _phi_derivative(Q, absorb, phi + h * k3)
        phi = phi + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        low = float(phi.min())
        if low < -neg_tol:
            raise OdeStepError(
                f"step {step:g} too large: weight undershoot {low:g} at "
                f"t={t + h:g}; retry with a smaller step"
            )
        drift = max(drift, abs(float(phi.sum()) - 1.0))
        phi = np.clip(phi, 0.0, None)
        phi = phi / phi.sum()
        t += h
        times.append(t)
        phis.append(Distribution(rates.space, phi))
    return ConditionedPath(np.array(times), phis, drift)


def yaglom_iterate(
    rates: RateMatrix,
    mu: Distribution,
    block: float,
    tol: float,
    max_blocks: int = 100_000,
) -> YaglomResult:
    """Iterate the conditioned law in blocks of fixed length until it settles.

    Applies the exact semigroup ratio per block (the block kernel is computed
    once and reused). Stops when the sup-norm change per block drops below
    ``tol``; raises ConvergenceError with the last delta otherwise, which is
    the expected outcome for chains outside the unique-limit regime.
    """
    if block <= 0 or tol <= 0:
        raise ChainError("block and tol must be positive")
    kernel = semigroup(rates, block)
    phi = mu.weights.copy()
    delta = math.inf
    for iteration in range(1, max_blocks + 1):
        numer = phi @ kernel.entries
        survival = 1.0 - float(phi @ kernel.absorb_col)
        if survival <= np.finfo(float).eps:
            raise ConditioningError(
                "conditioning event has vanishing probability during iteration"
            )
        new = numer / survival
        delta = float(np.abs(new - phi).max())
        phi = new
        if delta < tol:
            limit = Distribution(rates.space, phi / phi.sum())
            decay = float(limit.weights @ rates.absorb)
            return YaglomResult(limit, iteration, delta, decay)
    raise ConvergenceError(
        f"no convergence within {max_blocks} blocks (last delta {delta:g})",
        final_delta=delta,
        iterations=max_blocks,
    )
