"""Quasi-stationary distributions of finite absorbed chains.

A QSD is a left eigenvector of the restricted generator, normalized to the
simplex, with eigenvalue equal to minus its mean absorption rate. The direct
solver is a power iteration on the uniformized jump kernel, which keeps all
iterates nonnegative and needs only matrix-vector products; the indirect one
runs the conditioned evolution to its limit. Both certify via the residual of
the defining nonlinear system.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .chain import ChainError, Distribution, RateMatrix
from .conditioned import ConvergenceError, yaglom_iterate

EIGEN_FLOOR = 1e-13  # components below this flag a possible boundary vector


@dataclass(frozen=True)
class QsdResult:
    nu: Distribution
    eigenvalue: float
    residual: float
    iterations: int
    boundary: bool = False  # some component collapsed; chain may be reducible


def qsd_residual(rates: RateMatrix, nu: Distribution) -> float:
    """Sup-norm residual of the QSD system.

    residual = sup_x | sum_y nu(y) [q(y,x) + q(y,0) nu(x)] | with the derived
    diagonal in q.
    """
    if nu.space.labels != rates.space.labels:
        raise ChainError("distribution lives on a different state space")
    v = nu.weights
    r = v @ rates.generator() + float(v @ rates.absorb) * v
    return float(np.abs(r).max())


def qsd_power(
    rates: RateMatrix,
    tol: float = 1e-12,
    max_iter: int = 200_000,
    eigen_floor: float = EIGEN_FLOOR,
) -> QsdResult:
    """QSD by left power iteration on the uniformized kernel I + Q/qbar.

    Renormalizes to the simplex every step; stops once successive iterates
    differ by less than ``tol`` in sup norm and the residual certificate is
    within ``tol`` as well. The eigenvalue is recovered as qbar*(r - 1) from
    the converged dominant value r of the jump kernel.
    """
    if tol <= 0:
        raise ChainError("tol must be positive")
    n = rates.n_states
    qbar = rates.qbar
    if qbar == 0.0:
        raise ChainError("chain has no transitions at all")
    kernel = np.eye(n) + rates.generator() / qbar
    v = np.full(n, 1.0 / n)
    r = 1.0
    for iteration in range(1, max_iter + 1):
        w = v @ kernel
        r = float(w.sum())
        w = w / r
        delta = float(np.abs(w - v).max())
        v = w
        if delta < tol:
            nu = Distribution(rates.space, v / v.sum())
            residual = qsd_residual(rates, nu)
            if residual <= tol:
                boundary = bool((v < eigen_floor).any())
                if boundary:
                    warnings.warn(
                        "eigenvector has near-zero components; the chain may be "
                        "reducible and the solution a boundary vector",
                        stacklevel=2,
                    )
                return QsdResult(
                    nu=nu,
                    eigenvalue=qbar * (r - 1.0),
                    residual=residual,
                    iterations=iteration,
                    boundary=boundary,
                )
    nu = Distribution(rates.space, v / v.sum())
    raise ConvergenceError(
        f"power iteration: no convergence in {max_iter} iterations "
        f"(last residual {qsd_residual(rates, nu):g})",
        final_delta=qsd_residual(rates, nu),
        iterations=max_iter,
    )


def qsd_via_yaglom(
    rates: RateMatrix,
    tol: float = 1e-10,
    block: float = 1.0,
    max_blocks: int = 200_000,
) -> QsdResult:
    """QSD as the long-time conditioned limit from the uniform start.

    Delegates to the block iteration and certifies with the residual; the
    inner tolerance is tightened until the certificate meets ``tol`` (a small
    per-block change does not by itself bound the residual).
    """
    if tol <= 0:
        raise ChainError("tol must be positive")
    mu = Distribution.uniform(rates.space)
    inner = min(tol, 1e-8)
    iterations = 0
    for _ in range(6):
        result = yaglom_iterate(rates, mu, block=block, tol=inner, max_blocks=max_blocks)
        iterations += result.iterations
        residual = qsd_residual(rates, result.limit)
        if residual <= tol:
            return QsdResult(
                nu=result.limit,
                eigenvalue=-result.decay_rate,
                residual=residual,
                iterations=iterations,
            )
        inner /= 100.0
    raise ConvergenceError(
        f"yaglom route: residual {residual:g} never reached tol {tol:g}",
        final_delta=residual,
        iterations=iterations,
    )
