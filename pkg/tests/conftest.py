"""Shared fixtures and independent numerical oracles.

The oracles here deliberately avoid the code paths they are used to check:
the matrix exponential is a plain scaled-and-squared Taylor series (not
uniformization, not scipy), and the exact two-particle stationary law comes
from enumerating the unlabeled pair chain and solving its balance equations.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from qsdfv.chain import RateMatrix, two_state_example

# Exact constants for the two-state example chain.
NU1 = (3.0 - math.sqrt(5.0)) / 2.0  # 0.3819660112501051...
NU2 = (math.sqrt(5.0) - 1.0) / 2.0  # 0.6180339887498949...


def taylor_expm(A: np.ndarray, t: float = 1.0) -> np.ndarray:
    """Dense matrix exponential via scaling and squaring of a Taylor series."""
    B = np.asarray(A, dtype=float) * t
    norm = np.linalg.norm(B, np.inf)
    s = max(0, int(math.ceil(math.log2(norm))) + 1) if norm > 0 else 0
    B = B / (2.0**s)
    n = B.shape[0]
    out = np.eye(n)
    term = np.eye(n)
    for k in range(1, 60):
        term = term @ B / k
        out = out + term
        if np.abs(term).max() < 1e-18:
            break
    for _ in range(s):
        out = out @ out
    return out


def pair_states(n: int) -> list[tuple[int, int]]:
    """Unordered pairs (i <= j) of state indices for the N=2 unlabeled chain."""
    return [(i, j) for i in range(n) for j in range(i, n)]


def exact_pair_generator(rates: RateMatrix) -> tuple[list[tuple[int, int]], np.ndarray]:
    """Generator of the exact unlabeled two-particle Fleming-Viot chain."""
    n = rates.n_states
    R = rates.rate_array()
    a = rates.absorb
    states = pair_states(n)
    idx = {s: k for k, s in enumerate(states)}
    G = np.zeros((len(states), len(states)))

    def add(src, dst, rate):
        if rate > 0 and src != dst:
            G[idx[src], idx[dst]] += rate

    for (i, j) in states:
        movers = [(i, j), (j, i)] if i != j else [(i, i), (i, i)]
        for x, other in movers:
            for z in range(n):
                add((i, j), tuple(sorted((z, other))), R[x, z])
            # absorption: the mover lands on the other particle's state
            add((i, j), tuple(sorted((other, other))), a[x])
    for k in range(len(states)):
        G[k, k] = -G[k].sum()
    return states, G


def exact_pair_invariant(rates: RateMatrix) -> tuple[list[tuple[int, int]], np.ndarray]:
    """Stationary law of the unlabeled pair chain by linear solve."""
    states, G = exact_pair_generator(rates)
    m = len(states)
    # pi G = 0 with sum(pi) = 1: replace one balance equation by normalization
    A = G.T.copy()
    A[-1, :] = 1.0
    b = np.zeros(m)
    b[-1] = 1.0
    pi = np.linalg.solve(A, b)
    return states, pi


def pair_mean_profile(states, pi, n: int) -> np.ndarray:
    """Per-state mean occupation fraction under a pair-chain law."""
    out = np.zeros(n)
    for (i, j), w in zip(states, pi):
        out[i] += 0.5 * w
        out[j] += 0.5 * w
    return out


@pytest.fixture(scope="session")
def b2() -> RateMatrix:
    return two_state_example()
