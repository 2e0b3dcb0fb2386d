"""Fleming-Viot particle simulation for absorbed Markov chains.

N particles move independently with the chain's rates; a particle hitting the
absorbing state instantly jumps onto a uniformly chosen other particle. The
forward simulator thins against the dominating rate N*qbar (the hot loop of
the package); the stationary estimator uses the finer regeneration/internal/
voter decomposition so particle types can be reset at regeneration events.
"""

from __future__ import annotations

import math
import os
from bisect import bisect_right
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .chain import (
    ChainError,
    Distribution,
    RateMatrix,
    characteristics,
    validate_chain,
)

THREADS_ENV = "QSDFV_THREADS"
DEFAULT_TYPE_CAP = 16
DEFAULT_BATCHES = 50


@dataclass
class ParticleConfiguration:
    """Labeled particle states (dense indices into the space) at a given time."""

    space: object
    states: np.ndarray
    clock: float = 0.0

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.int64)
        if self.states.size < 2:
            raise ChainError("the particle system needs N >= 2")
        n = len(self.space)
        if self.states.min() < 0 or self.states.max() >= n:
            raise ChainError("particle state out of range")

    @property
    def n_particles(self) -> int:
        return int(self.states.size)

    def occupation(self) -> "Occupation":
        counts = np.bincount(self.states, minlength=len(self.space))
        return Occupation(self.space, counts)

    def labels(self) -> list[str]:
        return [self.space.labels[s] for s in self.states]

    def copy(self) -> "ParticleConfiguration":
        return ParticleConfiguration(self.space, self.states.copy(), self.clock)


@dataclass
class Occupation:
    """Counts of particles per state; always sums to N."""

    space: object
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if (self.counts < 0).any():
            raise ChainError("negative occupation count")

    @property
    def n_particles(self) -> int:
        return int(self.counts.sum())

    def frequencies(self) -> np.ndarray:
        return self.counts / self.counts.sum()

    def as_dict(self) -> dict[str, int]:
        return {
            self.space.labels[i]: int(c)
            for i, c in enumerate(self.counts)
            if c > 0
        }


@dataclass
class TypeLedger:
    """Per-particle types: 0 until first absorption, then target's type + 1.

    Types only increase at absorption events; they reset to 0 only under the
    stationary regeneration dynamics. ``overflow`` counts assignments beyond
    ``cap`` (the exact values are still stored; histograms aggregate the rest
    into one bucket).
    """

    types: np.ndarray
    cap: int = DEFAULT_TYPE_CAP
    overflow: int = 0

    @classmethod
    def fresh(cls, n_particles: int, cap: int = DEFAULT_TYPE_CAP) -> "TypeLedger":
        return cls(types=np.zeros(n_particles, dtype=np.int64), cap=cap)

    def histogram(self, states: np.ndarray, n_states: int) -> np.ndarray:
        """Joint (state, type-bucket) counts; bucket cap+1 aggregates overflow."""
        out = np.zeros((n_states, self.cap + 2), dtype=np.int64)
        for s, k in zip(states, self.types):
            out[s, min(int(k), self.cap + 1)] += 1
        return out


@dataclass
class MomentEstimate:
    """Estimated occupation moments, with per-entry standard errors.

    For transient estimates ``replicas`` counts independent runs; for the
    stationary estimator it counts batch-means batches. ``type_occupancy``
    (states x type-buckets) is only filled by the stationary estimator.
    """

    space: object
    mean_profile: np.ndarray
    mean_stderr: np.ndarray
    cov: np.ndarray
    cov_stderr: np.ndarray
    replicas: int
    type_occupancy: np.ndarray | None = None
    type_stderr: np.ndarray | None = None
    overflow: int = 0

    def profile_dict(self) -> dict[str, float]:
        return {
            s: float(p) for s, p in zip(self.space.labels, self.mean_profile)
        }


@dataclass(frozen=True)
class TypeBoundRow:
    state_label: str
    k: int | None  # None marks the whole-profile row
    freq: float
    stderr: float
    bound: float
    kind: str  # "equality" | "upper" | "total"
    ok: bool


@dataclass(frozen=True)
class TypeBoundReport:
    rows: list[TypeBoundRow]
    replicas: int
    t: float
    n_particles: int

    @property
    def passed(self) -> bool:
        return all(r.ok for r in self.rows)

    def violations(self) -> list[TypeBoundRow]:
        return [r for r in self.rows if not r.ok]


class _ThinningTables:
    """Per-state channel probabilities for thinning against N*qbar."""

    def __init__(self, rates: RateMatrix):
        n = rates.n_states
        R = rates.rate_array()
        qbar = rates.qbar
        self.qbar = qbar
        self.p_internal = [0.0] * n
        self.p_absorb = [0.0] * n
        self.targets: list[list[int]] = [[] for _ in range(n)]
        self.cum: list[list[float]] = [[] for _ in range(n)]
        for x in range(n):
            row = R[x]
            total = float(row.sum())
            if qbar > 0:
                self.p_internal[x] = total / qbar
                self.p_absorb[x] = float(rates.absorb[x]) / qbar
            if total > 0:
                acc = 0.0
                for y in range(n):
                    if row[y] > 0:
                        acc += row[y] / total
                        self.targets[x].append(y)
                        self.cum[x].append(acc)
                self.cum[x][-1] = 1.0 + 1e-12  # guard against roundoff


def _thinning_tables(rates: RateMatrix) -> _ThinningTables:
    tables = getattr(rates, "_fv_tables", None)
    if tables is None:
        tables = _ThinningTables(rates)
        object.__setattr__(rates, "_fv_tables", tables)
    return tables


@dataclass(frozen=True)
class RegenDecomposition:
    """Regeneration / internal / voter split of the chain's moves.

    Regeneration events (rate alpha) redraw the state from mu_alpha regardless
    of the current position; internal events (rate qg - alpha) move with the
    leftover rates, possibly a self-loop; voter events (rate C) absorb with
    probability q(x,0)/C and copy another particle. ``qg`` dominates both qbar
    and every state's leftover internal exit so the split is well defined even
    when alpha exceeds qbar.
    """

    alpha: float
    C: float
    qg: float
    mu_alpha_cum: list[float]
    b_targets: list[list[int]]
    b_cum: list[list[float]]
    f_prob: list[float]

    @property
    def internal_rate(self) -> float:
        return self.qg - self.alpha

    @property
    def per_particle_rate(self) -> float:
        return self.qg + self.C


def regen_decomposition(rates: RateMatrix) -> RegenDecomposition:
    cached = getattr(rates, "_regen_tables", None)
    if cached is not None:
        return cached
    summary = characteristics(rates)
    n = rates.n_states
    R = rates.rate_array()
    alpha_z = summary.alpha_z
    alpha = summary.alpha
    leftover_exit = R.sum(axis=1) - (alpha - alpha_z)  # sum_{y!=x} (q(x,y)-alpha(y))
    qg = float(max(rates.qbar, alpha, (alpha_z + R.sum(axis=1)).max()))
    internal = qg - alpha
    mu_cum = list(np.cumsum(alpha_z / alpha)) if alpha > 0 else []
    if mu_cum:
        mu_cum[-1] = 1.0 + 1e-12
    b_targets: list[list[int]] = [[] for _ in range(n)]
    b_cum: list[list[float]] = [[] for _ in range(n)]
    if internal > 0:
        for x in range(n):
            acc = 0.0
            for y in range(n):
                if y == x:
                    continue
                w = R[x, y] - alpha_z[y]
                if w > 1e-15:
                    acc += w / internal
                    b_targets[x].append(y)
                    b_cum[x].append(acc)
            # remaining mass is the self-loop; falls through the cum search
    f_prob = [
        float(rates.absorb[x]) / summary.C if summary.C > 0 else 0.0 for x in range(n)
    ]
    decomp = RegenDecomposition(
        alpha=alpha,
        C=summary.C,
        qg=qg,
        mu_alpha_cum=mu_cum,
        b_targets=b_targets,
        b_cum=b_cum,
        f_prob=f_prob,
    )
    object.__setattr__(rates, "_regen_tables", decomp)
    return decomp


def fv_init(mu: Distribution, N: int, seed) -> ParticleConfiguration:
    """N independent draws from mu; deterministic given the seed."""
    if N < 2:
        raise ChainError("the particle system needs N >= 2")
    rng = np.random.default_rng(seed)
    states = rng.choice(len(mu.space), size=N, p=mu.weights)
    return ParticleConfiguration(mu.space, states, 0.0)


def fv_run(
    rates: RateMatrix,
    config: ParticleConfiguration,
    t_end: float,
    ledger: TypeLedger | None = None,
    seed=0,
    trace: list | None = None,
) -> ParticleConfiguration:
    """Advance the particle system to ``t_end`` by thinning against N*qbar.

    At each accepted event for particle i in state x: with probability
    (sum_{y!=x} q(x,y))/qbar an internal jump proportional to q(x,.), with
    probability q(x,0)/qbar the absorption-and-jump onto a uniformly chosen
    other particle (the ledger, if given, records target's type + 1), and
    otherwise nothing but the clock advances. At most one particle changes per
    event. If ``trace`` is a list, effective changes are appended to it as
    (time, particle, old_state, new_state) tuples.
    """
    if t_end < config.clock:
        raise ChainError("t_end is before the configuration's clock")
    rng = np.random.default_rng(seed)
    tables = _thinning_tables(rates)
    N = config.n_particles
    dt = t_end - config.clock
    out = config.copy()
    out.clock = t_end
    if dt == 0.0 or tables.qbar == 0.0:
        return out

    K = int(rng.poisson(N * tables.qbar * dt))
    if K == 0:
        return out
    idx = rng.integers(0, N, size=K).tolist()
    u = rng.random(K).tolist()
    v = rng.random(K).tolist()
    w = rng.integers(0, N - 1, size=K).tolist()
    times = None
    if trace is not None:
        times = (np.sort(rng.random(K)) * dt + config.clock).tolist()

    states = out.states.tolist()
    types = ledger.types.tolist() if ledger is not None else None
    cap = ledger.cap if ledger is not None else 0
    overflow = 0
    p_int = tables.p_internal
    p_abs = tables.p_absorb
    targets = tables.targets
    cums = tables.cum

    for k in range(K):
        i = idx[k]
        x = states[i]
        uu = u[k]
        pi = p_int[x]
        if uu < pi:
            tg = targets[x]
            y = tg[0] if len(tg) == 1 else tg[bisect_right(cums[x], v[k])]
            if trace is not None:
                trace.append((times[k], i, x, y))
            states[i] = y
        elif uu < pi + p_abs[x]:
            j = w[k]
            if j >= i:
                j += 1
            y = states[j]
            if types is not None:
                ty = types[j] + 1
                types[i] = ty
                if ty > cap:
                    overflow += 1
            if trace is not None:
                trace.append((times[k], i, x, y))
            states[i] = y
        # else: accepted event with no effect, clock only

    out.states = np.array(states, dtype=np.int64)
    if ledger is not None:
        ledger.types = np.array(types, dtype=np.int64)
        ledger.overflow += overflow
    return out


def _worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _profile_chunk(args) -> np.ndarray:
    rates, mu, N, t, seed, lo, hi = args
    n = rates.n_states
    out = np.empty((hi - lo, n))
    for k in range(lo, hi):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k,)))
        config = fv_init(mu, N, rng)
        config = fv_run(rates, config, t, seed=rng)
        out[k - lo] = np.bincount(config.states, minlength=n) / N
    return out


def _replica_profiles(rates, mu, N, t, replicas, seed) -> np.ndarray:
    workers = _worker_count()
    if workers <= 1 or replicas < 4 * workers:
        return _profile_chunk((rates, mu, N, t, seed, 0, replicas))
    bounds = np.linspace(0, replicas, workers + 1).astype(int)
    jobs = [
        (rates, mu, N, t, seed, int(lo), int(hi))
        for lo, hi in zip(bounds[:-1], bounds[1:])
        if hi > lo
    ]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_profile_chunk, jobs))
    return np.vstack(parts)  # ordered by replica index, so reduction is stable


def _block_bounds(n_items: int, max_blocks: int = DEFAULT_BATCHES) -> np.ndarray:
    blocks = max(2, min(max_blocks, n_items // 4)) if n_items >= 8 else 2
    return np.linspace(0, n_items, blocks + 1).astype(int)


def _blockwise_cov_stats(profiles: np.ndarray):
    """Covariance matrix of replica profiles plus blockwise standard errors."""
    replicas, n = profiles.shape
    mean = profiles.mean(axis=0)
    centered = profiles - mean
    cov = centered.T @ centered / (replicas - 1)
    bounds = _block_bounds(replicas)
    covs = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        block = profiles[lo:hi]
        c = block - block.mean(axis=0)
        covs.append(c.T @ c / max(1, len(block) - 1))
    covs = np.array(covs)
    cov_stderr = covs.std(axis=0, ddof=1) / math.sqrt(len(covs))
    return cov, cov_stderr


def estimate_profile(
    rates: RateMatrix,
    mu: Distribution,
    N: int,
    t: float,
    replicas: int,
    seed,
) -> MomentEstimate:
    """Mean occupation profile at time t over independent replicas.

    Replicas use seeds derived from ``seed`` by index and may run in parallel
    (capped by the QSDFV_THREADS environment variable); the reduction is
    ordered by replica index, so results do not depend on scheduling.
    """
    if replicas < 2:
        raise ChainError("need at least 2 replicas")
    profiles = _replica_profiles(rates, mu, N, t, replicas, seed)
    mean = profiles.mean(axis=0)
    stderr = profiles.std(axis=0, ddof=1) / math.sqrt(replicas)
    cov, cov_stderr = _blockwise_cov_stats(profiles)
    return MomentEstimate(
        space=rates.space,
        mean_profile=mean,
        mean_stderr=stderr,
        cov=cov,
        cov_stderr=cov_stderr,
        replicas=replicas,
    )


def estimate_stationary(
    rates: RateMatrix,
    N: int,
    burn_in: float,
    horizon: float,
    seed,
    batches: int = DEFAULT_BATCHES,
    type_cap: int = DEFAULT_TYPE_CAP,
) -> MomentEstimate:
    """Time-averaged occupation of a single long trajectory.

    Runs the regeneration/internal/voter event decomposition so particle types
    reset at regeneration events (states redrawn from mu_alpha), giving the
    stationary (state, type) occupancy alongside the profile. Standard errors
    come from batch means over ``batches`` equal time slices after ``burn_in``.
    Refuses chains with alpha = 0, for which no ergodicity guarantee exists.
    """
    summary = validate_chain(rates)
    if summary.alpha <= 0.0:
        raise ChainError(
            "stationary estimation requires alpha > 0 (no ergodicity guarantee)"
        )
    if horizon <= burn_in:
        raise ChainError("horizon must exceed burn_in")
    if N < 2:
        raise ChainError("the particle system needs N >= 2")
    decomp = regen_decomposition(rates)
    n = rates.n_states
    rng = np.random.default_rng(seed)

    total_rate = N * decomp.per_particle_rate
    p_regen = decomp.alpha / decomp.per_particle_rate
    p_voter_hi = (decomp.alpha + decomp.C) / decomp.per_particle_rate
    mu_cum = decomp.mu_alpha_cum
    b_targets, b_cum = decomp.b_targets, decomp.b_cum
    f_prob = decomp.f_prob

    states = [
        bisect_right(mu_cum, z) for z in rng.random(N)
    ]  # start from iid mu_alpha draws
    types = [0] * N
    counts = np.zeros(n)
    ctype = np.zeros((n, type_cap + 2))
    for s in states:
        counts[s] += 1
        ctype[s, 0] += 1

    span = horizon - burn_in
    blen = span / batches
    S1 = np.zeros((batches, n))
    S2 = np.zeros((batches, n, n))
    ST = np.zeros((batches, n, type_cap + 2))
    overflow = 0

    def accumulate(t0: float, t1: float):
        if t1 <= burn_in:
            return
        t0 = max(t0, burn_in)
        if t1 <= t0:
            return
        outer = np.outer(counts, counts)
        # step batch by batch; the index advances every iteration, so float
        # collisions with a boundary cannot stall the loop
        b = min(int((t0 - burn_in) / blen), batches - 1)
        while True:
            edge = burn_in + (b + 1) * blen if b < batches - 1 else horizon
            seg_end = min(t1, edge)
            d = seg_end - t0
            if d > 0:
                S1[b] += counts * d
                S2[b] += outer * d
                ST[b] += ctype * d
                t0 = seg_end
            if seg_end >= t1 or b >= batches - 1:
                break
            b += 1

    t = 0.0
    block = 1 << 14
    while t < horizon:
        gaps = rng.exponential(1.0 / total_rate, size=block)
        idx = rng.integers(0, N, size=block).tolist()
        u = rng.random(block).tolist()
        v = rng.random(block).tolist()
        w = rng.integers(0, max(N - 1, 1), size=block).tolist()
        gaps_l = gaps.tolist()
        for k in range(block):
            t_next = t + gaps_l[k]
            accumulate(t, min(t_next, horizon))
            t = t_next
            if t >= horizon:
                break
            i = idx[k]
            x = states[i]
            uu = u[k]
            if uu < p_regen:
                y = bisect_right(mu_cum, v[k])
                old_bucket = min(types[i], type_cap + 1)
                ctype[x, old_bucket] -= 1
                ctype[y, 0] += 1
                counts[x] -= 1
                counts[y] += 1
                states[i] = y
                types[i] = 0
            elif uu < p_voter_hi:
                if v[k] < f_prob[x]:
                    j = w[k]
                    if j >= i:
                        j += 1
                    y = states[j]
                    ty = types[j] + 1
                    if ty > type_cap:
                        overflow += 1
                    old_bucket = min(types[i], type_cap + 1)
                    ctype[x, old_bucket] -= 1
                    ctype[y, min(ty, type_cap + 1)] += 1
                    counts[x] -= 1
                    counts[y] += 1
                    states[i] = y
                    types[i] = ty
            else:
                tg = b_targets[x]
                if tg:
                    pos = bisect_right(b_cum[x], v[k])
                    if pos < len(tg):
                        y = tg[pos]
                        old_bucket = min(types[i], type_cap + 1)
                        ctype[x, old_bucket] -= 1
                        ctype[y, old_bucket] += 1
                        counts[x] -= 1
                        counts[y] += 1
                        states[i] = y
                # beyond the listed mass: internal self-loop, no effect

    m_b = S1 / (N * blen)
    c_b = S2 / (N * N * blen)
    cov_b = c_b - np.einsum("bi,bj->bij", m_b, m_b)
    typ_b = ST / (N * blen)
    sqrt_b = math.sqrt(batches)
    return MomentEstimate(
        space=rates.space,
        mean_profile=m_b.mean(axis=0),
        mean_stderr=m_b.std(axis=0, ddof=1) / sqrt_b,
        cov=cov_b.mean(axis=0),
        cov_stderr=cov_b.std(axis=0, ddof=1) / sqrt_b,
        replicas=batches,
        type_occupancy=typ_b.mean(axis=0),
        type_stderr=typ_b.std(axis=0, ddof=1) / sqrt_b,
        overflow=overflow,
    )


def check_type_bound(
    rates: RateMatrix,
    mu: Distribution,
    N: int,
    t: float,
    replicas: int,
    k_max: int,
    seed,
) -> TypeBoundReport:
    """Compare empirical per-type state frequencies against their bounds.

    Transient mode: types never reset. Type 0 must match the absorbed chain's
    law exactly; type k is bounded by (C t)^k / k! times that law; the whole
    profile is bounded by e^{C t} times it. Violations beyond three standard
    errors are reported.
    """
    if replicas < 8:
        raise ChainError("need at least 8 replicas")
    from .chain import semigroup  # local import keeps module load light

    summary = characteristics(rates)
    n = rates.n_states
    freqs = np.empty((replicas, n, k_max + 2))
    for r in range(replicas):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(r,)))
        config = fv_init(mu, N, rng)
        ledger = TypeLedger.fresh(N, cap=k_max)
        config = fv_run(rates, config, t, ledger=ledger, seed=rng)
        freqs[r] = ledger.histogram(config.states, n) / N

    mean = freqs.mean(axis=0)
    bounds = _block_bounds(replicas)
    block_means = np.array(
        [freqs[lo:hi].mean(axis=0) for lo, hi in zip(bounds[:-1], bounds[1:])]
    )
    stderr = block_means.std(axis=0, ddof=1) / math.sqrt(len(block_means))

    mu_p = mu.weights @ semigroup(rates, t).entries
    Ct = summary.C * t
    rows: list[TypeBoundRow] = []
    for x in range(n):
        label = rates.space.labels[x]
        se0 = float(stderr[x, 0])
        rows.append(
            TypeBoundRow(
                state_label=label,
                k=0,
                freq=float(mean[x, 0]),
                stderr=se0,
                bound=float(mu_p[x]),
                kind="equality",
                ok=abs(float(mean[x, 0]) - float(mu_p[x])) <= 3.0 * max(se0, 1e-12),
            )
        )
        for k in range(1, k_max + 1):
            bound = (Ct**k) / math.factorial(k) * float(mu_p[x])
            se = float(stderr[x, k])
            rows.append(
                TypeBoundRow(
                    state_label=label,
                    k=k,
                    freq=float(mean[x, k]),
                    stderr=se,
                    bound=bound,
                    kind="upper",
                    ok=float(mean[x, k]) <= bound + 3.0 * se,
                )
            )
        total = float(mean[x].sum())
        se_t = float(stderr[x].sum())
        bound_t = math.exp(Ct) * float(mu_p[x])
        rows.append(
            TypeBoundRow(
                state_label=label,
                k=None,
                freq=total,
                stderr=se_t,
                bound=bound_t,
                kind="total",
                ok=total <= bound_t + 3.0 * se_t,
            )
        )
    return TypeBoundReport(rows=rows, replicas=replicas, t=t, n_particles=N)
