"""Marked-Poisson graphical construction of the particle system.

Every particle carries three independent Poisson streams: regeneration events
(rate alpha, jump to a state drawn from mu_alpha regardless of the current
position), internal events (rate qg - alpha, jump by the leftover rates), and
voter events (rate C, absorb with probability q(x,0)/C and copy a uniformly
chosen other particle). Evolving a window of such events forward reproduces
the particle system; walking it backward yields the ancestry sets that drive
perfect sampling from the stationary law and the coupling estimates.

Events are generated per unit time cell from position-keyed substreams, so a
window extended into the past never changes the events it already contains.
The state-indexed marks of internal and voter events are sampled lazily, keyed
by (event identity, queried state), which is distributionally identical to
materializing full mark tables but avoids the storage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from bisect import bisect_right

import numpy as np

from .chain import ChainError, RateMatrix, characteristics
from .fv import ParticleConfiguration, RegenDecomposition, regen_decomposition

REGENERATION, INTERNAL, VOTER = 0, 1, 2
KIND_NAMES = ("regeneration", "internal", "voter")

_CELL_TAG = 101
_MARK_B_TAG = 102
_MARK_F_TAG = 103

MAX_DOUBLING = 30


class PerfectSamplingError(RuntimeError):
    """Coalescence not reached within the doubling budget."""

    def __init__(self, message: str, ancestry_sizes: dict[int, int]):
        super().__init__(message)
        self.ancestry_sizes = ancestry_sizes


def _zig(m: int) -> int:
    """Map any int to a distinct nonnegative int (seed-sequence entropy)."""
    return 2 * m if m >= 0 else -2 * m - 1


def _entropy(seed) -> tuple[int, ...]:
    if isinstance(seed, (int, np.integer)):
        return (_zig(int(seed)),)
    if isinstance(seed, (tuple, list)):
        flat: list[int] = []
        for part in seed:
            flat.extend(_entropy(part))
        return tuple(flat)
    raise ChainError(f"seed must be an int or a (nested) tuple of ints, got {type(seed)}")


@dataclass(frozen=True, slots=True)
class MarkedEvent:
    """One Poisson event. State-indexed marks are sampled lazily by the window.

    ``mark_A`` (regeneration target) and ``mark_C`` (voter partner) are fixed
    at generation time; the internal target B(x) and the voter flag F(x) are
    functions of the queried state and live behind EventWindow methods.
    """

    time: float
    particle: int
    kind: int
    mark_A: int | None
    mark_C: int | None
    cell: int
    seq: int

    @property
    def kind_name(self) -> str:
        return KIND_NAMES[self.kind]

    def sort_key(self):
        # floating-point time ties are broken deterministically
        return (self.time, self.kind, self.particle, _zig(self.cell), self.seq)


def _cell_events(
    decomp: RegenDecomposition, N: int, entropy: tuple[int, ...], m: int
) -> list[MarkedEvent]:
    """All events of all particles in the time cell [m, m+1)."""
    rng = np.random.default_rng(
        np.random.SeedSequence((*entropy, _CELL_TAG, _zig(m)))
    )
    lam = N * decomp.per_particle_rate
    K = int(rng.poisson(lam))
    if K == 0:
        return []
    times = (rng.random(K) + m).tolist()
    owners = rng.integers(0, N, size=K).tolist()
    kind_u = rng.random(K).tolist()
    regen_u = rng.random(K).tolist()
    partner = rng.integers(0, max(N - 1, 1), size=K).tolist()
    p_regen = decomp.alpha / decomp.per_particle_rate
    p_internal_hi = decomp.qg / decomp.per_particle_rate
    mu_cum = decomp.mu_alpha_cum
    events = []
    for k in range(K):
        u = kind_u[k]
        i = owners[k]
        if u < p_regen:
            kind = REGENERATION
            a = bisect_right(mu_cum, regen_u[k])
            c = None
        elif u < p_internal_hi:
            kind = INTERNAL
            a = None
            c = None
        else:
            kind = VOTER
            a = None
            c = partner[k]
            if c >= i:
                c += 1
        events.append(MarkedEvent(times[k], i, kind, a, c, m, k))
    events.sort(key=MarkedEvent.sort_key)
    return events


@dataclass
class EventWindow:
    """Time-ordered marked events on [start, end] plus lazy-mark seed material."""

    start: float
    end: float
    events: list[MarkedEvent]
    n_particles: int
    space: object
    decomp: RegenDecomposition
    entropy: tuple[int, ...]

    def internal_target(self, event: MarkedEvent, x: int) -> int:
        """Lazy internal mark B(x): leftover-rate jump target, possibly x itself."""
        rng = np.random.default_rng(
            np.random.SeedSequence(
                (*self.entropy, _MARK_B_TAG, _zig(event.cell), event.seq, x)
            )
        )
        u = rng.random()
        cum = self.decomp.b_cum[x]
        pos = bisect_right(cum, u)
        if pos < len(cum):
            return self.decomp.b_targets[x][pos]
        return x  # leftover mass is the self-loop

    def voter_flag(self, event: MarkedEvent, x: int) -> bool:
        """Lazy voter mark F(x): whether the absorption attempt fires."""
        rng = np.random.default_rng(
            np.random.SeedSequence(
                (*self.entropy, _MARK_F_TAG, _zig(event.cell), event.seq, x)
            )
        )
        return bool(rng.random() < self.decomp.f_prob[x])


def _assemble_window(
    rates: RateMatrix,
    N: int,
    s: float,
    t: float,
    seed,
    cells: dict[int, list[MarkedEvent]] | None = None,
) -> EventWindow:
    if N < 2:
        raise ChainError("the particle system needs N >= 2")
    if not s < t:
        raise ChainError("window needs s < t")
    decomp = regen_decomposition(rates)
    entropy = _entropy(seed)
    events: list[MarkedEvent] = []
    for m in range(math.floor(s), math.ceil(t)):
        if cells is not None and m in cells:
            cell = cells[m]
        else:
            cell = _cell_events(decomp, N, entropy, m)
            if cells is not None:
                cells[m] = cell
        events.extend(ev for ev in cell if s <= ev.time < t)
    events.sort(key=MarkedEvent.sort_key)
    return EventWindow(s, t, events, N, rates.space, decomp, entropy)


def generate_window(rates: RateMatrix, N: int, s: float, t: float, seed) -> EventWindow:
    """Marked-Poisson event window for N particles on [s, t].

    Superposes, per particle, the regeneration (rate alpha), internal
    (rate qg - alpha) and voter (rate C) streams; the expected event count is
    N * (qg + C) * (t - s). Refuses chains with alpha = 0: without
    regeneration events the backward ancestry never empties and the window is
    useless for perfect sampling (build coupled windows instead).
    """
    if characteristics(rates).alpha <= 0.0:
        raise ChainError("window generation requires alpha > 0")
    return _assemble_window(rates, N, s, t, seed)


def evolve_forward(
    window: EventWindow, initial: ParticleConfiguration
) -> ParticleConfiguration:
    """Apply the window's events in time order to an initial configuration."""
    if abs(initial.clock - window.start) > 1e-9:
        raise ChainError(
            f"initial clock {initial.clock} does not match window start {window.start}"
        )
    states = initial.states.tolist()
    for ev in window.events:
        if ev.kind == REGENERATION:
            states[ev.particle] = ev.mark_A
        elif ev.kind == INTERNAL:
            states[ev.particle] = window.internal_target(ev, states[ev.particle])
        else:
            if window.voter_flag(ev, states[ev.particle]):
                states[ev.particle] = states[ev.mark_C]
    return ParticleConfiguration(window.space, np.array(states), window.end)


@dataclass
class AncestrySet:
    """Backward ancestry of one particle across a window.

    ``steps`` holds (time, set) pairs in decreasing time order, starting from
    (end, {particle}) and recording every effective change; the set is
    constant in between. Only regeneration events (remove the owner) and voter
    events of tracked particles (add the partner) have an effect.
    """

    particle: int
    start: float
    end: float
    steps: list[tuple[float, frozenset[int]]]

    @property
    def final(self) -> frozenset[int]:
        return self.steps[-1][1]

    @property
    def emptied_at(self) -> float | None:
        for time, members in self.steps:
            if not members:
                return time
        return None

    def at(self, r: float) -> frozenset[int]:
        """Set value at backward time r (the set just after all events > r)."""
        current = self.steps[0][1]
        for time, members in self.steps[1:]:
            if time > r:
                current = members
            else:
                break
        return current

    def sizes(self) -> list[int]:
        return [len(members) for _, members in self.steps]


def _apply_backward(members: set[int], ev: MarkedEvent) -> bool:
    """Backward ancestry update; returns whether the set changed."""
    if ev.kind == REGENERATION:
        if ev.particle in members:
            members.discard(ev.particle)
            return True
    elif ev.kind == VOTER:
        if ev.particle in members and ev.mark_C not in members:
            members.add(ev.mark_C)
            return True
    return False


def ancestry_backward(window: EventWindow, i: int) -> AncestrySet:
    """Particles at the window start whose states can influence particle i at the end.

    Walks the events backward: a regeneration settles its owner's state, so a
    tracked owner is removed; a voter event of a tracked owner needs both the
    owner's prior state and the partner's, so the partner is added; internal
    events are ignored. Once empty the set stays empty.
    """
    if not 0 <= i < window.n_particles:
        raise ChainError(f"particle index {i} out of range")
    members = {i}
    steps: list[tuple[float, frozenset[int]]] = [(window.end, frozenset(members))]
    for ev in reversed(window.events):
        if _apply_backward(members, ev):
            steps.append((ev.time, frozenset(members)))
            if not members:
                break
    return AncestrySet(i, window.start, window.end, steps)


def _all_ancestries_empty(window: EventWindow) -> tuple[bool, dict[int, int]]:
    sizes: dict[int, int] = {}
    ok = True
    for i in range(window.n_particles):
        final = ancestry_backward(window, i).final
        sizes[i] = len(final)
        if final:
            ok = False
    return ok, sizes


def coalescence_window(
    rates: RateMatrix, N: int, seed, max_doubling: int = MAX_DOUBLING
) -> tuple[EventWindow, int]:
    """Smallest doubling window [-2^k, 0] whose ancestries all empty.

    Past cells are reused bitwise when the window doubles, as coupling from
    the past requires. Returns the window and the doubling depth k.
    """
    summary = characteristics(rates)
    if summary.alpha <= 0.0:
        raise ChainError("perfect sampling requires alpha > 0")
    cells: dict[int, list[MarkedEvent]] = {}
    sizes: dict[int, int] = {}
    for k in range(max_doubling + 1):
        T = float(2**k)
        window = _assemble_window(rates, N, -T, 0.0, seed, cells=cells)
        ok, sizes = _all_ancestries_empty(window)
        if ok:
            return window, k
    raise PerfectSamplingError(
        f"no coalescence within 2^{max_doubling} time units "
        f"(ancestry sizes {sizes})",
        ancestry_sizes=sizes,
    )


def perfect_sample(
    rates: RateMatrix, N: int, seed, max_doubling: int = MAX_DOUBLING
) -> ParticleConfiguration:
    """Exact draw from the stationary law of the N-particle system.

    Coupling from the past with doubling windows: extend the event window
    backward until every particle's ancestry is empty, then evolve forward
    from an arbitrary configuration; the result no longer depends on it.
    """
    window, _ = coalescence_window(rates, N, seed, max_doubling)
    arbitrary = ParticleConfiguration(
        rates.space, np.zeros(N, dtype=np.int64), window.start
    )
    return evolve_forward(window, arbitrary)


@dataclass
class CouplingState:
    """Result of the red/green 4-fold coupled backward construction.

    ``psi_i_hat`` always coincides with ``psi_i`` (both are green-driven);
    while the indicator is 0 ``psi_j_hat`` coincides with ``psi_j``. The
    indicator is 1 exactly when the hatted sets have intersected.
    """

    green: EventWindow
    red: EventWindow
    psi_i: AncestrySet
    psi_j: AncestrySet
    psi_i_hat: AncestrySet
    psi_j_hat: AncestrySet
    indicator: int


def coupled_ancestry(
    rates: RateMatrix, N: int, i: int, j: int, s: float, t: float, seed
) -> CouplingState:
    """Run the 4-fold coupling of two ancestries over [s, t].

    Green events drive psi_i, psi_j and psi_i_hat throughout. While the
    indicator is 0, green events drive psi_j_hat too (it coincides with
    psi_j); the first event that makes the hatted sets intersect is committed
    and flips the indicator, after which psi_j_hat is driven by the red
    stream alone. Red events are ignored while the indicator is 0. The
    switch happens at a backward stopping time between two independent
    Poisson fields, so psi_j_hat keeps the plain ancestry marginal while
    being independent of psi_i_hat; while the sets are disjoint they consume
    disjoint event sets, so no correlation builds up before the flip.
    """
    if i == j:
        raise ChainError("coupling needs two different particles")
    if not (0 <= i < N and 0 <= j < N):
        raise ChainError(f"particle indices ({i}, {j}) out of range for N={N}")
    entropy = _entropy(seed)
    green = _assemble_window(rates, N, s, t, (*entropy, 1))
    red = _assemble_window(rates, N, s, t, (*entropy, 2))
    merged = [(ev, 0) for ev in green.events] + [(ev, 1) for ev in red.events]
    merged.sort(key=lambda pair: (*pair[0].sort_key(), pair[1]), reverse=True)

    p_i, p_j = {i}, {j}
    h_i, h_j = {i}, {j}
    indicator = 0
    steps_pi = [(t, frozenset(p_i))]
    steps_pj = [(t, frozenset(p_j))]
    steps_hi = [(t, frozenset(h_i))]
    steps_hj = [(t, frozenset(h_j))]

    for ev, stream in merged:
        if stream == 0:  # green
            if _apply_backward(p_i, ev):
                steps_pi.append((ev.time, frozenset(p_i)))
            if _apply_backward(p_j, ev):
                steps_pj.append((ev.time, frozenset(p_j)))
            if _apply_backward(h_i, ev):
                steps_hi.append((ev.time, frozenset(h_i)))
            if indicator == 0:
                if _apply_backward(h_j, ev):
                    steps_hj.append((ev.time, frozenset(h_j)))
                if h_i & h_j:
                    indicator = 1
        else:  # red: drives the hatted j-set only once the indicator is up
            if indicator == 1:
                if _apply_backward(h_j, ev):
                    steps_hj.append((ev.time, frozenset(h_j)))

    def pack(particle, steps):
        return AncestrySet(particle, s, t, steps)

    return CouplingState(
        green=green,
        red=red,
        psi_i=pack(i, steps_pi),
        psi_j=pack(j, steps_pj),
        psi_i_hat=pack(i, steps_hi),
        psi_j_hat=pack(j, steps_hj),
        indicator=indicator,
    )


def indicator_bound(summary_alpha: float, C: float, N: int, tau: float) -> float:
    """Analytic upper bound for the probability that the coupling indicator fires."""
    if C == 0.0 or tau <= 0.0:
        return 0.0
    if summary_alpha == C:
        return (1.0 / (N - 1)) * 2.0 * C * tau
    return (
        (1.0 / (N - 1))
        * (C / (summary_alpha - C))
        * (1.0 - math.exp(2.0 * (C - summary_alpha) * tau))
    )


@dataclass(frozen=True)
class IBoundReport:
    n_particles: int
    tau: float
    replicas: int
    p_hat: float
    stderr: float
    bound: float

    @property
    def ok(self) -> bool:
        return self.p_hat <= self.bound + 3.0 * self.stderr


def estimate_I_probability(
    rates: RateMatrix, N: int, t_minus_s: float, replicas: int, seed
) -> IBoundReport:
    """Monte Carlo estimate of P(indicator = 1) against its analytic bound."""
    if replicas < 2:
        raise ChainError("need at least 2 replicas")
    summary = characteristics(rates)
    hits = 0
    for r in range(replicas):
        state = coupled_ancestry(rates, N, 0, 1, 0.0, t_minus_s, (seed, r))
        hits += state.indicator
    p_hat = hits / replicas
    stderr = math.sqrt(max(p_hat * (1.0 - p_hat), 1.0 / replicas) / replicas)
    bound = indicator_bound(summary.alpha, summary.C, N, t_minus_s)
    return IBoundReport(
        n_particles=N,
        tau=t_minus_s,
        replicas=replicas,
        p_hat=p_hat,
        stderr=stderr,
        bound=bound,
    )
