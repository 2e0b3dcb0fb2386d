"""Absorbed continuous-time Markov chains on a finite state space.

The absorbing state is implicit: it never appears among the working states,
and the rates into it live in a separate vector. The diagonal of the rate
matrix is always derived, never stored, so it cannot drift out of sync with
the off-diagonal data.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.sparse import csgraph, csr_matrix

ABSORBING_LABEL = "0"

SERIES_TOL = 1e-14  # Poisson tail mass dropped by the uniformization series


class ChainError(ValueError):
    """Structurally invalid chain input."""


class ChainSpecError(ChainError):
    """Malformed chain-spec document."""


class ReducibleChainWarning(UserWarning):
    """The off-diagonal rate graph is not strongly connected."""


@dataclass(frozen=True)
class StateSpace:
    """Ordered set of surviving states. The absorbing state is not a member."""

    labels: tuple[str, ...]

    def __post_init__(self):
        if not self.labels:
            raise ChainError("state space must contain at least one state")
        if len(set(self.labels)) != len(self.labels):
            raise ChainError("duplicate state labels")
        if ABSORBING_LABEL in self.labels:
            raise ChainError(
                f"label {ABSORBING_LABEL!r} is reserved for the absorbing state"
            )
        object.__setattr__(self, "labels", tuple(str(s) for s in self.labels))

    @cached_property
    def index(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.labels)}

    def __len__(self) -> int:
        return len(self.labels)

    def index_of(self, label: str) -> int:
        try:
            return self.index[label]
        except KeyError:
            raise ChainError(f"unknown state {label!r}") from None


class RateMatrix:
    """Off-diagonal transition rates on the surviving states plus absorption rates.

    ``offdiag`` maps label pairs (x, y), x != y, to rates; ``absorb`` maps labels
    to rates into the absorbing state. Zero entries may be omitted. The object is
    immutable after construction and safe to share across threads.
    """

    def __init__(
        self,
        space: StateSpace,
        offdiag: dict[tuple[str, str], float],
        absorb: dict[str, float],
    ):
        self.space = space
        n = len(space)
        rates = np.zeros((n, n))
        clean: dict[tuple[str, str], float] = {}
        for (x, y), r in offdiag.items():
            i, j = space.index_of(x), space.index_of(y)
            if i == j:
                raise ChainError(f"diagonal rate ({x!r},{y!r}) may not be specified")
            r = float(r)
            if not math.isfinite(r) or r < 0:
                raise ChainError(f"rate ({x!r},{y!r}) must be finite and >= 0, got {r}")
            if r > 0:
                if (x, y) in clean:
                    raise ChainError(f"duplicate rate entry ({x!r},{y!r})")
                clean[(x, y)] = r
                rates[i, j] = r
        absorb_vec = np.zeros(n)
        for x, r in absorb.items():
            i = space.index_of(x)
            r = float(r)
            if not math.isfinite(r) or r < 0:
                raise ChainError(f"absorption rate from {x!r} must be finite and >= 0")
            absorb_vec[i] = r
        self.offdiag = clean
        self._rates = rates
        self._rates.setflags(write=False)
        self.absorb = absorb_vec
        self.absorb.setflags(write=False)
        self.exit_rates = rates.sum(axis=1) + absorb_vec
        self.exit_rates.setflags(write=False)
        self.qbar = float(self.exit_rates.max())

    @property
    def n_states(self) -> int:
        return len(self.space)

    def rate(self, x: str, y: str) -> float:
        """Off-diagonal rate q(x, y); zero if absent."""
        return float(self._rates[self.space.index_of(x), self.space.index_of(y)])

    def rate_array(self) -> np.ndarray:
        """Dense off-diagonal rates with a zero diagonal (read-only view)."""
        return self._rates

    def generator(self) -> np.ndarray:
        """Generator restricted to the surviving states, diagonal derived."""
        Q = self._rates.copy()
        np.fill_diagonal(Q, -self.exit_rates)
        return Q

    def honest_generator(self) -> np.ndarray:
        """Generator on the full space, absorbing state appended last."""
        n = self.n_states
        Q = np.zeros((n + 1, n + 1))
        Q[:n, :n] = self.generator()
        Q[:n, n] = self.absorb
        return Q

    def __eq__(self, other) -> bool:
        if not isinstance(other, RateMatrix):
            return NotImplemented
        return (
            self.space.labels == other.space.labels
            and self.offdiag == other.offdiag
            and np.array_equal(self.absorb, other.absorb)
        )

    def __repr__(self) -> str:
        return (
            f"RateMatrix(n={self.n_states}, entries={len(self.offdiag)}, "
            f"qbar={self.qbar:g})"
        )


@dataclass(frozen=True)
class Distribution:
    """Probability vector on a state space."""

    space: StateSpace
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (len(self.space),):
            raise ChainError(
                f"weight vector has shape {w.shape}, expected ({len(self.space)},)"
            )
        if (w < -1e-12).any():
            raise ChainError("negative weight in distribution")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ChainError(f"weights sum to {w.sum()!r}, not 1 within 1e-12")
        w = np.clip(w, 0.0, None)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def point(cls, space: StateSpace, label: str) -> "Distribution":
        w = np.zeros(len(space))
        w[space.index_of(label)] = 1.0
        return cls(space, w)

    @classmethod
    def uniform(cls, space: StateSpace) -> "Distribution":
        return cls(space, np.full(len(space), 1.0 / len(space)))

    @classmethod
    def from_dict(cls, space: StateSpace, weights: dict[str, float]) -> "Distribution":
        w = np.zeros(len(space))
        for label, p in weights.items():
            w[space.index_of(label)] = p
        return cls(space, w)

    def __getitem__(self, label: str) -> float:
        return float(self.weights[self.space.index_of(label)])

    def as_dict(self) -> dict[str, float]:
        return {s: float(p) for s, p in zip(self.space.labels, self.weights)}


@dataclass(frozen=True)
class SubKernel:
    """Sub-Markov kernel on the surviving states plus its absorption column.

    Each row of ``entries`` together with ``absorb_col`` sums to one: the kernel
    is honest on the extended space.
    """

    space: StateSpace
    entries: np.ndarray
    absorb_col: np.ndarray

    def __post_init__(self):
        defect = np.abs(self.entries.sum(axis=1) + self.absorb_col - 1.0).max()
        if defect > 1e-8:
            raise ChainError(f"kernel rows are dishonest by {defect:g}")

    def propagate(self, weights: np.ndarray) -> np.ndarray:
        return np.asarray(weights) @ self.entries

    def survival(self, weights: np.ndarray) -> float:
        return 1.0 - float(np.asarray(weights) @ self.absorb_col)

    def honest(self) -> np.ndarray:
        """Full stochastic matrix with the absorbing state appended last."""
        n = len(self.space)
        P = np.zeros((n + 1, n + 1))
        P[:n, :n] = self.entries
        P[:n, n] = self.absorb_col
        P[n, n] = 1.0
        return P


@dataclass(frozen=True)
class ChainSummary:
    """Scalar characteristics of an absorbed chain.

    ``alpha`` is the ergodicity coefficient (sum over states z of the smallest
    incoming rate into z), ``C`` the maximal absorption rate, ``qbar`` the
    maximal exit rate. ``mu_alpha`` is the normalized vector of smallest
    incoming rates, defined only when alpha > 0.
    """

    alpha: float
    alpha_z: np.ndarray
    C: float
    qbar: float
    mu_alpha: Distribution | None
    perfect_sampling_available: bool  # alpha > 0
    unique_qsd_regime: bool  # alpha > C
    irreducible: bool


@dataclass(frozen=True)
class AbsorptionSample:
    """One trajectory of the absorbed chain.

    ``path`` lists (time, state) jump points starting at time zero; the final
    state is the absorbing label exactly when ``absorption_time`` is finite.
    """

    path: list[tuple[float, str]]
    absorption_time: float

    @property
    def absorbed(self) -> bool:
        return math.isfinite(self.absorption_time)

    def state_at_end(self) -> str:
        return self.path[-1][1]


def _alpha_vector(rates: RateMatrix) -> np.ndarray:
    """Smallest incoming off-diagonal rate per state (zero for a single state)."""
    n = rates.n_states
    if n == 1:
        return np.zeros(1)
    masked = rates.rate_array() + np.diag(np.full(n, np.inf))
    return masked.min(axis=0)


def _summarize(rates: RateMatrix, irreducible: bool) -> ChainSummary:
    alpha_z = _alpha_vector(rates)
    alpha = float(alpha_z.sum())
    C = float(rates.absorb.max())
    mu_alpha = Distribution(rates.space, alpha_z / alpha) if alpha > 0 else None
    return ChainSummary(
        alpha=alpha,
        alpha_z=alpha_z,
        C=C,
        qbar=rates.qbar,
        mu_alpha=mu_alpha,
        perfect_sampling_available=alpha > 0,
        unique_qsd_regime=alpha > C,
        irreducible=irreducible,
    )


def is_irreducible(rates: RateMatrix) -> bool:
    """Whether the off-diagonal rate graph is strongly connected."""
    n = rates.n_states
    if n == 1:
        return True
    graph = csr_matrix((rates.rate_array() > 0).astype(np.int8))
    n_comp, _ = csgraph.connected_components(graph, directed=True, connection="strong")
    return n_comp == 1


def validate_chain(rates: RateMatrix) -> ChainSummary:
    """Check an absorbed chain and compute its scalar characteristics.

    Rejects chains with no absorption anywhere (the absorbed-with-probability-one
    assumption fails). Reducible chains are allowed but produce a warning, since
    uniqueness statements need irreducibility.
    """
    if float(rates.absorb.max()) <= 0.0:
        raise ChainError(
            "no absorption: every state has absorption rate 0; "
            "an absorbed chain needs C > 0"
        )
    irreducible = is_irreducible(rates)
    if not irreducible:
        warnings.warn(
            "off-diagonal rate graph is reducible; eigenvector computations may "
            "select boundary solutions",
            ReducibleChainWarning,
            stacklevel=2,
        )
    return _summarize(rates, irreducible)


def characteristics(rates: RateMatrix) -> ChainSummary:
    """Like validate_chain but without the absorption requirement or warnings.

    Used by constructions that remain meaningful when C = 0 (a chain with no
    absorption drives N independent copies).
    """
    return _summarize(rates, is_irreducible(rates))


def semigroup(rates: RateMatrix, t: float, series_tol: float = SERIES_TOL) -> SubKernel:
    """Transition kernel P_t by uniformization.

    Expands P_t as a Poisson(qbar*t) mixture of powers of the honest jump kernel
    I + Q/qbar and truncates once the remaining Poisson tail mass drops below
    ``series_tol``. Weights are evaluated in log space so large qbar*t cannot
    underflow term by term.
    """
    if t < 0:
        raise ChainError("time must be >= 0")
    n = rates.n_states
    if t == 0 or rates.qbar == 0.0:
        return SubKernel(rates.space, np.eye(n), np.zeros(n))
    qbar = rates.qbar
    m = qbar * t
    P_jump = np.eye(n + 1) + rates.honest_generator() / qbar
    acc = np.zeros((n + 1, n + 1))
    term = np.eye(n + 1)
    cum = 0.0
    k_cap = int(m + 12.0 * math.sqrt(m + 1.0) + 40.0)
    for k in range(k_cap + 1):
        if k > 0:
            term = term @ P_jump
        w = math.exp(-m + k * math.log(m) - math.lgamma(k + 1))
        acc += w * term
        cum += w
        if 1.0 - cum < series_tol:
            break
    return SubKernel(rates.space, acc[:n, :n], acc[:n, n])


def resolvent(rates: RateMatrix, lam: float) -> SubKernel:
    """Kernel of the chain evaluated at an independent Exp(lam) time.

    Computed as lam * (lam*I - Q)^{-1} on the restriction of the generator to
    the surviving states; rows are substochastic and the deficit is the
    probability of absorption before the exponential clock rings.
    """
    if lam <= 0:
        raise ChainError("resolvent rate must be > 0")
    n = rates.n_states
    M = lam * np.eye(n) - rates.generator()
    try:
        R = lam * np.linalg.solve(M, np.eye(n))
    except np.linalg.LinAlgError as exc:  # pragma: no cover - cannot occur for lam > 0
        raise ChainError(f"resolvent solve failed at rate {lam}: {exc}") from exc
    absorb_col = np.clip(1.0 - R.sum(axis=1), 0.0, 1.0)
    return SubKernel(rates.space, R, absorb_col)


def simulate_absorbing_chain(
    rates: RateMatrix, start: str, horizon: float, seed
) -> AbsorptionSample:
    """Simulate one trajectory of the absorbed chain with exponential clocks.

    Deterministic given the seed. If the chain has not been absorbed by
    ``horizon`` the sample reports an infinite absorption time.
    """
    if horizon <= 0:
        raise ChainError("horizon must be > 0")
    rng = np.random.default_rng(seed)
    space = rates.space
    R = rates.rate_array()
    exit_rates = rates.exit_rates
    x = space.index_of(start)
    t = 0.0
    path = [(0.0, start)]
    while True:
        total = exit_rates[x]
        if total == 0.0:
            return AbsorptionSample(path, math.inf)
        t += rng.exponential(1.0 / total)
        if t > horizon:
            return AbsorptionSample(path, math.inf)
        u = rng.random() * total
        cum = 0.0
        target = -1
        for y in range(len(space)):
            cum += R[x, y]
            if u < cum:
                target = y
                break
        if target < 0:
            path.append((t, ABSORBING_LABEL))
            return AbsorptionSample(path, t)
        x = target
        path.append((t, space.labels[x]))


def two_state_example() -> RateMatrix:
    """Two-state chain with q(1,2) = q(2,1) = q(1,0) = 1."""
    space = StateSpace(("1", "2"))
    return RateMatrix(space, {("1", "2"): 1.0, ("2", "1"): 1.0}, {"1": 1.0})


def asymmetric_walk(p: float, L: int) -> RateMatrix:
    """Truncated asymmetric walk on {1, ..., L}.

    Up-rate p, down-rate 1-p, and absorption 1-p from state 1. The outward rate
    at the truncation boundary L is dropped, giving the simplest sub-chain of
    the infinite walk; truncation sensitivity can be studied by varying L.
    """
    if not 0.0 < p < 1.0:
        raise ChainError("walk parameter p must lie strictly between 0 and 1")
    if L < 2:
        raise ChainError("truncation level L must be >= 2")
    labels = tuple(str(i) for i in range(1, L + 1))
    offdiag: dict[tuple[str, str], float] = {}
    for i in range(1, L + 1):
        if i < L:
            offdiag[(str(i), str(i + 1))] = p
        if i >= 2:
            offdiag[(str(i), str(i - 1))] = 1.0 - p
    return RateMatrix(StateSpace(labels), offdiag, {"1": 1.0 - p})


def _require(cond: bool, msg: str):
    if not cond:
        raise ChainSpecError(msg)


def _check_fields(obj: dict, allowed: set[str], context: str):
    unknown = set(obj) - allowed
    if unknown:
        raise ChainSpecError(f"{context}: unknown field {sorted(unknown)[0]!r}")


def load_chain_spec(document) -> RateMatrix:
    """Parse the chain-spec JSON format into a RateMatrix.

    Accepts a dict, or JSON text/bytes. The schema is::

        {"states": ["1", "2"],
         "rates": [{"from": "1", "to": "2", "rate": 1.0}, ...],
         "absorption": [{"from": "1", "rate": 1.0}, ...]}

    Unknown fields are rejected; absent rates are zero. Errors carry the field
    path (and the line for JSON text) of the offending entry.
    """
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ChainSpecError(
                f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
            ) from exc
    _require(isinstance(document, dict), "chain spec must be a JSON object")
    _check_fields(document, {"states", "rates", "absorption"}, "chain spec")
    states = document.get("states")
    _require(isinstance(states, list) and states, "'states' must be a non-empty list")
    _require(
        all(isinstance(s, str) for s in states), "'states' entries must be strings"
    )
    try:
        space = StateSpace(tuple(states))
    except ChainError as exc:
        raise ChainSpecError(f"'states': {exc}") from exc

    offdiag: dict[tuple[str, str], float] = {}
    for k, entry in enumerate(document.get("rates", [])):
        ctx = f"rates[{k}]"
        _require(isinstance(entry, dict), f"{ctx}: must be an object")
        _check_fields(entry, {"from", "to", "rate"}, ctx)
        for fld in ("from", "to", "rate"):
            _require(fld in entry, f"{ctx}: missing field {fld!r}")
        src, dst, r = entry["from"], entry["to"], entry["rate"]
        _require(src in space.index, f"{ctx}.from: unknown state {src!r}")
        _require(dst in space.index, f"{ctx}.to: unknown state {dst!r}")
        _require(src != dst, f"{ctx}: diagonal rate {src!r}->{dst!r} not allowed")
        _require(
            isinstance(r, (int, float)) and math.isfinite(r) and r >= 0,
            f"{ctx}.rate: must be a finite number >= 0",
        )
        _require((src, dst) not in offdiag, f"{ctx}: duplicate rate {src!r}->{dst!r}")
        offdiag[(src, dst)] = float(r)

    absorb: dict[str, float] = {}
    for k, entry in enumerate(document.get("absorption", [])):
        ctx = f"absorption[{k}]"
        _require(isinstance(entry, dict), f"{ctx}: must be an object")
        _check_fields(entry, {"from", "rate"}, ctx)
        for fld in ("from", "rate"):
            _require(fld in entry, f"{ctx}: missing field {fld!r}")
        src, r = entry["from"], entry["rate"]
        _require(src in space.index, f"{ctx}.from: unknown state {src!r}")
        _require(
            isinstance(r, (int, float)) and math.isfinite(r) and r >= 0,
            f"{ctx}.rate: must be a finite number >= 0",
        )
        _require(src not in absorb, f"{ctx}: duplicate absorption for {src!r}")
        absorb[src] = float(r)

    return RateMatrix(space, offdiag, absorb)
