"""Chain state machine for the adaptive independence Metropolis-Hastings sampler.

The sampler draws proposals from kernels that may adapt to the full history of
points where the target has been evaluated, excluding the chain's current
state.  Independent-proposal iterations extend that history by exactly one
entry (the rejected proposal, or the vacated previous state); state-dependent
iterations leave it untouched.  All density arithmetic is done in log space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

NEG_INF = float("-inf")


# ---------------------------------------------------------------------------
# Supports
# ---------------------------------------------------------------------------

class Box:
    """Axis-aligned box; 1-D boxes accept plain floats as states."""

    def __init__(self, lower, upper):
        self.lower = np.atleast_1d(np.asarray(lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(upper, dtype=float))
        if self.lower.shape != self.upper.shape:
            raise ValueError("box bounds must have equal length")
        if np.any(self.lower >= self.upper):
            raise ValueError("box must have positive volume")
        self.dim = self.lower.size
        # scalar fast path bounds
        self._lo0 = float(self.lower[0])
        self._hi0 = float(self.upper[0])

    def contains(self, x) -> bool:
        if self.dim == 1 and isinstance(x, float):
            return self._lo0 < x < self._hi0
        x = np.asarray(x)
        return bool(np.all(x > self.lower) and np.all(x < self.upper))

    def contains_closed(self, x) -> bool:
        if self.dim == 1 and isinstance(x, float):
            return self._lo0 <= x <= self._hi0
        x = np.asarray(x)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def volume(self) -> float:
        return float(np.prod(self.upper - self.lower))

    def __eq__(self, other):
        return (isinstance(other, Box)
                and np.array_equal(self.lower, other.lower)
                and np.array_equal(self.upper, other.upper))

    def __repr__(self):
        return f"Box({self.lower.tolist()}, {self.upper.tolist()})"


class RealSpace:
    """All of R^n."""

    def __init__(self, dim: int):
        self.dim = int(dim)

    def contains(self, x) -> bool:
        return True

    def __eq__(self, other):
        return isinstance(other, RealSpace) and self.dim == other.dim

    def __repr__(self):
        return f"RealSpace({self.dim})"


class FiniteSupport:
    """Finite state space; states are the elements themselves."""

    def __init__(self, points: Sequence):
        self.points = list(points)
        self._set = set(self.points)
        self.dim = 1

    def contains(self, x) -> bool:
        return x in self._set

    def __repr__(self):
        return f"FiniteSupport({self.points!r})"


# ---------------------------------------------------------------------------
# Target density
# ---------------------------------------------------------------------------

class TargetDensity:
    """Unnormalized log-density, the sampler's only view of the target.

    ``log_f`` must return ``-inf`` exactly outside ``support``; the wrapper
    enforces this by checking membership first.  ``log_norm_const`` is the log
    of the integral of ``exp(log_f)`` over the support, present only when
    known analytically or computed numerically to ``norm_tol``.
    """

    def __init__(self, log_f: Callable, dim: int, support,
                 log_norm_const: Optional[float] = None,
                 norm_tol: float = 1e-8):
        self._log_f = log_f
        self.dim = int(dim)
        self.support = support
        self.log_norm_const = log_norm_const
        self.norm_tol = norm_tol

    def log_density(self, x) -> float:
        if not self.support.contains(x):
            return NEG_INF
        return float(self._log_f(x))

    def evaluate(self, x):
        """One budgeted evaluation: ``(log_f(x), aux)``.

        ``aux`` is an auxiliary expensive quantity cached alongside the
        density (e.g. a simulator response); ``None`` for plain targets.
        """
        return self.log_density(x), None

    def normalized_log_density(self, x) -> float:
        if self.log_norm_const is None:
            raise ValueError("target has no normalization constant")
        return self.log_density(x) - self.log_norm_const


# ---------------------------------------------------------------------------
# History
# ---------------------------------------------------------------------------

@dataclass(slots=True)
class HistoryEntry:
    """One recorded point where the target was evaluated.

    ``aux`` carries the cached auxiliary evaluation (simulator response) when
    the target supplies one, so adapters never re-trigger evaluations.
    """

    state: object
    log_f_value: float
    iteration_added: int
    aux: object = None


class History:
    """Ordered proposal history; grows only on independent-proposal steps."""

    __slots__ = ("entries",)

    def __init__(self):
        self.entries: list[HistoryEntry] = []

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def append(self, entry: HistoryEntry):
        self.entries.append(entry)

    def states(self) -> list:
        return [e.state for e in self.entries]


# ---------------------------------------------------------------------------
# Chain state and trace
# ---------------------------------------------------------------------------

class ChainState:
    """Mutable per-chain state; single-threaded, never shared.

    The ``_cache_*`` fields memoize the proposal log-density at the current
    state for independent kernels, keyed by kernel identity and its density
    epoch; recomputing would return the identical float, so traces are
    unchanged.
    """

    __slots__ = ("current", "current_log_f", "current_aux", "iteration",
                 "history", "rng", "last_regeneration",
                 "_cache_kernel", "_cache_epoch", "_cache_log_q")

    def __init__(self, current, current_log_f: float, rng: np.random.Generator,
                 current_aux=None):
        self.current = current
        self.current_log_f = current_log_f
        self.current_aux = current_aux
        self.iteration = 0
        self.history = History()
        self.rng = rng
        self.last_regeneration: Optional[int] = None
        self._cache_kernel = None
        self._cache_epoch = -1
        self._cache_log_q = 0.0

    @property
    def regenerated(self) -> bool:
        return self.last_regeneration is not None


@dataclass(slots=True)
class StepRecord:
    """Per-iteration trace record."""

    iteration: int
    proposal: object
    alpha: float
    accepted: bool
    independent: bool
    regenerated: bool
    state: object


class Trace:
    """Column-oriented record of one chain run plus summary counters.

    With ``keep_records=False`` only the counters and the final state are
    retained, which is what large ensembles use.
    """

    def __init__(self, initial_state, keep_records: bool = True):
        self.initial_state = initial_state
        self.keep_records = keep_records
        self.proposals: list = []
        self.alphas: list[float] = []
        self.accepted: list[bool] = []
        self.independent: list[bool] = []
        self.regenerated: list[bool] = []
        self.states: list = []
        self.n_iterations = 0
        self.n_accepted = 0
        self.n_independent = 0
        self.n_regenerations = 0
        self.final_state = initial_state

    def record(self, rec: StepRecord):
        self.n_iterations += 1
        self.n_accepted += rec.accepted
        self.n_independent += rec.independent
        self.n_regenerations += rec.regenerated
        self.final_state = rec.state
        if self.keep_records:
            self.proposals.append(rec.proposal)
            self.alphas.append(rec.alpha)
            self.accepted.append(rec.accepted)
            self.independent.append(rec.independent)
            self.regenerated.append(rec.regenerated)
            self.states.append(rec.state)

    def __len__(self):
        return self.n_iterations

    def acceptance_rate(self) -> float:
        return self.n_accepted / self.n_iterations if self.n_iterations else 0.0


# ---------------------------------------------------------------------------
# Acceptance probability
# ---------------------------------------------------------------------------

def log_acceptance_ratio(log_f_z: float, log_f_x: float,
                         log_q_z: float, log_q_x: float) -> float:
    """Log Metropolis-Hastings ratio from cached log values.

    ``log_q_z`` is the proposal log-density at the proposed point, ``log_q_x``
    at the previous state under the reversed move.  Unnormalized f and q are
    valid because their normalizers are constant within one iteration.
    """
    if log_f_z == NEG_INF or log_q_x == NEG_INF:
        return NEG_INF
    if log_q_z == NEG_INF:
        raise ValueError("proposal density zero at own sample")
    return (log_f_z + log_q_x) - (log_f_x + log_q_z)


def acceptance_probability(target: TargetDensity, kernel, x_prev, z,
                           history: History) -> float:
    """min{1, [f(z) q(x_prev|z,h)] / [f(x_prev) q(z|x_prev,h)]} in log space.

    A proposal outside the target support yields 0; a kernel reporting zero
    density at its own sample is an error (broken kernel).
    """
    log_f_x = target.log_density(x_prev)
    if log_f_x == NEG_INF:
        raise ValueError("previous state outside target support")
    log_f_z = target.log_density(z)
    log_q_z = kernel.log_density(z, x_prev, history)
    log_q_x = kernel.log_density(x_prev, z, history)
    ratio = log_acceptance_ratio(log_f_z, log_f_x, log_q_z, log_q_x)
    if ratio >= 0.0:
        return 1.0
    return math.exp(ratio)


# ---------------------------------------------------------------------------
# Regeneration detection
# ---------------------------------------------------------------------------

def detect_regeneration(u: float, z, kernel_log_density_at_z: float,
                        target: TargetDensity, a_i: float) -> bool:
    """Rejection-coupling test: true iff ``u * q(z) / pi(z) <= a_i``.

    ``a_i`` must lower-bound ``inf_z q(z)/pi(z)`` for this iteration's
    (normalized) independent kernel; when the test passes, ``z`` is an exact
    draw from the target, and the same uniform ``u`` necessarily accepts it.
    """
    if target.log_norm_const is None:
        raise ValueError("regeneration detection requires normalized target")
    if a_i <= 0.0:
        return False
    log_pi_z = target.log_density(z) - target.log_norm_const
    if log_pi_z == NEG_INF:
        return False
    if u == 0.0:
        return True
    return math.log(u) + kernel_log_density_at_z - log_pi_z <= math.log(a_i)


# ---------------------------------------------------------------------------
# One iteration
# ---------------------------------------------------------------------------

def aimh_step(chain: ChainState, kernel, target: TargetDensity) -> StepRecord:
    """Advance the chain by one iteration, mutating ``chain`` in place.

    Draws z from the kernel, accepts with the Metropolis-Hastings probability
    (tie u == alpha accepts), then applies the asymmetric history update: on
    an independent iteration the history gains the rejected proposal or the
    vacated previous state; on a state-dependent iteration it is unchanged.
    Exactly one fresh target evaluation happens here (at z); the previous
    state's value is reused from cache.
    """
    i = chain.iteration + 1
    rng = chain.rng
    history = chain.history
    x_prev = chain.current
    log_f_x = chain.current_log_f
    independent = kernel.is_independent(i)

    z = kernel.sample(x_prev, history, rng)
    log_f_z, aux_z = target.evaluate(z)
    log_q_z = kernel.log_density(z, x_prev, history)
    if (independent and chain._cache_kernel is kernel
            and chain._cache_epoch == kernel.density_epoch):
        log_q_x = chain._cache_log_q
    else:
        log_q_x = kernel.log_density(x_prev, z, history)

    ratio = log_acceptance_ratio(log_f_z, log_f_x, log_q_z, log_q_x)
    alpha = 1.0 if ratio >= 0.0 else math.exp(ratio)
    u = rng.random()
    accepted = u <= alpha

    regenerated = False
    if independent and kernel.normalized and target.log_norm_const is not None:
        a_i = kernel.doeblin_bound(history)
        if a_i is not None:
            regenerated = detect_regeneration(u, z, log_q_z, target, a_i)

    if independent:
        if accepted:
            history.append(HistoryEntry(x_prev, log_f_x, i, chain.current_aux))
        else:
            history.append(HistoryEntry(z, log_f_z, i, aux_z))

    if accepted:
        chain.current = z
        chain.current_log_f = log_f_z
        chain.current_aux = aux_z
    chain.iteration = i
    if regenerated:
        chain.last_regeneration = i
    if independent:
        chain._cache_kernel = kernel
        chain._cache_epoch = kernel.density_epoch
        chain._cache_log_q = log_q_z if accepted else log_q_x

    kernel.adapt(history)
    return StepRecord(i, z, alpha, accepted, independent, regenerated,
                      chain.current)


# ---------------------------------------------------------------------------
# Full runs
# ---------------------------------------------------------------------------

def draw_initial_state(target: TargetDensity, initial_distribution,
                       rng: np.random.Generator, retry_cap: int = 100):
    """Draw x0 with finite target density, resampling up to ``retry_cap``."""
    for _ in range(retry_cap):
        x0 = initial_distribution(rng)
        log_f0, aux0 = target.evaluate(x0)
        if log_f0 > NEG_INF:
            return x0, log_f0, aux0
    raise RuntimeError(
        f"initial distribution produced no state inside the target support "
        f"in {retry_cap} attempts")


def run_chain(target: TargetDensity, kernel_schedule, initial_distribution,
              n_iterations: int, seed, *, keep_records: bool = True,
              observer=None, init_retry_cap: int = 100) -> Trace:
    """Run one chain for ``n_iterations`` steps; deterministic given seed.

    ``kernel_schedule`` is either a kernel used every iteration or a callable
    mapping the 1-based iteration index to a kernel.  ``initial_distribution``
    is a callable ``rng -> state``.  ``observer(chain, record)``, when given,
    is invoked after every iteration.
    """
    if n_iterations < 0:
        raise ValueError("n_iterations must be >= 0")
    rng = np.random.default_rng(seed)
    if callable(kernel_schedule):
        schedule = kernel_schedule
    else:
        fixed = kernel_schedule
        schedule = lambda i: fixed  # noqa: E731

    x0, log_f0, aux0 = draw_initial_state(target, initial_distribution, rng,
                                          init_retry_cap)
    chain = ChainState(x0, log_f0, rng, aux0)
    trace = Trace(x0, keep_records=keep_records)
    for i in range(1, n_iterations + 1):
        kernel = schedule(i)
        rec = aimh_step(chain, kernel, target)
        trace.record(rec)
        if observer is not None:
            observer(chain, rec)
    return trace


def child_seed(master_seed: int, chain_index: int) -> np.random.SeedSequence:
    """Seed-splitting rule for ensembles: SeedSequence(master, spawn_key=(index,))."""
    return np.random.SeedSequence(master_seed, spawn_key=(chain_index,))
