"""Proposal kernels, including the history-adaptive mixture and surrogate kernels.

Every kernel obeys one contract: within an iteration, ``log_density`` is a
fixed function whose (possibly unknown) normalizer is constant, and ``sample``
draws from exactly that density.  ``adapt`` runs after each iteration and may
read only the proposal history, never the chain's current state.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from ._fastmath import diag_mixture_logpdf, first_suppression, modelist_scan
from .core import Box, History, NEG_INF

LOG_2PI = math.log(2.0 * math.pi)


def _logsumexp(vals: np.ndarray) -> float:
    m = vals.max()
    if m == NEG_INF:
        return NEG_INF
    return float(m + math.log(np.exp(vals - m).sum()))


def _as_vector(x, dim: int) -> np.ndarray:
    if isinstance(x, float) and dim == 1:
        return np.array([x])
    return np.asarray(x, dtype=float)


# ---------------------------------------------------------------------------
# Contract
# ---------------------------------------------------------------------------

class ProposalKernel:
    """Behavioral contract for proposal kernels.

    ``normalized`` declares whether ``log_density`` integrates to one (the
    regeneration detector requires it).  ``doeblin_bound`` returns a valid
    lower bound on ``inf_z q(z)/pi(z)`` for the current history, or ``None``
    when no bound is known; the default forwards a caller-settable constant.
    """

    independent = True
    normalized = True

    def __init__(self):
        self.doeblin_a = None
        # bumped whenever adaptation changes the density; lets the chain
        # reuse the previous state's proposal log-density between changes
        self.density_epoch = 0

    def sample(self, x_prev, history: History, rng: np.random.Generator):
        raise NotImplementedError

    def log_density(self, point, x_prev, history: History) -> float:
        raise NotImplementedError

    def is_independent(self, iteration: int) -> bool:
        return self.independent

    def adapt(self, history: History) -> None:
        pass

    def doeblin_bound(self, history: History):
        return self.doeblin_a


# ---------------------------------------------------------------------------
# Fixed independence kernels
# ---------------------------------------------------------------------------

class UniformIndependenceKernel(ProposalKernel):
    """Uniform proposals on a box, independent of the current state."""

    def __init__(self, box: Box):
        super().__init__()
        self.box = box
        self.dim = box.dim
        self._log_density_value = -math.log(box.volume())

    def sample(self, x_prev, history, rng):
        if self.dim == 1:
            return rng.uniform(self.box._lo0, self.box._hi0)
        return rng.uniform(self.box.lower, self.box.upper)

    def log_density(self, point, x_prev, history):
        if self.box.contains_closed(point):
            return self._log_density_value
        return NEG_INF


class GaussianIndependenceKernel(ProposalKernel):
    """Normal proposals with diagonal covariance, independent of the state."""

    def __init__(self, mean, var):
        super().__init__()
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.var = np.broadcast_to(
            np.atleast_1d(np.asarray(var, dtype=float)), self.mean.shape
        ).astype(float)
        if np.any(self.var <= 0):
            raise ValueError("variances must be positive")
        self.dim = self.mean.size
        self.std = np.sqrt(self.var)
        self._log_norm = -0.5 * float(np.sum(np.log(2.0 * math.pi * self.var)))
        self._mu0 = float(self.mean[0])
        self._inv0 = 1.0 / float(self.var[0])
        self._std0 = float(self.std[0])

    def sample(self, x_prev, history, rng):
        if self.dim == 1:
            return self._mu0 + self._std0 * rng.standard_normal()
        return self.mean + self.std * rng.standard_normal(self.dim)

    def log_density(self, point, x_prev, history):
        if self.dim == 1 and isinstance(point, float):
            d = point - self._mu0
            return self._log_norm - 0.5 * d * d * self._inv0
        d = np.asarray(point) - self.mean
        return self._log_norm - 0.5 * float(np.sum(d * d / self.var))


def fixed_independence_kernel(spec) -> ProposalKernel:
    """Build a fixed independent kernel from a box or a (mean, var) pair."""
    if isinstance(spec, Box):
        return UniformIndependenceKernel(spec)
    mean, var = spec
    return GaussianIndependenceKernel(mean, var)


class StudentTKernel(ProposalKernel):
    """Independent multivariate Student-t (default 1 dof), the heavy tail
    used to restore a positive Doeblin constant via mixture wrapping."""

    def __init__(self, loc, scale, dof: float = 1.0):
        super().__init__()
        self.loc = np.atleast_1d(np.asarray(loc, dtype=float))
        self.scale = np.broadcast_to(
            np.atleast_1d(np.asarray(scale, dtype=float)), self.loc.shape
        ).astype(float)
        if np.any(self.scale <= 0):
            raise ValueError("scales must be positive")
        self.dof = float(dof)
        self.dim = self.loc.size
        d, nu = self.dim, self.dof
        self._log_norm = (math.lgamma((nu + d) / 2.0) - math.lgamma(nu / 2.0)
                          - 0.5 * d * math.log(nu * math.pi)
                          - float(np.sum(np.log(self.scale))))

    def sample(self, x_prev, history, rng):
        x = rng.standard_normal(self.dim)
        w = rng.chisquare(self.dof)
        z = self.loc + self.scale * x * math.sqrt(self.dof / w)
        return float(z[0]) if self.dim == 1 else z

    def log_density(self, point, x_prev, history):
        d = (_as_vector(point, self.dim) - self.loc) / self.scale
        m = float(np.sum(d * d))
        return self._log_norm - 0.5 * (self.dof + self.dim) * math.log1p(m / self.dof)


# ---------------------------------------------------------------------------
# Random-walk kernels (state-dependent; history frozen while they run)
# ---------------------------------------------------------------------------

class UniformWalkKernel(ProposalKernel):
    """Per-component uniform window of length L around the current state.

    Near the support boundary each window is clipped and the density
    renormalized to the clipped window, keeping the proposal a proper density.
    """

    independent = False

    def __init__(self, step_length: float, box: Box):
        super().__init__()
        if step_length <= 0:
            raise ValueError("step length must be positive")
        self.step_length = float(step_length)
        self.box = box
        self.dim = box.dim

    def _window(self, center: float, axis: int):
        half = 0.5 * self.step_length
        lo = max(float(self.box.lower[axis]), center - half)
        hi = min(float(self.box.upper[axis]), center + half)
        return lo, hi

    def sample(self, x_prev, history, rng):
        if self.dim == 1:
            lo, hi = self._window(x_prev, 0)
            return rng.uniform(lo, hi)
        out = np.empty(self.dim)
        for j in range(self.dim):
            lo, hi = self._window(float(x_prev[j]), j)
            out[j] = rng.uniform(lo, hi)
        return out

    def log_density(self, point, x_prev, history):
        if self.dim == 1:
            lo, hi = self._window(x_prev, 0)
            if lo <= point <= hi:
                return -math.log(hi - lo)
            return NEG_INF
        total = 0.0
        for j in range(self.dim):
            lo, hi = self._window(float(x_prev[j]), j)
            pj = float(point[j])
            if not lo <= pj <= hi:
                return NEG_INF
            total -= math.log(hi - lo)
        return total


class GaussianWalkKernel(ProposalKernel):
    """Normal step with diagonal covariance centered on the current state."""

    independent = False

    def __init__(self, var, dim: int | None = None):
        super().__init__()
        var = np.atleast_1d(np.asarray(var, dtype=float))
        if dim is not None and var.size == 1:
            var = np.full(dim, float(var[0]))
        if np.any(var <= 0):
            raise ValueError("variances must be positive")
        self.var = var
        self.dim = var.size
        self.std = np.sqrt(var)
        self._log_norm = -0.5 * float(np.sum(np.log(2.0 * math.pi * var)))
        self._inv0 = 1.0 / float(var[0])
        self._std0 = float(self.std[0])

    def sample(self, x_prev, history, rng):
        if self.dim == 1:
            return x_prev + self._std0 * rng.standard_normal()
        return x_prev + self.std * rng.standard_normal(self.dim)

    def log_density(self, point, x_prev, history):
        if self.dim == 1 and isinstance(point, float):
            d = point - x_prev
            return self._log_norm - 0.5 * d * d * self._inv0
        d = np.asarray(point) - np.asarray(x_prev)
        return self._log_norm - 0.5 * float(np.sum(d * d / self.var))


# ---------------------------------------------------------------------------
# Two-mode adaptive kernel (1-D, two uniform windows over a uniform base)
# ---------------------------------------------------------------------------

class TwoModeAdaptiveKernel(ProposalKernel):
    """Independent kernel tracking the best history point on each side of a
    split, and boosting two uniform windows of length L around them.

    Density: ``1 - 2p`` outside the windows and ``1 - 2p + p/L`` inside each
    (per unit base volume).  A side with no history entry yet returns its
    window mass to the uniform component.  Windows are clipped at the support
    boundary with their mass renormalized within the clipped window;
    overlapping windows merge into a single window carrying mass ``2p``.
    """

    def __init__(self, p: float, step_length: float, box: Box | None = None,
                 split: float = 0.5):
        super().__init__()
        if not 0.0 < p < 0.5:
            raise ValueError("p must be in (0, 0.5)")
        if step_length <= 0:
            raise ValueError("step length must be positive")
        self.p = float(p)
        self.L = float(step_length)
        self.box = box if box is not None else Box(0.0, 1.0)
        if self.box.dim != 1:
            raise ValueError("two-mode kernel is one-dimensional")
        self.split = float(split)
        self._lo = self.box._lo0
        self._hi = self.box._hi0
        self._base_vol = self._hi - self._lo
        self.best_low = None    # (state, log_f) with state < split
        self.best_high = None   # (state, log_f) with state > split
        self._seen = 0
        self._windows = []      # [(lo, hi, mass)]
        self._uniform_mass = 1.0

    def windows(self):
        return list(self._windows)

    def density_floor(self) -> float:
        """Everywhere-positive lower bound on the density: (1-2p)/volume."""
        return (1.0 - 2.0 * self.p) / self._base_vol

    def _clip(self, center: float):
        half = 0.5 * self.L
        return max(self._lo, center - half), min(self._hi, center + half)

    def _rebuild(self):
        wins = []
        centers = []
        if self.best_low is not None:
            centers.append(self.best_low[0])
        if self.best_high is not None:
            centers.append(self.best_high[0])
        if len(centers) == 2 and abs(centers[0] - centers[1]) < self.L:
            lo = max(self._lo, min(centers) - 0.5 * self.L)
            hi = min(self._hi, max(centers) + 0.5 * self.L)
            wins.append((lo, hi, 2.0 * self.p))
        else:
            for c in centers:
                lo, hi = self._clip(c)
                wins.append((lo, hi, self.p))
        self._windows = wins
        self._uniform_mass = 1.0 - sum(w[2] for w in wins)
        self.density_epoch += 1

    def adapt(self, history):
        entries = history.entries
        changed = False
        for k in range(self._seen, len(entries)):
            e = entries[k]
            s = e.state
            if s < self.split:
                if self.best_low is None or e.log_f_value > self.best_low[1]:
                    self.best_low = (s, e.log_f_value)
                    changed = True
            elif s > self.split:
                if self.best_high is None or e.log_f_value > self.best_high[1]:
                    self.best_high = (s, e.log_f_value)
                    changed = True
        self._seen = len(entries)
        if changed:
            self._rebuild()

    def sample(self, x_prev, history, rng):
        u = rng.random()
        acc = self._uniform_mass
        if u < acc:
            return rng.uniform(self._lo, self._hi)
        for lo, hi, mass in self._windows:
            acc += mass
            if u < acc:
                return rng.uniform(lo, hi)
        return rng.uniform(self._windows[-1][0], self._windows[-1][1])

    def log_density(self, point, x_prev, history):
        if not self._lo <= point <= self._hi:
            return NEG_INF
        dens = self._uniform_mass / self._base_vol
        for lo, hi, mass in self._windows:
            if lo <= point <= hi:
                dens += mass / (hi - lo)
        return math.log(dens)


# ---------------------------------------------------------------------------
# Capped score-ordered mode list
# ---------------------------------------------------------------------------

class ModeList:
    """Capped, score-ordered, spacing-constrained list of states.

    Scores are kept in log scale (ordering is unchanged and sharp targets
    overflow linear scale).  ``use_cap`` is how many leading entries feed the
    proposal; the list itself holds up to ``cap`` entries.  Storage is
    preallocated; entries shift in place on insertion.
    """

    def __init__(self, cap: int, spacing: float, dim: int, use_cap: int | None = None):
        if use_cap is not None and use_cap > cap:
            raise ValueError("use_cap must not exceed cap")
        self.cap = int(cap)
        self.spacing = float(spacing)
        self.use_cap = int(use_cap) if use_cap is not None else int(cap)
        self.dim = int(dim)
        self.n = 0
        self._states = np.zeros((self.cap + 1, dim))
        self._scores = np.zeros(self.cap + 1)
        self._log_f = np.zeros(self.cap + 1)
        self._aux = np.zeros(self.cap + 1)

    def __len__(self):
        return self.n

    @property
    def states(self) -> np.ndarray:
        return self._states[:self.n]

    @property
    def scores(self) -> np.ndarray:
        return self._scores[:self.n]

    @property
    def log_f(self) -> np.ndarray:
        return self._log_f[:self.n]

    @property
    def aux(self) -> np.ndarray:
        return self._aux[:self.n]

    @property
    def n_used(self) -> int:
        return min(self.use_cap, self.n)

    def update(self, y, score: float, log_f: float, aux: float = math.nan) -> bool:
        """Offer a candidate to the list; returns True when the list changed.

        Scan in score order: insert before the first lower-scored entry,
        unless a higher-or-equal-scored entry lies within ``spacing`` of the
        candidate (then do nothing).  After inserting, remove the first
        subsequent entry within ``spacing/2``, then truncate to ``cap``.
        """
        n = self.n
        scores = self._scores
        if n >= self.cap and score <= scores[n - 1]:
            return False
        yv = _as_vector(y, self.dim)
        states = self._states
        j, removal = modelist_scan(states, scores, n, yv, score, self.spacing)
        if j < 0:
            return False
        log_f_arr, aux_arr = self._log_f, self._aux
        end = removal if removal >= 0 else n
        states[j + 1:end + 1] = states[j:end]
        scores[j + 1:end + 1] = scores[j:end]
        log_f_arr[j + 1:end + 1] = log_f_arr[j:end]
        aux_arr[j + 1:end + 1] = aux_arr[j:end]
        states[j] = yv
        scores[j] = score
        log_f_arr[j] = log_f
        aux_arr[j] = aux
        if removal < 0:
            self.n = min(n + 1, self.cap)
        return True


def mode_list_update(mode_list: ModeList, y, score_fn) -> ModeList:
    """Offer ``y`` scored by ``score_fn(y) -> (log_score, log_f)``; mutates
    and returns the list."""
    score, log_f = score_fn(y)
    mode_list.update(y, score, log_f)
    return mode_list


def mixture_weights(log_f_values: np.ndarray, m0: int) -> np.ndarray:
    """Mode weights 1/(5*M0) + c*f(nu_j), with c normalizing the sum to one.

    Computed from log f values, shift-invariantly; all-zero f degenerates to
    equal weights.
    """
    log_f_values = np.asarray(log_f_values, dtype=float)
    m = log_f_values.size
    if m < 1:
        raise ValueError("need at least one mode")
    if m > m0:
        raise ValueError("more modes than the proposal-use cap")
    top = log_f_values.max()
    if top == NEG_INF:
        return np.full(m, 1.0 / m)
    rel = np.exp(log_f_values - top)
    base = 1.0 / (5.0 * m0)
    return base + (1.0 - m * base) * rel / rel.sum()


# ---------------------------------------------------------------------------
# Adaptive normal mixture kernel
# ---------------------------------------------------------------------------

class NormalMixtureKernel(ProposalKernel):
    """Normal mixture: a wide base component plus adaptive mode components.

    Component probabilities are (tau0, tau_1..tau_m)/(1 + tau0), i.e. the
    base keeps mass tau0/(1+tau0) regardless of the mode count.  Adaptation
    scores each new history point by log f(y) - log phi_base(y) and offers it
    to the mode list; with an empty list the kernel is exactly the base
    normal.
    """

    def __init__(self, nu0, lam0, lamj, m0: int, cap: int, spacing: float,
                 tau0: float = 0.5):
        super().__init__()
        self.nu0 = np.atleast_1d(np.asarray(nu0, dtype=float))
        self.dim = self.nu0.size
        self.lam0 = np.broadcast_to(
            np.atleast_1d(np.asarray(lam0, dtype=float)), (self.dim,)
        ).astype(float)
        self.lamj = np.broadcast_to(
            np.atleast_1d(np.asarray(lamj, dtype=float)), (self.dim,)
        ).astype(float)
        if np.any(self.lam0 <= 0) or np.any(self.lamj <= 0):
            raise ValueError("component variances must be positive definite")
        self.tau0 = float(tau0)
        self.modes = ModeList(cap, spacing, self.dim, use_cap=m0)
        self._seen = 0
        self._log_norm0 = -0.5 * float(np.sum(np.log(2.0 * math.pi * self.lam0)))
        self._log_normj = -0.5 * float(np.sum(np.log(2.0 * math.pi * self.lamj)))
        self._inv0 = 1.0 / self.lam0
        self._invj = 1.0 / self.lamj
        self._std0 = np.sqrt(self.lam0)
        self._phi0_means = self.nu0.reshape(1, -1)
        self._phi0_inv = self._inv0.reshape(1, -1)
        self._phi0_wnorm = np.array([self._log_norm0])
        self._rebuild()

    # base-component log-density, also the denominator of the mode score
    def log_phi0(self, y) -> float:
        return float(diag_mixture_logpdf(_as_vector(y, self.dim),
                                         self._phi0_means, self._phi0_inv,
                                         self._phi0_wnorm, 0.0))

    def mode_log_taus(self) -> np.ndarray:
        m = self.modes.n_used
        if m == 0:
            return np.empty(0)
        return np.log(mixture_weights(self.modes.log_f[:m], self.modes.use_cap))

    def _rebuild(self):
        m = self.modes.n_used
        k = m + 1
        means = np.empty((k, self.dim))
        means[0] = self.nu0
        inv_var = np.empty((k, self.dim))
        inv_var[0] = self._inv0
        log_norm = np.empty(k)
        log_norm[0] = self._log_norm0
        stds = np.empty((k, self.dim))
        stds[0] = np.sqrt(self.lam0)
        if m:
            means[1:] = self.modes.states[:m]
            inv_var[1:] = self._invj
            log_norm[1:] = self._log_normj
            stds[1:] = np.sqrt(self.lamj)
        log_tau = np.empty(k)
        log_tau[0] = math.log(self.tau0)
        if m:
            log_tau[1:] = self.mode_log_taus()
        # normalized component probabilities: (tau0, tau_j) / (tau0 + sum tau);
        # the mode weights sum to one, so the base keeps tau0/(1 + tau0) mass
        # whenever any mode is listed, and everything with an empty list
        log_w = log_tau - math.log(self.tau0 + (1.0 if m else 0.0))
        self._means = means
        self._inv_var = inv_var
        self._log_norm = log_norm
        self._stds = stds
        self._log_tau = log_tau
        self._log_w = log_w
        self._log_wnorm = log_w + log_norm
        self._log_taunorm = log_tau + log_norm
        self._cum_w = np.cumsum(np.exp(log_w))
        self._cum_w[-1] = 1.0
        if m:
            cum = np.cumsum(np.exp(log_tau[1:]))
            self._cum_tau_modes = cum / cum[-1]
        else:
            self._cum_tau_modes = np.empty(0)
        self.density_epoch += 1

    def adapt(self, history):
        entries = history.entries
        changed = False
        for idx in range(self._seen, len(entries)):
            e = entries[idx]
            score = e.log_f_value - self.log_phi0(e.state)
            changed |= self.modes.update(e.state, score, e.log_f_value)
        self._seen = len(entries)
        if changed:
            self._rebuild()

    def _component_logpdfs(self, point) -> np.ndarray:
        d = _as_vector(point, self.dim) - self._means
        d *= d
        d *= self._inv_var
        return self._log_norm - 0.5 * d.sum(axis=1)

    def log_density(self, point, x_prev, history):
        return diag_mixture_logpdf(_as_vector(point, self.dim), self._means,
                                   self._inv_var, self._log_wnorm, 0.0)

    def sample(self, x_prev, history, rng):
        idx = int(np.searchsorted(self._cum_w, rng.random(), side="right"))
        z = self._means[idx] + self._stds[idx] * rng.standard_normal(self.dim)
        return float(z[0]) if self.dim == 1 else z


# ---------------------------------------------------------------------------
# Suppressed mixture kernel (adds an anti-mode list and rejection sampling)
# ---------------------------------------------------------------------------

def suppression_log_factor(z, xi_states: np.ndarray, xi_sup_values: np.ndarray,
                           eps2: float, log_c: float, use_cap: int,
                           dim: int) -> float:
    """Log of the base-term suppression factor.

    Returns the suppressed value of the first anti-mode within ``eps2`` of
    ``z`` (scanning the retained list in score order), or ``log_c`` when no
    anti-mode is that close.
    """
    n = min(use_cap, xi_states.shape[0])
    if n == 0:
        return log_c
    d2 = ((xi_states[:n] - _as_vector(z, dim)) ** 2).sum(axis=1)
    e2 = eps2 * eps2
    if d2.min() >= e2:
        return log_c
    return float(xi_sup_values[int(np.argmax(d2 < e2))])


class SuppressedMixtureKernel(NormalMixtureKernel):
    """Mixture kernel whose base term is damped near known low-value points.

    A second capped list collects anti-modes scored by
    ``p * log phi_base(y) - log f(y)``; the base component's density is
    multiplied by a factor that is ``c`` away from all anti-modes and
    ``max(delta, f(xi)/phi_base(xi))`` within ``eps2`` of the first matching
    one.  ``log_density`` is unnormalized (the normalizer is constant within
    an iteration); sampling uses branch choice proportional to ``tau0*c``
    versus the mode mass plus rejection under the envelope ``rho <= c``.

    ``c`` is steered every ``controller_period`` iterations toward a 50%
    share of returned proposals coming from the base term.
    """

    normalized = False

    def __init__(self, nu0, lam0, lamj, m0: int, cap: int, spacing: float,
                 n0: int = 1000, n_cap: int = 1000, eps2: float = 0.05,
                 delta: float = 0.1, score_exponent: float = 1.3,
                 tau0: float = 0.5, c_init: float = 2.0,
                 controller_period: int | None = 50,
                 controller_gain: float = 0.5, max_rejects: int = 10 ** 6):
        super().__init__(nu0, lam0, lamj, m0, cap, spacing, tau0=tau0)
        self.anti_modes = ModeList(n_cap, eps2, self.dim, use_cap=n0)
        self.eps2 = float(eps2)
        self.delta = float(delta)
        self._log_delta = math.log(delta)
        self.score_exponent = float(score_exponent)
        self._log_c = math.log(c_init)
        self.controller_period = controller_period
        self.controller_gain = float(controller_gain)
        self._log_c_max = math.log(1000.0 * delta)
        self.max_rejects = int(max_rejects)
        self._adapt_calls = 0
        self._win_base = 0
        self._win_total = 0
        self.base_proposals = 0
        self.total_proposals = 0
        self._sup_values = np.empty(0)
        self._max_sup = NEG_INF
        self._xi_n = 0

    @property
    def c(self) -> float:
        return math.exp(self._log_c)

    def _rebuild_xi(self):
        n = self.anti_modes.n_used
        self._xi_n = n
        # suppressed value per anti-mode: max(log delta, log f - log phi0)
        self._sup_values = np.maximum(self._log_delta,
                                      self.anti_modes.log_f[:n]
                                      - self.anti_modes.aux[:n])
        self._max_sup = float(self._sup_values.max()) if n else NEG_INF
        if self._log_c < self._max_sup:
            self._log_c = self._max_sup
        self.density_epoch += 1

    def log_suppression(self, z) -> float:
        n = self._xi_n
        if n == 0:
            return self._log_c
        return float(first_suppression(_as_vector(z, self.dim),
                                       self.anti_modes._states, n,
                                       self.eps2 * self.eps2,
                                       self._sup_values, self._log_c))

    def adapt(self, history):
        entries = history.entries
        changed = False
        xi_changed = False
        for idx in range(self._seen, len(entries)):
            e = entries[idx]
            lp0 = self.log_phi0(e.state)
            changed |= self.modes.update(e.state, e.log_f_value - lp0,
                                         e.log_f_value)
            s_score = self.score_exponent * lp0 - e.log_f_value
            xi_changed |= self.anti_modes.update(e.state, s_score,
                                                 e.log_f_value, aux=lp0)
        self._seen = len(entries)
        if changed:
            self._rebuild()
        if xi_changed:
            self._rebuild_xi()
        self._adapt_calls += 1
        if (self.controller_period
                and self._adapt_calls % self.controller_period == 0
                and self._win_total):
            p_base = self._win_base / self._win_total
            old = self._log_c
            new = self._log_c + self.controller_gain * (0.5 - p_base)
            # the envelope (c >= every suppressed value) outranks the cap
            self._log_c = max(min(new, self._log_c_max), self._max_sup)
            if self._log_c != old:
                self.density_epoch += 1
            self._win_base = 0
            self._win_total = 0

    def log_density(self, point, x_prev, history):
        return diag_mixture_logpdf(_as_vector(point, self.dim), self._means,
                                   self._inv_var, self._log_taunorm,
                                   self.log_suppression(point))

    def sample(self, x_prev, history, rng):
        log_c = self._log_c
        tau0_c = self.tau0 * math.exp(log_c)
        p_base_branch = tau0_c / (tau0_c + 1.0)
        m = self.modes.n_used
        for _ in range(self.max_rejects):
            if m == 0 or rng.random() < p_base_branch:
                z = self.nu0 + self._std0 * rng.standard_normal(self.dim)
                z = float(z[0]) if self.dim == 1 else z
                log_rho = self.log_suppression(z)
                if log_rho > log_c:
                    warnings.warn("suppression envelope violated; raising c")
                    self._log_c = log_c = log_rho
                    self.density_epoch += 1
                u = rng.random()
                if u == 0.0 or math.log(u) <= log_rho - log_c:
                    self.total_proposals += 1
                    self.base_proposals += 1
                    self._win_total += 1
                    self._win_base += 1
                    return z
            else:
                idx = 1 + int(np.searchsorted(self._cum_tau_modes,
                                              rng.random(), side="right"))
                idx = min(idx, m)
                z = (self._means[idx]
                     + self._stds[idx] * rng.standard_normal(self.dim))
                self.total_proposals += 1
                self._win_total += 1
                return float(z[0]) if self.dim == 1 else z
        raise RuntimeError("suppressed-mixture rejection sampler stalled")

    def base_fraction(self) -> float:
        if self.total_proposals == 0:
            return math.nan
        return self.base_proposals / self.total_proposals


# ---------------------------------------------------------------------------
# Doeblin mixture wrapper
# ---------------------------------------------------------------------------

class DoeblinMixtureKernel(ProposalKernel):
    """(1 - eps) * inner + eps * heavy_tail, restoring a positive Doeblin bound.

    ``tail_floor_ratio`` is ``inf_z g(z)/pi(z)`` for the wrapped target when
    known; the reported bound is ``eps * tail_floor_ratio`` plus the inner
    kernel's own bound scaled by ``1 - eps`` when available.
    """

    def __init__(self, inner: ProposalKernel, eps: float,
                 tail: ProposalKernel, tail_floor_ratio: float | None = None):
        super().__init__()
        if not 0.0 <= eps <= 1.0:
            raise ValueError("eps must be in [0, 1]")
        if not inner.is_independent(1):
            raise ValueError("inner kernel must be independent")
        self.inner = inner
        self.eps = float(eps)
        self.tail = tail
        self.tail_floor_ratio = tail_floor_ratio
        self.normalized = inner.normalized and tail.normalized
        self._log_eps = math.log(eps) if eps > 0 else NEG_INF
        self._log_1m = math.log1p(-eps) if eps < 1 else NEG_INF

    def sample(self, x_prev, history, rng):
        if rng.random() < self.eps:
            return self.tail.sample(x_prev, history, rng)
        return self.inner.sample(x_prev, history, rng)

    def log_density(self, point, x_prev, history):
        a = self._log_1m + self.inner.log_density(point, x_prev, history)
        b = self._log_eps + self.tail.log_density(point, x_prev, history)
        if a == NEG_INF:
            return b
        if b == NEG_INF:
            return a
        m = max(a, b)
        return m + math.log1p(math.exp(min(a, b) - m))

    def adapt(self, history):
        self.inner.adapt(history)
        self.density_epoch = self.inner.density_epoch

    def doeblin_bound(self, history):
        bound = None
        if self.tail_floor_ratio is not None:
            bound = self.eps * self.tail_floor_ratio
        inner_bound = self.inner.doeblin_bound(history)
        if inner_bound is not None:
            bound = (bound or 0.0) + (1.0 - self.eps) * inner_bound
        return bound


# ---------------------------------------------------------------------------
# Regression surrogate for expensive simulator responses
# ---------------------------------------------------------------------------

@dataclass
class SurrogateModel:
    """Linear-plus-first-axis-quadratic response model with 7 coefficients."""

    a0: float
    a: np.ndarray          # linear coefficients, length 5
    b: float               # coefficient of x1^2
    fit_count: int
    ridge: float

    def predict(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return self.a0 + float(np.dot(self.a, x)) + self.b * float(x[0]) ** 2

    def x1_vertex(self) -> float | None:
        """Stationary point of the fitted quadratic along the first axis."""
        if self.b == 0.0:
            return None
        return -float(self.a[0]) / (2.0 * self.b)


def _feature_row(x: np.ndarray) -> np.ndarray:
    return np.concatenate(([1.0], x, [x[0] * x[0]]))


def surrogate_fit(history: History, ridge: float = 0.0,
                  n_min: int = 10) -> SurrogateModel:
    """Least-squares fit of the 7-coefficient model to all history points.

    Uses the cached auxiliary (simulator response) values; states must be
    5-dimensional.  Ridge is applied through an augmented least-squares
    system, equivalent to adding ``ridge`` to the normal-equation diagonal.
    """
    entries = history.entries
    if len(entries) < n_min:
        raise ValueError("insufficient data")
    rows = []
    ys = []
    for e in entries:
        if e.aux is None:
            raise ValueError("history entry lacks a cached simulator response")
        x = np.asarray(e.state, dtype=float)
        rows.append(_feature_row(x))
        ys.append(float(e.aux))
    a_mat = np.asarray(rows)
    y = np.asarray(ys)
    if ridge > 0.0:
        a_mat = np.vstack([a_mat, math.sqrt(ridge) * np.eye(7)])
        y = np.concatenate([y, np.zeros(7)])
    coef, *_ = np.linalg.lstsq(a_mat, y, rcond=None)
    return SurrogateModel(a0=float(coef[0]), a=coef[1:6].copy(),
                          b=float(coef[6]), fit_count=len(entries),
                          ridge=ridge)


class SurrogateKernel(ProposalKernel):
    """Uniform draws thinned toward the surrogate's high-likelihood region.

    Proposes x uniform on the box and accepts with probability
    ``exp(-(fhat(x) - d)^2 / (widening * sigma2))`` (at most 1, attained when
    the surrogate matches the datum).  The model is refitted from the history
    after every iteration once ``n_min`` responses are cached; before that the
    kernel is exactly uniform.  ``log_density`` is the unnormalized log
    acceptance weight, constant within an iteration.

    The running normal equations make each refit a 7x7 solve.
    """

    normalized = False

    def __init__(self, d: float, sigma2: float, widening: float = 5.0,
                 box: Box | None = None, n_min: int = 10,
                 ridge: float = 1e-8, max_rejects: int = 10 ** 6):
        super().__init__()
        self.d = float(d)
        self.sigma2 = float(sigma2)
        self.widening = float(widening)
        self.box = box if box is not None else Box(np.zeros(5), np.ones(5))
        if self.box.dim != 5:
            raise ValueError("surrogate kernel expects a 5-dimensional box")
        self.n_min = int(n_min)
        self.ridge = float(ridge)
        self.max_rejects = int(max_rejects)
        self.model: SurrogateModel | None = None
        self._seen = 0
        self._gram = np.zeros((7, 7))
        self._moment = np.zeros(7)
        self._n_pts = 0

    def _log_weight(self, x) -> float:
        if self.model is None:
            return 0.0
        r = self.model.predict(x) - self.d
        return -r * r / (self.widening * self.sigma2)

    def adapt(self, history):
        entries = history.entries
        for idx in range(self._seen, len(entries)):
            e = entries[idx]
            if e.aux is None:
                raise ValueError("history entry lacks a cached simulator response")
            phi = _feature_row(np.asarray(e.state, dtype=float))
            self._gram += np.outer(phi, phi)
            self._moment += phi * float(e.aux)
            self._n_pts += 1
        self._seen = len(entries)
        if self._n_pts >= self.n_min:
            coef = np.linalg.solve(self._gram + self.ridge * np.eye(7),
                                   self._moment)
            self.model = SurrogateModel(a0=float(coef[0]), a=coef[1:6].copy(),
                                        b=float(coef[6]),
                                        fit_count=self._n_pts,
                                        ridge=self.ridge)
            self.density_epoch += 1

    def sample(self, x_prev, history, rng):
        lower, upper = self.box.lower, self.box.upper
        if self.model is None:
            return rng.uniform(lower, upper)
        for _ in range(self.max_rejects):
            x = rng.uniform(lower, upper)
            u = rng.random()
            if u == 0.0 or math.log(u) <= self._log_weight(x):
                return x
        raise RuntimeError("surrogate degenerate")

    def log_density(self, point, x_prev, history):
        if not self.box.contains_closed(point):
            return NEG_INF
        return self._log_weight(point)
