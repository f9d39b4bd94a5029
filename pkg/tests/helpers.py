"""Shared test utilities: GOF checks, stub kernels, balance-identity sweep."""

from __future__ import annotations

import math

import numpy as np
from scipy import stats

from aimh.core import (History, HistoryEntry, TargetDensity, Box,
                       acceptance_probability)
from aimh.proposals import ProposalKernel


def gof_pvalue(counts: np.ndarray, probs: np.ndarray) -> float:
    """Chi-square goodness-of-fit p-value for observed counts vs cell probs."""
    counts = np.asarray(counts, dtype=float)
    probs = np.asarray(probs, dtype=float)
    if counts.size < probs.size:
        counts = np.concatenate([counts, np.zeros(probs.size - counts.size)])
    elif probs.size < counts.size:
        probs = np.concatenate([probs, np.zeros(counts.size - probs.size)])
    keep = probs > 0
    assert counts[~keep].sum() == 0, "observations in zero-probability cells"
    n = counts.sum()
    expected = probs[keep] * n
    # merge ultra-small expected cells into their neighbors is not needed for
    # the partitions used here (all comfortably above 5)
    chi2 = float(((counts[keep] - expected) ** 2 / expected).sum())
    df = int(keep.sum()) - 1
    return float(stats.chi2.sf(chi2, df))


def assert_gof(counts, probs, significance: float = 1e-3):
    p = gof_pvalue(counts, probs)
    assert p > significance, f"GOF rejected: p={p:.3g}"


def bin_counts(samples: np.ndarray, edges: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(edges, samples, side="right")
    return np.bincount(idx, minlength=len(edges) + 1)


def uniform_target(lo: float = 0.0, hi: float = 1.0) -> TargetDensity:
    box = Box(lo, hi)
    return TargetDensity(lambda x: 0.0, dim=1, support=box,
                         log_norm_const=math.log(hi - lo))


def make_history(states, log_f, iteration0: int = 1, aux=None) -> History:
    h = History()
    for k, (s, lf) in enumerate(zip(states, log_f)):
        a = aux[k] if aux is not None else None
        h.append(HistoryEntry(s, float(lf), iteration0 + k, a))
    return h


class ScriptedRng:
    """Deterministic stand-in for a Generator, feeding scripted uniforms."""

    def __init__(self, uniforms):
        self._values = list(uniforms)

    def random(self):
        return self._values.pop(0)

    def uniform(self, lo=0.0, hi=1.0):
        return lo + (hi - lo) * self.random()

    def standard_normal(self, size=None):
        raise NotImplementedError("scripted rng only supplies uniforms")


class FixedKernel(ProposalKernel):
    """Independent kernel with scripted sample values and a density table."""

    def __init__(self, samples, log_density_map, normalized=False):
        super().__init__()
        self._samples = list(samples)
        self._map = dict(log_density_map)
        self.normalized = normalized

    def sample(self, x_prev, history, rng):
        return self._samples.pop(0)

    def log_density(self, point, x_prev, history):
        return self._map[point]


class LocalStubKernel(ProposalKernel):
    """State-dependent kernel used to exercise the frozen-history branch."""

    independent = False

    def __init__(self, width=0.1):
        super().__init__()
        self.width = width

    def sample(self, x_prev, history, rng):
        return x_prev + self.width * (rng.random() - 0.5)

    def log_density(self, point, x_prev, history):
        if abs(point - x_prev) <= self.width / 2:
            return -math.log(self.width)
        return -math.inf


def balance_identity_max_error(kernel, target, pairs, history) -> float:
    """Max log-space deviation of f(x) q(z) a(z,x) = f(z) q(x) a(x,z).

    Works entirely in logs (the shipped log-ratio path), so the identity is
    checked even where the linear-scale acceptance underflows.
    """
    from aimh.core import log_acceptance_ratio

    worst = 0.0
    for x, z in pairs:
        lfx = target.log_density(x)
        lfz = target.log_density(z)
        if lfx == -math.inf or lfz == -math.inf:
            continue  # zero on both sides
        lqz = kernel.log_density(z, x, history)
        lqx = kernel.log_density(x, z, history)
        log_a_zx = min(0.0, log_acceptance_ratio(lfz, lfx, lqz, lqx))
        log_a_xz = min(0.0, log_acceptance_ratio(lfx, lfz, lqx, lqz))
        lhs = lfx + lqz + log_a_zx
        rhs = lfz + lqx + log_a_xz
        err = abs(lhs - rhs) / max(1.0, abs(lhs), abs(rhs))
        worst = max(worst, err)
    return worst
