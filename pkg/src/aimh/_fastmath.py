"""Jitted inner loops for the per-iteration hot path.

Plain nested loops over small arrays; numba removes the per-call numpy
overhead that dominates chain stepping.  Falls back to the same (slow) pure
Python code when numba is unavailable.
"""

from __future__ import annotations

import math

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def deco(fn):
            return fn
        return deco


@njit(cache=True)
def diag_mixture_logpdf(x, means, inv_var, log_wnorm, extra0):
    """log sum_i exp(log_wnorm[i] + extra0*(i==0) - 0.5*quad_i(x)).

    ``log_wnorm`` carries log weight plus the component's log normalization;
    ``extra0`` is an additive log factor on component 0 (the suppressed base
    term; pass 0.0 for plain mixtures).
    """
    k, d = means.shape
    vals = np.empty(k)
    best = -np.inf
    for i in range(k):
        q = 0.0
        for j in range(d):
            t = x[j] - means[i, j]
            q += t * t * inv_var[i, j]
        v = log_wnorm[i] - 0.5 * q
        if i == 0:
            v += extra0
        vals[i] = v
        if v > best:
            best = v
    if best == -np.inf:
        return -np.inf
    s = 0.0
    for i in range(k):
        s += math.exp(vals[i] - best)
    return best + math.log(s)


@njit(cache=True)
def first_suppression(z, xi, n, eps2_sq, sup_values, log_c):
    """Suppressed value of the first of the n leading anti-modes within
    sqrt(eps2_sq) of z, or log_c when none is."""
    d = xi.shape[1]
    for i in range(n):
        q = 0.0
        for j in range(d):
            t = z[j] - xi[i, j]
            q += t * t
        if q < eps2_sq:
            return sup_values[i]
    return log_c


@njit(cache=True)
def modelist_scan(states, scores, n, y, score, spacing):
    """Single pass of the capped-list update rule.

    Scans entries in score order: returns (-1, -1) when a higher-or-equal
    scored entry within ``spacing`` of y aborts the insertion; otherwise
    (insert_pos, removal_index) where removal_index is the first entry at or
    after insert_pos within ``spacing/2`` of y (-1 when none).
    """
    eps_sq = spacing * spacing
    d = states.shape[1]
    j = n
    for i in range(n):
        if score > scores[i]:
            j = i
            break
        q = 0.0
        for c in range(d):
            t = y[c] - states[i, c]
            q += t * t
        if q < eps_sq:
            return -1, -1
    removal = -1
    r_sq = 0.25 * eps_sq
    for i in range(j, n):
        q = 0.0
        for c in range(d):
            t = y[c] - states[i, c]
            q += t * t
        if q < r_sq:
            removal = i
            break
    return j, removal
