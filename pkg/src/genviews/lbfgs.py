"""Batched limited-memory quasi-Newton minimization with backtracking.

Minimizes M independent smooth objectives at once.  Each system keeps its
own curvature history, line-search state, and convergence flag, so a batch
of latent optimizations can share generator forward passes while behaving
exactly like M separate optimizers.  Steps are accepted only under an
Armijo sufficient-decrease test, which makes the objective non-increasing
along the iterates of every system by construction; a trial point with a
non-finite value is simply backtracked past.

``minimize_adam`` is a slower but stubborn fallback for the same objective
contract.  It tracks the best iterate seen, so its result also never
degrades the starting objective.

The objective callable receives ``(x, idx)`` where ``x`` is a (K, n) block
of iterates and ``idx`` the global system indices being evaluated; it must
return per-system values (K,) and gradients (K, n), all float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = ["MinimizeResult", "minimize_lbfgs", "minimize_adam"]

ObjectiveFn = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass
class MinimizeResult:
    x: np.ndarray  # (M, n) final iterates
    fun: np.ndarray  # (M,) objective at x
    initial_fun: np.ndarray  # (M,) objective at x0
    steps: np.ndarray  # (M,) accepted iterations per system
    converged: np.ndarray  # (M,) gradient tolerance reached


def _evaluate(fun: ObjectiveFn, x: np.ndarray, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    f, g = fun(np.ascontiguousarray(x, dtype=np.float64), idx)
    f = np.asarray(f, dtype=np.float64).reshape(len(idx))
    g = np.asarray(g, dtype=np.float64).reshape(len(idx), x.shape[1])
    return f, g


def _direction(
    g: np.ndarray,
    S: np.ndarray,
    Y: np.ndarray,
    RHO: np.ndarray,
    hlen: np.ndarray,
    h0: np.ndarray,
) -> np.ndarray:
    """Two-loop recursion, vectorized over systems with per-system history."""
    hist = S.shape[0]
    q = -g.copy()
    alpha = np.zeros((hist, g.shape[0]))
    for j in range(hist - 1, -1, -1):
        valid = j < hlen
        if not valid.any():
            continue
        a = np.where(valid, RHO[j] * np.einsum("kn,kn->k", S[j], q), 0.0)
        alpha[j] = a
        q -= a[:, None] * Y[j]
    r = q * h0[:, None]
    for j in range(hist):
        valid = j < hlen
        if not valid.any():
            continue
        b = np.where(valid, RHO[j] * np.einsum("kn,kn->k", Y[j], r), 0.0)
        coef = np.where(valid, alpha[j] - b, 0.0)
        r += coef[:, None] * S[j]
    return r


def _push_history(S, Y, RHO, hlen, cols, s, y, rho) -> None:
    hist = S.shape[0]
    for i, c in enumerate(cols):
        slot = hlen[c]
        if slot == hist:
            S[:-1, c] = S[1:, c]
            Y[:-1, c] = Y[1:, c]
            RHO[:-1, c] = RHO[1:, c]
            slot = hist - 1
        else:
            hlen[c] += 1
        S[slot, c] = s[i]
        Y[slot, c] = y[i]
        RHO[slot, c] = rho[i]


def minimize_lbfgs(
    fun: ObjectiveFn,
    x0: np.ndarray,
    *,
    steps: int,
    history: int = 10,
    gtol: float = 1e-10,
    c1: float = 1e-4,
    max_backtracks: int = 30,
    step_shrink: float = 0.5,
) -> MinimizeResult:
    """Run up to ``steps`` quasi-Newton iterations on each of M systems.

    Stops a system early when its gradient infinity norm falls to ``gtol``
    or its line search cannot find sufficient decrease.  ``steps=0`` returns
    the initial point evaluated but untouched.
    """
    x = np.array(x0, dtype=np.float64, copy=True)
    if x.ndim != 2:
        raise ValueError(f"x0 must be (M, n), got shape {x.shape}")
    m_sys, n_dim = x.shape
    all_idx = np.arange(m_sys)
    f, g = _evaluate(fun, x, all_idx)
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
        raise ValueError("objective is non-finite at the initial point")
    f0 = f.copy()

    S = np.zeros((history, m_sys, n_dim))
    Y = np.zeros((history, m_sys, n_dim))
    RHO = np.zeros((history, m_sys))
    hlen = np.zeros(m_sys, dtype=np.int64)
    h0 = np.ones(m_sys)
    steps_used = np.zeros(m_sys, dtype=np.int64)
    first = np.ones(m_sys, dtype=bool)
    active = np.abs(g).max(axis=1) > gtol

    for _ in range(steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        gi = g[idx]
        d = _direction(gi, S[:, idx], Y[:, idx], RHO[:, idx], hlen[idx], h0[idx])
        gtd = np.einsum("kn,kn->k", gi, d)
        bad = gtd >= 0
        if bad.any():
            d[bad] = -gi[bad]
            gtd[bad] = -np.einsum("kn,kn->k", gi[bad], gi[bad])

        t = np.ones(idx.size)
        fresh = first[idx]
        if fresh.any():
            g1 = np.abs(gi[fresh]).sum(axis=1)
            t[fresh] = np.minimum(1.0, 1.0 / np.maximum(g1, 1e-30))

        x_new = x[idx].copy()
        f_new = f[idx].copy()
        g_new = gi.copy()
        stepped = np.zeros(idx.size, dtype=bool)
        searching = np.ones(idx.size, dtype=bool)
        for _bt in range(max_backtracks):
            rows = np.flatnonzero(searching)
            if rows.size == 0:
                break
            trial = x[idx[rows]] + t[rows, None] * d[rows]
            ft, gt = _evaluate(fun, trial, idx[rows])
            ok = (
                np.isfinite(ft)
                & np.all(np.isfinite(gt), axis=1)
                & (ft <= f[idx[rows]] + c1 * t[rows] * gtd[rows])
            )
            acc = rows[ok]
            x_new[acc] = trial[ok]
            f_new[acc] = ft[ok]
            g_new[acc] = gt[ok]
            stepped[acc] = True
            searching[acc] = False
            t[rows[~ok]] *= step_shrink

        if stepped.any():
            rows = np.flatnonzero(stepped)
            s = x_new[rows] - x[idx[rows]]
            yv = g_new[rows] - gi[rows]
            ys = np.einsum("kn,kn->k", s, yv)
            s_norm = np.sqrt(np.einsum("kn,kn->k", s, s))
            y_norm = np.sqrt(np.einsum("kn,kn->k", yv, yv))
            keep = ys > 1e-10 * s_norm * y_norm
            if keep.any():
                cols = idx[rows[keep]]
                _push_history(S, Y, RHO, hlen, cols, s[keep], yv[keep], 1.0 / ys[keep])
                h0[cols] = ys[keep] / np.maximum(np.einsum("kn,kn->k", yv[keep], yv[keep]), 1e-30)
            x[idx[rows]] = x_new[rows]
            f[idx[rows]] = f_new[rows]
            g[idx[rows]] = g_new[rows]
            steps_used[idx[rows]] += 1
            first[idx[rows]] = False

        # Systems that exhausted the line search stall; the rest continue
        # until their gradient is flat.
        g_small = np.abs(g[idx]).max(axis=1) <= gtol
        active[idx] = stepped & ~g_small

    return MinimizeResult(
        x=x,
        fun=f,
        initial_fun=f0,
        steps=steps_used,
        converged=np.abs(g).max(axis=1) <= gtol,
    )


def minimize_adam(
    fun: ObjectiveFn,
    x0: np.ndarray,
    *,
    steps: int,
    lr: float = 0.05,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> MinimizeResult:
    """First-order fallback; returns the best iterate seen per system."""
    x = np.array(x0, dtype=np.float64, copy=True)
    if x.ndim != 2:
        raise ValueError(f"x0 must be (M, n), got shape {x.shape}")
    m_sys = x.shape[0]
    all_idx = np.arange(m_sys)
    f, g = _evaluate(fun, x, all_idx)
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
        raise ValueError("objective is non-finite at the initial point")
    f0 = f.copy()
    best_x = x.copy()
    best_f = f.copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    steps_used = np.zeros(m_sys, dtype=np.int64)
    for step in range(1, steps + 1):
        g_safe = np.where(np.isfinite(g), g, 0.0)
        m = beta1 * m + (1 - beta1) * g_safe
        v = beta2 * v + (1 - beta2) * g_safe * g_safe
        m_hat = m / (1 - beta1**step)
        v_hat = v / (1 - beta2**step)
        x -= lr * m_hat / (np.sqrt(v_hat) + eps)
        f, g = _evaluate(fun, x, all_idx)
        improved = np.isfinite(f) & (f < best_f)
        best_f[improved] = f[improved]
        best_x[improved] = x[improved]
        steps_used += 1
    return MinimizeResult(
        x=best_x,
        fun=best_f,
        initial_fun=f0,
        steps=steps_used,
        converged=np.zeros(m_sys, dtype=bool),
    )
