"""Min-norm point of the convex hull of objective gradients.

Frank-Wolfe over the probability simplex, carried out entirely in Gram
space: after the O(t^2 d) precompute of the inner-product matrix every
iteration costs O(t^2).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class SolverInputError(ValueError):
    """Raised for malformed gradient sets or Gram matrices."""


@dataclass(frozen=True)
class SolverResult:
    alpha: np.ndarray
    combined_norm_sq: float
    iterations: int
    stationary: bool

    def to_dict(self) -> dict:
        return {
            "alpha": [float(a) for a in self.alpha],
            "combined_norm_sq": float(self.combined_norm_sq),
            "iterations": int(self.iterations),
            "stationary": bool(self.stationary),
        }


def _as_gradient_matrix(grads: Sequence) -> np.ndarray:
    if len(grads) == 0:
        raise SolverInputError("gradient set is empty")
    lengths = {np.asarray(g).reshape(-1).shape[0] for g in grads}
    if len(lengths) != 1:
        raise SolverInputError(f"gradient vectors have mismatched lengths {sorted(lengths)}")
    g = np.stack([np.asarray(v, dtype=np.float64).reshape(-1) for v in grads])
    if g.shape[1] == 0:
        raise SolverInputError("gradient vectors are empty")
    if not np.all(np.isfinite(g)):
        raise SolverInputError("gradient set contains non-finite entries")
    return g


def gram_matrix(grads: Sequence) -> np.ndarray:
    """Pairwise inner products ``M[i, j] = g_i . g_j``.

    The upper triangle is computed and mirrored so the result is exactly
    symmetric.
    """
    g = _as_gradient_matrix(grads)
    t = g.shape[0]
    m = np.empty((t, t))
    for i in range(t):
        for j in range(i, t):
            m[i, j] = m[j, i] = float(np.dot(g[i], g[j]))
    return m


def _check_gram(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise SolverInputError(f"Gram matrix must be square, got shape {m.shape}")
    if m.shape[0] == 0:
        raise SolverInputError("Gram matrix is empty (t = 0)")
    if not np.all(np.isfinite(m)):
        raise SolverInputError("Gram matrix contains NaN or Inf")
    if not np.array_equal(m, m.T):
        raise SolverInputError("Gram matrix must be symmetric")
    if np.any(np.diag(m) < 0):
        raise SolverInputError("Gram matrix has a negative diagonal entry")
    scale = float(np.abs(m).max())
    if scale > 0 and np.linalg.eigvalsh(m).min() < -1e-8 * scale:
        raise SolverInputError("Gram matrix is not positive semidefinite")
    return m


def line_search_wstar(a: int, alpha: np.ndarray, m: np.ndarray,
                      lower: float = 0.0, upper: float = 1.0) -> float:
    """Exact minimiser over w in [lower, upper] of ||w x1 + (1 - w) x2||^2.

    ``x1`` is gradient ``a`` and ``x2`` the alpha-combination; both are
    only touched through ``m``. Coincident points return ``upper``.
    Away steps call this with a negative interval.
    """
    m_alpha = m @ alpha
    x2x2 = float(alpha @ m_alpha)
    x1x2 = float(m_alpha[a])
    x1x1 = float(m[a, a])
    denom = x1x1 - 2.0 * x1x2 + x2x2
    if denom < 1e-12:
        return float(upper)
    w = (x2x2 - x1x2) / denom
    return float(min(max(w, lower), upper))


def random_simplex(t: int, seed: Optional[int]) -> np.ndarray:
    """Dirichlet(1) draw, i.e. uniform on the simplex."""
    rng = np.random.default_rng(seed)
    return rng.dirichlet(np.ones(t))


def frank_wolfe_solve(
    m,
    max_iter: int = 100,
    conv_tol: float = 1e-6,
    stat_tol: float = 1e-8,
    init: str = "uniform",
    seed: Optional[int] = None,
    away_steps: bool = True,
) -> SolverResult:
    """Frank-Wolfe on min_alpha alpha^T M alpha over the simplex.

    Each iteration moves toward the vertex with the smallest entry of
    ``M alpha`` (lowest index on ties) with the exact two-point line search.
    With ``away_steps`` the iteration may instead move away from the worst
    vertex in the support when that direction is steeper; the same closed
    form is used, clipped so alpha stays nonnegative. Plain Frank-Wolfe
    stalls at O(1/k) when the optimum lies on a face, away steps converge
    linearly there.

    Stops when the step size or the relative change of the objective drops
    below ``conv_tol``.
    """
    m = _check_gram(m)
    if max_iter < 1:
        raise SolverInputError("max_iter must be >= 1")
    t = m.shape[0]
    if init == "uniform":
        alpha = np.full(t, 1.0 / t)
    elif init == "random":
        alpha = random_simplex(t, seed)
    else:
        raise SolverInputError(f"unknown init {init!r}")

    obj = float(alpha @ m @ alpha)
    iterations = 0
    for _ in range(max_iter):
        iterations += 1
        if t == 1:
            break
        m_alpha = m @ alpha
        i_star = int(np.argmin(m_alpha))
        vertex, lower, upper = i_star, 0.0, 1.0
        if away_steps:
            support = np.flatnonzero(alpha > 0.0)
            v = int(support[np.argmax(m_alpha[support])])
            obj_now = float(alpha @ m_alpha)
            # directional slopes of e_i* - alpha versus alpha - e_v
            if alpha[v] < 1.0 and obj_now - m_alpha[i_star] < m_alpha[v] - obj_now:
                vertex, lower, upper = v, -alpha[v] / (1.0 - alpha[v]), 0.0
        w = line_search_wstar(vertex, alpha, m, lower, upper)
        alpha = (1.0 - w) * alpha
        alpha[vertex] += w
        if lower < 0.0 and w == lower:
            alpha[vertex] = 0.0
        new_obj = float(alpha @ m @ alpha)
        delta = abs(obj - new_obj)
        obj = new_obj
        if abs(w) < conv_tol or delta < conv_tol * max(obj, np.finfo(float).tiny):
            break

    alpha = np.clip(alpha, 0.0, None)
    alpha /= alpha.sum()
    obj = max(float(alpha @ m @ alpha), 0.0)
    return SolverResult(alpha=alpha, combined_norm_sq=obj, iterations=iterations,
                        stationary=obj <= stat_tol)


def two_objective_weights(m) -> np.ndarray:
    """Closed-form simplex weights for two objectives (one line search)."""
    m = _check_gram(m)
    if m.shape[0] != 2:
        raise SolverInputError("closed form only applies to two objectives")
    w = line_search_wstar(0, np.array([0.0, 1.0]), m)
    return np.array([w, 1.0 - w])


def combined_direction(grads: Sequence, alpha) -> np.ndarray:
    g = _as_gradient_matrix(grads)
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (g.shape[0],):
        raise SolverInputError(f"alpha has shape {alpha.shape}, expected ({g.shape[0]},)")
    return alpha @ g


def solve_gradients(grads: Sequence, **kwargs) -> SolverResult:
    return frank_wolfe_solve(gram_matrix(grads), **kwargs)


def simplex_grid(t: int, step: float = 0.01) -> np.ndarray:
    """All points of the simplex whose coordinates are multiples of ``step``."""
    n = int(round(1.0 / step))
    if t == 1:
        return np.ones((1, 1))
    pts = []

    def rec(prefix, remaining, k):
        if k == 1:
            pts.append(prefix + [remaining])
            return
        for v in range(remaining + 1):
            rec(prefix + [v], remaining - v, k - 1)

    rec([], n, t)
    return np.asarray(pts, dtype=np.float64) / n
