"""Derivative-free simplex minimisation (Nelder-Mead).

Hand-rolled so the stopping rule can be relative on the objective value
(spread of the simplex below ``rel_ftol * (1 + |best|)``) and the iteration
budget can scale with the dimension. Uses the dimension-adaptive expansion
and contraction coefficients, which behave better above ~10 parameters.
The best-ever vertex is never lost, so the returned value is always at or
below the starting point's objective.
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

__all__ = ["SimplexResult", "minimize_simplex"]


class SimplexResult(NamedTuple):
    x: np.ndarray
    fun: float
    nfev: int
    iterations: int
    converged: bool


def minimize_simplex(
    fn: Callable[[np.ndarray], float],
    x0,
    rel_ftol: float = 1e-6,
    max_iter: int | None = None,
    step: float = 0.25,
    max_nfev: int | None = None,
) -> SimplexResult:
    """Minimise ``fn`` from ``x0``.

    Args:
        fn: Objective; may return +inf for rejected points.
        x0: Starting point (1-d). A zero-length point returns immediately
            with a single evaluation.
        rel_ftol: Convergence threshold on the simplex f-spread relative to
            the best value.
        max_iter: Iteration cap (default 200 * dim).
        step: Initial simplex displacement per coordinate.
        max_nfev: Optional hard budget on objective evaluations (checked at
            iteration boundaries, so an iteration in progress may finish);
            useful when each evaluation is expensive and cost must be
            predictable regardless of how often the simplex shrinks.
    """
    x0 = np.asarray(x0, dtype=np.float64).ravel()
    dim = x0.size
    if dim == 0:
        f0 = float(fn(x0))
        return SimplexResult(x=x0, fun=f0, nfev=1, iterations=0, converged=True)
    if max_iter is None:
        max_iter = 200 * dim
    if max_nfev is None:
        max_nfev = np.iinfo(np.int64).max

    alpha = 1.0
    beta = 1.0 + 2.0 / dim
    gamma = 0.75 - 1.0 / (2.0 * dim)
    delta = 1.0 - 1.0 / dim

    verts = np.empty((dim + 1, dim), dtype=np.float64)
    verts[0] = x0
    for k in range(dim):
        verts[k + 1] = x0
        verts[k + 1, k] += step if x0[k] == 0.0 else step * max(1.0, abs(x0[k]))
    fvals = np.array([float(fn(v)) for v in verts])
    nfev = dim + 1

    iterations = 0
    converged = False
    while iterations < max_iter and nfev < max_nfev:
        order = np.argsort(fvals, kind="stable")
        verts = verts[order]
        fvals = fvals[order]
        spread = fvals[-1] - fvals[0]
        if np.isfinite(spread) and spread <= rel_ftol * (1.0 + abs(fvals[0])):
            converged = True
            break
        iterations += 1

        centroid = verts[:-1].mean(axis=0)
        xr = centroid + alpha * (centroid - verts[-1])
        fr = float(fn(xr))
        nfev += 1
        if fr < fvals[0]:
            xe = centroid + beta * (xr - centroid)
            fe = float(fn(xe))
            nfev += 1
            if fe < fr:
                verts[-1], fvals[-1] = xe, fe
            else:
                verts[-1], fvals[-1] = xr, fr
        elif fr < fvals[-2]:
            verts[-1], fvals[-1] = xr, fr
        else:
            if fr < fvals[-1]:
                xc = centroid + gamma * (xr - centroid)
            else:
                xc = centroid - gamma * (centroid - verts[-1])
            fc = float(fn(xc))
            nfev += 1
            if fc < min(fr, fvals[-1]):
                verts[-1], fvals[-1] = xc, fc
            else:
                # shrink toward the best vertex
                for k in range(1, dim + 1):
                    verts[k] = verts[0] + delta * (verts[k] - verts[0])
                    fvals[k] = float(fn(verts[k]))
                nfev += dim

    best = int(np.argmin(fvals))
    return SimplexResult(
        x=verts[best].copy(),
        fun=float(fvals[best]),
        nfev=nfev,
        iterations=iterations,
        converged=converged,
    )
