"""Independent brute-force references used by the tests."""

import itertools

import numpy as np
from scipy.optimize import linprog


def dense_loss(points, curves, n=10000):
    """Point-to-needle loss from a dense discretisation of each curve."""
    p = np.asarray(points, float)
    best = np.full(len(p), np.inf)
    for c in curves:
        zs = np.linspace(c.z_min_mm, c.z_max_mm, n)
        xs, ys = c.xy(zs)
        inside = (p[:, 2] >= zs[0]) & (p[:, 2] <= zs[-1])
        x = np.interp(p[:, 2], zs, xs)
        y = np.interp(p[:, 2], zs, ys)
        d_in = np.hypot(p[:, 0] - x, p[:, 1] - y)
        ends = np.array([[xs[0], ys[0], zs[0]], [xs[-1], ys[-1], zs[-1]]])
        d_out = np.linalg.norm(p[:, None, :] - ends[None], axis=2).min(1)
        best = np.minimum(best, np.where(inside, d_in, d_out))
    return float(best.mean())


def brute_removal_step(points, curves, dist):
    """Index whose removal yields the smallest loss (lowest index on ties)."""
    losses = []
    for drop in range(len(curves)):
        rest = [c for i, c in enumerate(curves) if i != drop]
        losses.append(dist(points, rest))
    return int(np.argmin(losses)), losses


def brute_assignment(C):
    """Minimum total cost over all one-to-one assignments of a cost matrix."""
    n, m = C.shape
    best = np.inf
    if n <= m:
        for perm in itertools.permutations(range(m), n):
            best = min(best, sum(C[i, j] for i, j in enumerate(perm)))
    else:
        for perm in itertools.permutations(range(n), m):
            best = min(best, sum(C[i, j] for j, i in enumerate(perm)))
    return float(best) if n and m else 0.0


def minimax_residual(points, degree):
    """Smallest achievable max per-axis residual of x(z), y(z) polynomials
    (Chebyshev fit by linear programming)."""
    p = np.asarray(points, float)
    V = np.vander(p[:, 2], degree + 1)
    n = len(p)
    worst = 0.0
    for col in (0, 1):
        y = p[:, col]
        A = np.block([[V, -np.ones((n, 1))], [-V, -np.ones((n, 1))]])
        res = linprog(np.r_[np.zeros(degree + 1), 1.0], A_ub=A, b_ub=np.r_[y, -y],
                      bounds=[(None, None)] * (degree + 1) + [(0, None)])
        worst = max(worst, res.fun)
    return worst
