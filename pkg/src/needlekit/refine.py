"""Curve fitting and the refinement steps applied after clustering:
loss, least squares, expectation maximisation, RANSAC-validated merging,
iterative needle removal and polynomial degree selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import networkx as nx
import numpy as np

from .core import ClusterSet, NeedleCurve, PointCloud
from .errors import InvalidInput

log = logging.getLogger(__name__)

DEGREES = (1, 2, 3)


@dataclass(frozen=True)
class MergeParams:
    inplane_window_vox: float = 30.0
    ransac_outlier_vox: float = 5.0
    ransac_iters: int = 100
    ransac_degree: int = 2

    def __post_init__(self):
        if min(self.inplane_window_vox, self.ransac_outlier_vox) <= 0 \
                or self.ransac_iters < 1 or self.ransac_degree < 1:
            raise InvalidInput("merge parameters must be positive")


@dataclass(frozen=True)
class EmParams:
    max_iters: int = 100
    loss_tol_mm: float = 1e-6

    def __post_init__(self):
        if self.max_iters < 1 or self.loss_tol_mm < 0:
            raise InvalidInput("EM needs max_iters >= 1 and loss_tol_mm >= 0")


def _mm(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.mm
    return np.asarray(cloud, dtype=float).reshape(-1, 3)


def curve_distances(points_mm, curves) -> np.ndarray:
    """``(n_points, n_curves)`` point-to-needle distances.

    Within a curve's axial range the distance is measured in-plane to the
    curve at the point's own z; outside it, to the nearer endpoint in 3D.
    """
    p = np.asarray(points_mm, dtype=float).reshape(-1, 3)
    out = np.empty((len(p), len(curves)))
    for c, curve in enumerate(curves):
        z = p[:, 2]
        x, y = curve.xy(z)
        inplane = np.hypot(p[:, 0] - x, p[:, 1] - y)
        ends = np.minimum(np.linalg.norm(p - curve.bottom, axis=1),
                          np.linalg.norm(p - curve.tip, axis=1))
        inside = (z >= curve.z_min_mm) & (z <= curve.z_max_mm)
        out[:, c] = np.where(inside, inplane, ends)
    return out


def loss(cloud, needles) -> float:
    """Mean distance (mm) from every point to its nearest needle."""
    needles = list(needles)
    if not needles:
        raise InvalidInput("loss needs at least one needle")
    p = _mm(cloud)
    if not len(p):
        return 0.0
    return float(curve_distances(p, needles).min(1).mean())


def _polyfit_scaled(z, values, degree):
    """Least squares in a centred/scaled z basis, returned as raw ascending
    power coefficients (one column per value column)."""
    lo, hi = float(z.min()), float(z.max())
    mid, half = (lo + hi) / 2.0, (hi - lo) / 2.0
    t = (z - mid) / half
    V = np.polynomial.polynomial.polyvander(t, degree)
    coef, *_ = np.linalg.lstsq(V, values, rcond=None)
    raw = []
    for col in np.atleast_2d(coef.T):
        c = np.polynomial.Polynomial(col, domain=[lo, hi], window=[-1, 1]).convert().coef
        raw.append(np.pad(c, (0, degree + 1 - len(c))))
    return raw


def fit_poly_lsq(points_mm, degree: int) -> NeedleCurve:
    """Fit ``x(z)`` and ``y(z)`` independently by least squares."""
    p = np.asarray(points_mm, dtype=float).reshape(-1, 3)
    if degree not in DEGREES:
        raise InvalidInput(f"degree must be one of {DEGREES}")
    n_z = len(np.unique(p[:, 2]))
    if n_z < degree + 1:
        raise InvalidInput(f"degree {degree} fit needs {degree + 1} distinct z values, got {n_z}")
    cx, cy = _polyfit_scaled(p[:, 2], p[:, :2], degree)
    return NeedleCurve(degree, tuple(cx), tuple(cy), float(p[:, 2].min()), float(p[:, 2].max()))


def fit_feasible(points_mm, degree: int) -> NeedleCurve | None:
    """``fit_poly_lsq`` at the largest degree <= ``degree`` the points allow;
    ``None`` for points on a single slice."""
    p = np.asarray(points_mm, dtype=float).reshape(-1, 3)
    n_z = len(np.unique(p[:, 2]))
    if n_z < 2:
        return None
    return fit_poly_lsq(p, min(degree, n_z - 1))


@dataclass(frozen=True)
class EmResult:
    curves: list
    loss: float
    trace: list = field(default_factory=list)
    iterations: int = 0
    diagnostic: str | None = None


def em_optimize(cloud, init, degree: int, params: EmParams = EmParams()) -> EmResult:
    """Alternate nearest-curve assignment and per-curve refitting.

    A refit that would raise the loss is rejected and ends the loop, so
    ``trace`` never increases. Curves left without points are dropped.
    """
    curves = list(init)
    if not curves:
        raise InvalidInput("EM needs at least one initial curve")
    p = _mm(cloud)
    if not len(p):
        return EmResult([], float("nan"), [], 0, "no points to fit")
    D = curve_distances(p, curves)
    current = float(D.min(1).mean())
    trace = [current]
    it = 0
    for it in range(1, params.max_iters + 1):
        assign = D.argmin(1)
        occupied = [c for c in range(len(curves)) if np.any(assign == c)]
        refit = []
        for c in occupied:
            pts = p[assign == c]
            if len(np.unique(pts[:, 2])) >= degree + 1:
                refit.append(fit_poly_lsq(pts, degree))
            else:
                refit.append(curves[c])
        D_new = curve_distances(p, refit)
        new = float(D_new.min(1).mean())
        if new > current:
            curves = [curves[c] for c in occupied]
            break
        curves, D = refit, D_new
        decrease = current - new
        current = new
        trace.append(current)
        if decrease < params.loss_tol_mm:
            break
    return EmResult(curves, current, trace, it)


# --------------------------------------------------------------------------
# merging
# --------------------------------------------------------------------------

def _end_centroids(vox: np.ndarray):
    k = vox[:, 2]
    lo, hi = k.min(), k.max()
    return lo, hi, vox[k == lo].mean(0), vox[k == hi].mean(0)


def find_merge_candidates(clusters: ClusterSet, params: MergeParams = MergeParams()):
    """Ordered pairs ``(a, b)`` where cluster ``a`` ends below the start of
    ``b`` and their facing end centroids are within the in-plane window
    along each of the two in-plane axes."""
    vox = clusters.cloud.vox
    ends = [_end_centroids(vox[g]) for g in clusters.groups()]
    out = []
    for a, (_, hi_a, _, top_a) in enumerate(ends):
        for b, (lo_b, _, bot_b, _) in enumerate(ends):
            if a == b or not hi_a < lo_b:
                continue
            d = np.abs(top_a[:2] - bot_b[:2])
            if d[0] <= params.inplane_window_vox and d[1] <= params.inplane_window_vox:
                out.append((a, b))
    return out


def _fit_xy(z, xy, degree):
    coef = np.polynomial.polynomial.polyfit(z, xy, degree)
    return coef


def _residuals(coef, pts):
    pred = np.polynomial.polynomial.polyval(pts[:, 2], coef)
    return np.hypot(pts[:, 0] - pred[0], pts[:, 1] - pred[1])


def ransac_pair_check(points_a, points_b, params: MergeParams = MergeParams(), seed=0) -> bool:
    """Whether one ``x(z), y(z)`` polynomial explains both point sets with no
    point further than the outlier threshold (voxel space, in-plane)."""
    union = np.concatenate([np.asarray(points_a, float).reshape(-1, 3),
                            np.asarray(points_b, float).reshape(-1, 3)])
    union = np.unique(union, axis=0)
    union = union[np.lexsort(union.T)]
    deg = params.ransac_degree
    zs, inverse = np.unique(union[:, 2], return_inverse=True)
    if len(zs) < deg + 1:
        log.debug("ransac: %d distinct slices, need %d; rejecting", len(zs), deg + 1)
        return False
    by_slice = [np.flatnonzero(inverse == s) for s in range(len(zs))]
    rng = np.random.default_rng(seed)
    best, best_out = None, None
    for _ in range(params.ransac_iters):
        chosen = rng.choice(len(zs), deg + 1, replace=False)
        sample = union[[by_slice[s][rng.integers(len(by_slice[s]))] for s in chosen]]
        coef = _fit_xy(sample[:, 2], sample[:, :2], deg)
        n_out = int(np.count_nonzero(_residuals(coef, union) > params.ransac_outlier_vox))
        if best_out is None or n_out < best_out:
            best, best_out = coef, n_out
    inliers = union[_residuals(best, union) <= params.ransac_outlier_vox]
    if len(np.unique(inliers[:, 2])) >= deg + 1:
        best = _fit_xy(inliers[:, 2], inliers[:, :2], deg)
    return not np.any(_residuals(best, union) > params.ransac_outlier_vox)


def merge_graph(clusters: ClusterSet, params: MergeParams = MergeParams(), seed: int = 0) -> nx.Graph:
    vox = clusters.cloud.vox
    groups = clusters.groups()
    graph = nx.Graph()
    graph.add_nodes_from(range(len(groups)))
    for a, b in find_merge_candidates(clusters, params):
        lo, hi = min(a, b), max(a, b)
        if ransac_pair_check(vox[groups[a]], vox[groups[b]], params, seed=[seed, lo, hi]):
            graph.add_edge(a, b)
    return graph


def apply_merges(clusters: ClusterSet, params: MergeParams = MergeParams(), seed: int = 0) -> ClusterSet:
    """Merge clusters that form cliques of accepted pairs, largest first
    (ties: the clique holding the smallest cluster id)."""
    graph = merge_graph(clusters, params, seed)
    target = np.arange(clusters.n_clusters)
    remaining = set(graph.nodes)
    while True:
        cliques = [sorted(c) for c in nx.find_cliques(graph.subgraph(remaining)) if len(c) > 1]
        if not cliques:
            break
        best = min(cliques, key=lambda c: (-len(c), c))
        target[best] = best[0]
        remaining.difference_update(best)
    labels = clusters.labels.copy()
    pos = labels >= 0
    labels[pos] = target[labels[pos]]
    # renumber by representative (smallest original id)
    reps = np.unique(target)
    labels[pos] = np.searchsorted(reps, labels[pos])
    return ClusterSet(clusters.cloud, labels)


# --------------------------------------------------------------------------
# removal and degree selection
# --------------------------------------------------------------------------

def removal_keep(cloud, needles, target: int) -> list[int]:
    """Indices of the needles kept by greedy removal down to ``target``."""
    if target < 1:
        raise InvalidInput("target needle count must be >= 1")
    keep = list(range(len(needles)))
    if len(keep) <= target:
        return keep
    D = curve_distances(_mm(cloud), needles)
    while len(keep) > target:
        losses = []
        for drop in keep:
            cols = [c for c in keep if c != drop]
            losses.append(D[:, cols].min(1).mean() if len(D) else 0.0)
        removed = keep[int(np.argmin(losses))]
        log.debug("removal: dropping needle %d (loss %.4f)", removed, min(losses))
        keep.remove(removed)
    return keep


def iterative_removal(cloud, needles, target: int) -> list:
    """Drop one needle at a time, always the one whose removal raises the
    loss least, until ``target`` needles remain."""
    needles = list(needles)
    return [needles[i] for i in removal_keep(cloud, needles, target)]


@dataclass(frozen=True)
class DegreeSelection:
    curves: list
    loss: float
    degree: int
    losses: dict


def initial_curves(clusters: ClusterSet, degree: int):
    """Least-squares curve per cluster at the largest feasible degree.
    Returns ``(curves, cluster_ids)``; single-slice clusters are skipped."""
    mm = clusters.cloud.mm
    curves, ids = [], []
    for c, g in enumerate(clusters.groups()):
        curve = fit_feasible(mm[g], degree)
        if curve is not None:
            curves.append(curve)
            ids.append(c)
    return curves, ids


def select_degree(cloud, clusters: ClusterSet, em: EmParams = EmParams()) -> DegreeSelection:
    """Run EM at degrees 1, 2 and 3 and keep the lowest final loss
    (lower degree wins ties)."""
    if clusters.n_clusters == 0:
        raise InvalidInput("degree selection needs at least one cluster")
    best = None
    losses = {}
    for d in DEGREES:
        init, _ = initial_curves(clusters, d)
        if not init:
            raise InvalidInput("no cluster spans two slices")
        res = em_optimize(cloud, init, d, em)
        losses[d] = res.loss
        if best is None or res.loss < best.loss:
            best = DegreeSelection(res.curves, res.loss, d, losses)
    return DegreeSelection(best.curves, best.loss, best.degree, losses)
