"""Clustering primitives: spectral clustering, HDBSCAN, slice propagation
and axial endpoint detection."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .core import ClusterSet, PointCloud
from .errors import InvalidInput

log = logging.getLogger(__name__)

ENDPOINT_KERNELS = ((3, 5, 5), (3, 7, 7))


# --------------------------------------------------------------------------
# spectral clustering
# --------------------------------------------------------------------------

def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [X[rng.integers(len(X))]]
    d2 = ((X - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(len(X)))
        else:
            idx = int(rng.choice(len(X), p=d2 / total))
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(1))
    return np.array(centers)


def _lloyd(X: np.ndarray, centers: np.ndarray, max_iter: int = 300):
    k = len(centers)
    labels = None
    for _ in range(max_iter):
        d2 = cdist(X, centers, "sqeuclidean")
        new = d2.argmin(1)
        # keep every cluster populated: steal the worst-fitting point
        for c in range(k):
            if not np.any(new == c):
                own = d2[np.arange(len(X)), new]
                counts = np.bincount(new, minlength=k)
                own[counts[new] <= 1] = -1.0
                new[int(own.argmax())] = c
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centers = np.array([X[labels == c].mean(0) for c in range(k)])
    inertia = float(((X - centers[labels]) ** 2).sum())
    return labels, inertia


def kmeans(X, k: int, seed: int = 0, n_restarts: int = 10) -> np.ndarray:
    """Lloyd's k-means with k-means++ seeding; the restart with the lowest
    inertia wins (earliest restart on ties)."""
    X = np.asarray(X, dtype=float)
    best, best_inertia = None, np.inf
    for r in range(n_restarts):
        rng = np.random.default_rng([seed, r])
        labels, inertia = _lloyd(X, _kmeans_pp(X, k, rng))
        if inertia < best_inertia:
            best, best_inertia = labels, inertia
    return best


def spectral_cluster(points_2d, k: int, seed: int = 0, n_restarts: int = 10) -> np.ndarray:
    """Normalised spectral clustering of in-plane points into ``k`` groups.

    Gaussian affinity, symmetric normalised Laplacian, row-normalised
    embedding of the ``k`` smallest eigenvectors, k-means. The affinity
    width is the median distance from a point to its ``ceil(n / k)``-th
    nearest neighbour, i.e. the scale of an average-sized cluster.
    """
    pts = np.asarray(points_2d, dtype=float)
    pts = pts.reshape(len(pts), -1)
    n = len(pts)
    if k < 1:
        raise InvalidInput("k must be >= 1")
    if n < k:
        raise InvalidInput(f"cannot form {k} clusters from {n} points")
    if k == 1:
        return np.zeros(n, dtype=np.int64)
    dist = cdist(pts, pts)
    m = min(n - 1, -(-n // k))
    sigma = float(np.median(np.sort(dist, axis=1)[:, m]))
    if sigma <= 0:
        sigma = 1.0
    W = np.exp(-(dist ** 2) / (2.0 * sigma ** 2))
    np.fill_diagonal(W, 0.0)
    deg = W.sum(1)
    dinv = 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0))
    L = np.eye(n) - dinv[:, None] * W * dinv[None, :]
    _, vecs = np.linalg.eigh(L)
    U = vecs[:, :k]
    norms = np.linalg.norm(U, axis=1, keepdims=True)
    U = U / np.where(norms > 0, norms, 1.0)
    labels = kmeans(U, k, seed=seed, n_restarts=n_restarts)
    # number clusters by first appearance for stable output
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    remap = np.empty(k, dtype=np.int64)
    remap[order] = np.arange(k)
    return remap[labels]


# --------------------------------------------------------------------------
# HDBSCAN
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class HdbscanParams:
    min_samples: int = 5
    min_cluster_size: int = 15

    def __post_init__(self):
        if self.min_samples < 1 or self.min_cluster_size < 1:
            raise InvalidInput("HDBSCAN parameters must be >= 1")


@numba.njit(cache=True)
def _prim_mst(pts, core):
    # dense Prim over mutual-reachability distances; first index wins ties
    n = pts.shape[0]
    in_tree = np.zeros(n, np.bool_)
    best = np.full(n, np.inf)
    src = np.zeros(n, np.int64)
    ea = np.empty(n - 1, np.int64)
    eb = np.empty(n - 1, np.int64)
    ew = np.empty(n - 1)
    cur = 0
    in_tree[0] = True
    for s in range(n - 1):
        bi = -1
        bv = np.inf
        for j in range(n):
            if in_tree[j]:
                continue
            d = 0.0
            for c in range(pts.shape[1]):
                t = pts[j, c] - pts[cur, c]
                d += t * t
            d = np.sqrt(d)
            if core[j] > d:
                d = core[j]
            if core[cur] > d:
                d = core[cur]
            if d < best[j]:
                best[j] = d
                src[j] = cur
            if bi < 0 or best[j] < bv:
                bv = best[j]
                bi = j
        ea[s] = src[bi]
        eb[s] = bi
        ew[s] = bv
        in_tree[bi] = True
        cur = bi
    return ea, eb, ew


def _single_linkage(n, a, b, w):
    """Union-find over sorted MST edges -> (left, right, dist, size) rows;
    merge ``r`` creates node ``n + r``."""
    parent = np.arange(2 * n - 1)
    size = np.ones(2 * n - 1, dtype=np.int64)

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    rows = []
    for r, (u, v, d) in enumerate(zip(a, b, w)):
        ru, rv = find(u), find(v)
        node = n + r
        parent[ru] = parent[rv] = node
        size[node] = size[ru] + size[rv]
        rows.append((ru, rv, d))
    return rows, size


def _condense(n, rows, size, min_cluster_size):
    """Condensed cluster tree as (parent, child, lambda, child_size) rows."""
    root = 2 * n - 2

    def leaves(node):
        out, stack = [], [node]
        while stack:
            x = stack.pop()
            if x < n:
                out.append(x)
            else:
                left, right, _ = rows[x - n]
                stack.extend((right, left))
        return out

    relabel = {root: n}
    next_label = n + 1
    tree = []
    stack = [root]
    while stack:
        node = stack.pop()
        left, right, d = rows[node - n]
        lam = 1.0 / d if d > 0 else 1e12
        parent = relabel[node]
        big_l = size[left] >= min_cluster_size
        big_r = size[right] >= min_cluster_size
        if big_l and big_r:
            for child in (left, right):
                relabel[child] = next_label
                tree.append((parent, next_label, lam, int(size[child])))
                next_label += 1
        for child, big in ((left, big_l), (right, big_r)):
            if big and not (big_l and big_r):
                relabel[child] = parent
            if not big:
                for p in leaves(child):
                    tree.append((parent, p, lam, 1))
        for child, big in ((right, big_r), (left, big_l)):
            if big and child >= n:
                stack.append(child)
            elif big:
                # a singleton "cluster" only arises with min_cluster_size <= 1
                tree.append((relabel[child], child, lam, 1))
    return tree


def _select_eom(n, tree):
    """Excess-of-mass selection; the root is eligible (single cluster allowed).
    Returns the set of selected condensed cluster ids."""
    birth = {n: 0.0}
    children = {n: []}
    for parent, child, lam, _ in tree:
        if child >= n:
            birth[child] = lam
            children[child] = []
            children[parent].append(child)
    stability = dict.fromkeys(birth, 0.0)
    for parent, child, lam, csize in tree:
        stability[parent] += (lam - birth[parent]) * csize
    selected = {}
    for c in sorted(birth, reverse=True):
        sub = sum(stability[ch] for ch in children[c])
        if children[c] and sub > stability[c]:
            selected[c] = False
            stability[c] = sub
        else:
            selected[c] = True
            stack = list(children[c])
            while stack:
                x = stack.pop()
                selected[x] = False
                stack.extend(children[x])
    return {c for c, s in selected.items() if s}, children


def hdbscan(points, params: HdbscanParams = HdbscanParams()) -> np.ndarray:
    """HDBSCAN labels (``-1`` = noise) for points in voxel space.

    Clusters are numbered by their first member in ``(z, y, x)`` order, so
    labels do not depend on input order.
    """
    pts_in = np.asarray(points, dtype=float)
    pts_in = pts_in.reshape(len(pts_in), -1)
    n = len(pts_in)
    if n == 0:
        raise InvalidInput("hdbscan needs at least one point")
    labels_out = np.full(n, -1, dtype=np.int64)
    if n < params.min_cluster_size or n < 2:
        return labels_out
    order = np.lexsort(pts_in.T)
    pts = np.ascontiguousarray(pts_in[order])

    k = min(params.min_samples, n)
    if k > 1:
        core = cKDTree(pts).query(pts, k=k)[0][:, -1]
    else:
        core = np.zeros(n)
    a, b, w = _prim_mst(pts, np.ascontiguousarray(core, dtype=float))
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    e = np.lexsort((hi, lo, w))
    rows, size = _single_linkage(n, lo[e], hi[e], w[e])
    tree = _condense(n, rows, size, params.min_cluster_size)
    selected, children = _select_eom(n, tree)

    # resolve each condensed cluster to its selected ancestor (or none)
    owner = {n: n if n in selected else -1}
    stack = [n]
    while stack:
        c = stack.pop()
        for ch in children[c]:
            owner[ch] = owner[c] if owner[c] >= 0 else (ch if ch in selected else -1)
            stack.append(ch)
    labels = np.full(n, -1, dtype=np.int64)
    for parent, child, _, _ in tree:
        if child < n:
            labels[child] = owner[parent]
    labels_out[order] = _number_by_first(labels)
    return labels_out


# --------------------------------------------------------------------------
# slice propagation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SeedRef:
    """A reference point (voxel space) that becomes active at ``slice``."""

    point: tuple[float, float, float]
    slice: int


@dataclass(frozen=True)
class Propagation:
    clusters: ClusterSet
    trail: np.ndarray
    halted_at: int | None

    @property
    def trail_count(self) -> int:
        return len(self.trail)

    @property
    def assigned_count(self) -> int:
        return int(np.count_nonzero(self.clusters.labels >= 0))


def propagate_slices(cloud: PointCloud, seeds, direction: str = "up",
                     converge_dist_vox: float = 1.5,
                     assign_radius_vox: float = np.inf) -> Propagation:
    """Trace clusters slice by slice from seed references.

    On every slice each point joins its nearest active reference if that is
    within ``assign_radius_vox``. References that collected points move to
    the centroid of those points; the others keep their last position.
    Tracing stops, discarding the current slice, as soon as a centroid of
    the slice comes within ``converge_dist_vox`` of another centroid or of
    a reference that found no points on it.
    """
    if direction not in ("up", "down"):
        raise InvalidInput("direction must be 'up' or 'down'")
    seeds = list(seeds)
    n = len(cloud)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return Propagation(ClusterSet(cloud, labels), np.empty((0, 3)), None)
    if not seeds:
        raise InvalidInput("propagation needs at least one seed reference")

    vox = cloud.vox
    ks = cloud.slices
    seed_slices = np.array([s.slice for s in seeds])
    lo = int(min(ks.min(), seed_slices.min()))
    hi = int(max(ks.max(), seed_slices.max()))
    order = range(lo, hi + 1) if direction == "up" else range(hi, lo - 1, -1)

    # cloud voxels are sorted by slice
    starts = np.searchsorted(ks, np.arange(lo, hi + 2))
    positions: dict[int, np.ndarray] = {}
    trail = []
    halted_at = None
    for s in order:
        for r in np.flatnonzero(seed_slices == s):
            positions[int(r)] = np.asarray(seeds[r].point, dtype=float)
        if not positions:
            continue
        idx = np.arange(starts[s - lo], starts[s - lo + 1])
        if not len(idx):
            continue
        ref_ids = sorted(positions)
        R = np.array([positions[r] for r in ref_ids])
        d = cdist(vox[idx], R)
        near = d.argmin(1)
        ok = d[np.arange(len(idx)), near] <= assign_radius_vox
        centroids = {}
        for col in np.unique(near[ok]):
            centroids[ref_ids[col]] = vox[idx[ok & (near == col)]].mean(0)
        # fresh centroids against each other and against references that
        # lost their points on this slice (absorbed by a neighbour);
        # compared in-plane since those references sit one slice back
        fresh = sorted(centroids)
        lost = [r for r in ref_ids if r not in centroids and abs(positions[r][2] - s) <= 1]
        if fresh and len(fresh) + len(lost) > 1:
            C = np.array([centroids[r][:2] for r in fresh])
            P = np.array([centroids[r][:2] for r in fresh] + [positions[r][:2] for r in lost])
            dc = cdist(C, P)
            dc[np.arange(len(fresh)), np.arange(len(fresh))] = np.inf
            if dc.min() <= converge_dist_vox:
                halted_at = s
                break
        labels[idx[ok]] = np.array(ref_ids)[near[ok]]
        for r in sorted(centroids):
            positions[r] = centroids[r]
            trail.append(centroids[r])
    clusters = ClusterSet.relabeled(cloud, _rank_by_seed(labels))
    return Propagation(clusters, np.array(trail).reshape(-1, 3), halted_at)


def _number_by_first(labels: np.ndarray) -> np.ndarray:
    out = np.full(len(labels), -1, dtype=np.int64)
    pos = labels >= 0
    if pos.any():
        uniq, first = np.unique(labels[pos], return_index=True)
        rank = np.empty(len(uniq), dtype=np.int64)
        rank[np.argsort(first, kind="stable")] = np.arange(len(uniq))
        out[pos] = rank[np.searchsorted(uniq, labels[pos])]
    return out


def _rank_by_seed(labels: np.ndarray) -> np.ndarray:
    # seed order decides cluster numbering
    out = np.full(len(labels), -1, dtype=np.int64)
    used = np.unique(labels[labels >= 0])
    out[labels >= 0] = np.searchsorted(used, labels[labels >= 0])
    return out


# --------------------------------------------------------------------------
# endpoint detection
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EndpointSet:
    """Lowest and highest needle points in voxel space, sorted by (z, y, x)."""

    lowest: np.ndarray
    highest: np.ndarray


def _cluster_medians(cands: np.ndarray, radius: float) -> np.ndarray:
    """Group candidates by transitive closure of ``distance <= radius`` and
    reduce each group to its coordinate-wise median; groups whose medians
    end up within ``radius`` are merged and reduced again."""
    if not len(cands):
        return np.empty((0, 3))
    group = np.arange(len(cands))
    reps = cands
    while True:
        pairs = cKDTree(reps).query_pairs(radius + 1e-9, output_type="ndarray")
        m = len(reps)
        graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(m, m))
        n_comp, comp = connected_components(graph, directed=False)
        group = comp[group]
        reps = np.array([np.median(cands[group == c], axis=0) for c in range(n_comp)])
        if n_comp == m:
            return reps
        # medians can drift together; repeat until they are separated


def _sorted_zyx(p: np.ndarray) -> np.ndarray:
    if not len(p):
        return p.reshape(0, 3)
    return p[np.lexsort((p[:, 0], p[:, 1], p[:, 2]))]


def detect_endpoints(cloud: PointCloud, kernels=ENDPOINT_KERNELS,
                     merge_radius_vox: float = 3.5) -> EndpointSet:
    """Find axial needle ends with directional empty-slab tests.

    A voxel is a lowest candidate for kernel ``(kz, ky, kx)`` when the
    ``ky x kx`` in-plane window around it is empty on the ``kz - 1`` slices
    below; highest candidates mirror this upwards.
    """
    if not len(cloud):
        return EndpointSet(np.empty((0, 3)), np.empty((0, 3)))
    v = cloud.voxels
    pad = max(max(k) for k in kernels)
    origin = v.min(0) - pad
    shape = v.max(0) - origin + pad + 1
    mask = np.zeros(shape, dtype=np.int32)
    local = v - origin
    mask[tuple(local.T)] = 1

    low = np.zeros(shape, dtype=bool)
    high = np.zeros(shape, dtype=bool)
    for kz, ky, kx in kernels:
        inplane = ndimage.correlate(mask, np.ones((kx, ky, 1), dtype=np.int32), mode="constant")
        below = np.zeros_like(inplane)
        above = np.zeros_like(inplane)
        for d in range(1, kz):
            below[:, :, d:] += inplane[:, :, :-d]
            above[:, :, :-d] += inplane[:, :, d:]
        low |= (mask == 1) & (below == 0)
        high |= (mask == 1) & (above == 0)

    lowest = _cluster_medians(np.argwhere(low).astype(float), merge_radius_vox) + origin
    highest = _cluster_medians(np.argwhere(high).astype(float), merge_radius_vox) + origin
    return EndpointSet(_sorted_zyx(lowest), _sorted_zyx(highest))
