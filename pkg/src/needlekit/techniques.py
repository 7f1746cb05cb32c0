"""The five reconstruction pipelines and the Leon-specific steps
(merged-cluster splitting and linear model tree polylines)."""

from __future__ import annotations

import enum
import heapq
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist
from scipy.stats import f as f_dist

from .cluster import (HdbscanParams, SeedRef, detect_endpoints, hdbscan,
                      propagate_slices, spectral_cluster)
from .core import ClusterSet, NeedleCurve, PointCloud, Polyline
from .errors import InitializationError, InvalidInput
from .refine import (EmParams, MergeParams, apply_merges, em_optimize,
                     initial_curves, removal_keep, select_degree)

log = logging.getLogger(__name__)


class Technique(str, enum.Enum):
    JUNG = "jung"
    LEON = "leon"
    MJUNG = "mjung"
    MJUNG_PLUS = "mjung+"
    LEON_PLUS = "leon+"

    @property
    def needs_count(self) -> bool:
        return self in (Technique.JUNG, Technique.MJUNG_PLUS, Technique.LEON_PLUS)


@dataclass(frozen=True)
class LeonSplitParams:
    spread_threshold_vox: float = 6.0
    small_gap_max_slices: int = 3
    claim_dist_vox: float = 3.0

    def __post_init__(self):
        if self.spread_threshold_vox <= 0 or self.small_gap_max_slices < 1 or self.claim_dist_vox <= 0:
            raise InvalidInput("Leon split parameters must be positive")


# --------------------------------------------------------------------------
# Jung / MJung initialisation
# --------------------------------------------------------------------------

def jung_init(cloud: PointCloud, n_needles: int, seed: int = 0,
              converge_dist_vox: float = 1.5,
              assign_radius_vox: float = math.inf) -> ClusterSet:
    """Spectral clustering on the most inferior slice, then propagation
    upwards from the resulting cluster centres."""
    if n_needles < 1:
        raise InvalidInput("n_needles must be >= 1")
    if not len(cloud):
        return ClusterSet(cloud, np.empty(0, dtype=np.int64))
    k0 = int(cloud.slices.min())
    first = cloud.slices == k0
    if first.sum() < n_needles:
        raise InitializationError(
            f"most inferior slice {k0} holds {first.sum()} points, fewer than {n_needles} needles")
    labels = spectral_cluster(cloud.mm[first][:, :2], n_needles, seed)
    vox = cloud.vox[first]
    seeds = [SeedRef(tuple(vox[labels == c].mean(0)), k0) for c in range(n_needles)]
    return propagate_slices(cloud, seeds, "up", converge_dist_vox, assign_radius_vox).clusters


def mjung_init(cloud: PointCloud, converge_dist_vox: float = 1.5,
               assign_radius_vox: float = 5.0, count: str = "centroids") -> ClusterSet:
    """Propagate from detected endpoints in both axial directions and keep
    the direction that collected more (``count='centroids'``: centroid
    trail points, ``'points'``: assigned voxels); ties go upwards."""
    if count not in ("centroids", "points"):
        raise InvalidInput("count must be 'centroids' or 'points'")
    if not len(cloud):
        return ClusterSet(cloud, np.empty(0, dtype=np.int64))
    ends = detect_endpoints(cloud)
    up = propagate_slices(cloud, [SeedRef(tuple(p), int(math.floor(p[2]))) for p in ends.lowest],
                          "up", converge_dist_vox, assign_radius_vox)
    down = propagate_slices(cloud, [SeedRef(tuple(p), int(math.ceil(p[2]))) for p in ends.highest],
                            "down", converge_dist_vox, assign_radius_vox)
    score = (lambda r: r.trail_count) if count == "centroids" else (lambda r: r.assigned_count)
    chosen = down if score(down) > score(up) else up
    log.debug("mjung: up=%d down=%d -> %s", score(up), score(down),
              "down" if chosen is down else "up")
    return chosen.clusters


# --------------------------------------------------------------------------
# Leon
# --------------------------------------------------------------------------

def _line(points: np.ndarray):
    """Least-squares x(z), y(z) line (constant when only one slice)."""
    z = points[:, 2]
    if len(np.unique(z)) < 2:
        c = points[:, :2].mean(0)
        return np.array([[c[0], 0.0], [c[1], 0.0]])
    return np.polynomial.polynomial.polyfit(z, points[:, :2], 1).T


def _line_dist(coef, points):
    x = coef[0, 0] + coef[0, 1] * points[:, 2]
    y = coef[1, 0] + coef[1, 1] * points[:, 2]
    return np.hypot(points[:, 0] - x, points[:, 1] - y)


def _slice_spread(points: np.ndarray) -> float:
    return float(pdist(points[:, :2]).max()) if len(points) > 1 else 0.0


def split_merged(clusters: ClusterSet, split: LeonSplitParams = LeonSplitParams()) -> ClusterSet:
    """Heal or split clusters whose slices show an abnormally wide spread.

    Runs of flagged slices no longer than ``small_gap_max_slices`` are
    bridged by the line through the surrounding unflagged points; longer
    runs separate the cluster into independent parts. Flagged points join
    the nearest adjacent part's line within ``claim_dist_vox``, otherwise
    they become noise.
    """
    vox = clusters.cloud.vox
    labels = np.full(len(vox), -1, dtype=np.int64)
    next_id = 0
    for g in clusters.groups():
        P = vox[g]
        ks = P[:, 2].astype(np.int64)
        slices = np.unique(ks)
        flagged = {int(s): _slice_spread(P[ks == s]) > split.spread_threshold_vox for s in slices}
        if not any(flagged.values()) or all(flagged.values()):
            labels[g] = next_id
            next_id += 1
            continue

        # parts: lists of unflagged slices; runs: (slices, candidate parts)
        parts: list[list[int]] = []
        runs: list[tuple[list[int], list[int]]] = []
        run: list[int] = []
        for s in map(int, slices):
            if flagged[s]:
                run.append(s)
                continue
            if run:
                if not parts:
                    runs.append((run, [0]))
                elif len(run) > split.small_gap_max_slices:
                    runs.append((run, [len(parts) - 1, len(parts)]))
                    parts.append([])
                else:
                    runs.append((run, [len(parts) - 1]))
                run = []
            if not parts:
                parts.append([])
            parts[-1].append(s)
        if run:
            runs.append((run, [len(parts) - 1]))

        lines = []
        for part in parts:
            sel = np.isin(ks, part)
            lines.append(_line(P[sel]))
        local = np.full(len(P), -1, dtype=np.int64)
        for i, part in enumerate(parts):
            local[np.isin(ks, part)] = i
        for run_slices, cands in runs:
            sel = np.flatnonzero(np.isin(ks, run_slices))
            d = np.stack([_line_dist(lines[c], P[sel]) for c in cands], axis=1)
            best = d.argmin(1)
            ok = d[np.arange(len(sel)), best] <= split.claim_dist_vox
            local[sel[ok]] = np.asarray(cands)[best[ok]]
        for i in range(len(parts)):
            labels[g[local == i]] = next_id + i
        next_id += len(parts)
    return ClusterSet.relabeled(clusters.cloud, labels)


def leon_cluster(cloud: PointCloud, params: HdbscanParams = HdbscanParams(),
                 split: LeonSplitParams = LeonSplitParams()) -> ClusterSet:
    """HDBSCAN in voxel space followed by merged-cluster splitting."""
    if not len(cloud):
        return ClusterSet(cloud, np.empty(0, dtype=np.int64))
    return split_merged(ClusterSet(cloud, hdbscan(cloud.vox, params)), split)


class _Moments:
    """Prefix sums for O(1) least-squares lines of x and y on z."""

    def __init__(self, p: np.ndarray):
        z, x, y = p[:, 2], p[:, 0], p[:, 1]
        cols = [np.ones_like(z), z, z * z, x, x * z, x * x, y, y * z, y * y]
        self.c = np.concatenate([np.zeros((1, 9)), np.cumsum(np.stack(cols, 1), 0)])

    def sse(self, lo, hi):
        n, sz, szz, sx, sxz, sxx, sy, syz, syy = (self.c[hi] - self.c[lo]).T
        vzz = szz - sz * sz / n
        out = np.zeros_like(n)
        for s1, s1z, s11 in ((sx, sxz, sxx), (sy, syz, syy)):
            v11 = s11 - s1 * s1 / n
            v1z = s1z - s1 * sz / n
            slope = np.divide(v1z * v1z, vzz, out=np.zeros_like(vzz), where=vzz > 1e-12)
            out = out + v11 - slope
        return np.maximum(out, 0.0)


def fit_polyline(cluster_points_mm, max_segments: int = 8, min_leaf: int = 5,
                 min_gain: float = 0.01, alpha: float = 0.01) -> Polyline:
    """Piecewise-linear trajectory from a linear model tree over z.

    Splits are chosen best-first by the drop in total squared residual of
    the per-side x(z), y(z) lines. Splitting stops at ``max_segments``
    leaves, when a side would hold fewer than ``min_leaf`` points, or when
    the drop is below ``min_gain`` of the parent residual or is not
    significant at level ``alpha`` (F test, corrected for the number of
    candidate cuts).
    """
    p = np.asarray(cluster_points_mm, dtype=float).reshape(-1, 3)
    p = p[np.argsort(p[:, 2], kind="stable")]
    z = p[:, 2]
    if len(np.unique(z)) < 2:
        raise InvalidInput("polyline fitting needs points on at least two slices")
    mom = _Moments(p)
    # candidate cut positions: between distinct z values
    cuts_all = np.flatnonzero(np.diff(z) > 0) + 1

    def best_split(lo, hi):
        cuts = cuts_all[(cuts_all - lo >= min_leaf) & (hi - cuts_all >= min_leaf)]
        if not len(cuts):
            return None
        # both sides need two distinct slices for a line
        cuts = cuts[(z[cuts - 1] > z[lo]) & (z[hi - 1] > z[cuts])]
        if not len(cuts):
            return None
        parent = float(mom.sse(np.array([lo]), np.array([hi]))[0])
        child = mom.sse(np.full(len(cuts), lo), cuts) + mom.sse(cuts, np.full(len(cuts), hi))
        i = int(np.argmin(child))
        gain = parent - float(child[i])
        if parent <= 1e-12 or gain < min_gain * parent:
            return None
        # Chow-style F test (4 extra line parameters over x and y), Bonferroni
        # over the candidate cuts, so noise alone does not keep splitting
        dof = 2 * (hi - lo) - 8
        if dof > 0 and child[i] > 1e-12:
            F = (gain / 4.0) / (float(child[i]) / dof)
            if f_dist.sf(F, 4, dof) * len(cuts) > alpha:
                return None
        return gain, int(cuts[i])

    leaves = []
    heap = []
    counter = 0

    def push(lo, hi):
        nonlocal counter
        s = best_split(lo, hi)
        if s is None:
            leaves.append((lo, hi))
        else:
            heapq.heappush(heap, (-s[0], counter, lo, hi, s[1]))
            counter += 1

    push(0, len(p))
    while heap and len(leaves) + len(heap) < max_segments:
        _, _, lo, hi, cut = heapq.heappop(heap)
        push(lo, cut)
        push(cut, hi)
    leaves.extend((lo, hi) for _, _, lo, hi, _ in heap)
    leaves.sort()

    models = [_line(p[lo:hi]) for lo, hi in leaves]

    def at(coef, zz):
        return np.array([coef[0, 0] + coef[0, 1] * zz, coef[1, 0] + coef[1, 1] * zz, zz])

    verts = [at(models[0], z[0])]
    for (lo_a, hi_a), (lo_b, _), ma, mb in zip(leaves, leaves[1:], models, models[1:]):
        zb = 0.5 * (z[hi_a - 1] + z[lo_b])
        verts.append(0.5 * (at(ma, zb) + at(mb, zb)))
    verts.append(at(models[-1], z[-1]))
    return Polyline(np.array(verts))


# --------------------------------------------------------------------------
# full pipelines
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ReconstructOptions:
    hdbscan: HdbscanParams = HdbscanParams()
    leon_split: LeonSplitParams = LeonSplitParams()
    merge: MergeParams = MergeParams()
    em: EmParams = EmParams()
    converge_dist_vox: float = 1.5
    jung_assign_radius_vox: float = math.inf
    mjung_assign_radius_vox: float = 5.0
    mjung_count: str = "centroids"
    init_degree: int = 2
    max_segments: int = 8


@dataclass
class Reconstruction:
    needles: list
    stages: list = field(default_factory=list)
    loss: float | None = None
    degree: int | None = None
    diagnostic: str | None = None


def _bottom_key(traj):
    b = traj.bottom
    return (float(b[2]), float(b[1]), float(b[0]))


def _keep_clusters(clusters: ClusterSet, ids) -> ClusterSet:
    ids = list(ids)
    remap = np.full(clusters.n_clusters + 1, -1, dtype=np.int64)
    remap[ids] = np.arange(len(ids))
    return ClusterSet(clusters.cloud, remap[clusters.labels])


def reconstruct(cloud: PointCloud, technique, n_needles: int | None = None, seed: int = 0,
                options: ReconstructOptions = ReconstructOptions()) -> Reconstruction:
    """Run one technique end to end; needles come back sorted by their
    bottom point ``(z, y, x)``."""
    technique = Technique(technique)
    if technique.needs_count and not n_needles:
        raise InvalidInput(f"technique {technique.value} requires needle count")
    out = Reconstruction([])
    if not len(cloud):
        out.diagnostic = "no needles detected"
        return out
    t0 = time.perf_counter()

    def stage(name, count):
        nonlocal t0
        now = time.perf_counter()
        out.stages.append({"stage": name, "clusters": int(count), "seconds": now - t0})
        t0 = now

    o = options
    if technique in (Technique.JUNG, Technique.MJUNG, Technique.MJUNG_PLUS):
        if technique is Technique.JUNG:
            clusters = jung_init(cloud, n_needles, seed, o.converge_dist_vox, o.jung_assign_radius_vox)
        else:
            clusters = mjung_init(cloud, o.converge_dist_vox, o.mjung_assign_radius_vox, o.mjung_count)
        stage("init", clusters.n_clusters)
    else:
        clusters = ClusterSet(cloud, hdbscan(cloud.vox, o.hdbscan))
        stage("hdbscan", clusters.n_clusters)
        clusters = split_merged(clusters, o.leon_split)
        stage("split", clusters.n_clusters)

    if technique is Technique.LEON:
        mm = cloud.mm
        out.needles = [fit_polyline(mm[g], o.max_segments) for g in clusters.groups()
                       if len(np.unique(mm[g][:, 2])) >= 2]
        stage("polyline", len(out.needles))
    elif technique in (Technique.JUNG, Technique.MJUNG):
        init, _ = initial_curves(clusters, o.init_degree)
        stage("fit", len(init))
        if init:
            res = em_optimize(cloud, init, o.init_degree, o.em)
            out.needles, out.loss, out.degree = res.curves, res.loss, o.init_degree
            stage("em", len(res.curves))
    else:
        clusters = apply_merges(clusters, o.merge, seed)
        stage("merge", clusters.n_clusters)
        init, ids = initial_curves(clusters, o.init_degree)
        if init:
            keep = removal_keep(cloud, init, n_needles)
            dropped = [ids[i] for i in range(len(ids)) if i not in keep]
            removed = np.isin(clusters.labels, dropped)
            clusters = _keep_clusters(clusters, [ids[i] for i in keep])
            stage("removal", clusters.n_clusters)
            em_cloud = cloud.subset(~removed)
            sel = select_degree(em_cloud, clusters, o.em)
            out.needles, out.loss, out.degree = sel.curves, sel.loss, sel.degree
            stage("degree", len(sel.curves))

    out.needles.sort(key=_bottom_key)
    if not out.needles:
        out.diagnostic = "no needles detected"
    return out

