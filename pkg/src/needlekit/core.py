"""Volume geometry, point clouds, needle trajectories and mask morphology.

Coordinates come in two flavours:

* voxel space: real-valued ``(i, j, k)`` index coordinates, ``k`` axial;
* world space: millimetres, ``world(v) = v * spacing``.

"Bottom" is the inferior (minimal z) end of a needle and "tip" the
superior (maximal z) end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .errors import FormatError, InvalidInput

DEFAULT_SPACING_MM = (0.6, 0.7, 1.0)

# chord subdivisions used to measure the arc length of polynomial curves
ARC_SUBDIVISIONS = 1000


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class VolumeMeta:
    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float] = DEFAULT_SPACING_MM

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(dims) != 3 or len(spacing) != 3:
            raise InvalidInput("dims and spacing_mm must have three entries")
        if min(dims) < 1:
            raise InvalidInput(f"dims must be >= 1, got {dims}")
        if not all(s > 0 and math.isfinite(s) for s in spacing):
            raise InvalidInput(f"spacing_mm must be positive, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing_mm", spacing)

    @property
    def spacing(self) -> np.ndarray:
        return np.asarray(self.spacing_mm, dtype=float)

    @property
    def extent_mm(self) -> np.ndarray:
        return (np.asarray(self.dims) - 1) * self.spacing

    def world(self, voxels) -> np.ndarray:
        return np.asarray(voxels, dtype=float) * self.spacing

    def to_voxel(self, points_mm) -> np.ndarray:
        return np.asarray(points_mm, dtype=float) / self.spacing

    def contains(self, voxels) -> np.ndarray:
        v = np.asarray(voxels)
        return np.all((v >= 0) & (v < np.asarray(self.dims)), axis=-1)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Foreground voxels of a volume, unique and sorted by ``(k, j, i)``."""

    meta: VolumeMeta
    voxels: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.voxels, dtype=np.int64).reshape(-1, 3)
        if len(v) and not self.meta.contains(v).all():
            raise InvalidInput("voxel index outside volume dims")
        if len(v):
            v = np.unique(v, axis=0)
            v = v[np.lexsort((v[:, 0], v[:, 1], v[:, 2]))]
        object.__setattr__(self, "voxels", _frozen(v))

    def __len__(self) -> int:
        return len(self.voxels)

    @property
    def mm(self) -> np.ndarray:
        return self.voxels * self.meta.spacing

    @property
    def vox(self) -> np.ndarray:
        return self.voxels.astype(float)

    @property
    def slices(self) -> np.ndarray:
        return self.voxels[:, 2]

    def subset(self, keep) -> "PointCloud":
        return PointCloud(self.meta, self.voxels[np.asarray(keep)])

    def to_mask(self) -> np.ndarray:
        mask = np.zeros(self.meta.dims, dtype=bool)
        if len(self.voxels):
            mask[tuple(self.voxels.T)] = True
        return mask


def mask_to_points(mask, meta: VolumeMeta) -> PointCloud:
    """Collect the foreground voxels of ``mask`` (indexed ``[i, j, k]``)."""
    mask = np.asarray(mask)
    if mask.shape != meta.dims:
        raise FormatError(f"mask shape {mask.shape} does not match dims {meta.dims}", field="dims")
    return PointCloud(meta, np.argwhere(mask != 0))


def points_to_mask(cloud: PointCloud) -> np.ndarray:
    return cloud.to_mask()


@dataclass(frozen=True)
class NeedleCurve:
    """Needle trajectory ``x(z), y(z)`` as raw power-basis polynomials in mm.

    Coefficients are in ascending order: ``x(z) = sum(coeff_x[p] * z**p)``.
    """

    degree: int
    coeff_x: tuple[float, ...]
    coeff_y: tuple[float, ...]
    z_min_mm: float
    z_max_mm: float

    def __post_init__(self):
        cx = tuple(float(c) for c in self.coeff_x)
        cy = tuple(float(c) for c in self.coeff_y)
        if self.degree not in (1, 2, 3):
            raise InvalidInput(f"degree must be 1, 2 or 3, got {self.degree}")
        if len(cx) != self.degree + 1 or len(cy) != self.degree + 1:
            raise InvalidInput("need degree+1 coefficients per coordinate")
        if not self.z_min_mm < self.z_max_mm:
            raise InvalidInput(f"empty axial extent [{self.z_min_mm}, {self.z_max_mm}]")
        if not all(math.isfinite(c) for c in cx + cy):
            raise InvalidInput("non-finite coefficient")
        object.__setattr__(self, "coeff_x", cx)
        object.__setattr__(self, "coeff_y", cy)
        object.__setattr__(self, "z_min_mm", float(self.z_min_mm))
        object.__setattr__(self, "z_max_mm", float(self.z_max_mm))

    def xy(self, z) -> tuple[np.ndarray, np.ndarray]:
        z = np.asarray(z, dtype=float)
        return (np.polynomial.polynomial.polyval(z, self.coeff_x),
                np.polynomial.polynomial.polyval(z, self.coeff_y))

    def at(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        x, y = self.xy(z)
        return np.stack([x, y, np.broadcast_to(z, np.shape(x))], axis=-1)

    @property
    def bottom(self) -> np.ndarray:
        return self.at(self.z_min_mm)

    @property
    def tip(self) -> np.ndarray:
        return self.at(self.z_max_mm)

    def dense(self, n_segments: int = ARC_SUBDIVISIONS) -> np.ndarray:
        return self.at(np.linspace(self.z_min_mm, self.z_max_mm, n_segments + 1))


@dataclass(frozen=True, eq=False)
class Polyline:
    vertices: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float).reshape(-1, 3)
        if len(v) < 2:
            raise InvalidInput("polyline needs at least 2 vertices")
        if not np.all(np.isfinite(v)):
            raise InvalidInput("non-finite polyline vertex")
        if np.any(np.diff(v[:, 2]) <= 0):
            raise InvalidInput("polyline z must be strictly increasing")
        object.__setattr__(self, "vertices", _frozen(v))

    @property
    def bottom(self) -> np.ndarray:
        return self.vertices[0].copy()

    @property
    def tip(self) -> np.ndarray:
        return self.vertices[-1].copy()

    @property
    def z_min_mm(self) -> float:
        return float(self.vertices[0, 2])

    @property
    def z_max_mm(self) -> float:
        return float(self.vertices[-1, 2])

    def dense(self) -> np.ndarray:
        return np.array(self.vertices)


Trajectory = Union[NeedleCurve, Polyline]


@dataclass(frozen=True, eq=False)
class ClusterSet:
    """Partition of a cloud: ``labels[n] == -1`` is noise, else a cluster id."""

    cloud: PointCloud
    labels: np.ndarray

    def __post_init__(self):
        lab = np.array(self.labels, dtype=np.int64).reshape(-1)
        if len(lab) != len(self.cloud):
            raise InvalidInput("label count differs from voxel count")
        if len(lab) and lab.min() < -1:
            raise InvalidInput("labels must be >= -1")
        ids = np.unique(lab[lab >= 0])
        if len(ids) and not np.array_equal(ids, np.arange(len(ids))):
            raise InvalidInput("cluster ids must be contiguous from 0")
        object.__setattr__(self, "labels", _frozen(lab))

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) and self.labels.max() >= 0 else 0

    def members(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)

    def groups(self) -> list[np.ndarray]:
        return [self.members(c) for c in range(self.n_clusters)]

    @classmethod
    def relabeled(cls, cloud: PointCloud, labels) -> "ClusterSet":
        """Build a ClusterSet from arbitrary labels, renumbering clusters
        contiguously in order of first appearance (negative = noise)."""
        labels = np.asarray(labels, dtype=np.int64)
        out = np.full(len(labels), -1, dtype=np.int64)
        pos = labels >= 0
        if pos.any():
            uniq, first = np.unique(labels[pos], return_index=True)
            rank = np.empty(len(uniq), dtype=np.int64)
            rank[np.argsort(first, kind="stable")] = np.arange(len(uniq))
            out[pos] = rank[np.searchsorted(uniq, labels[pos])]
        return cls(cloud, out)


def interpolate_polyline(control_points, step_mm: float) -> np.ndarray:
    """Densify a piecewise-linear path so consecutive samples are at most
    ``step_mm`` apart. Control points are reproduced exactly and a shared
    corner appears once."""
    pts = np.asarray(control_points, dtype=float).reshape(-1, 3)
    if len(pts) < 2:
        raise InvalidInput("interpolation needs at least 2 control points")
    if not step_mm > 0:
        raise InvalidInput("step_mm must be positive")
    out = [pts[:1]]
    for a, b in zip(pts[:-1], pts[1:]):
        length = float(np.linalg.norm(b - a))
        n_seg = max(1, math.ceil(length / step_mm - 1e-9))
        t = np.arange(1, n_seg + 1)[:, None] / n_seg
        seg = a + t * (b - a)
        seg[-1] = b
        out.append(seg)
    return np.concatenate(out)


def dilate_spherical(points_mm, radius_mm: float, meta: VolumeMeta) -> np.ndarray:
    """Mask of voxels whose centre lies within ``radius_mm`` of any point."""
    if not radius_mm > 0:
        raise InvalidInput("radius_mm must be positive")
    mask = np.zeros(meta.dims, dtype=bool)
    pts = np.asarray(points_mm, dtype=float).reshape(-1, 3)
    if not len(pts):
        return mask
    sp = meta.spacing
    reach = np.floor(radius_mm / sp).astype(int) + 1
    axes = [np.arange(-r, r + 2) for r in reach]
    offsets = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    base = np.floor(pts / sp).astype(np.int64)
    dims = np.asarray(meta.dims)
    r2 = radius_mm * radius_mm
    for start in range(0, len(pts), 2048):
        p = pts[start:start + 2048]
        cand = base[start:start + 2048, None, :] + offsets[None, :, :]
        d2 = (((cand * sp) - p[:, None, :]) ** 2).sum(-1)
        hit = (d2 <= r2 + 1e-12) & np.all((cand >= 0) & (cand < dims), axis=-1)
        v = cand[hit]
        mask[v[:, 0], v[:, 1], v[:, 2]] = True
    return mask


def _arc_positions(dense: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(dense, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def arc_length(traj: Trajectory) -> float:
    return float(_arc_positions(traj.dense())[-1])


def sample_equidistant(traj: Trajectory, n: int) -> np.ndarray:
    """``n`` points at equal arc-length spacing from bottom to tip."""
    if n < 2:
        raise InvalidInput("need n >= 2 samples")
    dense = traj.dense()
    s = _arc_positions(dense)
    total = s[-1]
    if not total > 0:
        raise InvalidInput("trajectory has zero length")
    targets = np.linspace(0.0, total, n)
    out = np.stack([np.interp(targets, s, dense[:, c]) for c in range(3)], axis=1)
    out[0], out[-1] = dense[0], dense[-1]
    return out


def as_points(values: Sequence) -> np.ndarray:
    return np.asarray(values, dtype=float).reshape(-1, 3)
