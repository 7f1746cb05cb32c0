"""Synthetic needle phantoms and segmentation-error injection."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .core import NeedleCurve, Polyline, VolumeMeta, dilate_spherical, interpolate_polyline
from .errors import ConfigInfeasible, InvalidInput

MAX_REJECTIONS = 1000
BLOB_STANDOFF_VOX = 5.0

# (167, 143, 60) voxels at (0.6, 0.7, 1.0) mm covers ~100 x 100 x 60 mm
DEFAULT_META = VolumeMeta((167, 143, 60), (0.6, 0.7, 1.0))


@dataclass(frozen=True)
class PhantomConfig:
    meta: VolumeMeta = DEFAULT_META
    n_needles: int = 12
    degree: int = 2
    curvature_mm: float = 3.0
    length_range_mm: tuple[float, float] = (30.0, 50.0)
    min_separation_mm: float = 6.0
    start_slice_jitter: int = 0
    dilation_radius_mm: float = 1.0
    max_tilt: float = 0.15
    margin_mm: float = 5.0
    bottom_slice: int = 3

    def __post_init__(self):
        if self.n_needles < 1:
            raise InvalidInput("n_needles must be >= 1")
        if self.degree not in (1, 2, 3):
            raise InvalidInput("degree must be 1, 2 or 3")
        if not self.min_separation_mm > 2 * self.dilation_radius_mm:
            raise InvalidInput("min_separation_mm must exceed twice the dilation radius")
        lo, hi = self.length_range_mm
        if not 0 < lo <= hi:
            raise InvalidInput("length_range_mm must satisfy 0 < min <= max")
        sz = self.meta.spacing_mm[2]
        top = (self.bottom_slice + self.start_slice_jitter) * sz + hi
        if self.bottom_slice < 0 or top > (self.meta.dims[2] - 2) * sz:
            raise InvalidInput("needle extents do not fit the volume axially")

    @classmethod
    def from_dict(cls, data: dict) -> "PhantomConfig":
        data = dict(data)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise InvalidInput(f"unknown phantom config keys: {sorted(unknown)}")
        if "meta" in data and isinstance(data["meta"], dict):
            data["meta"] = VolumeMeta(tuple(data["meta"]["dims"]), tuple(data["meta"]["spacing_mm"]))
        if "length_range_mm" in data:
            data["length_range_mm"] = tuple(data["length_range_mm"])
        return cls(**data)


@dataclass(frozen=True)
class ErrorProfile:
    """Segmentation-error rates. ``jitter_vox`` is the probability that a
    surface voxel of the mask drops out."""

    p_disconnect: float = 0.0
    gap_slices_range: tuple[int, int] = (2, 4)
    p_drop_needle: float = 0.0
    fp_blobs_per_volume: int = 0
    fp_blob_size_range_vox: tuple[int, int] = (20, 40)
    p_truncate_tip: float = 0.0
    truncate_range_slices: tuple[int, int] = (1, 3)
    jitter_vox: float = 0.0

    def __post_init__(self):
        for name in ("p_disconnect", "p_drop_needle", "p_truncate_tip", "jitter_vox"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidInput(f"{name} must lie in [0, 1]")
        for name in ("gap_slices_range", "fp_blob_size_range_vox", "truncate_range_slices"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise InvalidInput(f"{name} must satisfy 1 <= min <= max")
        if self.fp_blobs_per_volume < 0:
            raise InvalidInput("fp_blobs_per_volume must be >= 0")

    @classmethod
    def preset(cls, name: str) -> "ErrorProfile":
        try:
            return PRESETS[name]
        except KeyError:
            raise InvalidInput(f"unknown error profile {name!r}; choose from {sorted(PRESETS)}") from None

    @classmethod
    def from_dict(cls, data: dict) -> "ErrorProfile":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidInput(f"unknown error profile keys: {sorted(unknown)}")
        data = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        return cls(**data)


PRESETS = {
    "clean": ErrorProfile(),
    "3d-like": ErrorProfile(p_disconnect=0.15, gap_slices_range=(2, 4), fp_blobs_per_volume=2,
                            fp_blob_size_range_vox=(20, 40), p_truncate_tip=0.05,
                            truncate_range_slices=(1, 3), jitter_vox=0.02),
    "2d-like": ErrorProfile(p_disconnect=0.5, gap_slices_range=(2, 6), p_drop_needle=0.05,
                            fp_blobs_per_volume=8, fp_blob_size_range_vox=(15, 60),
                            p_truncate_tip=0.25, truncate_range_slices=(2, 8), jitter_vox=0.1),
}


@dataclass(frozen=True, eq=False)
class RefNeedle:
    """Ground-truth needle: generating curve plus per-slice control points."""

    curve: NeedleCurve
    points_mm: np.ndarray

    @property
    def polyline(self) -> Polyline:
        return Polyline(self.points_mm)


@dataclass(frozen=True, eq=False)
class Phantom:
    meta: VolumeMeta
    needles: list
    mask: np.ndarray = field(repr=False)


def _bump_shapes(degree: int):
    t = np.polynomial.Polynomial([0.0, 1.0])
    quad = 4 * t * (1 - t)
    # scaled so the peak magnitude on [0, 1] is one
    cubic = t * (1 - t) * (2 * t - 1) * (6 * math.sqrt(3))
    return {1: [], 2: [quad], 3: [quad, cubic]}[degree]


def _random_curve(cfg: PhantomConfig, rng: np.random.Generator) -> NeedleCurve:
    sz = cfg.meta.spacing_mm[2]
    k0 = cfg.bottom_slice + int(rng.integers(0, cfg.start_slice_jitter + 1))
    length = rng.uniform(*cfg.length_range_mm)
    z0 = k0 * sz
    z1 = z0 + max(2, round(length / sz)) * sz
    span = z1 - z0
    t_of_z = np.polynomial.Polynomial([-z0 / span, 1.0 / span])
    ext = cfg.meta.extent_mm
    coeffs = []
    shapes = _bump_shapes(cfg.degree)
    for axis in range(2):
        start = rng.uniform(cfg.margin_mm, ext[axis] - cfg.margin_mm)
        tilt = rng.uniform(-cfg.max_tilt, cfg.max_tilt)
        poly = np.polynomial.Polynomial([start - tilt * z0, tilt])
        if shapes:
            w = rng.dirichlet(np.ones(len(shapes)))
            amp = rng.uniform(-cfg.curvature_mm, cfg.curvature_mm)
            for wi, shape in zip(w, shapes):
                poly = poly + amp * wi * shape(t_of_z)
        c = poly.coef
        coeffs.append(tuple(np.pad(c, (0, cfg.degree + 1 - len(c)))))
    return NeedleCurve(cfg.degree, coeffs[0], coeffs[1], z0, z1)


def _dense(curve: NeedleCurve, step: float = 0.25) -> np.ndarray:
    n = max(2, int(math.ceil((curve.z_max_mm - curve.z_min_mm) / step)) + 1)
    return curve.at(np.linspace(curve.z_min_mm, curve.z_max_mm, n))


def control_points(curve: NeedleCurve, meta: VolumeMeta) -> np.ndarray:
    """Curve samples on every slice plane of its axial extent."""
    sz = meta.spacing_mm[2]
    k0 = int(round(curve.z_min_mm / sz))
    k1 = int(round(curve.z_max_mm / sz))
    return curve.at(np.arange(k0, k1 + 1) * sz)


def voxelize(points_mm, meta: VolumeMeta, radius_mm: float = 1.0) -> np.ndarray:
    """Label creation: linear interpolation between control points followed
    by a spherical dilation."""
    step = min(meta.spacing_mm) / 2.0
    return dilate_spherical(interpolate_polyline(points_mm, step), radius_mm, meta)


def generate_phantom(cfg: PhantomConfig = PhantomConfig(), seed: int = 0) -> Phantom:
    """Random separated needles and their clean reference mask."""
    rng = np.random.default_rng(seed)
    ext = cfg.meta.extent_mm
    curves, dense, trees = [], [], []
    rejections = 0
    while len(curves) < cfg.n_needles:
        curve = _random_curve(cfg, rng)
        pts = _dense(curve)
        inside = np.all((pts[:, :2] >= cfg.margin_mm) & (pts[:, :2] <= ext[:2] - cfg.margin_mm))
        far = inside and all(
            t.query(pts, distance_upper_bound=cfg.min_separation_mm)[0].min() >= cfg.min_separation_mm
            for t in trees)
        if not far:
            rejections += 1
            if rejections >= MAX_REJECTIONS:
                raise ConfigInfeasible(
                    f"{MAX_REJECTIONS} consecutive rejections placing needle {len(curves)}")
            continue
        rejections = 0
        curves.append(curve)
        dense.append(pts)
        trees.append(cKDTree(pts))
    needles = [RefNeedle(c, control_points(c, cfg.meta)) for c in curves]
    mask = np.zeros(cfg.meta.dims, dtype=bool)
    for n in needles:
        mask |= voxelize(n.points_mm, cfg.meta, cfg.dilation_radius_mm)
    return Phantom(cfg.meta, needles, mask)


def _needle_points(n) -> np.ndarray:
    return np.asarray(n.points_mm if isinstance(n, RefNeedle) else n, dtype=float)


def _grow_blob(rng, size, allowed, taken, dims, box_lo, box_hi):
    steps = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])
    for _ in range(200):
        start = rng.integers(box_lo, box_hi + 1)
        if not allowed(start[None])[0] or tuple(start) in taken:
            continue
        blob = [start]
        members = {tuple(start)}
        for _ in range(50 * size):
            if len(blob) >= size:
                break
            nxt = blob[int(rng.integers(len(blob)))] + steps[int(rng.integers(6))]
            key = tuple(nxt)
            if key in members or key in taken:
                continue
            if np.any(nxt < 0) or np.any(nxt >= dims) or not allowed(nxt[None])[0]:
                continue
            blob.append(nxt)
            members.add(key)
        if len(blob) == size:
            return np.array(blob)
    raise ConfigInfeasible("could not place a false-positive blob")


def inject_errors(mask, needles, profile: ErrorProfile, seed: int, meta: VolumeMeta,
                  dilation_radius_mm: float = 1.0):
    """Corrupt a clean phantom mask.

    Applies, in order: needle drops, mid-shaft gaps, tip truncations,
    false-positive blobs and surface dropout. Returns the corrupted mask and
    a manifest listing every injected error.
    """
    mask = np.asarray(mask, dtype=bool)
    rng = np.random.default_rng(seed)
    out = mask.copy()
    manifest = []
    owned = [voxelize(_needle_points(n), meta, dilation_radius_mm) & mask for n in needles]
    slice_idx = np.arange(meta.dims[2])

    dropped = set()
    for i in range(len(owned)):
        if rng.random() < profile.p_drop_needle:
            out &= ~owned[i]
            dropped.add(i)
            manifest.append({"type": "drop", "needle": i})

    def needle_slices(i):
        return np.flatnonzero(owned[i].any(axis=(0, 1)))

    for i in range(len(owned)):
        if i in dropped or not rng.random() < profile.p_disconnect:
            continue
        g = int(rng.integers(profile.gap_slices_range[0], profile.gap_slices_range[1] + 1))
        ks = needle_slices(i)
        lo, hi = ks.min() + 3, ks.max() - 3 - g + 1
        if hi < lo:
            continue
        s = int(rng.integers(lo, hi + 1))
        cut = owned[i] & ((slice_idx >= s) & (slice_idx < s + g))[None, None, :]
        out &= ~cut
        manifest.append({"type": "gap", "needle": i, "slices": list(range(s, s + g))})

    for i in range(len(owned)):
        if i in dropped or not rng.random() < profile.p_truncate_tip:
            continue
        t = int(rng.integers(profile.truncate_range_slices[0], profile.truncate_range_slices[1] + 1))
        ks = needle_slices(i)
        t = min(t, len(ks) - 5)
        if t < 1:
            continue
        first = ks.max() - t + 1
        out &= ~(owned[i] & (slice_idx >= first)[None, None, :])
        manifest.append({"type": "truncate", "needle": i,
                         "slices": list(range(int(first), int(ks.max()) + 1))})

    if profile.fp_blobs_per_volume:
        needle_vox = np.argwhere(mask).astype(float)
        tree = cKDTree(needle_vox) if len(needle_vox) else None
        dims = np.asarray(meta.dims)
        if len(needle_vox):
            box_lo = np.maximum(needle_vox.min(0).astype(int) - 10, 1)
            box_hi = np.minimum(needle_vox.max(0).astype(int) + 10, dims - 2)
        else:
            box_lo, box_hi = np.ones(3, int), dims - 2
        blob_vox: list[np.ndarray] = []

        def allowed(v):
            ok = np.ones(len(v), dtype=bool)
            if tree is not None:
                ok &= tree.query(v, distance_upper_bound=BLOB_STANDOFF_VOX)[0] >= BLOB_STANDOFF_VOX
            for b in blob_vox:
                ok &= np.min(np.linalg.norm(b[None, :, :] - v[:, None, :], axis=2), axis=1) >= 3
            return ok

        for _ in range(profile.fp_blobs_per_volume):
            size = int(rng.integers(profile.fp_blob_size_range_vox[0],
                                    profile.fp_blob_size_range_vox[1] + 1))
            blob = _grow_blob(rng, size, allowed, set(), dims, box_lo, box_hi)
            blob_vox.append(blob)
            out[tuple(blob.T)] = True
            manifest.append({"type": "blob", "voxels": blob.tolist()})

    if profile.jitter_vox > 0:
        surface = out & ~ndimage.binary_erosion(out)
        idx = np.argwhere(surface)
        drop = idx[rng.random(len(idx)) < profile.jitter_vox]
        out[tuple(drop.T)] = False
        manifest.append({"type": "dropout", "count": int(len(drop))})

    return out, manifest


def profile_dict(profile: ErrorProfile) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(profile).items()}


def config_dict(cfg: PhantomConfig) -> dict:
    d = asdict(replace(cfg))
    d["meta"] = {"dims": list(cfg.meta.dims), "spacing_mm": list(cfg.meta.spacing_mm)}
    d["length_range_mm"] = list(cfg.length_range_mm)
    return d
