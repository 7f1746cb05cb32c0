import numpy as np
import pytest
from scipy.spatial import cKDTree

from needlekit.core import VolumeMeta, mask_to_points
from needlekit.errors import ConfigInfeasible, InvalidInput
from needlekit.metrics import evaluate
from needlekit.synth import (BLOB_STANDOFF_VOX, ErrorProfile, PhantomConfig, generate_phantom,
                             inject_errors, voxelize)
from needlekit.techniques import reconstruct


def test_single_straight_needle_recovered():
    ph = generate_phantom(PhantomConfig(n_needles=1, degree=1), seed=2)
    cloud = mask_to_points(ph.mask, ph.meta)
    rec = reconstruct(cloud, "mjung+", 1)
    rep = evaluate(rec.needles, [ph.needles[0].polyline])
    assert rep.nf == 1 and rep.errors[0].shaft_mm < 0.6


@pytest.mark.parametrize("seed", [0, 7])
def test_twelve_needles_are_separated(seed):
    cfg = PhantomConfig()
    ph = generate_phantom(cfg, seed)
    assert len(ph.needles) == 12
    dense = [n.curve.dense(2000) for n in ph.needles]
    for i in range(12):
        tree = cKDTree(dense[i])
        for j in range(i + 1, 12):
            assert tree.query(dense[j])[0].min() >= cfg.min_separation_mm - 1e-9


def test_volume_is_about_100_by_100_by_60_mm():
    ext = PhantomConfig().meta.dims * PhantomConfig().meta.spacing
    assert np.allclose(ext, (100, 100, 60), atol=0.5)


def test_generation_is_deterministic():
    a, b = generate_phantom(PhantomConfig(), 11), generate_phantom(PhantomConfig(), 11)
    assert np.array_equal(a.mask, b.mask)
    for x, y in zip(a.needles, b.needles):
        assert np.array_equal(x.points_mm, y.points_mm)
        assert x.curve == y.curve


def test_mask_is_label_recipe():
    ph = generate_phantom(PhantomConfig(n_needles=3), 1)
    rebuilt = np.zeros_like(ph.mask)
    for n in ph.needles:
        rebuilt |= voxelize(n.points_mm, ph.meta, 1.0)
    assert np.array_equal(rebuilt, ph.mask)


def test_config_invariants():
    with pytest.raises(InvalidInput):
        PhantomConfig(min_separation_mm=2.0, dilation_radius_mm=1.0)
    with pytest.raises(InvalidInput):
        PhantomConfig(length_range_mm=(30, 70))
    with pytest.raises(InvalidInput):
        PhantomConfig.from_dict({"n_needles": 3, "colour": "red"})
    with pytest.raises(ConfigInfeasible):
        generate_phantom(PhantomConfig(n_needles=40, min_separation_mm=25.0), 0)


def test_profile_invariants():
    with pytest.raises(InvalidInput):
        ErrorProfile(p_disconnect=1.5)
    with pytest.raises(InvalidInput):
        ErrorProfile.preset("4d-like")
    assert ErrorProfile.preset("3d-like").fp_blobs_per_volume == 2


def test_clean_profile_is_identity():
    ph = generate_phantom(PhantomConfig(), 4)
    out, manifest = inject_errors(ph.mask, ph.needles, ErrorProfile.preset("clean"), 4, ph.meta)
    assert np.array_equal(out, ph.mask) and manifest == []


def test_single_gap_removes_slices():
    ph = generate_phantom(PhantomConfig(n_needles=1), 5)
    prof = ErrorProfile(p_disconnect=1.0, gap_slices_range=(4, 4))
    out, manifest = inject_errors(ph.mask, ph.needles, prof, 5, ph.meta)
    assert len(manifest) == 1 and manifest[0]["type"] == "gap" and manifest[0]["needle"] == 0
    gap = manifest[0]["slices"]
    assert len(gap) == 4
    assert not out[:, :, gap].any()
    assert ph.mask[:, :, gap].any()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_2d_like_blobs_audited(seed):
    ph = generate_phantom(PhantomConfig(), seed)
    prof = ErrorProfile.preset("2d-like")
    out, manifest = inject_errors(ph.mask, ph.needles, prof, seed, ph.meta)
    blobs = [np.array(m["voxels"]) for m in manifest if m["type"] == "blob"]
    assert len(blobs) == prof.fp_blobs_per_volume
    clean_vox = cKDTree(np.argwhere(ph.mask))
    for b in blobs:
        lo, hi = prof.fp_blob_size_range_vox
        assert lo <= len(b) <= hi
        assert clean_vox.query(b)[0].min() >= BLOB_STANDOFF_VOX
        # and against the reference curves themselves, in voxel units
        for n in ph.needles:
            dense = n.curve.dense(2000) / ph.meta.spacing
            assert cKDTree(dense).query(b)[0].min() >= BLOB_STANDOFF_VOX
    blob_mask = np.zeros_like(out)
    for b in blobs:
        blob_mask[tuple(b.T)] = True
    assert not (out & ~(ph.mask | blob_mask)).any()


def test_injection_deterministic():
    ph = generate_phantom(PhantomConfig(), 9)
    prof = ErrorProfile.preset("2d-like")
    a = inject_errors(ph.mask, ph.needles, prof, 3, ph.meta)
    b = inject_errors(ph.mask, ph.needles, prof, 3, ph.meta)
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]


def test_drop_removes_needle():
    ph = generate_phantom(PhantomConfig(n_needles=2), 3)
    out, manifest = inject_errors(ph.mask, ph.needles, ErrorProfile(p_drop_needle=1.0), 0, ph.meta)
    assert [m["type"] for m in manifest] == ["drop", "drop"]
    assert not out.any()


def test_truncation_shortens_tip():
    ph = generate_phantom(PhantomConfig(n_needles=1), 3)
    prof = ErrorProfile(p_truncate_tip=1.0, truncate_range_slices=(3, 3))
    out, manifest = inject_errors(ph.mask, ph.needles, prof, 0, ph.meta)
    top = np.flatnonzero(ph.mask.any(axis=(0, 1))).max()
    assert manifest[0]["type"] == "truncate" and np.flatnonzero(out.any(axis=(0, 1))).max() == top - 3
