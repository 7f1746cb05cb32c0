import json

import numpy as np
import pytest

from needlekit import io
from needlekit.core import NeedleCurve, Polyline, VolumeMeta, mask_to_points, sample_equidistant
from needlekit.errors import FormatError
from needlekit.synth import PhantomConfig, generate_phantom
from needlekit.techniques import reconstruct


def test_mask_round_trip(tmp_path, rng):
    meta = VolumeMeta((7, 5, 3), (0.6, 0.7, 1.0))
    m = rng.random(meta.dims) < 0.3
    io.write_mask(tmp_path / "m.json", m, meta)
    back, meta2 = io.read_mask_array(tmp_path / "m.json")
    assert meta2 == meta and np.array_equal(back, m)
    assert np.array_equal(io.read_mask(tmp_path / "m.raw").to_mask(), m)


def test_raw_layout_is_x_fastest(tmp_path):
    meta = VolumeMeta((3, 2, 2), (1, 1, 1))
    m = np.zeros(meta.dims, bool)
    m[1, 0, 0] = True
    m[0, 1, 1] = True
    io.write_mask(tmp_path / "m.json", m, meta)
    raw = (tmp_path / "m.raw").read_bytes()
    assert raw[1] == 1 and raw[0 + 3 * 1 + 6 * 1] == 1 and sum(raw) == 2


def test_size_mismatch(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps({"dims": [4, 4, 4], "spacing_mm": [1, 1, 1], "encoding": "raw-u8"}))
    (tmp_path / "m.raw").write_bytes(bytes(63))
    with pytest.raises(FormatError) as exc:
        io.read_mask(tmp_path / "m.json")
    assert "m.raw" in str(exc.value) and "size" in str(exc.value)


@pytest.mark.parametrize("doc,field", [
    ({"dims": [4, 4], "spacing_mm": [1, 1, 1], "encoding": "raw-u8"}, "dims"),
    ({"dims": [4, 4, 4], "encoding": "raw-u8"}, "spacing_mm"),
    ({"dims": [4, 4, 4], "spacing_mm": [1, 1, 1], "encoding": "gzip"}, "encoding"),
])
def test_malformed_header(tmp_path, doc, field):
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(FormatError) as exc:
        io.read_mask(tmp_path / "m.json")
    assert "m.json" in str(exc.value) and field in str(exc.value)


def test_bad_voxel_value(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps({"dims": [2, 1, 1], "spacing_mm": [1, 1, 1], "encoding": "raw-u8"}))
    (tmp_path / "m.raw").write_bytes(bytes([0, 7]))
    with pytest.raises(FormatError, match="byte offset 1"):
        io.read_mask(tmp_path / "m.json")


def test_needles_round_trip(tmp_path):
    ph = generate_phantom(PhantomConfig(), 0)
    rec = reconstruct(mask_to_points(ph.mask, ph.meta), "mjung+", 12)
    needles = rec.needles + [Polyline([(1, 2, 3), (2, 2, 5), (2, 3, 9)])]
    io.write_needles(tmp_path / "n.json", needles)
    back = io.read_needles(tmp_path / "n.json")
    assert len(back) == 13
    for a, b in zip(needles, back):
        assert type(a) is type(b)
        assert np.abs(sample_equidistant(a, 100) - sample_equidistant(b, 100)).max() <= 1e-9
    doc = json.loads((tmp_path / "n.json").read_text())
    assert len(doc[0]["points_mm"]) == 100 and "coeff_x" in doc[0]


def test_needles_without_coefficients_are_polylines():
    out = io.parse_needles([{"points_mm": [[0, 0, 0], [1, 0, 2], [1, 1, 4]]}])
    assert isinstance(out[0], Polyline) and len(out[0].vertices) == 3


def test_decreasing_z_rejected(tmp_path):
    p = tmp_path / "n.json"
    p.write_text(json.dumps([{"points_mm": [[0, 0, 0], [0, 0, 1]]},
                             {"points_mm": [[0, 0, 0], [0, 0, 2], [0, 0, 1]]}]))
    with pytest.raises(FormatError) as exc:
        io.read_needles(p)
    assert "n.json" in str(exc.value) and "[1].points_mm[2][2]" in str(exc.value)


@pytest.mark.parametrize("doc,field", [
    ({"points": []}, "[0].points_mm"),
    ({"points_mm": [[0, 0, 0], [0, 0, 1]], "degree": 4, "coeff_x": [0], "coeff_y": [0]}, "[0].degree"),
    ({"points_mm": [[0, 0, 0], [0, 0, 1]], "degree": 1, "coeff_x": [0], "coeff_y": [0, 1]}, "[0].coeff_x"),
    ({"points_mm": [[0, 0, 0], [0, "a", 1]]}, "[0].points_mm[1]"),
])
def test_needle_field_errors(doc, field):
    with pytest.raises(FormatError) as exc:
        io.parse_needles([doc], "x.json")
    assert field in str(exc.value)


def test_invalid_json_names_location(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("[{")
    with pytest.raises(FormatError, match="bad.json.*line 1"):
        io.read_needles(p)


def test_curve_json_is_deterministic():
    c = NeedleCurve(2, (1.5, 0.1, 0.001), (2.0, -0.1, 0.0), 3.0, 40.0)
    assert io.dumps_needles([c]) == io.dumps_needles([c])
