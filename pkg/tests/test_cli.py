import json
import subprocess
import sys

import numpy as np
import pytest

from needlekit import io
from needlekit.cli import main
from needlekit.core import VolumeMeta
from needlekit.core import dilate_spherical, interpolate_polyline
from needlekit.synth import DEFAULT_META


@pytest.fixture(scope="module")
def phantom(tmp_path_factory):
    d = tmp_path_factory.mktemp("ph")
    assert main(["synth", "--seed", "3", "--out", str(d)]) == 0
    return d


def test_synth_bundle(phantom):
    assert (phantom / "mask.json").exists() and (phantom / "mask.raw").exists()
    refs = io.read_needles(phantom / "ref_needles.json")
    assert len(refs) == 12
    man = json.loads((phantom / "manifest.json").read_text())
    assert man["seed"] == 3 and man["errors"] == []


def test_reconstruct_clean_mjung_plus(phantom, tmp_path):
    out = tmp_path / "r"
    code = main(["reconstruct", "--mask", str(phantom / "mask.json"), "--technique", "mjung+",
                 "--n-needles", "12", "--out", str(out)])
    assert code == 0
    assert len(io.read_needles(out / "needles.json")) == 12
    log = json.loads((out / "run_log.json").read_text())
    assert log["final_loss_mm"] is not None and log["stages"]
    names = [s["stage"] for s in log["stages"]]
    counts = [s["clusters"] for s in log["stages"]][names.index("merge"):]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_jung_needs_count(phantom, tmp_path, capsys):
    code = main(["reconstruct", "--mask", str(phantom / "mask.json"), "--technique", "jung",
                 "--out", str(tmp_path)])
    assert code == 1
    assert "technique jung requires needle count" in capsys.readouterr().err


def test_empty_mask_exit_2(tmp_path):
    io.write_mask(tmp_path / "e.json", np.zeros((5, 5, 5), bool), VolumeMeta((5, 5, 5), (1, 1, 1)))
    code = main(["reconstruct", "--mask", str(tmp_path / "e.json"), "--technique", "leon",
                 "--out", str(tmp_path / "r")])
    assert code == 2
    log = json.loads((tmp_path / "r" / "run_log.json").read_text())
    assert log["diagnostic"] == "no needles detected"


def test_evaluate_identity(phantom, tmp_path):
    ref = phantom / "ref_needles.json"
    assert main(["evaluate", "--pred", str(ref), "--ref", str(ref), "--out", str(tmp_path)]) == 0
    s = json.loads((tmp_path / "report.json").read_text())["summary"]
    assert s["shaft_median_mm"] == 0 and s["tip_median_mm"] == 0 and s["bottom_median_mm"] == 0
    assert s["fp"] == 0 and s["fn"] == 0
    assert (tmp_path / "report.csv").read_text().startswith("id,tip_mm,bottom_mm,shaft_mm")


def test_2d_like_leon_has_false_positives(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"profile": "2d-like"}))
    assert main(["synth", "--config", str(tmp_path / "c.json"), "--seed", "1", "--out", str(tmp_path / "ph")]) == 0
    assert main(["reconstruct", "--mask", str(tmp_path / "ph" / "mask.json"), "--technique", "leon",
                 "--out", str(tmp_path / "r")]) == 0
    assert main(["evaluate", "--pred", str(tmp_path / "r" / "needles.json"),
                 "--ref", str(tmp_path / "ph" / "ref_needles.json"), "--out", str(tmp_path / "e")]) == 0
    assert json.loads((tmp_path / "e" / "report.json").read_text())["summary"]["fp"] > 0


def test_label_matches_composition(tmp_path):
    pts = [[20.0, 30.0, 5.0], [24.0, 31.0, 40.0]]
    (tmp_path / "p.json").write_text(json.dumps([{"points_mm": pts}]))
    assert main(["label", "--points", str(tmp_path / "p.json"), "--radius-mm", "1.0", "--out", str(tmp_path)]) == 0
    mask, meta = io.read_mask_array(tmp_path / "label.json")
    assert meta == DEFAULT_META
    expected = dilate_spherical(interpolate_polyline(pts, min(meta.spacing_mm) / 2), 1.0, meta)
    assert np.array_equal(mask, expected)


def test_label_geometry_options(tmp_path):
    (tmp_path / "p.json").write_text(json.dumps([{"points_mm": [[2, 2, 1], [2, 2, 6]]}]))
    assert main(["label", "--points", str(tmp_path / "p.json"), "--dims", "8", "8", "8",
                 "--spacing-mm", "1", "1", "1", "--out", str(tmp_path / "a")]) == 0
    mask, meta = io.read_mask_array(tmp_path / "a" / "label.json")
    assert meta.dims == (8, 8, 8) and mask[2, 2, 1:7].all()


@pytest.mark.parametrize("tech", ["jung", "leon", "mjung", "mjung+", "leon+"])
def test_reconstruct_byte_identical(phantom, tmp_path, tech):
    outs = []
    for run in ("a", "b"):
        d = tmp_path / run
        assert main(["reconstruct", "--mask", str(phantom / "mask.json"), "--technique", tech,
                     "--n-needles", "12", "--seed", "5", "--out", str(d)]) == 0
        outs.append((d / "needles.json").read_bytes())
    assert outs[0] == outs[1]


def test_config_errors_name_file_and_field(phantom, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"technique": "leon", "merge": {"window": 3}}))
    code = main(["reconstruct", "--mask", str(phantom / "mask.json"), "--config", str(cfg), "--out", str(tmp_path)])
    assert code == 1
    err = capsys.readouterr().err
    assert "cfg.json" in err and "merge.window" in err


def test_config_file_supplies_run(phantom, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"technique": "mjung+", "n_needles": 12, "seed": 2,
                               "hdbscan": {"min_samples": 15, "min_cluster_size": 500},
                               "mask": str(phantom / "mask.json"), "out": str(tmp_path / "o")}))
    assert main(["reconstruct", "--config", str(cfg)]) == 0
    log = json.loads((tmp_path / "o" / "run_log.json").read_text())
    assert log["config"]["options"]["hdbscan"]["min_cluster_size"] == 500


def test_missing_mask_file(tmp_path, capsys):
    code = main(["reconstruct", "--mask", str(tmp_path / "nope.json"), "--technique", "leon",
                 "--out", str(tmp_path)])
    assert code == 1 and "nope.json" in capsys.readouterr().err


def test_size_mismatch_reported(tmp_path, capsys):
    (tmp_path / "m.json").write_text(json.dumps({"dims": [4, 4, 4], "spacing_mm": [1, 1, 1], "encoding": "raw-u8"}))
    (tmp_path / "m.raw").write_bytes(bytes(63))
    assert main(["reconstruct", "--mask", str(tmp_path / "m.json"), "--technique", "leon",
                 "--out", str(tmp_path / "r")]) == 1
    err = capsys.readouterr().err
    assert "m.raw" in err and "size" in err


def test_jobs_over_several_masks(tmp_path):
    for s in (1, 2):
        assert main(["synth", "--seed", str(s), "--out", str(tmp_path / f"p{s}")]) == 0
    masks = [str(tmp_path / f"p{s}" / "mask.json") for s in (1, 2)]
    # both masks are named mask.json, so give them distinct stems
    for s, m in zip((1, 2), masks):
        io.write_mask(tmp_path / f"v{s}.json", *io.read_mask_array(m))
    code = main(["reconstruct", "--mask", str(tmp_path / "v1.json"), str(tmp_path / "v2.json"),
                 "--technique", "leon", "--jobs", "2", "--out", str(tmp_path / "r")])
    assert code == 0
    assert len(io.read_needles(tmp_path / "r" / "v1" / "needles.json")) == 12
    assert len(io.read_needles(tmp_path / "r" / "v2" / "needles.json")) == 12


def test_console_script_runs(tmp_path):
    res = subprocess.run([sys.executable, "-m", "needlekit.cli", "synth", "--seed", "0", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 0 and (tmp_path / "mask.json").exists()
