"""Command-line entry point.

Exit codes: 0 success, 1 configuration or file error, 2 no needles found.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from .config import RunConfig
from .core import VolumeMeta
from .errors import FormatError, InitializationError, NeedleKitError
from .metrics import evaluate
from .synth import DEFAULT_META, ErrorProfile, PhantomConfig, config_dict, generate_phantom, \
    inject_errors, profile_dict, voxelize
from .techniques import Technique, reconstruct

log = logging.getLogger("needlekit")

EXIT_OK, EXIT_ERROR, EXIT_EMPTY = 0, 1, 2


def _setup_logging() -> None:
    level = os.environ.get("NEEDLEKIT_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    return RunConfig.from_dict(io._load_json(Path(path)), str(path))


def _run_one(mask_path: str, out_dir: str, cfg: RunConfig) -> int:
    cloud = io.read_mask(mask_path)
    t0 = time.perf_counter()
    try:
        rec = reconstruct(cloud, cfg.technique, cfg.n_needles, cfg.seed, cfg.options)
        stages, diagnostic = rec.stages, rec.diagnostic
    except InitializationError as exc:
        rec, stages, diagnostic = None, [], f"initialization failed: {exc}"
    needles = rec.needles if rec else []
    out = Path(out_dir)
    io.write_needles(out / "needles.json", needles)
    io.write_json(out / "run_log.json", {
        "mask": str(mask_path),
        "config": cfg.to_dict(),
        "n_points": len(cloud),
        "stages": stages,
        "final_loss_mm": rec.loss if rec else None,
        "degree": rec.degree if rec else None,
        "n_needles_found": len(needles),
        "diagnostic": diagnostic,
        "total_seconds": time.perf_counter() - t0,
    })
    log.info("%s: %d needles (%s)", mask_path, len(needles), cfg.technique.value)
    if not needles:
        log.error("%s: %s", mask_path, diagnostic or "no needles detected")
        return EXIT_EMPTY
    return EXIT_OK


def _run_one_safe(args) -> tuple[int, str | None]:
    try:
        return _run_one(*args), None
    except (NeedleKitError, OSError) as exc:
        return EXIT_ERROR, str(exc)


def cmd_reconstruct(ns) -> int:
    cfg = _load_config(ns.config)
    if ns.technique is not None:
        cfg.technique = Technique(ns.technique)
    if ns.n_needles is not None:
        cfg.n_needles = ns.n_needles
    if ns.seed is not None:
        cfg.seed = ns.seed
    masks = ns.mask or cfg.mask
    out = ns.out or cfg.out
    if not masks:
        raise FormatError("no input mask given", "command line", "--mask")
    if out is None:
        raise FormatError("no output directory given", "command line", "--out")
    cfg.validate()
    if len(masks) == 1:
        jobs = [(masks[0], out, cfg)]
    else:
        jobs = [(m, str(Path(out) / io.stem(m)), cfg) for m in masks]
    if ns.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=ns.jobs) as pool:
            results = list(pool.map(_run_one_safe, jobs))
    else:
        results = [_run_one_safe(j) for j in jobs]
    for code, msg in results:
        if msg:
            print(f"error: {msg}", file=sys.stderr)
    codes = [c for c, _ in results]
    if EXIT_ERROR in codes:
        return EXIT_ERROR
    return EXIT_EMPTY if EXIT_EMPTY in codes else EXIT_OK


def cmd_evaluate(ns) -> int:
    preds = io.read_needles(ns.pred)
    refs = io.read_needles(ns.ref)
    report = evaluate(preds, refs, ns.gate_mm)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.csv").write_text(report.to_csv())
    log.info("NF=%d FP=%d FN=%d", report.nf, report.fp, report.fn)
    return EXIT_OK


def _synth_config(path):
    if path is None:
        return PhantomConfig(), ErrorProfile.preset("clean")
    doc = io._load_json(Path(path))
    if not isinstance(doc, dict):
        raise FormatError("config must be a JSON object", str(path), "$")
    unknown = set(doc) - {"phantom", "profile"}
    if unknown:
        raise FormatError("unknown key", str(path), sorted(unknown)[0])
    try:
        cfg = PhantomConfig.from_dict(doc.get("phantom", {}))
    except (NeedleKitError, TypeError, KeyError) as exc:
        raise FormatError(str(exc), str(path), "phantom") from None
    prof = doc.get("profile", "clean")
    try:
        profile = ErrorProfile.preset(prof) if isinstance(prof, str) else ErrorProfile.from_dict(prof)
    except (NeedleKitError, TypeError, ValueError) as exc:
        raise FormatError(str(exc), str(path), "profile") from None
    return cfg, profile


def cmd_synth(ns) -> int:
    cfg, profile = _synth_config(ns.config)
    ph = generate_phantom(cfg, ns.seed)
    mask, manifest = inject_errors(ph.mask, ph.needles, profile, ns.seed, ph.meta, cfg.dilation_radius_mm)
    out = Path(ns.out)
    io.write_mask(out / "mask.json", mask, ph.meta)
    refs = [{"points_mm": n.points_mm.tolist(), "degree": n.curve.degree,
             "coeff_x": list(n.curve.coeff_x), "coeff_y": list(n.curve.coeff_y)} for n in ph.needles]
    io.write_json(out / "ref_needles.json", refs)
    io.write_json(out / "manifest.json", {"seed": ns.seed, "phantom": config_dict(cfg),
                                          "profile": profile_dict(profile), "errors": manifest})
    return EXIT_OK


def cmd_label(ns) -> int:
    if ns.like:
        meta = io.read_header(ns.like)
    elif ns.dims:
        spacing = tuple(ns.spacing_mm) if ns.spacing_mm else DEFAULT_META.spacing_mm
        meta = VolumeMeta(tuple(ns.dims), spacing)
    else:
        meta = DEFAULT_META
    mask = np.zeros(meta.dims, dtype=bool)
    for pts in io.read_control_points(ns.points):
        mask |= voxelize(pts, meta, ns.radius_mm)
    io.write_mask(Path(ns.out) / "label.json", mask, meta)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="needlekit", description="Needle reconstruction from binary masks.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("reconstruct", help="reconstruct needles from a mask")
    r.add_argument("--mask", nargs="+", help="mask header JSON (several allowed)")
    r.add_argument("--technique", choices=[t.value for t in Technique])
    r.add_argument("--n-needles", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--config")
    r.add_argument("--out")
    r.add_argument("--jobs", type=int, default=1, help="parallel workers over masks")
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("evaluate", help="compare predicted and reference needles")
    e.add_argument("--pred", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--gate-mm", type=float, default=10.0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("synth", help="generate a phantom with injected errors")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    lab = sub.add_parser("label", help="reference mask from annotated control points")
    lab.add_argument("--points", required=True)
    lab.add_argument("--radius-mm", type=float, default=1.0)
    lab.add_argument("--out", required=True)
    lab.add_argument("--like", help="take volume geometry from this mask header")
    lab.add_argument("--dims", type=int, nargs=3)
    lab.add_argument("--spacing-mm", type=float, nargs=3)
    lab.set_defaults(func=cmd_label)
    return p


def main(argv=None) -> int:
    _setup_logging()
    ns = build_parser().parse_args(argv)
    try:
        return ns.func(ns)
    except (NeedleKitError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
