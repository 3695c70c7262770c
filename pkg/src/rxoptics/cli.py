"""Command-line front end: ``rxoptics design-lens | design-ar | assess | sweep``.

Exit codes: 0 ok, 1 configuration error, 2 no convergence or infeasible design.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys

from .config import DesignConfig, load_config, load_params
from .errors import ConfigError, InfeasibleConstraints, NotConverged, OpticsError

log = logging.getLogger("rxoptics")

METRICS = ("fov", "eyebox", "mtf", "spots", "focus", "resolution-profile")
EXIT_OK, EXIT_CONFIG, EXIT_DESIGN = 0, 1, 2

THROUGH_FOCUS_MM = (-0.10, -0.05, 0.0, 0.05, 0.10)
FOCUS_OFFSETS_MM = tuple(round(-0.5 + 0.1 * i, 10) for i in range(11))


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _finite(x):
    return x if isinstance(x, (int, float)) and math.isfinite(x) else None


def _config(args):
    return load_config(args.config) if args.config else DesignConfig()


def _outdir(args):
    os.makedirs(args.out, exist_ok=True)
    return args.out


# --------------------------------------------------------------------------


def cmd_design_lens(args):
    from .analysis import through_focus, write_spots_csv
    from .designer.lens import design_prescription_lens
    from .eye import build_eye
    from .tracer import Field

    cfg = _config(args)
    out = _outdir(args)
    history = []
    code = EXIT_OK
    try:
        design = design_prescription_lens(
            cfg.rx, cfg.lens_thickness_mm, cfg.lens_material, max_iter=cfg.max_iters, ftol=cfg.tol,
            threads=args.threads, history=history,
        )
    except NotConverged as exc:
        log.error("%s", exc)
        design, code = exc.result, EXIT_DESIGN
    _write_json(os.path.join(out, "lens_design.json"), design.to_dict())
    eye = build_eye(cfg.rx)
    spots, report = [], {"prescription": cfg.rx.to_dict(), "eye_relief_mm": {}}
    for d_e in cfg.eye_reliefs_mm:
        system = eye.with_front_optics(design.surfaces(d_e))
        s = through_focus(system, Field(), THROUGH_FOCUS_MM)
        spots.extend(s)
        report["eye_relief_mm"][f"{d_e:g}"] = {f"{x.offset_mm:+.2f}": x.rms_um for x in s}
    naked = through_focus(eye.system, Field(), THROUGH_FOCUS_MM)
    report["naked_eye_rms_um"] = {f"{x.offset_mm:+.2f}": x.rms_um for x in naked}
    with open(os.path.join(out, "through_focus_spots.csv"), "w") as fh:
        write_spots_csv(spots, fh)
    _write_json(os.path.join(out, "spot_report.json"), report)
    return code


def cmd_design_ar(args):
    from .designer.lm import write_history_csv
    from .designer.merit import ARMeritSpec
    from .designer.optimize import optimize

    cfg = _config(args)
    out = _outdir(args)
    seed = cfg.design_params(load_params(args.seed) if args.seed else None)
    lens = None
    if args.lens:
        from .designer.lens import PrescriptionLensDesign

        try:
            with open(args.lens) as fh:
                lens = PrescriptionLensDesign.from_dict(json.load(fh))
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot read lens design {args.lens}: {exc}") from exc
    spec = ARMeritSpec(eye_reliefs_mm=cfg.eye_reliefs_mm)
    history = []
    code = EXIT_OK
    try:
        res = optimize(seed, frozen=cfg.frozen, spec=spec, lens=lens, rx=cfg.rx, max_iter=cfg.max_iters,
                       ftol=cfg.tol, threads=args.threads, history=history)
        params, message = res.params, res.message
    except (NotConverged, InfeasibleConstraints) as exc:
        log.error("%s", exc)
        res = exc.result
        params = getattr(res, "params", seed)
        message = str(exc)
        code = EXIT_DESIGN
    _write_json(os.path.join(out, "design_params.json"), params.to_dict())
    with open(os.path.join(out, "optimization_log.csv"), "w") as fh:
        write_history_csv(history, fh)
    _write_json(os.path.join(out, "design_summary.json"), {
        "message": message,
        "seed_merit": _finite(getattr(res, "seed_merit", None)),
        "final_merit": _finite(getattr(res, "merit", None)),
        "iterations": len(history),
        "exit_code": code,
    })
    return code


def _parse_metrics(text):
    items = [m.strip() for m in (text or "").split(",") if m.strip()]
    if not items:
        raise ConfigError(f"--metrics needs at least one of {', '.join(METRICS)}")
    bad = [m for m in items if m not in METRICS]
    if bad:
        raise ConfigError(f"unknown metrics {bad}; choose from {', '.join(METRICS)}")
    return list(dict.fromkeys(items))


def cmd_assess(args):
    from . import analysis as A
    from .designer.ar import build_ar_system
    from .tracer import DisplayField

    metrics = _parse_metrics(args.metrics)
    cfg = _config(args)
    params = load_params(args.params or args.seed or "prototype")
    out = _outdir(args)
    ar = build_ar_system(params, rx=cfg.rx)
    report = {"params": args.params or args.seed or "prototype", "eye_relief_mm": ar.eye_relief_mm}
    if "fov" in metrics:
        f = A.fov(ar)
        report["fov"] = {"horizontal_deg": f.horizontal_deg, "vertical_deg": f.vertical_deg,
                         "traceable_display_half_extent_mm": f.edges_mm}
    if "eyebox" in metrics:
        e = A.eyebox(ar)
        report["eyebox"] = {"width_mm": e.width_mm, "height_mm": e.height_mm, "step_mm": e.step_mm}
    if "mtf" in metrics:
        m = A.center_mtf(ar)
        report["mtf"] = {"center_mtf50_cpd": _finite(m.mtf50_cpd()), "nyquist_cpd": A.nyquist_cpd(ar)}
        with open(os.path.join(out, "mtf.csv"), "w") as fh:
            fh.write("frequency_cpd,sagittal,tangential\n")
            for row in zip(m.frequencies_cpd, m.sagittal, m.tangential):
                fh.write(",".join(f"{v:.9g}" for v in row) + "\n")
    if "spots" in metrics:
        w, h = params.display_width_mm / 4, params.display_height_mm / 4
        spots = []
        for pt in ((0.0, 0.0), (w, 0.0), (-w, 0.0), (0.0, h), (0.0, -h)):
            try:
                spots.append(A.spot(ar.system, DisplayField(*pt)))
            except OpticsError as exc:
                log.warning("spot at display %s: %s", pt, exc)
        report["spots"] = [{"display_mm": [s.field.x_mm, s.field.y_mm], "rms_um": s.rms_um,
                            "centroid_mm": list(s.centroid_mm), "rays": s.n_rays} for s in spots]
        with open(os.path.join(out, "spots.csv"), "w") as fh:
            A.write_spots_csv(spots, fh)
        if spots:
            A.plot_spots_svg(spots, os.path.join(out, "spots.svg"))
    if "focus" in metrics:
        fm = A.focus_mapping(params, FOCUS_OFFSETS_MM, rx=cfg.rx)
        report["focus"] = {
            "display_offset_mm": list(fm.offsets_mm),
            "corrected_scene_D": list(fm.corrected_diopters),
            "real_scene_D": list(fm.real_diopters),
            "strictly_monotone": fm.strictly_monotone(),
        }
    if "resolution-profile" in metrics:
        rp = A.resolution_profile(ar)
        report["resolution_profile"] = {
            "eccentricity_deg": list(rp.eccentricities_deg),
            "cpd": [_finite(v) for v in rp.cpd],
            "optical_mtf50_cpd": [_finite(v) for v in rp.optical_cpd],
            "nyquist_cpd": rp.nyquist_cpd,
        }
    _write_json(os.path.join(out, "assessment.json"), report)
    return EXIT_OK


def cmd_sweep(args):
    from . import analysis as A

    cfg = _config(args)
    params = load_params(args.params or args.seed or "prototype")
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--values must be comma-separated numbers: {exc}") from exc
    out = _outdir(args)
    kwargs = {"max_iter": cfg.max_iters, "ftol": cfg.tol}
    curve = A.trade_sweep(params, args.variable, values, rx=cfg.rx, reoptimize=args.reoptimize,
                          optimize_kwargs=kwargs, threads=args.threads)
    with open(os.path.join(out, "trade_curve.csv"), "w") as fh:
        A.write_trade_csv(curve, fh)
    A.plot_trade_svg(curve, os.path.join(out, "trade_curve.svg"))
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="rxoptics", description="Prescription-embedded AR display design.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON design config")
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("--seed", help="'prototype' or a design-parameter JSON file")
    common.add_argument("--threads", type=int, default=1, help="worker threads for tracing")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("design-lens", parents=[common], help="step 1: prescription lens")
    s.set_defaults(func=cmd_design_lens)
    s = sub.add_parser("design-ar", parents=[common], help="step 2: AR geometry")
    s.add_argument("--lens", help="lens design JSON from design-lens (default: closed-form lens)")
    s.set_defaults(func=cmd_design_ar)
    s = sub.add_parser("assess", parents=[common], help="display metrics of a design")
    s.add_argument("params", nargs="?", help="design-parameter JSON (default: --seed or prototype)")
    s.add_argument("--metrics", required=True, help=f"comma list from {', '.join(METRICS)}")
    s.set_defaults(func=cmd_assess)
    s = sub.add_parser("sweep", parents=[common], help="FOV and eye-box trade curve")
    s.add_argument("params", nargs="?", help="design-parameter JSON (default: --seed or prototype)")
    s.add_argument("--variable", required=True, choices=["t_l", "d_e"])
    s.add_argument("--values", required=True, help="comma-separated, strictly increasing")
    s.add_argument("--no-reoptimize", dest="reoptimize", action="store_false",
                   help="evaluate the swept geometry without re-optimising")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    if args.threads < 1:
        log.error("--threads must be at least 1")
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (NotConverged, InfeasibleConstraints, OpticsError) as exc:
        log.error("%s", exc)
        return EXIT_DESIGN


if __name__ == "__main__":
    sys.exit(main())
