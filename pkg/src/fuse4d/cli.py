"""Command line front end.

Exit codes: 0 success, 1 usage or validation error, 2 data or compute error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

import numpy as np

from fuse4d import __version__
from fuse4d.baselines import KINDS, apply_baseline_sequence, standard_method
from fuse4d.core import InvalidInputError
from fuse4d.flow import FlowParams
from fuse4d.fusion import FusionParams, fuse_sequence
from fuse4d.io import LoadError, read_sequence, write_report, write_sequence
from fuse4d.metrics import (
    FitFailure,
    MetricsReport,
    MlesacParams,
    ReportRow,
    RoughnessParams,
    evaluate_sequence,
    fit_noise_decay,
    format_params,
)
from fuse4d.synth import (
    FULL_DEPTH,
    FULL_RADIUS,
    FULL_SIZE,
    NoiseSpec,
    SphereSceneSpec,
    add_noise,
    gen_falling_sphere,
    gen_textured_plane,
    scaled_intrinsics,
)

log = logging.getLogger("fuse4d")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
PROVENANCE = "provenance.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _env_threads() -> int:
    raw = os.environ.get("FUSE4D_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _odd(text: str) -> int:
    n = int(text)
    if n < 1 or n % 2 == 0:
        raise argparse.ArgumentTypeError("frames-fused must be odd")
    return n


def _roi(text: str):
    parts = text.split(",")
    if len(parts) != 4:
        raise argparse.ArgumentTypeError("roi needs x0,y0,x1,y1")
    return tuple(int(p) for p in parts)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fuse4d", description="Motion-compensated multi-frame depth denoising.")
    p.add_argument("--version", action="version", version=f"fuse4d {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic sequence")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--scene", choices=("sphere", "plane"), default="sphere")
    s.add_argument("--frames", type=int, default=16)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--radius-mm", type=float, help="default keeps the reference angular size")
    s.add_argument("--center-depth-mm", type=float, help="sphere center / plane depth")
    s.add_argument("--fall-px", type=float, default=2.0)
    s.add_argument("--depth-noise-mm", type=float, default=0.0)
    s.add_argument("--intensity-noise", type=float, default=0.0)
    s.add_argument("--texture-noise", action="store_true",
                   help="scale depth noise by the local intensity gradient")
    s.add_argument("--outlier-fraction", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)

    f = sub.add_parser("fuse", help="denoise a sequence by multi-frame fusion")
    f.add_argument("--in", dest="inp", required=True, type=Path)
    f.add_argument("--out", required=True, type=Path)
    f.add_argument("--frames-fused", type=_odd, default=9)
    f.add_argument("--theta", type=float, default=2.0, help="forward-backward threshold (px)")
    f.add_argument("--fb-mode", choices=("px", "mm"), default="px")
    f.add_argument("--theta-mm", type=float, default=2.0)
    f.add_argument("--spatial-radius", type=int, default=2)
    f.add_argument("--delta-d", type=float, help="spatial sigma (mm)")
    f.add_argument("--delta-g", type=float, default=0.1, help="intensity sigma")
    f.add_argument("--delta-f", type=float, help="temporal sigma (frames)")
    f.add_argument("--delta-h", type=float, help="hole-fill sigma (mm)")
    f.add_argument("--motion-sigma", type=float, default=3.0, help="motion smoothing (px), 0 disables")
    f.add_argument("--no-fill", action="store_true")
    f.add_argument("--patch-radius", type=int, default=3)
    f.add_argument("--search-radius", type=int, default=4)
    f.add_argument("--smoothness", type=float, default=0.005)
    f.add_argument("--flow-iterations", type=int, default=4)
    f.add_argument("--threads", type=int, default=_env_threads())

    b = sub.add_parser("baseline", help="apply a reference denoiser")
    b.add_argument("--in", dest="inp", required=True, type=Path)
    b.add_argument("--out", required=True, type=Path)
    b.add_argument("--method", required=True, help="one of " + ", ".join(KINDS))
    b.add_argument("--window-radius", type=int)
    b.add_argument("--sigma-spatial", type=float)
    b.add_argument("--sigma-range", type=float)
    b.add_argument("--sigma-intensity", type=float)
    b.add_argument("--eps-guided", type=float)
    b.add_argument("--temporal-radius", type=int)
    b.add_argument("--iterations", type=int)

    e = sub.add_parser("eval", help="roughness / shape-correctness report")
    e.add_argument("--in", dest="inp", required=True, type=Path, action="append")
    e.add_argument("--csv", required=True, type=Path)
    e.add_argument("--roi", type=_roi, help="x0,y0,x1,y1 (half-open)")
    e.add_argument("--window", type=int, default=7)
    e.add_argument("--signed", action="store_true")
    e.add_argument("--gt-radius", help="radius in mm, or 'auto' to read the manifest")
    e.add_argument("--mlesac-iterations", type=int, default=500)
    e.add_argument("--mlesac-sigma", type=float, default=1.0)
    e.add_argument("--seed", type=int, default=0)

    q = sub.add_parser("pipeline", help="run a full synthetic sweep and plot it")
    q.add_argument("--experiment", required=True, help="fig2, fig3 or fig4")
    q.add_argument("--scale", default="desk", help="desk or paper")
    q.add_argument("--out", required=True, type=Path)
    q.add_argument("--frames", type=int)
    q.add_argument("--seed", type=int, default=1)
    q.add_argument("--threads", type=int, default=_env_threads())
    return p


# ---------------------------------------------------------------- helpers

def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (np.integer, np.floating)):
        return v.item()
    return v


def write_provenance(path: Path, command: str, parameters: dict, inputs=()) -> Path:
    """Everything needed to rerun: tool version, parameters, seed, inputs."""
    record = {
        "tool": "fuse4d",
        "version": __version__,
        "command": command,
        "inputs": [str(i) for i in inputs],
        "parameters": _jsonable(parameters),
        "numpy": np.__version__,
        "python": platform.python_version(),
    }
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _read_provenance(directory: Path) -> dict:
    p = directory / PROVENANCE
    if not p.exists():
        return {}
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return {}


# ---------------------------------------------------------------- commands
# Each command validates into a plan (errors -> exit 1) and returns a
# callable that does the work (errors -> exit 2).

def _plan_synth(a):
    if a.frames < 1 or a.size < 8:
        raise UsageError("--frames must be >= 1 and --size >= 8")
    noise = NoiseSpec(a.depth_noise_mm, a.intensity_noise, a.texture_noise, a.outlier_fraction, seed=a.seed)
    k = scaled_intrinsics(a.size)
    depth = a.center_depth_mm if a.center_depth_mm is not None else FULL_DEPTH * a.size / FULL_SIZE
    if a.scene == "sphere":
        radius = a.radius_mm if a.radius_mm is not None else FULL_RADIUS * a.size / FULL_SIZE
        spec = SphereSceneSpec(radius_mm=radius, center_depth_mm=depth, size=a.size,
                               fall_px=a.fall_px, frames=a.frames)
        params = {"scene": "sphere", **asdict(spec)}
    else:
        if depth <= 0:
            raise UsageError("--center-depth-mm must be positive")
        spec = None
        params = {"scene": "plane", "size": a.size, "depth_mm": depth, "frames": a.frames}
    params.update(noise=asdict(noise), intrinsics=asdict(k))

    def run():
        if spec is not None:
            seq = gen_falling_sphere(spec, k)
        else:
            seq = gen_textured_plane(a.size, depth, k=k, frames=a.frames)
        seq = add_noise(seq, noise)
        write_sequence(seq, a.out)
        write_provenance(a.out / PROVENANCE, "synth", params)
        return seq

    return run


def _plan_fuse(a):
    fp = FusionParams(temporal_window=a.frames_fused, spatial_radius=a.spatial_radius, delta_d=a.delta_d,
                      delta_g=a.delta_g, delta_f=a.delta_f, delta_h=a.delta_h, theta=a.theta,
                      fb_mode=a.fb_mode, theta_mm=a.theta_mm, motion_sigma=a.motion_sigma,
                      fill=not a.no_fill)
    flow = FlowParams(patch_radius=a.patch_radius, search_radius=a.search_radius, smoothness=a.smoothness,
                      iterations=a.flow_iterations)
    if a.threads < 1:
        raise UsageError("--threads must be >= 1")

    def run():
        seq = read_sequence(a.inp)
        out = fuse_sequence(seq, fp, flow_params=flow, threads=a.threads)
        write_sequence(out, a.out)
        # threads are echoed but never change results
        write_provenance(a.out / PROVENANCE, "fuse",
                         {"fusion": asdict(fp), "flow": asdict(flow), "frames_fused": a.frames_fused,
                          "threads": a.threads}, [a.inp])
        return out

    return run


def _plan_baseline(a):
    if a.method not in KINDS:
        raise UsageError(f"unknown method {a.method!r}; expected one of {', '.join(KINDS)}")
    keys = ("window_radius", "sigma_spatial", "sigma_range", "sigma_intensity", "eps_guided",
            "temporal_radius", "iterations")
    overrides = {k: getattr(a, k) for k in keys if getattr(a, k) is not None}
    method = standard_method(a.method, **overrides)

    def run():
        seq = read_sequence(a.inp)
        out = apply_baseline_sequence(method, seq)
        write_sequence(out, a.out)
        write_provenance(a.out / PROVENANCE, "baseline", {"method": asdict(method),
                                                          "form": "standard"}, [a.inp])
        return out

    return run


def _plan_eval(a):
    rp = RoughnessParams(window=a.window, roi=a.roi, absolute=not a.signed)
    mlesac = MlesacParams(iterations=a.mlesac_iterations, sigma=a.mlesac_sigma, seed=a.seed)
    gt = a.gt_radius
    if gt is not None and gt != "auto":
        try:
            gt = float(gt)
        except ValueError:
            raise UsageError("--gt-radius must be a number or 'auto'") from None
        if not gt > 0:
            raise UsageError("--gt-radius must be positive")

    def run():
        reports, curve = [], []
        for path in a.inp:
            seq = read_sequence(path)
            radius = gt
            if gt == "auto":
                truth = seq.ground_truth
                if truth is None or truth.shape != "sphere":
                    raise InvalidInputError(f"{path}: no sphere ground truth in manifest")
                radius = truth.radius_mm
            prov = _read_provenance(Path(path))
            n = prov.get("parameters", {}).get("frames_fused")
            extra = {"frames_fused": n} if n is not None else {}
            rep = evaluate_sequence(seq, Path(path).name, rp, radius, mlesac, extra_params=extra)
            reports.append(rep)
            if n is not None:
                curve.append((n, rep.summary().mean_roughness_mm))
        merged = MetricsReport("eval", rows=[r for rep in reports for r in rep.rows])
        if len({n for n, _ in curve}) >= 3:
            fit = fit_noise_decay(curve)
            merged.rows.append(ReportRow("decay", "frames_fused", sweep="frames_fused",
                                         delta_s_mm=fit.delta_s, delta_t_mm=fit.delta_t,
                                         r_squared=fit.r_squared,
                                         status="degenerate" if fit.degenerate else "ok",
                                         params=format_params({"points": len(curve)})))
        a.csv.parent.mkdir(parents=True, exist_ok=True)
        write_report(merged, a.csv)
        write_provenance(a.csv.with_name(a.csv.name + ".provenance.json"), "eval",
                         {"roughness": asdict(rp), "mlesac": asdict(mlesac), "gt_radius": gt}, a.inp)
        return merged

    return run


def _plan_pipeline(a):
    from fuse4d.experiments import EXPERIMENTS, SCALES, ExperimentConfig, run_experiment

    if a.experiment not in EXPERIMENTS:
        raise UsageError(f"unknown experiment {a.experiment!r}; expected one of {', '.join(EXPERIMENTS)}")
    if a.scale not in SCALES:
        raise UsageError(f"unknown scale {a.scale!r}; expected one of {', '.join(SCALES)}")
    if a.threads < 1:
        raise UsageError("--threads must be >= 1")
    cfg = ExperimentConfig(a.experiment, scale=a.scale, frames=a.frames, seed=a.seed, threads=a.threads)

    def run():
        from fuse4d.plotting import plot_report

        a.out.mkdir(parents=True, exist_ok=True)
        csv_path = a.out / f"{a.experiment}.csv"
        png_path = a.out / f"{a.experiment}.png"
        try:
            report = run_experiment(cfg, progress=log.info)
            write_report(report, csv_path)
            plot_report(a.experiment, report, png_path)
            write_provenance(a.out / f"provenance_{a.experiment}.json", "pipeline", cfg.echo())
        except BaseException:
            for p in (csv_path, png_path):
                if p.exists():
                    p.unlink()
            raise
        return report

    return run


PLANS = {"synth": _plan_synth, "fuse": _plan_fuse, "baseline": _plan_baseline,
         "eval": _plan_eval, "pipeline": _plan_pipeline}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        run = PLANS[args.command](args)
    except (UsageError, InvalidInputError) as e:
        print(f"fuse4d {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        run()
    except (LoadError, InvalidInputError, FitFailure, OSError, ValueError, ArithmeticError) as e:
        print(f"fuse4d {args.command}: failed: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
