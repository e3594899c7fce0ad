"""Command-line entry point.

Commands:

    idvo synth         render a synthetic dataset with ground truth
    idvo optimize      fit snippets of a dataset and chain the trajectory
    idvo eval          ate / depth / smoothness reports
    idvo gradcheck     finite-difference verification of every loss term
    idvo mask-preview  export a hard edge mask as an 8-bit PNG

Configuration is a flat key=value file (# comments allowed); environment
variables IDVO_<KEY> override the file, command-line flags override both.
Unknown keys are rejected. Every command echoes the fully resolved
configuration into the output directory so a run can be reproduced from it.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O error.
"""

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import dataset_io, evaluation, optimizer
from .dataset_io import LoadError, ParseError, SynthConfig
from .masking import DhemParams, ExplainabilityField, build_dhem, combine, mask_to_image
from .objective import GRAD_CHECK_SELECTORS, InertiaParams, LossWeights, grad_check
from .optimizer import OptimizerConfig


class ConfigError(ValueError):
    """Bad configuration key or value."""


def _parse_bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_scales(s):
    if isinstance(s, (tuple, list)):
        return tuple(int(x) for x in s)
    return tuple(int(x) for x in str(s).replace(",", " ").split())


def _parse_resize(s):
    if not s:
        return None
    if isinstance(s, (tuple, list)):
        return (int(s[0]), int(s[1]))
    m = str(s).lower().replace("x", " ").split()
    if len(m) != 2:
        raise ConfigError(f"expected WIDTHxHEIGHT, got {s!r}")
    return (int(m[0]), int(m[1]))


# key -> (parser, default, help); defaults follow the reference values where
# the method defines one
CONFIG_KEYS = {
    "chi": (float, 100.0, "angular weight inside the acceleration scalar"),
    "a_typ": (float, 2.0, "typical acceleration magnitude (per frame^2)"),
    "j_typ": (float, 0.5, "typical jerk magnitude (per frame^3)"),
    "inertia_symmetric": (_parse_bool, True, "penalize both acceleration signs"),
    "w_inertia": (float, 1.0, "inertia loss weight"),
    "w_rec": (float, 1.0, "reconstruction loss weight"),
    "w_ssim": (float, 0.2, "SSIM loss weight"),
    "w_3d": (float, 0.1, "3D alignment loss weight"),
    "w_mask": (float, 0.15, "mask regularization weight"),
    "scales": (_parse_scales, (1, 2, 4, 8), "pyramid downsample factors"),
    "lr": (float, 2e-4, "Adam learning rate"),
    "beta1": (float, 0.9, "Adam first-moment decay"),
    "beta2": (float, 0.999, "Adam second-moment decay"),
    "epsilon": (float, 1e-8, "Adam denominator offset"),
    "iters": (int, 300, "optimization iterations per snippet"),
    "snippet_len": (int, 5, "frames per snippet"),
    "stride": (int, 0, "snippet window stride (0 = snippet_len - 1)"),
    "pair_mode": (str, "both", "warp sources per pair: prev, next or both"),
    "d_min": (float, 0.1, "lower depth bound"),
    "d_max": (float, 100.0, "upper depth bound"),
    "d_init": (float, 10.0, "initial depth"),
    "delta0": (float, 0.05, "initial/gauge forward step"),
    "gauge_fix": (_parse_bool, True, "renormalize the first pair's translation"),
    "tau_static": (float, 0.01, "static-frame threshold (mean abs diff at 1/8 scale)"),
    "static_filter": (_parse_bool, True, "drop static frames before snippetting"),
    "use_dhem": (_parse_bool, True, "apply the speed-dependent hard edge mask"),
    "dhem_kv": (float, 0.02, "mask width per unit speed"),
    "dhem_ks": (float, 0.5, "extra side width per unit steering rate"),
    "dhem_wmax": (float, 0.25, "mask width cap (fraction of each dimension)"),
    "dhem_refresh": (int, 25, "iterations between mask rebuilds"),
    "depth_cap": (float, 80.0, "evaluation depth cap"),
    "seed": (int, 0, "random seed"),
    "threads": (int, 1, "snippet worker threads"),
    "resize": (_parse_resize, None, "dataset resize target WIDTHxHEIGHT"),
    "dataset": (str, "", "dataset directory"),
    "out": (str, "", "output directory"),
    "synth_width": (int, 64, "synthetic image width"),
    "synth_height": (int, 32, "synthetic image height"),
    "synth_frames": (int, 20, "synthetic frame count"),
    "synth_fx": (float, 0.0, "synthetic focal length (0 = 0.9 * width)"),
    "synth_base_depth": (float, 12.0, "synthetic plane distance"),
    "synth_plane_tilt": (float, 0.15, "synthetic plane tilt range"),
    "synth_texture_waves": (int, 6, "synthetic texture component count"),
    "synth_texture_min_wl": (float, 10.0, "synthetic minimum texture wavelength (px)"),
    "synth_texture_amp": (float, 0.45, "synthetic texture amplitude"),
    "synth_speed": (float, 0.3, "synthetic speed per frame"),
    "synth_yaw_rate": (float, 0.0, "synthetic heading rate per frame"),
    "synth_drift": (float, 0.0, "synthetic motion drift angle off the optical axis"),
    "synth_jitter_trans": (float, 0.0, "synthetic translational jitter sigma"),
    "synth_jitter_rot": (float, 0.0, "synthetic rotational jitter sigma"),
    "synth_dt": (float, 0.1, "synthetic frame interval (s)"),
}

ABLATIONS = {
    "no-inertia": {"w_inertia": 0.0},
    "no-dhem": {"use_dhem": False},
}


@dataclass
class RunConfig:
    """Fully resolved configuration (defaults + file + env + flags)."""

    values: dict

    def __getattr__(self, name):
        try:
            return self.values[name]
        except KeyError:
            raise AttributeError(name) from None

    def weights(self) -> LossWeights:
        return LossWeights(
            w_inertia=self.w_inertia, w_rec=self.w_rec, w_ssim=self.w_ssim,
            w_3d=self.w_3d, w_mask=self.w_mask, scales=self.scales,
        )

    def inertia(self) -> InertiaParams:
        return InertiaParams(
            chi=self.chi, a_typ=self.a_typ, j_typ=self.j_typ,
            symmetric=self.inertia_symmetric,
        )

    def dhem(self) -> DhemParams:
        return DhemParams(
            k_v=self.dhem_kv, k_s=self.dhem_ks, w_max=self.dhem_wmax,
            refresh=self.dhem_refresh,
        )

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(
            lr=self.lr, beta1=self.beta1, beta2=self.beta2, epsilon=self.epsilon,
            iters=self.iters, snippet_len=self.snippet_len, weights=self.weights(),
            inertia=self.inertia(), dhem=self.dhem(), tau_static=self.tau_static,
            seed=self.seed, pair_mode=self.pair_mode, d_min=self.d_min,
            d_max=self.d_max, d_init=self.d_init, delta0=self.delta0,
            gauge_fix=self.gauge_fix, use_dhem=self.use_dhem,
        )

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            width=self.synth_width, height=self.synth_height, n_frames=self.synth_frames,
            seed=self.seed, fx=self.synth_fx if self.synth_fx > 0 else None,
            base_depth=self.synth_base_depth, plane_tilt=self.synth_plane_tilt,
            texture_waves=self.synth_texture_waves,
            texture_min_wavelength_px=self.synth_texture_min_wl,
            texture_amplitude=self.synth_texture_amp, speed=self.synth_speed,
            yaw_rate=self.synth_yaw_rate, drift_angle=self.synth_drift,
            jitter_trans=self.synth_jitter_trans, jitter_rot=self.synth_jitter_rot,
            dt=self.synth_dt,
        )

    def echo_lines(self):
        out = []
        for key in sorted(self.values):
            v = self.values[key]
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif v is None:
                v = ""
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out.append(f"{key}={v}")
        return out

    def echo_to(self, out_dir):
        path = Path(out_dir) / "config_resolved.txt"
        path.write_text("\n".join(self.echo_lines()) + "\n")
        return path


def _parse_config_file(path):
    out = {}
    text = Path(path).read_text()
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{i}: expected KEY=VALUE, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{i}: unknown config key {key!r}")
        out[key] = val
    return out


def resolve_config(config_path=None, overrides=None, env=None) -> RunConfig:
    """Defaults, then file, then IDVO_* environment variables, then overrides."""
    env = os.environ if env is None else env
    values = {k: default for k, (_, default, _) in CONFIG_KEYS.items()}
    raw = {}
    if config_path:
        raw.update(_parse_config_file(config_path))
    for key in CONFIG_KEYS:
        env_key = "IDVO_" + key.upper()
        if env_key in env:
            raw[key] = env[env_key]
    for key, val in raw.items():
        parser = CONFIG_KEYS[key][0]
        try:
            values[key] = parser(val)
        except (ValueError, TypeError) as err:
            raise ConfigError(f"config key {key}={val!r}: {err}") from None
    for key, val in (overrides or {}).items():
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        if val is not None:
            values[key] = val
    return RunConfig(values=values)


def _apply_ablations(cfg: RunConfig, ablate):
    for name in ablate or []:
        if name not in ABLATIONS:
            raise ConfigError(
                f"unknown ablation {name!r}; available: {', '.join(sorted(ABLATIONS))}"
            )
        cfg.values.update(ABLATIONS[name])


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    cfg = resolve_config(args.config, _flag_overrides(args))
    out = Path(args.out or cfg.out)
    if not str(out) or str(out) == ".":
        pass
    out.mkdir(parents=True, exist_ok=True)
    scfg = cfg.synth_config()
    seq = dataset_io.synth_generate(scfg)
    dataset_io.write_sequence(seq, out, cfg=scfg)
    cfg.echo_to(out)
    print(f"wrote {len(seq.frames)} frames to {out}")
    print(f"manifest: {(out / 'manifest.json').read_text().strip()}")
    return 0


def _optimize_one(idx, snippet, ocfg, out):
    state, trace = optimizer.optimize_snippet(snippet, ocfg)
    optimizer.save_snippet_results(out, idx, state, trace)
    return state, trace


def cmd_optimize(args):
    cfg = resolve_config(args.config, _flag_overrides(args))
    _apply_ablations(cfg, args.ablate)
    dataset = args.dataset or cfg.dataset
    if not dataset:
        raise ConfigError("no dataset directory given")
    out = Path(args.out or cfg.out or "idvo_out")
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo_to(out)

    seq = dataset_io.load_sequence(dataset, resize=cfg.resize)
    frames = seq.frames
    report = {"kept": list(range(len(frames))), "dropped": []}
    if cfg.static_filter:
        frames, report = optimizer.static_filter(frames, cfg.tau_static)
    (out / "kept_frames.json").write_text(json.dumps(report) + "\n")

    filtered = dataset_io.Sequence(
        frames=frames,
        intrinsics=seq.intrinsics,
        timestamps=np.array([f.timestamp for f in frames]),
    )
    stride = cfg.stride if cfg.stride > 0 else cfg.snippet_len - 1
    snippets = dataset_io.make_snippets(filtered, cfg.snippet_len, stride)
    if not snippets:
        print(f"sequence too short for snippet_len={cfg.snippet_len}; nothing to do")
        return 0

    ocfg = cfg.optimizer_config()
    t0 = time.perf_counter()
    results = [None] * len(snippets)
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            futs = {
                pool.submit(_optimize_one, i, s, ocfg, out): i for i, s in enumerate(snippets)
            }
            for fut in futs:
                results[futs[fut]] = fut.result()
    else:
        for i, s in enumerate(snippets):
            results[i] = _optimize_one(i, s, ocfg, out)

    states = [r[0] for r in results]
    traces = [r[1] for r in results]
    overlap = max(cfg.snippet_len - stride, 0)
    traj = optimizer.chain_snippets(states, overlap=overlap)
    dataset_io.write_kitti_poses(out / "trajectory.txt", traj)

    summary = {
        "snippets": len(snippets),
        "iterations": cfg.iters,
        "wall_time_s": time.perf_counter() - t0,
        "converged": [t.converged for t in traces],
        "aborted": [t.aborted for t in traces],
        "final_totals": [t.iterations[-1]["total"] if t.iterations else None for t in traces],
    }
    (out / "run_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    if any(t.aborted for t in traces):
        bad = [i for i, t in enumerate(traces) if t.aborted]
        print(f"error: snippets {bad} aborted: {[traces[i].abort_reason for i in bad]}")
        return 1
    print(
        f"optimized {len(snippets)} snippets in {summary['wall_time_s']:.1f}s; "
        f"trajectory of {len(traj)} poses -> {out / 'trajectory.txt'}"
    )
    return 0


def cmd_eval(args):
    cfg = resolve_config(args.config, _flag_overrides(args))
    out = Path(args.out or cfg.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo_to(out)

    if args.mode == "ate":
        est = dataset_io.read_kitti_poses(args.est)
        gt = dataset_io.read_kitti_poses(args.gt)
        n = min(len(est), len(gt))
        if len(est) != len(gt):
            print(f"note: trimming to the common {n} poses ({len(est)} est, {len(gt)} gt)")
        report = evaluation.ate_sequence(est[:n], gt[:n], snippet_len=cfg.snippet_len)
        report.write_csv(out / "ate_report.csv")
        print(f"ATE ({cfg.snippet_len}-pose windows): {report.format_line()}")
        return 0

    if args.mode == "depth":
        est_paths = _pfm_paths(args.est)
        gt_paths = _pfm_paths(args.gt)
        if len(est_paths) != len(gt_paths):
            raise LoadError(f"{len(est_paths)} predicted maps vs {len(gt_paths)} ground truth")
        rows = []
        for ep, gp in zip(est_paths, gt_paths):
            rep = evaluation.depth_metrics(
                dataset_io.pfm_read(ep), dataset_io.pfm_read(gp), cap=cfg.depth_cap
            )
            rows.append(rep)
        mean = {
            name: float(np.mean([getattr(r, name) for r in rows]))
            for name in ("abs_rel", "sq_rel", "rmse", "rmse_log")
        }
        with open(out / "depth_report.csv", "w") as fh:
            fh.write("frame,abs_rel,sq_rel,rmse,rmse_log,pixels\n")
            for i, r in enumerate(rows):
                fh.write(f"{i},{r.abs_rel:.9g},{r.sq_rel:.9g},{r.rmse:.9g},{r.rmse_log:.9g},{r.pixels}\n")
            fh.write(
                f"mean,{mean['abs_rel']:.9g},{mean['sq_rel']:.9g},"
                f"{mean['rmse']:.9g},{mean['rmse_log']:.9g},\n"
            )
        print(
            f"Depth over {len(rows)} frames: AbsRel {mean['abs_rel']:.3f}  "
            f"SqRel {mean['sq_rel']:.3f}  RMSE {mean['rmse']:.3f}  RMSElog {mean['rmse_log']:.3f}"
        )
        return 0

    if args.mode == "smoothness":
        est = dataset_io.read_kitti_poses(args.est)
        rep = evaluation.smoothness(est, chi=cfg.chi)
        rep.write_csv(out / "velocity_curve.csv")
        print(f"Smoothness: {rep.format_line()}")
        return 0

    raise ConfigError(f"unknown eval mode {args.mode!r}")


def cmd_gradcheck(args):
    cfg = resolve_config(args.config, _flag_overrides(args))
    failed = []
    for sel in GRAD_CHECK_SELECTORS:
        rep = grad_check(sel, seed=cfg.seed, corrupt=args.corrupt_gradients)
        print(rep.summary())
        if not rep.passed:
            failed.append(sel)
    if failed:
        print(f"FAILED blocks in: {', '.join(failed)}")
        return 1
    print("all gradient checks passed")
    return 0


def cmd_mask_preview(args):
    cfg = resolve_config(args.config, _flag_overrides(args))
    size = cfg.resize or (cfg.synth_width, cfg.synth_height)
    from .geometry import CameraIntrinsics

    k = CameraIntrinsics(
        fx=max(size[0], 1.0), fy=max(size[0], 1.0),
        cx=(size[0] - 1) / 2.0, cy=(size[1] - 1) / 2.0,
        width=size[0], height=size[1],
    )
    hard = build_dhem(args.v, args.yaw_rate, k, cfg.dhem())
    grid = hard.grid
    if args.expl_logit is not None:
        field = ExplainabilityField.constant(size[1], size[0], logit=args.expl_logit)
        grid = combine(hard, field).grid
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataset_io.write_image_png(out, mask_to_image(grid) / 255.0, bits=8)
    print(f"widths (top, bottom, left, right) = {hard.widths} -> {out}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def _pfm_paths(spec):
    p = Path(spec)
    if p.is_dir():
        paths = sorted(p.glob("*.pfm"))
        if not paths:
            raise LoadError(f"{p}: no PFM files")
        return paths
    if not p.is_file():
        raise LoadError(f"{p}: no such file")
    return [p]


def _flag_overrides(args):
    out = {}
    for key in ("seed", "threads", "snippet_len", "iters", "lr"):
        if getattr(args, key.replace("-", "_"), None) is not None:
            out[key] = getattr(args, key)
    if getattr(args, "resize", None):
        out["resize"] = _parse_resize(args.resize)
    if getattr(args, "set", None):
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            key, val = item.split("=", 1)
            if key not in CONFIG_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            out[key] = CONFIG_KEYS[key][0](val)
    return out


def _add_common(p):
    p.add_argument("--config", help="flat key=value configuration file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--snippet-len", dest="snippet_len", type=int, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--resize", help="WIDTHxHEIGHT resize target")
    p.add_argument(
        "--set", action="append", metavar="KEY=VALUE", help="override any config key"
    )


def build_parser():
    ap = argparse.ArgumentParser(prog="idvo", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic dataset with ground truth")
    _add_common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("optimize", help="fit snippets and chain a trajectory")
    p.add_argument("dataset", nargs="?", help="KITTI-layout dataset directory")
    _add_common(p)
    p.add_argument(
        "--ablate", action="append", choices=sorted(ABLATIONS),
        help="disable one component (repeatable)",
    )
    p.set_defaults(fn=cmd_optimize)

    p = sub.add_parser("eval", help="evaluate trajectories or depth maps")
    p.add_argument("--mode", required=True, choices=("ate", "depth", "smoothness"))
    p.add_argument("--est", required=True, help="estimated poses file / PFM dir")
    p.add_argument("--gt", help="ground-truth poses file / PFM dir")
    _add_common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="verify loss gradients against finite differences")
    _add_common(p)
    p.add_argument(
        "--corrupt-gradients", action="store_true",
        help="debug: scale analytic gradients by 1.01 (must fail)",
    )
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("mask-preview", help="export a hard edge mask preview PNG")
    _add_common(p)
    p.add_argument("--v", type=float, default=1.0, help="speed (scene units / frame)")
    p.add_argument("--yaw-rate", dest="yaw_rate", type=float, default=0.0)
    p.add_argument(
        "--expl-logit", dest="expl_logit", type=float, default=None,
        help="also apply a constant confidence field at this logit",
    )
    p.set_defaults(fn=cmd_mask_preview)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        code = args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (ParseError, LoadError, OSError) as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return 3
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return code


if __name__ == "__main__":
    sys.exit(main())
