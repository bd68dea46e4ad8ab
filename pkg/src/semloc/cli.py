"""Command-line entry point: ``semloc gen-world | build-graph | localize | eval``.

Exit codes: 0 success, 2 configuration or usage error, 3 I/O or data error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import synth
from .backend import estimates_to_csv
from .config import ConfigError, PipelineConfig, _format_value, _parse_value, dump_config, load_config, tomllib
from .evaluation import (EvalThresholds, best_f1, localize_sequence, pr_auc, pr_curve, pr_to_csv,
                         success_at, success_rate_curve, success_to_csv, trials_from_csv, trials_to_csv)
from .frames import _atomic_write, frame_indices, load_frame, read_camera, read_pose_file
from .geometry import Pose, so3_exp
from .graph import graph_from_json, graph_to_json
from .pipeline import Localizer, build_database, walk_params
from .walks import describe_graph

log = logging.getLogger("semloc")

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _config_error(msg):
    return CliError(msg, EXIT_CONFIG)


def _io_error(msg):
    return CliError(msg, EXIT_IO)


def _write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, text.encode("ascii"))


# --- configuration -----------------------------------------------------

def _parse_overrides(items):
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise _config_error(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def pipeline_config(args):
    """Config file, then ``--set`` overrides, then ``--seed`` for every pipeline RNG."""
    try:
        cfg = load_config(args.config) if args.config else PipelineConfig()
        overrides = _parse_overrides(args.set)
        if args.seed is not None:
            overrides.update({"walks.rng_seed": args.seed, "ransac.seed": args.seed})
        return cfg.with_overrides(overrides) if overrides else cfg
    except OSError as exc:
        raise _io_error(f"cannot read config {args.config}: {exc.strerror or exc}") from None
    except ConfigError as exc:
        raise _config_error(str(exc)) from None


_SIM_DEFAULTS = {"odom_noise": 0.0, "odom_rot_noise": 0.0, "rng_seed": 0, "odom_origin": None,
                 "label_flip_rate": 0.0, "max_range": 60.0}
_CAMERA_DEFAULTS = {"width": 160, "height": 120, "fx": 100.0, "fy": None}


def _section(data, name, allowed):
    values = data.get(name, {})
    if not isinstance(values, dict):
        raise _config_error(f"[{name}] must be a table")
    bad = sorted(set(values) - set(allowed))
    if bad:
        raise _config_error(f"unknown field(s) in [{name}]: {', '.join(name + '.' + b for b in bad)}")
    return values


def _number(section, key, value, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise _config_error(f"{section}.{key}: expected a number")
    if integer:
        if int(value) != value:
            raise _config_error(f"{section}.{key}: expected an integer")
        return int(value)
    return float(value)


def world_spec(text, seed=None, overrides=None):
    """Parse a gen-world spec into ``(WorldSpec, TrajectorySpec, CameraIntrinsics, sim kwargs, raw odom_origin)``."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise _config_error(f"invalid TOML: {exc}") from None
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        table = data.setdefault(section, {})
        if isinstance(table, dict):
            table[key] = _parse_value(dotted, value)
    bad = sorted(set(data) - {"world", "trajectory", "camera", "sim"})
    if bad:
        raise _config_error(f"unknown section(s): {', '.join(bad)}")

    wfields = {f.name: f for f in fields(synth.WorldSpec)}
    wvals = {k: _number("world", k, v, isinstance(wfields[k].default, int))
             for k, v in _section(data, "world", wfields).items()}
    tfields = {f.name for f in fields(synth.TrajectorySpec)}
    tvals = dict(_section(data, "trajectory", tfields))
    cvals = {**_CAMERA_DEFAULTS, **_section(data, "camera", _CAMERA_DEFAULTS)}
    svals = {**_SIM_DEFAULTS, **_section(data, "sim", _SIM_DEFAULTS)}
    if seed is not None:
        wvals["rng_seed"] = seed
        svals["rng_seed"] = seed

    try:
        world = synth.WorldSpec(**wvals)
    except ValueError as exc:
        raise _config_error(f"world: {exc}") from None

    if "kind" in tvals and not isinstance(tvals["kind"], str):
        raise _config_error("trajectory.kind: expected a string")
    if "path" in tvals:
        try:
            path = tuple((float(x), float(y)) for x, y in tvals["path"])
        except (TypeError, ValueError):
            raise _config_error("trajectory.path: expected a list of [x, y] points") from None
        tvals["path"] = path
    for key in ("step", "height", "pitch"):
        if key in tvals:
            tvals[key] = _number("trajectory", key, tvals[key])
    try:
        traj = synth.TrajectorySpec(**tvals)
    except ValueError as exc:
        raise _config_error(f"trajectory: {exc}") from None

    width = _number("camera", "width", cvals["width"], True)
    height = _number("camera", "height", cvals["height"], True)
    fx = _number("camera", "fx", cvals["fx"])
    fy = fx if cvals["fy"] is None else _number("camera", "fy", cvals["fy"])
    try:
        cam = synth.CameraIntrinsics(fx, fy, (width - 1) / 2, (height - 1) / 2, width, height)
    except ValueError as exc:
        raise _config_error(f"camera: {exc}") from None

    sim = {}
    for key in ("odom_noise", "odom_rot_noise", "label_flip_rate", "max_range"):
        sim[key] = _number("sim", key, svals[key])
        if sim[key] < 0 or (key == "max_range" and sim[key] == 0):
            raise _config_error(f"sim.{key}: out of range")
    if sim["label_flip_rate"] > 1:
        raise _config_error("sim.label_flip_rate: must lie in [0, 1]")
    sim["rng_seed"] = _number("sim", "rng_seed", svals["rng_seed"], True)
    origin = svals["odom_origin"]
    if origin is not None:
        if not isinstance(origin, list) or len(origin) != 4:
            raise _config_error("sim.odom_origin: expected [x, y, z, yaw]")
        x, y, z, yaw = (_number("sim", "odom_origin", v) for v in origin)
        sim["odom_origin"] = Pose.from_rt(so3_exp([0.0, 0.0, yaw]), [x, y, z])
    return world, traj, cam, sim, svals["odom_origin"]


def dump_world_spec(world, traj, cam, sim, origin):
    """Effective gen-world spec as TOML text."""
    sections = {
        "world": synth.spec_to_dict(world),
        "trajectory": {"kind": traj.kind, "path": [list(p) for p in traj.path], "step": traj.step,
                       "height": traj.height, "pitch": traj.pitch},
        "camera": {"width": cam.width, "height": cam.height, "fx": cam.fx, "fy": cam.fy},
        "sim": {**{k: v for k, v in sim.items() if k != "odom_origin"}, "odom_origin": origin},
    }
    lines = []
    for name, values in sections.items():
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {_format_value(v)}" for k, v in values.items() if v is not None)
        lines.append("")
    return "\n".join(lines)


# --- dataset access ----------------------------------------------------

def load_dataset(root):
    """Frames of a dataset directory plus its ground-truth poses (None when absent)."""
    root = Path(root)
    if not root.is_dir():
        raise _io_error(f"dataset directory not found: {root}")
    try:
        indices = frame_indices(root)
        if not indices:
            return [], None
        cam = read_camera(root)
        frames = [load_frame(root, i, cam) for i in indices]
        gt_path = root / "gt_poses.txt"
        gt = None
        if gt_path.is_file():
            poses = read_pose_file(gt_path)
            if len(poses) <= indices[-1]:
                raise _io_error(f"{gt_path}: fewer poses than frames")
            gt = [poses[i] for i in indices]
    except (OSError, ValueError) as exc:
        raise _io_error(str(exc)) from None
    return frames, gt


def load_graph(path):
    path = Path(path)
    try:
        return graph_from_json(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise _io_error(f"cannot read graph file {path}: {exc.strerror or exc}") from None
    except ValueError as exc:
        raise _io_error(f"corrupt graph file {path}: {exc}") from None


# --- commands ----------------------------------------------------------

def cmd_gen_world(args):
    try:
        text = Path(args.spec).read_text(encoding="utf-8")
    except OSError as exc:
        raise _io_error(f"cannot read spec {args.spec}: {exc.strerror or exc}") from None
    world_s, traj, cam, sim, origin = world_spec(text, args.seed, _parse_overrides(args.set))
    try:
        world = synth.generate_world(world_s)
    except synth.PlacementFailure as exc:
        raise _config_error(f"world: {exc}") from None
    out = Path(args.out_dir)
    try:
        result = synth.simulate_dataset(world, traj, cam, out, **sim)
        _write_text(out / "effective_config.txt", dump_world_spec(world_s, traj, cam, sim, origin))
    except OSError as exc:
        raise _io_error(f"cannot write dataset to {out}: {exc.strerror or exc}") from None
    except ValueError as exc:
        raise _config_error(str(exc)) from None
    print(f"wrote {len(result.frames)} frames and {len(world.objects)} objects to {out}")


def cmd_build_graph(args):
    cfg = pipeline_config(args)
    frames, _ = load_dataset(args.dataset)
    graph, descriptors = build_database(frames, cfg)
    out = Path(args.out_graph)
    try:
        _write_text(out, graph_to_json(graph, descriptors))
        _write_text(out.parent / "effective_config.txt", dump_config(cfg))
    except OSError as exc:
        raise _io_error(f"cannot write {out}: {exc.strerror or exc}") from None
    print(f"wrote graph with {len(graph)} vertices and {len(graph.edges)} edges to {out}")


def cmd_localize(args):
    cfg = pipeline_config(args)
    db_graph, descriptors = load_graph(args.db_graph)
    params = walk_params(cfg)
    if descriptors is None:
        descriptors = describe_graph(db_graph, params)
    elif any(d.shape != (params.num_walks, params.walk_depth) for d in descriptors.values()):
        raise _config_error(f"{args.db_graph}: stored walks do not match walks.num_walks/walk_depth")
    frames, gt = load_dataset(args.query)
    localizer = Localizer(db_graph, descriptors, cfg)
    records, estimates = [], []
    for rec, result in localize_sequence(frames, gt, localizer, cfg):
        records.append(rec)
        if result.attempted:
            estimates.append((rec.frame_index, result.estimate))
    out = Path(args.out_csv)
    est_path = Path(args.estimates) if args.estimates else out.with_name(out.stem + "_estimates.csv")
    try:
        _write_text(out, trials_to_csv(records))
        _write_text(est_path, estimates_to_csv(estimates))
        _write_text(out.parent / "effective_config.txt", dump_config(cfg))
    except OSError as exc:
        raise _io_error(f"cannot write {out}: {exc.strerror or exc}") from None
    print(f"localized {len(estimates)} of {len(records)} windows; wrote {out} and {est_path}")


def cmd_eval(args):
    cfg = pipeline_config(args)
    try:
        text = Path(args.trials).read_text(encoding="ascii")
    except OSError as exc:
        raise _io_error(f"cannot read {args.trials}: {exc.strerror or exc}") from None
    except UnicodeDecodeError:
        raise _config_error(f"{args.trials}: trials CSV must be ASCII") from None
    try:
        records = trials_from_csv(text)
    except ValueError as exc:
        raise _config_error(f"{args.trials}: {exc}") from None
    if not records:
        raise _config_error(f"{args.trials}: no trial records")
    thresholds = EvalThresholds.from_config(cfg)
    curve = pr_curve(records, thresholds)
    success = success_rate_curve(records, cfg.eval.success_max_distance, cfg.eval.success_bins)
    out = Path(args.out_dir)
    try:
        _write_text(out / "pr.csv", pr_to_csv(curve))
        _write_text(out / "success.csv", success_to_csv(success))
        _write_text(out / "effective_config.txt", dump_config(cfg))
    except OSError as exc:
        raise _io_error(f"cannot write to {out}: {exc.strerror or exc}") from None
    t_c, p, r, f1 = best_f1(curve)
    print(f"AUC {pr_auc(curve):.4f}; best F1 {f1:.4f} at t_c={t_c:g} (precision {p:.4f}, recall {r:.4f}); "
          f"success within t_L={thresholds.t_L:g} m: {success_at(records, t_c, thresholds.t_L):.4f}")


# --- argument parsing --------------------------------------------------

def _global_flags(suppress):
    p = argparse.ArgumentParser(add_help=False)
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=default, help="override every RNG seed")
    p.add_argument("--config", default=default, help="pipeline TOML config file")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS if suppress else 1,
                   help="worker threads (computation is single-threaded)")
    p.add_argument("--set", action="append", default=default, metavar="SECTION.KEY=VALUE",
                   help="override one config value; repeatable")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)
    return p


def build_parser():
    parser = argparse.ArgumentParser(prog="semloc", parents=[_global_flags(False)],
                                     description="Semantic graph localization from labeled depth frames.")
    sub = parser.add_subparsers(dest="command", required=True)
    flags = _global_flags(True)

    p = sub.add_parser("gen-world", parents=[flags], help="render a synthetic dataset from a world spec")
    p.add_argument("spec")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_gen_world)

    p = sub.add_parser("build-graph", parents=[flags], help="build the database graph of a dataset")
    p.add_argument("dataset")
    p.add_argument("out_graph")
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("localize", parents=[flags], help="localize a query dataset against a graph")
    p.add_argument("query")
    p.add_argument("db_graph")
    p.add_argument("out_csv", help="trials CSV")
    p.add_argument("--estimates", help="estimate CSV path (default: <out_csv stem>_estimates.csv)")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("eval", parents=[flags], help="PR and success-rate curves from a trials CSV")
    p.add_argument("trials")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads < 1:
        print("semloc: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args.func(args)
    except CliError as exc:
        print(f"semloc: error: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
