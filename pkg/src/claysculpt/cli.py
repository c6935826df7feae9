"""Command-line entry point: ``claysculpt <subcommand> [flags]``.

Every subcommand accepts ``--config FILE`` (flat ``key = value`` lines),
``--seed`` and ``--out``; flags override config values, and the fully
resolved configuration is written to ``<out>/resolved_config.txt``.
Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .cloud import PointCloud, RigidTransform, chamfer_distance, chamfer_mean
from .dynamics import AnalyticDynamics, Constraints, GripperModel
from .errors import InvalidInputError, StallError
from .planner import PlannerConfig, SculptAborted, run_sculpt_loop
from .preprocess import PreprocessConfig, RawScan, preprocess_pipeline
from .registration import RansacParams, calibrate, fuse_views
from .sampling import DEFAULT_ACTION_BOUNDS, SamplerConfig
from .sim import (TARGET_NAMES, EnvConfig, SimEnvironment, make_calibration_object,
                  make_initial_clay, make_target, ring_cameras, synth_scan)

log = logging.getLogger("claysculpt")


class UsageError(InvalidInputError):
    pass


class LogFormatError(RuntimeError):
    """A run directory's step log or summary is missing or malformed."""


def stage_seed(seed: int, stage: str) -> int:
    """Independent 63-bit seed for one named stage of a run."""
    digest = hashlib.sha256(f"{seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


# ---------------------------------------------------------------------------
# typed config keys


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise InvalidInputError(f"not a boolean: {s!r}")


def _floats(n=None):
    def parse(s: str):
        try:
            vals = tuple(float(v) for v in s.split(",") if v.strip())
        except ValueError:
            raise InvalidInputError(f"not a list of numbers: {s!r}") from None
        if n is not None and len(vals) != n:
            raise InvalidInputError(f"expected {n} comma-separated numbers, got {s!r}")
        return vals
    return parse


def _strings(s: str):
    return tuple(v.strip() for v in s.split(",") if v.strip())


def _number(kind):
    def parse(s: str):
        try:
            return kind(s)
        except ValueError:
            raise InvalidInputError(f"not a valid {kind.__name__}: {s!r}") from None
    return parse


_int, _float = _number(int), _number(float)


def _show(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_show(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else str(value)


def _bounds_text(b) -> str:
    return _show(tuple(b[0]) + tuple(b[1]))


COMMON = {
    "seed": (_int, "0"),
    "out": (str, "out"),
    "verbosity": (str, "warning"),
}
GRIPPER = {
    "finger_width": (_float, "0.02"),
    "finger_height": (_float, "0.03"),
    "finger_thickness": (_float, "0.01"),
    "d_max": (_float, "0.08"),
    "d_min": (_float, "0.006"),
    "stretch_factor": (_float, "1.2"),
    "link_neighbors": (_int, "8"),
    "constraint_iters": (_int, "50"),
    "hop_factor": (_float, "1.0"),
}
SCHEMAS = {
    "calibrate": {
        "scans": (_strings, None),
        "model": (str, "builtin:calibration"),
        "model_points": (_int, "8192"),
        "init": (str, ""),
        "cameras": (_strings, ""),
        "ransac_iterations": (_int, "1000"),
        "inlier_threshold": (_float, "0.005"),
        "icp_schedule": (_floats(), "0.02,0.005,0.002"),
    },
    "preprocess": {
        "input": (str, None),
        "labels": (str, ""),
        "bounds": (_floats(6), "-0.1,-0.1,0,0.1,0.1,0.1"),
        "n": (_int, "2048"),
        "base_band": (_float, "0.003"),
        "grid_step": (_float, "0.002"),
        "k_neighbors": (_int, "20"),
        "std_ratio": (_float, "2.0"),
        "stage_z": (_float, "0.0"),
        "base_coverage": (_float, "0.95"),
    },
    "step": {
        "cloud": (str, None),
        "actions": (str, None),
        "index": (_int, "0"),
        **GRIPPER,
    },
    "sculpt": {
        "target": (str, None),
        "init": (str, "builtin:cylinder"),
        "sampler": (str, "geometric"),
        "samples": (_int, None),
        "max_grasps": (_int, "10"),
        "clusters": (_int, "10"),
        "n_points": (_int, "2048"),
        "action_bounds": (_floats(6), _bounds_text(DEFAULT_ACTION_BOUNDS)),
        "noise_sigma": (_float, "0.0"),
        "reshell": (_bool, "false"),
        "stop_fraction": (_float, "0.02"),
        "include_noop": (_bool, "true"),
        "workers": (_int, "1"),
        **GRIPPER,
    },
    "eval": {
        "a": (str, ""),
        "b": (str, ""),
        "runs": (_strings, ""),
    },
    "gen-targets": {
        "n": (_int, "2048"),
        "targets": (_strings, ",".join(TARGET_NAMES)),
    },
    "scan": {
        "object": (str, "builtin:calibration"),
        "n_points": (_int, "8192"),
        "cameras": (_int, "4"),
        "radius": (_float, "0.4"),
        "height": (_float, "0.3"),
        "noise": (_float, "0.001"),
        "scene": (_bool, "false"),
        "perturb_deg": (_float, "10.0"),
        "perturb_m": (_float, "0.03"),
    },
}


def resolve(sub: str, flags: dict, config_path: str | None) -> dict:
    """Defaults, then config file, then flags; typed values keyed by name."""
    schema = {**COMMON, **SCHEMAS[sub]}
    raw = {k: d for k, (_, d) in schema.items()}
    if config_path:
        raw.update(io.read_config(config_path, schema))
    for k, v in flags.items():
        if v is not None:
            raw[k] = _show(tuple(v)) if isinstance(v, list) else str(v)
    out = {}
    for k, (parse, _) in schema.items():
        if raw[k] is None:
            out[k] = None
        elif raw[k] == "" and parse is not str:
            out[k] = () if parse is _strings else None
        else:
            out[k] = parse(raw[k]) if parse is not str else raw[k]
    return out


def _write_resolved(cfg: dict, out: Path):
    io.write_config(out / "resolved_config.txt", {k: _show(v) for k, v in cfg.items()})


def _require(cfg: dict, *keys):
    missing = [k for k in keys if cfg.get(k) in (None, "", ())]
    if missing:
        raise UsageError("missing required value(s): " + ", ".join(f"--{k.replace('_', '-')}" for k in missing))


def _gripper(cfg) -> tuple:
    g = GripperModel(cfg["finger_width"], cfg["finger_height"], cfg["finger_thickness"],
                     cfg["d_max"], cfg["d_min"])
    c = Constraints(None, cfg["stretch_factor"], cfg["link_neighbors"], cfg["constraint_iters"],
                    cfg["hop_factor"])
    return g, c


def _builtin_or_file(spec: str, make, what: str) -> PointCloud:
    if spec.startswith("builtin:"):
        return make(spec[len("builtin:"):])
    if not Path(spec).exists():
        raise InvalidInputError(f"{what} {spec!r}: no such file")
    return io.read_cloud(spec)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_targets(cfg, out: Path) -> int:
    seed = stage_seed(cfg["seed"], "targets")
    for name in cfg["targets"]:
        shape = make_target(name, cfg["n"], seed)
        io.write_ply(out / f"{name}.ply", shape.cloud)
    io.write_ply(out / "initial_cylinder.ply", make_initial_clay(cfg["n"], stage_seed(cfg["seed"], "init")))
    return 0


def _perturb(T: RigidTransform, deg: float, meters: float, rng) -> RigidTransform:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = math.radians(deg) * rng.uniform(0.0, 1.0)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    dR = np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K
    shift = rng.normal(size=3)
    shift *= meters * rng.uniform(0.0, 1.0) / np.linalg.norm(shift)
    return RigidTransform(dR @ T.rotation, T.translation + shift)


def cmd_scan(cfg, out: Path) -> int:
    def make(name):
        if name == "calibration":
            return make_calibration_object(cfg["n_points"], stage_seed(cfg["seed"], "object"))
        if name == "cylinder":
            return make_initial_clay(cfg["n_points"], stage_seed(cfg["seed"], "object"))
        return make_target(name, cfg["n_points"], stage_seed(cfg["seed"], "object")).cloud

    obj = _builtin_or_file(cfg["object"], make, "object")
    cams = ring_cameras(cfg["cameras"], cfg["radius"], cfg["height"])
    scans = synth_scan(obj, cams, cfg["noise"], stage_seed(cfg["seed"], "scan"), scene=cfg["scene"])
    rng = np.random.default_rng(stage_seed(cfg["seed"], "perturb"))
    truth, rough = {}, {}
    for scan, cam in zip(scans, cams):
        io.write_ply(out / f"{scan.frame}.ply", PointCloud(scan.points, scan.frame))
        io.write_labels(out / f"{scan.frame}_labels.csv", scan.labels)
        truth[scan.frame] = cam
        rough[scan.frame] = _perturb(cam, cfg["perturb_deg"], cfg["perturb_m"], rng)
    io.write_ply(out / "model.ply", obj)
    io.write_extrinsics(out / "extrinsics_true.txt", truth)
    io.write_extrinsics(out / "extrinsics_rough.txt", rough)
    return 0


def cmd_calibrate(cfg, out: Path) -> int:
    _require(cfg, "scans")
    paths = [Path(p) for p in cfg["scans"]]
    names = list(cfg["cameras"]) or [p.stem for p in paths]
    if len(names) != len(paths):
        raise InvalidInputError("cameras must name every scan")
    scans = [io.read_cloud(p) for p in paths]
    model = _builtin_or_file(
        cfg["model"],
        lambda n: make_calibration_object(cfg["model_points"], stage_seed(cfg["seed"], "object")),
        "model")
    inits = None
    if cfg["init"]:
        known = io.read_extrinsics(cfg["init"])
        if set(names) - set(known):
            raise InvalidInputError(f"initial extrinsics lack cameras {sorted(set(names) - set(known))}")
        inits = [known[n] for n in names]
    params = RansacParams(cfg["ransac_iterations"], cfg["inlier_threshold"],
                          seed=stage_seed(cfg["seed"], "ransac"))
    results = calibrate(scans, model, inits, params, cfg["icp_schedule"])
    io.write_extrinsics(out / "extrinsics.txt", {n: r.transform for n, r in zip(names, results)})
    fused = fuse_views([(s, r.transform) for s, r in zip(scans, results)])
    io.write_ply(out / "fused.ply", fused)
    for n, r in zip(names, results):
        print(f"{n}: inliers={r.inlier_count} rms={r.rms_error:.6g}")
    return 0


def cmd_preprocess(cfg, out: Path) -> int:
    _require(cfg, "input")
    cloud = io.read_cloud(cfg["input"])
    if cfg["labels"]:
        labels = io.read_labels(cfg["labels"])
        scan = RawScan(cloud.points, labels, cloud.frame)
    else:
        scan = RawScan.all_clay(cloud)
    b = cfg["bounds"]
    pcfg = PreprocessConfig((b[:3], b[3:]), cfg["n"], cfg["base_band"], cfg["grid_step"],
                            cfg["k_neighbors"], cfg["std_ratio"], stage_seed(cfg["seed"], "preprocess"),
                            cfg["stage_z"], cfg["base_coverage"])
    shell = preprocess_pipeline(scan, pcfg)
    io.write_ply(out / "shell.ply", shell.cloud)
    return 0


def cmd_step(cfg, out: Path) -> int:
    _require(cfg, "cloud", "actions")
    cloud = io.read_cloud(cfg["cloud"])
    actions = io.read_actions(cfg["actions"])
    if not 0 <= cfg["index"] < len(actions):
        raise InvalidInputError(f"action index {cfg['index']} out of range ({len(actions)} actions)")
    gripper, constraints = _gripper(cfg)
    action = actions[cfg["index"]]
    action.validate(gripper)
    result = AnalyticDynamics(gripper, constraints).predict(cloud, action)
    io.write_ply(out / "stepped.ply", result)
    return 0


def cmd_sculpt(cfg, out: Path) -> int:
    _require(cfg, "target")
    seed = cfg["seed"]
    n = cfg["n_points"]
    target = _builtin_or_file(cfg["target"], lambda s: make_target(s, n, stage_seed(seed, "target")).cloud,
                              "target")

    def make_init(name):
        if name != "cylinder":
            raise InvalidInputError(f"unknown builtin initial shape {name!r}")
        return make_initial_clay(n, stage_seed(seed, "init"))

    initial = _builtin_or_file(cfg["init"], make_init, "init")
    samples = cfg["samples"]
    if samples is None:
        samples = 35 if cfg["sampler"] == "geometric" else 2500
    gripper, constraints = _gripper(cfg)
    b = cfg["action_bounds"]
    scfg = SamplerConfig(cfg["clusters"], samples, (b[:3], b[3:]), 0, gripper)
    pcfg = PlannerConfig(cfg["sampler"], scfg, cfg["max_grasps"], None, cfg["stop_fraction"],
                         cfg["include_noop"], stage_seed(seed, "planner"), cfg["workers"])
    dynamics = AnalyticDynamics(gripper, constraints)
    env = SimEnvironment(EnvConfig(cfg["noise_sigma"], cfg["reshell"], stage_seed(seed, "env")), dynamics)
    io.write_ply(out / "initial.ply", initial)
    io.write_ply(out / "target.ply", target)
    initial_cd = chamfer_distance(initial, target)
    t0 = time.perf_counter()
    status = 0
    try:
        steps = run_sculpt_loop(initial, target, pcfg, dynamics, env)
    except SculptAborted as e:
        log.error("%s", e)
        steps, status = e.log, 2
    wall = time.perf_counter() - t0
    io.write_jsonl(out / "steps.jsonl", [s.to_record() for s in steps])
    final = initial
    for s in steps:
        io.write_ply(out / f"step_{s.step + 1:03d}.ply", s.realized)
        final = s.realized
    io.write_ply(out / "final.ply", final)
    grasps = sum(1 for s in steps if not (s.noop or s.converged))
    final_cd = steps[-1].realized_cd if steps else initial_cd
    summary = {"target": cfg["target"], "sampler": cfg["sampler"], "seed": seed,
               "initial_cd": initial_cd, "final_cd": final_cd, "grasps": grasps,
               "wall_time": wall, "aborted": status != 0}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"grasps={grasps} initial_cd={initial_cd:.6g} final_cd={final_cd:.6g} wall_time={wall:.2f}s")
    return status


def eval_report(run_dir) -> dict:
    """Per-run record: grasp count, final cd, per-step cd series and wall time.

    Raises
    ------
    LogFormatError
        The step log or summary is missing or malformed.
    """
    run_dir = Path(run_dir)
    try:
        summary = json.loads((run_dir / "summary.json").read_text())
        records = io.read_jsonl(run_dir / "steps.jsonl")
        series = [float(r["realized_cd"]) for r in records]
        grasps = sum(1 for r in records if not (r["noop"] or r["converged"]))
        initial = float(summary["initial_cd"])
        target, sampler = str(summary["target"]), str(summary["sampler"])
        wall = float(summary["wall_time"])
        seed = summary.get("seed")
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise LogFormatError(f"{run_dir}: malformed run ({e})") from e
    return {"run": str(run_dir), "target": target, "sampler": sampler, "seed": seed,
            "grasps": grasps, "initial_cd": initial,
            "final_cd": series[-1] if series else initial,
            "cd_series": series, "wall_time": wall}


def aggregate(records) -> list:
    """Mean and standard deviation of final cd and grasp count per (target, sampler)."""
    groups = {}
    for r in records:
        groups.setdefault((r["target"], r["sampler"]), []).append(r)
    rows = []
    for (target, sampler), rs in sorted(groups.items()):
        cd = np.array([r["final_cd"] for r in rs])
        g = np.array([r["grasps"] for r in rs], dtype=float)
        ddof = 1 if len(rs) > 1 else 0
        rows.append({"target": target, "sampler": sampler, "runs": len(rs),
                     "cd_mean": float(cd.mean()), "cd_std": float(cd.std(ddof=ddof)),
                     "grasps_mean": float(g.mean()), "grasps_std": float(g.std(ddof=ddof))})
    return rows


def cmd_eval(cfg, out: Path) -> int:
    if cfg["a"] or cfg["b"]:
        _require(cfg, "a", "b")
        a, b = io.read_cloud(cfg["a"]), io.read_cloud(cfg["b"])
        print(f"cd {chamfer_distance(a, b)!r}")
        print(f"mean_cd {chamfer_mean(a, b)!r}")
        return 0
    _require(cfg, "runs")
    records = [eval_report(r) for r in cfg["runs"]]
    with open(out / "runs.csv", "w") as fh:
        fh.write("run,target,sampler,seed,grasps,initial_cd,final_cd,wall_time,cd_series\n")
        for r in records:
            series = " ".join(repr(v) for v in r["cd_series"])
            fh.write(f"{r['run']},{r['target']},{r['sampler']},{r['seed']},{r['grasps']},"
                     f"{r['initial_cd']!r},{r['final_cd']!r},{r['wall_time']!r},{series}\n")
    rows = aggregate(records)
    with open(out / "summary.csv", "w") as fh:
        fh.write("target,sampler,runs,cd_mean,cd_std,grasps_mean,grasps_std\n")
        for r in rows:
            fh.write(f"{r['target']},{r['sampler']},{r['runs']},{r['cd_mean']!r},{r['cd_std']!r},"
                     f"{r['grasps_mean']!r},{r['grasps_std']!r}\n")
    print(f"{'target':<22}{'sampler':<11}{'runs':>5}  {'# grasps':>14}  {'CD':>24}")
    for r in rows:
        print(f"{r['target']:<22}{r['sampler']:<11}{r['runs']:>5}  "
              f"{r['grasps_mean']:>6.1f} ± {r['grasps_std']:<5.1f}  "
              f"{r['cd_mean']:>10.5f} ± {r['cd_std']:<10.5f}")
    return 0


COMMANDS = {
    "calibrate": cmd_calibrate,
    "preprocess": cmd_preprocess,
    "step": cmd_step,
    "sculpt": cmd_sculpt,
    "eval": cmd_eval,
    "gen-targets": cmd_gen_targets,
    "scan": cmd_scan,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="claysculpt", description="Clay sculpting by grasp planning.")
    subs = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name in COMMANDS:
        p = subs.add_parser(name, help=f"{name} subcommand")
        p.add_argument("--config", help="key = value config file")
        p.add_argument("-v", "--verbose", action="store_const", const="info", dest="verbosity")
        for key, (parse, _) in {**COMMON, **SCHEMAS[name]}.items():
            if key == "verbosity":
                continue
            flag = "--" + key.replace("_", "-")
            if parse is _strings:
                p.add_argument(flag, dest=key, nargs="+")
            elif parse is _bool:
                p.add_argument(flag, dest=key, choices=["true", "false"])
            else:
                p.add_argument(flag, dest=key)
    parser.commands = subs.choices
    return parser


def execute(argv) -> int:
    """Run one subcommand; returns the process exit code."""
    parser = build_parser()
    args = None
    try:
        args = parser.parse_args(list(argv))
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
        cfg = resolve(args.command, flags, args.config)
        logging.basicConfig(level=getattr(logging, str(cfg["verbosity"]).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        _write_resolved(cfg, out)
        return COMMANDS[args.command](cfg, out)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except UsageError as e:
        if args is not None:
            parser.commands[args.command].print_usage(sys.stderr)
        print(f"claysculpt: error: {e}", file=sys.stderr)
        return 1
    except InvalidInputError as e:
        print(f"claysculpt: invalid input: {e}", file=sys.stderr)
        return 1
    except (StallError, LogFormatError, RuntimeError, OSError, ArithmeticError) as e:
        print(f"claysculpt: failed: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(execute(sys.argv[1:]))


if __name__ == "__main__":
    main()
