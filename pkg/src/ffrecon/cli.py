"""Command line: ``ffrecon {synth,vo,sfm,eval}``.

Every subcommand reads and writes within ``--out``:

    synth  scene.npz, gt_trajectory.txt, config.yaml
    vo     trajectory.txt, keyframes.ply, report.jsonl
    sfm    trajectory.txt, keyframes.ply, report.jsonl
    eval   metrics.jsonl (distances in centimetres)

Exit codes: 0 success, 2 configuration error, 3 I/O or format error,
4 computation error.  ``FFRECON_LOG_LEVEL`` sets log verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from . import metrics
from .config import ConfigError, RunConfig, config_from_dict, load_config, save_config
from .exchange import ExchangePredictor, synthetic_responder_command
from .io import (FormatError, Trajectory, export_pointcloud, load_scene, read_trajectory, save_scene,
                 write_jsonl, write_trajectory)
from .oracle import SyntheticPredictor, SyntheticScene, synth_scene
from .sfm import run_sfm
from .vo import VisualOdometry

log = logging.getLogger("ffrecon")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_COMPUTE = 0, 2, 3, 4
CM = 100.0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ffrecon", description="Metric 3D reconstruction toolkit.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in [("synth", "generate a synthetic scene and ground truth"),
                       ("vo", "run visual odometry over the scene's frames"),
                       ("sfm", "run structure from motion over the scene's frames"),
                       ("eval", "score an estimated trajectory against ground truth")]:
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", help="YAML run configuration")
        s.add_argument("--seed", type=int, help="override the configured seed")
        s.add_argument("--out", help="output directory")
        s.add_argument("--predictor", choices=["synthetic", "exchange"], help="predictor backend")
        if name in ("vo", "sfm"):
            s.add_argument("--scene", help="scene bundle (default: OUT/scene.npz, else synthesized)")
        if name == "eval":
            s.add_argument("--est", help="estimated trajectory (default: OUT/trajectory.txt)")
            s.add_argument("--gt", help="ground-truth trajectory (default: OUT/gt_trajectory.txt)")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out"] = args.out
    if args.predictor is not None:
        over["predictor"] = args.predictor
    over["mode"] = args.command
    return dataclasses.replace(cfg, **over)


def _gt_trajectory(scene: SyntheticScene) -> Trajectory:
    ids = scene.frame_ids
    return Trajectory(scene.timestamps[ids], [scene.poses[i] for i in ids])


def _scene_for(cfg: RunConfig, out: Path, scene_arg: str | None) -> tuple[SyntheticScene, Path | None]:
    path = Path(scene_arg) if scene_arg else out / "scene.npz"
    if path.exists():
        return load_scene(path), path
    if scene_arg:
        raise FileNotFoundError(f"{path}: scene bundle not found")
    return synth_scene(cfg.oracle), None


def _predictor(cfg: RunConfig, scene: SyntheticScene, scene_path: Path | None, out: Path):
    if cfg.predictor == "synthetic":
        return SyntheticPredictor(scene, cfg.oracle)
    if cfg.exchange.command:
        command = cfg.exchange.command
    else:
        if scene_path is None:
            scene_path = out / "scene.npz"
            save_scene(scene, scene_path)
        command = synthetic_responder_command(scene_path)
    return ExchangePredictor(cfg.exchange.dir or out / "exchange", command)


def cmd_synth(cfg: RunConfig, args, out: Path) -> int:
    scene = synth_scene(cfg.oracle)
    save_scene(scene, out / "scene.npz")
    write_trajectory(_gt_trajectory(scene), out / "gt_trajectory.txt")
    save_config(cfg, out / "config.yaml")
    log.info("synthesized %d frames into %s", len(scene.all_frame_ids), out)
    return EXIT_OK


def _write_map(gmap, scene: SyntheticScene, out: Path, records: list[dict]) -> None:
    traj = gmap.metric_trajectory()
    ids = list(traj)
    write_trajectory(Trajectory(scene.timestamps[ids], [traj[i] for i in ids]), out / "trajectory.txt")
    P, C = gmap.fused_points(metric=True)
    export_pointcloud(P, out / "keyframes.ply", confidences=C)
    records.append({"type": "summary", "metric_factor": gmap.metric_factor, "keyframes": gmap.keyframe_ids,
                    "registered": len(ids)})
    write_jsonl(records, out / "report.jsonl")


def cmd_vo(cfg: RunConfig, args, out: Path) -> int:
    scene, path = _scene_for(cfg, out, args.scene)
    vo = VisualOdometry(_predictor(cfg, scene, path, out), cfg.vo)
    gmap = vo.run(scene.frame_ids)
    records = [{"type": "frame", "id": f, "status": gmap.status.get(f, "unregistered")} for f in scene.frame_ids]
    records += [{"type": "resample", **r} for r in gmap.resample_log]
    _write_map(gmap, scene, out, records)
    return EXIT_OK


def cmd_sfm(cfg: RunConfig, args, out: Path) -> int:
    scene, path = _scene_for(cfg, out, args.scene)
    result = run_sfm(scene.all_frame_ids, _predictor(cfg, scene, path, out), cfg.sfm)
    _write_map(result.map, scene, out, result.report_records())
    return EXIT_OK


def evaluate_trajectories(est: Trajectory, gt: Trajectory) -> list[dict]:
    ei, gi = metrics.associate(est.timestamps, gt.timestamps)
    records = []
    for align in ("sim3", "se3"):
        v = metrics.ate_rmse(est.timestamps, est.positions, gt.timestamps, gt.positions, align)
        records.append({"metric": "ate_rmse", "align": align, "unit": "cm", "value": v * CM})
    rel = metrics.relpose_accuracy([est.poses[i] for i in ei], [gt.poses[i] for i in gi], (5, 15, 30))
    for t, v in rel.rra_at.items():
        records.append({"metric": f"rra@{t}", "unit": "%", "value": 100.0 * v})
    for t, v in (rel.rta_at or {}).items():
        records.append({"metric": f"rta@{t}", "unit": "%", "value": 100.0 * v})
    records.append({"metric": "auc@30", "unit": "%", "value": rel.auc30})
    records.append({"metric": "matched", "unit": "poses", "value": int(len(ei))})
    return records


def cmd_eval(cfg: RunConfig, args, out: Path) -> int:
    est = read_trajectory(args.est or out / "trajectory.txt")
    gt = read_trajectory(args.gt or out / "gt_trajectory.txt")
    records = evaluate_trajectories(est, gt)
    write_jsonl(records, out / "metrics.jsonl")
    for r in records:
        name = r["metric"] + (f"[{r['align']}]" if "align" in r else "")
        val = "n/a" if r["value"] is None else f"{r['value']:.6g}"
        print(f"{name:18s} {val} {r['unit']}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "vo": cmd_vo, "sfm": cmd_sfm, "eval": cmd_eval}


def main(argv=None) -> int:
    level = os.environ.get("FFRECON_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"computation error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    except (KeyError, ArithmeticError) as exc:
        print(f"computation error: {exc!r}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
