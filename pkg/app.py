"""
Kitbash Assembler CLI
Command-line entry point: validate a scene, attach parts, run the Langevin
solve, compute metrics and export pose OBJs.
"""

import argparse
import json
import logging
import sys
from typing import List, Optional

from app_config import configure_logging, get_int_setting, get_setting
from errors import KitbashError
from liegroup import RigidTransform
from pipeline import (SceneConfig, export_pose_list, export_poses, load_placements, load_scene,
                      run_attach, run_full, run_metrics, OutputDir, RunReport)

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="scene config JSON")
    common.add_argument("--out", default=None, help="output directory (default: KITBASH_OUTPUT_DIR)")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--threads", type=int, default=None, help="worker threads (default: KITBASH_THREADS)")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    common.add_argument("--quiet", action="store_true", help="no progress bar or summary")

    parser = argparse.ArgumentParser(prog="kitbash", description="Assemble articulated parts into new objects")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("validate", parents=[common], help="parse and validate a scene config")
    attach = sub.add_parser("attach", parents=[common], help="attachment-only assembly")
    attach.add_argument("--no-metrics", action="store_true")
    solve = sub.add_parser("solve", parents=[common], help="full Langevin placement search")
    solve.add_argument("--no-metrics", action="store_true")
    metrics = sub.add_parser("metrics", parents=[common], help="Rooted / Stable / AOR for placements")
    metrics.add_argument("--placements", default=None, help="placement JSON (default: config initial placements)")
    export = sub.add_parser("export", parents=[common], help="OBJ export of articulation poses")
    export.add_argument("--placements", default=None, help="placement JSON (default: config initial placements)")
    export.add_argument("--snapshots", type=int, default=None, help="snapshots per DoF")
    return parser


def print_summary(title: str, lines: List[str]) -> None:
    print("=" * 60)
    print(title)
    print("=" * 60)
    for line in lines:
        print(line)
    print("=" * 60)


def _report_lines(report: RunReport) -> List[str]:
    e = report.energies
    lines = [f"Seed: {report.seed}",
             f"E^km: {e.ekm:.6g}   E^func: {e.func:.6g}   prior: {e.prior:.6g}   pin: {e.pin:.6g}"]
    if report.metrics is not None:
        m = report.metrics
        lines.append(f"Rooted: {m.rooted}   Stable: {m.stable}   AOR: {m.aor:.4f}")
    if "volume_reduction" in report.details:
        lines.append(f"Folded/deployed volume: {report.details['volume_reduction']['ratio']:.3f}")
    lines.append("Timings: " + ", ".join(f"{k} {v:.2f}s" for k, v in report.timings.items()))
    return lines


def _placements(config: SceneConfig, path: Optional[str]):
    """Initial placements (identity where unset), overridden by a placement file"""
    placements = {pid: config.initial.get(pid, RigidTransform.identity())
                  for pid in config.tree.non_root_ids()}
    if path:
        placements.update(load_placements(path, config.tree))
    return placements


def run(args) -> int:
    config = load_scene(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    out = args.out or get_setting("KITBASH_OUTPUT_DIR")
    threads = args.threads if args.threads is not None else get_int_setting("KITBASH_THREADS")

    if args.command == "validate":
        if not args.quiet:
            tree = config.tree
            print_summary("SCENE OK", [f"Parts: {len(tree.parts)} (root '{tree.root_id}')",
                                       f"DoF: {tree.total_dof()}",
                                       f"Objective: {type(config.objective).__name__ if config.objective else 'none'}"])
        return 0

    if args.command == "attach":
        report = run_attach(config, out, threads, with_metrics=not args.no_metrics)
        if not args.quiet:
            print_summary("ATTACHMENT RESULT", _report_lines(report))
        return 0

    if args.command == "solve":
        report = run_full(config, out, threads, progress=not args.quiet and sys.stderr.isatty(),
                          with_metrics=not args.no_metrics)
        if not args.quiet:
            print_summary("LANGEVIN RESULT", _report_lines(report))
        return 0

    placements = _placements(config, args.placements)
    if args.command == "metrics":
        metrics = run_metrics(config, placements)
        output = OutputDir(out)
        output.write_text("metrics.json", json.dumps(metrics.to_json(), indent=2) + "\n")
        metrics.to_frame().to_csv(output.path("metrics_pairs.csv"), index=False)
        if not args.quiet:
            print_summary("METRICS", [f"Rooted: {metrics.rooted}", f"Stable: {metrics.stable}",
                                      f"AOR: {metrics.aor:.4f}"] + metrics.notes)
        return 0

    if args.command == "export":
        manifest = export_poses(config.tree, placements, export_pose_list(config, args.snapshots), out)
        if not args.quiet:
            print_summary("EXPORT", [f"Files: {len(manifest['files'])}"] + manifest["files"])
        return 0
    raise AssertionError(f"unhandled command {args.command}")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level or ("WARNING" if args.quiet else None))
    try:
        return run(args)
    except KitbashError as e:
        logger.debug("command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
