"""Command-line front end: simulate, slam, eval, export-map, export-plots.

Exit codes: 0 on success, 1 for usage errors, 2 for bad or unreadable data.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .config import ConfigError, PipelineConfig, ScenarioConfig
from .evaluation import EvaluationError, evaluate
from .formats import LogFormatError, read_graph, read_log, read_submaps, read_tum, write_csv, write_log, write_tum
from .mapping import global_voxel_map, write_ply
from .pipeline import PipelineError, run_pipeline, simulate_log, write_outputs

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
U64_MAX = 2**64 - 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if not 0 <= v <= U64_MAX:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="unislam", description="LiDAR-inertial SLAM over simulated or recorded sensor logs.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on standard error")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", help="synthesise a sensor log and its ground truth")
    s.add_argument("--config", required=True, help="scenario file or bundled scenario name")
    s.add_argument("--seed", type=_seed, help="overrides the scenario seed")
    s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("slam", help="run the pipeline over a sensor log")
    s.add_argument("--log", required=True)
    s.add_argument("--config", required=True, help="pipeline file or bundled config name")
    s.add_argument("--seed", type=_seed, help="overrides the config seed")
    s.add_argument("--out", required=True)
    s.add_argument("--single-thread", action="store_true", help="run every worker on the calling thread")
    s.add_argument("--ground-truth", help="also write an evaluation report against this TUM file")

    s = sub.add_parser("eval", help="compare an estimated trajectory with ground truth")
    s.add_argument("--trajectory", "--estimate", dest="trajectory", required=True)
    s.add_argument("--ground-truth", required=True)
    s.add_argument("--out", help="write report.txt and report.kv here")

    s = sub.add_parser("export-map", help="re-anchor the submaps of a slam run into one PLY point cloud")
    s.add_argument("--input", required=True, help="output directory of a slam run")
    s.add_argument("--out", required=True, help="PLY file to write")

    s = sub.add_parser("export-plots", help="per-timestamp error series as CSV")
    s.add_argument("--trajectory", "--estimate", dest="trajectory", required=True)
    s.add_argument("--ground-truth", required=True)
    s.add_argument("--out", required=True, help="directory for errors.csv")
    return p


def _write_report(report, out: Path | None) -> None:
    text, kv = report.to_text(), report.to_kv()
    sys.stdout.write(text + "\n" + kv)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text, encoding="utf-8")
        (out / "report.kv").write_text(kv, encoding="utf-8")


def cmd_simulate(args) -> None:
    scenario = ScenarioConfig.from_file(args.config)
    log_data, gt = simulate_log(scenario, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_log(out / "log.txt", log_data)
    write_tum(out / "ground_truth.tum", gt.times, gt.poses())
    print(f"wrote {out / 'log.txt'} and {out / 'ground_truth.tum'}")


def cmd_slam(args) -> None:
    cfg = PipelineConfig.from_file(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    log_data = read_log(args.log)
    result = run_pipeline(log_data, cfg, single_thread=args.single_thread)
    out = Path(args.out)
    paths = write_outputs(result, out)
    for p in paths.values():
        print(f"wrote {p}")
    if args.ground_truth:
        gt_t, gt_p = read_tum(args.ground_truth)
        _write_report(evaluate(result.times, result.poses, gt_t, gt_p), out)


def cmd_eval(args) -> None:
    et, ep = read_tum(args.trajectory)
    gt_t, gt_p = read_tum(args.ground_truth)
    _write_report(evaluate(et, ep, gt_t, gt_p), Path(args.out) if args.out else None)


def cmd_export_map(args) -> None:
    src = Path(args.input)
    graph = read_graph(src / "graph.txt")
    grids, anchors = [], []
    for _, node, grid in read_submaps(src / "submaps.txt"):
        if node not in graph.nodes:
            raise LogFormatError(f"submap node {node} is missing from the graph")
        grids.append(grid)
        anchors.append(graph.nodes[node].pose)
    if not grids:
        raise LogFormatError(f"{src / 'submaps.txt'} holds no submaps")
    points = global_voxel_map(grids, anchors, grids[0].resolution)
    write_ply(args.out, points)
    print(f"wrote {len(points)} points to {args.out}")


def cmd_export_plots(args) -> None:
    et, ep = read_tum(args.trajectory)
    gt_t, gt_p = read_tum(args.ground_truth)
    header, rows = evaluate(et, ep, gt_t, gt_p).series()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "errors.csv", header, rows)
    print(f"wrote {out / 'errors.csv'}")


COMMANDS = {
    "simulate": cmd_simulate,
    "slam": cmd_slam,
    "eval": cmd_eval,
    "export-map": cmd_export_map,
    "export-plots": cmd_export_plots,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.error("a command is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except (ConfigError, LogFormatError, EvaluationError, PipelineError, OSError, ValueError) as exc:
        print(f"unislam {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
