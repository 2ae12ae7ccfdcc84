"""Command-line front end: one subcommand per pipeline stage, plus ``run``, ``sweep`` and ``export``.

Exit codes:

    0  success
    2  usage (bad or missing flags)
    3  I/O (missing file, unreadable or malformed input)
    4  validation (input parses but violates a precondition)
    5  numeric divergence during embedding optimization

Failures print exactly one line to stderr:
``topotree: error category=<usage|io|validation|divergence> [stage=<name>] message=<text>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .embed import DivergenceError, OptimizerConfig
from .errors import FormatError, StageError
from .phantom import load_phantom_config, read_trees, write_obj_lines, write_polylines_csv
from .pipeline import (
    VARIANTS,
    CenterParams,
    GraphParams,
    load_experiment_config,
    resolve_sources,
    run_experiment,
    run_sweep,
    stage_centers,
    stage_embed,
    stage_evaluate,
    stage_graph,
    stage_pairs,
    stage_phantom,
    stage_reconstruct,
)
from .recon import SourceSpec

EXIT_USAGE, EXIT_IO, EXIT_VALIDATION, EXIT_DIVERGENCE = 2, 3, 4, 5

log = logging.getLogger("topotree")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _fail("usage", message, EXIT_USAGE)


def _fail(category, message, code, stage=None):
    msg = " ".join(str(message).split())
    where = f" stage={stage}" if stage else ""
    print(f"topotree: error category={category}{where} message={msg}", file=sys.stderr)
    raise SystemExit(code)


def _classify(exc: BaseException):
    if isinstance(exc, DivergenceError):
        return "divergence", EXIT_DIVERGENCE
    if isinstance(exc, (FormatError, OSError, json.JSONDecodeError, UnicodeDecodeError)):
        return "io", EXIT_IO
    return "validation", EXIT_VALIDATION


def _read_json(path):
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------- handlers


def cmd_phantom(a):
    cfg = load_phantom_config(a.config)
    if a.seed is not None:
        cfg.seed = a.seed
    paths = stage_phantom(cfg, a.out)
    print(paths["trees"].parent)


def cmd_centers(a):
    params = CenterParams(a.noise_sigma, a.drop_fraction, a.threshold, a.window, a.seed)
    print(stage_centers(a.phantom, params, a.out))


def cmd_pairs(a):
    print(stage_pairs(a.phantom, a.centers, a.radius, a.out))


def cmd_embed(a):
    opt = _read_json(a.config) if a.config else {}
    for key in ("seed", "step_size", "max_iters", "momentum", "init_scale"):
        v = getattr(a, key)
        if v is not None:
            opt[key] = v
    cfg = OptimizerConfig(**opt)
    params = GraphParams(radius=a.radius, alpha=a.alpha, gamma=a.gamma, margin=a.margin).loss_params()
    loss = stage_embed(a.pairs, a.centers, cfg, a.objective, params, a.out, a.trace)
    print(f"{a.out} final_loss={loss!r}")


def cmd_graph(a):
    if a.metric in ("topology", "cosine") and not a.embeddings:
        raise ValueError(f"--embeddings is required for metric {a.metric}")
    if a.metric == "gt-label-classification" and not a.phantom:
        raise ValueError("--phantom is required for metric gt-label-classification")
    params = GraphParams(radius=a.radius, alpha=a.alpha, cutoff=a.cutoff)
    print(stage_graph(a.centers, a.metric, params, a.out, embeddings_path=a.embeddings, phantom_dir=a.phantom))


def cmd_reconstruct(a):
    if bool(a.sources) == bool(a.phantom):
        raise ValueError("give exactly one of --sources or --phantom")
    if a.sources:
        spec = SourceSpec.from_dict(_read_json(a.sources))
    else:
        spec = resolve_sources("from-phantom", a.phantom)
    if a.snap_radius is not None:
        spec.snap_radius = a.snap_radius
    report = stage_reconstruct(a.graph, a.centers, spec, a.out, a.report)
    print(f"{a.out} unassigned={report['unassigned_count']}")


def cmd_evaluate(a):
    print(stage_evaluate(a.gt, a.pred, a.out, a.note))


def cmd_run(a):
    cfg = load_experiment_config(a.config)
    m = run_experiment(cfg, a.out)
    if a.timings:
        Path(a.timings).write_text(json.dumps(m.wall_times, indent=2, sort_keys=True) + "\n")
    print(Path(m.run_dir) / "manifest.json")


def cmd_sweep(a):
    if a.jobs < 1:
        raise ValueError("--jobs must be >= 1")
    res = run_sweep(load_experiment_config(a.config), _read_json(a.grid), a.out, a.jobs)
    for p, e in res.failures:
        log.warning("grid point %s failed: %s", p, e)
    print(res.csv_path)


def cmd_export(a):
    if not (a.obj or a.csv):
        raise ValueError("give --obj and/or --csv")
    trees = read_trees(a.trees)
    if a.obj:
        print(write_obj_lines(trees, a.obj))
    if a.csv:
        print(write_polylines_csv(trees, a.csv))


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="topotree", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"topotree {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom", help="generate a synthetic phantom directory")
    s.add_argument("--config", required=True, help="phantom config JSON")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, help="override the config seed")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("centers", help="extract center voxels from a phantom's centerness map")
    s.add_argument("--phantom", required=True, help="phantom directory")
    s.add_argument("--out", required=True, help="centers CSV")
    s.add_argument("--noise-sigma", type=float, default=0.0)
    s.add_argument("--drop-fraction", type=float, default=0.0)
    s.add_argument("--threshold", type=float, default=1.5)
    s.add_argument("--window", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_centers)

    s = sub.add_parser("pairs", help="labeled center pairs with tree distances")
    s.add_argument("--phantom", required=True)
    s.add_argument("--centers", required=True)
    s.add_argument("--out", required=True, help="pairs CSV")
    s.add_argument("--radius", type=float, default=15.0)
    s.set_defaults(func=cmd_pairs)

    s = sub.add_parser("embed", help="optimize per-center embeddings")
    s.add_argument("--pairs", required=True)
    s.add_argument("--centers", required=True)
    s.add_argument("--out", required=True, help="embeddings JSON")
    s.add_argument("--trace", help="optional loss trace CSV")
    s.add_argument("--objective", choices=("topology", "cosine"), default="topology")
    s.add_argument("--config", help="optimizer config JSON")
    s.add_argument("--seed", type=int)
    s.add_argument("--step-size", dest="step_size", type=float)
    s.add_argument("--max-iters", dest="max_iters", type=int)
    s.add_argument("--momentum", type=float)
    s.add_argument("--init-scale", dest="init_scale", type=float)
    s.add_argument("--radius", type=float, default=15.0)
    s.add_argument("--alpha", type=float, default=1.0 / 15.0)
    s.add_argument("--gamma", type=float, default=1.0 / 3.0)
    s.add_argument("--margin", type=float, default=3.0)
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("graph", help="build the reconstruction graph")
    s.add_argument("--centers", required=True)
    s.add_argument("--out", required=True, help="graph CSV")
    s.add_argument("--metric", choices=VARIANTS, default="topology")
    s.add_argument("--embeddings", help="embeddings JSON (topology and cosine)")
    s.add_argument("--phantom", help="phantom directory (gt-label-classification)")
    s.add_argument("--radius", type=float, default=15.0)
    s.add_argument("--alpha", type=float, default=1.0 / 15.0)
    s.add_argument("--cutoff", type=float, default=2.0)
    s.set_defaults(func=cmd_graph)

    s = sub.add_parser("reconstruct", help="multi-source shortest-path forest over a graph")
    s.add_argument("--graph", required=True)
    s.add_argument("--centers", required=True)
    s.add_argument("--out", required=True, help="reconstructed trees JSON")
    s.add_argument("--report", help="optional reconstruction report JSON")
    s.add_argument("--sources", help="source spec JSON")
    s.add_argument("--phantom", help="take sources from this phantom's tree roots")
    s.add_argument("--snap-radius", type=float)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("evaluate", help="score predicted trees against ground truth")
    s.add_argument("--gt", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--out", required=True, help="eval report JSON")
    s.add_argument("--note")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("run", help="run a whole experiment from a config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="run directory (default: output_dir from the config)")
    s.add_argument("--timings", help="write per-stage wall times to this JSON file")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run an experiment for every point of a parameter grid")
    s.add_argument("--config", required=True)
    s.add_argument("--grid", required=True, help='JSON object like {"centers.drop_fraction": [0, 0.05]}')
    s.add_argument("--out", help="sweep directory (default: output_dir from the config)")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("export", help="write trees as an OBJ line mesh and/or CSV polylines")
    s.add_argument("--trees", required=True)
    s.add_argument("--obj")
    s.add_argument("--csv")
    s.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except StageError as exc:
        category, code = _classify(exc.cause)
        _fail(category, exc, code, stage=exc.stage)
    except Exception as exc:
        category, code = _classify(exc)
        _fail(category, f"{type(exc).__name__}: {exc}", code)
    return 0


if __name__ == "__main__":
    sys.exit(main())
