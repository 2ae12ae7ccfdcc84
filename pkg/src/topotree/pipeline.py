"""Experiment orchestration: phantom -> centers -> pairs -> embeddings -> graph -> forest -> evaluation.

Every stage reads its inputs from the files the previous stage wrote, so any
persisted intermediate can be used to rerun the rest of the chain. The
stage functions below are also what the CLI subcommands call.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

from . import __version__
from .centers import centers_from_ground_truth, read_centers, write_centers
from .embed import (
    OptimizerConfig,
    build_pair_set,
    center_labels,
    optimize_embeddings,
    read_embeddings,
    read_pairs,
    write_embeddings,
    write_pairs,
    write_trace,
)
from .errors import StageError
from .evaluation import evaluate, read_eval_report, write_eval_report
from .losses import TopologyLossParams
from .metricgraph import (
    build_cosine_graph,
    build_label_graph,
    build_topology_graph,
    read_graph,
    write_graph,
)
from .phantom import PhantomConfig, generate_phantom, read_phantom, read_trees, write_phantom, write_trees
from .recon import SourceSpec, forest_to_trees, shortest_path_forest, snap_sources, write_report

log = logging.getLogger(__name__)

VARIANTS = ("topology", "cosine", "gt-label-classification")
FROM_PHANTOM = "from-phantom"
LABEL_VARIANT_NOTE = (
    "gt-label-classification: graph built from ground-truth labels instead of a trained "
    "classifier, so these numbers upper-bound the classification baseline"
)


@dataclass
class CenterParams:
    noise_sigma: float = 0.0
    drop_fraction: float = 0.0
    threshold: float = 1.5
    window: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 <= self.drop_fraction < 1.0:
            raise ValueError("drop_fraction must be in [0, 1)")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window must be a positive odd integer")


@dataclass
class GraphParams:
    radius: float = 15.0
    alpha: float = 1.0 / 15.0
    cutoff: float = 2.0
    gamma: float = 1.0 / 3.0
    margin: float = 3.0

    def __post_init__(self):
        for name in ("radius", "alpha", "cutoff", "gamma", "margin"):
            if not getattr(self, name) > 0:
                raise ValueError(f"graph.{name} must be positive")

    def loss_params(self) -> TopologyLossParams:
        return TopologyLossParams(self.alpha, self.gamma, self.margin, self.radius)


@dataclass
class ExperimentConfig:
    phantom: PhantomConfig
    centers: CenterParams = field(default_factory=CenterParams)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    variant: str = "topology"
    graph: GraphParams = field(default_factory=GraphParams)
    sources: Union[str, SourceSpec] = FROM_PHANTOM
    output_dir: str = "run"

    def __post_init__(self):
        if isinstance(self.phantom, dict):
            self.phantom = PhantomConfig.from_dict(self.phantom)
        if isinstance(self.centers, dict):
            self.centers = CenterParams(**self.centers)
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        if isinstance(self.graph, dict):
            self.graph = GraphParams(**self.graph)
        if isinstance(self.sources, dict):
            self.sources = SourceSpec.from_dict(self.sources)
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {', '.join(VARIANTS)}; got {self.variant!r}")
        if isinstance(self.sources, str) and self.sources != FROM_PHANTOM:
            raise ValueError(f"sources must be a source spec or {FROM_PHANTOM!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {"phantom", "centers", "optimizer", "variant", "graph", "sources", "output_dir"}
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        if "phantom" not in d:
            raise ValueError("experiment config needs a 'phantom' section")
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "phantom": self.phantom.to_dict(),
            "centers": asdict(self.centers),
            "optimizer": self.optimizer.to_dict(),
            "variant": self.variant,
            "graph": asdict(self.graph),
            "sources": self.sources if isinstance(self.sources, str) else self.sources.to_dict(),
            "output_dir": self.output_dir,
        }

    def config_hash(self) -> str:
        """sha256 of the canonical config; the output directory does not count."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def load_experiment_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    seeds: dict
    artifacts: dict  # name -> path relative to the run directory
    hashes: dict  # name -> sha256
    eval_report: str
    variant: str
    final_loss: Optional[float] = None
    note: Optional[str] = None
    version: str = __version__
    run_dir: Optional[Path] = None
    wall_times: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        # wall times are kept out of the file so reruns stay byte-identical
        d = {
            "tool": "topotree",
            "version": self.version,
            "config_hash": self.config_hash,
            "variant": self.variant,
            "seeds": self.seeds,
            "artifacts": {k: {"path": self.artifacts[k], "sha256": self.hashes[k]} for k in sorted(self.artifacts)},
            "eval_report": self.eval_report,
            "final_loss": self.final_loss,
        }
        if self.note:
            d["note"] = self.note
        return d

    @classmethod
    def from_dict(cls, d: dict, run_dir=None) -> "RunManifest":
        arts = d["artifacts"]
        return cls(
            config_hash=d["config_hash"],
            seeds=d["seeds"],
            artifacts={k: v["path"] for k, v in arts.items()},
            hashes={k: v["sha256"] for k, v in arts.items()},
            eval_report=d["eval_report"],
            variant=d["variant"],
            final_loss=d.get("final_loss"),
            note=d.get("note"),
            version=d["version"],
            run_dir=Path(run_dir) if run_dir is not None else None,
        )

    def verify(self) -> list[str]:
        """Names of artifacts that are missing or whose content hash changed."""
        bad = []
        for name, rel in self.artifacts.items():
            p = Path(self.run_dir) / rel
            if not p.exists() or sha256_file(p) != self.hashes[name]:
                bad.append(name)
        return bad


def write_manifest(manifest: RunManifest, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")
    return path


def read_manifest(path) -> RunManifest:
    path = Path(path)
    return RunManifest.from_dict(json.loads(path.read_text()), run_dir=path.parent)


# ---------------------------------------------------------------- stages
# Each stage takes file paths in and writes file paths out.


def stage_phantom(config: PhantomConfig, out_dir) -> dict:
    return write_phantom(generate_phantom(config), out_dir)


def stage_centers(phantom_dir, params: CenterParams, out_path) -> Path:
    ph = read_phantom(phantom_dir)
    centers = centers_from_ground_truth(
        ph, params.noise_sigma, params.drop_fraction, params.seed, params.threshold, params.window
    )
    if not len(centers):
        raise ValueError("center extraction found no center voxels")
    return write_centers(centers, out_path)


def stage_pairs(phantom_dir, centers_path, radius: float, out_path) -> Path:
    return write_pairs(build_pair_set(read_phantom(phantom_dir), read_centers(centers_path), radius), out_path)


def stage_embed(pairs_path, centers_path, optimizer: OptimizerConfig, objective: str,
                loss_params: TopologyLossParams, out_path, trace_path=None) -> float:
    """Fit embeddings and write them; returns the final loss."""
    n = len(read_centers(centers_path))
    table, trace = optimize_embeddings(read_pairs(pairs_path), n, optimizer, objective, loss_params)
    write_embeddings(table, out_path)
    if trace_path is not None:
        write_trace(trace, trace_path)
    return trace[-1]


def stage_graph(centers_path, metric: str, params: GraphParams, out_path,
                embeddings_path=None, phantom_dir=None) -> Path:
    centers = read_centers(centers_path)
    if metric == "topology":
        g = build_topology_graph(centers, read_embeddings(embeddings_path), params.radius, params.alpha, params.cutoff)
    elif metric == "cosine":
        g = build_cosine_graph(centers, read_embeddings(embeddings_path), params.radius)
    elif metric == "gt-label-classification":
        g = build_label_graph(centers, center_labels(read_phantom(phantom_dir), centers), params.radius)
    else:
        raise ValueError(f"unknown graph metric {metric!r}")
    return write_graph(g, out_path)


def resolve_sources(sources, phantom_dir=None) -> SourceSpec:
    if isinstance(sources, SourceSpec):
        return sources
    if sources == FROM_PHANTOM:
        return SourceSpec(read_phantom(phantom_dir).source_positions())
    raise ValueError(f"bad sources value {sources!r}")


def stage_reconstruct(graph_path, centers_path, spec: SourceSpec, trees_path, report_path=None) -> dict:
    centers = read_centers(centers_path)
    graph = read_graph(graph_path)
    if graph.n_vertices != len(centers):
        raise ValueError(f"graph has {graph.n_vertices} vertices but there are {len(centers)} centers")
    src = snap_sources(spec, centers)
    trees, report = forest_to_trees(shortest_path_forest(graph, src), centers)
    report["source_vertices"] = {str(k): v for k, v in sorted(src.items())}
    write_trees(trees, trees_path)
    if report_path is not None:
        write_report(report, report_path)
    return report


def stage_evaluate(gt_path, pred_path, out_path, note: Optional[str] = None) -> Path:
    report = evaluate(read_trees(gt_path), read_trees(pred_path))
    report.note = note
    return write_eval_report(report, out_path)


# ---------------------------------------------------------------- runner


class _Run:
    def __init__(self, out: Path):
        self.out = out
        self.artifacts: dict[str, str] = {}
        self.times: dict[str, float] = {}

    def add(self, name, path):
        self.artifacts[name] = Path(path).relative_to(self.out).as_posix()

    def stage(self, name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            result = fn(*args, **kwargs)
        except Exception as exc:
            raise StageError(name, exc, [self.out / p for p in self.artifacts.values()]) from exc
        self.times[name] = time.perf_counter() - t0
        log.info("stage %s done in %.2fs", name, self.times[name])
        return result


def run_experiment(config: ExperimentConfig, output_dir=None) -> RunManifest:
    """Run every stage for ``config`` and write manifest.json into the run directory."""
    out = Path(output_dir if output_dir is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    run = _Run(out)
    cfg_path = out / "config.json"
    saved = config.to_dict()
    saved.pop("output_dir")  # so the same config run into two places gives identical directories
    cfg_path.write_text(json.dumps(saved, indent=2, sort_keys=True) + "\n")
    run.add("config", cfg_path)

    ph_dir = out / "phantom"
    for name, p in run.stage("phantom", stage_phantom, config.phantom, ph_dir).items():
        run.add(f"phantom.{name}", p)
        if p.suffix == ".json" and p.with_suffix(".raw").exists():
            run.add(f"phantom.{name}.raw", p.with_suffix(".raw"))

    centers = run.stage("centers", stage_centers, ph_dir, config.centers, out / "centers.csv")
    run.add("centers", centers)

    final_loss = None
    emb = None
    if config.variant != "gt-label-classification":
        pairs = run.stage("pairs", stage_pairs, ph_dir, centers, config.graph.radius, out / "pairs.csv")
        run.add("pairs", pairs)
        emb, trace = out / "embeddings.json", out / "loss_trace.csv"
        final_loss = run.stage("embed", stage_embed, pairs, centers, config.optimizer, config.variant,
                               config.graph.loss_params(), emb, trace)
        run.add("embeddings", emb)
        run.add("loss_trace", trace)

    graph = run.stage("graph", stage_graph, centers, config.variant, config.graph, out / "graph.csv",
                      embeddings_path=emb, phantom_dir=ph_dir)
    run.add("graph", graph)

    spec = run.stage("sources", resolve_sources, config.sources, ph_dir)
    src_path = out / "sources.json"
    src_path.write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    run.add("sources", src_path)

    pred, rep = out / "pred_trees.json", out / "recon_report.json"
    run.stage("reconstruct", stage_reconstruct, graph, centers, spec, pred, rep)
    run.add("pred_trees", pred)
    run.add("recon_report", rep)

    note = LABEL_VARIANT_NOTE if config.variant == "gt-label-classification" else None
    ev = run.stage("evaluate", stage_evaluate, ph_dir / "trees.json", pred, out / "eval_report.json", note)
    run.add("eval_report", ev)

    manifest = RunManifest(
        config_hash=config.config_hash(),
        seeds={
            "phantom": config.phantom.seed,
            "centers": config.centers.seed,
            "optimizer": None if emb is None else config.optimizer.seed,
        },
        artifacts=dict(run.artifacts),
        hashes={k: sha256_file(out / v) for k, v in run.artifacts.items()},
        eval_report=run.artifacts["eval_report"],
        variant=config.variant,
        final_loss=final_loss,
        note=note,
        run_dir=out,
        wall_times=dict(run.times),
    )
    write_manifest(manifest, out / "manifest.json")
    return manifest


# ---------------------------------------------------------------- sweeps


def _set_path(d: dict, dotted: str, value):
    keys = dotted.split(".")
    node = d
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ValueError(f"grid key {dotted!r} does not name a config field")
        node = node[k]
    if keys[-1] not in node:
        raise ValueError(f"grid key {dotted!r} does not name a config field")
    node[keys[-1]] = value


def grid_points(grid: dict) -> list[dict]:
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("parameter grid is empty")
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def _sweep_one(args):
    base, point, run_dir = args
    d = copy.deepcopy(base)
    for k, v in point.items():
        _set_path(d, k, v)
    try:
        m = run_experiment(ExperimentConfig.from_dict(d), run_dir)
    except Exception as exc:  # recorded, the sweep keeps going
        return point, None, f"{type(exc).__name__}: {exc}"
    return point, m, None


@dataclass
class SweepResult:
    points: list[dict]
    manifests: list[Optional[RunManifest]]
    errors: list[Optional[str]]
    csv_path: Path

    @property
    def failures(self):
        return [(p, e) for p, e in zip(self.points, self.errors) if e is not None]


def run_sweep(base: ExperimentConfig, grid: dict, out_dir=None, jobs: int = 1) -> SweepResult:
    """One run per grid point (cartesian product of ``grid``), plus sweep.csv with per-class dice."""
    points = grid_points(grid)
    out = Path(out_dir if out_dir is not None else base.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    base_d = base.to_dict()
    probe = copy.deepcopy(base_d)
    for key in grid:  # a misspelled key is a config error, not a failed run
        _set_path(probe, key, None)
    tasks = [(base_d, p, out / f"point_{k:03d}") for k, p in enumerate(points)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_one, tasks))
    else:
        results = [_sweep_one(t) for t in tasks]

    manifests = [m for _, m, _ in results]
    errors = [e for _, _, e in results]
    dice = []
    for m in manifests:
        if m is None:
            dice.append({})
            continue
        rep = read_eval_report(Path(m.run_dir) / m.eval_report)
        dice.append({c: cm.dice for c, cm in rep.classes.items()})
    labels = sorted({c for d in dice for c in d})
    keys = list(grid)
    csv_path = out / "sweep.csv"
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["point", *keys, "status", *[f"dice_{c}" for c in labels], "error"])
        for k, (p, d, e) in enumerate(zip(points, dice, errors)):
            cells = ["" if d.get(c) is None else f"{d[c]:.6f}" for c in labels]
            w.writerow([f"point_{k:03d}", *[p[key] for key in keys], "ok" if e is None else "failed", *cells, e or ""])
    return SweepResult(points, manifests, errors, csv_path)
