import json

import pytest

from phantoms import small_config
from topotree import __version__
from topotree.errors import StageError
from topotree.evaluation import read_eval_report
from topotree.pipeline import (
    LABEL_VARIANT_NOTE,
    ExperimentConfig,
    grid_points,
    read_manifest,
    resolve_sources,
    run_experiment,
    run_sweep,
    stage_evaluate,
    stage_graph,
    stage_reconstruct,
)


def quick_config(variant="topology", **over):
    d = dict(phantom=small_config(0), optimizer=dict(seed=0, max_iters=300), variant=variant, output_dir="unused")
    d.update(over)
    return ExperimentConfig.from_dict(d)


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def topo_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("topo")
    return run_experiment(quick_config(), out), out


def test_run_writes_every_artifact(topo_run):
    m, out = topo_run
    assert m.verify() == []
    for name in ("centers", "pairs", "embeddings", "loss_trace", "graph", "pred_trees", "recon_report",
                 "eval_report", "config", "phantom.trees", "phantom.gt_centerness.raw"):
        assert (out / m.artifacts[name]).is_file(), name
    doc = json.loads((out / "manifest.json").read_text())
    assert doc["version"] == __version__
    assert doc["config_hash"] == quick_config().config_hash()
    assert doc["seeds"] == {"phantom": 0, "centers": 0, "optimizer": 0}
    assert all(not v["path"].startswith("/") for v in doc["artifacts"].values())
    assert set(m.wall_times) >= {"phantom", "centers", "pairs", "embed", "graph", "reconstruct", "evaluate"}
    back = read_manifest(out / "manifest.json")
    assert back.verify() == [] and back.hashes == m.hashes


def test_small_run_reconstructs_both_trees(topo_run):
    m, out = topo_run
    rep = read_eval_report(out / m.eval_report)
    assert rep.ignored_predictions == 0
    assert all(c.dice >= 0.95 for c in rep.classes.values())


def test_same_config_gives_identical_directories(topo_run, tmp_path):
    _, first = topo_run
    run_experiment(quick_config(), tmp_path)
    assert _files(tmp_path) == _files(first)


def test_stage_isolation_rerun_from_intermediates(topo_run, tmp_path):
    m, out = topo_run
    cfg = quick_config()
    stage_graph(out / "centers.csv", "topology", cfg.graph, tmp_path / "graph.csv", embeddings_path=out / "embeddings.json")
    assert (tmp_path / "graph.csv").read_bytes() == (out / "graph.csv").read_bytes()
    spec = resolve_sources("from-phantom", out / "phantom")
    stage_reconstruct(tmp_path / "graph.csv", out / "centers.csv", spec, tmp_path / "pred.json", tmp_path / "rep.json")
    assert (tmp_path / "pred.json").read_bytes() == (out / "pred_trees.json").read_bytes()
    assert (tmp_path / "rep.json").read_bytes() == (out / "recon_report.json").read_bytes()
    stage_evaluate(out / "phantom" / "trees.json", tmp_path / "pred.json", tmp_path / "ev.json")
    assert (tmp_path / "ev.json").read_bytes() == (out / "eval_report.json").read_bytes()


def test_label_variant_skips_embedding_and_says_so(tmp_path):
    m = run_experiment(quick_config("gt-label-classification"), tmp_path)
    assert "embeddings" not in m.artifacts and "pairs" not in m.artifacts
    assert m.seeds["optimizer"] is None
    rep = read_eval_report(tmp_path / m.eval_report)
    assert rep.note == LABEL_VARIANT_NOTE
    assert json.loads((tmp_path / "manifest.json").read_text())["note"] == LABEL_VARIANT_NOTE


def test_stage_errors_name_the_stage(tmp_path):
    cfg = quick_config(sources={"positions": {"1": [31, 31, 0]}, "snap_radius": 1.0})
    with pytest.raises(StageError) as err:
        run_experiment(cfg, tmp_path)
    assert err.value.stage == "reconstruct"
    assert any(a.endswith("graph.csv") for a in err.value.artifacts)


def test_config_hash_and_validation():
    a = quick_config()
    assert a.config_hash() == quick_config(output_dir="elsewhere").config_hash()
    assert a.config_hash() != quick_config(optimizer=dict(seed=1, max_iters=300)).config_hash()
    with pytest.raises(ValueError):
        quick_config("tree-magic")
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"phantom": small_config(0), "bogus": 1})
    with pytest.raises(ValueError):
        quick_config(sources="from-nowhere")
    with pytest.raises(ValueError):
        quick_config(centers=dict(drop_fraction=1.0))


def test_grid_points():
    assert grid_points({"a": [1, 2], "b": [3]}) == [{"a": 1, "b": 3}, {"a": 2, "b": 3}]
    with pytest.raises(ValueError):
        grid_points({})
    with pytest.raises(ValueError):
        grid_points({"a": []})


def test_sweep_records_failures_and_continues(tmp_path):
    base = quick_config("gt-label-classification")
    res = run_sweep(base, {"centers.drop_fraction": [0.0, 1.5, 0.1]}, tmp_path)
    assert len(res.manifests) == 3
    assert res.manifests[1] is None and "drop_fraction" in res.errors[1]
    assert len(res.failures) == 1
    rows = res.csv_path.read_text().splitlines()
    assert rows[0] == "point,centers.drop_fraction,status,dice_1,dice_2,error"
    assert len(rows) == 4
    assert rows[2].split(",")[2] == "failed"


def test_sweep_parallel_matches_serial(tmp_path):
    base = quick_config("gt-label-classification")
    grid = {"centers.drop_fraction": [0.0, 0.1]}
    a = run_sweep(base, grid, tmp_path / "a", jobs=1)
    b = run_sweep(base, grid, tmp_path / "b", jobs=2)
    assert a.csv_path.read_bytes() == b.csv_path.read_bytes()
    assert _files(tmp_path / "a") == _files(tmp_path / "b")


def test_sweep_rejects_unknown_key(tmp_path):
    with pytest.raises(ValueError, match="nope"):
        run_sweep(quick_config("gt-label-classification"), {"centers.nope": [1]}, tmp_path)
