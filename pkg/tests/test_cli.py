import json
import re
import subprocess
import sys

import pytest

from phantoms import small_config
from topotree import __version__
from topotree.cli import build_parser, main

SUBCOMMANDS = ["phantom", "centers", "pairs", "embed", "graph", "reconstruct", "evaluate", "run", "sweep", "export"]
ERROR_LINE = re.compile(r"^topotree: error category=(usage|io|validation|divergence)( stage=\w+)? message=.+$")


def _exit_code(argv):
    try:
        return main(argv)
    except SystemExit as exc:
        return exc.code


def _error_line(capsys):
    lines = [line for line in capsys.readouterr().err.splitlines() if line.startswith("topotree: error")]
    assert len(lines) == 1
    assert ERROR_LINE.match(lines[0]), lines[0]
    return lines[0]


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """Every stage run through the CLI, each consuming the previous stage's files."""
    d = tmp_path_factory.mktemp("chain")
    (d / "p.json").write_text(json.dumps(small_config(0)))
    steps = [
        ["phantom", "--config", d / "p.json", "--out", d / "ph"],
        ["centers", "--phantom", d / "ph", "--out", d / "c.csv"],
        ["pairs", "--phantom", d / "ph", "--centers", d / "c.csv", "--out", d / "pairs.csv"],
        ["embed", "--pairs", d / "pairs.csv", "--centers", d / "c.csv", "--out", d / "e.json",
         "--max-iters", "300", "--trace", d / "t.csv"],
        ["graph", "--centers", d / "c.csv", "--embeddings", d / "e.json", "--out", d / "g.csv"],
        ["reconstruct", "--graph", d / "g.csv", "--centers", d / "c.csv", "--phantom", d / "ph",
         "--out", d / "pred.json", "--report", d / "r.json"],
        ["evaluate", "--gt", d / "ph" / "trees.json", "--pred", d / "pred.json", "--out", d / "ev.json"],
        ["export", "--trees", d / "pred.json", "--obj", d / "m.obj", "--csv", d / "m.csv"],
    ]
    for argv in steps:
        assert main([str(a) for a in argv]) == 0, argv[0]
    return d


def test_help_on_every_subcommand(capsys):
    for cmd in SUBCOMMANDS:
        with pytest.raises(SystemExit) as exc:
            main([cmd, "--help"])
        assert exc.value.code == 0
        assert "usage: topotree " + cmd in capsys.readouterr().out


def test_parser_lists_all_subcommands():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    assert sorted(sub.choices) == sorted(SUBCOMMANDS)


def test_version(capsys):
    assert _exit_code(["--version"]) == 0
    assert capsys.readouterr().out.strip() == f"topotree {__version__}"


def test_stage_chain_produces_readable_files(chain):
    for name in ("ph/trees.json", "c.csv", "pairs.csv", "e.json", "t.csv", "g.csv", "pred.json", "r.json",
                 "ev.json", "m.obj", "m.csv"):
        assert (chain / name).is_file(), name
    ev = json.loads((chain / "ev.json").read_text())
    assert ev["ignored_predictions"] == 0


def test_graph_without_header_is_io_error(chain, tmp_path, capsys):
    lines = (chain / "g.csv").read_text().splitlines()
    bad = tmp_path / "g.csv"
    bad.write_text("\n".join([lines[0]] + lines[2:]) + "\n")
    code = _exit_code(["reconstruct", "--graph", str(bad), "--centers", str(chain / "c.csv"),
                       "--phantom", str(chain / "ph"), "--out", str(tmp_path / "x.json")])
    assert code == 3
    assert "category=io" in _error_line(capsys)


def test_usage_error(capsys):
    assert _exit_code(["centers", "--bogus"]) == 2
    assert "category=usage" in _error_line(capsys)
    assert _exit_code(["frobnicate"]) == 2
    _error_line(capsys)


def test_missing_file_is_io_error(tmp_path, capsys):
    assert _exit_code(["evaluate", "--gt", str(tmp_path / "nope.json"), "--pred", "x", "--out", "y"]) == 3
    assert "category=io" in _error_line(capsys)


def test_schema_mismatch_is_io_error(tmp_path, capsys):
    p = tmp_path / "c.csv"
    p.write_text("foo,bar\n")
    assert _exit_code(["pairs", "--phantom", str(tmp_path), "--centers", str(p), "--out", "x"]) == 3
    _error_line(capsys)


def test_validation_error(chain, tmp_path, capsys):
    code = _exit_code(["centers", "--phantom", str(chain / "ph"), "--out", str(tmp_path / "c.csv"), "--window", "4"])
    assert code == 4
    assert "category=validation" in _error_line(capsys)
    far = tmp_path / "src.json"
    far.write_text(json.dumps({"positions": {"1": [31, 31, 0]}, "snap_radius": 0.5}))
    code = _exit_code(["reconstruct", "--graph", str(chain / "g.csv"), "--centers", str(chain / "c.csv"),
                       "--sources", str(far), "--out", str(tmp_path / "x.json")])
    assert code == 4
    _error_line(capsys)


def test_divergence_exit_code(chain, tmp_path, capsys):
    code = _exit_code(["embed", "--pairs", str(chain / "pairs.csv"), "--centers", str(chain / "c.csv"),
                       "--out", str(tmp_path / "e.json"), "--step-size", "1e308", "--max-iters", "20"])
    assert code == 5
    assert "category=divergence" in _error_line(capsys)


def _experiment(tmp_path, variant="topology"):
    cfg = dict(phantom=small_config(1), optimizer=dict(seed=2, max_iters=200), variant=variant,
               output_dir=str(tmp_path / "default"))
    p = tmp_path / "e.json"
    p.write_text(json.dumps(cfg))
    return p


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_run_twice_is_byte_identical(tmp_path):
    cfg = _experiment(tmp_path)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "a"), "--timings", str(tmp_path / "t.json")]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    assert _files(tmp_path / "a") == _files(tmp_path / "b")
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["version"] == __version__ and len(manifest["config_hash"]) == 64
    assert "embed" in json.loads((tmp_path / "t.json").read_text())


def test_sweep_command(tmp_path, capsys):
    cfg = _experiment(tmp_path, "gt-label-classification")
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"centers.drop_fraction": [0.0, 0.05, 0.1]}))
    assert main(["sweep", "--config", str(cfg), "--grid", str(grid), "--out", str(tmp_path / "s"), "--jobs", "2"]) == 0
    rows = (tmp_path / "s" / "sweep.csv").read_text().splitlines()
    assert len(rows) == 4
    assert sum((tmp_path / "s" / f"point_{k:03d}" / "manifest.json").is_file() for k in range(3)) == 3
    (tmp_path / "empty.json").write_text("{}")
    assert _exit_code(["sweep", "--config", str(cfg), "--grid", str(tmp_path / "empty.json")]) == 4
    _error_line(capsys)


def test_console_script_entry_point():
    out = subprocess.run([sys.executable, "-m", "topotree.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and __version__ in out.stdout
