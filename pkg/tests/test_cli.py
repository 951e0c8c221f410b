import json
import shutil

import numpy as np
import pytest

from dmmia import pipeline
from dmmia.artifacts import parse_pgm, render_grid
from dmmia.cli import main
from dmmia.config import ConfigError, loads
from dmmia.metrics import reports_from_csv

TINY = """\
seed = 3
[data]
n_per_class = 60
[target]
epochs = 4
[evaluator]
epochs = 4
[generator]
epochs = 4
[attack]
epochs = 3
pool_size = 100
n_selected = 20
[theory]
n_probes = 2
mc_samples = 10000
[sweep]
lambda_idr = [0.0, 0.7]
"""


def write_config(tmp_path, text=TINY, name="c.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = write_config(base)
    outs = [base / "run1", base / "run2"]
    for out in outs:
        assert run("run-all", "--config", cfg, "--out", out) == 0
    assert run("sweep", "--config", cfg, "--out", outs[0]) == 0
    assert run("sweep", "--config", cfg, "--out", outs[1]) == 0
    return cfg, outs


# -- render_grid -----------------------------------------------------------------

def test_grid_single_image_header():
    buf = render_grid(np.full((1, 28, 28), 0.5), 1)
    assert buf.startswith(b"P5 28 28 255\n")
    assert len(buf) == len(b"P5 28 28 255\n") + 784
    assert set(parse_pgm(buf).ravel().tolist()) == {128}


def test_grid_all_zero_payload():
    buf = render_grid(np.zeros((1, 28, 28)), 1)
    assert buf[len(b"P5 28 28 255\n"):] == bytes(784)


def test_grid_three_images_two_cols():
    px = parse_pgm(render_grid(np.ones((3, 28, 28)), 2))
    assert px.shape == (57, 57)
    assert px[28, 0] == 128 and px[0, 28] == 128
    assert px[0, 0] == 255 and px[29, 0] == 255
    assert px[29, 29] == 0


def test_grid_rounds_to_nearest():
    px = parse_pgm(render_grid(np.full((1, 2, 2), 0.2), 1))
    assert px.ravel().tolist() == [51] * 4


# -- config ----------------------------------------------------------------------

def test_config_defaults_and_digest():
    cfg = loads("")
    assert cfg.attack.preset == "desk" and cfg.attack.base_config(0).n_selected == 50
    moved = loads('out_dir = "elsewhere"')
    assert moved.digest() == cfg.digest()
    assert loads("seed = 1").digest() != cfg.digest()


def test_config_rejects_unknown_and_mistyped_keys():
    with pytest.raises(ConfigError, match="data.colour"):
        loads("[data]\ncolour = 1\n")
    with pytest.raises(ConfigError, match="attack.warp"):
        loads("[attack]\nwarp = 2\n")
    with pytest.raises(ConfigError, match="target.epochs"):
        loads('[target]\nepochs = "many"\n')
    with pytest.raises(ConfigError):
        loads("[attack]\nn_selected = 900\n")
    with pytest.raises(ConfigError):
        loads("not toml = = =")


def test_attack_overrides_apply():
    cfg = loads("[attack]\npreset = \"paper\"\nlambda_idr = 0.5\n")
    base = cfg.attack.base_config(0)
    assert base.lambda_idr == 0.5 and base.n_prototypes == 500


# -- exit codes ------------------------------------------------------------------

def _stderr_json(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_unknown_key_exits_one(tmp_path, capsys):
    assert run("prepare-data", "--config", write_config(tmp_path, "[data]\nbogus = 1\n")) == 1
    err = _stderr_json(capsys)
    assert err["error"] == "ConfigError" and err["command"] == "prepare-data"


def test_missing_config_exits_one(tmp_path, capsys):
    assert run("prepare-data", "--config", tmp_path / "nope.toml") == 1
    assert "nope.toml" in _stderr_json(capsys)["message"]


def test_usage_error_exits_one(capsys):
    assert run("fly") == 1
    assert _stderr_json(capsys)["error"] == "UsageError"


def test_missing_inputs_are_named(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert run("train-target", "--config", cfg, "--out", tmp_path / "empty") == 1
    err = _stderr_json(capsys)
    assert err["error"] == "MissingInputError"
    assert "split.json" in err["message"] and "train-images.idx" in err["message"]


def test_internal_error_exits_two(tmp_path, capsys, monkeypatch):
    def boom(cfg, force=False):
        raise RuntimeError("kaput")

    monkeypatch.setitem(pipeline.STAGES, "prepare-data", boom)
    assert run("prepare-data", "--config", write_config(tmp_path)) == 2
    assert "kaput" in capsys.readouterr().err


# -- end to end ------------------------------------------------------------------

def _metrics(out):
    text = (out / "reports" / "metrics.csv").read_text()
    return text, reports_from_csv(text.split("\n", 1)[1])


def test_pipeline_reports_every_class(runs):
    _, (out, _) = runs
    text, reports = _metrics(out)
    assert text.startswith("# config_digest=")
    assert sorted((r.method, r.target_class) for r in reports) == [
        (m, c) for m in ("baseline", "dmmia") for c in range(5)
    ]
    for name in ("prepare-data", "train-target", "train-evaluator", "pretrain-generator", "attack", "evaluate", "report"):
        manifest = json.loads((out / "manifests" / f"{name}.json").read_text())
        assert manifest["seed"] == 3 and "wall_time_s" in manifest
    for method in ("dmmia", "baseline"):
        assert parse_pgm((out / "grids" / f"{method}.pgm").read_bytes()).shape == (5 * 29 - 1, 10 * 29 - 1)


def test_baseline_and_dmmia_configs_differ_only_in_weights(runs):
    _, (out, _) = runs
    a = json.loads((out / "attacks" / "dmmia" / "class2" / "result.json").read_text())["attack"]
    b = json.loads((out / "attacks" / "baseline" / "class2" / "result.json").read_text())["attack"]
    assert {k for k in a if a[k] != b[k]} == {"lambda_imr", "lambda_idr", "baseline_mode"}


def test_sweep_two_rows(runs):
    _, (out, _) = runs
    lines = (out / "reports" / "sweep.csv").read_text().splitlines()
    header = lines[1].split(",")
    rows = [dict(zip(header, line.split(","))) for line in lines[2:]]
    assert len(rows) == 2
    assert [float(r["lambda_idr"]) for r in rows] == [0.0, 0.7]
    keys = ("lambda_imr", "n_prototypes", "n_positive", "momentum")
    assert all(rows[0][k] == rows[1][k] for k in keys)


def test_rerun_is_byte_identical(runs):
    _, (a, b) = runs
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.parts[-2] != "manifests")
    assert any(p.suffix == ".csv" for p in files) and any(p.suffix == ".ckpt" for p in files)
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_parallel_attack_matches_sequential(runs, tmp_path):
    cfg, (a, b) = runs
    assert run("attack", "--config", cfg, "--out", b, "--workers", "3") == 0
    for p in (a / "attacks").rglob("*"):
        if p.is_file():
            assert p.read_bytes() == (b / p.relative_to(a)).read_bytes()


def test_digest_mismatch_refused_unless_forced(runs, tmp_path, capsys):
    _, (out, _) = runs
    other = write_config(tmp_path, TINY.replace("seed = 3", "seed = 4"))
    assert run("evaluate", "--config", other, "--out", out) == 1
    assert _stderr_json(capsys)["error"] == "DigestMismatch"


def test_force_accepts_mismatched_inputs(runs, tmp_path):
    cfg, (out, _) = runs
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    other = write_config(tmp_path, TINY.replace("seed = 3", "seed = 4"))
    assert run("evaluate", "--config", other, "--out", copy, "--force") == 0


def test_theory_check_subcommand(tmp_path):
    out = tmp_path / "theory"
    assert run("theory-check", "--config", write_config(tmp_path), "--out", out) == 0
    lines = (out / "reports" / "theory.csv").read_text().splitlines()
    assert lines[1] == "check,lhs,rhs,gap,pass"
    assert all(line.endswith(",true") for line in lines[2:])
