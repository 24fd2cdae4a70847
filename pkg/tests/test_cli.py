import hashlib
import json
from pathlib import Path

import pytest

from usmsma.cli import EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_OK, main

SMALL = """
task: {size: 16, n_train: 12, n_test: 6, n_source_val: 4}
model: {feature_channels: 8, depth: 2}
pretrain: {total_iterations: 30}
stage1: {total_iterations: 4, eval_interval: 2, log_interval: 1}
stage2: {total_iterations: 4, eval_interval: 2, log_interval: 1, select_count: 4}
"""


def run(cfg, out, *args):
    return main([args[0], "--config", str(cfg), "--out", str(out), *args[1:]])


@pytest.fixture(scope="module")
def cfg(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "small.yaml"
    p.write_text(SMALL)
    return p


@pytest.fixture(scope="module")
def pipeline(cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    for verb in ("synth", "pretrain", "adapt", "integrate", "eval"):
        assert run(cfg, out, verb) == EXIT_OK, verb
    return out


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(root.rglob("*")):
        if f.is_file():
            h.update(str(f.relative_to(root)).encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def test_synth_idempotent_and_force_identical(cfg, tmp_path, capsys):
    assert run(cfg, tmp_path, "synth") == EXIT_OK
    first = tree_digest(tmp_path / "task")
    capsys.readouterr()
    assert run(cfg, tmp_path, "synth") == EXIT_OK
    assert "up to date" in capsys.readouterr().out
    assert run(cfg, tmp_path, "synth", "--force") == EXIT_OK
    assert tree_digest(tmp_path / "task") == first
    assert run(cfg, tmp_path, "synth", "--set", "task.n_train=13") == EXIT_DATA


def test_config_errors(cfg, tmp_path, capsys):
    assert run(cfg, tmp_path, "synth", "--set", "task.preset_file=missing.yaml") == EXIT_CONFIG
    assert "missing.yaml" in capsys.readouterr().err
    assert run(cfg, tmp_path, "synth", "--set", "stage1.bogus=1") == EXIT_CONFIG
    assert run(cfg, tmp_path, "synth", "--set", "switches.self_training=false") == EXIT_CONFIG
    assert run(cfg, tmp_path, "synth", "--set", "stage2.policy=median") == EXIT_CONFIG
    assert main(["synth", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_preset_file(tmp_path):
    (tmp_path / "preset.yaml").write_text(
        "setting: partly-overlapping\nsource_classes: [[0, 1, 2], [0, 3, 4, 5]]\n")
    cfg = tmp_path / "c.yaml"
    cfg.write_text(SMALL + "\n" + "task_extra: 1\n")
    assert run(cfg, tmp_path, "synth") == EXIT_CONFIG
    cfg.write_text(SMALL.replace("task: {", "task: {preset_file: preset.yaml, "))
    assert run(cfg, tmp_path / "o", "synth") == EXIT_OK
    meta = json.loads((tmp_path / "o" / "task" / "task.json").read_text())
    assert meta["preset"]["setting"] == "partly-overlapping"


def test_dependency_errors(cfg, tmp_path):
    assert run(cfg, tmp_path, "pretrain") == EXIT_DATA
    assert run(cfg, tmp_path, "synth") == EXIT_OK
    assert run(cfg, tmp_path, "adapt") == EXIT_DATA
    assert run(cfg, tmp_path, "integrate") == EXIT_DATA
    assert run(cfg, tmp_path, "eval") == EXIT_DATA
    assert run(cfg, tmp_path, "integrate", "--set", "switches.model_integration=false") == EXIT_CONFIG


def test_pipeline_artifacts(pipeline):
    seed = pipeline / "seed_0"
    for phase in ("pretrain", "stage1", "stage2", "eval"):
        assert (seed / phase / "DONE").is_file()
    for plot in ("pretrain/loss.png", "stage1/loss.png", "stage1/miou.png", "stage2/loss.png"):
        assert (seed / plot).stat().st_size > 0
    names = [r["name"] for r in json.loads((seed / "eval" / "records.json").read_text())]
    assert names[-1] == "stage2/M_fin" and "stage1/B0+all" in names


def test_rerun_is_up_to_date(cfg, pipeline, capsys):
    capsys.readouterr()
    assert run(cfg, pipeline, "adapt") == EXIT_OK
    assert "up to date" in capsys.readouterr().out
    assert run(cfg, pipeline, "adapt", "--set", "stage1.lr=0.02") == EXIT_DATA


def test_eval_checkpoint_matches_phase_eval(cfg, pipeline):
    seed = pipeline / "seed_0"
    phase = {r["name"]: r["miou"] for r in json.loads((seed / "eval" / "records.json").read_text())}
    assert run(cfg, pipeline, "eval", "--checkpoint", str(seed / "stage2" / "final")) == EXIT_OK
    recs = json.loads((seed / "eval" / "checkpoints" / "final" / "records.json").read_text())
    assert recs[0]["miou"] == phase["stage2/M_fin"]
    assert run(cfg, pipeline, "eval", "--checkpoint", str(seed / "stage1")) == EXIT_OK
    recs = json.loads((seed / "eval" / "checkpoints" / "stage1" / "records.json").read_text())
    assert recs[0]["miou"] == phase["stage1/B0+all"]
    assert run(cfg, pipeline, "eval", "--checkpoint", str(seed / "stage1" / "bundle_0")) == EXIT_DATA


def test_determinism_fresh_rerun(cfg, pipeline, tmp_path):
    for verb in ("synth", "pretrain", "adapt", "integrate", "eval"):
        assert run(cfg, tmp_path, verb) == EXIT_OK
    a = (pipeline / "seed_0" / "eval" / "records.json").read_text()
    b = (tmp_path / "seed_0" / "eval" / "records.json").read_text()
    assert a == b


def test_self_training_only_adapt(cfg, pipeline, tmp_path):
    assert run(cfg, tmp_path, "synth") == EXIT_OK
    assert run(cfg, tmp_path, "pretrain") == EXIT_OK
    off = ["--set", "switches.cross_model_consistency=false", "--set", "switches.adversarial=false",
           "--set", "switches.max_squares=false"]
    assert run(cfg, tmp_path, "adapt", *off) == EXIT_OK
    steps = {json.loads(l)["step"] for l in (tmp_path / "seed_0" / "stage1" / "metrics.log").read_text().splitlines()
             if "step" in json.loads(l)}
    assert steps == {"step1"}


def test_divergence_exit_code_and_no_marker(cfg, tmp_path):
    assert run(cfg, tmp_path, "synth") == EXIT_OK
    assert run(cfg, tmp_path, "pretrain") == EXIT_OK
    assert run(cfg, tmp_path, "adapt", "--set", "stage1.weights.pl=.inf") == EXIT_DIVERGED
    stage = tmp_path / "seed_0" / "stage1"
    assert not (stage / "DONE").exists()
    assert (stage / "checkpoints" / "last_good" / "state.json").is_file()


def test_ablate_rows_and_report(cfg, tmp_path, capsys):
    assert run(cfg, tmp_path, "synth") == EXIT_OK
    assert run(cfg, tmp_path, "ablate") == EXIT_OK
    lad = json.loads((tmp_path / "seed_0" / "ablation" / "ladder.json").read_text())
    assert [r["name"] for r in lad["rows"]] == ["ST", "ST+CMC", "ST+CMC+ADV", "ST+CMC+ADV+MSL",
                                                "ST+CMC+ADV+MSL+MI"]
    pre = json.loads((tmp_path / "seed_0" / "pretrain" / "run.json").read_text())
    assert lad["pretrained_checksums"] == pre["checksums"]
    for f in ("table.txt", "loss.png", "miou.png", "ladder.png"):
        assert (tmp_path / "seed_0" / "ablation" / f).is_file()

    capsys.readouterr()
    assert run(cfg, tmp_path, "report") == EXIT_OK
    single = json.loads((tmp_path / "report" / "report.json").read_text())
    for r in lad["rows"]:
        s = single["ablation"][r["name"]]
        assert s["mean"] == r["miou"] and s["std"] == 0.0

    assert run(cfg, tmp_path, "ablate", "--seed", "1", "--row", "ST") == EXIT_OK
    assert run(cfg, tmp_path, "report") == EXIT_OK
    two = json.loads((tmp_path / "report" / "report.json").read_text())["ablation"]
    assert two["ST"]["n"] == 2 and two["ST+CMC"]["n"] == 1
    vals = two["ST"]["values"]
    assert two["ST"]["mean"] == pytest.approx(sum(vals) / 2)
    assert "+/-" in (tmp_path / "report" / "report.txt").read_text()


def test_report_refuses_mismatched_tasks(cfg, pipeline, tmp_path, capsys):
    other = tmp_path / "other"
    for verb in ("synth", "pretrain", "adapt"):
        assert run(cfg, other, verb, "--set", "task.domain_seed=3") == EXIT_OK
    capsys.readouterr()
    code = main(["report", "--out", str(tmp_path), str(pipeline / "seed_0"), str(other / "seed_0")])
    assert code == EXIT_DATA
    assert "different tasks" in capsys.readouterr().err


def test_output_root_from_environment(cfg, tmp_path, monkeypatch):
    monkeypatch.setenv("USMSMA_OUT", str(tmp_path / "env"))
    assert main(["synth", "--config", str(cfg)]) == EXIT_OK
    assert (tmp_path / "env" / "task" / "task.json").is_file()
