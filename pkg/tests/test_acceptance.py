"""Acceptance criteria, each at its stated tolerance; one PASS/FAIL line per criterion."""
import json
import time

import numpy as np
import pytest
import torch

import grad_suite
import oracle_suite
import stage_checks
from usmsma.ablation import run_ladder
from usmsma.cli import main
from usmsma.config import RunConfig
from usmsma.data_synth import build_task
from usmsma.models import pretrain_source
from usmsma.pseudo_labels import generate_pseudo_labels

SEEDS = (0, 1, 2)
FULL, MSL_ROW, ST = "ST+CMC+ADV+MSL+MI", "ST+CMC+ADV+MSL", "ST"


def report(n, name, ok, detail):
    print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n} ({name}): {detail}")


def test_1_oracle_equivalence():
    t0 = time.perf_counter()
    errs = oracle_suite.run(n_instances=200, seed=0)
    dt = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst <= 1e-6 and dt < 60
    report(1, "oracle equivalence", ok, f"{len(errs)} ops x 200 instances, max abs err {worst:.2e}, {dt:.1f}s")
    assert ok, errs


def test_2_gradient_suite():
    t0 = time.perf_counter()
    frac = grad_suite.run(seed=0)
    dt = time.perf_counter() - t0
    ok = all(v >= 0.95 for v in frac.values()) and len(frac) == 7 and dt < 300
    detail = ", ".join(f"{k} {v:.2f}" for k, v in frac.items())
    report(2, "gradient suite", ok, f"pass fractions {detail}; {dt:.1f}s")
    assert ok, frac


def test_3_degeneracy():
    t0 = time.perf_counter()
    dev, vanish = stage_checks.degeneracy(iterations=20)
    dt = time.perf_counter() - t0
    ok = dev <= 1e-9 and vanish <= 1e-9 and dt < 120
    report(3, "k=1 degeneracy", ok, f"max loss deviation {dev:.1e}, max cm/L1-adv part {vanish:.1e}, {dt:.1f}s")
    assert ok


def test_4_freezing():
    ok2, ok3 = stage_checks.freezing_stage1(iterations=50)
    frozen, moved = stage_checks.freezing_stage2(iterations=50)
    ok = ok2 == 50 and ok3 == 50 and frozen and moved
    report(4, "freezing contracts", ok,
           f"step2 backbones frozen {ok2}/50, step3 classifiers frozen {ok3}/50, "
           f"stage II B_i frozen={frozen} (B_fin moved={moved})")
    assert ok


@pytest.fixture(scope="module")
def ladders():
    """Full ladder on the default task for every seed (shared by criteria 5 and 6)."""
    t0 = time.perf_counter()
    out = {}
    base = RunConfig.load()
    task = build_task(base.task_preset(), base.domains(), **base.sizes())
    for seed in SEEDS:
        cfg = RunConfig.load(seed=seed)
        spec = cfg.backbone_spec()
        bundles = [pretrain_source(src, spec, space, cfg.schedule("pretrain", seed_offset=i))
                   for i, (src, space) in enumerate(zip(task.sources, task.problem.source_spaces))]
        pseudo = generate_pseudo_labels(bundles, task.target_train, task.problem, cfg.tau)
        res = run_ladder(task.problem, bundles, task.target_train, task.target_test, pseudo,
                         cfg.schedule("stage1"), cfg.schedule("stage2"), tau=cfg.tau,
                         select_count=cfg.raw["stage2"]["select_count"])
        out[seed] = {r["name"]: r for r in res.rows}
    return out, time.perf_counter() - t0


def test_5_ablation_ordering(ladders):
    rows, dt = ladders
    mean = {n: float(np.mean([rows[s][n]["miou"] for s in SEEDS])) for n in rows[0]}
    gain = mean[FULL] - mean[ST]
    stage2 = mean[FULL] - mean[MSL_ROW]
    ok = gain >= 0.01 and stage2 >= -0.005 and dt <= 1800
    table = ", ".join(f"{n} {100 * v:.1f}" for n, v in mean.items())
    report(5, "ablation ordering", ok,
           f"mean mIoU {table}; full-ST {100 * gain:+.2f} pts (need >= +1.0), "
           f"full-(ST+CMC+ADV+MSL) {100 * stage2:+.2f} pts (need >= -0.5); ladder time {dt:.0f}s")
    assert ok


def test_6_integration(ladders):
    rows, _ = ladders
    above_mean, above_max, parts = 0, 0, []
    for s in SEEDS:
        fin = rows[s][FULL]["miou"]
        bundles = rows[s][FULL]["stage1_bundle_miou"]
        above_mean += fin >= float(np.mean(bundles))
        above_max += fin >= max(bundles)
        parts.append(f"seed {s}: M_fin {100 * fin:.2f} vs bundles "
                     + "/".join(f"{100 * b:.2f}" for b in bundles))
    ok = above_mean == len(SEEDS) and above_max >= 2
    report(6, "integration", ok, f"{'; '.join(parts)}; >=mean on {above_mean}/3, >=max on {above_max}/3")
    assert ok


def test_7_inference_cost():
    ratio = stage_checks.timing_ratio(runs=100)
    ok = ratio <= 1.3
    report(7, "inference cost", ok, f"median predict_final / single-bundle ensemble = {ratio:.3f} (need <= 1.3)")
    assert ok


DET_CONFIG = """
task: {size: 32, n_train: 24, n_test: 8, n_source_val: 8}
model: {feature_channels: 16, depth: 2}
pretrain: {total_iterations: 60}
stage1: {total_iterations: 20, eval_interval: 10}
stage2: {total_iterations: 20, eval_interval: 10, select_count: 8}
"""


def _cli_records(cfg, out):
    for verb in ("synth", "pretrain", "adapt", "integrate", "eval"):
        assert main([verb, "--config", str(cfg), "--out", str(out), "--seed", "3"]) == 0, verb
    assert main(["ablate", "--config", str(cfg), "--out", str(out), "--seed", "3", "--row", "ST"]) == 0
    seed = out / "seed_3"
    return {"eval": (seed / "eval" / "records.json").read_text(),
            "stage1": json.loads((seed / "stage1" / "report.json").read_text())["record"],
            "stage2": json.loads((seed / "stage2" / "report.json").read_text())["record"],
            "ablation": json.loads((seed / "ablation" / "ladder.json").read_text())["records"]}


def test_8_determinism(tmp_path):
    cfg = tmp_path / "det.yaml"
    cfg.write_text(DET_CONFIG)
    a = _cli_records(cfg, tmp_path / "a")
    b = _cli_records(cfg, tmp_path / "b")
    ok = a == b
    report(8, "determinism", ok, "two CLI runs, same config and seed: metric records "
           + ("identical" if ok else "differ"))
    assert ok
