"""Cumulative ablation ladder ST -> +CMC -> +ADV -> +MSL -> +MI."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .adapt_stage1 import StageOneSwitches, run_stage1
from .ensemble_core import UnionSetProblem, class_argmax
from .integrate_stage2 import predict_final, run_stage2
from .metrics_eval import ConfusionMatrix, EvalRecord, accumulate, evaluate_cm
from .models import FinalModel, ModelBundle, bundle_ensemble_predict, params_checksum
from .pseudo_labels import PseudoLabelSet, regenerate_for_stage2
from .schedule import TrainSchedule

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LadderRow:
    name: str
    switches: StageOneSwitches
    model_integration: bool = False


LADDER = (
    LadderRow("ST", StageOneSwitches(False, False, False)),
    LadderRow("ST+CMC", StageOneSwitches(True, False, False)),
    LadderRow("ST+CMC+ADV", StageOneSwitches(True, True, False)),
    LadderRow("ST+CMC+ADV+MSL", StageOneSwitches(True, True, True)),
    LadderRow("ST+CMC+ADV+MSL+MI", StageOneSwitches(True, True, True), model_integration=True),
)
ROW_NAMES = tuple(r.name for r in LADDER)


def row_for_switches(self_training: bool, cmc: bool, adv: bool, msl: bool, mi: bool) -> LadderRow:
    if not self_training:
        raise ValueError("self-training cannot be switched off in Stage I")
    return LadderRow("custom", StageOneSwitches(cmc, adv, msl), mi)


@torch.no_grad()
def _predict_batches(fn, images: np.ndarray, dtype, batch_size: int = 25) -> np.ndarray:
    out = []
    for s in range(0, len(images), batch_size):
        out.append(fn(torch.as_tensor(images[s:s + batch_size], dtype=dtype)).numpy())
    return np.concatenate(out)


def bundle_records(bundles: Sequence[ModelBundle], problem: UnionSetProblem, test,
                   background=(0,)) -> list[EvalRecord]:
    """One record per backbone: that backbone with every classifier, ensembled."""
    target = problem.target_space
    classifiers = [b.classifier for b in bundles]
    dtype = next(bundles[0].backbone.parameters()).dtype
    recs = []
    for i, b in enumerate(bundles):
        pred = _predict_batches(
            lambda x: class_argmax(bundle_ensemble_predict(b.backbone, classifiers, target, x)),
            test.images, dtype)
        cm = accumulate(ConfusionMatrix(problem.num_classes), pred, test.labels)
        recs.append(evaluate_cm(cm, problem.names(), f"B{i}+all", background))
    return recs


def final_record(final: FinalModel, problem: UnionSetProblem, test, background=(0,)) -> EvalRecord:
    dtype = next(final.backbone.parameters()).dtype
    pred = _predict_batches(lambda x: predict_final(final, x)[1], test.images, dtype)
    cm = accumulate(ConfusionMatrix(problem.num_classes), pred, test.labels)
    return evaluate_cm(cm, problem.names(), "M_fin", background)


def bundles_summary(bundles, problem, test, background=(0,)) -> dict:
    recs = bundle_records(bundles, problem, test, background)
    per = [r.miou for r in recs]
    return {"miou": float(np.mean(per)), "bundle_miou": per,
            "record": mean_record(recs, "mean").to_dict(),
            "records": [r.to_dict() for r in recs]}


def mean_record(recs: Sequence[EvalRecord], name: str) -> EvalRecord:
    iou = np.nanmean(np.array([r.iou for r in recs], dtype=float), axis=0)
    groups = {}
    for key in recs[0].groups:
        groups[key] = float(np.mean([r.groups[key] for r in recs]))
    return EvalRecord(name, recs[0].class_names, list(iou), float(np.mean([r.miou for r in recs])), groups)


@dataclass
class LadderResult:
    rows: list[dict] = field(default_factory=list)
    pretrained_checksums: list[str] = field(default_factory=list)

    def miou(self, name: str) -> float:
        for r in self.rows:
            if r["name"] == name:
                return r["miou"]
        raise KeyError(name)


def run_ladder(problem: UnionSetProblem, pretrained: Sequence[ModelBundle], target_train,
               test, pseudo: PseudoLabelSet, stage1: TrainSchedule, stage2: TrainSchedule, *,
               tau: float = 0.0, rows: Sequence[str] | None = None, background=(0,),
               select_count: int = 0, out_dir=None) -> LadderResult:
    """Run the requested ladder rows from one set of pretrained models.

    The MI row reuses the Stage I product of the full Stage I row.
    """
    wanted = list(rows) if rows else list(ROW_NAMES)
    unknown = set(wanted) - set(ROW_NAMES)
    if unknown:
        raise ValueError(f"unknown ladder rows {sorted(unknown)}; known: {ROW_NAMES}")
    out = Path(out_dir) if out_dir is not None else None
    checksum = [params_checksum([b.backbone, b.classifier]) for b in pretrained]
    result = LadderResult(pretrained_checksums=checksum)
    stage1_products: dict[str, list[ModelBundle]] = {}

    def evaluator(bs):
        return bundles_summary(bs, problem, test, background)

    for row in LADDER:
        need = row.name in wanted or (row.name == "ST+CMC+ADV+MSL" and "ST+CMC+ADV+MSL+MI" in wanted)
        if not need:
            continue
        row_dir = out / row.name if out is not None else None
        try:
            if not row.model_integration:
                if [params_checksum([b.backbone, b.classifier]) for b in pretrained] != checksum:
                    raise RuntimeError("pretrained checkpoints changed between ladder rows")
                res = run_stage1(problem, pretrained, target_train, pseudo, stage1, row.switches,
                                 evaluator=evaluator, out_dir=row_dir)
                stage1_products[row.name] = res.bundles
                entry = {"name": row.name, "miou": res.report["miou"],
                         "bundle_miou": res.report["bundle_miou"],
                         "record": {**res.report["record"], "name": row.name},
                         "history": res.history, "evals": res.evals}
            else:
                adapted = stage1_products["ST+CMC+ADV+MSL"]
                pseudo2 = regenerate_for_stage2(adapted, target_train, problem, tau)
                res2 = run_stage2(problem, adapted, target_train, pseudo2, stage2,
                                  max_squares=row.switches.max_squares, select_count=select_count,
                                  evaluator=lambda fm: {"record": final_record(fm, problem, test, background).to_dict()},
                                  out_dir=row_dir)
                rec = res2.report["record"]
                entry = {"name": row.name, "miou": rec["miou"], "record": rec,
                         "stage1_bundle_miou": result.rows[-1]["bundle_miou"] if result.rows else None,
                         "selection_scores": res2.report["selection_scores"],
                         "history": res2.history, "evals": res2.evals}
        except Exception as exc:  # partial-failure rows are marked, the ladder continues
            log.exception("ladder row %s failed", row.name)
            entry = {"name": row.name, "miou": float("nan"), "error": f"{type(exc).__name__}: {exc}"}
        if row.name in wanted:
            result.rows.append(entry)
        elif row.name == "ST+CMC+ADV+MSL":
            result.rows.append({**entry, "hidden": True})
        log.info("row %-20s mIoU %.4f", row.name, entry["miou"])
    result.rows = [r for r in result.rows if not r.get("hidden")]
    return result
