"""Stage II: distill the adapted models into one backbone shared by all classifiers."""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .ensemble_core import UnionSetProblem, class_argmax, ensemble_logits, ensemble_predict
from .losses import LossValue, ce_loss, loss_kd, loss_maxsquares
from .metrics_eval import ConfusionMatrix, accumulate, miou
from .models import (Backbone, FinalModel, ModelBundle, TrainingDiverged, build_bundle,
                     bundle_ensemble_predict, sample_batch, save_checkpoint)
from .pseudo_labels import PseudoLabelSet
from .schedule import TrainSchedule, make_sgd, set_lr

log = logging.getLogger(__name__)

POLICIES = ("best", "random", "index")


@torch.no_grad()
def selection_scores(bundles: Sequence[ModelBundle], problem: UnionSetProblem, images: np.ndarray,
                     y_tgt: np.ndarray) -> list[float]:
    """Ensemble mIoU of each backbone (with every classifier) against pseudo labels."""
    target = problem.target_space
    classifiers = [b.classifier for b in bundles]
    dtype = next(bundles[0].backbone.parameters()).dtype
    x = torch.as_tensor(images, dtype=dtype)
    scores = []
    for b in bundles:
        pred = class_argmax(bundle_ensemble_predict(b.backbone, classifiers, target, x)).numpy()
        cm = accumulate(ConfusionMatrix(problem.num_classes), pred, y_tgt)
        scores.append(miou(cm) if cm.total else float("nan"))
    return scores


def init_final_backbone(bundles: Sequence[ModelBundle], policy: str = "best", *, index: int = 0,
                        seed: int = 0, scores: Sequence[float] | None = None) -> Backbone:
    """Copy the best-scoring (or the indexed) backbone, or draw a fresh one."""
    if policy == "index":
        if not 0 <= index < len(bundles):
            raise ValueError(f"bundle index {index} out of range")
        return copy.deepcopy(bundles[index].backbone)
    if policy == "best":
        if scores is None or len(scores) != len(bundles):
            raise ValueError("policy 'best' needs one selection score per bundle")
        best = int(np.nanargmax(np.asarray(scores, dtype=float)))
        return copy.deepcopy(bundles[best].backbone)
    if policy == "random":
        ref = bundles[0]
        dtype = next(ref.backbone.parameters()).dtype
        return build_bundle(ref.backbone.spec, ref.label_space, seed, dtype).backbone
    raise ValueError(f"unknown B_fin initialization policy {policy!r}; expected one of {POLICIES}")


@dataclass
class Stage2Result:
    final: FinalModel
    history: list[dict]
    evals: list[dict]
    report: dict


def _step(lv: LossValue, optimizers, lr: float, where: str, t: int) -> None:
    if not torch.isfinite(lv.value):
        raise TrainingDiverged(f"stage2 {where}: non-finite loss {lv.item()} at iteration {t}; parts={lv.parts}")
    set_lr(optimizers, lr)
    for opt in optimizers:
        opt.zero_grad(set_to_none=True)
    lv.value.backward()
    for opt in optimizers:
        opt.step()


def run_stage2(problem: UnionSetProblem, bundles: Sequence[ModelBundle], target_data,
               pseudo: PseudoLabelSet, schedule: TrainSchedule, *, policy: str = "best",
               index: int = 0, max_squares: bool = True, select_count: int = 0,
               kd_temperature: float = 1.0, kd_direction: str = "student_teacher",
               evaluator: Callable[[FinalModel], dict] | None = None, out_dir=None) -> Stage2Result:
    """Train ``B_fin`` and the classifiers with three sub-steps per iteration:

    (a) ensemble CE on ``y_T`` (+ max squares) for ``B_fin`` and all classifiers,
    (b) distillation of every ``C_i(B_i(x))`` into ``C_i(B_fin(x))`` for ``B_fin``,
    (c) per-classifier CE of ``C_i(B_i(x))`` on ``y_i`` for the classifiers.

    The adapted backbones ``B_i`` are never updated.  The last ``select_count``
    target images are held out to score bundles for the ``best`` policy.
    """
    if list(pseudo.ids) != list(target_data.ids):
        raise ValueError("pseudo-label ids do not match the target dataset")
    target = problem.target_space
    n = len(target_data)
    train_idx = np.arange(n - select_count) if 0 < select_count < n else np.arange(n)
    scores = None
    if policy == "best":
        sel = np.arange(n - select_count, n) if 0 < select_count < n else np.arange(n)
        scores = selection_scores(bundles, problem, target_data.images[sel], pseudo.y_tgt[sel])
    b_fin = init_final_backbone(bundles, policy, index=index, seed=schedule.seed, scores=scores)
    b_fin.train()
    teachers = [b.backbone for b in bundles]
    teacher_flags = [[p.requires_grad for p in b.parameters()] for b in teachers]
    for b in teachers:
        b.requires_grad_(False)
    classifiers = [copy.deepcopy(b.classifier) for b in bundles]
    spaces = [c.label_space for c in classifiers]
    c_params = [p for c in classifiers for p in c.parameters()]
    opt_b = make_sgd(b_fin.parameters(), schedule)
    opt_c = make_sgd(c_params, schedule)
    rng = np.random.default_rng(schedule.seed)
    dtype = next(b_fin.parameters()).dtype
    images_all = torch.as_tensor(target_data.images, dtype=dtype)
    w = schedule.weights
    history, evals = [], []
    out = Path(out_dir) if out_dir is not None else None
    logf = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        logf = open(out / "metrics.log", "a")

    def final_model(meta=None) -> FinalModel:
        return FinalModel(b_fin, classifiers, target, dict(meta or {}))

    try:
        for t in range(schedule.total_iterations):
            lr = schedule.lr_at(t)
            idx = train_idx[sample_batch(rng, len(train_idx), schedule.batch_size)]
            x = images_all[torch.as_tensor(idx)]
            y_src, y_tgt = pseudo.batch(idx)

            # (a)
            feats = b_fin(x)
            ens = ensemble_logits([c(feats) for c in classifiers], spaces, target)
            la = ce_loss(ens, y_tgt).scaled(w["ens_ce"])
            la.parts = {"ens_ce": la.parts["ce"]}
            if max_squares:
                la = la + loss_maxsquares(torch.softmax(ens, dim=1)).scaled(w["msl"])
            _step(la, [opt_b, opt_c], lr, "ensemble", t)

            # (b)
            for p in c_params:
                p.requires_grad_(False)
            try:
                with torch.no_grad():
                    teacher = [c(tb(x)) for c, tb in zip(classifiers, teachers)]
                feats = b_fin(x)
                lb = loss_kd([c(feats) for c in classifiers], teacher, kd_temperature,
                             kd_direction).scaled(w["kd"])
                _step(lb, [opt_b], lr, "distill", t)
            finally:
                for p in c_params:
                    p.requires_grad_(True)

            # (c)
            with torch.no_grad():
                tfeats = [tb(x) for tb in teachers]
            terms = [ce_loss(c(f), y).value for c, f, y in zip(classifiers, tfeats, y_src)]
            v = torch.stack(terms).sum() * w["src_ce"]
            lc = LossValue(v, {"src_ce": float(v.detach())})
            _step(lc, [opt_c], lr, "compat", t)

            rec = {"iteration": t, "loss": la.item() + lb.item() + lc.item(),
                   **la.parts, **lb.parts, **lc.parts}
            history.append(rec)
            if logf is not None and schedule.log_interval and t % schedule.log_interval == 0:
                logf.write(json.dumps(rec, sort_keys=True) + "\n")
                log.info("stage2 it=%d ens=%.4f kd=%.4f src=%.4f", t, la.item(), lb.item(), lc.item())
            if evaluator is not None and schedule.eval_interval and (t + 1) % schedule.eval_interval == 0:
                ev = {"iteration": t + 1, **evaluator(final_model())}
                evals.append(ev)
                if logf is not None:
                    logf.write(json.dumps({"eval": ev}, sort_keys=True) + "\n")
    finally:
        if logf is not None:
            logf.close()
        for b, flags in zip(teachers, teacher_flags):
            for p, f in zip(b.parameters(), flags):
                p.requires_grad_(f)

    final = final_model({"iterations": schedule.total_iterations, "stage": "stage2",
                         "policy": policy, "selection_scores": scores})
    report = {"iterations": schedule.total_iterations, "policy": policy,
              "selection_scores": scores, "schedule": schedule.to_dict()}
    if evaluator is not None:
        report.update(evaluator(final))
    if out is not None:
        save_checkpoint(final, out / "final")
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return Stage2Result(final, history, evals, report)


@torch.no_grad()
def predict_final(final: FinalModel, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """One backbone pass, ``k`` heads, one ensemble; returns (probabilities, labels)."""
    feats = final.backbone(images)
    prob = ensemble_predict([c(feats) for c in final.classifiers], final.spaces, final.target)
    return prob, class_argmax(prob)
