"""Stage I: self-training with model-invariant feature learning.

Each iteration runs three steps on one mini-batch:

1. all backbones and classifiers on ``L_pl + L_cm1 + L_cm2`` (+ max squares),
2. classifiers only on ``L_C`` (backbones frozen),
3. backbones only on ``L_B`` (+ max squares; classifiers frozen).
"""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .ensemble_core import LabelSpace, UnionSetProblem, ensemble_logits, ensemble_predict, validate_union
from .losses import LossValue, loss_B, loss_C, loss_cm1, loss_cm2, loss_maxsquares, loss_pl
from .models import (Backbone, Classifier, ModelBundle, TrainingDiverged, cross_logits,
                     load_checkpoint, sample_batch, save_checkpoint)
from .pseudo_labels import PseudoLabelSet
from .schedule import TrainSchedule, make_sgd, poly_lr, set_lr

log = logging.getLogger(__name__)

__all__ = [
    "RecombinationMap", "StageOneSwitches", "StageOneState", "TrainSchedule", "poly_lr",
    "sample_recombination", "init_state", "step1_joint", "step2_classifiers", "step3_backbones",
    "run_stage1", "Stage1Result",
]


@dataclass(frozen=True)
class RecombinationMap:
    """``ma[i]`` is the classifier paired with backbone ``i`` (0-based)."""

    ma: tuple[int, ...]

    def __post_init__(self):
        if sorted(self.ma) != list(range(len(self.ma))):
            raise ValueError(f"{self.ma} is not a permutation")

    @property
    def k(self) -> int:
        return len(self.ma)

    def is_identity(self) -> bool:
        return all(i == m for i, m in enumerate(self.ma))


def sample_recombination(k: int, rng: np.random.Generator) -> RecombinationMap:
    """Uniform over non-identity permutations when k >= 2, identity for k == 1."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k == 1:
        return RecombinationMap((0,))
    while True:
        perm = RecombinationMap(tuple(int(v) for v in rng.permutation(k)))
        if not perm.is_identity():
            return perm


@dataclass(frozen=True)
class StageOneSwitches:
    """Ablation switches; self-training is always on in Stage I."""

    cross_model_consistency: bool = True
    adversarial: bool = True
    max_squares: bool = True


@dataclass
class StageOneState:
    backbones: list[Backbone]
    classifiers: list[Classifier]
    target: LabelSpace
    opt_backbone: torch.optim.Optimizer
    opt_classifier: torch.optim.Optimizer
    rng: np.random.Generator
    iteration: int = 0
    recombination: RecombinationMap | None = None
    history: list[dict] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.backbones)

    @property
    def spaces(self) -> list[LabelSpace]:
        return [c.label_space for c in self.classifiers]

    def bundles(self, meta: dict | None = None) -> list[ModelBundle]:
        return [ModelBundle(b, c, dict(meta or {})) for b, c in zip(self.backbones, self.classifiers)]


def init_state(bundles: Sequence[ModelBundle], target: LabelSpace, schedule: TrainSchedule) -> StageOneState:
    """Deep-copies the bundles so the pretrained inputs stay untouched."""
    widths = {b.backbone.spec.feature_channels for b in bundles}
    if len(widths) != 1:
        raise ValueError("all bundles must share the feature width")
    backbones = [copy.deepcopy(b.backbone) for b in bundles]
    classifiers = [copy.deepcopy(b.classifier) for b in bundles]
    opt_b = make_sgd((p for b in backbones for p in b.parameters()), schedule)
    opt_c = make_sgd((p for c in classifiers for p in c.parameters()), schedule)
    return StageOneState(backbones, classifiers, target, opt_b, opt_c,
                         np.random.default_rng(schedule.seed))


def _check_finite(lv: LossValue, state: StageOneState, step: str) -> None:
    if not torch.isfinite(lv.value):
        raise TrainingDiverged(
            f"{step}: non-finite loss {lv.item()} at iteration {state.iteration}; parts={lv.parts}")


def _ensemble_msl(cross, spaces, target) -> LossValue:
    terms = [loss_maxsquares(torch.softmax(ensemble_logits(row, spaces, target), dim=1)) for row in cross]
    v = torch.stack([t.value for t in terms]).sum()
    return LossValue(v, {"msl": float(v.detach())})


def _apply(lv: LossValue, optimizers, lr: float) -> None:
    set_lr(optimizers, lr)
    for opt in optimizers:
        opt.zero_grad(set_to_none=True)
    lv.value.backward()
    for opt in optimizers:
        opt.step()


def step1_joint(state: StageOneState, images: torch.Tensor, y_src, y_tgt,
                schedule: TrainSchedule, switches: StageOneSwitches = StageOneSwitches()) -> LossValue:
    """Joint update of every backbone and classifier."""
    w = schedule.weights
    spaces, target = state.spaces, state.target
    state.recombination = sample_recombination(state.k, state.rng)
    ma = state.recombination.ma
    cross = cross_logits(state.backbones, state.classifiers, images)

    total = loss_pl(cross, spaces, target, y_src, y_tgt).scaled(w["pl"])
    if switches.cross_model_consistency:
        original = ensemble_predict([cross[i][i] for i in range(state.k)], spaces, target)
        recombined = [cross[i][ma[i]] for i in range(state.k)]
        mixed = ensemble_predict(recombined, [spaces[m] for m in ma], target)
        total = total + loss_cm1(original, mixed).scaled(w["cm1"])
        total = total + loss_cm2(recombined, spaces, ma, target).scaled(w["cm2"])
    if switches.max_squares:
        total = total + _ensemble_msl(cross, spaces, target).scaled(w["msl"])
    _check_finite(total, state, "step1")
    _apply(total, [state.opt_backbone, state.opt_classifier], schedule.lr_at(state.iteration))
    return total


def step2_classifiers(state: StageOneState, images: torch.Tensor, y_src,
                      schedule: TrainSchedule) -> LossValue:
    """Classifier update against ``L_C``; backbone features are detached."""
    cross = cross_logits(state.backbones, state.classifiers, images, detach_features=True)
    total = loss_C(cross, y_src).scaled(schedule.weights["adv_c"])
    _check_finite(total, state, "step2")
    _apply(total, [state.opt_classifier], schedule.lr_at(state.iteration))
    return total


def step3_backbones(state: StageOneState, images: torch.Tensor, y_src, schedule: TrainSchedule,
                    switches: StageOneSwitches = StageOneSwitches()) -> LossValue:
    """Backbone update against ``L_B`` with the classifiers frozen."""
    params = [p for c in state.classifiers for p in c.parameters()]
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        cross = cross_logits(state.backbones, state.classifiers, images)
        total = loss_B(cross, state.spaces, state.target, y_src).scaled(schedule.weights["adv_b"])
        if switches.max_squares:
            total = total + _ensemble_msl(cross, state.spaces, state.target).scaled(schedule.weights["msl"])
        _check_finite(total, state, "step3")
        _apply(total, [state.opt_backbone], schedule.lr_at(state.iteration))
    finally:
        for p, f in zip(params, flags):
            p.requires_grad_(f)
    return total


def _record(state: StageOneState, step: str, lv: LossValue) -> dict:
    rec = {"iteration": state.iteration, "step": step, "loss": lv.item(), **lv.parts}
    state.history.append(rec)
    return rec


def train_iteration(state: StageOneState, images, y_src, y_tgt, schedule: TrainSchedule,
                    switches: StageOneSwitches) -> list[dict]:
    recs = [_record(state, "step1", step1_joint(state, images, y_src, y_tgt, schedule, switches))]
    if switches.adversarial:
        recs.append(_record(state, "step2", step2_classifiers(state, images, y_src, schedule)))
        recs.append(_record(state, "step3", step3_backbones(state, images, y_src, schedule, switches)))
    state.iteration += 1
    return recs


# -- persistence for resumable runs -----------------------------------------

def save_state(state: StageOneState, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i, b in enumerate(state.bundles({"iteration": state.iteration})):
        save_checkpoint(b, path / f"bundle_{i}")
    torch.save({"opt_backbone": state.opt_backbone.state_dict(),
                "opt_classifier": state.opt_classifier.state_dict()}, path / "optim.pt")
    (path / "state.json").write_text(json.dumps(
        {"iteration": state.iteration, "rng": state.rng.bit_generator.state}, indent=1))


def load_state(path, target: LabelSpace, schedule: TrainSchedule) -> StageOneState:
    path = Path(path)
    meta = json.loads((path / "state.json").read_text())
    k = len(list(path.glob("bundle_*")))
    bundles = [load_checkpoint(path / f"bundle_{i}") for i in range(k)]
    state = init_state(bundles, target, schedule)
    opt = torch.load(path / "optim.pt", weights_only=True)
    state.opt_backbone.load_state_dict(opt["opt_backbone"])
    state.opt_classifier.load_state_dict(opt["opt_classifier"])
    state.rng.bit_generator.state = meta["rng"]
    state.iteration = meta["iteration"]
    return state


@dataclass
class Stage1Result:
    bundles: list[ModelBundle]
    history: list[dict]
    evals: list[dict]
    report: dict


def run_stage1(problem: UnionSetProblem, bundles: Sequence[ModelBundle], target_data,
               pseudo: PseudoLabelSet, schedule: TrainSchedule,
               switches: StageOneSwitches = StageOneSwitches(),
               evaluator: Callable[[list[ModelBundle]], dict] | None = None,
               out_dir=None, resume_from=None) -> Stage1Result:
    """Train for ``schedule.total_iterations`` with poly learning-rate decay.

    ``evaluator`` maps adapted bundles to a metric dict; it is the only place
    labeled target data may enter, and it never feeds back into training.
    """
    report_ok = validate_union(problem)
    if not report_ok.ok:
        raise ValueError(f"union constraint violated: {report_ok.describe()}")
    if len(pseudo) != len(target_data):
        raise ValueError("pseudo labels do not cover the target dataset")
    if list(pseudo.ids) != list(target_data.ids):
        raise ValueError("pseudo-label ids do not match the target dataset")
    target = problem.target_space
    if resume_from is not None:
        state = load_state(resume_from, target, schedule)
    else:
        state = init_state(bundles, target, schedule)
    dtype = next(state.backbones[0].parameters()).dtype
    images_all = torch.as_tensor(target_data.images, dtype=dtype)
    out = Path(out_dir) if out_dir is not None else None
    logf = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        logf = open(out / "metrics.log", "a")
    evals = []
    try:
        while state.iteration < schedule.total_iterations:
            t = state.iteration
            idx = sample_batch(state.rng, len(images_all), schedule.batch_size)
            y_src, y_tgt = pseudo.batch(idx)
            try:
                recs = train_iteration(state, images_all[torch.as_tensor(idx)], y_src, y_tgt,
                                       schedule, switches)
            except TrainingDiverged:
                if out is not None:
                    save_state(state, out / "checkpoints" / "last_good")
                raise
            if logf is not None and schedule.log_interval and t % schedule.log_interval == 0:
                for r in recs:
                    logf.write(json.dumps(r, sort_keys=True) + "\n")
                log.info("stage1 it=%d %s", t, " ".join(f"{r['step']}={r['loss']:.4f}" for r in recs))
            if out is not None and schedule.checkpoint_interval and (t + 1) % schedule.checkpoint_interval == 0:
                save_state(state, out / "checkpoints" / "latest")
            if evaluator is not None and schedule.eval_interval and (t + 1) % schedule.eval_interval == 0:
                ev = {"iteration": t + 1, **evaluator(state.bundles())}
                evals.append(ev)
                if logf is not None:
                    logf.write(json.dumps({"eval": ev}, sort_keys=True) + "\n")
    finally:
        if logf is not None:
            logf.close()

    adapted = state.bundles({"iterations": state.iteration, "stage": "stage1"})
    report = {"iterations": state.iteration, "switches": asdict(switches),
              "schedule": schedule.to_dict()}
    if evaluator is not None:
        report.update(evaluator(adapted))
    if out is not None:
        for i, b in enumerate(adapted):
            save_checkpoint(b, out / f"bundle_{i}")
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return Stage1Result(adapted, state.history, evals, report)
