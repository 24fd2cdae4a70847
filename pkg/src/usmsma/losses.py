"""Training objectives.

All losses take logits that were already computed, so the caller decides
which parameters receive gradients (detached features freeze backbones,
``requires_grad_(False)`` freezes classifiers).  ``cross[i][j]`` always means
classifier ``j`` applied to the features of backbone ``i``, i.e.
``C_j(B_i(x))``.

Every per-pixel quantity is averaged over the pixels of the batch and summed
over the model/classifier indices.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F

from .ensemble_core import LabelSpace, _class_average, ensemble_logits

IGNORE = 255


@dataclass
class LossValue:
    value: torch.Tensor
    parts: dict[str, float] = field(default_factory=dict)

    def item(self) -> float:
        return float(self.value.detach())

    def __add__(self, other: "LossValue") -> "LossValue":
        parts = dict(self.parts)
        for k, v in other.parts.items():
            parts[k] = parts.get(k, 0.0) + v
        return LossValue(self.value + other.value, parts)

    def scaled(self, w: float) -> "LossValue":
        return LossValue(self.value * w, dict(self.parts))


def _f(t: torch.Tensor) -> float:
    return float(t.detach())


def ce_loss(logits: torch.Tensor, labels: torch.Tensor, ignore_value: int = IGNORE) -> LossValue:
    """Mean cross-entropy over the non-ignored pixels."""
    if logits.dim() != 4 or labels.dim() != 3:
        raise ValueError(f"expected (N,C,H,W) logits and (N,H,W) labels, got "
                         f"{tuple(logits.shape)} and {tuple(labels.shape)}")
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ValueError(f"label shape {tuple(labels.shape)} does not match logits {tuple(logits.shape)}")
    labels = labels.long()
    valid = labels != ignore_value
    if bool(((labels < 0) | (labels >= logits.shape[1]))[valid].any()):
        raise ValueError(f"labels outside [0, {logits.shape[1]}) that are not the ignore value")
    count = int(valid.sum())
    if count == 0:
        zero = logits.sum() * 0.0
        return LossValue(zero, {"ce": 0.0})
    total = F.cross_entropy(logits, labels, ignore_index=ignore_value, reduction="sum")
    v = total / count
    return LossValue(v, {"ce": _f(v)})


def mean_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-pixel L1 norm over channels, averaged over pixels."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().sum(dim=1).mean()


def loss_pl(
    cross: Sequence[Sequence[torch.Tensor]],
    spaces: Sequence[LabelSpace],
    target: LabelSpace,
    y_src: Sequence[torch.Tensor],
    y_tgt: torch.Tensor,
    ignore_value: int = IGNORE,
) -> LossValue:
    """Self-training: each model on its own pseudo labels, plus every
    backbone's classifier ensemble on the target-space pseudo labels."""
    k = len(spaces)
    if y_src is None or y_tgt is None or len(y_src) != k:
        raise ValueError("loss_pl needs one source pseudo-label grid per model and y_T")
    model_terms = []
    ens_terms = []
    for i in range(k):
        model_terms.append(ce_loss(cross[i][i], y_src[i], ignore_value).value)
        ens = ensemble_logits(cross[i], spaces, target)
        ens_terms.append(ce_loss(ens, y_tgt, ignore_value).value)
    model = torch.stack(model_terms).sum()
    ens = torch.stack(ens_terms).sum()
    return LossValue(model + ens, {"pl_model": _f(model), "pl_ensemble": _f(ens)})


def loss_cm1(original_prob: torch.Tensor, recombined_prob: torch.Tensor) -> LossValue:
    """L1 discrepancy between the original and recombined ensemble predictions."""
    v = mean_l1(original_prob, recombined_prob)
    return LossValue(v, {"cm1": _f(v)})


def check_recombination(ma: Sequence[int], k: int) -> None:
    if len(ma) != k or sorted(ma) != list(range(k)):
        raise ValueError(f"recombination map {list(ma)} is not a permutation of range({k})")


def loss_cm2(
    recombined: Sequence[torch.Tensor],
    spaces: Sequence[LabelSpace],
    ma: Sequence[int],
    target: LabelSpace,
) -> LossValue:
    """Per-class consistency of the recombined models' logits.

    ``recombined[i]`` is ``C_ma(i)(B_i(x))``; each term covers the classes
    that classifier ``ma(i)`` owns.  The mean is not detached.
    """
    k = len(spaces)
    check_recombination(ma, k)
    matched = [spaces[m] for m in ma]
    delta = _class_average(recombined, matched, target)
    pos = {c: t for t, c in enumerate(target.classes)}
    terms = []
    for i in range(k):
        idx = torch.tensor([pos[c] for c in matched[i].classes], device=delta.device)
        terms.append(mean_l1(recombined[i][:, 1:], delta.index_select(1, idx)))
    v = torch.stack(terms).sum()
    return LossValue(v, {"cm2": _f(v)})


def loss_C(
    cross: Sequence[Sequence[torch.Tensor]],
    y_src: Sequence[torch.Tensor],
    ignore_value: int = IGNORE,
) -> LossValue:
    """Classifier step of the adversarial game: maximize each classifier's
    disagreement between its own backbone's and the other backbones' features,
    while keeping it accurate on its own pseudo labels."""
    k = len(y_src)
    disc = []
    ce = []
    for i in range(k):
        own = cross[i][i]
        for j in range(k):
            disc.append(-mean_l1(own, cross[j][i]))
        ce.append(ce_loss(own, y_src[i], ignore_value).value)
    d = torch.stack(disc).sum()
    c = torch.stack(ce).sum()
    return LossValue(d + c, {"adv_c_l1": _f(d), "adv_c_ce": _f(c)})


def loss_B(
    cross: Sequence[Sequence[torch.Tensor]],
    spaces: Sequence[LabelSpace],
    target: LabelSpace,
    y_src: Sequence[torch.Tensor],
    ignore_value: int = IGNORE,
) -> LossValue:
    """Backbone step: every classifier on backbone ``i`` should agree with
    the per-class mean logits on that backbone, and fit its pseudo labels."""
    k = len(spaces)
    pos = {c: t for t, c in enumerate(target.classes)}
    l1 = []
    ce = []
    for i in range(k):
        delta_i = _class_average(cross[i], spaces, target)
        for j in range(k):
            idx = torch.tensor([pos[c] for c in spaces[j].classes], device=delta_i.device)
            l1.append(mean_l1(cross[i][j][:, 1:], delta_i.index_select(1, idx)))
            ce.append(ce_loss(cross[i][j], y_src[j], ignore_value).value)
    a = torch.stack(l1).sum()
    c = torch.stack(ce).sum()
    return LossValue(a + c, {"adv_b_l1": _f(a), "adv_b_ce": _f(c)})


def kld(
    student_logits: torch.Tensor,
    teacher_logits: torch.Tensor,
    temperature: float = 1.0,
    direction: str = "student_teacher",
) -> torch.Tensor:
    """Pixel-mean KL divergence between channel softmaxes.

    ``student_teacher`` computes KL(student || teacher); ``teacher_student``
    the reverse.  No T**2 rescaling is applied.
    """
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(f"shape mismatch {tuple(student_logits.shape)} vs {tuple(teacher_logits.shape)}")
    log_s = F.log_softmax(student_logits / temperature, dim=1)
    log_t = F.log_softmax(teacher_logits / temperature, dim=1)
    if direction == "student_teacher":
        per_pixel = (log_s.exp() * (log_s - log_t)).sum(dim=1)
    elif direction == "teacher_student":
        per_pixel = (log_t.exp() * (log_t - log_s)).sum(dim=1)
    else:
        raise ValueError(f"unknown KL direction {direction!r}")
    return per_pixel.mean()


def loss_kd(
    student: Sequence[torch.Tensor],
    teacher: Sequence[torch.Tensor],
    temperature: float = 1.0,
    direction: str = "student_teacher",
) -> LossValue:
    """Distillation of ``C_i(B_i(x))`` into ``C_i(B_fin(x))``; teachers are detached."""
    if len(student) != len(teacher):
        raise ValueError("student and teacher lists differ in length")
    terms = [kld(s, t.detach(), temperature, direction) for s, t in zip(student, teacher)]
    v = torch.stack(terms).sum()
    return LossValue(v, {"kd": _f(v)})


def loss_maxsquares(prob: torch.Tensor, atol: float = 1e-3) -> LossValue:
    """Maximum squares loss ``-sum(p**2) / (2 * pixels)``."""
    sums = prob.detach().sum(dim=1)
    if bool(((sums - 1).abs() > atol).any()) or bool((prob.detach() < -atol).any()):
        raise ValueError("maximum squares loss expects per-pixel probability vectors")
    v = -(prob ** 2).sum(dim=1).mean() / 2
    return LossValue(v, {"msl": _f(v)})
