"""Label-space algebra and the classifier-ensemble operators.

Tensors follow the torch layout ``(N, C, H, W)``; the class axis is ``dim=1``.
A classifier that owns label space ``S`` emits ``1 + |S|`` channels, channel 0
being the "other" class (every target class outside ``S``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

MANIFEST_FORMAT = "usmsma-labelspace/1"


@dataclass(frozen=True)
class LabelSpace:
    """Ordered set of target-class indices.

    Classes are stored sorted by target index so channel ``1 + k`` of a
    classifier always maps to ``classes[k]``.
    """

    classes: tuple[int, ...]

    def __post_init__(self):
        cls = tuple(int(c) for c in self.classes)
        if not cls:
            raise ValueError("label space must be non-empty")
        if len(set(cls)) != len(cls):
            raise ValueError(f"duplicate class identifiers in {cls}")
        if min(cls) < 0:
            raise ValueError(f"class identifiers must be non-negative: {cls}")
        object.__setattr__(self, "classes", tuple(sorted(cls)))

    @classmethod
    def full(cls, n: int) -> "LabelSpace":
        return cls(tuple(range(n)))

    def __len__(self) -> int:
        return len(self.classes)

    def __contains__(self, c) -> bool:
        return int(c) in self.classes

    def __iter__(self):
        return iter(self.classes)

    @property
    def num_channels(self) -> int:
        return 1 + len(self.classes)

    def channel_of(self, c: int) -> int:
        """Classifier channel holding target class ``c``."""
        return 1 + self.classes.index(int(c))

    def issubset(self, other: "LabelSpace") -> bool:
        return set(self.classes) <= set(other.classes)


@dataclass
class UnionReport:
    ok: bool
    missing: tuple[int, ...] = ()
    # source index -> classes of that source that are not target classes
    extraneous: dict[int, tuple[int, ...]] = field(default_factory=dict)

    def __bool__(self):
        return self.ok

    def describe(self) -> str:
        if self.ok:
            return "ok"
        parts = []
        if self.missing:
            parts.append(f"uncovered target classes {list(self.missing)}")
        for i, extra in sorted(self.extraneous.items()):
            parts.append(f"source {i} has classes {list(extra)} not in target")
        return "; ".join(parts)


@dataclass(frozen=True)
class UnionSetProblem:
    target_space: LabelSpace
    source_spaces: tuple[LabelSpace, ...]
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "source_spaces", tuple(self.source_spaces))
        if len(self.source_spaces) < 1:
            raise ValueError("need at least one source domain")
        if self.class_names is not None:
            names = tuple(self.class_names)
            if len(names) != len(self.target_space):
                raise ValueError("class_names must match the target space size")
            object.__setattr__(self, "class_names", names)

    @property
    def k(self) -> int:
        return len(self.source_spaces)

    @property
    def num_classes(self) -> int:
        return len(self.target_space)

    def names(self) -> tuple[str, ...]:
        if self.class_names is not None:
            return self.class_names
        return tuple(f"class{c}" for c in self.target_space)


def validate_union(problem: UnionSetProblem) -> UnionReport:
    target = set(problem.target_space.classes)
    covered: set[int] = set()
    extraneous = {}
    for i, space in enumerate(problem.source_spaces):
        covered |= set(space.classes)
        extra = tuple(sorted(set(space.classes) - target))
        if extra:
            extraneous[i] = extra
    missing = tuple(sorted(target - covered))
    return UnionReport(ok=not missing and not extraneous, missing=missing, extraneous=extraneous)


def _require_union(spaces: Sequence[LabelSpace], target: LabelSpace) -> None:
    report = validate_union(UnionSetProblem(target, tuple(spaces)))
    if not report.ok:
        raise ValueError(f"union constraint violated: {report.describe()}")


def _check_field(logits: torch.Tensor, space: LabelSpace, i: int) -> None:
    if logits.dim() != 4:
        raise ValueError(f"field {i}: expected (N, C, H, W), got shape {tuple(logits.shape)}")
    if logits.shape[1] != space.num_channels:
        raise ValueError(
            f"field {i}: {logits.shape[1]} channels but label space needs {space.num_channels}"
        )


def _class_average(
    fields: Sequence[torch.Tensor], spaces: Sequence[LabelSpace], target: LabelSpace
) -> torch.Tensor:
    """Per target class, mean of the logits of the fields whose space owns it."""
    if len(fields) != len(spaces):
        raise ValueError(f"{len(fields)} logit fields but {len(spaces)} label spaces")
    if not fields:
        raise ValueError("need at least one logit field")
    _require_union(spaces, target)
    ref = fields[0]
    for i, (f, s) in enumerate(zip(fields, spaces)):
        _check_field(f, s, i)
        if f.shape[0] != ref.shape[0] or f.shape[2:] != ref.shape[2:]:
            raise ValueError(f"field {i}: shape {tuple(f.shape)} disagrees with {tuple(ref.shape)}")

    n, _, h, w = ref.shape
    pos = {c: t for t, c in enumerate(target.classes)}
    total = ref.new_zeros((n, len(target), h, w))
    count = ref.new_zeros(len(target))
    for f, s in zip(fields, spaces):
        idx = torch.tensor([pos[c] for c in s.classes], device=ref.device)
        total = total.index_add(1, idx, f[:, 1:])
        count = count.index_add(0, idx, torch.ones(len(s), dtype=ref.dtype, device=ref.device))
    return total / count.view(1, -1, 1, 1)


def ensemble_logits(
    logit_fields: Sequence[torch.Tensor], spaces: Sequence[LabelSpace], target: LabelSpace
) -> torch.Tensor:
    """Target-space logits: each class averaged over the classifiers that own it.

    Channel 0 ("other") of every field is ignored.
    """
    return _class_average(logit_fields, spaces, target)


def ensemble_predict(
    logit_fields: Sequence[torch.Tensor], spaces: Sequence[LabelSpace], target: LabelSpace
) -> torch.Tensor:
    return torch.softmax(ensemble_logits(logit_fields, spaces, target), dim=1)


def cast_probability(prob: torch.Tensor, space: LabelSpace, target: LabelSpace) -> torch.Tensor:
    """Spread a model's "other" mass uniformly over the target classes it lacks.

    When the space already covers the whole target, the "other" mass has
    nowhere to go and is dropped; the class channels are renormalized.
    """
    _check_field(prob, space, 0)
    if not space.issubset(target):
        raise ValueError(f"space {space.classes} is not a subset of target {target.classes}")
    n, _, h, w = prob.shape
    pos = {c: t for t, c in enumerate(target.classes)}
    own = torch.tensor([pos[c] for c in space.classes], device=prob.device)
    missing = [t for t, c in enumerate(target.classes) if c not in space]

    if not missing:
        cls = prob[:, 1:]
        mass = cls.sum(dim=1, keepdim=True).clamp_min(torch.finfo(prob.dtype).tiny)
        out = prob.new_zeros((n, len(target), h, w))
        out[:, own] = cls / mass
        return out

    out = prob.new_zeros((n, len(target), h, w))
    out[:, own] = prob[:, 1:]
    share = prob[:, :1] / len(missing)
    out[:, torch.tensor(missing, device=prob.device)] = share.expand(n, len(missing), h, w)
    return out


def average_cast(prob_fields: Sequence[torch.Tensor]) -> torch.Tensor:
    if not prob_fields:
        raise ValueError("average_cast needs at least one field")
    shape = prob_fields[0].shape
    for i, p in enumerate(prob_fields):
        if p.shape != shape:
            raise ValueError(f"field {i}: shape {tuple(p.shape)} disagrees with {tuple(shape)}")
    return torch.stack(list(prob_fields), dim=0).mean(dim=0)


def average_logits_delta(
    recombined_logits: Sequence[torch.Tensor],
    spaces_of_matched_classifiers: Sequence[LabelSpace],
    target: LabelSpace,
) -> torch.Tensor:
    """Per-class mean of ``C_ma(i)(B_i(x))`` over the recombined models.

    ``ma`` is a permutation, so the per-class denominator is the number of
    classifiers owning the class.
    """
    return _class_average(recombined_logits, spaces_of_matched_classifiers, target)


def average_logits_delta_i(
    per_backbone_logits: Sequence[torch.Tensor], spaces: Sequence[LabelSpace], target: LabelSpace
) -> torch.Tensor:
    """Per-class mean of ``C_j(B_i(x))`` over classifiers ``j`` on one backbone."""
    return _class_average(per_backbone_logits, spaces, target)


# -- manifest ---------------------------------------------------------------

def format_manifest(problem: UnionSetProblem) -> str:
    lines = [
        f"format: {MANIFEST_FORMAT}",
        f"num_classes: {problem.num_classes}",
        "target_ids: " + ",".join(str(c) for c in problem.target_space),
        "target_names: " + ",".join(problem.names()),
        f"k: {problem.k}",
    ]
    for i, s in enumerate(problem.source_spaces):
        lines.append(f"source.{i}: " + ",".join(str(c) for c in s))
    return "\n".join(lines) + "\n"


def parse_manifest(text: str) -> UnionSetProblem:
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise ValueError(f"manifest line {lineno}: expected 'key: value', got {raw!r}")
        key, value = line.split(":", 1)
        entries[key.strip()] = value.strip()
    if entries.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"unsupported label-space manifest format {entries.get('format')!r}")
    try:
        ids = tuple(int(v) for v in entries["target_ids"].split(","))
        names = tuple(entries["target_names"].split(","))
        k = int(entries["k"])
        sources = tuple(
            LabelSpace(tuple(int(v) for v in entries[f"source.{i}"].split(",")))
            for i in range(k)
        )
    except KeyError as exc:
        raise ValueError(f"label-space manifest misses key {exc.args[0]!r}") from None
    return UnionSetProblem(LabelSpace(ids), sources, names)


def save_manifest(problem: UnionSetProblem, path) -> None:
    Path(path).write_text(format_manifest(problem))


def load_manifest(path) -> UnionSetProblem:
    return parse_manifest(Path(path).read_text())


def class_argmax(prob: torch.Tensor) -> torch.Tensor:
    """Argmax over the class axis (lowest index wins ties).

    Reduces over a channels-last copy, which is several times faster on CPU
    than a strided reduction over ``dim=1``.
    """
    return prob.movedim(1, -1).contiguous().argmax(dim=-1)
