"""Offline pseudo labels: ``y_i`` per source label space and ``y_T`` over the target."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data_synth import read_label_grid, write_label_grid
from .ensemble_core import UnionSetProblem, average_cast, cast_probability, validate_union
from .losses import IGNORE

STORE_FORMAT = "usmsma-pseudo/1"


@dataclass
class PseudoLabelSet:
    ids: list[str]
    y_tgt: np.ndarray              # (N, H, W) uint8 target classes or IGNORE
    y_src: list[np.ndarray]        # per model: (N, H, W) uint8 channels or IGNORE
    tau: float
    provenance: str

    def __len__(self) -> int:
        return len(self.ids)

    def batch(self, idx) -> tuple[list[torch.Tensor], torch.Tensor]:
        y_src = [torch.as_tensor(y[idx], dtype=torch.long) for y in self.y_src]
        return y_src, torch.as_tensor(self.y_tgt[idx], dtype=torch.long)

    def ignored_fraction(self) -> float:
        return float((self.y_tgt == IGNORE).mean())


def _threshold(prob: torch.Tensor, tau: float) -> np.ndarray:
    # ties resolve to the lowest index (torch.max returns the first maximum)
    conf, label = prob.max(dim=1)
    label = label.to(torch.uint8)
    label[conf <= tau] = IGNORE
    return label.numpy()


@torch.no_grad()
def generate_pseudo_labels(models, dataset, problem: UnionSetProblem, tau: float = 0.0,
                           provenance: str = "stage1", batch_size: int = 16) -> PseudoLabelSet:
    """Cast each model's softmax to the target space, average, take the argmax.

    A pixel is ignored when its winning probability does not exceed ``tau``.
    ``models`` are ModelBundle-like callables returning ``C_i(B_i(x))``.
    """
    report = validate_union(problem)
    if not report.ok:
        raise ValueError(f"union constraint violated: {report.describe()}")
    if len(dataset) == 0:
        raise ValueError("cannot pseudo-label an empty dataset")
    if len(models) != problem.k:
        raise ValueError(f"{len(models)} models for a problem with k={problem.k}")
    target = problem.target_space
    dtype = next(models[0].backbone.parameters()).dtype
    y_tgt, y_src = [], [[] for _ in models]
    for s in range(0, len(dataset), batch_size):
        x = torch.as_tensor(dataset.images[s:s + batch_size], dtype=dtype)
        casts = []
        for i, (m, space) in enumerate(zip(models, problem.source_spaces)):
            prob = torch.softmax(m(x), dim=1)
            y_src[i].append(_threshold(prob, tau))
            casts.append(cast_probability(prob, space, target))
        y_tgt.append(_threshold(average_cast(casts), tau))
    return PseudoLabelSet(list(dataset.ids), np.concatenate(y_tgt),
                          [np.concatenate(y) for y in y_src], float(tau), provenance)


def regenerate_for_stage2(adapted, dataset, problem: UnionSetProblem, tau: float = 0.0,
                          batch_size: int = 16) -> PseudoLabelSet:
    return generate_pseudo_labels(adapted, dataset, problem, tau, "stage2", batch_size)


def save_pseudo_labels(pls: PseudoLabelSet, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    files = {}
    for n, sid in enumerate(pls.ids):
        entry = {"y_T": f"{sid}.yT.lbl"}
        write_label_grid(root / entry["y_T"], pls.y_tgt[n])
        for i, y in enumerate(pls.y_src):
            entry[f"y_{i}"] = f"{sid}.y{i}.lbl"
            write_label_grid(root / entry[f"y_{i}"], y[n])
        files[sid] = entry
    index = {"format": STORE_FORMAT, "tau": pls.tau, "provenance": pls.provenance,
             "k": len(pls.y_src), "ids": pls.ids, "files": files}
    (root / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))


def load_pseudo_labels(root) -> PseudoLabelSet:
    root = Path(root)
    idx_path = root / "index.json"
    if not idx_path.is_file():
        raise FileNotFoundError(f"{root}: no pseudo-label index")
    index = json.loads(idx_path.read_text())
    if index.get("format") != STORE_FORMAT:
        raise ValueError(f"{idx_path}: unsupported pseudo-label store format")
    ids = index["ids"]
    y_tgt = np.stack([read_label_grid(root / index["files"][sid]["y_T"]) for sid in ids])
    y_src = [np.stack([read_label_grid(root / index["files"][sid][f"y_{i}"]) for sid in ids])
             for i in range(index["k"])]
    return PseudoLabelSet(ids, y_tgt, y_src, index["tau"], index["provenance"])


def pseudo_label_accuracy(pls: PseudoLabelSet, truth: np.ndarray) -> float:
    keep = pls.y_tgt != IGNORE
    if not keep.any():
        return float("nan")
    return float((pls.y_tgt[keep] == truth[keep]).mean())


def ignored_fractions(models, dataset, problem, taus: Sequence[float]) -> list[float]:
    return [generate_pseudo_labels(models, dataset, problem, t).ignored_fraction() for t in taus]
