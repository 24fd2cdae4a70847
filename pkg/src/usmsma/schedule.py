"""Optimization schedule shared by pretraining, Stage I and Stage II."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch

LOSS_NAMES = ("pl", "cm1", "cm2", "adv_c", "adv_b", "msl", "ens_ce", "kd", "src_ce")


def default_weights() -> dict[str, float]:
    return {name: 1.0 for name in LOSS_NAMES}


@dataclass
class TrainSchedule:
    total_iterations: int = 400
    lr: float = 0.02
    power: float = 0.9
    batch_size: int = 4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    weights: dict[str, float] = field(default_factory=default_weights)
    log_interval: int = 50
    checkpoint_interval: int = 0
    eval_interval: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.total_iterations < 0:
            raise ValueError("total_iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        merged = default_weights()
        merged.update({k: float(v) for k, v in self.weights.items()})
        unknown = set(merged) - set(LOSS_NAMES)
        if unknown:
            raise ValueError(f"unknown loss weights {sorted(unknown)}")
        if any(v < 0 for v in merged.values()):
            raise ValueError("loss weights must be >= 0")
        self.weights = merged

    def lr_at(self, t: int) -> float:
        return poly_lr(self.lr, t, self.total_iterations, self.power)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSchedule":
        return cls(**d)


def poly_lr(lr0: float, t: int, total: int, power: float) -> float:
    """``lr0 * (1 - t/total) ** power``."""
    if total <= 0:
        return lr0
    return lr0 * (1.0 - t / total) ** power


def make_sgd(params, schedule: TrainSchedule) -> torch.optim.SGD:
    return torch.optim.SGD(
        list(params),
        lr=schedule.lr,
        momentum=schedule.momentum,
        weight_decay=schedule.weight_decay,
    )


def set_lr(optimizers, lr: float) -> None:
    for opt in optimizers:
        for group in opt.param_groups:
            group["lr"] = lr
