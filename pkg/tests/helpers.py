"""Layout converters between oracle grids (H, W, C) and library tensors (1, C, H, W)."""
import numpy as np
import torch

from usmsma.ensemble_core import LabelSpace


def to_t(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64)).permute(2, 0, 1).unsqueeze(0).contiguous()


def to_lab(a):
    return torch.as_tensor(np.asarray(a, dtype=np.int64)).unsqueeze(0)


def from_t(t):
    return t.detach().squeeze(0).permute(1, 2, 0).numpy()


def spaces_of(lists):
    return [LabelSpace(tuple(s)) for s in lists]


def random_fields(rng, spaces, h, w, scale=2.0):
    return [rng.normal(scale=scale, size=(h, w, 1 + len(s))) for s in spaces]


def random_cross(rng, spaces, h, w):
    k = len(spaces)
    return [[rng.normal(scale=2.0, size=(h, w, 1 + len(spaces[j]))) for j in range(k)] for _ in range(k)]
