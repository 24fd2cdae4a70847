"""Toy backbones/classifiers, source pretraining and checkpoint persistence."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .ensemble_core import LabelSpace, class_argmax, ensemble_predict
from .losses import IGNORE, ce_loss
from .schedule import TrainSchedule, make_sgd, set_lr

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "usmsma-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    input_channels: int = 3
    feature_channels: int = 32
    depth: int = 3
    downsample: int = 2

    def __post_init__(self):
        if self.feature_channels < 1 or self.depth < 1:
            raise ValueError("feature_channels and depth must be >= 1")
        d = self.downsample
        if d < 1 or d & (d - 1):
            raise ValueError("downsample factor must be a power of two")
        if int(math.log2(d)) > self.depth:
            raise ValueError("downsample factor needs more conv stages")


@dataclass(frozen=True)
class ClassifierSpec:
    label_space: LabelSpace
    feature_channels: int = 32

    @property
    def out_channels(self) -> int:
        return self.label_space.num_channels


class Backbone(nn.Module):
    """Stack of 3x3 conv stages, ReLU between them; the last stage is linear so
    features cannot die.  The first log2(d) stages have stride 2."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        n_strided = int(math.log2(spec.downsample))
        layers = []
        c_in = spec.input_channels
        for s in range(spec.depth):
            layers.append(nn.Conv2d(c_in, spec.feature_channels, 3,
                                    stride=2 if s < n_strided else 1, padding=1))
            c_in = spec.feature_channels
        self.stages = nn.ModuleList(layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        d = self.spec.downsample
        if x.dim() != 4 or x.shape[1] != self.spec.input_channels:
            raise ValueError(f"expected (N, {self.spec.input_channels}, H, W), got {tuple(x.shape)}")
        if x.shape[2] % d or x.shape[3] % d:
            raise ValueError(f"image size {tuple(x.shape[2:])} not divisible by downsample {d}")
        last = len(self.stages) - 1
        for s, conv in enumerate(self.stages):
            x = conv(x)
            if s < last:
                x = F.relu(x)
        return x


class Classifier(nn.Module):
    """1x1 conv to ``1 + |space|`` logits, then bilinear upsampling by ``d``."""

    def __init__(self, spec: ClassifierSpec, upsample: int = 1):
        super().__init__()
        self.spec = spec
        self.upsample = upsample
        self.head = nn.Conv2d(spec.feature_channels, spec.out_channels, 1)

    @property
    def label_space(self) -> LabelSpace:
        return self.spec.label_space

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        if feats.dim() != 4 or feats.shape[1] != self.spec.feature_channels:
            raise ValueError(f"expected {self.spec.feature_channels} feature channels, "
                             f"got shape {tuple(feats.shape)}")
        out = self.head(feats)
        if self.upsample > 1:
            out = F.interpolate(out, scale_factor=self.upsample, mode="bilinear", align_corners=False)
        return out


def forward_backbone(backbone: Backbone, images: torch.Tensor) -> torch.Tensor:
    return backbone(images)


def forward_classifier(classifier: Classifier, feats: torch.Tensor) -> torch.Tensor:
    return classifier(feats)


@dataclass
class ModelBundle:
    backbone: Backbone
    classifier: Classifier
    meta: dict = field(default_factory=dict)

    @property
    def label_space(self) -> LabelSpace:
        return self.classifier.label_space

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.backbone(images))

    def parameters(self):
        yield from self.backbone.parameters()
        yield from self.classifier.parameters()


@dataclass
class FinalModel:
    backbone: Backbone
    classifiers: list[Classifier]
    target: LabelSpace
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        width = self.backbone.spec.feature_channels
        for c in self.classifiers:
            if c.spec.feature_channels != width:
                raise ValueError("classifier feature width differs from the integration backbone")

    @property
    def spaces(self) -> list[LabelSpace]:
        return [c.label_space for c in self.classifiers]


def build_bundle(backbone_spec: BackboneSpec, label_space: LabelSpace, seed: int,
                 dtype: torch.dtype = torch.float32) -> ModelBundle:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        backbone = Backbone(backbone_spec)
        classifier = Classifier(ClassifierSpec(label_space, backbone_spec.feature_channels),
                                upsample=backbone_spec.downsample)
    return ModelBundle(backbone.to(dtype), classifier.to(dtype), {"seed": seed, "iterations": 0})


def cross_logits(backbones: Sequence[nn.Module], classifiers: Sequence[nn.Module],
                 images: torch.Tensor, detach_features: bool = False) -> list[list[torch.Tensor]]:
    """``out[i][j] = C_j(B_i(x))`` for every backbone/classifier pair."""
    out = []
    for b in backbones:
        if detach_features:
            with torch.no_grad():
                feats = b(images)
        else:
            feats = b(images)
        out.append([c(feats) for c in classifiers])
    return out


def bundle_ensemble_predict(backbone: Backbone, classifiers: Sequence[Classifier],
                            target: LabelSpace, images: torch.Tensor) -> torch.Tensor:
    """Ensemble prediction of one backbone paired with every classifier."""
    feats = backbone(images)
    return ensemble_predict([c(feats) for c in classifiers],
                            [c.label_space for c in classifiers], target)


def params_checksum(modules: Sequence[nn.Module]) -> str:
    h = hashlib.sha256()
    for m in modules:
        for name, p in m.state_dict().items():
            h.update(name.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def sample_batch(rng: np.random.Generator, n: int, batch_size: int) -> np.ndarray:
    return rng.choice(n, size=min(batch_size, n), replace=False)


def pretrain_source(dataset, backbone_spec: BackboneSpec, label_space: LabelSpace,
                    schedule: TrainSchedule, dtype: torch.dtype = torch.float32,
                    history: list | None = None) -> ModelBundle:
    """Supervised training of one source model on a source-view dataset.

    ``dataset.labels`` hold classifier channels: 0 for "other", ``1 + k`` for
    ``label_space.classes[k]``.
    """
    labels = np.asarray(dataset.labels)
    valid = labels != IGNORE
    if labels[valid].size and (labels[valid].min() < 0 or labels[valid].max() >= label_space.num_channels):
        raise ValueError(f"dataset labels exceed the {label_space.num_channels} channels of "
                         f"label space {label_space.classes}")
    bundle = build_bundle(backbone_spec, label_space, schedule.seed, dtype)
    images = torch.as_tensor(np.asarray(dataset.images), dtype=dtype)
    targets = torch.as_tensor(labels, dtype=torch.long)
    opt = make_sgd(bundle.parameters(), schedule)
    rng = np.random.default_rng(schedule.seed)
    loss = None
    for t in range(schedule.total_iterations):
        set_lr([opt], schedule.lr_at(t))
        idx = torch.as_tensor(sample_batch(rng, len(images), schedule.batch_size))
        opt.zero_grad(set_to_none=True)
        lv = ce_loss(bundle(images[idx]), targets[idx])
        if not torch.isfinite(lv.value):
            raise TrainingDiverged(f"pretraining loss became {lv.item()} at iteration {t}")
        lv.value.backward()
        opt.step()
        loss = lv.item()
        if history is not None:
            history.append({"iteration": t, "loss": "ce", "value": loss})
        if schedule.log_interval and t % schedule.log_interval == 0:
            log.info("pretrain it=%d ce=%.4f", t, loss)
    bundle.meta.update({"iterations": schedule.total_iterations, "final_loss": loss})
    return bundle


@torch.no_grad()
def predict_labels(bundle: ModelBundle, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Argmax channel of a bundle's own classifier."""
    out = []
    for s in range(0, len(images), batch_size):
        x = torch.as_tensor(images[s:s + batch_size], dtype=next(bundle.backbone.parameters()).dtype)
        out.append(class_argmax(bundle(x)).numpy())
    return np.concatenate(out).astype(np.int64)


# -- checkpoints ------------------------------------------------------------

def _space_to_json(space: LabelSpace) -> list[int]:
    return list(space.classes)


def _tensor_entries(prefix: str, module: nn.Module):
    for name, t in module.state_dict().items():
        yield f"{prefix}.{name}", t.detach().cpu().contiguous().numpy()


def _write_blobs(root: Path, entries) -> list[dict]:
    records = []
    for name, arr in entries:
        fname = f"{name}.npy"
        np.save(root / fname, arr, allow_pickle=False)
        records.append({
            "name": name, "file": fname, "shape": list(arr.shape), "dtype": str(arr.dtype),
            "sha256": hashlib.sha256(arr.tobytes()).hexdigest(),
        })
    return records


def save_checkpoint(obj: ModelBundle | FinalModel, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    if isinstance(obj, ModelBundle):
        entries = list(_tensor_entries("backbone", obj.backbone)) + \
            list(_tensor_entries("classifier.0", obj.classifier))
        header = {"kind": "bundle", "label_spaces": [_space_to_json(obj.label_space)], "target": None}
        backbone = obj.backbone
    elif isinstance(obj, FinalModel):
        entries = list(_tensor_entries("backbone", obj.backbone))
        for i, c in enumerate(obj.classifiers):
            entries += list(_tensor_entries(f"classifier.{i}", c))
        header = {"kind": "final", "label_spaces": [_space_to_json(s) for s in obj.spaces],
                  "target": _space_to_json(obj.target)}
        backbone = obj.backbone
    else:
        raise TypeError(f"cannot checkpoint {type(obj).__name__}")
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        **header,
        "backbone_spec": asdict(backbone.spec),
        "meta": obj.meta,
        "tensors": _write_blobs(tmp, entries),
    }
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)
    return path


def _read_manifest(path: Path) -> dict:
    mf = path / "manifest.json"
    if not mf.is_file():
        raise CheckpointError(f"{path}: no manifest.json")
    try:
        manifest = json.loads(mf.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{mf}: cannot parse manifest ({exc})") from None
    if not isinstance(manifest, dict) or manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{mf}: not a {CHECKPOINT_FORMAT} manifest")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{mf}: unsupported checkpoint version {manifest.get('version')!r}")
    return manifest


def _read_blobs(path: Path, manifest: dict) -> dict[str, np.ndarray]:
    arrays = {}
    for rec in manifest["tensors"]:
        f = path / rec["file"]
        try:
            arr = np.load(f, allow_pickle=False)
        except (OSError, ValueError, EOFError) as exc:
            raise CheckpointError(f"{f}: unreadable parameter blob ({exc})") from None
        if list(arr.shape) != rec["shape"] or str(arr.dtype) != rec["dtype"]:
            raise CheckpointError(f"{f}: shape/dtype {arr.shape}/{arr.dtype} disagrees with manifest")
        if hashlib.sha256(arr.tobytes()).hexdigest() != rec["sha256"]:
            raise CheckpointError(f"{f}: checksum mismatch")
        arrays[rec["name"]] = arr
    return arrays


def _load_module(module: nn.Module, prefix: str, arrays: dict[str, np.ndarray]) -> None:
    expected = module.state_dict()
    state = {}
    for name, ref in expected.items():
        key = f"{prefix}.{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint misses tensor {key}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"tensor {key}: shape {arr.shape} but model expects {tuple(ref.shape)}")
        state[name] = torch.from_numpy(arr.copy())
    module.load_state_dict(state)


def load_checkpoint(path, expected_spaces: Sequence[LabelSpace] | None = None) -> ModelBundle | FinalModel:
    """Load a bundle or final model; all validation happens before construction."""
    path = Path(path)
    manifest = _read_manifest(path)
    try:
        kind = manifest["kind"]
        spaces = [LabelSpace(tuple(s)) for s in manifest["label_spaces"]]
        spec = BackboneSpec(**manifest["backbone_spec"])
        meta = manifest.get("meta", {})
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed manifest ({exc})") from None
    if expected_spaces is not None and list(expected_spaces) != spaces:
        raise CheckpointError(
            f"{path}: label spaces {[s.classes for s in spaces]} do not match expected "
            f"{[s.classes for s in expected_spaces]}")
    arrays = _read_blobs(path, manifest)
    dtype = torch.from_numpy(arrays["backbone.stages.0.weight"]).dtype \
        if "backbone.stages.0.weight" in arrays else torch.float32

    backbone = Backbone(spec).to(dtype)
    _load_module(backbone, "backbone", arrays)
    classifiers = []
    for i, s in enumerate(spaces):
        c = Classifier(ClassifierSpec(s, spec.feature_channels), upsample=spec.downsample).to(dtype)
        _load_module(c, f"classifier.{i}", arrays)
        classifiers.append(c)
    if kind == "bundle":
        if len(classifiers) != 1:
            raise CheckpointError(f"{path}: bundle checkpoint with {len(classifiers)} classifiers")
        return ModelBundle(backbone, classifiers[0], meta)
    if kind == "final":
        return FinalModel(backbone, classifiers, LabelSpace(tuple(manifest["target"])), meta)
    raise CheckpointError(f"{path}: unknown checkpoint kind {kind!r}")
