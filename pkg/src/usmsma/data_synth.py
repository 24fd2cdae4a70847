"""Deterministic synthetic shape scenes with appearance-only domain shift."""
from __future__ import annotations

import hashlib
import json
import shutil
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy.ndimage import gaussian_filter

from .ensemble_core import LabelSpace, UnionSetProblem, save_manifest, validate_union

DEFAULT_CLASS_NAMES = ("background", "disc", "square", "triangle", "diamond", "cross")

# well separated in hue and value so a tiny net can separate them
BASE_PALETTE = (
    (0.45, 0.45, 0.42),
    (0.85, 0.20, 0.20),
    (0.20, 0.70, 0.25),
    (0.20, 0.35, 0.85),
    (0.90, 0.80, 0.20),
    (0.75, 0.30, 0.80),
)

SETTINGS = ("non-overlapping", "partly-overlapping", "fully-overlapping")

LABEL_MAGIC = b"USLB"
LABEL_HEADER = struct.Struct("<4sHHII")  # magic, version, dtype code, H, W
LABEL_DTYPES = {1: np.dtype("<u1"), 2: np.dtype("<u2")}


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    palette: tuple = BASE_PALETTE
    noise: float = 0.05
    hue_shift: float = 0.0
    blur: float = 0.0
    brightness: float = 0.0
    class_priors: tuple | None = None
    height: int = 64
    width: int = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "palette", tuple(tuple(float(v) for v in c) for c in self.palette))
        if self.class_priors is not None:
            object.__setattr__(self, "class_priors", tuple(float(p) for p in self.class_priors))
        if self.noise < 0 or self.blur < 0:
            raise ValueError("noise amplitude and blur radius must be >= 0")
        if self.height < 8 or self.width < 8:
            raise ValueError("images must be at least 8x8")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["palette"] = [list(c) for c in self.palette]
        d["class_priors"] = list(self.class_priors) if self.class_priors is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        if "palette" in d:
            d["palette"] = tuple(tuple(c) for c in d["palette"])
        if d.get("class_priors") is not None:
            d["class_priors"] = tuple(d["class_priors"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class TaskPreset:
    setting: str
    source_classes: tuple[tuple[int, ...], ...]
    class_names: tuple[str, ...] = DEFAULT_CLASS_NAMES
    background_classes: tuple[int, ...] = (0,)

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ValueError(f"unknown setting {self.setting!r}; expected one of {SETTINGS}")
        object.__setattr__(self, "source_classes", tuple(tuple(s) for s in self.source_classes))
        n = len(self.class_names)
        spaces = [set(s) for s in self.source_classes]
        if set().union(*spaces) != set(range(n)):
            raise ValueError("source classes must cover every target class")
        fg = set(range(n)) - set(self.background_classes)
        if self.setting == "fully-overlapping" and any(s != set(range(n)) for s in spaces):
            raise ValueError("fully-overlapping: every source must own every class")
        if self.setting == "non-overlapping" and sum(map(len, spaces)) != n:
            raise ValueError("non-overlapping: source spaces must be disjoint")
        if self.setting == "partly-overlapping":
            if any(not set(self.background_classes) <= s for s in spaces):
                raise ValueError("partly-overlapping: background classes belong to every source")
            if sum(len(s & fg) for s in spaces) != len(fg):
                raise ValueError("partly-overlapping: foreground classes must be partitioned")

    @property
    def k(self) -> int:
        return len(self.source_classes)

    def problem(self) -> UnionSetProblem:
        return UnionSetProblem(LabelSpace.full(len(self.class_names)),
                               tuple(LabelSpace(s) for s in self.source_classes),
                               self.class_names)

    def to_dict(self) -> dict:
        return {"setting": self.setting, "source_classes": [list(s) for s in self.source_classes],
                "class_names": list(self.class_names),
                "background_classes": list(self.background_classes)}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskPreset":
        return cls(d["setting"], tuple(tuple(s) for s in d["source_classes"]),
                   tuple(d.get("class_names", DEFAULT_CLASS_NAMES)),
                   tuple(d.get("background_classes", (0,))))


def preset(setting: str, k: int = 2, class_names: Sequence[str] = DEFAULT_CLASS_NAMES) -> TaskPreset:
    """Label-space split for ``k`` sources; class 0 is the background class."""
    n = len(class_names)
    fg = list(range(1, n))
    if setting == "fully-overlapping":
        parts = [tuple(range(n))] * k
    elif setting == "non-overlapping":
        chunks = np.array_split(np.arange(n), k)
        parts = [tuple(int(c) for c in ch) for ch in chunks]
    elif setting == "partly-overlapping":
        chunks = np.array_split(np.array(fg), k)
        parts = [(0,) + tuple(int(c) for c in ch) for ch in chunks]
    else:
        raise ValueError(f"unknown setting {setting!r}")
    if any(len(p) == 0 for p in parts):
        raise ValueError(f"{k} sources leave an empty label space")
    return TaskPreset(setting, tuple(parts), tuple(class_names))


@dataclass
class SegDataset:
    images: np.ndarray                 # (N, 3, H, W) float32 in [0, 1]
    labels: np.ndarray | None          # (N, H, W) uint8, target classes or source channels
    domain_id: str
    ids: list[str] = field(default_factory=list)
    space: LabelSpace | None = None    # set for source views (labels are channels)

    def __post_init__(self):
        if not self.ids:
            self.ids = [f"{self.domain_id}_{i:05d}" for i in range(len(self.images))]

    def __len__(self) -> int:
        return len(self.images)

    def unlabeled(self) -> "SegDataset":
        return SegDataset(self.images, None, self.domain_id, list(self.ids), self.space)

    def subset(self, idx) -> "SegDataset":
        idx = np.asarray(idx)
        labels = None if self.labels is None else self.labels[idx]
        return SegDataset(self.images[idx], labels, self.domain_id,
                          [self.ids[i] for i in idx], self.space)


# -- rendering --------------------------------------------------------------

def _shape_mask(kind: int, yy, xx, cy, cx, r, angle):
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    if kind == 0:   # disc
        return u ** 2 + v ** 2 <= r ** 2
    if kind == 1:   # square
        return (np.abs(u) <= r * 0.85) & (np.abs(v) <= r * 0.85)
    if kind == 2:   # triangle
        return (v <= r * 0.6) & (v >= -r + 1.6 * np.abs(u))
    if kind == 3:   # diamond
        return np.abs(u) + np.abs(v) <= r
    # cross
    w = r * 0.38
    return ((np.abs(u) <= w) & (np.abs(v) <= r)) | ((np.abs(v) <= w) & (np.abs(u) <= r))


def _domain_colors(spec: DomainSpec) -> np.ndarray:
    rgb = np.clip(np.asarray(spec.palette, dtype=np.float64), 0, 1)
    if spec.hue_shift:
        hsv = rgb_to_hsv(rgb)
        hsv[:, 0] = (hsv[:, 0] + spec.hue_shift) % 1.0
        rgb = hsv_to_rgb(hsv)
    return np.clip(rgb + spec.brightness, 0, 1)


def render_scene(spec: DomainSpec, num_classes: int, rng: np.random.Generator,
                 colors: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    h, w = spec.height, spec.width
    if colors is None:
        colors = _domain_colors(spec)
    fg = np.arange(1, num_classes)
    priors = np.ones(len(fg)) if spec.class_priors is None else np.asarray(spec.class_priors, float)
    priors = priors / priors.sum()
    n_shapes = int(rng.integers(2, min(6, len(fg)) + 1)) if len(fg) >= 2 else len(fg)
    chosen = rng.choice(fg, size=n_shapes, replace=False, p=priors)

    label = np.zeros((h, w), dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    scale = min(h, w) / 64.0
    for c in chosen:
        r = rng.uniform(6, 14) * scale
        cy, cx = rng.uniform(r * 0.5, h - r * 0.5), rng.uniform(r * 0.5, w - r * 0.5)
        angle = rng.uniform(0, np.pi)
        label[_shape_mask((int(c) - 1) % 5, yy, xx, cy, cx, r, angle)] = c

    img = colors[label].transpose(2, 0, 1)
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
    if spec.blur > 0:
        img = np.stack([gaussian_filter(ch, spec.blur) for ch in img])
    return np.clip(img, 0, 1).astype(np.float32), label


def generate_domain(spec: DomainSpec, count: int, num_classes: int = len(DEFAULT_CLASS_NAMES),
                    split: int = 0) -> SegDataset:
    """``count`` scenes; ``split`` selects an independent stream for the same domain."""
    if num_classes > len(spec.palette):
        raise ValueError(f"{num_classes} classes but the palette of {spec.domain_id!r} "
                         f"has {len(spec.palette)} colors")
    if spec.class_priors is not None and len(spec.class_priors) != num_classes - 1:
        raise ValueError("class_priors needs one entry per foreground class")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, split]))
    colors = _domain_colors(spec)
    images = np.empty((count, 3, spec.height, spec.width), dtype=np.float32)
    labels = np.empty((count, spec.height, spec.width), dtype=np.uint8)
    for n in range(count):
        images[n], labels[n] = render_scene(spec, num_classes, rng, colors)
    ids = [f"{spec.domain_id}_s{split}_{n:05d}" for n in range(count)]
    return SegDataset(images, labels, spec.domain_id, ids)


def restrict_to_source_space(dataset: SegDataset, space: LabelSpace,
                             target: LabelSpace | None = None) -> SegDataset:
    """Relabel target classes to classifier channels; classes outside ``space``
    become channel 0 ("other")."""
    if dataset.labels is None:
        raise ValueError("dataset has no labels to restrict")
    if target is not None and not space.issubset(target):
        raise ValueError(f"space {space.classes} is not a subset of target {target.classes}")
    top = int(dataset.labels.max()) if dataset.labels.size else 0
    lut = np.zeros(max(256, top + 1), dtype=np.uint8)
    for c in space.classes:
        if c >= len(lut):
            raise ValueError(f"class {c} out of range")
        lut[c] = space.channel_of(c)
    lut[255] = 255
    return SegDataset(dataset.images, lut[dataset.labels], dataset.domain_id, list(dataset.ids), space)


@dataclass
class Task:
    problem: UnionSetProblem
    preset: TaskPreset
    domains: list[DomainSpec]
    sources: list[SegDataset]          # source views, training split
    source_val: list[SegDataset]       # source views, held-out split
    target_train: SegDataset           # unlabeled
    target_test: SegDataset | None     # labeled; evaluation only

    @property
    def k(self) -> int:
        return self.problem.k


def default_domains(seed: int = 0, size: int = 64, k: int = 2) -> list[DomainSpec]:
    """``k`` source domains plus a target domain with a hue/noise/blur gap."""
    source_params = [
        dict(hue_shift=0.05, noise=0.04, blur=0.0, brightness=0.05),
        dict(hue_shift=-0.05, noise=0.12, blur=0.8, brightness=-0.05),
        dict(hue_shift=0.02, noise=0.08, blur=0.4, brightness=0.0),
    ]
    specs = [DomainSpec(f"source{i}", height=size, width=size, seed=seed * 1000 + i + 1,
                        **source_params[i % len(source_params)]) for i in range(k)]
    specs.append(DomainSpec("target", hue_shift=0.0, noise=0.10, blur=0.5, brightness=0.0,
                            height=size, width=size, seed=seed * 1000 + 99))
    return specs


def build_task(preset_: TaskPreset, domains: Sequence[DomainSpec], n_train: int = 200,
               n_test: int = 50, n_source_val: int = 50) -> Task:
    domains = list(domains)
    if len(domains) != preset_.k + 1:
        raise ValueError(f"preset has {preset_.k} sources; expected {preset_.k + 1} domain specs "
                         f"(sources + target), got {len(domains)}")
    problem = preset_.problem()
    report = validate_union(problem)
    if not report.ok:
        raise ValueError(f"preset violates the union constraint: {report.describe()}")
    n = problem.num_classes
    sources, source_val = [], []
    for spec, space in zip(domains[:-1], problem.source_spaces):
        train = generate_domain(spec, n_train, n, split=0)
        val = generate_domain(spec, n_source_val, n, split=1)
        sources.append(restrict_to_source_space(train, space, problem.target_space))
        source_val.append(restrict_to_source_space(val, space, problem.target_space))
    tgt = domains[-1]
    target_train = generate_domain(tgt, n_train, n, split=0).unlabeled()
    target_test = generate_domain(tgt, n_test, n, split=1)
    return Task(problem, preset_, domains, sources, source_val, target_train, target_test)


def task_digest(preset_: TaskPreset, domains: Sequence[DomainSpec], sizes: dict) -> str:
    blob = json.dumps({"preset": preset_.to_dict(), "domains": [d.to_dict() for d in domains],
                       "sizes": sizes}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# -- on-disk format ---------------------------------------------------------

def write_label_grid(path, grid: np.ndarray) -> None:
    grid = np.asarray(grid)
    code = 1 if grid.max(initial=0) < 256 else 2
    data = grid.astype(LABEL_DTYPES[code])
    with open(path, "wb") as f:
        f.write(LABEL_HEADER.pack(LABEL_MAGIC, 1, code, *grid.shape))
        f.write(data.tobytes(order="C"))


def read_label_grid(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < LABEL_HEADER.size:
        raise ValueError(f"{path}: truncated label file")
    magic, version, code, h, w = LABEL_HEADER.unpack_from(raw)
    if magic != LABEL_MAGIC or version != 1 or code not in LABEL_DTYPES:
        raise ValueError(f"{path}: not a label grid file")
    dt = LABEL_DTYPES[code]
    body = raw[LABEL_HEADER.size:]
    if len(body) != h * w * dt.itemsize:
        raise ValueError(f"{path}: label payload has {len(body)} bytes, expected {h * w * dt.itemsize}")
    return np.frombuffer(body, dtype=dt).reshape(h, w).astype(np.uint8 if code == 1 else np.int64)


def save_split(ds: SegDataset, root, class_names: Sequence[str]) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    if ds.labels is not None:
        (root / "labels").mkdir(exist_ok=True)
    for n, sid in enumerate(ds.ids):
        np.save(root / "images" / f"{sid}.npy", ds.images[n], allow_pickle=False)
        if ds.labels is not None:
            write_label_grid(root / "labels" / f"{sid}.lbl", ds.labels[n])
    manifest = {"domain_id": ds.domain_id, "ids": ds.ids, "class_names": list(class_names),
                "labeled": ds.labels is not None,
                "space": list(ds.space.classes) if ds.space is not None else None}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_split(root) -> SegDataset:
    root = Path(root)
    mf = root / "manifest.json"
    if not mf.is_file():
        raise FileNotFoundError(f"{root}: no split manifest")
    manifest = json.loads(mf.read_text())
    ids = manifest["ids"]
    images = np.stack([np.load(root / "images" / f"{sid}.npy", allow_pickle=False) for sid in ids])
    labels = None
    if manifest["labeled"]:
        labels = np.stack([read_label_grid(root / "labels" / f"{sid}.lbl") for sid in ids])
    space = LabelSpace(tuple(manifest["space"])) if manifest.get("space") else None
    return SegDataset(images, labels, manifest["domain_id"], ids, space)


def save_task(task: Task, root, sizes: dict) -> str:
    """Write the task; test labels go under ``eval_only/``. Returns the task digest."""
    root = Path(root)
    tmp = root.with_name(root.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    names = task.problem.names()
    save_manifest(task.problem, tmp / "labelspace.txt")
    for i, (tr, va) in enumerate(zip(task.sources, task.source_val)):
        save_split(tr, tmp / f"source_{i}" / "train", names)
        save_split(va, tmp / f"source_{i}" / "val", names)
    save_split(task.target_train, tmp / "target_train", names)
    if task.target_test is not None:
        save_split(task.target_test, tmp / "eval_only" / "target_test", names)
    digest = task_digest(task.preset, task.domains, sizes)
    meta = {"digest": digest, "preset": task.preset.to_dict(),
            "domains": [d.to_dict() for d in task.domains],
            "domain_digests": [d.digest() for d in task.domains], "sizes": sizes}
    (tmp / "task.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    if root.exists():
        shutil.rmtree(root)
    tmp.rename(root)
    return digest


def read_task_meta(root) -> dict:
    path = Path(root) / "task.json"
    if not path.is_file():
        raise FileNotFoundError(f"{root}: no task.json (run `synth` first)")
    return json.loads(path.read_text())


def load_task(root) -> Task:
    """Training view of a saved task: target test labels are not loaded."""
    root = Path(root)
    meta = read_task_meta(root)
    p = TaskPreset.from_dict(meta["preset"])
    domains = [DomainSpec.from_dict(d) for d in meta["domains"]]
    sources = [load_split(root / f"source_{i}" / "train") for i in range(p.k)]
    val = [load_split(root / f"source_{i}" / "val") for i in range(p.k)]
    target_train = load_split(root / "target_train")
    return Task(p.problem(), p, domains, sources, val, target_train, None)


def load_eval_split(root) -> SegDataset:
    """Labeled target test split; only evaluation code should call this."""
    return load_split(Path(root) / "eval_only" / "target_test")
