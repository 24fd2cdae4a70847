import json

import numpy as np
import pytest

from usmsma.data_synth import (BASE_PALETTE, DomainSpec, build_task, default_domains, generate_domain,
                               load_eval_split, load_task, preset, read_label_grid,
                               restrict_to_source_space, save_task, write_label_grid)
from usmsma.ensemble_core import LabelSpace, validate_union


def spec(**kw):
    return DomainSpec("d", height=16, width=16, seed=3, **{"noise": 0.0, **kw})


def test_generation_is_deterministic():
    a = generate_domain(spec(noise=0.1, blur=0.5), 4, 6)
    b = generate_domain(spec(noise=0.1, blur=0.5), 4, 6)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    c = generate_domain(spec(noise=0.1, blur=0.5), 4, 6, split=1)
    assert not np.array_equal(a.images, c.images)


def test_clean_rendering_matches_palette():
    ds = generate_domain(spec(), 5, 6)
    pal = np.asarray(BASE_PALETTE, dtype=np.float32)
    for img, lab in zip(ds.images, ds.labels):
        assert np.allclose(img.transpose(1, 2, 0), pal[lab], atol=1e-6)


def test_scenes_have_foreground_shapes():
    ds = generate_domain(DomainSpec("d", seed=1), 20, 6)
    for lab in ds.labels:
        present = set(np.unique(lab)) - {0}
        assert 1 <= len(present) <= 5
        assert 0 in set(np.unique(lab))


def test_disjoint_palettes_shift_color_histograms():
    other = tuple(tuple(1 - v for v in c) for c in BASE_PALETTE)
    a = generate_domain(spec(noise=0.05), 10, 6)
    b = generate_domain(DomainSpec("e", palette=other, height=16, width=16, seed=3, noise=0.05), 10, 6)
    ha = np.histogram(a.images.mean(1), bins=10, range=(0, 1))[0]
    hb = np.histogram(b.images.mean(1), bins=10, range=(0, 1))[0]
    assert np.abs(ha - hb).sum() > 0.5 * ha.sum()


def test_palette_too_small():
    with pytest.raises(ValueError, match="palette"):
        generate_domain(DomainSpec("d", palette=BASE_PALETTE[:3]), 1, 6)


def test_spec_validation():
    with pytest.raises(ValueError):
        DomainSpec("d", noise=-0.1)


def test_restrict_counts_other_pixels():
    ds = generate_domain(spec(), 6, 6)
    space = LabelSpace((2, 4))
    view = restrict_to_source_space(ds, space)
    outside = ~np.isin(ds.labels, space.classes)
    assert int((view.labels == 0).sum()) == int(outside.sum())
    assert np.array_equal(view.labels[ds.labels == 4], np.full((ds.labels == 4).sum(), 2))
    full = restrict_to_source_space(ds, LabelSpace.full(6))
    assert np.array_equal(full.labels, ds.labels + 1)
    assert full.images is ds.images


def test_restrict_rejects_foreign_space():
    ds = generate_domain(spec(), 1, 6)
    with pytest.raises(ValueError):
        restrict_to_source_space(ds, LabelSpace((9,)), LabelSpace.full(6))


def test_presets():
    non = preset("non-overlapping", 2)
    a, b = non.source_classes
    assert len(a) + len(b) == 6 and not set(a) & set(b)
    part = preset("partly-overlapping", 2)
    for s in part.source_classes:
        assert 0 in s
    fg = [set(s) - {0} for s in part.source_classes]
    assert not fg[0] & fg[1] and fg[0] | fg[1] == set(range(1, 6))
    full = preset("fully-overlapping", 3)
    assert all(s == tuple(range(6)) for s in full.source_classes)
    for p in (non, part, full):
        assert validate_union(p.problem()).ok
    with pytest.raises(ValueError):
        preset("mixed", 2)


def test_build_task_contract():
    doms = default_domains(0, size=16)
    task = build_task(preset("non-overlapping", 2), doms, 4, 3, 2)
    assert task.target_train.labels is None
    assert task.target_test.labels is not None and len(task.target_test) == 3
    assert [s.space for s in task.sources] == list(task.problem.source_spaces)
    with pytest.raises(ValueError, match="domain specs"):
        build_task(preset("non-overlapping", 2), doms[:2], 4, 3, 2)


def test_label_grid_roundtrip(tmp_path):
    g = np.random.default_rng(0).integers(0, 256, (5, 7)).astype(np.uint8)
    write_label_grid(tmp_path / "g.lbl", g)
    assert np.array_equal(read_label_grid(tmp_path / "g.lbl"), g)
    raw = (tmp_path / "g.lbl").read_bytes()
    assert raw[:4] == b"USLB"
    (tmp_path / "bad.lbl").write_bytes(raw[:-3])
    with pytest.raises(ValueError):
        read_label_grid(tmp_path / "bad.lbl")


def test_task_store_keeps_test_labels_apart(tmp_path):
    task = build_task(preset("partly-overlapping", 2), default_domains(1, size=16), 3, 2, 2)
    digest = save_task(task, tmp_path / "task", {"n": 3})
    back = load_task(tmp_path / "task")
    assert back.target_test is None
    assert np.array_equal(back.target_train.images, task.target_train.images)
    assert back.target_train.labels is None
    assert not (tmp_path / "task" / "target_train" / "labels").exists()
    test = load_eval_split(tmp_path / "task")
    assert np.array_equal(test.labels, task.target_test.labels)
    assert json.loads((tmp_path / "task" / "task.json").read_text())["digest"] == digest
    for a, b in zip(back.sources, task.sources):
        assert np.array_equal(a.labels, b.labels) and a.space == b.space
