import json

import numpy as np
import pytest

from glyphflow.data import (
    DataConfig,
    Dataset,
    TEXT_PALETTE,
    gen_dataset,
    gen_sample,
    luma,
    mask_perturb,
    nearest_palette_color,
    resolution_augment,
    sample_seed_for,
)
from glyphflow.errors import DatasetInvalid

from conftest import tiny_data_config


def test_gen_sample_bit_identical():
    cfg = tiny_data_config()
    seed = sample_seed_for(cfg, 3)
    a, b = gen_sample(cfg, seed), gen_sample(cfg, seed)
    assert np.array_equal(a.scene, b.scene)
    assert [l.text for l in a.lines] == [l.text for l in b.lines]


def test_lines_per_image_fixed():
    cfg = tiny_data_config(lines_per_image=(1, 1))
    for i in range(12):
        s = gen_sample(cfg, sample_seed_for(cfg, i))
        assert len(s.lines) == 1


def test_text_pixels_match_declared_color_exactly():
    cfg = tiny_data_config(color_mode="per_line")
    for i in range(8):
        s = gen_sample(cfg, sample_seed_for(cfg, i))
        from glyphflow.data import resolve_atlas
        from glyphflow.glyphs import scale_bitmap

        atlas = resolve_atlas(s.pack_id)
        for line in s.lines:
            b = line.box
            gw = atlas.advance_for_height(b.h)
            for k, ch in enumerate(line.text):
                ink = scale_bitmap(atlas.glyph(ch), gw, b.h).astype(bool)
                crop = s.scene[b.y : b.y2, b.x + k * gw : b.x + (k + 1) * gw]
                assert (crop[ink] == np.array(line.color)).all()


def test_boxes_keep_margin():
    cfg = tiny_data_config(lines_per_image=(2, 3), scene_w=128, scene_h=128)
    for i in range(10):
        s = gen_sample(cfg, sample_seed_for(cfg, i))
        boxes = [l.box for l in s.lines]
        for a_i in range(len(boxes)):
            for b_i in range(a_i + 1, len(boxes)):
                a, b = boxes[a_i], boxes[b_i]
                gap_x = max(b.x - a.x2, a.x - b.x2)
                gap_y = max(b.y - a.y2, a.y - b.y2)
                assert max(gap_x, gap_y) >= 8


def test_background_luma_band():
    cfg = tiny_data_config()
    for i in range(6):
        s = gen_sample(cfg, sample_seed_for(cfg, i))
        mask = s.mask.astype(bool)
        bg = s.scene[~mask]
        lum = luma(bg)
        assert lum.min() >= 90
        assert lum.max() <= 170


def test_gen_dataset_empty(tmp_path):
    cfg = tiny_data_config()
    manifest = gen_dataset(cfg, 0, tmp_path / "d")
    assert manifest.read_text() == ""
    assert not list((tmp_path / "d" / "images").glob("*.png"))


def test_gen_dataset_rerun_byte_identical(tmp_path):
    cfg = tiny_data_config()
    m1 = gen_dataset(cfg, 5, tmp_path / "a")
    m2 = gen_dataset(cfg, 5, tmp_path / "b")
    assert m1.read_bytes() == m2.read_bytes()
    for i in range(5):
        pa = (tmp_path / "a" / "images" / f"{i:06d}.png").read_bytes()
        pb = (tmp_path / "b" / "images" / f"{i:06d}.png").read_bytes()
        assert pa == pb


def test_pack_mixing_binomial_bound(tmp_path):
    cfg = tiny_data_config(
        packs=(("latin36", 0.75), ("pseudo-a", 0.25)), scene_w=96, scene_h=96
    )
    n = 400
    gen_dataset(cfg, n, tmp_path / "mix")
    ds = Dataset(tmp_path / "mix")
    counts = {"latin36": 0, "pseudo-a": 0}
    for rec in ds.records:
        counts[rec["pack_id"]] += 1
    sigma = (n * 0.75 * 0.25) ** 0.5
    assert abs(counts["latin36"] - n * 0.75) <= 3 * sigma


def test_dataset_reader_roundtrip(tiny_dataset):
    ds = Dataset(tiny_dataset)
    assert len(ds) == 6
    s = ds[2]
    regen = gen_sample(ds.config, s.sample_seed)
    assert np.array_equal(s.scene, regen.scene)
    assert [l.text for l in s.lines] == [l.text for l in regen.lines]


def test_dataset_reader_rejects_garbage(tmp_path):
    root = tmp_path / "bad"
    root.mkdir()
    with pytest.raises(DatasetInvalid):
        Dataset(root)


def test_dataset_reader_rejects_bad_index(tmp_path):
    cfg = tiny_data_config()
    gen_dataset(cfg, 2, tmp_path / "x")
    manifest = tmp_path / "x" / "manifest.jsonl"
    lines = manifest.read_text().splitlines()
    rec = json.loads(lines[1])
    rec["idx"] = 5
    manifest.write_text(lines[0] + "\n" + json.dumps(rec) + "\n")
    with pytest.raises(DatasetInvalid):
        Dataset(tmp_path / "x")


def test_resolution_augment_identity():
    cfg = tiny_data_config()
    s = gen_sample(cfg, sample_seed_for(cfg, 0))
    out = resolution_augment(s, 64, patch=16)
    assert np.array_equal(out.scene, s.scene)
    assert [l.box for l in out.lines] == [l.box for l in s.lines]


def test_resolution_augment_halving():
    cfg = tiny_data_config(scene_w=128, scene_h=96, text_heights=(16, 20))
    s = gen_sample(cfg, sample_seed_for(cfg, 1))
    out = resolution_augment(s, 64, patch=8)
    assert out.scene.shape == (48, 64, 3)
    for before, after in zip(s.lines, out.lines):
        assert after.box.x == int(before.box.x * 0.5)
        assert after.box.w in (before.box.w // 2, before.box.w // 2 - 1, before.box.w // 2 + 1)


def test_resolution_augment_area_ratio():
    cfg = tiny_data_config(scene_w=128, scene_h=128, text_heights=(16, 22))
    s = gen_sample(cfg, sample_seed_for(cfg, 2))
    out = resolution_augment(s, 96, patch=8)
    scale = 96 / 128
    for before, after in zip(s.lines, out.lines):
        ratio = (after.box.w * after.box.h) / (before.box.w * before.box.h)
        assert ratio == pytest.approx(scale**2, rel=0.2)


def test_mask_perturb_pad_zero_identity():
    cfg = tiny_data_config()
    s = gen_sample(cfg, sample_seed_for(cfg, 0))
    out = mask_perturb(s, "pad", 0)
    assert [l.box for l in out.lines] == [l.box for l in s.lines]


def test_mask_perturb_crop_arithmetic():
    cfg = tiny_data_config(scene_w=128, scene_h=128, text_heights=(16, 16), text_len=(4, 4))
    s = gen_sample(cfg, sample_seed_for(cfg, 0))
    out = mask_perturb(s, "crop_into", 2)
    for before, after in zip(s.lines, out.lines):
        assert after.box.w == before.box.w - 4
        assert after.box.h == before.box.h - 4


def test_mask_perturb_crop_clamps_to_4px():
    cfg = tiny_data_config()
    s = gen_sample(cfg, sample_seed_for(cfg, 0))
    out = mask_perturb(s, "crop_into", 50)
    for line in out.lines:
        assert line.box.w >= 4 and line.box.h >= 4


def test_mask_perturb_pad_never_overlaps():
    cfg = tiny_data_config(lines_per_image=(2, 3), scene_w=128, scene_h=128)
    for i in range(15):
        s = gen_sample(cfg, sample_seed_for(cfg, i))
        out = mask_perturb(s, "pad", 4)
        boxes = [l.box for l in out.lines]
        for a_i in range(len(boxes)):
            for b_i in range(a_i + 1, len(boxes)):
                assert not boxes[a_i].overlaps(boxes[b_i])


def test_palette_classification():
    for name, rgb in TEXT_PALETTE.items():
        assert nearest_palette_color(np.array(rgb)) == name
