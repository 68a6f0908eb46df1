import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glyphflow.data import gen_sample, sample_seed_for, resolve_atlas
from glyphflow.errors import LengthMismatch, ShapeMismatch
from glyphflow.evals import (
    EvalReport,
    glyph_iou,
    levenshtein,
    line_ned,
    ned,
    pixel_fidelity,
    psnr,
    recognize,
    seq_acc,
    ssim,
)
from glyphflow.glyphs import Box

from conftest import tiny_data_config


# --- recognizer ---------------------------------------------------------------


def test_recognizer_exact_on_clean_samples():
    cfg = tiny_data_config(lines_per_image=(1, 2), scene_w=96, scene_h=96, color_mode="per_line")
    for i in range(40):
        s = gen_sample(cfg, sample_seed_for(cfg, i))
        atlas = resolve_atlas(s.pack_id)
        preds = recognize(s.scene, [l.box for l in s.lines], atlas)
        assert preds == [l.text for l in s.lines]


def test_recognizer_exact_on_pseudo_pack():
    cfg = tiny_data_config(packs=(("pseudo-a", 1.0),), color_mode="per_line")
    for i in range(25):
        s = gen_sample(cfg, sample_seed_for(cfg, i))
        atlas = resolve_atlas(s.pack_id)
        preds = recognize(s.scene, [l.box for l in s.lines], atlas)
        assert preds == [l.text for l in s.lines]


def test_recognizer_background_box_empty(latin_atlas):
    cfg = tiny_data_config()
    s = gen_sample(cfg, sample_seed_for(cfg, 1))
    box = s.lines[0].box
    # find a box-sized region that holds no text
    free = Box(
        (box.x + 40) % (s.width - box.w - 1),
        (box.y + 40) % (s.height - box.h - 1),
        box.w,
        box.h,
    )
    if free.overlaps(box):
        free = Box(free.x, (free.y + box.h + 9) % (s.height - box.h - 1), free.w, free.h)
    assert recognize(s.scene, [free], latin_atlas) == [""]


def test_recognizer_inverted_character_degrades(latin_atlas):
    cfg = tiny_data_config(text_len=(4, 5), text_heights=(12, 14))
    s = gen_sample(cfg, sample_seed_for(cfg, 2))
    line = s.lines[0]
    atlas = resolve_atlas(s.pack_id)
    gw = atlas.advance_for_height(line.box.h)
    corrupted = s.scene.copy()
    cell = corrupted[line.box.y : line.box.y2, line.box.x : line.box.x + gw]
    cell[:] = 255 - cell  # invert one character's pixels
    pred = recognize(corrupted, [line.box], atlas)[0]
    assert pred != line.text
    assert line_ned(pred, line.text) < 1.0


def test_recognizer_box_outside_image(latin_atlas):
    img = np.zeros((32, 32, 3), dtype=np.uint8)
    with pytest.raises(ShapeMismatch):
        recognize(img, [Box(20, 20, 20, 20)], latin_atlas)


# --- string metrics -------------------------------------------------------------


def test_seq_acc_values():
    assert seq_acc(["A", "B"], ["A", "B"]) == 1.0
    assert seq_acc(["A", "B", "C", "X"], ["A", "B", "C", "D"]) == 0.75


def test_seq_acc_length_mismatch():
    with pytest.raises(LengthMismatch):
        seq_acc(["A"], ["A", "B"])


def _brute_edit_distance(a: str, b: str) -> int:
    # exponential-recursion oracle, independent of the DP implementation
    if not a:
        return len(b)
    if not b:
        return len(a)
    return min(
        _brute_edit_distance(a[1:], b) + 1,
        _brute_edit_distance(a, b[1:]) + 1,
        _brute_edit_distance(a[1:], b[1:]) + (a[0] != b[0]),
    )


def test_ned_examples():
    assert ned(["HELO"], ["HELLO"]) == pytest.approx(1 - 1 / 5)
    assert ned([""], ["AB"]) == 0.0
    assert line_ned("", "") == 1.0
    assert ned(["ABC"], ["ABC"]) == 1.0


@settings(max_examples=40, deadline=None)
@given(
    a=st.text(alphabet="ABC", max_size=5),
    b=st.text(alphabet="ABC", max_size=5),
)
def test_levenshtein_matches_bruteforce(a, b):
    assert levenshtein(a, b) == _brute_edit_distance(a, b)
    assert 0.0 <= line_ned(a, b) <= 1.0


def test_exact_match_implies_ned_one():
    assert line_ned("Q7X", "Q7X") == 1.0


# --- pixel fidelity ----------------------------------------------------------------


def test_psnr_identical_capped():
    img = np.random.default_rng(0).integers(0, 256, (32, 32, 3), dtype=np.uint8)
    p, s = pixel_fidelity(img, img)
    assert p == 99.0
    assert s == pytest.approx(1.0)


def test_psnr_black_vs_white():
    black = np.zeros((16, 16, 3), dtype=np.uint8)
    white = np.full((16, 16, 3), 255, dtype=np.uint8)
    assert psnr(black, white) == pytest.approx(0.0)


def test_ssim_symmetric():
    r = np.random.default_rng(1)
    a = r.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    b = r.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    assert ssim(a, b) == pytest.approx(ssim(b, a))


def test_fidelity_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        psnr(np.zeros((4, 4, 3)), np.zeros((5, 5, 3)))


def test_metric_bounds():
    r = np.random.default_rng(2)
    a = r.integers(0, 256, (24, 24, 3), dtype=np.uint8)
    b = r.integers(0, 256, (24, 24, 3), dtype=np.uint8)
    p, s = pixel_fidelity(a, b)
    assert p >= 0
    assert -1.0 <= s <= 1.0


# --- glyph IoU -----------------------------------------------------------------------


def test_glyph_iou_exact_render():
    cfg = tiny_data_config(text_heights=(12, 14))
    s = gen_sample(cfg, sample_seed_for(cfg, 4))
    line = s.lines[0]
    atlas = resolve_atlas(s.pack_id)
    from glyphflow.glyphs import render_template

    tpl = render_template(atlas, [line.spec], s.width, s.height)
    ink = tpl.image[line.box.y : line.box.y2, line.box.x : line.box.x2] > 0
    assert glyph_iou(s.scene, line.box, ink) == pytest.approx(1.0)


def test_glyph_iou_background_is_low():
    cfg = tiny_data_config()
    s = gen_sample(cfg, sample_seed_for(cfg, 5))
    line = s.lines[0]
    atlas = resolve_atlas(s.pack_id)
    from glyphflow.glyphs import render_template

    tpl = render_template(atlas, [line.spec], s.width, s.height)
    ink = tpl.image[line.box.y : line.box.y2, line.box.x : line.box.x2] > 0
    blank = np.full_like(s.scene, 128)
    assert glyph_iou(blank, line.box, ink) < 0.6


# --- reports ---------------------------------------------------------------------------


def test_report_aggregates_recomputable():
    rep = EvalReport(dataset_id="d")
    rep.add("AB", "AB")
    rep.add("CD", "CE")
    agg = rep.aggregates()
    assert agg["seq_acc"] == 0.5
    assert agg["lines"] == 2
    assert 0.0 <= agg["mean_ned"] <= 1.0
    rebuilt = EvalReport.from_dict(rep.to_dict())
    assert rebuilt.to_json() == rep.to_json()


def test_report_bytes_deterministic():
    def build():
        rep = EvalReport(dataset_id="d", seed=3, config={"mode": "recon"})
        rep.add("AB", "AB", psnr=30.0, ssim=0.9)
        return rep.to_json()

    assert build() == build()
