"""Recognition oracle and evaluation metrics.

The recognizer replays the renderer's own layout rules (uniform scale to box
height, fixed advance) instead of learning anything: it binarizes each text
box, picks the ink polarity per box, and classifies every cell by normalized
correlation against the atlas bitmaps rescaled exactly the way the renderer
rescales them. On clean generated scenes the binarized cells match the
rendered patterns bit for bit, so recognition is exact; on model outputs it
degrades gracefully and rejects cells below the match threshold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from .data import luma
from .errors import LengthMismatch, ShapeMismatch
from .glyphs import Box, GlyphAtlas, scale_bitmap

MATCH_THRESHOLD = 0.6
PSNR_CAP_DB = 99.0


# --- binarization ---------------------------------------------------------------


def otsu_threshold(gray_u8: np.ndarray) -> float:
    """Classic Otsu threshold over a 256-bin histogram."""
    hist = np.bincount(gray_u8.reshape(-1), minlength=256).astype(np.float64)
    total = hist.sum()
    if total == 0:
        return 127.5
    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)
    m0 = np.cumsum(hist * levels)
    mean_total = m0[-1]
    w1 = total - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = m0 / w0
        mu1 = (mean_total - m0) / w1
        between = w0 * w1 * (mu0 - mu1) ** 2
    between[~np.isfinite(between)] = -1.0
    t = int(np.argmax(between))
    return t + 0.5


def binarize_box(image: np.ndarray, box: Box) -> np.ndarray:
    """Boolean map of the box crop, thresholded at the Otsu split of its luma."""
    crop = image[box.y : box.y2, box.x : box.x2]
    gray = np.rint(np.clip(luma(crop), 0, 255)).astype(np.uint8)
    return gray > otsu_threshold(gray)


def _normalized_rows(a: np.ndarray) -> np.ndarray:
    """Rows centered and scaled to unit norm; zero-variance rows become zero."""
    a = a.astype(np.float64)
    a = a - a.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    np.divide(a, norms, out=a, where=norms > 1e-12)
    a[(norms <= 1e-12).reshape(-1)] = 0.0
    return a


# --- recognition -----------------------------------------------------------------


def recognize_box(
    image: np.ndarray, box: Box, atlas: GlyphAtlas, threshold: float = MATCH_THRESHOLD
) -> str:
    """Read the text inside one box (empty string when nothing matches)."""
    if box.h < 8:
        return ""
    gw = atlas.advance_for_height(box.h)
    n_cells = box.w // gw
    if n_cells < 1:
        return ""

    binary = binarize_box(image, box)
    if binary.all() or not binary.any():
        return ""

    chars = sorted(atlas.glyphs)
    panels = np.stack(
        [scale_bitmap(atlas.glyphs[ch], gw, box.h) for ch in chars]
    ).reshape(len(chars), -1)
    cells = np.stack(
        [binary[:, i * gw : (i + 1) * gw] for i in range(n_cells)]
    ).reshape(n_cells, -1)

    scores = _normalized_rows(cells) @ _normalized_rows(panels).T  # (cells, glyphs)

    # Ink may binarize as True (bright text) or False (dark text); pick the
    # polarity that explains the box best, then decode under it.
    pos = np.clip(scores.max(axis=1), 0, None).sum()
    neg = np.clip((-scores).max(axis=1), 0, None).sum()
    signed = scores if pos >= neg else -scores

    out = []
    for i in range(n_cells):
        g = int(np.argmax(signed[i]))
        if signed[i, g] >= threshold:
            out.append(chars[g])
    return "".join(out)


def recognize(
    image: np.ndarray, boxes: list[Box], atlas: GlyphAtlas, threshold: float = MATCH_THRESHOLD
) -> list[str]:
    """Per-box recognition over an RGB uint8 image."""
    h, w = image.shape[:2]
    for box in boxes:
        if not box.inside(w, h):
            raise ShapeMismatch(f"box {box} is outside the {w}x{h} image")
    return [recognize_box(image, box, atlas, threshold) for box in boxes]


def glyph_iou(image: np.ndarray, box: Box, template_ink: np.ndarray) -> float:
    """IoU between binarized generated pixels and the template's ink in a box.

    Polarity follows the sign of the correlation with the template pattern, so
    dark-on-light and light-on-dark renderings are treated alike.
    """
    binary = binarize_box(image, box)
    ink = template_ink.astype(bool)
    if binary.shape != ink.shape:
        raise ShapeMismatch(f"box crop {binary.shape} vs template ink {ink.shape}")
    a = binary.astype(np.float64).reshape(-1)
    b = ink.astype(np.float64).reshape(-1)
    a_c, b_c = a - a.mean(), b - b.mean()
    denom = np.linalg.norm(a_c) * np.linalg.norm(b_c)
    corr = float(a_c @ b_c / denom) if denom > 1e-12 else 0.0
    if corr < 0:
        binary = ~binary
    inter = np.logical_and(binary, ink).sum()
    union = np.logical_or(binary, ink).sum()
    return float(inter / union) if union else 1.0


# --- string metrics ----------------------------------------------------------------


def levenshtein(a: str, b: str) -> int:
    """Plain dynamic-programming edit distance."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def _check_lengths(preds: list[str], gts: list[str]) -> None:
    if len(preds) != len(gts):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(gts)} ground truths")


def seq_acc(preds: list[str], gts: list[str]) -> float:
    """Fraction of lines whose recognized string matches exactly."""
    _check_lengths(preds, gts)
    if not gts:
        return 1.0
    return sum(p == g for p, g in zip(preds, gts)) / len(gts)


def line_ned(pred: str, gt: str) -> float:
    if not pred and not gt:
        return 1.0
    return 1.0 - levenshtein(pred, gt) / max(len(pred), len(gt))


def ned(preds: list[str], gts: list[str]) -> float:
    """Mean of 1 - edit_distance / max(len); both-empty counts as 1.0."""
    _check_lengths(preds, gts)
    if not gts:
        return 1.0
    return sum(line_ned(p, g) for p, g in zip(preds, gts)) / len(gts)


# --- pixel fidelity ------------------------------------------------------------------


def psnr(pred: np.ndarray, ref: np.ndarray) -> float:
    if pred.shape != ref.shape:
        raise ShapeMismatch(f"psnr: {pred.shape} vs {ref.shape}")
    mse = np.mean((pred.astype(np.float64) - ref.astype(np.float64)) ** 2)
    if mse == 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, float(10.0 * np.log10(255.0**2 / mse)))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(pred: np.ndarray, ref: np.ndarray) -> float:
    """Standard single-scale SSIM (11x11 Gaussian, K1=0.01, K2=0.03) on luma."""
    if pred.shape != ref.shape:
        raise ShapeMismatch(f"ssim: {pred.shape} vs {ref.shape}")
    x = luma(pred).astype(np.float64) if pred.ndim == 3 else pred.astype(np.float64)
    y = luma(ref).astype(np.float64) if ref.ndim == 3 else ref.astype(np.float64)
    k = _gaussian_window()
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2

    mu_x = convolve2d(x, k, mode="valid")
    mu_y = convolve2d(y, k, mode="valid")
    xx = convolve2d(x * x, k, mode="valid") - mu_x**2
    yy = convolve2d(y * y, k, mode="valid") - mu_y**2
    xy = convolve2d(x * y, k, mode="valid") - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


def pixel_fidelity(pred: np.ndarray, ref: np.ndarray) -> tuple[float, float]:
    return psnr(pred, ref), ssim(pred, ref)


# --- reports ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    """Per-line records plus recomputable aggregates for one evaluation run."""

    dataset_id: str
    records: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: int = 0

    def add(self, gt: str, pred: str, **extra) -> None:
        rec = {
            "gt": gt,
            "pred": pred,
            "exact": pred == gt,
            "ned": line_ned(pred, gt),
        }
        rec.update(extra)
        self.records.append(rec)

    @property
    def seq_acc(self) -> float:
        if not self.records:
            return 1.0
        return sum(r["exact"] for r in self.records) / len(self.records)

    @property
    def mean_ned(self) -> float:
        if not self.records:
            return 1.0
        return sum(r["ned"] for r in self.records) / len(self.records)

    def mean_of(self, key: str) -> float:
        vals = [r[key] for r in self.records if key in r]
        return float(np.mean(vals)) if vals else 0.0

    def aggregates(self) -> dict:
        agg = {"seq_acc": self.seq_acc, "mean_ned": self.mean_ned, "lines": len(self.records)}
        for key in ("psnr", "ssim", "iou"):
            vals = [r[key] for r in self.records if key in r]
            if vals:
                agg[f"mean_{key}"] = float(np.mean(vals))
        return agg

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "seed": self.seed,
            "config": self.config,
            "aggregates": self.aggregates(),
            "records": self.records,
        }

    def to_json(self) -> bytes:
        """Canonical bytes; identical runs serialize identically."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        rep = cls(dataset_id=d["dataset_id"], config=d.get("config", {}), seed=d.get("seed", 0))
        rep.records = list(d["records"])
        return rep
