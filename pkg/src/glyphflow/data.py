"""Procedural scene-text dataset generation.

Scenes are small RGB images with distractor backgrounds (solid fills,
gradients, amplitude-limited noise, shapes) and hard-edged text lines drawn
from a glyph atlas. Everything is derived from (config seed, sample index),
so datasets are bit-reproducible and any sample can be regenerated from its
manifest line alone.

Background colors are confined to a mid-luma band while text colors sit far
outside it (dark or bright). That contrast gap is a deliberate contract with
the oracle recognizer: binarizing any text box separates ink from background
exactly, so recognition on clean renders is perfect by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import AtlasMissing, DatasetInvalid, IoFailure
from .glyphs import Box, GlyphAtlas, LineSpec, atlas_from_spec, scale_bitmap, standard_pack
from .seeding import derive_seed, stream

MANIFEST_NAME = "manifest.jsonl"
DATASET_META_NAME = "dataset.json"
FORMAT_VERSION = 1

# Rec.601 luma; the recognizer grayscales with the same weights.
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)

# Backgrounds live in this luma band (plus +-10 of pixel noise).
BG_LUMA_LO = 112.0
BG_LUMA_HI = 148.0
BG_NOISE_AMPLITUDE = 10

# Text palette: luma <= ~50 or >= ~215, far outside the background band.
TEXT_PALETTE = {
    "navy": (16, 16, 128),
    "maroon": (112, 16, 16),
    "forest": (16, 64, 16),
    "white": (245, 245, 245),
    "yellow": (255, 235, 20),
}

INTER_BOX_MARGIN = 8
EDGE_MARGIN = 2


def luma(rgb: np.ndarray) -> np.ndarray:
    """Scalar luma of (..., 3) uint8/float arrays."""
    return np.asarray(rgb, dtype=np.float32) @ LUMA_WEIGHTS


def nearest_palette_color(rgb, palette: dict = TEXT_PALETTE) -> str:
    """Name of the palette entry closest in RGB space."""
    names = sorted(palette)
    table = np.array([palette[n] for n in names], dtype=np.float32)
    d = np.linalg.norm(table - np.asarray(rgb, dtype=np.float32), axis=1)
    return names[int(np.argmin(d))]


@dataclass(frozen=True)
class SampleLine:
    """One rendered line: its spec, color name, and exact RGB."""

    text: str
    box: Box
    color_name: str
    color: tuple[int, int, int]

    @property
    def spec(self) -> LineSpec:
        return LineSpec(text=self.text, box=self.box)


@dataclass(frozen=True)
class DataConfig:
    scene_w: int = 128
    scene_h: int = 128
    background: tuple[str, ...] = ("solid", "gradient", "noise", "shapes")
    text_colors: tuple[str, ...] = tuple(sorted(TEXT_PALETTE))
    lines_per_image: tuple[int, int] = (1, 3)
    packs: tuple = (("latin36", 1.0),)  # ((pack_id_or_spec, weight), ...)
    long_side_choices: tuple[int, ...] = (96, 112, 128)
    seed: int = 0
    text_len: tuple[int, int] = (2, 8)
    text_heights: tuple[int, int] = (12, 21)
    color_mode: str = "per_image"  # one color per sample; "per_line" varies
    charset_block: tuple[str, ...] = ()  # excluded from sampled texts
    charset_allow: tuple[str, ...] = ()  # if set, restrict texts to these

    def __post_init__(self):
        if self.lines_per_image[0] < 1:
            raise ValueError("lines_per_image must be >= 1")
        if not self.long_side_choices:
            raise ValueError("long_side_choices must be non-empty")
        weights = [w for _, w in self.packs]
        if abs(sum(weights) - 1.0) > 1e-9:
            raise ValueError(f"pack weights must sum to 1, got {sum(weights)}")
        if self.color_mode not in ("per_image", "per_line"):
            raise ValueError(f"unknown color_mode {self.color_mode!r}")

    def to_dict(self) -> dict:
        d = {
            "scene_w": self.scene_w,
            "scene_h": self.scene_h,
            "background": list(self.background),
            "text_colors": list(self.text_colors),
            "lines_per_image": list(self.lines_per_image),
            "packs": [[p, w] for p, w in self.packs],
            "long_side_choices": list(self.long_side_choices),
            "seed": self.seed,
            "text_len": list(self.text_len),
            "text_heights": list(self.text_heights),
            "color_mode": self.color_mode,
            "charset_block": list(self.charset_block),
            "charset_allow": list(self.charset_allow),
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        return cls(
            scene_w=d["scene_w"],
            scene_h=d["scene_h"],
            background=tuple(d["background"]),
            text_colors=tuple(d["text_colors"]),
            lines_per_image=tuple(d["lines_per_image"]),
            packs=tuple((p, w) for p, w in d["packs"]),
            long_side_choices=tuple(d["long_side_choices"]),
            seed=d["seed"],
            text_len=tuple(d["text_len"]),
            text_heights=tuple(d["text_heights"]),
            color_mode=d.get("color_mode", "per_image"),
            charset_block=tuple(d.get("charset_block", ())),
            charset_allow=tuple(d.get("charset_allow", ())),
        )


@dataclass
class SceneSample:
    scene: np.ndarray  # (H, W, 3) uint8
    lines: list[SampleLine]
    pack_id: str
    sample_seed: int

    @property
    def height(self) -> int:
        return int(self.scene.shape[0])

    @property
    def width(self) -> int:
        return int(self.scene.shape[1])

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.scene.shape[:2], dtype=np.uint8)
        for line in self.lines:
            b = line.box
            m[b.y : b.y2, b.x : b.x2] = 1
        return m

    def line_specs(self) -> list[LineSpec]:
        return [line.spec for line in self.lines]


def resolve_atlas(pack) -> GlyphAtlas:
    """Resolve a pack id or a full spec dict to an atlas."""
    try:
        if isinstance(pack, str):
            return standard_pack(pack)
        return atlas_from_spec(pack)
    except KeyError as e:
        raise AtlasMissing(str(e)) from None


def resolve_packs(cfg: DataConfig) -> list[tuple[GlyphAtlas, float]]:
    return [(resolve_atlas(p), w) for p, w in cfg.packs]


# --- background painting --------------------------------------------------------


def _band_color(rng: np.random.Generator) -> np.ndarray:
    """A random color whose luma lies inside the background band."""
    target = float(rng.uniform(BG_LUMA_LO, BG_LUMA_HI))
    for _ in range(8):
        c = rng.integers(0, 256, size=3).astype(np.float32)
        c = np.clip(c + (target - float(luma(c))), 0, 255)
        if abs(float(luma(c)) - target) <= 4.0:
            return c.astype(np.uint8)
    return np.full(3, int(target), dtype=np.uint8)  # graceful fallback


def _paint_background(rng: np.random.Generator, h: int, w: int, modes: tuple[str, ...]) -> np.ndarray:
    mode = modes[int(rng.integers(0, len(modes)))]
    base = _band_color(rng)
    img = np.tile(base, (h, w, 1)).astype(np.float32)

    if mode == "gradient":
        other = _band_color(rng).astype(np.float32)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
        direction = int(rng.integers(0, 3))
        ramp = (xx / max(w - 1, 1), yy / max(h - 1, 1), (xx + yy) / max(h + w - 2, 1))[direction]
        img = img * (1 - ramp[..., None]) + other * ramp[..., None]
    elif mode == "noise":
        shift = rng.integers(-BG_NOISE_AMPLITUDE, BG_NOISE_AMPLITUDE + 1, size=(h, w, 1))
        img = img + shift.astype(np.float32)
    elif mode == "shapes":
        for _ in range(int(rng.integers(3, 8))):
            color = _band_color(rng).astype(np.float32)
            kind = int(rng.integers(0, 3))
            if kind == 0:  # rectangle
                x0 = int(rng.integers(0, w))
                y0 = int(rng.integers(0, h))
                x1 = min(w, x0 + int(rng.integers(4, max(5, w // 2))))
                y1 = min(h, y0 + int(rng.integers(4, max(5, h // 2))))
                img[y0:y1, x0:x1] = color
            elif kind == 1:  # ellipse
                cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
                ry = int(rng.integers(3, max(4, h // 3)))
                rx = int(rng.integers(3, max(4, w // 3)))
                yy, xx = np.mgrid[0:h, 0:w]
                inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
                img[inside] = color
            else:  # thick horizontal/vertical stripe
                if rng.integers(0, 2) == 0:
                    y0 = int(rng.integers(0, h))
                    img[y0 : min(h, y0 + int(rng.integers(2, 6))), :] = color
                else:
                    x0 = int(rng.integers(0, w))
                    img[:, x0 : min(w, x0 + int(rng.integers(2, 6)))] = color

    return np.clip(img, 0, 255).astype(np.uint8)


# --- sample generation ------------------------------------------------------------


def _charset_for(cfg: DataConfig, atlas: GlyphAtlas) -> list[str]:
    chars = set(atlas.charset)
    if cfg.charset_allow:
        chars &= set(cfg.charset_allow)
    chars -= set(cfg.charset_block)
    if not chars:
        raise DatasetInvalid(
            f"pack {atlas.pack_id!r} has no usable characters after allow/block filters"
        )
    return sorted(chars)


def _place_lines(
    rng: np.random.Generator, cfg: DataConfig, atlas: GlyphAtlas, chars: list[str]
) -> list[SampleLine]:
    lo, hi = cfg.lines_per_image
    target = int(rng.integers(lo, hi + 1))
    shared_color = cfg.text_colors[int(rng.integers(0, len(cfg.text_colors)))]
    lines: list[SampleLine] = []
    boxes: list[Box] = []
    for _ in range(target):
        placed = False
        for _attempt in range(50):
            h = int(rng.integers(cfg.text_heights[0], cfg.text_heights[1] + 1))
            # never below the cell height: downscaling can merge glyph shapes,
            # which would break the recognizer's exactness on clean renders
            h = max(h, atlas.cell_h)
            gw = atlas.advance_for_height(h)
            max_len = (cfg.scene_w - 2 * EDGE_MARGIN) // gw
            if max_len < cfg.text_len[0] or h > cfg.scene_h - 2 * EDGE_MARGIN:
                continue
            length = int(rng.integers(cfg.text_len[0], min(cfg.text_len[1], max_len) + 1))
            w = length * gw
            x = int(rng.integers(EDGE_MARGIN, cfg.scene_w - w - EDGE_MARGIN + 1))
            y = int(rng.integers(EDGE_MARGIN, cfg.scene_h - h - EDGE_MARGIN + 1))
            box = Box(x, y, w, h)
            inflated = Box(
                max(0, x - INTER_BOX_MARGIN),
                max(0, y - INTER_BOX_MARGIN),
                w + 2 * INTER_BOX_MARGIN,
                h + 2 * INTER_BOX_MARGIN,
            )
            if any(inflated.overlaps(b) for b in boxes):
                continue
            text = "".join(chars[i] for i in rng.integers(0, len(chars), size=length))
            if cfg.color_mode == "per_image":
                color_name = shared_color
            else:
                color_name = cfg.text_colors[int(rng.integers(0, len(cfg.text_colors)))]
            lines.append(
                SampleLine(
                    text=text,
                    box=box,
                    color_name=color_name,
                    color=TEXT_PALETTE[color_name],
                )
            )
            boxes.append(box)
            placed = True
            break
        if not placed and lines:
            break  # keep what fits; the first line always fits
    return lines


def rasterize_line(scene: np.ndarray, atlas: GlyphAtlas, line: SampleLine) -> None:
    """Draw a line's glyphs into the scene with hard edges (no anti-aliasing)."""
    b = line.box
    gw = atlas.advance_for_height(b.h)
    color = np.array(line.color, dtype=np.uint8)
    for i, ch in enumerate(line.text):
        x = b.x + i * gw
        if x >= b.x2:
            break
        visible = min(gw, b.x2 - x)
        ink = scale_bitmap(atlas.glyph(ch), gw, b.h)[:, :visible].astype(bool)
        region = scene[b.y : b.y2, x : x + visible]
        region[ink] = color


def gen_sample(cfg: DataConfig, sample_seed: int) -> SceneSample:
    """Generate one scene; bit-reproducible from (cfg, sample_seed)."""
    rng = stream(sample_seed, "scene")
    atlases = resolve_packs(cfg)
    weights = np.array([w for _, w in atlases])
    pack_idx = int(rng.choice(len(atlases), p=weights / weights.sum()))
    atlas = atlases[pack_idx][0]
    chars = _charset_for(cfg, atlas)

    scene = _paint_background(rng, cfg.scene_h, cfg.scene_w, cfg.background)
    lines = _place_lines(rng, cfg, atlas, chars)
    for line in lines:
        rasterize_line(scene, atlas, line)
    return SceneSample(scene=scene, lines=lines, pack_id=atlas.pack_id, sample_seed=sample_seed)


def sample_seed_for(cfg: DataConfig, idx: int) -> int:
    return derive_seed(cfg.seed, "sample", idx)


# --- dataset persistence -----------------------------------------------------------


def _manifest_line(idx: int, sample: SceneSample) -> str:
    record = {
        "idx": idx,
        "seed": sample.sample_seed,
        "pack_id": sample.pack_id,
        "w": sample.width,
        "h": sample.height,
        "lines": [
            {
                "text": line.text,
                "box": line.box.as_list(),
                "color": list(line.color),
                "color_name": line.color_name,
            }
            for line in sample.lines
        ],
    }
    return json.dumps(record, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def gen_dataset(cfg: DataConfig, n: int, out_dir) -> Path:
    """Generate and persist ``n`` samples; returns the manifest path."""
    out = Path(out_dir)
    images = out / "images"
    try:
        images.mkdir(parents=True, exist_ok=True)
        with open(out / DATASET_META_NAME, "w") as f:
            json.dump(
                {"format_version": FORMAT_VERSION, "n": n, "config": cfg.to_dict()},
                f,
                indent=2,
                sort_keys=True,
            )
        with open(out / MANIFEST_NAME, "w") as manifest:
            for idx in range(n):
                sample = gen_sample(cfg, sample_seed_for(cfg, idx))
                Image.fromarray(sample.scene, mode="RGB").save(images / f"{idx:06d}.png")
                manifest.write(_manifest_line(idx, sample) + "\n")
    except OSError as e:
        raise IoFailure(f"cannot write dataset to {out}: {e}") from e
    return out / MANIFEST_NAME


class Dataset:
    """Reader for a generated dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        manifest = self.root / MANIFEST_NAME
        meta = self.root / DATASET_META_NAME
        if not manifest.exists() or not meta.exists():
            raise DatasetInvalid(f"{self.root} is not a dataset directory")
        with open(meta) as f:
            self.meta = json.load(f)
        if self.meta.get("format_version") != FORMAT_VERSION:
            raise DatasetInvalid(
                f"unsupported dataset format_version {self.meta.get('format_version')!r}"
            )
        self.config = DataConfig.from_dict(self.meta["config"])
        self.records = []
        with open(manifest) as f:
            for line_no, line in enumerate(f):
                rec = json.loads(line)
                if rec["idx"] != line_no:
                    raise DatasetInvalid(f"manifest line {line_no} has idx {rec['idx']}")
                self.records.append(rec)
        self._cache: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.records)

    def manifest_bytes(self) -> bytes:
        with open(self.root / MANIFEST_NAME, "rb") as f:
            return f.read()

    def scene(self, idx: int) -> np.ndarray:
        if idx not in self._cache:
            path = self.root / "images" / f"{idx:06d}.png"
            self._cache[idx] = np.asarray(Image.open(path).convert("RGB"))
        return self._cache[idx]

    def __getitem__(self, idx: int) -> SceneSample:
        rec = self.records[idx]
        lines = [
            SampleLine(
                text=l["text"],
                box=Box(*l["box"]),
                color_name=l["color_name"],
                color=tuple(l["color"]),
            )
            for l in rec["lines"]
        ]
        return SceneSample(
            scene=self.scene(idx).copy(),
            lines=lines,
            pack_id=rec["pack_id"],
            sample_seed=rec["seed"],
        )

    def charset_in_manifest(self) -> set[str]:
        chars: set[str] = set()
        for rec in self.records:
            for l in rec["lines"]:
                chars.update(l["text"])
        return chars


# --- geometric transforms ------------------------------------------------------------


def resolution_augment(sample: SceneSample, long_side: int, patch: int = 8) -> SceneSample:
    """Rescale scene + boxes so the longer side is ``long_side``.

    Output dimensions are rounded down to patch multiples; aspect ratio is
    preserved before that rounding. Nearest-neighbor resampling keeps the
    hard-edged look.
    """
    h, w = sample.scene.shape[:2]
    scale = long_side / max(h, w)
    new_w = max(patch, int(w * scale) // patch * patch)
    new_h = max(patch, int(h * scale) // patch * patch)
    if (new_w, new_h) == (w, h):
        return sample
    img = Image.fromarray(sample.scene, mode="RGB").resize((new_w, new_h), Image.NEAREST)
    sx, sy = new_w / w, new_h / h
    lines = []
    for line in sample.lines:
        b = line.box
        nx, ny = int(b.x * sx), int(b.y * sy)
        nw = max(1, int(b.w * sx))
        nh = max(1, int(b.h * sy))
        nw = min(nw, new_w - nx)
        nh = min(nh, new_h - ny)
        lines.append(replace(line, box=Box(nx, ny, nw, nh)))
    return SceneSample(
        scene=np.asarray(img),
        lines=lines,
        pack_id=sample.pack_id,
        sample_seed=sample.sample_seed,
    )


def mask_perturb(sample: SceneSample, mode: str, k: int = 0) -> SceneSample:
    """Perturb the mask boxes: ``tight`` (identity), ``crop_into``, or ``pad``."""
    if k < 0:
        raise ValueError("k must be >= 0")
    h, w = sample.scene.shape[:2]
    lines = []
    for line in sample.lines:
        b = line.box
        if mode == "tight":
            nb = b
        elif mode == "crop_into":
            nw = max(4, b.w - 2 * k)
            nh = max(4, b.h - 2 * k)
            nb = Box(b.x + (b.w - nw) // 2, b.y + (b.h - nh) // 2, nw, nh)
        elif mode == "pad":
            x0 = max(0, b.x - k)
            y0 = max(0, b.y - k)
            x1 = min(w, b.x2 + k)
            y1 = min(h, b.y2 + k)
            nb = Box(x0, y0, x1 - x0, y1 - y0)
        else:
            raise ValueError(f"unknown mask perturbation {mode!r}")
        lines.append(replace(line, box=nb))
    return SceneSample(
        scene=sample.scene.copy(),
        lines=lines,
        pack_id=sample.pack_id,
        sample_seed=sample.sample_seed,
    )
