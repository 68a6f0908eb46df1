"""Glyph atlases and template rendering.

An atlas is a fixed-pitch table of strictly binary bitmaps, one per character.
Two kinds exist:

* ``embedded_font`` -- a hand-drawn 5x7 pixel font for A-Z and 0-9, placed in
  an 8x12 cell. No external font files.
* ``procedural`` -- pseudo-script glyphs composed from seeded strokes, used to
  stand in for "new languages" in few-shot and mixing experiments. Fully
  reproducible from (pack_id, seed).

Templates are white-on-black single-channel images at the paired scene's
resolution; each text line is drawn into its box with a uniform scale to the
box height and a fixed horizontal advance, which is what makes the oracle
recognizer exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import (
    BoxTooSmall,
    DegenerateGlyph,
    EmptyText,
    OverlappingBoxes,
    UnsupportedCodepoint,
)
from .seeding import stream

MIN_BOX_HEIGHT = 8

# 5x7 pixel font, drawn into an 8x12 cell at offset (col 1, row 2). '#' = ink.
_FONT_5X7 = {
    "A": (".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "B": ("####.", "#...#", "####.", "#...#", "#...#", "#...#", "####."),
    "C": (".####", "#....", "#....", "#....", "#....", "#....", ".####"),
    "D": ("####.", "#...#", "#...#", "#...#", "#...#", "#...#", "####."),
    "E": ("#####", "#....", "####.", "#....", "#....", "#....", "#####"),
    "F": ("#####", "#....", "####.", "#....", "#....", "#....", "#...."),
    "G": (".####", "#....", "#....", "#.###", "#...#", "#...#", ".###."),
    "H": ("#...#", "#...#", "#####", "#...#", "#...#", "#...#", "#...#"),
    "I": ("#####", "..#..", "..#..", "..#..", "..#..", "..#..", "#####"),
    "J": ("..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."),
    "K": ("#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"),
    "L": ("#....", "#....", "#....", "#....", "#....", "#....", "#####"),
    "M": ("#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"),
    "N": ("#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#", "#...#"),
    "O": (".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
    "P": ("####.", "#...#", "#...#", "####.", "#....", "#....", "#...."),
    "Q": (".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"),
    "R": ("####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"),
    "S": (".####", "#....", "#....", ".###.", "....#", "....#", "####."),
    "T": ("#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."),
    "U": ("#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
    "V": ("#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."),
    "W": ("#...#", "#...#", "#...#", "#.#.#", "#.#.#", "##.##", "#...#"),
    "X": ("#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"),
    "Y": ("#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."),
    "Z": ("#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"),
    "0": (".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."),
    "1": ("..#..", ".##..", "..#..", "..#..", "..#..", "..#..", "#####"),
    "2": (".###.", "#...#", "....#", "..##.", ".#...", "#....", "#####"),
    "3": ("#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."),
    "4": ("...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."),
    "5": ("#####", "#....", "####.", "....#", "....#", "#...#", ".###."),
    "6": ("..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."),
    "7": ("#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."),
    "8": (".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."),
    "9": (".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."),
}

EMBEDDED_CELL_W = 8
EMBEDDED_CELL_H = 12
EMBEDDED_CHARSET = frozenset(_FONT_5X7)

# Conventional charsets for the procedural pseudo-script packs: Private Use
# Area codepoints, disjoint from Latin and from each other.
PSEUDO_CHARSET_A = frozenset(chr(0xE000 + i) for i in range(24))
PSEUDO_CHARSET_B = frozenset(chr(0xE100 + i) for i in range(24))


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in pixel coordinates, origin top-left."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box must have positive size, got {self}")

    @property
    def x2(self) -> int:
        return self.x + self.w

    @property
    def y2(self) -> int:
        return self.y + self.h

    def inside(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x2 <= width and self.y2 <= height

    def overlaps(self, other: "Box") -> bool:
        return not (
            self.x2 <= other.x
            or other.x2 <= self.x
            or self.y2 <= other.y
            or other.y2 <= self.y
        )

    def scaled(self, factor: float) -> "Box":
        return Box(
            int(self.x * factor),
            int(self.y * factor),
            max(1, int(self.w * factor)),
            max(1, int(self.h * factor)),
        )

    def as_list(self) -> list[int]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class LineSpec:
    """One text line bound to a box in scene coordinates."""

    text: str
    box: Box


@dataclass
class GlyphTemplate:
    """White-on-black rendering of text lines at scene resolution."""

    image: np.ndarray  # (H, W) uint8, values in {0, 255}
    lines: list[LineSpec] = field(default_factory=list)

    @property
    def height(self) -> int:
        return int(self.image.shape[0])

    @property
    def width(self) -> int:
        return int(self.image.shape[1])


@dataclass(frozen=True)
class GlyphAtlas:
    """Character -> binary bitmap table with fixed cell size."""

    pack_id: str
    cell_w: int
    cell_h: int
    glyphs: dict  # char -> (cell_h, cell_w) uint8 array with values in {0, 1}
    provenance: dict  # {"source": "embedded_font"} | {"source": "procedural", "seed": int}

    @property
    def charset(self) -> frozenset:
        return frozenset(self.glyphs)

    def glyph(self, ch: str) -> np.ndarray:
        try:
            return self.glyphs[ch]
        except KeyError:
            raise UnsupportedCodepoint(
                f"pack {self.pack_id!r} has no glyph for {ch!r} (U+{ord(ch):04X})"
            ) from None

    def supports(self, text: str) -> bool:
        return all(ch in self.glyphs for ch in text)

    def advance_for_height(self, height: int) -> int:
        """Horizontal advance of one character scaled to a given box height."""
        return max(1, (self.cell_w * height) // self.cell_h)

    def spec(self) -> dict:
        """JSON-serializable description sufficient to rebuild this atlas."""
        return {
            "pack_id": self.pack_id,
            "source": self.provenance["source"],
            "seed": self.provenance.get("seed", 0),
            "charset": sorted(self.glyphs),
            "cell_w": self.cell_w,
            "cell_h": self.cell_h,
        }


def scale_bitmap(bitmap: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Nearest-neighbor rescale; the renderer and recognizer must share this."""
    src_h, src_w = bitmap.shape
    rows = (np.arange(out_h) * src_h) // out_h
    cols = (np.arange(out_w) * src_w) // out_w
    return bitmap[rows[:, None], cols[None, :]]


def _validate_atlas(pack_id: str, glyphs: dict, cell_w: int, cell_h: int) -> None:
    seen = {}
    for ch, bitmap in glyphs.items():
        if bitmap.shape != (cell_h, cell_w):
            raise DegenerateGlyph(
                f"pack {pack_id!r}: glyph {ch!r} has shape {bitmap.shape}, "
                f"expected {(cell_h, cell_w)}"
            )
        if not np.isin(bitmap, (0, 1)).all():
            raise DegenerateGlyph(f"pack {pack_id!r}: glyph {ch!r} is not binary")
        if not bitmap.any():
            raise DegenerateGlyph(f"pack {pack_id!r}: glyph {ch!r} renders all-zero")
        key = bitmap.tobytes()
        if key in seen:
            raise DegenerateGlyph(
                f"pack {pack_id!r}: glyphs {seen[key]!r} and {ch!r} are identical"
            )
        seen[key] = ch


def _embedded_glyph(ch: str) -> np.ndarray:
    rows = _FONT_5X7[ch]
    cell = np.zeros((EMBEDDED_CELL_H, EMBEDDED_CELL_W), dtype=np.uint8)
    for r, row in enumerate(rows):
        for c, mark in enumerate(row):
            if mark == "#":
                cell[2 + r, 1 + c] = 1
    return cell


def _procedural_glyph(rng: np.random.Generator, cell_w: int, cell_h: int) -> np.ndarray:
    """Compose a glyph from random strokes inside a 1-px empty margin.

    Strokes mix thick bars with single-pixel diagonals and dots so that packs
    contain fine distinguishing features; exact copies are what the oracle
    rewards, which keeps few-shot adaptation measurable.
    """
    cell = np.zeros((cell_h, cell_w), dtype=np.uint8)
    x0, y0 = 1, 2
    x1, y1 = cell_w - 2, cell_h - 3  # inclusive ink bounds
    iw, ih = x1 - x0 + 1, y1 - y0 + 1
    n_strokes = int(rng.integers(3, 6))
    for _ in range(n_strokes):
        kind = int(rng.integers(0, 4))
        if kind == 0:  # horizontal bar
            y = y0 + int(rng.integers(0, ih))
            xa = x0 + int(rng.integers(0, iw - 2))
            xb = xa + int(rng.integers(2, iw - (xa - x0)))
            cell[y, xa : min(xb, x1) + 1] = 1
        elif kind == 1:  # vertical bar
            x = x0 + int(rng.integers(0, iw))
            ya = y0 + int(rng.integers(0, ih - 2))
            yb = ya + int(rng.integers(2, ih - (ya - y0)))
            cell[ya : min(yb, y1) + 1, x] = 1
        elif kind == 2:  # diagonal
            length = int(rng.integers(3, min(iw, ih) + 1))
            xa = x0 + int(rng.integers(0, iw - length + 1))
            ya = y0 + int(rng.integers(0, ih - length + 1))
            sign = 1 if rng.integers(0, 2) == 0 else -1
            for i in range(length):
                yy = ya + i if sign == 1 else ya + length - 1 - i
                cell[yy, xa + i] = 1
        else:  # dot
            cell[y0 + int(rng.integers(0, ih)), x0 + int(rng.integers(0, iw))] = 1
    return cell


def build_atlas(
    pack_id: str,
    source: str,
    seed: int,
    charset,
    cell_w: int | None = None,
    cell_h: int | None = None,
) -> GlyphAtlas:
    """Build an atlas for a charset.

    ``embedded_font`` ignores the seed and the cell size (the font fixes both);
    ``procedural`` draws seeded strokes and retries deterministically until all
    bitmaps in the pack are distinct.
    """
    charset = sorted(set(charset))
    if not charset:
        raise ValueError("charset must be non-empty")

    if source == "embedded_font":
        missing = [ch for ch in charset if ch not in _FONT_5X7]
        if missing:
            raise UnsupportedCodepoint(
                f"embedded font lacks {missing!r}; available: A-Z, 0-9"
            )
        glyphs = {ch: _embedded_glyph(ch) for ch in charset}
        atlas = GlyphAtlas(
            pack_id=pack_id,
            cell_w=EMBEDDED_CELL_W,
            cell_h=EMBEDDED_CELL_H,
            glyphs=glyphs,
            provenance={"source": "embedded_font"},
        )
    elif source == "procedural":
        cw = EMBEDDED_CELL_W + 2 if cell_w is None else int(cell_w)
        ch_ = EMBEDDED_CELL_H if cell_h is None else int(cell_h)
        if cw < 8 or ch_ < 8:
            raise ValueError(f"cell dimensions must be >= 8x8, got {cw}x{ch_}")
        glyphs = {}
        seen = set()
        for ch in charset:
            # Per-character stream keyed by codepoint keeps glyph identity
            # stable under charset changes; bump the attempt label on collision.
            for attempt in range(64):
                rng = stream(seed, "glyph", pack_id, ord(ch), attempt)
                bitmap = _procedural_glyph(rng, cw, ch_)
                key = bitmap.tobytes()
                if bitmap.any() and key not in seen:
                    seen.add(key)
                    glyphs[ch] = bitmap
                    break
            else:
                raise DegenerateGlyph(
                    f"pack {pack_id!r}: could not draw a distinct glyph for {ch!r}"
                )
        atlas = GlyphAtlas(
            pack_id=pack_id,
            cell_w=cw,
            cell_h=ch_,
            glyphs=glyphs,
            provenance={"source": "procedural", "seed": int(seed)},
        )
    else:
        raise ValueError(f"unknown atlas source {source!r}")

    _validate_atlas(pack_id, atlas.glyphs, atlas.cell_w, atlas.cell_h)
    return atlas


def atlas_from_spec(spec: dict) -> GlyphAtlas:
    return build_atlas(
        spec["pack_id"],
        spec["source"],
        spec.get("seed", 0),
        spec["charset"],
        cell_w=spec.get("cell_w"),
        cell_h=spec.get("cell_h"),
    )


def standard_pack(pack_id: str) -> GlyphAtlas:
    """The registry of conventional packs used by configs and checkpoints."""
    if pack_id == "latin36":
        return build_atlas("latin36", "embedded_font", 0, EMBEDDED_CHARSET)
    if pack_id == "pseudo-a":
        return build_atlas("pseudo-a", "procedural", 101, PSEUDO_CHARSET_A)
    if pack_id == "pseudo-b":
        return build_atlas("pseudo-b", "procedural", 202, PSEUDO_CHARSET_B)
    raise KeyError(f"unknown standard pack {pack_id!r}")


# --- rendering ----------------------------------------------------------------


def blank_template(width: int, height: int) -> GlyphTemplate:
    return GlyphTemplate(image=np.zeros((height, width), dtype=np.uint8), lines=[])


def render_line(atlas: GlyphAtlas, line: LineSpec, canvas: GlyphTemplate) -> GlyphTemplate:
    """Draw one line into the canvas in place.

    Characters are scaled uniformly to the box height, advanced by the scaled
    cell width, and clipped at the box's right edge. Pixels outside the box
    are never touched.
    """
    if not line.text:
        raise EmptyText("cannot render an empty line")
    if not line.box.inside(canvas.width, canvas.height):
        raise OverlappingBoxes(
            f"line box {line.box} falls outside the {canvas.width}x{canvas.height} canvas"
        )
    if line.box.h < MIN_BOX_HEIGHT:
        raise BoxTooSmall(f"box height {line.box.h} < {MIN_BOX_HEIGHT} px")
    for ch in line.text:
        if ch not in atlas.glyphs:
            raise UnsupportedCodepoint(
                f"pack {atlas.pack_id!r} has no glyph for {ch!r} (U+{ord(ch):04X})"
            )

    box = line.box
    gw = atlas.advance_for_height(box.h)
    for i, ch in enumerate(line.text):
        x = box.x + i * gw
        if x >= box.x2:
            break
        visible = min(gw, box.x2 - x)
        scaled = scale_bitmap(atlas.glyph(ch), gw, box.h)[:, :visible]
        region = canvas.image[box.y : box.y2, x : x + visible]
        np.maximum(region, scaled * np.uint8(255), out=region)
    canvas.lines.append(line)
    return canvas


def render_template(
    atlas: GlyphAtlas, lines: list[LineSpec], width: int, height: int
) -> GlyphTemplate:
    """Render all lines onto a fresh black canvas of the given size.

    Lines are drawn at the same coordinates their boxes occupy in the scene,
    so the template and the scene are spatially aligned.
    """
    for i, a in enumerate(lines):
        if not a.box.inside(width, height):
            raise OverlappingBoxes(
                f"line {i} box {a.box} falls outside the {width}x{height} canvas"
            )
        for b in lines[i + 1 :]:
            if a.box.overlaps(b.box):
                raise OverlappingBoxes(f"boxes {a.box} and {b.box} overlap")
    canvas = blank_template(width, height)
    for line in lines:
        render_line(atlas, line, canvas)
    return canvas


# --- atlas export / import ----------------------------------------------------


def save_atlas(atlas: GlyphAtlas, png_path, json_path) -> None:
    """Export as a PNG sprite sheet plus a JSON index (codepoint -> cell)."""
    chars = sorted(atlas.glyphs)
    cols = int(np.ceil(np.sqrt(len(chars))))
    rows = (len(chars) + cols - 1) // cols
    sheet = np.zeros((rows * atlas.cell_h, cols * atlas.cell_w), dtype=np.uint8)
    index = {}
    for i, ch in enumerate(chars):
        r, c = divmod(i, cols)
        sheet[
            r * atlas.cell_h : (r + 1) * atlas.cell_h,
            c * atlas.cell_w : (c + 1) * atlas.cell_w,
        ] = atlas.glyphs[ch] * 255
        index[f"{ord(ch):06X}"] = [c, r]
    Image.fromarray(sheet, mode="L").save(png_path)
    meta = {
        "format_version": 1,
        "pack_id": atlas.pack_id,
        "cell_w": atlas.cell_w,
        "cell_h": atlas.cell_h,
        "cols": cols,
        "provenance": atlas.provenance,
        "index": index,
    }
    with open(json_path, "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def load_atlas(png_path, json_path) -> GlyphAtlas:
    with open(json_path) as f:
        meta = json.load(f)
    sheet = np.asarray(Image.open(png_path).convert("L"))
    cw, ch_ = meta["cell_w"], meta["cell_h"]
    glyphs = {}
    for cp_hex, (c, r) in meta["index"].items():
        cell = sheet[r * ch_ : (r + 1) * ch_, c * cw : (c + 1) * cw]
        glyphs[chr(int(cp_hex, 16))] = (cell >= 128).astype(np.uint8)
    atlas = GlyphAtlas(
        pack_id=meta["pack_id"],
        cell_w=cw,
        cell_h=ch_,
        glyphs=glyphs,
        provenance=meta["provenance"],
    )
    _validate_atlas(atlas.pack_id, glyphs, cw, ch_)
    return atlas


def save_template_png(template: GlyphTemplate, path) -> None:
    Image.fromarray(template.image, mode="L").save(path)
