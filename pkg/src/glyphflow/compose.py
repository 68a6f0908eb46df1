"""Input composition: glyph/scene concatenation, masks, prompts, tokens.

The model never sees raw images; it sees an augmented token sequence built
here. For every patch j the token is the channel concatenation

    Z[j] = X[j] || X_i[j] || X_m[j]

of the noisy-image patch, the masked-image patch (masked pixels zeroed), and
the binary mask patch. The glyph template is supplied spatially, by stitching
it onto the canvas above (or beside) the scene, never through an encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image

from .errors import BoxOutOfScene, DimensionMismatch, ShapeMismatch
from .glyphs import Box, GlyphTemplate, LineSpec

# The descriptive prompt recorded with every edit. Both slots receive the
# space-joined word list in reading order.
PROMPT_TEMPLATE = (
    "The pair of images highlights some white words on a black background, "
    "as well as their style on a real-world scene image. [IMAGE1] is a "
    "template image rendering the text, with the words {words}; [IMAGE2] "
    "shows the text content {words} naturally and correspondingly integrated "
    "into the image."
)

UNK_TOKEN = "<unk>"
SEP_TOKEN = "<sep>"


def color_token(name: str) -> str:
    return f"<color:{name}>"


@dataclass(frozen=True)
class ComposeConfig:
    """How scenes and glyph templates are stitched and patchified."""

    axis: str = "vertical"  # glyph half first; "horizontal" puts it left
    patch: int = 8
    concat_enabled: bool = True  # False = scene-only canvas (ablation arm)

    def __post_init__(self):
        if self.axis not in ("vertical", "horizontal"):
            raise ValueError(f"axis must be vertical|horizontal, got {self.axis!r}")
        if self.patch < 1:
            raise ValueError("patch must be >= 1")

    def to_dict(self) -> dict:
        return {
            "axis": self.axis,
            "patch": self.patch,
            "concat_enabled": self.concat_enabled,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ComposeConfig":
        return cls(
            axis=d["axis"],
            patch=d["patch"],
            concat_enabled=d.get("concat_enabled", True),
        )


@dataclass
class ConcatCanvas:
    """The model-facing canvas: glyph half + scene half + inpainting mask."""

    image: np.ndarray  # (H, W, 3) float32 in [-1, 1]
    glyph_region: Box | None  # None when concat is disabled
    scene_region: Box
    mask: np.ndarray  # (H, W) uint8, 1 = synthesize

    @property
    def height(self) -> int:
        return int(self.image.shape[0])

    @property
    def width(self) -> int:
        return int(self.image.shape[1])

    def masked_image(self) -> np.ndarray:
        """Conditioning view of the canvas: masked pixels zeroed."""
        return self.image * (1.0 - self.mask[..., None].astype(np.float32))


@dataclass
class ConditioningBundle:
    """Optional character-level conditioning tokens plus attributes."""

    token_ids: np.ndarray  # (M,) int64 ids into the model's embedding table
    words: list[str] = field(default_factory=list)
    attributes: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return int(self.token_ids.shape[0])

    @classmethod
    def disabled(cls) -> "ConditioningBundle":
        return cls(token_ids=np.zeros((0,), dtype=np.int64))


@dataclass
class TokenBatch:
    """Augmented visual sequence for one canvas."""

    x: torch.Tensor  # (N, d_x) noisy image tokens
    x_i: torch.Tensor  # (N, d_x) masked-image tokens
    x_m: torch.Tensor  # (N, d_m) mask tokens
    z: torch.Tensor  # (N, 2*d_x + d_m)
    positions: torch.Tensor  # (N, 2) global (row, col) patch coordinates
    local_positions: torch.Tensor  # (N, 2) coordinates within the half
    half_ids: torch.Tensor  # (N,) 0 = glyph half, 1 = scene half
    grid: tuple[int, int]  # (rows, cols) of the full canvas patch grid

    @property
    def n(self) -> int:
        return int(self.x.shape[0])

    @property
    def d_x(self) -> int:
        return int(self.x.shape[1])

    @property
    def d_m(self) -> int:
        return int(self.x_m.shape[1])


class Vocabulary:
    """Token table for the learned character conditioner.

    Layout: UNK, SEP, color attribute tokens, then the character set in
    codepoint order. Unknown characters fall back to UNK.
    """

    def __init__(self, tokens: list[str]):
        if tokens[:2] != [UNK_TOKEN, SEP_TOKEN]:
            raise ValueError("vocabulary must start with UNK, SEP")
        self.tokens = list(tokens)
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def build(cls, charsets, color_names=()) -> "Vocabulary":
        chars = set()
        for cs in charsets:
            chars.update(cs)
        tokens = [UNK_TOKEN, SEP_TOKEN]
        tokens += [color_token(name) for name in sorted(color_names)]
        tokens += sorted(chars)
        return cls(tokens)

    def id(self, token: str) -> int:
        return self._ids.get(token, 0)

    def __contains__(self, token: str) -> bool:
        return token in self._ids


def build_prompt(words: list[str]) -> str:
    """Fill the prompt template with the space-joined word list."""
    return PROMPT_TEMPLATE.replace("{words}", " ".join(words))


def encode_words(
    words: list[str],
    attributes: dict | None = None,
    vocab: Vocabulary | None = None,
) -> ConditioningBundle:
    """One token per character, SEP between lines, attribute tokens appended.

    With ``vocab=None`` conditioning is disabled and the bundle is empty.
    """
    if vocab is None:
        return ConditioningBundle.disabled()
    attributes = dict(attributes or {})
    ids: list[int] = []
    for i, word in enumerate(words):
        if i:
            ids.append(vocab.id(SEP_TOKEN))
        ids.extend(vocab.id(ch) for ch in word)
    if "color" in attributes:
        ids.append(vocab.id(color_token(attributes["color"])))
    return ConditioningBundle(
        token_ids=np.asarray(ids, dtype=np.int64), words=list(words), attributes=attributes
    )


# --- value range --------------------------------------------------------------


def to_unit_range(img_u8: np.ndarray) -> np.ndarray:
    """uint8 [0, 255] -> float32 [-1, 1]; 0 maps to -1.0 and 255 to +1.0."""
    return img_u8.astype(np.float32) / 127.5 - 1.0


def from_unit_range(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip((img + 1.0) * 127.5, 0.0, 255.0)).astype(np.uint8)


# --- canvas construction --------------------------------------------------------


def concat(glyph: GlyphTemplate, scene: np.ndarray, cfg: ComposeConfig) -> ConcatCanvas:
    """Stitch the glyph template onto the scene along the configured axis."""
    h, w = scene.shape[:2]
    if (glyph.height, glyph.width) != (h, w):
        raise DimensionMismatch(
            f"glyph template is {glyph.width}x{glyph.height}, scene is {w}x{h}"
        )
    if scene.ndim != 3 or scene.shape[2] != 3:
        raise DimensionMismatch(f"scene must be HxWx3, got {scene.shape}")
    glyph_rgb = np.repeat(glyph.image[..., None], 3, axis=2)
    if cfg.axis == "vertical":
        image = np.concatenate([glyph_rgb, scene], axis=0)
        glyph_region = Box(0, 0, w, h)
        scene_region = Box(0, h, w, h)
    else:
        image = np.concatenate([glyph_rgb, scene], axis=1)
        glyph_region = Box(0, 0, w, h)
        scene_region = Box(w, 0, w, h)
    canvas = ConcatCanvas(
        image=to_unit_range(image),
        glyph_region=glyph_region,
        scene_region=scene_region,
        mask=np.zeros(image.shape[:2], dtype=np.uint8),
    )
    return canvas


def scene_canvas(scene: np.ndarray, cfg: ComposeConfig) -> ConcatCanvas:
    """Scene-only canvas (no glyph half); used by the no-concat ablation arm."""
    h, w = scene.shape[:2]
    return ConcatCanvas(
        image=to_unit_range(scene),
        glyph_region=None,
        scene_region=Box(0, 0, w, h),
        mask=np.zeros((h, w), dtype=np.uint8),
    )


def build_canvas(
    glyph: GlyphTemplate | None, scene: np.ndarray, cfg: ComposeConfig
) -> ConcatCanvas:
    if cfg.concat_enabled:
        if glyph is None:
            raise DimensionMismatch("concat is enabled but no glyph template given")
        return concat(glyph, scene, cfg)
    return scene_canvas(scene, cfg)


def build_mask(canvas: ConcatCanvas, lines: list[LineSpec]) -> ConcatCanvas:
    """Set the inpainting mask to exactly the union of the line boxes.

    Boxes are given in scene coordinates and offset into the scene region;
    the glyph half always stays unmasked.
    """
    region = canvas.scene_region
    canvas.mask[:] = 0
    for line in lines:
        b = line.box
        if not b.inside(region.w, region.h):
            raise BoxOutOfScene(
                f"box {b} is not inside the {region.w}x{region.h} scene region"
            )
        canvas.mask[region.y + b.y : region.y + b.y2, region.x + b.x : region.x + b.x2] = 1
    return canvas


# --- patchification -------------------------------------------------------------


def patchify(img: torch.Tensor, patch: int) -> torch.Tensor:
    """(..., H, W, C) -> (..., N, patch*patch*C), patches row-major."""
    *lead, h, w, c = img.shape
    if h % patch or w % patch:
        raise ShapeMismatch(f"{h}x{w} not divisible by patch {patch}")
    rows, cols = h // patch, w // patch
    x = img.reshape(*lead, rows, patch, cols, patch, c)
    x = x.movedim(-4, -3)  # (..., rows, cols, patch, patch, c)
    return x.reshape(*lead, rows * cols, patch * patch * c)


def unpatchify(tokens: torch.Tensor, rows: int, cols: int, patch: int, channels: int) -> torch.Tensor:
    """Inverse of :func:`patchify`; exact round trip."""
    *lead, n, d = tokens.shape
    if n != rows * cols or d != patch * patch * channels:
        raise ShapeMismatch(
            f"tokens {tokens.shape} do not match grid {rows}x{cols}, patch {patch}, C {channels}"
        )
    x = tokens.reshape(*lead, rows, cols, patch, patch, channels)
    x = x.movedim(-3, -4)
    return x.reshape(*lead, rows * patch, cols * patch, channels)


def grid_coordinates(rows: int, cols: int) -> torch.Tensor:
    rr, cc = torch.meshgrid(
        torch.arange(rows, dtype=torch.long),
        torch.arange(cols, dtype=torch.long),
        indexing="ij",
    )
    return torch.stack([rr.reshape(-1), cc.reshape(-1)], dim=1)


def half_layout(
    canvas: ConcatCanvas, cfg: ComposeConfig
) -> tuple[torch.Tensor, torch.Tensor, tuple[int, int]]:
    """Per-token half ids and half-local coordinates for the canvas grid.

    Both halves share one positional table: a scene token and the glyph token
    at the same in-half coordinate get the same grid embedding, which is what
    lets attention align template and scene.
    """
    p = cfg.patch
    rows, cols = canvas.height // p, canvas.width // p
    pos = grid_coordinates(rows, cols)
    if canvas.glyph_region is None:
        half = torch.ones(rows * cols, dtype=torch.long)
        return half, pos.clone(), (rows, cols)
    local = pos.clone()
    if cfg.axis == "vertical":
        half_rows = canvas.glyph_region.h // p
        half = (pos[:, 0] >= half_rows).long()
        local[:, 0] = pos[:, 0] % half_rows
    else:
        half_cols = canvas.glyph_region.w // p
        half = (pos[:, 1] >= half_cols).long()
        local[:, 1] = pos[:, 1] % half_cols
    return half, local, (rows, cols)


def tokenize(canvas: ConcatCanvas, x_t: torch.Tensor, cfg: ComposeConfig) -> TokenBatch:
    """Turn (canvas, noisy image) into the augmented token sequence."""
    p = cfg.patch
    h, w = canvas.height, canvas.width
    if tuple(x_t.shape) != (h, w, 3):
        raise DimensionMismatch(f"x_t has shape {tuple(x_t.shape)}, canvas is {h}x{w}x3")
    if h % p or w % p:
        raise DimensionMismatch(f"canvas {h}x{w} not divisible by patch {p}")

    x = patchify(x_t.to(torch.float32), p)
    x_i = patchify(torch.from_numpy(canvas.masked_image()), p)
    mask = torch.from_numpy(canvas.mask.astype(np.float32))[..., None]
    x_m = patchify(mask, p)
    z = torch.cat([x, x_i, x_m], dim=1)
    half_ids, local, grid = half_layout(canvas, cfg)
    return TokenBatch(
        x=x,
        x_i=x_i,
        x_m=x_m,
        z=z,
        positions=grid_coordinates(*grid),
        local_positions=local,
        half_ids=half_ids,
        grid=grid,
    )


# --- debug serialization ---------------------------------------------------------


def save_canvas_png(canvas: ConcatCanvas, image_path, mask_path=None) -> None:
    Image.fromarray(from_unit_range(canvas.image), mode="RGB").save(image_path)
    if mask_path is not None:
        Image.fromarray(canvas.mask * np.uint8(255), mode="L").save(mask_path)
