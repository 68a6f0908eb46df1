"""End-to-end editing pipeline: text + boxes + scene -> edited scene.

Steps: render the glyph template for the requested lines, stitch it onto the
scene, mask the line boxes, sample the flow model over the canvas, then crop
the template half away and paste generated pixels into the masked region
only. Everything outside the effective (padded) boxes is returned bit-exact.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .compose import (
    ComposeConfig,
    ConcatCanvas,
    ConditioningBundle,
    build_canvas,
    build_mask,
    build_prompt,
    color_token,
    encode_words,
    from_unit_range,
)
from .errors import (
    AttributeUnsupported,
    BoxOutOfScene,
    EmptyText,
    UnsupportedCodepoint,
)
from .flow import SamplerConfig, sample_batch
from .glyphs import Box, GlyphAtlas, GlyphTemplate, LineSpec, blank_template, render_line
from .model import Checkpoint
from .data import resolve_atlas

DEFAULT_BOX_PAD = 2


def checkpoint_atlases(ckpt: Checkpoint) -> list[GlyphAtlas]:
    cache = ckpt.__dict__.setdefault("_atlas_cache", None)
    if cache is None:
        cache = [resolve_atlas(spec) for spec in ckpt.packs]
        ckpt.__dict__["_atlas_cache"] = cache
    return cache


def atlas_for_line(atlases: list[GlyphAtlas], text: str) -> GlyphAtlas:
    """First atlas that can render every character of the line."""
    for atlas in atlases:
        if atlas.supports(text):
            return atlas
    missing = text if not atlases else next(
        ch for ch in text if not any(ch in a.glyphs for a in atlases)
    )
    raise UnsupportedCodepoint(
        f"no atlas in this checkpoint renders {missing!r}"
    )


def reading_order(lines: list[LineSpec]) -> list[LineSpec]:
    return sorted(lines, key=lambda l: (l.box.y, l.box.x))


def render_template_multi(
    atlases: list[GlyphAtlas], lines: list[LineSpec], width: int, height: int
) -> GlyphTemplate:
    """Template rendering where each line may come from a different pack."""
    canvas = blank_template(width, height)
    for line in lines:
        render_line(atlas_for_line(atlases, line.text), line, canvas)
    return canvas


def build_conditioned_canvas(
    scene: np.ndarray,
    lines: list[LineSpec],
    atlases: list[GlyphAtlas],
    ccfg: ComposeConfig,
    vocab=None,
    color: str | None = None,
) -> tuple[ConcatCanvas, ConditioningBundle, str]:
    """Template + concatenation + mask + conditioning for one scene.

    Assumes scene dimensions are patch multiples and boxes are validated.
    """
    h, w = scene.shape[:2]
    ordered = reading_order(lines)
    template = None
    if ccfg.concat_enabled:
        template = render_template_multi(atlases, ordered, w, h)
    canvas = build_canvas(template, scene, ccfg)
    build_mask(canvas, ordered)
    words = [l.text for l in ordered]
    attributes = {"color": color} if color is not None else {}
    cond = encode_words(words, attributes, vocab)
    return canvas, cond, build_prompt(words)


@dataclass
class EditRequest:
    scene: np.ndarray  # (H, W, 3) uint8
    lines: list[LineSpec]
    checkpoint_id: str = ""
    steps: int | None = None
    seed: int = 0
    color: str | None = None
    pad_px: int = DEFAULT_BOX_PAD


@dataclass
class EditResult:
    image: np.ndarray  # (H, W, 3) uint8, same dims as the request scene
    elapsed_ms: float
    prompt: str
    seed: int
    effective_boxes: list[Box] = field(default_factory=list)


def _validate_request(req: EditRequest) -> None:
    h, w = req.scene.shape[:2]
    for i, line in enumerate(req.lines):
        if not line.text:
            raise EmptyText(f"lines[{i}].text is empty")
        if not line.box.inside(w, h):
            raise BoxOutOfScene(f"lines[{i}].box {line.box} outside the {w}x{h} scene")


def _padded_lines(req: EditRequest) -> list[LineSpec]:
    """Grow each box by pad_px on all sides, clamped to the scene."""
    h, w = req.scene.shape[:2]
    out = []
    for line in req.lines:
        b = line.box
        x0 = max(0, b.x - req.pad_px)
        y0 = max(0, b.y - req.pad_px)
        x1 = min(w, b.x2 + req.pad_px)
        y1 = min(h, b.y2 + req.pad_px)
        out.append(LineSpec(text=line.text, box=Box(x0, y0, x1 - x0, y1 - y0)))
    return out


def _pad_to_patch(scene: np.ndarray, patch: int) -> np.ndarray:
    h, w = scene.shape[:2]
    ph = (patch - h % patch) % patch
    pw = (patch - w % patch) % patch
    if ph == 0 and pw == 0:
        return scene
    return np.pad(scene, ((0, ph), (0, pw), (0, 0)), mode="edge")


def _check_color(ckpt: Checkpoint, color: str | None):
    vocab = ckpt.vocabulary()
    if color is None:
        return vocab
    if vocab is None or color_token(color) not in vocab:
        raise AttributeUnsupported(
            f"checkpoint does not support the color attribute {color!r}"
        )
    return vocab


def edit(req: EditRequest, ckpt: Checkpoint) -> EditResult:
    """Run the full pipeline for one request; deterministic for a fixed seed."""
    start = time.perf_counter()
    _validate_request(req)
    if ckpt.model_config.cond_enabled:
        vocab = _check_color(ckpt, req.color)
    elif req.color is not None:
        raise AttributeUnsupported("checkpoint was trained without conditioning")
    else:
        vocab = None

    ordered = reading_order(req.lines)
    words = [l.text for l in ordered]
    prompt = build_prompt(words)

    if not req.lines:
        return EditResult(
            image=req.scene.copy(),
            elapsed_ms=(time.perf_counter() - start) * 1e3,
            prompt=prompt,
            seed=req.seed,
        )

    effective = _padded_lines(req)
    patch = ckpt.compose_config.patch
    h, w = req.scene.shape[:2]
    padded = _pad_to_patch(req.scene, patch)

    canvas, cond, prompt = build_conditioned_canvas(
        padded,
        effective,
        checkpoint_atlases(ckpt),
        ckpt.compose_config,
        vocab=vocab,
        color=req.color,
    )
    steps = req.steps or int(ckpt.metadata.get("sampler_steps", 32))
    scfg = SamplerConfig(steps=steps, seed=req.seed)
    generated = sample_batch(ckpt, [canvas], [cond], scfg, seeds=[req.seed])[0]

    region = canvas.scene_region
    gen_scene = from_unit_range(
        generated[region.y : region.y2, region.x : region.x2]
    )[:h, :w]
    scene_mask = canvas.mask[region.y : region.y2, region.x : region.x2][:h, :w]

    out = req.scene.copy()
    out[scene_mask == 1] = gen_scene[scene_mask == 1]
    return EditResult(
        image=out,
        elapsed_ms=(time.perf_counter() - start) * 1e3,
        prompt=prompt,
        seed=req.seed,
        effective_boxes=[l.box for l in effective],
    )


@dataclass
class EditOutcome:
    """One slot of a batch edit: either a result or an error."""

    result: EditResult | None = None
    error: str | None = None
    error_code: str | None = None

    @property
    def ok(self) -> bool:
        return self.result is not None


def edit_batch(
    requests: list[EditRequest], ckpt: Checkpoint, parallelism: int = 1
) -> list[EditOutcome]:
    """Edit many requests; output order matches input, failures fill their slot."""

    def run(req: EditRequest) -> EditOutcome:
        try:
            return EditOutcome(result=edit(req, ckpt))
        except Exception as e:  # noqa: BLE001 - per-slot error contract
            code = getattr(e, "code", e.__class__.__name__)
            return EditOutcome(error=str(e), error_code=code)

    if parallelism <= 1 or len(requests) <= 1:
        return [run(r) for r in requests]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(run, requests))
