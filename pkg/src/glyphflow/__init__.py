"""Glyph-template-conditioned scene-text inpainting at desk scale.

A miniature flow-matching diffusion transformer renders user-specified text
into masked regions of images. The text is supplied purely visually: a
white-on-black glyph template is spatially concatenated with the scene, so no
OCR encoder is involved. The package covers synthetic data generation,
training (full-parameter and LoRA), inference, evaluation with an exact
recognition oracle, an HTTP service, and a CLI.
"""

__version__ = "0.1.0"

from .compose import (
    ComposeConfig,
    ConcatCanvas,
    ConditioningBundle,
    TokenBatch,
    Vocabulary,
    build_mask,
    build_prompt,
    concat,
    encode_words,
    tokenize,
)
from .data import DataConfig, Dataset, SceneSample, gen_dataset, gen_sample, mask_perturb, resolution_augment
from .errors import GlyphFlowError
from .evals import EvalReport, ned, pixel_fidelity, recognize, seq_acc
from .flow import LossConfig, SamplerConfig, fm_loss, interpolate, sample, sigma_schedule
from .glyphs import Box, GlyphAtlas, GlyphTemplate, LineSpec, build_atlas, render_line, render_template
from .model import (
    Checkpoint,
    ModelConfig,
    apply_lora,
    forward,
    init_checkpoint,
    load_checkpoint,
    merge_lora,
    param_count,
    save_checkpoint,
)
from .pipeline import EditRequest, EditResult, edit, edit_batch
from .train import TrainConfig, TrainLog, adapt_few_shot, train

__all__ = [
    "Box",
    "Checkpoint",
    "ComposeConfig",
    "ConcatCanvas",
    "ConditioningBundle",
    "DataConfig",
    "Dataset",
    "EditRequest",
    "EditResult",
    "EvalReport",
    "GlyphAtlas",
    "GlyphFlowError",
    "GlyphTemplate",
    "LineSpec",
    "LossConfig",
    "ModelConfig",
    "SamplerConfig",
    "SceneSample",
    "TokenBatch",
    "TrainConfig",
    "TrainLog",
    "Vocabulary",
    "adapt_few_shot",
    "apply_lora",
    "build_atlas",
    "build_mask",
    "build_prompt",
    "concat",
    "edit",
    "edit_batch",
    "encode_words",
    "fm_loss",
    "forward",
    "gen_dataset",
    "gen_sample",
    "init_checkpoint",
    "interpolate",
    "load_checkpoint",
    "mask_perturb",
    "merge_lora",
    "ned",
    "param_count",
    "pixel_fidelity",
    "recognize",
    "render_line",
    "render_template",
    "resolution_augment",
    "sample",
    "save_checkpoint",
    "seq_acc",
    "sigma_schedule",
    "tokenize",
    "train",
]
