"""Flow-matching objective and the deterministic Euler sampler.

Training pairs a clean canvas x0 with Gaussian noise z1 through the convex
interpolation x_t = (1 - sigma_t) x0 + sigma_t z1 and regresses the constant
path velocity z1 - x0. Sampling starts from pure noise at t = 1 and Euler-
integrates the learned velocity field down to t = 0; pixels the mask does not
cover are restored from the clean canvas afterwards, so conditioning regions
pass through bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .compose import ComposeConfig, ConcatCanvas, ConditioningBundle, half_layout, patchify, unpatchify
from .errors import NonFiniteState, ShapeMismatch
from .model import Checkpoint
from .seeding import stream


@dataclass(frozen=True)
class LossConfig:
    omega: str = "uniform"  # time weighting; uniform means omega_t == 1
    t_distribution: str = "uniform"  # t ~ U(0, 1)
    mask_weight: float = 1.0  # extra multiplier on masked-region tokens

    def __post_init__(self):
        if self.omega != "uniform":
            raise ValueError(f"unsupported omega schedule {self.omega!r}")
        if self.t_distribution != "uniform":
            raise ValueError(f"unsupported t distribution {self.t_distribution!r}")
        if not np.isfinite(self.mask_weight) or self.mask_weight < 0:
            raise ValueError("mask_weight must be finite and >= 0")

    def to_dict(self) -> dict:
        return {
            "omega": self.omega,
            "t_distribution": self.t_distribution,
            "mask_weight": self.mask_weight,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(**d)


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 32
    schedule: str = "linear"  # sigma_t = t
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.schedule != "linear":
            raise ValueError(f"unsupported schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        return {"steps": self.steps, "schedule": self.schedule, "seed": self.seed}


def sigma_schedule(t: float) -> float:
    """Linear (rectified-flow) noise scale: sigma_t = t."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must be in [0, 1], got {t}")
    return float(t)


def interpolate(x0, z1, sigma: float):
    """Convex interpolation x_t = (1 - sigma) x0 + sigma z1, elementwise."""
    if tuple(x0.shape) != tuple(z1.shape):
        raise ShapeMismatch(f"interpolate: {tuple(x0.shape)} vs {tuple(z1.shape)}")
    if not 0.0 <= sigma <= 1.0:
        raise ValueError(f"sigma must be in [0, 1], got {sigma}")
    return (1.0 - sigma) * x0 + sigma * z1


def fm_loss(
    pred: torch.Tensor,
    x0: torch.Tensor,
    z1: torch.Tensor,
    cfg: LossConfig = LossConfig(),
    mask_tokens: torch.Tensor | None = None,
    omega_t: float = 1.0,
) -> torch.Tensor:
    """Weighted MSE against the target velocity z1 - x0, in token space.

    ``mask_tokens`` flags tokens that carry any masked pixel; those tokens'
    squared errors are multiplied by ``cfg.mask_weight``. The default weight 1
    reduces to a plain mean over all tokens and channels.
    """
    if pred.shape != x0.shape or pred.shape != z1.shape:
        raise ShapeMismatch(
            f"fm_loss: pred {tuple(pred.shape)}, x0 {tuple(x0.shape)}, z1 {tuple(z1.shape)}"
        )
    err = (pred - (z1 - x0)) ** 2
    if mask_tokens is not None and cfg.mask_weight != 1.0:
        w = torch.where(
            mask_tokens.to(torch.bool),
            torch.as_tensor(cfg.mask_weight, dtype=err.dtype),
            torch.as_tensor(1.0, dtype=err.dtype),
        )
        err = err * w.unsqueeze(-1)
    return err.mean() * omega_t


# --- sampling ---------------------------------------------------------------------


def _check_finite(x: torch.Tensor, step: int) -> None:
    if not torch.isfinite(x).all():
        raise NonFiniteState(f"sampler state became non-finite at step {step}")


def sample_batch(
    ckpt: Checkpoint,
    canvases: list[ConcatCanvas],
    conds: list[ConditioningBundle | None],
    scfg: SamplerConfig,
    seeds: list[int] | None = None,
) -> list[np.ndarray]:
    """Euler-integrate a batch of same-geometry canvases.

    Each canvas gets its own seeded starting noise; results are independent of
    how requests are grouped into batches.
    """
    if not canvases:
        return []
    if len(conds) != len(canvases):
        raise ShapeMismatch("one conditioning bundle per canvas required")
    shape = canvases[0].image.shape
    for c in canvases:
        if c.image.shape != shape:
            raise ShapeMismatch("sample_batch requires identical canvas geometry")
    if seeds is None:
        seeds = [scfg.seed] * len(canvases)

    ccfg = ckpt.compose_config
    module = ckpt.module()
    p = ccfg.patch
    b = len(canvases)

    half_ids, local_pos, grid = half_layout(canvases[0], ccfg)
    x0 = torch.from_numpy(np.stack([c.image for c in canvases]))
    x_i = patchify(
        torch.from_numpy(np.stack([c.masked_image() for c in canvases])), p
    )
    x_m = patchify(
        torch.from_numpy(
            np.stack([c.mask.astype(np.float32) for c in canvases])
        )[..., None],
        p,
    )

    max_m = max((c.m if c is not None else 0) for c in conds)
    cond_ids = cond_keep = None
    if max_m > 0:
        cond_ids = torch.zeros(b, max_m, dtype=torch.long)
        cond_keep = torch.zeros(b, max_m, dtype=torch.bool)
        for i, c in enumerate(conds):
            if c is not None and c.m:
                cond_ids[i, : c.m] = torch.from_numpy(c.token_ids)
                cond_keep[i, : c.m] = True

    x = torch.from_numpy(
        np.stack(
            [
                stream(seed, "sampler").standard_normal(shape).astype(np.float32)
                for seed in seeds
            ]
        )
    )

    dt = 1.0 / scfg.steps
    with torch.no_grad():
        for k in range(scfg.steps):
            t = 1.0 - k * dt
            tokens = torch.cat([patchify(x, p), x_i, x_m], dim=-1)
            t_vec = torch.full((b,), t, dtype=torch.float32)
            v = module(tokens, local_pos, half_ids, t_vec, cond_ids, cond_keep)
            rows, cols = grid
            x = x - dt * unpatchify(v, rows, cols, p, 3)
            _check_finite(x, k)

    x = torch.clamp(x, -1.0, 1.0)
    out = []
    keep_clean = torch.from_numpy(
        np.stack([c.mask for c in canvases])
    ).to(torch.bool)[..., None]
    merged = torch.where(keep_clean, x, x0)
    for i in range(b):
        out.append(merged[i].numpy().astype(np.float32, copy=True))
    return out


def sample(
    ckpt: Checkpoint,
    canvas: ConcatCanvas,
    cond: ConditioningBundle | None,
    scfg: SamplerConfig,
) -> np.ndarray:
    """Generate one canvas; unmasked pixels equal the input canvas bitwise."""
    return sample_batch(ckpt, [canvas], [cond], scfg, seeds=[scfg.seed])[0]
