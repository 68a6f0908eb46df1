"""Deterministic training loop: full-parameter and LoRA regimes.

All randomness flows through four named streams (data order, timesteps,
noise, resolution choice) seeded from the run seed, and every step draws for
the whole step (batch x grad_accum) before splitting into micro-batches, so
gradient accumulation regroups the same work instead of changing it. Stream
positions and optimizer moments ride along in checkpoints, which makes a
resumed run bit-identical to an uninterrupted one.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .compose import ComposeConfig, Vocabulary, half_layout, patchify
from .data import Dataset, resolution_augment, resolve_atlas
from .errors import DatasetInvalid, NonFiniteLoss, PackOverlap, ShapeMismatch
from .flow import LossConfig, fm_loss
from .model import (
    Checkpoint,
    LoraState,
    ModelConfig,
    apply_lora,
    build_module,
    init_checkpoint,
)
from .pipeline import build_conditioned_canvas, checkpoint_atlases
from .seeding import StreamSet


@dataclass(frozen=True)
class TrainConfig:
    dataset: str = ""
    steps: int = 1
    lr: float = 3e-4
    batch: int = 16
    grad_accum: int = 1
    regime: str = "full"  # "full" | "lora"
    lora_rank: int = 8
    lora_targets: tuple = ("attn", "mlp")
    seed: int = 0
    eval_every: int = 0  # 0 = no periodic eval
    eval_samples: int = 24
    eval_sampler_steps: int = 16
    checkpoint_every: int = 0  # 0 = final checkpoint only
    long_side_choices: tuple | None = None  # None = dataset's choices
    out_dir: str = ""
    model: dict = field(default_factory=dict)  # ModelConfig overrides
    axis: str = "vertical"
    patch: int = 8
    concat_enabled: bool = True
    cond_enabled: bool = True
    use_color_attr: bool = True
    mask_weight: float = 1.0
    sampler_steps: int = 32  # recorded default for inference

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch * self.grad_accum < 1:
            raise ValueError("batch * grad_accum must be >= 1")
        if self.regime not in ("full", "lora"):
            raise ValueError(f"unknown regime {self.regime!r}")

    def to_dict(self) -> dict:
        d = {
            "dataset": self.dataset,
            "steps": self.steps,
            "lr": self.lr,
            "batch": self.batch,
            "grad_accum": self.grad_accum,
            "regime": self.regime,
            "lora_rank": self.lora_rank,
            "lora_targets": list(self.lora_targets),
            "seed": self.seed,
            "eval_every": self.eval_every,
            "eval_samples": self.eval_samples,
            "eval_sampler_steps": self.eval_sampler_steps,
            "checkpoint_every": self.checkpoint_every,
            "long_side_choices": None
            if self.long_side_choices is None
            else list(self.long_side_choices),
            "out_dir": self.out_dir,
            "model": dict(self.model),
            "axis": self.axis,
            "patch": self.patch,
            "concat_enabled": self.concat_enabled,
            "cond_enabled": self.cond_enabled,
            "use_color_attr": self.use_color_attr,
            "mask_weight": self.mask_weight,
            "sampler_steps": self.sampler_steps,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if d.get("lora_targets") is not None:
            d["lora_targets"] = tuple(d["lora_targets"])
        if d.get("long_side_choices") is not None:
            d["long_side_choices"] = tuple(d["long_side_choices"])
        return cls(**d)


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)  # {step, loss, grad_norm, ms}
    evals: list = field(default_factory=list)  # {step, seq_acc, ned}

    def add_step(self, step: int, loss: float, grad_norm: float, ms: float) -> None:
        self.steps.append(
            {"step": step, "loss": loss, "grad_norm": grad_norm, "ms": round(ms, 3)}
        )

    def add_eval(self, step: int, seq_acc_: float, ned_: float) -> None:
        self.evals.append({"step": step, "seq_acc": seq_acc_, "ned": ned_})

    def losses(self) -> list:
        return [r["loss"] for r in self.steps]

    def save_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for rec in self.steps:
                f.write(json.dumps({"kind": "step", **rec}, sort_keys=True) + "\n")
            for rec in self.evals:
                f.write(json.dumps({"kind": "eval", **rec}, sort_keys=True) + "\n")

    @classmethod
    def load_jsonl(cls, path) -> "TrainLog":
        log = cls()
        with open(path) as f:
            for line in f:
                rec = json.loads(line)
                kind = rec.pop("kind")
                (log.steps if kind == "step" else log.evals).append(rec)
        return log


def tensor_fingerprint(ckpt: Checkpoint) -> str:
    """Content hash of parameters + configs; identifies a model state."""
    h = hashlib.sha256()
    h.update(json.dumps(ckpt.model_config.to_dict(), sort_keys=True).encode())
    h.update(json.dumps(ckpt.compose_config.to_dict(), sort_keys=True).encode())
    for name in sorted(ckpt.tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(ckpt.tensors[name], dtype="<f4").tobytes())
    if ckpt.lora:
        for path in sorted(ckpt.lora.tensors):
            ab = ckpt.lora.tensors[path]
            h.update(path.encode())
            h.update(np.ascontiguousarray(ab["A"], dtype="<f4").tobytes())
            h.update(np.ascontiguousarray(ab["B"], dtype="<f4").tobytes())
    return h.hexdigest()


def dataset_hash(ds: Dataset) -> str:
    return hashlib.sha256(ds.manifest_bytes()).hexdigest()


def _fresh_checkpoint(cfg: TrainConfig, ds: Dataset) -> Checkpoint:
    pack_specs = [resolve_atlas(p).spec() for p, _ in ds.config.packs]
    vocab = None
    if cfg.cond_enabled:
        charsets = [set(spec["charset"]) for spec in pack_specs]
        vocab = Vocabulary.build(charsets, ds.config.text_colors)
    model_kwargs = dict(cfg.model)
    model_kwargs.setdefault("max_cond", 64)
    mcfg = ModelConfig(
        patch=cfg.patch,
        vocab_size=len(vocab) if vocab else 0,
        cond_enabled=cfg.cond_enabled,
        **model_kwargs,
    )
    ccfg = ComposeConfig(axis=cfg.axis, patch=cfg.patch, concat_enabled=cfg.concat_enabled)
    ckpt = init_checkpoint(
        mcfg,
        ccfg,
        vocab=vocab,
        packs=pack_specs,
        seed=cfg.seed,
        metadata={"sampler_steps": cfg.sampler_steps},
    )
    if cfg.regime == "lora":
        ckpt = apply_lora(ckpt, cfg.lora_rank, cfg.lora_targets, seed=cfg.seed)
    return ckpt


def _trainable_parameters(module, regime: str):
    if regime == "full":
        return list(module.parameters())
    lora_params = []
    for name, p in module.named_parameters():
        if ".lora_" in name or name.endswith(("lora_A", "lora_B")):
            lora_params.append(p)
        else:
            p.requires_grad_(False)
    if not lora_params:
        raise ShapeMismatch("LoRA regime requires adapters on the checkpoint")
    return lora_params


def _export_checkpoint(
    template: Checkpoint, module, metadata: dict, optimizer=None, trainable_names=None
) -> Checkpoint:
    """Sync live module parameters (and optimizer state) back into a Checkpoint."""
    base, lora_tensors = {}, {}
    for name, tensor in module.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype(np.float32)
        if ".lora_" in name:
            path, ab = name.rsplit(".lora_", 1)
            lora_tensors.setdefault(path, {})[ab] = arr
        else:
            base[name] = arr
    lora = None
    if template.lora is not None:
        lora = LoraState(
            rank=template.lora.rank, targets=template.lora.targets, tensors=lora_tensors
        )
    extras = {}
    if optimizer is not None and trainable_names:
        for name, p in trainable_names:
            state = optimizer.state.get(p)
            if not state:
                continue
            extras[f"{name}.exp_avg"] = state["exp_avg"].numpy().astype(np.float32)
            extras[f"{name}.exp_avg_sq"] = state["exp_avg_sq"].numpy().astype(np.float32)
            extras[f"{name}.step"] = np.asarray(
                [float(state["step"])], dtype=np.float32
            )
    return Checkpoint(
        model_config=template.model_config,
        compose_config=template.compose_config,
        tensors=base,
        lora=lora,
        vocab=list(template.vocab) if template.vocab else None,
        packs=list(template.packs),
        metadata=metadata,
        extras=extras,
    )


def _restore_optimizer(optimizer, trainable_names, extras: dict) -> None:
    for name, p in trainable_names:
        key = f"{name}.exp_avg"
        if key not in extras:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(extras[f"{name}.step"][0])),
            "exp_avg": torch.from_numpy(extras[key].copy()),
            "exp_avg_sq": torch.from_numpy(extras[f"{name}.exp_avg_sq"].copy()),
        }


def _assemble_batch(cfg, ds, ckpt, vocab, indices, long_side):
    """Samples -> (canvases, conds) at one augmentation resolution."""
    atlases = checkpoint_atlases(ckpt)
    canvases, conds = [], []
    for i in indices:
        sample = ds[int(i)]
        sample = resolution_augment(sample, long_side, patch=cfg.patch)
        color = None
        if cfg.cond_enabled and cfg.use_color_attr and sample.lines:
            color = sample.lines[0].color_name
        canvas, cond, _ = build_conditioned_canvas(
            sample.scene,
            sample.line_specs(),
            atlases,
            ckpt.compose_config,
            vocab=vocab,
            color=color,
        )
        canvases.append(canvas)
        conds.append(cond)
    return canvases, conds


def _batch_tensors(canvases, conds, cfg, max_cond):
    p = cfg.patch
    x0 = patchify(torch.from_numpy(np.stack([c.image for c in canvases])), p)
    x_i = patchify(torch.from_numpy(np.stack([c.masked_image() for c in canvases])), p)
    x_m = patchify(
        torch.from_numpy(np.stack([c.mask.astype(np.float32) for c in canvases]))[..., None],
        p,
    )
    mask_flags = x_m.any(dim=-1)
    cond_ids = cond_keep = None
    m_max = max((c.m for c in conds), default=0)
    if m_max > 0:
        m_max = min(m_max, max_cond)
        b = len(conds)
        cond_ids = torch.zeros(b, m_max, dtype=torch.long)
        cond_keep = torch.zeros(b, m_max, dtype=torch.bool)
        for i, c in enumerate(conds):
            m = min(c.m, m_max)
            if m:
                cond_ids[i, :m] = torch.from_numpy(c.token_ids[:m])
                cond_keep[i, :m] = True
    return x0, x_i, x_m, mask_flags, cond_ids, cond_keep


def train(
    cfg: TrainConfig, init: Checkpoint | None = None, resume: bool = False
) -> tuple[Checkpoint, TrainLog]:
    """Run the loop; bit-reproducible for fixed (cfg, init) on one platform."""
    ds = Dataset(cfg.dataset)
    if len(ds) == 0 and cfg.steps > 0:
        raise DatasetInvalid("cannot train on an empty dataset")
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    if init is None:
        ckpt = _fresh_checkpoint(cfg, ds)
    elif cfg.regime == "lora" and init.lora is None:
        ckpt = apply_lora(init, cfg.lora_rank, cfg.lora_targets, seed=cfg.seed)
    else:
        ckpt = init
    vocab = ckpt.vocabulary() if (cfg.cond_enabled and ckpt.vocab) else None

    log = TrainLog()
    streams = StreamSet(cfg.seed, ("data", "time", "noise", "res"))
    start_step = 0
    if resume:
        if init is None or "rng_streams" not in (init.metadata or {}):
            raise DatasetInvalid("resume requested but checkpoint has no stream state")
        streams.restore(init.metadata["rng_streams"])
        start_step = int(init.metadata.get("step", 0))

    if cfg.steps <= start_step:
        return ckpt, log

    module = build_module(ckpt)
    trainables = _trainable_parameters(module, cfg.regime)
    trainable_names = [
        (n, p) for n, p in module.named_parameters() if p.requires_grad
    ]
    frozen_base = {
        n: t.detach().clone() for n, t in module.state_dict().items() if ".lora_" not in n
    } if cfg.regime == "lora" else None
    optimizer = torch.optim.Adam(trainables, lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    if resume and init.extras:
        _restore_optimizer(optimizer, trainable_names, init.extras)

    long_sides = tuple(cfg.long_side_choices or ds.config.long_side_choices)
    ds_hash = dataset_hash(ds)
    per_step = cfg.batch * cfg.grad_accum

    def metadata_for(step: int) -> dict:
        meta = dict(ckpt.metadata)
        meta.update(
            {
                "step": step,
                "seed": cfg.seed,
                "dataset_hash": ds_hash,
                "rng_streams": streams.state(),
                "train_config": cfg.to_dict(),
                "sampler_steps": cfg.sampler_steps,
            }
        )
        return meta

    def export(step: int) -> Checkpoint:
        return _export_checkpoint(
            ckpt, module, metadata_for(step), optimizer, trainable_names
        )

    for step in range(start_step, cfg.steps):
        t_start = time.perf_counter()
        long_side = int(long_sides[int(streams["res"].integers(0, len(long_sides)))])
        indices = streams["data"].integers(0, len(ds), size=per_step)
        t_vals = streams["time"].uniform(0.0, 1.0, size=per_step).astype(np.float32)

        canvases, conds = _assemble_batch(cfg, ds, ckpt, vocab, indices, long_side)
        z1_np = streams["noise"].standard_normal(
            (per_step, *canvases[0].image.shape)
        ).astype(np.float32)

        x0, x_i, x_m, mask_flags, cond_ids, cond_keep = _batch_tensors(
            canvases, conds, cfg, ckpt.model_config.max_cond
        )
        z1 = patchify(torch.from_numpy(z1_np), cfg.patch)
        t_all = torch.from_numpy(t_vals)
        x_t = (1.0 - t_all[:, None, None]) * x0 + t_all[:, None, None] * z1
        tokens = torch.cat([x_t, x_i, x_m], dim=-1)
        half_ids, local_pos, _grid = half_layout(canvases[0], ckpt.compose_config)

        loss_cfg = LossConfig(mask_weight=cfg.mask_weight)
        step_loss = 0.0
        optimizer.zero_grad(set_to_none=True)
        for micro in range(cfg.grad_accum):
            sl = slice(micro * cfg.batch, (micro + 1) * cfg.batch)
            v = module(
                tokens[sl],
                local_pos,
                half_ids,
                t_all[sl],
                None if cond_ids is None else cond_ids[sl],
                None if cond_keep is None else cond_keep[sl],
            )
            loss = fm_loss(v, x0[sl], z1[sl], loss_cfg, mask_flags[sl]) / cfg.grad_accum
            loss.backward()
            step_loss += float(loss.detach())

        if not np.isfinite(step_loss):
            if out_dir:
                from .model import save_checkpoint

                save_checkpoint(export(step), out_dir / f"diagnostic_step{step}.ckpt")
                (out_dir / f"diagnostic_step{step}.json").write_text(
                    json.dumps({"step": step, "loss": step_loss, "config": cfg.to_dict()})
                )
            raise NonFiniteLoss(f"loss became non-finite at step {step}")

        grad_sq = 0.0
        for p in trainables:
            if p.grad is not None:
                grad_sq += float(p.grad.detach().pow(2).sum())
        optimizer.step()
        log.add_step(step, step_loss, grad_sq**0.5, (time.perf_counter() - t_start) * 1e3)

        done = step + 1
        if cfg.eval_every and done % cfg.eval_every == 0 and done < cfg.steps:
            snapshot = export(done)
            acc, ned_ = _quick_eval(snapshot, ds, cfg)
            log.add_eval(done, acc, ned_)
        if out_dir and cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < cfg.steps:
            from .model import save_checkpoint

            save_checkpoint(export(done), out_dir / f"step_{done:06d}.ckpt")

    final = export(cfg.steps)
    if cfg.regime == "lora" and frozen_base is not None:
        for name, before in frozen_base.items():
            after = final.tensors[name]
            if not np.array_equal(before.numpy(), after):
                raise ShapeMismatch(f"frozen base tensor {name} changed during LoRA training")
    if out_dir:
        from .model import save_checkpoint

        save_checkpoint(final, out_dir / "final.ckpt")
        log.save_jsonl(out_dir / "train_log.jsonl")
    return final, log


def _quick_eval(ckpt: Checkpoint, ds: Dataset, cfg: TrainConfig) -> tuple[float, float]:
    from .studies import evaluate_reconstruction

    report = evaluate_reconstruction(
        ckpt,
        ds,
        n=min(cfg.eval_samples, len(ds)),
        sampler_steps=cfg.eval_sampler_steps,
        seed=cfg.seed,
    )
    return report.seq_acc, report.mean_ned


def adapt_few_shot(
    base: Checkpoint,
    dataset: str,
    rank: int = 8,
    steps: int = 600,
    lr: float = 1e-3,
    batch: int = 8,
    seed: int = 0,
    targets: tuple = ("attn", "mlp"),
    out_dir: str = "",
) -> tuple[Checkpoint, TrainLog]:
    """LoRA-adapt a frozen base to a new script pack from few samples."""
    ds = Dataset(dataset)
    if len(ds) > 1000:
        raise DatasetInvalid(f"few-shot adaptation expects <= 1000 samples, got {len(ds)}")

    base_charsets: set[str] = set()
    for spec in base.packs:
        base_charsets.update(spec["charset"])
    new_specs = []
    for p, _ in ds.config.packs:
        spec = resolve_atlas(p).spec()
        overlap = base_charsets & set(spec["charset"])
        if overlap:
            raise PackOverlap(
                f"new pack {spec['pack_id']!r} shares {len(overlap)} characters "
                "with the base training charset"
            )
        new_specs.append(spec)

    base_hash = tensor_fingerprint(base)
    adapted = apply_lora(base, rank, targets, seed=seed)
    adapted.packs = list(base.packs) + new_specs
    adapted.metadata = dict(adapted.metadata)
    adapted.metadata.update({"base_hash": base_hash, "adapted_packs": [s["pack_id"] for s in new_specs]})

    if len(ds) == 0 or steps == 0:
        return adapted, TrainLog()

    cfg = TrainConfig(
        dataset=dataset,
        steps=steps,
        lr=lr,
        batch=batch,
        regime="lora",
        lora_rank=rank,
        lora_targets=tuple(targets),
        seed=seed,
        patch=base.compose_config.patch,
        axis=base.compose_config.axis,
        concat_enabled=base.compose_config.concat_enabled,
        cond_enabled=base.model_config.cond_enabled,
        out_dir=out_dir,
    )
    final, log = train(cfg, init=adapted)
    final.metadata["base_hash"] = base_hash
    final.metadata["adapted_packs"] = [s["pack_id"] for s in new_specs]
    final.packs = list(base.packs) + new_specs
    return final, log
