"""Experiment harnesses built on the evaluation oracle.

Each harness follows the same protocol: assemble conditioned canvases from a
held-out dataset, sample with per-sample seeds, paste generated pixels into
the masked region, and score with the exact recognizer. Reports are plain
:class:`~glyphflow.evals.EvalReport` objects plus small summary dicts that
the CLI renders as text tables.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .compose import color_token, from_unit_range
from .data import Dataset, _charset_for, mask_perturb, nearest_palette_color, resolve_atlas
from .errors import AttributeUnsupported, ContaminationDetected
from .evals import EvalReport, glyph_iou, pixel_fidelity, seq_acc
from .evals import recognize_box
from .flow import SamplerConfig, sample_batch
from .glyphs import LineSpec
from .model import Checkpoint
from .pipeline import atlas_for_line, build_conditioned_canvas, checkpoint_atlases, render_template_multi
from .seeding import derive_seed, stream
from .train import TrainConfig, dataset_hash, train


def _as_dataset(ds) -> Dataset:
    return ds if isinstance(ds, Dataset) else Dataset(ds)


def _random_word(rng: np.random.Generator, chars: list, length: int) -> str:
    return "".join(chars[int(i)] for i in rng.integers(0, len(chars), size=length))


def evaluate_reconstruction(
    ckpt: Checkpoint,
    dataset,
    n: int | None = None,
    sampler_steps: int = 32,
    seed: int = 0,
    mode: str = "recon",  # "recon" keeps ground-truth words, "edit" swaps in random ones
    mask_mode: str | None = None,
    mask_k: int = 0,
    color_override: str | None = None,
    use_color_attr: bool = True,
    with_iou: bool = False,
    with_fidelity: bool = True,
    batch: int = 16,
) -> EvalReport:
    """Reconstruction / editing evaluation over the first ``n`` samples."""
    ds = _as_dataset(dataset)
    n = len(ds) if n is None else min(n, len(ds))
    atlases = checkpoint_atlases(ckpt)
    vocab = ckpt.vocabulary() if ckpt.model_config.cond_enabled else None
    report = EvalReport(
        dataset_id=f"{Path(ds.root).name}:{dataset_hash(ds)[:12]}",
        seed=seed,
        config={
            "mode": mode,
            "sampler_steps": sampler_steps,
            "mask_mode": mask_mode,
            "mask_k": mask_k,
            "n": n,
            "color_override": color_override,
            "use_color_attr": use_color_attr,
        },
    )

    pending = []  # (idx, sample, lines, canvas, cond, template)
    for idx in range(n):
        sample = ds[idx]
        if mask_mode is not None:
            sample = mask_perturb(sample, mask_mode, mask_k)
        lines = sample.line_specs()
        if mode == "edit":
            atlas = resolve_atlas(sample.pack_id)
            chars = _charset_for(ds.config, atlas)
            rng = stream(derive_seed(seed, "edit-words", idx), "words")
            lines = [
                LineSpec(text=_random_word(rng, chars, len(l.text)), box=l.box)
                for l in lines
            ]
        color = color_override
        if color is None and use_color_attr and vocab is not None and sample.lines:
            tok = color_token(sample.lines[0].color_name)
            color = sample.lines[0].color_name if tok in vocab else None
        elif color is not None and (vocab is None or color_token(color) not in vocab):
            raise AttributeUnsupported(f"checkpoint lacks the color token for {color!r}")
        canvas, cond, _prompt = build_conditioned_canvas(
            sample.scene, lines, atlases, ckpt.compose_config, vocab=vocab, color=color
        )
        template = None
        if with_iou and ckpt.compose_config.concat_enabled:
            template = render_template_multi(
                atlases, lines, sample.width, sample.height
            )
        pending.append((idx, sample, lines, canvas, cond, template))

    scfg = SamplerConfig(steps=sampler_steps, seed=seed)
    for lo in range(0, len(pending), batch):
        chunk = pending[lo : lo + batch]
        outs = sample_batch(
            ckpt,
            [c[3] for c in chunk],
            [c[4] for c in chunk],
            scfg,
            seeds=[derive_seed(seed, "noise", c[0]) for c in chunk],
        )
        for (idx, sample, lines, canvas, cond, template), gen in zip(chunk, outs):
            region = canvas.scene_region
            gen_scene = from_unit_range(
                gen[region.y : region.y2, region.x : region.x2]
            )
            scene_mask = canvas.mask[region.y : region.y2, region.x : region.x2]
            out = sample.scene.copy()
            out[scene_mask == 1] = gen_scene[scene_mask == 1]

            extra_img = {}
            if with_fidelity and mode == "recon":
                p, s = pixel_fidelity(out, sample.scene)
                extra_img = {"psnr": p, "ssim": s}
            for line_i, (line, orig) in enumerate(zip(lines, sample.lines)):
                atlas = atlas_for_line(atlases, line.text)
                pred = recognize_box(out, line.box, atlas)
                extra = dict(extra_img)
                if template is not None:
                    ink = template.image[
                        line.box.y : line.box.y2, line.box.x : line.box.x2
                    ] > 0
                    extra["iou"] = glyph_iou(out, line.box, ink)
                report.add(
                    gt=line.text, pred=pred, idx=idx, line=line_i, **extra
                )
    return report


# --- training-strategy ablation (four arms) ---------------------------------------


def _arm_train_config(
    dataset: str,
    budget: int,
    seed: int,
    base: dict,
    regime: str,
    concat_enabled: bool,
    lora_targets=("attn", "mlp", "mod", "head"),
) -> TrainConfig:
    return TrainConfig(
        dataset=dataset,
        steps=budget,
        regime=regime,
        lora_targets=lora_targets,
        concat_enabled=concat_enabled,
        cond_enabled=False,  # arms isolate the spatial-concat factor
        use_color_attr=False,
        seed=seed,
        **base,
    )


def ablate_strategies(
    train_dataset: str,
    eval_dataset: str,
    budget: int,
    seed: int = 0,
    base: dict | None = None,
    eval_n: int = 100,
    sampler_steps: int = 32,
    arm_checkpoints: dict | None = None,
) -> dict:
    """Train and score the four arms of the training-strategy ablation.

    Arms: scene-only training (``no_concat_train``), untrained model with
    concatenation (``concat_no_train``), adapter-only training
    (``concat_lora``), and full training (``concat_full``). All share seeds,
    data, and budget; conditioning stays off so the glyph channel is the only
    text signal. ``arm_checkpoints`` lets callers inject pre-trained arms.
    """
    base = dict(base or {})
    eval_ds = _as_dataset(eval_dataset)
    arm_checkpoints = dict(arm_checkpoints or {})

    def get_arm(name: str) -> Checkpoint:
        if name in arm_checkpoints:
            return arm_checkpoints[name]
        if name == "concat_no_train":
            cfg = _arm_train_config(train_dataset, 0, seed, base, "full", True)
            ckpt, _ = train(cfg)
            return ckpt
        if name == "no_concat_train":
            cfg = _arm_train_config(train_dataset, budget, seed, base, "full", False)
            return train(cfg)[0]
        if name == "concat_lora":
            cfg = _arm_train_config(train_dataset, budget, seed, base, "lora", True)
            return train(cfg)[0]
        if name == "concat_full":
            cfg = _arm_train_config(train_dataset, budget, seed, base, "full", True)
            return train(cfg)[0]
        raise KeyError(name)

    arms = {}
    reports = {}
    for name in ("no_concat_train", "concat_no_train", "concat_lora", "concat_full"):
        ckpt = get_arm(name)
        rep = evaluate_reconstruction(
            ckpt, eval_ds, n=eval_n, sampler_steps=sampler_steps, seed=seed,
            use_color_attr=False, with_fidelity=False,
        )
        arms[name] = rep.seq_acc
        reports[name] = rep

    gts = [r["gt"] for r in reports["concat_no_train"].records]
    empty_baseline = seq_acc([""] * len(gts), gts)

    ordering_ok = (
        arms["concat_full"] >= arms["concat_lora"]
        and arms["concat_lora"] > arms["concat_no_train"]
        and arms["concat_lora"] > arms["no_concat_train"]
        and arms["concat_full"] > arms["no_concat_train"]
    )
    return {
        "arms": arms,
        "empty_baseline": empty_baseline,
        "ordering_ok": ordering_ok,
        "full_minus_no_concat": arms["concat_full"] - arms["no_concat_train"],
        "reports": reports,
    }


def ablate_conditioning(
    train_dataset: str,
    eval_dataset: str,
    budget: int,
    seed: int = 0,
    base: dict | None = None,
    eval_n: int = 100,
    sampler_steps: int = 32,
    pair_checkpoints: dict | None = None,
) -> dict:
    """Matched pair: character conditioner on vs off, same budget and seeds."""
    base = dict(base or {})
    pair_checkpoints = dict(pair_checkpoints or {})
    eval_ds = _as_dataset(eval_dataset)

    def get(name: str, cond: bool) -> Checkpoint:
        if name in pair_checkpoints:
            return pair_checkpoints[name]
        cfg = TrainConfig(
            dataset=train_dataset,
            steps=budget,
            seed=seed,
            cond_enabled=cond,
            use_color_attr=cond,
            **base,
        )
        return train(cfg)[0]

    results = {}
    for name, cond in (("with_cond", True), ("without_cond", False)):
        ckpt = get(name, cond)
        rep = evaluate_reconstruction(
            ckpt, eval_ds, n=eval_n, sampler_steps=sampler_steps, seed=seed,
            with_fidelity=False,
        )
        results[name] = rep.seq_acc
    results["delta_points"] = abs(results["with_cond"] - results["without_cond"]) * 100
    results["off_over_on"] = (
        results["without_cond"] / results["with_cond"] if results["with_cond"] > 0 else 1.0
    )
    return results


# --- zero-shot, mask sensitivity, color control -------------------------------------


def zero_shot_eval(
    ckpt: Checkpoint,
    train_dataset,
    zero_shot_dataset,
    held_out_chars,
    seed: int = 0,
    eval_n: int = 100,
    sampler_steps: int = 32,
) -> dict:
    """Reconstruction over held-out characters plus glyph-shape IoU.

    Fails with ContaminationDetected when the training manifest contains any
    held-out character.
    """
    held = set(held_out_chars)
    train_ds = _as_dataset(train_dataset)
    seen = train_ds.charset_in_manifest()
    overlap = held & seen
    if overlap:
        raise ContaminationDetected(
            f"held-out characters {sorted(overlap)!r} appear in the training manifest"
        )
    report = evaluate_reconstruction(
        ckpt,
        zero_shot_dataset,
        n=eval_n,
        sampler_steps=sampler_steps,
        seed=seed,
        with_iou=True,
        with_fidelity=False,
    )
    eval_chars = set()
    for rec in report.records:
        eval_chars.update(rec["gt"])
    if not eval_chars <= held:
        raise ContaminationDetected(
            f"zero-shot dataset contains non-held-out characters {sorted(eval_chars - held)!r}"
        )
    return {
        "seq_acc": report.seq_acc,
        "mean_ned": report.mean_ned,
        "mean_iou": report.mean_of("iou"),
        "report": report,
    }


def mask_sensitivity_eval(
    ckpt: Checkpoint,
    dataset,
    seed: int = 0,
    eval_n: int = 100,
    sampler_steps: int = 32,
    crop_px: int = 2,
    pad_px: int = 4,
) -> dict:
    """SeqAcc under tight, crop-into, and padded masks."""
    ds = _as_dataset(dataset)
    out = {}
    for mode, k in (("tight", 0), ("crop_into", crop_px), ("pad", pad_px)):
        rep = evaluate_reconstruction(
            ckpt, ds, n=eval_n, sampler_steps=sampler_steps, seed=seed,
            mask_mode=mode, mask_k=k, with_fidelity=False,
        )
        out[mode] = rep.seq_acc
        out[f"{mode}_report"] = rep
    out["ordering_ok"] = out["pad"] >= out["tight"] >= out["crop_into"]
    return out


def color_control_eval(
    ckpt: Checkpoint,
    dataset,
    colors: tuple[str, ...],
    n_per_color: int = 25,
    seed: int = 0,
    sampler_steps: int = 32,
    include_uncond: bool = True,
) -> dict:
    """Measure whether requested color tokens steer generated stroke colors.

    For each requested color the mean RGB over template-ink pixels of the
    generated text is snapped to the nearest palette entry; accuracy is the
    fraction of lines whose snapped color equals the request. The
    unconditioned pass repeats the protocol without the attribute token.
    """
    ds = _as_dataset(dataset)
    vocab = ckpt.vocabulary()
    if vocab is None:
        raise AttributeUnsupported("checkpoint was trained without conditioning")
    for c in colors:
        if color_token(c) not in vocab:
            raise AttributeUnsupported(f"color {c!r} is outside the vocabulary")
    atlases = checkpoint_atlases(ckpt)

    def measure(color_request: str | None, offset: int) -> dict:
        hits, total = 0, 0
        measured = []
        pending = []
        for j in range(n_per_color):
            idx = (offset + j) % len(ds)
            sample = ds[idx]
            lines = sample.line_specs()
            canvas, cond, _ = build_conditioned_canvas(
                sample.scene, lines, atlases, ckpt.compose_config,
                vocab=vocab, color=color_request,
            )
            template = render_template_multi(atlases, lines, sample.width, sample.height)
            pending.append((idx, sample, lines, canvas, cond, template))
        scfg = SamplerConfig(steps=sampler_steps, seed=seed)
        for lo in range(0, len(pending), 16):
            chunk = pending[lo : lo + 16]
            outs = sample_batch(
                ckpt,
                [c[3] for c in chunk],
                [c[4] for c in chunk],
                scfg,
                seeds=[derive_seed(seed, "color", color_request or "-", c[0]) for c in chunk],
            )
            for (idx, sample, lines, canvas, cond, template), gen in zip(chunk, outs):
                region = canvas.scene_region
                gen_scene = from_unit_range(gen[region.y : region.y2, region.x : region.x2])
                for line in lines:
                    b = line.box
                    ink = template.image[b.y : b.y2, b.x : b.x2] > 0
                    if not ink.any():
                        continue
                    mean_rgb = gen_scene[b.y : b.y2, b.x : b.x2][ink].mean(axis=0)
                    name = nearest_palette_color(mean_rgb)
                    measured.append(name)
                    total += 1
                    if color_request is not None and name == color_request:
                        hits += 1
        return {"accuracy": hits / total if total else 0.0, "measured": measured}

    per_color = {}
    for k, color in enumerate(colors):
        per_color[color] = measure(color, offset=k * n_per_color)
    result = {
        "per_color": {c: per_color[c]["accuracy"] for c in colors},
        "mean_accuracy": float(np.mean([per_color[c]["accuracy"] for c in colors])),
    }
    if include_uncond:
        uncond_hits = []
        histogram: dict[str, int] = {}
        for k, color in enumerate(colors):
            m = measure(None, offset=k * n_per_color)
            agree = sum(1 for name in m["measured"] if name == color)
            uncond_hits.append(agree / len(m["measured"]) if m["measured"] else 0.0)
            for name in m["measured"]:
                histogram[name] = histogram.get(name, 0) + 1
        result["uncond_requested_agreement"] = float(np.mean(uncond_hits))
        result["uncond_histogram"] = histogram
    return result


# --- text table rendering -------------------------------------------------------------


def render_table(rows: list[dict], columns: list[str], title: str = "") -> str:
    widths = {c: max(len(c), *(len(str(r.get(c, ""))) for r in rows)) for c in columns}
    lines = []
    if title:
        lines.append(title)
    header = " | ".join(c.ljust(widths[c]) for c in columns)
    lines.append(header)
    lines.append("-+-".join("-" * widths[c] for c in columns))
    for r in rows:
        lines.append(" | ".join(str(r.get(c, "")).ljust(widths[c]) for c in columns))
    return "\n".join(lines)


def save_report(report_or_dict, path) -> None:
    payload = report_or_dict
    if isinstance(payload, EvalReport):
        payload = payload.to_dict()
    else:
        payload = _strip_reports(payload)
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2))


def _strip_reports(d):
    if isinstance(d, dict):
        return {
            k: (v.to_dict() if isinstance(v, EvalReport) else _strip_reports(v))
            for k, v in d.items()
        }
    return d
