"""Command-line entrypoint.

Subcommands mirror the library surface: gen-data, train, adapt, edit, eval,
ablate, serve. Config files are JSON; ``--set key=value`` overrides apply on
top (dotted keys reach into nested dicts). Every artifact-producing command
writes a run-manifest JSON recording the command, the effective config, the
seeds, and sha256 hashes of produced artifacts, so a run can be reproduced
from its manifest alone.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__, presets
from .data import DataConfig, Dataset, gen_dataset
from .errors import GlyphFlowError
from .glyphs import Box, LineSpec
from .model import load_checkpoint, save_checkpoint
from .pipeline import EditRequest, edit
from .studies import (
    ablate_conditioning,
    ablate_strategies,
    color_control_eval,
    evaluate_reconstruction,
    mask_sensitivity_eval,
    render_table,
    save_report,
    zero_shot_eval,
)
from .train import TrainConfig, adapt_few_shot, train

RUN_MANIFEST_VERSION = 1


def _parse_override(raw: str) -> tuple[str, object]:
    if "=" not in raw:
        raise SystemExit(f"--set expects key=value, got {raw!r}")
    key, value = raw.split("=", 1)
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def _apply_overrides(config: dict, overrides: list[str]) -> dict:
    out = json.loads(json.dumps(config))  # deep copy
    for raw in overrides or []:
        key, value = _parse_override(raw)
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return out


def _load_config(path: str | None, preset: dict | None, overrides: list[str]) -> dict:
    config: dict = dict(preset or {})
    if path:
        config.update(json.loads(Path(path).read_text()))
    return _apply_overrides(config, overrides)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_run_manifest(out_dir: Path, command: str, config: dict, seeds: dict, artifacts: list[Path]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": RUN_MANIFEST_VERSION,
        "tool_version": __version__,
        "command": command,
        "argv": sys.argv[1:],
        "effective_config": config,
        "seeds": seeds,
        "artifacts": {
            str(p.relative_to(out_dir)): _sha256(p) for p in artifacts if p.is_file()
        },
        "written_at_unix": int(time.time()),
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2))


def _parse_line(raw: str) -> LineSpec:
    """Mini-syntax "x,y,w,h:text" for shell ergonomics."""
    geometry, sep, text = raw.partition(":")
    if not sep or not text:
        raise SystemExit(f"--line expects 'x,y,w,h:text', got {raw!r}")
    try:
        x, y, w, h = (int(v) for v in geometry.split(","))
    except ValueError:
        raise SystemExit(f"--line geometry must be four integers, got {geometry!r}") from None
    return LineSpec(text=text, box=Box(x, y, w, h))


# --- subcommand handlers ----------------------------------------------------------


def cmd_gen_data(args) -> int:
    preset = presets.DATA_PRESETS[args.preset]().to_dict() if args.preset else DataConfig().to_dict()
    config = _load_config(args.config, preset, args.set)
    if args.seed is not None:
        config["seed"] = args.seed
    cfg = DataConfig.from_dict(config)
    out = Path(args.out)
    gen_dataset(cfg, args.n, out)
    artifacts = [out / "manifest.jsonl", out / "dataset.json"]
    _write_run_manifest(out, "gen-data", cfg.to_dict(), {"seed": cfg.seed}, artifacts)
    print(f"wrote {args.n} samples to {out}")
    return 0


def cmd_train(args) -> int:
    preset = {}
    if args.preset:
        preset = presets.TRAIN_PRESETS[args.preset](args.dataset or "").to_dict()
    config = _load_config(args.config, preset, args.set)
    if args.dataset:
        config["dataset"] = args.dataset
    if args.seed is not None:
        config["seed"] = args.seed
    config["out_dir"] = args.out
    cfg = TrainConfig.from_dict(config)
    init = load_checkpoint(args.init) if args.init else None
    ckpt, log = train(cfg, init=init, resume=args.resume)
    out = Path(args.out)
    _write_run_manifest(
        out,
        "train",
        cfg.to_dict(),
        {"seed": cfg.seed},
        [out / "final.ckpt", out / "train_log.jsonl"],
    )
    last = log.losses()[-10:]
    print(f"trained {cfg.steps} steps; final loss {np.mean(last):.4f}" if last else "no steps run")
    print(f"checkpoint: {out / 'final.ckpt'}")
    return 0


def cmd_adapt(args) -> int:
    base = load_checkpoint(args.base)
    out = Path(args.out)
    ckpt, _log = adapt_few_shot(
        base,
        args.dataset,
        rank=args.rank,
        steps=args.steps,
        lr=args.lr,
        batch=args.batch,
        seed=args.seed,
        out_dir=str(out),
    )
    save_checkpoint(ckpt, out / "final.ckpt")
    _write_run_manifest(
        out,
        "adapt",
        {
            "base": args.base,
            "dataset": args.dataset,
            "rank": args.rank,
            "steps": args.steps,
            "lr": args.lr,
            "batch": args.batch,
        },
        {"seed": args.seed},
        [out / "final.ckpt"],
    )
    print(f"adapter checkpoint: {out / 'final.ckpt'}")
    return 0


def cmd_edit(args) -> int:
    lines = [_parse_line(raw) for raw in args.line]
    scene = np.asarray(Image.open(args.image).convert("RGB"))
    ckpt = load_checkpoint(args.ckpt)
    result = edit(
        EditRequest(
            scene=scene,
            lines=lines,
            steps=args.steps,
            seed=args.seed,
            color=args.color,
            pad_px=args.pad,
        ),
        ckpt,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(result.image, mode="RGB").save(out)
    _write_run_manifest(
        out.parent,
        "edit",
        {
            "image": args.image,
            "lines": [f"{l.box.x},{l.box.y},{l.box.w},{l.box.h}:{l.text}" for l in lines],
            "ckpt": args.ckpt,
            "steps": args.steps,
            "color": args.color,
            "pad": args.pad,
        },
        {"seed": args.seed},
        [out],
    )
    print(f"edited image: {out} ({result.elapsed_ms:.0f} ms)")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    report = evaluate_reconstruction(
        ckpt,
        args.dataset,
        n=args.n,
        sampler_steps=args.steps,
        seed=args.seed,
        mode=args.mode,
    )
    agg = report.aggregates()
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(report.to_json())
    _write_run_manifest(
        out.parent,
        "eval",
        {"ckpt": args.ckpt, "dataset": args.dataset, "mode": args.mode, "n": args.n,
         "sampler_steps": args.steps},
        {"seed": args.seed},
        [out],
    )
    print(render_table([{"metric": k, "value": round(v, 4) if isinstance(v, float) else v}
                        for k, v in agg.items()], ["metric", "value"]))
    return 0


def cmd_ablate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    common = {"seed": args.seed, "eval_n": args.eval_n, "sampler_steps": args.steps}
    if args.kind == "strategies":
        result = ablate_strategies(args.train_dataset, args.eval_dataset, args.budget,
                                   base=json.loads(args.base), **common)
        result.pop("reports", None)
        rows = [{"arm": k, "seq_acc": round(v, 4)} for k, v in result["arms"].items()]
        rows.append({"arm": "(empty baseline)", "seq_acc": round(result["empty_baseline"], 4)})
        print(render_table(rows, ["arm", "seq_acc"], title="training strategies"))
        print(f"ordering_ok={result['ordering_ok']} "
              f"full_minus_no_concat={result['full_minus_no_concat']*100:.1f}pts")
    elif args.kind == "conditioning":
        result = ablate_conditioning(args.train_dataset, args.eval_dataset, args.budget,
                                     base=json.loads(args.base), **common)
        print(render_table([{"variant": k, "value": round(v, 4)}
                            for k, v in result.items()], ["variant", "value"],
                           title="conditioning ablation"))
    elif args.kind == "mask":
        ckpt = load_checkpoint(args.ckpt)
        result = mask_sensitivity_eval(ckpt, args.eval_dataset, seed=args.seed, eval_n=args.eval_n)
        result = {k: v for k, v in result.items() if not k.endswith("_report")}
        print(render_table([{"mode": k, "seq_acc": round(v, 4) if isinstance(v, float) else v}
                            for k, v in result.items()], ["mode", "seq_acc"],
                           title="mask sensitivity"))
    elif args.kind == "zero-shot":
        ckpt = load_checkpoint(args.ckpt)
        result = zero_shot_eval(ckpt, args.train_dataset, args.eval_dataset,
                                tuple(args.held_out), seed=args.seed, eval_n=args.eval_n)
        result.pop("report", None)
        print(render_table([{"metric": k, "value": round(v, 4)}
                            for k, v in result.items()], ["metric", "value"],
                           title="zero-shot glyphs"))
    elif args.kind == "color":
        ckpt = load_checkpoint(args.ckpt)
        result = color_control_eval(ckpt, args.eval_dataset, tuple(args.colors),
                                    n_per_color=args.eval_n, seed=args.seed)
        print(json.dumps(result, indent=2, sort_keys=True))
    else:
        raise SystemExit(f"unknown ablation kind {args.kind!r}")
    save_report(result, out / f"{args.kind}.json")
    _write_run_manifest(out, f"ablate-{args.kind}", vars(args) | {"func": None},
                        {"seed": args.seed}, [out / f"{args.kind}.json"])
    return 0


def cmd_serve(args) -> int:
    from .service import run_service

    run_service(
        checkpoint_dir=args.checkpoints,
        dataset_dir=args.dataset,
        host=args.host,
        port=args.port,
        max_image_side=args.max_image_side,
    )
    return 0


# --- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="glyphflow",
        description="Glyph-template-conditioned scene-text inpainting toolkit.",
    )
    p.add_argument("--version", action="version", version=f"glyphflow {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic scene-text dataset")
    g.add_argument("--preset", choices=sorted(presets.DATA_PRESETS), help="named data preset")
    g.add_argument("--config", help="JSON DataConfig file")
    g.add_argument("--set", action="append", metavar="KEY=VALUE", help="override config values")
    g.add_argument("--n", type=int, required=True, help="number of samples")
    g.add_argument("--seed", type=int, help="override the config seed")
    g.add_argument("-o", "--out", required=True, help="output dataset directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model (full-parameter or LoRA regime)")
    t.add_argument("--preset", choices=sorted(presets.TRAIN_PRESETS), help="named train preset")
    t.add_argument("--config", help="JSON TrainConfig file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override config values")
    t.add_argument("--dataset", help="dataset directory (overrides config)")
    t.add_argument("--init", help="checkpoint to start from")
    t.add_argument("--resume", action="store_true", help="resume the init checkpoint's run")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("-o", "--out", required=True, help="output run directory")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("adapt", help="few-shot LoRA adaptation to a new script pack")
    a.add_argument("--base", required=True, help="base checkpoint path")
    a.add_argument("--dataset", required=True, help="new-pack dataset directory (<= 1000 samples)")
    a.add_argument("--rank", type=int, default=8)
    a.add_argument("--steps", type=int, default=700)
    a.add_argument("--lr", type=float, default=1e-3)
    a.add_argument("--batch", type=int, default=8)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("-o", "--out", required=True)
    a.set_defaults(func=cmd_adapt)

    e = sub.add_parser("edit", help="render text into masked regions of an image")
    e.add_argument("--image", required=True, help="input RGB PNG")
    e.add_argument("--line", action="append", required=True, metavar="X,Y,W,H:TEXT",
                   help="line spec; repeatable")
    e.add_argument("--ckpt", required=True, help="checkpoint path")
    e.add_argument("--steps", type=int, default=None, help="sampler steps (default: checkpoint's)")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--color", default=None, help="text color attribute, e.g. navy")
    e.add_argument("--pad", type=int, default=2, help="mask padding in px (0 = tight)")
    e.add_argument("-o", "--out", required=True, help="output PNG path")
    e.set_defaults(func=cmd_edit)

    v = sub.add_parser("eval", help="reconstruction / editing evaluation")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--dataset", required=True)
    v.add_argument("--mode", choices=("recon", "edit"), default="recon")
    v.add_argument("--n", type=int, default=None)
    v.add_argument("--steps", type=int, default=32, help="sampler steps")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--report", required=True, help="output report JSON path")
    v.set_defaults(func=cmd_eval)

    b = sub.add_parser("ablate", help="run an ablation or sensitivity study")
    b.add_argument("kind", choices=("strategies", "conditioning", "mask", "zero-shot", "color"))
    b.add_argument("--train-dataset", help="training dataset directory")
    b.add_argument("--eval-dataset", required=True)
    b.add_argument("--budget", type=int, default=1500, help="training steps per arm")
    b.add_argument("--base", default="{}", help="JSON TrainConfig overrides shared by arms")
    b.add_argument("--ckpt", help="checkpoint (mask / zero-shot / color kinds)")
    b.add_argument("--held-out", nargs="*", default=[], help="held-out characters (zero-shot)")
    b.add_argument("--colors", nargs="*", default=["navy", "maroon", "white"])
    b.add_argument("--eval-n", type=int, default=100)
    b.add_argument("--steps", type=int, default=32, help="sampler steps")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("-o", "--out", required=True)
    b.set_defaults(func=cmd_ablate)

    s = sub.add_parser("serve", help="start the HTTP inference service")
    s.add_argument("--checkpoints", required=True, help="directory of .ckpt files")
    s.add_argument("--dataset", default=None, help="dataset directory for /api/samples")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8765)
    s.add_argument("--max-image-side", type=int, default=1024)
    s.set_defaults(func=cmd_serve)

    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except GlyphFlowError as e:
        print(json.dumps({"error": {"code": e.code, "message": str(e)}}), file=sys.stderr)
        return 1
    except OSError as e:
        print(json.dumps({"error": {"code": "io_failure", "message": str(e)}}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
