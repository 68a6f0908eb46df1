import json

import numpy as np
import pytest
from PIL import Image

from glyphflow.cli import build_parser, main
from glyphflow.model import save_checkpoint

from conftest import tiny_data_config


def run_cli(*argv) -> int:
    return main(list(argv))


def test_every_subcommand_documents_help(capsys):
    parser = build_parser()
    for cmd in ("gen-data", "train", "adapt", "edit", "eval", "ablate", "serve"):
        with pytest.raises(SystemExit) as exc:
            parser.parse_args([cmd, "--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        assert "--help" not in ("",)  # help text rendered
        assert "usage" in out.lower()


def test_usage_error_exits_2():
    parser = build_parser()
    with pytest.raises(SystemExit) as exc:
        parser.parse_args(["gen-data"])  # missing required flags
    assert exc.value.code == 2


def test_gen_data_deterministic_manifests(tmp_path, capsys):
    cfg_path = tmp_path / "data.json"
    cfg_path.write_text(json.dumps(tiny_data_config().to_dict()))
    assert run_cli("gen-data", "--config", str(cfg_path), "--n", "4",
                   "--seed", "1", "-o", str(tmp_path / "a")) == 0
    assert run_cli("gen-data", "--config", str(cfg_path), "--n", "4",
                   "--seed", "1", "-o", str(tmp_path / "b")) == 0
    ma = json.loads((tmp_path / "a" / "run_manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "run_manifest.json").read_text())
    assert ma["artifacts"]["manifest.jsonl"] == mb["artifacts"]["manifest.jsonl"]
    assert ma["effective_config"]["seed"] == 1


def test_gen_data_set_overrides(tmp_path):
    cfg_path = tmp_path / "data.json"
    cfg_path.write_text(json.dumps(tiny_data_config().to_dict()))
    assert run_cli("gen-data", "--config", str(cfg_path), "--n", "2",
                   "--set", "lines_per_image=[1,1]", "--set", "seed=9",
                   "-o", str(tmp_path / "d")) == 0
    meta = json.loads((tmp_path / "d" / "dataset.json").read_text())
    assert meta["config"]["lines_per_image"] == [1, 1]
    assert meta["config"]["seed"] == 9


def test_train_edit_eval_roundtrip(tmp_path, capsys):
    # dataset
    cfg_path = tmp_path / "data.json"
    cfg_path.write_text(json.dumps(tiny_data_config().to_dict()))
    assert run_cli("gen-data", "--config", str(cfg_path), "--n", "4", "-o", str(tmp_path / "d")) == 0

    # train a micro model
    train_cfg = {
        "dataset": str(tmp_path / "d"),
        "steps": 2,
        "batch": 2,
        "lr": 0.001,
        "patch": 16,
        "model": {"dim": 32, "depth": 1, "heads": 2, "pos_rows": 4, "pos_cols": 4,
                  "max_tokens": 256},
        "seed": 3,
    }
    tc_path = tmp_path / "train.json"
    tc_path.write_text(json.dumps(train_cfg))
    assert run_cli("train", "--config", str(tc_path), "-o", str(tmp_path / "run")) == 0
    ckpt_path = tmp_path / "run" / "final.ckpt"
    assert ckpt_path.exists()
    manifest = json.loads((tmp_path / "run" / "run_manifest.json").read_text())
    assert "final.ckpt" in manifest["artifacts"]

    # edit: pixels outside the padded box unchanged
    scene = np.random.default_rng(0).integers(90, 170, (64, 64, 3)).astype(np.uint8)
    img_path = tmp_path / "scene.png"
    Image.fromarray(scene, mode="RGB").save(img_path)
    out_path = tmp_path / "edited.png"
    assert run_cli("edit", "--image", str(img_path), "--line", "10,20,24,12:HI",
                   "--ckpt", str(ckpt_path), "--seed", "5", "--steps", "3",
                   "--pad", "2", "-o", str(out_path)) == 0
    edited = np.asarray(Image.open(out_path))
    outside = np.ones((64, 64), dtype=bool)
    outside[18:34, 8:36] = False  # padded box
    assert np.array_equal(edited[outside], scene[outside])

    # eval produces a report
    report_path = tmp_path / "report.json"
    assert run_cli("eval", "--ckpt", str(ckpt_path), "--dataset", str(tmp_path / "d"),
                   "--n", "2", "--steps", "2", "--report", str(report_path)) == 0
    report = json.loads(report_path.read_text())
    assert "aggregates" in report
    out = capsys.readouterr().out
    assert "seq_acc" in out


def test_edit_bad_line_syntax(tmp_path):
    with pytest.raises(SystemExit):
        run_cli("edit", "--image", "x.png", "--line", "nonsense",
                "--ckpt", "c", "-o", "o.png")


def test_runtime_error_exits_1_with_json_line(tmp_path, capsys, tiny_checkpoint):
    ckpt_path = tmp_path / "t.ckpt"
    save_checkpoint(tiny_checkpoint, ckpt_path)
    scene = np.zeros((32, 32, 3), dtype=np.uint8)
    img_path = tmp_path / "s.png"
    Image.fromarray(scene, mode="RGB").save(img_path)
    code = run_cli("edit", "--image", str(img_path), "--line", "30,30,20,12:HI",
                   "--ckpt", str(ckpt_path), "-o", str(tmp_path / "o.png"))
    assert code == 1
    err = capsys.readouterr().err.strip().splitlines()[-1]
    payload = json.loads(err)
    assert payload["error"]["code"] == "box_out_of_scene"


def test_ablate_mask_kind_renders_table(tmp_path, capsys, tiny_checkpoint):
    cfg_path = tmp_path / "data.json"
    cfg_path.write_text(json.dumps(tiny_data_config().to_dict()))
    run_cli("gen-data", "--config", str(cfg_path), "--n", "2", "-o", str(tmp_path / "d"))
    ckpt_path = tmp_path / "t.ckpt"
    save_checkpoint(tiny_checkpoint, ckpt_path)
    assert run_cli("ablate", "mask", "--ckpt", str(ckpt_path),
                   "--eval-dataset", str(tmp_path / "d"), "--eval-n", "2",
                   "--steps", "2", "-o", str(tmp_path / "ab")) == 0
    out = capsys.readouterr().out
    assert "mask sensitivity" in out
    assert "tight" in out
    assert (tmp_path / "ab" / "mask.json").exists()
