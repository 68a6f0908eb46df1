import numpy as np
import pytest
import torch

from glyphflow.compose import ComposeConfig, encode_words
from glyphflow.errors import NoAdapters, NonFiniteParameters, ShapeMismatch, TargetMissing
from glyphflow.model import (
    ModelConfig,
    apply_lora,
    build_module,
    forward,
    init_checkpoint,
    load_checkpoint,
    merge_lora,
    param_count,
    save_checkpoint,
    unmerge_lora,
)

from conftest import tiny_model_config


def _token_batch(ckpt, latin_atlas, tiny_vocab, lines_text="HI", h=64, w=64, seed=0):
    from glyphflow.compose import build_canvas, build_mask, tokenize
    from glyphflow.glyphs import Box, LineSpec, render_template

    scene = np.full((h, w, 3), 120, dtype=np.uint8)
    lines = [LineSpec(lines_text, Box(8, 8, 24, 12))]
    tpl = render_template(latin_atlas, lines, w, h)
    canvas = build_canvas(tpl, scene, ckpt.compose_config)
    build_mask(canvas, lines)
    g = torch.Generator().manual_seed(seed)
    x_t = torch.randn(2 * h, w, 3, generator=g)
    return canvas, tokenize(canvas, x_t, ckpt.compose_config)


def test_forward_output_shape(tiny_checkpoint, latin_atlas, tiny_vocab):
    _, batch = _token_batch(tiny_checkpoint, latin_atlas, tiny_vocab)
    cond = encode_words(["HI"], None, tiny_vocab)
    v = forward(batch, 0.5, cond, tiny_checkpoint)
    assert v.v.shape == (batch.n, 16 * 16 * 3)
    assert v.image().shape == (128, 64, 3)


def test_forward_patch8_shape_contract(latin_atlas, tiny_vocab):
    mcfg = tiny_model_config(tiny_vocab, patch=8, max_tokens=1024, pos_rows=8, pos_cols=8)
    ccfg = ComposeConfig(axis="vertical", patch=8)
    ckpt = init_checkpoint(mcfg, ccfg, tiny_vocab, packs=[latin_atlas.spec()], seed=0)
    _, batch = _token_batch(ckpt, latin_atlas, tiny_vocab)
    v = forward(batch, 0.1, None, ckpt)
    assert v.v.shape == (batch.n, 192)  # patch 8, 3 channels


def test_forward_deterministic(tiny_checkpoint, latin_atlas, tiny_vocab):
    _, batch = _token_batch(tiny_checkpoint, latin_atlas, tiny_vocab)
    cond = encode_words(["HI"], {"color": "navy"}, tiny_vocab)
    a = forward(batch, 0.3, cond, tiny_checkpoint)
    b = forward(batch, 0.3, cond, tiny_checkpoint)
    assert torch.equal(a.v, b.v)


def test_forward_conditioning_position_sensitivity(latin_atlas, tiny_vocab):
    # non-zero weights everywhere so conditioning actually reaches the output
    mcfg = tiny_model_config(tiny_vocab)
    ccfg = ComposeConfig(axis="vertical", patch=16)
    ckpt = init_checkpoint(mcfg, ccfg, tiny_vocab, packs=[latin_atlas.spec()], seed=1)
    rng = np.random.default_rng(0)
    for name in ckpt.tensors:
        ckpt.tensors[name] = rng.normal(0, 0.03, ckpt.tensors[name].shape).astype(np.float32)
    ckpt.invalidate()
    _, batch = _token_batch(ckpt, latin_atlas, tiny_vocab)
    ab = encode_words(["AB"], None, tiny_vocab)
    ba = encode_words(["BA"], None, tiny_vocab)
    va = forward(batch, 0.5, ab, ckpt)
    vb = forward(batch, 0.5, ba, ckpt)
    assert not torch.equal(va.v, vb.v)


def test_forward_rejects_bad_t(tiny_checkpoint, latin_atlas, tiny_vocab):
    _, batch = _token_batch(tiny_checkpoint, latin_atlas, tiny_vocab)
    with pytest.raises(ValueError):
        forward(batch, 1.5, None, tiny_checkpoint)


def test_forward_rejects_nonfinite_params(latin_atlas, tiny_vocab):
    mcfg = tiny_model_config(tiny_vocab)
    ccfg = ComposeConfig(axis="vertical", patch=16)
    ckpt = init_checkpoint(mcfg, ccfg, tiny_vocab, packs=[latin_atlas.spec()], seed=2)
    ckpt.tensors["head.weight"][0, 0] = np.nan
    _, batch = _token_batch(ckpt, latin_atlas, tiny_vocab)
    with pytest.raises(NonFiniteParameters):
        forward(batch, 0.5, None, ckpt)


def test_token_count_flexibility(tiny_checkpoint, latin_atlas, tiny_vocab):
    # same parameters run on multiple resolutions
    for h, w in [(64, 64), (48, 48), (64, 48)]:
        _, batch = _token_batch(tiny_checkpoint, latin_atlas, tiny_vocab, h=h, w=w)
        v = forward(batch, 0.5, None, tiny_checkpoint)
        assert v.v.shape[0] == batch.n
        assert torch.isfinite(v.v).all()


def test_max_tokens_enforced(latin_atlas, tiny_vocab):
    mcfg = tiny_model_config(tiny_vocab, max_tokens=8)
    ccfg = ComposeConfig(axis="vertical", patch=16)
    ckpt = init_checkpoint(mcfg, ccfg, tiny_vocab, packs=[latin_atlas.spec()], seed=0)
    _, batch = _token_batch(ckpt, latin_atlas, tiny_vocab)
    with pytest.raises(ShapeMismatch):
        forward(batch, 0.5, None, ckpt)


def test_param_count_matches_enumeration(tiny_checkpoint):
    total = sum(arr.size for arr in tiny_checkpoint.tensors.values())
    assert param_count(tiny_checkpoint.model_config) == total


def test_param_count_depth_zero(tiny_vocab):
    cfg0 = tiny_model_config(tiny_vocab, depth=0)
    cfg1 = tiny_model_config(tiny_vocab, depth=1)
    cfg2 = tiny_model_config(tiny_vocab, depth=2)
    per_block = param_count(cfg1) - param_count(cfg0)
    assert param_count(cfg2) - param_count(cfg1) == per_block  # linear in depth
    assert param_count(cfg2) - param_count(cfg0) == 2 * per_block


def test_init_deterministic(latin_atlas, tiny_vocab):
    mcfg = tiny_model_config(tiny_vocab)
    ccfg = ComposeConfig(axis="vertical", patch=16)
    a = init_checkpoint(mcfg, ccfg, tiny_vocab, packs=[latin_atlas.spec()], seed=5)
    b = init_checkpoint(mcfg, ccfg, tiny_vocab, packs=[latin_atlas.spec()], seed=5)
    for name in a.tensors:
        assert np.array_equal(a.tensors[name], b.tensors[name])


def test_zero_init_surfaces(tiny_checkpoint):
    assert not tiny_checkpoint.tensors["head.weight"].any()
    assert not tiny_checkpoint.tensors["skip_gate.weight"].any()
    assert not tiny_checkpoint.tensors["blocks.0.modulation.weight"].any()
    assert not tiny_checkpoint.tensors["final_modulation.weight"].any()
    assert tiny_checkpoint.tensors["embed.weight"].any()


# --- LoRA -----------------------------------------------------------------------


def test_lora_neutral_at_init(tiny_checkpoint, latin_atlas, tiny_vocab):
    _, batch = _token_batch(tiny_checkpoint, latin_atlas, tiny_vocab)
    cond = encode_words(["HI"], None, tiny_vocab)
    base_v = forward(batch, 0.5, cond, tiny_checkpoint)
    adapted = apply_lora(tiny_checkpoint, rank=4, targets=("attn", "mlp"), seed=1)
    lora_v = forward(batch, 0.5, cond, adapted)
    assert torch.equal(base_v.v, lora_v.v)


def test_lora_trainable_count(tiny_checkpoint):
    adapted = apply_lora(tiny_checkpoint, rank=4, targets=("attn",), seed=0)
    d = tiny_checkpoint.model_config.dim
    expected = tiny_checkpoint.model_config.depth * 4 * 4 * (d + d)  # q,k,v,o per block
    assert adapted.lora.trainable_parameters() == expected


def test_lora_target_missing(tiny_checkpoint):
    with pytest.raises(TargetMissing):
        apply_lora(tiny_checkpoint, rank=2, targets=("nonsense",))


def test_lora_merge_zero_adapters_is_identity(tiny_checkpoint):
    adapted = apply_lora(tiny_checkpoint, rank=4, seed=3)
    merged = merge_lora(adapted)
    for name in tiny_checkpoint.tensors:
        assert np.array_equal(merged.tensors[name], tiny_checkpoint.tensors[name])


def test_lora_merge_forward_close(tiny_checkpoint, latin_atlas, tiny_vocab):
    adapted = apply_lora(tiny_checkpoint, rank=4, seed=3)
    rng = np.random.default_rng(7)
    for path, ab in adapted.lora.tensors.items():
        ab["B"][:] = rng.normal(0, 0.05, ab["B"].shape).astype(np.float32)
    _, batch = _token_batch(tiny_checkpoint, latin_atlas, tiny_vocab)
    va = forward(batch, 0.5, None, adapted)
    merged = merge_lora(adapted)
    vm = forward(batch, 0.5, None, merged)
    assert float((va.v - vm.v).abs().max()) < 1e-5


def test_lora_merge_unmerge_roundtrip(tiny_checkpoint):
    adapted = apply_lora(tiny_checkpoint, rank=4, seed=3)
    rng = np.random.default_rng(8)
    for path, ab in adapted.lora.tensors.items():
        ab["B"][:] = rng.normal(0, 0.05, ab["B"].shape).astype(np.float32)
    merged = merge_lora(adapted)
    restored = unmerge_lora(merged, adapted.lora)
    for name in adapted.tensors:
        assert np.abs(restored.tensors[name] - adapted.tensors[name]).max() < 1e-6


def test_double_merge_raises(tiny_checkpoint):
    merged = merge_lora(apply_lora(tiny_checkpoint, rank=2, seed=0))
    with pytest.raises(NoAdapters):
        merge_lora(merged)


# --- checkpoint io ---------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path, tiny_checkpoint):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_checkpoint, path)
    loaded = load_checkpoint(path)
    assert loaded.model_config == tiny_checkpoint.model_config
    assert loaded.compose_config == tiny_checkpoint.compose_config
    assert loaded.vocab == tiny_checkpoint.vocab
    assert loaded.packs == tiny_checkpoint.packs
    for name in tiny_checkpoint.tensors:
        assert np.array_equal(loaded.tensors[name], tiny_checkpoint.tensors[name])


def test_checkpoint_roundtrip_with_lora(tmp_path, tiny_checkpoint):
    adapted = apply_lora(tiny_checkpoint, rank=4, seed=2)
    path = tmp_path / "a.ckpt"
    save_checkpoint(adapted, path)
    loaded = load_checkpoint(path)
    assert loaded.lora.rank == 4
    for p, ab in adapted.lora.tensors.items():
        assert np.array_equal(loaded.lora.tensors[p]["A"], ab["A"])
        assert np.array_equal(loaded.lora.tensors[p]["B"], ab["B"])


def test_checkpoint_format_is_self_describing(tmp_path, tiny_checkpoint):
    import json
    import struct

    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_checkpoint, path)
    raw = path.read_bytes()
    assert raw[:4] == b"GFCK"
    (version,) = struct.unpack("<I", raw[4:8])
    assert version == 1
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    names = {e["name"] for e in header["tensors"]}
    assert "head.weight" in names
    total = sum(e["nbytes"] for e in header["tensors"])
    assert len(raw) == 16 + hlen + total


def test_checkpoint_rejects_corrupt_magic(tmp_path, tiny_checkpoint):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_checkpoint, path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(ShapeMismatch):
        load_checkpoint(path)


# --- gradient check ------------------------------------------------------------------


def test_gradients_match_finite_differences(latin_atlas):
    """Analytic gradients vs central differences on a tiny float64 model."""
    from glyphflow.compose import ComposeConfig, Vocabulary, build_canvas, build_mask, tokenize
    from glyphflow.flow import LossConfig, fm_loss
    from glyphflow.glyphs import Box, LineSpec, render_template

    vocab = Vocabulary.build([set("AB")], [])
    mcfg = ModelConfig(
        dim=16, depth=1, heads=2, patch=4, vocab_size=len(vocab),
        max_tokens=64, pos_rows=2, pos_cols=4, max_cond=8,
    )
    ccfg = ComposeConfig(axis="vertical", patch=4)
    ckpt = init_checkpoint(mcfg, ccfg, vocab, packs=[], seed=0)
    # randomize everything so no gradient path is dead at zero-init
    rng = np.random.default_rng(0)
    for name in ckpt.tensors:
        ckpt.tensors[name] = rng.normal(0, 0.1, ckpt.tensors[name].shape).astype(np.float32)

    module = build_module(ckpt, dtype=torch.float64)
    scene = rng.integers(0, 256, (4, 16, 3)).astype(np.uint8)
    tpl = render_template(latin_atlas, [], 16, 4)
    canvas = build_canvas(tpl, scene, ccfg)
    canvas.mask[5:, 3:9] = 1
    x_t = torch.from_numpy(rng.standard_normal((8, 16, 3))).to(torch.float64)
    batch = tokenize(canvas, x_t, ccfg)
    assert batch.n == 8

    x0 = torch.from_numpy(rng.standard_normal((8, 48))).to(torch.float64)
    z1 = torch.from_numpy(rng.standard_normal((8, 48))).to(torch.float64)
    t = torch.tensor([0.37], dtype=torch.float64)
    cond_ids = torch.tensor([[2, 3, 0]], dtype=torch.long)
    mask_flags = batch.x_m.to(torch.float64).any(dim=1)[None]

    def loss_value() -> torch.Tensor:
        v = module(
            batch.z[None].to(torch.float64), batch.local_positions, batch.half_ids,
            t, cond_ids,
        )
        return fm_loss(v[0], x0, z1, LossConfig(mask_weight=2.0), mask_flags[0])

    loss_value().backward()

    eps = 1e-5
    for name, p in module.named_parameters():
        grad = p.grad
        assert grad is not None, name
        flat = p.data.view(-1)
        gflat = grad.view(-1)
        # probe each tensor's most significant coordinates
        k = min(5, flat.numel())
        idx = torch.topk(gflat.abs(), k).indices.tolist()
        fd_vec, an_vec = [], []
        for i in idx:
            orig = float(flat[i])
            flat[i] = orig + eps
            hi = float(loss_value().detach())
            flat[i] = orig - eps
            lo = float(loss_value().detach())
            flat[i] = orig
            fd_vec.append((hi - lo) / (2 * eps))
            an_vec.append(float(gflat[i]))
        fd_vec, an_vec = np.asarray(fd_vec), np.asarray(an_vec)
        denom = max(np.linalg.norm(fd_vec), np.linalg.norm(an_vec), 1e-10)
        rel = np.linalg.norm(fd_vec - an_vec) / denom
        assert rel < 1e-4, f"{name}: rel={rel:.2e} fd={fd_vec} an={an_vec}"
