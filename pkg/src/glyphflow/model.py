"""The miniature diffusion transformer and its checkpoint container.

Design, in brief:

* tokens = [conditioning tokens || image tokens], joint self-attention in
  every block (no cross-attention);
* image token input is the channel concatenation Z of noisy patch, masked
  patch, and mask patch, linearly embedded;
* positions use one learned 2-D grid shared by the glyph and scene halves
  plus a learned half-indicator, so corresponding template/scene patches
  carry identical grid codes;
* the timestep enters through a sinusoidal embedding -> 2-layer MLP -> per
  block adaptive shift/scale/gate (modulation projections and the output
  head start at zero, making every block an identity at initialization);
* LoRA adapters attach to named Linear layers (A is random, B starts at
  zero, so the adapted model initially equals the base).

Checkpoints are a self-describing single file: a JSON header (configs,
vocab, pack specs, metadata, tensor directory) followed by raw little-endian
float32 tensor data.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .compose import ComposeConfig, ConditioningBundle, TokenBatch, Vocabulary
from .errors import NoAdapters, NonFiniteParameters, ShapeMismatch, TargetMissing

CHECKPOINT_MAGIC = b"GFCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 256
    depth: int = 6
    heads: int = 8
    patch: int = 8  # must match ComposeConfig.patch
    vocab_size: int = 0
    max_tokens: int = 2048
    cond_enabled: bool = True
    mlp_ratio: float = 4.0
    pos_rows: int = 16  # learned grid size per half
    pos_cols: int = 16
    max_cond: int = 64
    channels: int = 3

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.cond_enabled and self.vocab_size < 2:
            raise ValueError("cond_enabled requires a vocabulary")

    @property
    def d_x(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def d_m(self) -> int:
        return self.patch * self.patch

    @property
    def z_dim(self) -> int:
        return 2 * self.d_x + self.d_m

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "depth": self.depth,
            "heads": self.heads,
            "patch": self.patch,
            "vocab_size": self.vocab_size,
            "max_tokens": self.max_tokens,
            "cond_enabled": self.cond_enabled,
            "mlp_ratio": self.mlp_ratio,
            "pos_rows": self.pos_rows,
            "pos_cols": self.pos_cols,
            "max_cond": self.max_cond,
            "channels": self.channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class TimestepEmbedder(nn.Module):
    def __init__(self, dim: int, freq_dim: int = 128):
        super().__init__()
        self.freq_dim = freq_dim
        self.fc1 = nn.Linear(freq_dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def sinusoidal(self, t: torch.Tensor) -> torch.Tensor:
        half = self.freq_dim // 2
        freqs = torch.exp(
            -math.log(10000.0)
            * torch.arange(half, dtype=t.dtype, device=t.device)
            / half
        )
        # t lives in [0, 1]; spread it across the frequency bands.
        args = t[:, None] * 1000.0 * freqs[None]
        return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.silu(self.fc1(self.sinusoidal(t))))


class LoraLinear(nn.Linear):
    """Linear layer with optional additive low-rank delta (W + B A)."""

    def attach_lora(self, rank: int):
        self.lora_A = nn.Parameter(torch.zeros(rank, self.in_features))
        self.lora_B = nn.Parameter(torch.zeros(self.out_features, rank))

    @property
    def has_lora(self) -> bool:
        return hasattr(self, "lora_A")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.linear(x, self.weight, self.bias)
        if self.has_lora:
            y = y + F.linear(F.linear(x, self.lora_A), self.lora_B)
        return y


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.wq = LoraLinear(dim, dim)
        self.wk = LoraLinear(dim, dim)
        self.wv = LoraLinear(dim, dim)
        self.wo = LoraLinear(dim, dim)

    def forward(self, x: torch.Tensor, keep: torch.Tensor | None) -> torch.Tensor:
        b, n, d = x.shape
        h = self.heads
        q = self.wq(x).view(b, n, h, d // h).transpose(1, 2)
        k = self.wk(x).view(b, n, h, d // h).transpose(1, 2)
        v = self.wv(x).view(b, n, h, d // h).transpose(1, 2)
        mask = None
        if keep is not None:
            mask = keep[:, None, None, :]  # (B, 1, 1, N): True = may be attended
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        return self.wo(out.transpose(1, 2).reshape(b, n, d))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = LoraLinear(dim, hidden)
        self.fc2 = LoraLinear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.silu(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.modulation = LoraLinear(dim, 6 * dim)

    def forward(self, x: torch.Tensor, c: torch.Tensor, keep: torch.Tensor | None) -> torch.Tensor:
        s1, g1, a1, s2, g2, a2 = self.modulation(F.silu(c)).chunk(6, dim=-1)
        x = x + a1.unsqueeze(1) * self.attn(modulate(self.norm1(x), s1, g1), keep)
        x = x + a2.unsqueeze(1) * self.mlp(modulate(self.norm2(x), s2, g2))
        return x


class VelocityTransformer(nn.Module):
    """Maps the augmented token sequence and a timestep to per-patch velocity."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = LoraLinear(cfg.z_dim, cfg.dim)
        self.pos_grid = nn.Parameter(torch.zeros(cfg.pos_rows, cfg.pos_cols, cfg.dim))
        self.half_emb = nn.Parameter(torch.zeros(2, cfg.dim))
        self.t_embedder = TimestepEmbedder(cfg.dim)
        if cfg.cond_enabled:
            self.cond_emb = nn.Embedding(cfg.vocab_size, cfg.dim)
            self.cond_pos = nn.Parameter(torch.zeros(cfg.max_cond, cfg.dim))
        self.blocks = nn.ModuleList(
            [Block(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)]
        )
        self.final_norm = nn.LayerNorm(cfg.dim, elementwise_affine=False, eps=1e-6)
        self.final_modulation = LoraLinear(cfg.dim, 2 * cfg.dim)
        self.head = LoraLinear(cfg.dim, cfg.d_x)
        # Velocity has a large identity-like component (z1 enters x_t linearly,
        # scaled by 1/sigma_t); layer norms erase per-token magnitude, so give
        # the model a direct, time-gated linear path from the raw token input.
        self.skip = LoraLinear(cfg.z_dim, cfg.d_x)
        self.skip_gate = LoraLinear(cfg.dim, cfg.d_x)

    def forward(
        self,
        z: torch.Tensor,  # (B, N, z_dim)
        local_positions: torch.Tensor,  # (N, 2) shared across the batch
        half_ids: torch.Tensor,  # (N,)
        t: torch.Tensor,  # (B,)
        cond_ids: torch.Tensor | None = None,  # (B, M) int64
        cond_keep: torch.Tensor | None = None,  # (B, M) bool, False = padding
    ) -> torch.Tensor:
        cfg = self.cfg
        b, n, _ = z.shape
        if n > cfg.max_tokens:
            raise ShapeMismatch(f"{n} tokens exceed max_tokens {cfg.max_tokens}")
        if (
            local_positions[:, 0].max() >= cfg.pos_rows
            or local_positions[:, 1].max() >= cfg.pos_cols
        ):
            raise ShapeMismatch("patch coordinates exceed the positional grid")

        pos = self.pos_grid[local_positions[:, 0], local_positions[:, 1]]
        x = self.embed(z) + (pos + self.half_emb[half_ids]).unsqueeze(0)

        keep = None
        m = 0
        if cond_ids is not None and cond_ids.shape[1] > 0:
            if not cfg.cond_enabled:
                raise ShapeMismatch("conditioning tokens passed to a cond-disabled model")
            m = cond_ids.shape[1]
            if m > cfg.max_cond:
                raise ShapeMismatch(f"{m} conditioning tokens exceed max_cond {cfg.max_cond}")
            c_tok = self.cond_emb(cond_ids) + self.cond_pos[:m].unsqueeze(0)
            x = torch.cat([c_tok, x], dim=1)
            if cond_keep is None:
                cond_keep = torch.ones(b, m, dtype=torch.bool, device=z.device)
            keep = torch.cat(
                [cond_keep, torch.ones(b, n, dtype=torch.bool, device=z.device)], dim=1
            )

        c = self.t_embedder(t)
        for block in self.blocks:
            x = block(x, c, keep)
        x = x[:, m:]
        shift, scale = self.final_modulation(F.silu(c)).chunk(2, dim=-1)
        out = self.head(modulate(self.final_norm(x), shift, scale))
        return out + self.skip_gate(F.silu(c)).unsqueeze(1) * self.skip(z)


# --- initialization -----------------------------------------------------------------


def _trunc_normal(shape, std: float, gen: torch.Generator) -> torch.Tensor:
    """Truncated normal on (-2 std, 2 std) via inverse-CDF sampling."""
    lo = math.erf(-2.0 / math.sqrt(2.0))
    hi = math.erf(2.0 / math.sqrt(2.0))
    u = torch.rand(shape, generator=gen, dtype=torch.float32)
    return torch.erfinv(lo + u * (hi - lo)) * math.sqrt(2.0) * std


_ZERO_INIT_PREFIXES = ("head.", "skip_gate.")
_ZERO_INIT_MARKERS = (".modulation.", "final_modulation.")


def init_state(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Deterministic initial parameters, keyed by canonical state-dict names.

    Initialization is applied per tensor in sorted name order with a stream
    seeded by (seed, name), so the result does not depend on module
    construction order.
    """
    from .seeding import derive_seed

    module = VelocityTransformer(cfg)
    state = {}
    for name, tensor in sorted(module.state_dict().items()):
        gen = torch.Generator().manual_seed(derive_seed(seed, "init", name) % (2**63))
        zero = (
            name.endswith(".bias")
            or name.startswith(_ZERO_INIT_PREFIXES)
            or any(mark in name for mark in _ZERO_INIT_MARKERS)
        )
        if zero:
            values = torch.zeros(tensor.shape)
        else:
            values = _trunc_normal(tensor.shape, 0.02, gen)
        state[name] = values.numpy().astype(np.float32)
    return state


def param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count: the sum over all enumerated tensor shapes."""
    d, dx, zd = cfg.dim, cfg.d_x, cfg.z_dim
    hidden = int(cfg.dim * cfg.mlp_ratio)
    freq = 128
    total = zd * d + d  # embed
    total += cfg.pos_rows * cfg.pos_cols * d + 2 * d  # grid + half indicator
    total += (freq * d + d) + (d * d + d)  # timestep MLP
    if cfg.cond_enabled:
        total += cfg.vocab_size * d + cfg.max_cond * d
    per_block = 4 * (d * d + d)  # attention q, k, v, o
    per_block += (d * hidden + hidden) + (hidden * d + d)  # mlp in / out
    per_block += d * 6 * d + 6 * d  # modulation
    total += cfg.depth * per_block
    total += d * 2 * d + 2 * d  # final modulation
    total += d * dx + dx  # head
    total += zd * dx + dx  # input-to-output skip
    total += d * dx + dx  # time gate on the skip
    return total


# --- LoRA -----------------------------------------------------------------------------

TARGET_GROUPS = ("attn", "mlp", "mod", "head", "embed")


def _linear_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    """(out, in) shapes of every LoRA-capable Linear, by module path."""
    module = VelocityTransformer(cfg)
    return {
        path: (m.out_features, m.in_features)
        for path, m in module.named_modules()
        if isinstance(m, LoraLinear)
    }


def _paths_for_targets(cfg: ModelConfig, targets: tuple[str, ...]) -> list[str]:
    for t in targets:
        if t not in TARGET_GROUPS:
            raise TargetMissing(f"unknown LoRA target group {t!r}; known: {TARGET_GROUPS}")
    paths = []
    for path in sorted(_linear_shapes(cfg)):
        group = None
        if ".attn.w" in path:
            group = "attn"
        elif ".mlp.fc" in path:
            group = "mlp"
        elif "modulation" in path:
            group = "mod"
        elif path == "head":
            group = "head"
        elif path == "embed":
            group = "embed"
        if group in targets:
            paths.append(path)
    if not paths:
        raise TargetMissing(f"no layers match target groups {targets!r}")
    return paths


@dataclass
class LoraState:
    rank: int
    targets: tuple[str, ...]
    tensors: dict  # path -> {"A": (r, in) f32 array, "B": (out, r) f32 array}

    def trainable_parameters(self) -> int:
        return sum(a["A"].size + a["B"].size for a in self.tensors.values())


# --- checkpoint container ----------------------------------------------------------------


@dataclass
class Checkpoint:
    model_config: ModelConfig
    compose_config: ComposeConfig
    tensors: dict  # canonical name -> float32 ndarray (base parameters)
    lora: LoraState | None = None
    vocab: list | None = None  # token strings; None when conditioning is off
    packs: list = field(default_factory=list)  # atlas specs
    metadata: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)  # optimizer / rng state for resume

    _module_cache: object = field(default=None, repr=False, compare=False)

    def vocabulary(self) -> Vocabulary | None:
        return Vocabulary(list(self.vocab)) if self.vocab else None

    def invalidate(self) -> None:
        self._module_cache = None

    def module(self, dtype=torch.float32) -> VelocityTransformer:
        if self._module_cache is None or next(self._module_cache.parameters()).dtype != dtype:
            self._module_cache = build_module(self, dtype=dtype)
        return self._module_cache

    def check_finite(self) -> None:
        for name, arr in self.tensors.items():
            if not np.isfinite(arr).all():
                raise NonFiniteParameters(f"tensor {name} contains non-finite values")
        if self.lora:
            for path, ab in self.lora.tensors.items():
                if not (np.isfinite(ab["A"]).all() and np.isfinite(ab["B"]).all()):
                    raise NonFiniteParameters(f"LoRA tensors at {path} are non-finite")


def init_checkpoint(
    model_cfg: ModelConfig,
    compose_cfg: ComposeConfig,
    vocab: Vocabulary | None = None,
    packs: list | None = None,
    seed: int = 0,
    metadata: dict | None = None,
) -> Checkpoint:
    if model_cfg.patch != compose_cfg.patch:
        raise ShapeMismatch(
            f"model patch {model_cfg.patch} != compose patch {compose_cfg.patch}"
        )
    if model_cfg.cond_enabled and (vocab is None or len(vocab) != model_cfg.vocab_size):
        raise ShapeMismatch("vocab_size must match the supplied vocabulary")
    meta = {"step": 0, "seed": int(seed), "dataset_hash": None}
    meta.update(metadata or {})
    return Checkpoint(
        model_config=model_cfg,
        compose_config=compose_cfg,
        tensors=init_state(model_cfg, seed),
        vocab=list(vocab.tokens) if vocab else None,
        packs=list(packs or []),
        metadata=meta,
    )


def build_module(ckpt: Checkpoint, dtype=torch.float32) -> VelocityTransformer:
    module = VelocityTransformer(ckpt.model_config)
    expected = set(module.state_dict())
    got = set(ckpt.tensors)
    if expected != got:
        missing, extra = expected - got, got - expected
        raise ShapeMismatch(f"checkpoint tensor mismatch: missing {missing}, extra {extra}")
    module.load_state_dict(
        {k: torch.from_numpy(v.copy()) for k, v in ckpt.tensors.items()}
    )
    if ckpt.lora is not None:
        by_path = dict(module.named_modules())
        for path, ab in ckpt.lora.tensors.items():
            layer = by_path.get(path)
            if layer is None or not isinstance(layer, LoraLinear):
                raise TargetMissing(f"LoRA target {path!r} not found in module")
            layer.attach_lora(ckpt.lora.rank)
            layer.lora_A.data = torch.from_numpy(ab["A"].copy())
            layer.lora_B.data = torch.from_numpy(ab["B"].copy())
    module = module.to(dtype)
    module.eval()
    return module


def apply_lora(
    ckpt: Checkpoint,
    rank: int,
    targets: tuple[str, ...] = ("attn", "mlp"),
    seed: int = 0,
) -> Checkpoint:
    """Attach zero-impact adapters: A random, B zero, base frozen."""
    if rank < 1:
        raise ValueError("rank must be >= 1")
    from .seeding import derive_seed

    paths = _paths_for_targets(ckpt.model_config, tuple(targets))
    shapes = _linear_shapes(ckpt.model_config)
    tensors = {}
    for path in paths:
        out_f, in_f = shapes[path]
        gen = torch.Generator().manual_seed(derive_seed(seed, "lora", path) % (2**63))
        tensors[path] = {
            "A": _trunc_normal((rank, in_f), 0.02, gen).numpy().astype(np.float32),
            "B": np.zeros((out_f, rank), dtype=np.float32),
        }
    metadata = dict(ckpt.metadata)
    metadata["frozen_base"] = True
    return Checkpoint(
        model_config=ckpt.model_config,
        compose_config=ckpt.compose_config,
        tensors={k: v.copy() for k, v in ckpt.tensors.items()},
        lora=LoraState(rank=int(rank), targets=tuple(targets), tensors=tensors),
        vocab=list(ckpt.vocab) if ckpt.vocab else None,
        packs=list(ckpt.packs),
        metadata=metadata,
    )


def merge_lora(ckpt: Checkpoint) -> Checkpoint:
    """Fold adapters into the base weights: W' = W + B A; adapters removed."""
    if ckpt.lora is None:
        raise NoAdapters("checkpoint has no LoRA adapters to merge")
    tensors = {k: v.copy() for k, v in ckpt.tensors.items()}
    for path, ab in ckpt.lora.tensors.items():
        key = f"{path}.weight"
        if key not in tensors:
            raise TargetMissing(f"LoRA target {path!r} has no base weight")
        tensors[key] = tensors[key] + ab["B"] @ ab["A"]
    metadata = dict(ckpt.metadata)
    metadata.pop("frozen_base", None)
    metadata["merged_lora"] = {"rank": ckpt.lora.rank, "targets": list(ckpt.lora.targets)}
    return Checkpoint(
        model_config=ckpt.model_config,
        compose_config=ckpt.compose_config,
        tensors=tensors,
        lora=None,
        vocab=list(ckpt.vocab) if ckpt.vocab else None,
        packs=list(ckpt.packs),
        metadata=metadata,
    )


def unmerge_lora(merged: Checkpoint, lora: LoraState) -> Checkpoint:
    """Undo :func:`merge_lora` given the adapter state that was folded in."""
    tensors = {k: v.copy() for k, v in merged.tensors.items()}
    for path, ab in lora.tensors.items():
        key = f"{path}.weight"
        tensors[key] = tensors[key] - ab["B"] @ ab["A"]
    metadata = dict(merged.metadata)
    metadata.pop("merged_lora", None)
    metadata["frozen_base"] = True
    return Checkpoint(
        model_config=merged.model_config,
        compose_config=merged.compose_config,
        tensors=tensors,
        lora=lora,
        vocab=list(merged.vocab) if merged.vocab else None,
        packs=list(merged.packs),
        metadata=metadata,
    )


# --- the public forward op -------------------------------------------------------------


@dataclass
class VelocityField:
    """Per-token velocity, un-patchifiable back to the canvas."""

    v: torch.Tensor  # (N, d_x)
    grid: tuple[int, int]
    patch: int
    channels: int = 3

    def image(self) -> torch.Tensor:
        from .compose import unpatchify

        rows, cols = self.grid
        return unpatchify(self.v, rows, cols, self.patch, self.channels)


def forward(
    batch: TokenBatch,
    t: float,
    cond: ConditioningBundle | None,
    ckpt: Checkpoint,
    check_finite: bool = True,
) -> VelocityField:
    """Single-canvas velocity prediction (inference mode)."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must be in [0, 1], got {t}")
    if check_finite:
        ckpt.check_finite()
    module = ckpt.module()
    cond_ids = None
    if cond is not None and cond.m > 0:
        cond_ids = torch.from_numpy(cond.token_ids)[None, :]
    with torch.no_grad():
        v = module(
            batch.z[None],
            batch.local_positions,
            batch.half_ids,
            torch.tensor([t], dtype=batch.z.dtype),
            cond_ids=cond_ids,
        )[0]
    if not torch.isfinite(v).all():
        raise NonFiniteParameters("velocity output contains non-finite values")
    return VelocityField(
        v=v, grid=batch.grid, patch=ckpt.model_config.patch, channels=ckpt.model_config.channels
    )


# --- serialization -----------------------------------------------------------------------


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    entries = []
    blobs = []
    offset = 0

    def add(name: str, arr: np.ndarray):
        nonlocal offset
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": offset, "nbytes": len(data)}
        )
        blobs.append(data)
        offset += len(data)

    for name in sorted(ckpt.tensors):
        add(name, ckpt.tensors[name])
    if ckpt.lora is not None:
        for path_ in sorted(ckpt.lora.tensors):
            add(f"lora.{path_}.A", ckpt.lora.tensors[path_]["A"])
            add(f"lora.{path_}.B", ckpt.lora.tensors[path_]["B"])
    for name in sorted(ckpt.extras):
        add(f"extra.{name}", ckpt.extras[name])

    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": ckpt.model_config.to_dict(),
        "compose_config": ckpt.compose_config.to_dict(),
        "vocab": ckpt.vocab,
        "packs": ckpt.packs,
        "metadata": ckpt.metadata,
        "lora": None
        if ckpt.lora is None
        else {"rank": ckpt.lora.rank, "targets": list(ckpt.lora.targets)},
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ShapeMismatch(f"{path} is not a checkpoint (bad magic {magic!r})")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ShapeMismatch(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen))
        payload = f.read()

    def read(entry) -> np.ndarray:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        return np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()

    tensors, lora_tensors, extras = {}, {}, {}
    for entry in header["tensors"]:
        name = entry["name"]
        if name.startswith("lora."):
            path_, ab = name[5:].rsplit(".", 1)
            lora_tensors.setdefault(path_, {})[ab] = read(entry)
        elif name.startswith("extra."):
            extras[name[6:]] = read(entry)
        else:
            tensors[name] = read(entry)

    lora = None
    if header["lora"] is not None:
        lora = LoraState(
            rank=header["lora"]["rank"],
            targets=tuple(header["lora"]["targets"]),
            tensors=lora_tensors,
        )
    ckpt = Checkpoint(
        model_config=ModelConfig.from_dict(header["model_config"]),
        compose_config=ComposeConfig.from_dict(header["compose_config"]),
        tensors=tensors,
        lora=lora,
        vocab=header["vocab"],
        packs=header["packs"],
        metadata=header["metadata"],
        extras=extras,
    )
    ckpt.check_finite()
    return ckpt


def checkpoint_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
