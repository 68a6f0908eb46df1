import numpy as np
import pytest
import torch

from glyphflow.compose import ComposeConfig, Vocabulary
from glyphflow.data import DataConfig, gen_dataset
from glyphflow.glyphs import standard_pack
from glyphflow.model import ModelConfig, init_checkpoint


@pytest.fixture(scope="session")
def latin_atlas():
    return standard_pack("latin36")


@pytest.fixture(scope="session")
def pseudo_atlas():
    return standard_pack("pseudo-a")


def tiny_data_config(**overrides) -> DataConfig:
    base = dict(
        scene_w=64,
        scene_h=64,
        lines_per_image=(1, 1),
        text_heights=(10, 14),
        text_len=(2, 5),
        long_side_choices=(64,),
        seed=5,
    )
    base.update(overrides)
    return DataConfig(**base)


@pytest.fixture()
def tiny_dataset(tmp_path):
    cfg = tiny_data_config()
    root = tmp_path / "ds"
    gen_dataset(cfg, 6, root)
    return root


@pytest.fixture(scope="session")
def tiny_vocab(latin_atlas):
    return Vocabulary.build([latin_atlas.charset], ["navy", "white"])


def tiny_model_config(vocab, **overrides) -> ModelConfig:
    base = dict(
        dim=32,
        depth=1,
        heads=2,
        patch=16,
        vocab_size=len(vocab),
        max_tokens=256,
        pos_rows=4,
        pos_cols=4,
        max_cond=32,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def tiny_checkpoint(latin_atlas, tiny_vocab):
    mcfg = tiny_model_config(tiny_vocab)
    ccfg = ComposeConfig(axis="vertical", patch=16)
    return init_checkpoint(mcfg, ccfg, tiny_vocab, packs=[latin_atlas.spec()], seed=11)


@pytest.fixture(autouse=True)
def _fixed_torch_threads():
    torch.set_num_threads(max(1, torch.get_num_threads()))
    yield


def rng(seed=0) -> np.random.Generator:
    return np.random.default_rng(seed)
