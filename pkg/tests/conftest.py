import numpy as np
import pytest
import torch

from usgen.config import DsrConfig, TbganConfig, TrainConfig
from usgen.dataset import AugmentConfig
from usgen.phantoms import make_phantom_dataset


@pytest.fixture(scope="session", autouse=True)
def _single_thread():
    # keeps op scheduling identical across all tests in the session
    torch.set_num_threads(2)


@pytest.fixture(scope="session")
def phantoms16(tmp_path_factory):
    """16 phantom images at 16x16, shared read-only across tests."""
    root = tmp_path_factory.mktemp("phantoms16") / "trans-cerebellum"
    return make_phantom_dataset(root, 16, 16, seed=101)


@pytest.fixture(scope="session")
def phantoms32(tmp_path_factory):
    root = tmp_path_factory.mktemp("phantoms32") / "trans-cerebellum"
    return make_phantom_dataset(root, 24, 32, seed=202)


def tiny_dsr_config(data_root, **overrides) -> TrainConfig:
    """A desk-scale DSR config: 16x16 diffusion, 16->32 super-resolution."""
    dsr_fields = {"timesteps": 10, "base_size": 16, "high_size": 32,
                  "unet_preset": "tiny", "sr_width": 16, "sr_blocks": 1,
                  "sr_epochs": 2}
    dsr_fields.update(overrides.pop("dsr", {}))
    base = dict(pipeline="dsr", plane="trans-cerebellum", data_root=str(data_root),
                epochs=2, batch_size=8, seed=11, eval_every=100, checkpoint_every=100,
                eval_fake_count=8, eval_real_count=8,
                augment=AugmentConfig(), dsr=DsrConfig(**dsr_fields))
    base.update(overrides)
    return TrainConfig(**base)


def tiny_tbgan_config(data_root, **overrides) -> TrainConfig:
    tb_fields = {"resolution": 16, "preset": "tiny", "pretrain_epochs": 0,
                 "apa_speed_images": 1000, "r1_interval": 4}
    tb_fields.update(overrides.pop("tbgan", {}))
    base = dict(pipeline="tbgan", plane="trans-cerebellum", data_root=str(data_root),
                epochs=4, epoch_unit="steps", batch_size=8, seed=5,
                lr_generator=1e-5, lr_discriminator=1e-4, adam_betas=(0.0, 0.99),
                eval_every=100, checkpoint_every=100, eval_fake_count=8, eval_real_count=8,
                augment=AugmentConfig.identity(), tbgan=TbganConfig(**tb_fields))
    base.update(overrides)
    return TrainConfig(**base)
