"""Session-wide fixtures: one tiny dataset and one short training run shared
by the CLI, service, and report tests."""

from __future__ import annotations

import pytest
import torch

from persona.avatar import ModelConfig
from persona.dataset import synth_toy_dataset
from persona.trainer import TrainConfig, new_trainer

torch.set_num_threads(1)


def tiny_model_config() -> ModelConfig:
    return ModelConfig.desk(
        latent_dim=8,
        pe_bands=3,
        pe_delta_bands=2,
        mlp_d=(2, 48),
        mlp_c=(2, 40),
        mlp_pose=(2, 32),
        mlp_z=(2, 32),
        scale_base=0.009,
        seed=0,
    )


@pytest.fixture(scope="session")
def shared_dataset(tmp_path_factory: pytest.TempPathFactory):
    root = tmp_path_factory.mktemp("data") / "toy"
    return synth_toy_dataset(
        root, n_subjects=4, n_frames=6, size=48, n_vertices=150, seed=0
    )


@pytest.fixture(scope="session")
def shared_run(shared_dataset, tmp_path_factory: pytest.TempPathFactory):
    """A short but real training run; returns (checkpoint_path, dataset)."""
    cfg = TrainConfig.desk(
        epochs=2,
        warm_up_epochs=1,
        point_cap=260,
        densify_every=0,
        holdout_stride=3,
        seed=0,
    )
    trainer = new_trainer(shared_dataset, tiny_model_config(), cfg)
    trainer.fit()
    out = tmp_path_factory.mktemp("run") / "model.bin"
    trainer.save_checkpoint(out)
    return out, shared_dataset
