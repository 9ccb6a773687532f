import numpy as np
import pytest

from morphhead.config import (
    Config,
    DataConfig,
    FieldConfig,
    OptimConfig,
    RenderConfig,
    TrainConfig,
)
from morphhead.fields import build_networks, parameters
from morphhead.morphable import build_toy_head
from morphhead.optim import init_optimizer
from morphhead.train import save_checkpoint


@pytest.fixture(scope="session")
def toy_head():
    return build_toy_head(seed=7)


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory):
    """A small untrained checkpoint whose config renders 16x16 frames.

    Gives the checkpoint-driven surfaces (render/eval/serve) something
    cheap and fully deterministic to load.
    """
    cfg = Config(
        fields=FieldConfig(
            pe_freqs=2,
            geometry_hidden=(16, 16),
            deformation_hidden=(16,),
            texture_hidden=(16,),
            seed=5,
        ),
        render=RenderConfig(n_samples=12, n_secant=8),
        optim=OptimConfig(),
        train=TrainConfig(seed=0),
        data=DataConfig(
            train_frames=3, test_frames=2, holdout_frames=1,
            width=16, height=16, focal=19.0, seed=77,
        ),
    )
    nets = build_networks(cfg.fields, n_frames=cfg.data.train_frames)
    rng = np.random.default_rng(3)
    nets.frame_latents[:] = rng.normal(size=nets.frame_latents.shape) * 0.1
    state = init_optimizer(parameters(nets), cfg.optim)
    path = tmp_path_factory.mktemp("checkpoint") / "model.ckpt"
    save_checkpoint(path, nets, state, cfg, epochs_completed=0)
    return path
