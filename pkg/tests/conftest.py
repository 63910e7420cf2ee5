import numpy as np
import pytest

from src.bde import AugmentConfig, TrainConfig
from src.dataset import SynthSpec
from src.experiment_config import ExperimentConfig
from src.hierarchy_generator import generate_hierarchical
from src.numerics import SeededRng
from src.protonet import MetaTrainConfig


@pytest.fixture
def rng():
    return SeededRng(1234)


@pytest.fixture
def small_spec():
    return SynthSpec(num_coarse_classes=2, fine_per_coarse=3, samples_per_fine=10, input_dim=8, seed=7)


@pytest.fixture
def small_dataset(small_spec):
    return generate_hierarchical(small_spec)


def unit_columns(rng: SeededRng, d: int, m: int) -> np.ndarray:
    f = rng.normal(size=(d, m))
    return f / np.linalg.norm(f, axis=0, keepdims=True)


@pytest.fixture
def tiny_config(tmp_path):
    """A config small enough to run every stage in a few seconds."""
    return ExperimentConfig(
        data=SynthSpec(num_coarse_classes=9, fine_per_coarse=3, samples_per_fine=12, input_dim=8,
                       nuisance_dim=2, nuisance_sigma=0.5),
        train_coarse=[0, 1, 2, 3, 4, 5],
        val_coarse=[6],
        test_coarse=[7, 8],
        bde=TrainConfig(epochs=3, batch_size=32, base_lr=0.05, lr_milestones=[1, 2], hidden_dim=8,
                        embedding_dim=8, holdout_fraction=0.2, knn_k=20),
        augment=AugmentConfig(),
        meta=MetaTrainConfig(episodes_per_epoch=5, epochs=2, k_shot=1, hidden_dim=8, embedding_dim=8,
                             val_episodes=10),
        n_way=3,
        k_shots=[1, 2],
        q_query=3,
        eval_episodes=20,
        output_dir=str(tmp_path / 'run'),
    )
