import pytest

from canonpose.dataset import ArrayDataset, ShapeSpec, make_sample, make_splits
from canonpose.training import TrainConfig

TINY_RES = (16, 16)
TINY_VOX = 8


@pytest.fixture(scope="session")
def tiny_samples():
    spec = ShapeSpec(family="mixed", n_subjects=4, n_poses=6, seed=0)
    return [make_sample(s, spec, TINY_RES, TINY_VOX) for s in range(24)]


@pytest.fixture(scope="session")
def tiny(tiny_samples):
    """(ArrayDataset, SplitPlan) at 16x16 / 8^3 with a 2x2 subject/pose fold."""
    return ArrayDataset.from_samples(tiny_samples), make_splits(tiny_samples, 2, 2)[0]


def tiny_config(**overrides):
    base = dict(stage1_epochs=6, stage2_epochs=4, schedule_boundaries=(2, 4), checkpoint_every=2, batch_size=4, seed=3,
                disc_steps_per_gen=2)
    base.update(overrides)
    return TrainConfig(**base)
