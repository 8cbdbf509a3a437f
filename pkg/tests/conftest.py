import numpy as np
import pytest

from layerlab.data_io import standardize_episode
from layerlab.model import ModelConfig, build_model
from layerlab.prior import TaskPrior, sample_task, split_episode

VARIANTS = ("row", "dual", "two_stage")


def tiny_config(variant="row", **kw):
    base = dict(variant=variant, layers=2, model_dim=8, heads=2, ff_dim=16, max_features=4, seed=3)
    base.update(kw)
    return ModelConfig(**base)


def make_episode(seed=0, n_rows=40, n_features=3, support=0.35, probe=None):
    prior = TaskPrior(feature_count_range=(n_features, n_features), sample_count_range=(n_rows, n_rows))
    rng = np.random.default_rng(seed)
    table = sample_task(prior, rng)
    return standardize_episode(split_episode(table, support, probe, rng=rng))


@pytest.fixture(params=VARIANTS)
def variant(request):
    return request.param


@pytest.fixture
def tiny_model(variant):
    return build_model(tiny_config(variant))


@pytest.fixture
def episode():
    return make_episode()
