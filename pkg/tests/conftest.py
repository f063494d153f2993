import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from statreach import dynamics, surrogate

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def periodic_small():
    """Small periodic2d problem with a briefly trained surrogate."""
    model = dynamics.get_model("periodic2d")
    init = dynamics.default_initial_set("periodic2d")
    ds = dynamics.sample_dataset(model, init, 5, 1500, seed=11)
    cfg = surrogate.TrainConfig(epochs=30, warmup_mse_epochs=20, batch_size=128, seed=3)
    res = surrogate.train(ds, cfg, [2, 12, 16, 10])
    return model, init, ds, res


def random_net(rng, sizes):
    return surrogate.init_net(sizes, rng)
