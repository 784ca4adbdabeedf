import os
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from threadpoolctl import threadpool_limits

from hmtpf.dataio import gen_advecting_gaussian
from hmtpf.model import Model, ModelConfig
from hmtpf.train import TrainConfig, train_loop

settings.register_profile("default", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

TOY_DT = 0.02
TOY_STEPS = 2000


@pytest.fixture
def tiny_cfg():
    return ModelConfig(n_c=4, n_g=8, heads=2, attn_layers=1, mamba_layers=1, state_width=4, k=3)


@pytest.fixture
def tiny_pack():
    return gen_advecting_gaussian(10, 6, 3, 0.05, seed=3)


@pytest.fixture
def tiny_model(tiny_cfg):
    return Model.init(tiny_cfg, seed=1)


@pytest.fixture(scope="session")
def toy_run():
    """Default toy config memorizing one advecting-Gaussian pack (N_BD=200, N_Q=100, T=5).

    Shared by the fine-tune tests and the acceptance suite; trained once per session.
    """
    pack = gen_advecting_gaussian(200, 100, 5, TOY_DT, seed=0)
    t0 = time.perf_counter()
    with threadpool_limits(limits=1):
        model, rows, _ = train_loop([pack], TrainConfig(epochs=TOY_STEPS))
    return {"pack": pack, "model": model, "rows": rows, "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def heldout_pack():
    """Same flow, fresh point sets: what the fine-tune stage is meant for."""
    return gen_advecting_gaussian(200, 100, 5, TOY_DT, seed=1)

