import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def flat_stairs_teacher():
    """Monolithic teacher trained for the default 2M steps on {flat, stairs_up}.

    Trained once per session; returns ``(policy, seconds, config)``.
    """
    import time

    from egoloco.experiment import ExperimentConfig, train_teacher

    cfg = ExperimentConfig()
    cfg.grid.kinds = ("flat", "stairs_up")
    t0 = time.perf_counter()
    out = train_teacher(cfg)
    return out["policy"], time.perf_counter() - t0, cfg
