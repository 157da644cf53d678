import numpy as np
import pytest

from trajgpt import datagen, model


def pytest_addoption(parser):
    parser.addoption("--skip-slow-acceptance", action="store_true", default=False,
                     help="skip the training-heavy acceptance criteria (6-8)")


@pytest.fixture(scope="session")
def canonical_benchmark():
    """Canonical generator spec with its desk-scale cohort splits."""
    spec = datagen.canonical_spec()
    cohort = datagen.generate_cohort(spec, 660, 60, 100, seed=101)
    train, valid, test = datagen.split(cohort, (0.8, 0.1, 0.1), seed=101)
    return {"spec": spec, "train": train, "valid": valid, "test": test}


@pytest.fixture(scope="session")
def reference_model(canonical_benchmark):
    """The toy reference config trained 2000 steps on the canonical data.

    Shared by the oracle-comparison, zero-gap, and risk-trajectory
    criteria; this is the expensive acceptance fixture (about two
    minutes).
    """
    bench = canonical_benchmark
    data = [(s.tokens, s.times) for s in bench["train"]]
    cfg = model.ModelConfig.for_codes(
        bench["spec"].vocab_size, d=32, heads=4, layers=2, precision="single",
        time_scale=0.33)
    hp = model.TrainHyper(lr=1e-3, warmup=200, batch_size=8)
    params, opt, losses = model.pretrain(cfg, data, 2000, hp, seed=7)
    return {"cfg": cfg, "params": params, "losses": losses}
