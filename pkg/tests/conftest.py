"""Shared fixtures.

The trained networks come from one default-config run of the experiment
pipeline per session; stages run lazily, so unit-test files that only need
the initial checkpoint never pay for online learning.  Setting
``MAE_TEST_PIPELINE`` to the output directory of an earlier default run
reuses its artifacts instead of retraining.
"""
import json
import os

import numpy as np
import pytest

from mae import experiments, net
from mae import model as geo
from mae.config import ExperimentConfig


class Pipeline:
    def __init__(self, out, reuse=False):
        self.out = str(out)
        self.cfg = ExperimentConfig()
        self.metrics = {}
        self.reuse = reuse

    def stage(self, name):
        path = os.path.join(self.out, f"metrics_{name}.json")
        if name not in self.metrics and self.reuse and os.path.exists(path):
            with open(path) as fh:
                self.metrics[name] = json.load(fh)
        if name not in self.metrics:
            need = {"online_learn": ["init_train"], "estimate_eval": ["online_learn"],
                    "control_eval": ["online_learn"], "simulate_eval": ["online_learn"]}
            for dep in need.get(name, []):
                self.stage(dep)
            run = getattr(experiments, f"run_{name}")
            self.metrics[name] = run(self.cfg, self.out)
        return self.metrics[name]

    def timing(self, name):
        self.stage(name)
        with open(os.path.join(self.out, f"timing_{name}.json")) as fh:
            return json.load(fh)

    def checkpoint(self, which):
        self.stage("init_train" if which == "init" else "online_learn")
        name = experiments.INIT_CKPT if which == "init" else experiments.ONLINE_CKPT
        return net.load_checkpoint(os.path.join(self.out, name))


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    reuse = os.environ.get("MAE_TEST_PIPELINE")
    if reuse:
        return Pipeline(reuse, reuse=True)
    return Pipeline(tmp_path_factory.mktemp("pipeline"))


@pytest.fixture(scope="session")
def trained(pipeline):
    """Network after initial training on the nominal model."""
    return pipeline.checkpoint("init")


@pytest.fixture(scope="session")
def learned(pipeline):
    """Network after the online-learning session on the perturbed plant."""
    return pipeline.checkpoint("online")


@pytest.fixture(scope="session")
def arm():
    return geo.default_model()


@pytest.fixture
def small_net():
    """Random untrained network at D=2, M=3."""
    return net.init_params(2, 3, np.random.default_rng(11))
