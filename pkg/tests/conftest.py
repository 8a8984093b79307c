import math

import numpy as np
import pytest
import torch
from hypothesis import settings

torch.set_num_threads(1)

settings.register_profile("suite", deadline=None, max_examples=25)
settings.load_profile("suite")


@pytest.fixture(scope="session")
def tiny_scene():
    from stylefield.scenes import SceneSpec, synth_scene

    spec = SceneSpec(
        resolution=(32, 32),
        theta_count=6,
        phi_count=2,
        phi_range=(-0.2, 0.2),
    )
    return synth_scene(spec, seed=11)


@pytest.fixture(scope="session")
def small_gen_config():
    from stylefield.stylegen.generator import GeneratorConfig

    return GeneratorConfig(
        latent_dim=16,
        stages=4,
        channels=(32, 32, 16, 8),
        split_stage=2,
        exposed_stages=(2, 3),
        mapping_hidden=32,
    )


@pytest.fixture(scope="session")
def small_gen(small_gen_config):
    from stylefield.seeding import init_module
    from stylefield.stylegen.generator import ToyGenerator

    gen = ToyGenerator(small_gen_config)
    init_module(gen, 123)
    return gen


@pytest.fixture()
def rng():
    return np.random.default_rng(7)
