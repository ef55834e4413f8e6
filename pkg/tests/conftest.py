"""Shared fixtures: one tiny two-size model family reused across suites."""

import numpy as np
import pytest

from flexdiff.backbone import ModelConfig, flexify, init_model, merge_loras
from flexdiff.diffusion import NoiseSchedule
from flexdiff.tokenizer import PatchSpec


@pytest.fixture(scope="session")
def patch():
    return PatchSpec(p_powerful=2, p_weak=4)


@pytest.fixture(scope="session")
def tiny_cfg(patch):
    """Small enough for finite differences, big enough to exercise heads."""
    return ModelConfig(
        h=8, w=8, c_in=1, d_model=16, n_layers=2, n_heads=2,
        patch=patch, num_classes=3, learn_variance=True, lora_rank=2,
    )


@pytest.fixture(scope="session")
def base_model(tiny_cfg):
    # random heads: a zero-headed fresh model would make every output-
    # comparison test trivially pass
    return init_model(tiny_cfg, seed=7, head_init="random")


@pytest.fixture(scope="session")
def shared_model(base_model):
    return flexify(base_model, "shared", seed=11)


@pytest.fixture(scope="session")
def lora_model(base_model):
    return flexify(base_model, "lora", seed=11)


@pytest.fixture(scope="session")
def merged_model(lora_model):
    return merge_loras(lora_model)


@pytest.fixture(scope="session")
def schedule():
    # the endpoint rescale keeps betas in (0, 1) only for lengths above ~20
    return NoiseSchedule.linear(50)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
