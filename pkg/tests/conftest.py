import numpy as np
import pytest

from roomdiff.datagen import GeneratorConfig, generate_scenes
from roomdiff.diffusion import make_schedule
from roomdiff.scene import NormalizationSpec
from roomdiff.shapes import build_library


@pytest.fixture(scope="session")
def norm_spec():
    return NormalizationSpec()


@pytest.fixture(scope="session")
def schedule():
    return make_schedule(1000, 1e-4, 0.02)


@pytest.fixture(scope="session")
def shape_library():
    rng = np.random.default_rng(77)
    return build_library(
        ("bed", "nightstand", "wardrobe", "lamp", "desk", "chair", "table"),
        4, rng, epochs=120)


@pytest.fixture(scope="session")
def small_corpus(shape_library):
    cfg = GeneratorConfig(scene_count=128, seed=5, num_slots=8, max_objects=8)
    return generate_scenes(cfg, shape_library)


def rel_err(analytic, numeric, floor=1e-6):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
