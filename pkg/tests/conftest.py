from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "ci",
    max_examples=40,
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ci")


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory) -> Path:
    """A small rendered shape dataset shared across test modules."""
    from uwovis.data import FixtureSpec, synth_fixture

    out = tmp_path_factory.mktemp("fixture")
    synth_fixture(0, FixtureSpec(n_images=6, n_classes=3, shapes_per_image=2, image_size=64), out)
    return out


@pytest.fixture(scope="session")
def fixture_index(fixture_dir):
    from uwovis.data import load_annotations

    return load_annotations(fixture_dir / "annotations.json")


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def tiny_run_config(**overrides):
    """A 16x16-capable configuration small enough for exhaustive gradient
    checks."""
    from uwovis.encoders import EncoderConfig
    from uwovis.gpem import GpemConfig
    from uwovis.saim import SelectionConfig
    from uwovis.trainer import OptimizerConfig, RunConfig

    defaults = dict(
        encoder=EncoderConfig(
            levels=3,
            strides=(4, 8, 16),
            channels=(4, 6, 8),
            embed_dim=8,
            token_dim=6,
            seed=0,
        ),
        gpem=GpemConfig(latent_dim=8, num_queries=4, num_layers=1, num_points=2),
        selection=SelectionConfig(strategy="mixed", top_n=3),
        optimizer=OptimizerConfig(steps=2, batch_size=2, step_size=1e-3),
        seed=0,
    )
    defaults.update(overrides)
    return RunConfig(**defaults)
