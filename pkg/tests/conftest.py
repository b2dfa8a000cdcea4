"""Shared fixtures: small phantom sets and briefly-trained models.

Training fixtures are session-scoped; they run once and are reused by
the reconstruction, refinement-loop, calibration, service, and CLI
tests. The acceptance suite trains its own, bigger models.
"""

import dataclasses

import pytest

from maskrefine.masking import MaskSamplerConfig
from maskrefine.models import TrainConfig, train_init, train_main
from maskrefine.phantom import PhantomSpec, generate_phantom_set

SMALL_SIZE = 32
SMALL_RADIUS = 8.0


@pytest.fixture(scope="session")
def small_spec():
    # geometry scaled to the 32 px grid
    return PhantomSpec(
        size=SMALL_SIZE,
        lesion=False,
        seed=0,
        blob_count_range=(3, 5),
        blob_radius_range=(2.0, 4.5),
        lesion_radius_range=(3.0, 6.0),
        lesion_edge_width=1.5,
    )


@pytest.fixture(scope="session")
def small_sampler_config():
    return MaskSamplerConfig(patch_side_lengths=(2, 4, 8), patch_count=300)


@pytest.fixture(scope="session")
def small_train_config(small_sampler_config):
    return TrainConfig(
        epochs=14,
        batch_size=8,
        learning_rate=3e-4,
        radius=SMALL_RADIUS,
        mask_config=small_sampler_config,
        seed=0,
    )


@pytest.fixture(scope="session")
def healthy_slices(small_spec):
    slices, _ = generate_phantom_set(small_spec, 80)
    return slices


@pytest.fixture(scope="session")
def validation_slices(small_spec):
    slices, _ = generate_phantom_set(small_spec, 12, seed_offset=50_000)
    return slices


@pytest.fixture(scope="session")
def lesion_set(small_spec):
    lesion_spec = dataclasses.replace(small_spec, lesion=True)
    return generate_phantom_set(lesion_spec, 10, seed_offset=90_000)


@pytest.fixture(scope="session")
def trained_main(healthy_slices, small_train_config):
    model, log = train_main(healthy_slices, small_train_config)
    return model, log


@pytest.fixture(scope="session")
def trained_init(healthy_slices, small_train_config):
    model, log = train_init(healthy_slices, small_train_config)
    return model, log
