# pytest tests/test_phantom_utils.py
import math

import numpy as np
import pytest

from kidney.errors import GeometryError
from kidney.utils.phantom_utils import Ellipsoid, PhantomSpec, generate_phantom, random_phantom_spec


def single_kidney_spec(**overrides) -> PhantomSpec:
    fields = dict(
        seed=5,
        dims=(64, 64, 64),
        spacing=(1.0, 1.0, 1.0),
        kidneys=[Ellipsoid((32.0, 32.0, 32.0), (12.0, 15.0, 20.0))],
        noise_sigma=0.0,
    )
    fields.update(overrides)
    return PhantomSpec(**fields)


def test_kidney_voxels_stay_in_hu_range():
    """Without noise every kidney voxel carries an HU from the kidney range."""
    image, labels = generate_phantom(single_kidney_spec())
    kidney = image.voxels[labels.voxels == 1]
    assert kidney.size > 0
    assert kidney.min() >= 150.0 and kidney.max() <= 250.0
    assert np.all(image.voxels[labels.voxels == 0] == -100.0)


def test_kidney_volume_matches_ellipsoid():
    """Label-1 voxel count is within 5% of 4/3 pi abc for radii of 10+ voxels."""
    _, labels = generate_phantom(single_kidney_spec())
    expected = 4.0 / 3.0 * math.pi * 12.0 * 15.0 * 20.0
    assert int((labels.voxels == 1).sum()) == pytest.approx(expected, rel=0.05)


def test_same_seed_is_deterministic(phantom_spec):
    """Two generations from one spec are identical, noise included."""
    phantom_spec.noise_sigma = 10.0
    first_image, first_labels = generate_phantom(phantom_spec)
    second_image, second_labels = generate_phantom(phantom_spec)
    np.testing.assert_array_equal(first_image.voxels, second_image.voxels)
    np.testing.assert_array_equal(first_labels.voxels, second_labels.voxels)


def test_tumor_is_labelled_on_its_kidney(phantom):
    """The tumor gets label 2 and its geometry matches the image."""
    image, labels = phantom
    assert (labels.voxels == 2).any()
    assert (labels.voxels == 1).any()
    assert labels.same_geometry(image)
    assert image.dims == (32, 32, 12)


def test_distractor_is_background(phantom_spec):
    """Distractor tissue sits inside the HU window but keeps label 0."""
    image, labels = generate_phantom(phantom_spec)
    distractor = phantom_spec.distractors[0].mask(labels.voxels.shape, phantom_spec.spacing)
    assert not labels.voxels[distractor].any()
    assert np.all(image.voxels[distractor] == 60.0)


def test_floating_tumor_is_rejected():
    """A tumor that touches no kidney violates the phantom contract."""
    spec = single_kidney_spec(tumor=True, tumor_center=(5.0, 5.0, 5.0), tumor_radius=3.0)
    with pytest.raises(GeometryError, match="exactly one kidney"):
        generate_phantom(spec)


def test_tumor_between_two_kidneys_is_rejected():
    """A tumor bridging both kidneys violates the phantom contract."""
    spec = single_kidney_spec(
        kidneys=[Ellipsoid((20.0, 32.0, 32.0), (8.0, 10.0, 10.0)), Ellipsoid((44.0, 32.0, 32.0), (8.0, 10.0, 10.0))],
        tumor=True, tumor_center=(32.0, 32.0, 32.0), tumor_radius=5.0,
    )
    with pytest.raises(GeometryError, match="exactly one kidney"):
        generate_phantom(spec)


@pytest.mark.parametrize("overrides", [
    {"kidneys": [Ellipsoid((32.0, 32.0, 32.0), (0.0, 15.0, 20.0))]},
    {"tumor": True, "tumor_radius": 0.0},
    {"kidneys": [], "tumor": True, "tumor_radius": 3.0},
    {"kidney_hu": (-50.0, 100.0)},
    {"fat_hu": 0.0},
    {"spacing": (1.0, -1.0, 1.0)},
])
def test_invalid_specs(overrides):
    """Degenerate shapes and HU values outside the contract are rejected up front."""
    with pytest.raises(GeometryError):
        generate_phantom(single_kidney_spec(**overrides))


@pytest.mark.parametrize("seed", range(5))
def test_random_specs_are_valid(seed):
    """Random abdomens always keep tumors inside exactly one kidney."""
    rng = np.random.default_rng(seed)
    spec = random_phantom_spec(rng, dims=(64, 64, 24), spacing=(2.0, 2.0, 3.0), with_tumor=True)
    image, labels = generate_phantom(spec)
    assert (labels.voxels == 2).any()
    assert image.dims == (64, 64, 24)


def test_random_spec_without_tumor():
    """with_tumor=False yields kidneys only."""
    spec = random_phantom_spec(np.random.default_rng(3), dims=(64, 64, 24), spacing=(2.0, 2.0, 3.0),
                               with_tumor=False)
    _, labels = generate_phantom(spec)
    assert set(np.unique(labels.voxels)) == {0, 1}


def test_single_kidney_probability():
    """Probability one always removes a kidney."""
    spec = random_phantom_spec(np.random.default_rng(0), single_kidney_probability=1.0)
    assert len(spec.kidneys) == 1
