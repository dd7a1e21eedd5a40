import numpy as np
import pytest

from kidney.models.res_net_model import ResNet, ResNetSpec
from kidney.models.res_unet_model import ResUNet, ResUNetSpec
from kidney.models.network_model import InitSpec
from kidney.utils.phantom_utils import Ellipsoid, PhantomSpec, generate_phantom
from kidney.utils.preprocess_utils import PreprocessConfig, preprocess_case


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow training tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def phantom_spec():
    """Two kidneys on a 32x32x12 grid, a tumor on the left one, no noise."""
    return PhantomSpec(
        seed=7,
        dims=(32, 32, 12),
        spacing=(2.0, 2.0, 3.0),
        kidneys=[
            Ellipsoid((18.0, 34.0, 18.0), (7.0, 10.0, 12.0)),
            Ellipsoid((46.0, 34.0, 18.0), (7.0, 10.0, 12.0)),
        ],
        tumor=True,
        tumor_center=(11.0, 34.0, 18.0),
        tumor_radius=4.0,
        distractors=[Ellipsoid((32.0, 10.0, 18.0), (12.0, 5.0, 15.0), hu=60.0)],
        noise_sigma=0.0,
    )


@pytest.fixture
def phantom(phantom_spec):
    return generate_phantom(phantom_spec)


@pytest.fixture
def preprocess_cfg():
    return PreprocessConfig(thickness=3.0, stage1_size=16, roi_size=16)


@pytest.fixture
def prepared_case(phantom, preprocess_cfg):
    image, labels = phantom
    return preprocess_case(image, labels, preprocess_cfg, "phantom_000")


@pytest.fixture
def tiny_unet():
    return ResUNet(ResUNetSpec(base_channels=2), InitSpec(seed=3))


@pytest.fixture
def tiny_resnet():
    return ResNet(ResNetSpec(channels=(2, 4, 4), blocks=1), InitSpec(scheme="he_uniform", seed=3))
