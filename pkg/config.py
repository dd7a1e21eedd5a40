import os
from dotenv import dotenv_values

from kidney.errors import ConfigError
from kidney.models.pipeline_model import REFERENCE_SPACING, PipelineConfig
from kidney.models.trainer_model import TrainConfig
from kidney.utils.preprocess_utils import PreprocessConfig


class ProductionConfig():
    """Full-resolution configuration."""
    SEED = int(os.getenv("KIDNEY_SEED", 0))
    JOBS = int(os.getenv("KIDNEY_JOBS", 1))

    # Preprocessing
    THICKNESS = 3.0
    HU_MIN = -30.0
    HU_MAX = 300.0
    STAGE1_SIZE = 256
    ROI_SIZE = 256

    # Training
    MAX_EPOCHS = 250
    BATCH_SIZE = 32
    L2_SCALE = 0.1
    VALIDATION_FRACTION = 0.1
    BASE_CHANNELS = 32
    RES_NET_BLOCKS = 6

    # Inference; the component threshold counts voxels at REFERENCE_SPACING and is rescaled
    MIN_COMPONENT_VOXELS = 5000
    SCALE_COMPONENT_THRESHOLD = True
    ENSEMBLE_MODE = "mean"
    INCLUDE_STAGE1 = False
    INFERENCE_BATCH_SIZE = 8

    # Phantoms
    PHANTOM_DIMS = (128, 128, 60)
    PHANTOM_SPACING = (1.0, 1.0, 1.5)
    TUMOR_FRACTION = 0.8
    SINGLE_KIDNEY_PROBABILITY = 0.1
    NOISE_SIGMA = 10.0


class DeskConfig(ProductionConfig):
    """CPU-sized preset: smaller stage-1 and ROI windows, fewer epochs."""
    STAGE1_SIZE = 64
    ROI_SIZE = 64
    MAX_EPOCHS = 40


class TestConfig(DeskConfig):
    """Tiny shapes for the test suite."""
    STAGE1_SIZE = 16
    ROI_SIZE = 16
    MAX_EPOCHS = 1
    BATCH_SIZE = 6
    BASE_CHANNELS = 4
    RES_NET_BLOCKS = 1
    # Counted at the working spacing
    MIN_COMPONENT_VOXELS = 20
    SCALE_COMPONENT_THRESHOLD = False
    PHANTOM_DIMS = (32, 32, 12)
    PHANTOM_SPACING = (4.0, 4.0, 6.0)


TRAIN_KEYS = ("max_epochs", "batch_size", "l2_scale", "validation_fraction", "seed",
              "base_channels", "res_net_blocks", "jobs")

PRESET_CLASSES = {
    "production": ProductionConfig,
    "desk": DeskConfig,
    "test": TestConfig,
}


def _coerce(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            if raw.strip().lower() not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return raw.strip().lower() in ("1", "true", "yes")
        if isinstance(default, tuple):
            return tuple(type(default[0])(part) for part in raw.split(","))
        return type(default)(raw)
    except ValueError:
        raise ConfigError(f"Config key '{key}' has invalid value '{raw}'") from None


def load_settings(config_class=DeskConfig, path: str | None = None, **overrides) -> dict:
    """Resolves settings: class defaults, then a key=value file, then explicit overrides.

    Keys in the file are the lower-case attribute names, e.g. ``hu_min=-30``.

    Args:
        config_class: One of the configuration classes above.
        path (str | None): Optional key=value file.
        **overrides: Values from the command line; None entries are ignored.

    Returns:
        dict: Lower-case keys to typed values.

    Raises:
        ConfigError: On an unknown key or a value of the wrong type.
    """
    settings = {name.lower(): getattr(config_class, name) for name in dir(config_class) if name.isupper()}
    if path is not None:
        if not os.path.exists(path):
            raise FileNotFoundError(f"Config file {path} does not exist")
        for key, raw in dotenv_values(path).items():
            key = key.lower()
            if key not in settings:
                raise ConfigError(f"Unknown config key '{key}' in {path}")
            if raw is not None:
                settings[key] = _coerce(key, raw, settings[key])
    for key, value in overrides.items():
        if value is not None:
            if key not in settings:
                raise ConfigError(f"Unknown setting '{key}'")
            settings[key] = value
    return settings


def preprocess_config(settings: dict) -> PreprocessConfig:
    return PreprocessConfig(
        thickness=float(settings["thickness"]),
        hu_min=float(settings["hu_min"]),
        hu_max=float(settings["hu_max"]),
        stage1_size=int(settings["stage1_size"]),
        roi_size=int(settings["roi_size"]),
    )


def pipeline_config(settings: dict) -> PipelineConfig:
    return PipelineConfig(
        preprocess=preprocess_config(settings),
        min_component_voxels=int(settings["min_component_voxels"]),
        reference_spacing=REFERENCE_SPACING if settings["scale_component_threshold"] else None,
        ensemble_mode=str(settings["ensemble_mode"]),
        include_stage1=bool(settings["include_stage1"]),
        batch_size=int(settings["inference_batch_size"]),
    )


def train_config(settings: dict, preset: str, stage: int) -> TrainConfig:
    overrides = {key: settings[key] for key in TRAIN_KEYS}
    return TrainConfig.from_preset(preset, stage=stage, **overrides)
