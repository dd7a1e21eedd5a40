import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from kidney.errors import ConfigError, GeometryError, IncompatibleCheckpointError, MissingParameterError
from kidney.models.network_model import NetworkInstance, argmax_classes, build_network
from kidney.utils.checkpoint_utils import load_checkpoint
from kidney.utils.component_utils import Roi, extract_rois, filter_small_components
from kidney.utils.logger import configure_logger
from kidney.utils.overlay_utils import write_overlays
from kidney.utils.preprocess_utils import (
    PreparedCase,
    PreprocessConfig,
    crop_roi_slab,
    downsample_xy,
    preprocess_case,
    reslice_z,
    resize_nearest,
    stack_25d,
)
from kidney.utils.volume_utils import IMAGE_SUFFIX, LABEL_SUFFIX, LabelVolume, Volume, list_cases, read_volume, write_volume


logger = logging.getLogger(__name__)
configure_logger(logger)


REFERENCE_SPACING = (0.78, 0.78, 3.0)
ENSEMBLE_MODES = ("mean", "vote")


@dataclass(frozen=True)
class PipelineConfig:
    """Inference settings. A component threshold is given at REFERENCE_SPACING and
    rescaled to the working voxel volume unless ``reference_spacing`` is None.
    """
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    min_component_voxels: int = 5000
    reference_spacing: tuple[float, float, float] | None = REFERENCE_SPACING
    ensemble_mode: str = "mean"
    include_stage1: bool = False
    batch_size: int = 8

    def __post_init__(self):
        if self.ensemble_mode not in ENSEMBLE_MODES:
            raise ConfigError(f"Unknown ensemble mode '{self.ensemble_mode}'. Expected one of {ENSEMBLE_MODES}")
        if self.min_component_voxels < 1:
            raise ConfigError(f"min_component_voxels must be >= 1, got {self.min_component_voxels}")

    def component_threshold(self, spacing: tuple[float, float, float]) -> int:
        if self.reference_spacing is None:
            return self.min_component_voxels
        scaled = self.min_component_voxels * math.prod(self.reference_spacing) / math.prod(spacing)
        return max(1, int(round(scaled)))


@dataclass
class ProbabilityVolume:
    """Class probabilities [nz, 3, H, W] for the slices z0..z0+nz-1 of a full volume or an ROI."""
    probs: np.ndarray
    z0: int = 0
    roi: Roi | None = None

    def check(self, tolerance: float = 1e-5) -> None:
        sums = self.probs.sum(axis=1)
        if not np.all(np.abs(sums - 1.0) <= tolerance):
            raise GeometryError("Class probabilities do not sum to one")


@dataclass
class PredictionModels:
    stage1: NetworkInstance
    stage2: list[NetworkInstance]
    stage1_size: int


##################################################
# Model loading
##################################################


def load_network(path: str | Path) -> tuple[NetworkInstance, dict]:
    """Rebuilds a network from a checkpoint's meta block and loads its weights.

    Raises:
        IncompatibleCheckpointError: If the meta block has no architecture or names/shapes disagree.
    """
    checkpoint = load_checkpoint(path)
    architecture = checkpoint.meta.info.get("architecture")
    if not architecture:
        logger.error(f"Checkpoint {path} carries no architecture description")
        raise IncompatibleCheckpointError(f"Checkpoint {path} carries no architecture description")
    network = build_network(architecture)
    try:
        network.load_state_dict(checkpoint.params)
    except (IncompatibleCheckpointError, MissingParameterError):
        raise
    except ValueError as e:
        raise IncompatibleCheckpointError(f"Checkpoint {path} does not fit its architecture: {e}") from e
    network.eval()
    return network, checkpoint.meta.info


def load_models(stage1_path: str | Path, stage2_paths: list[str | Path], default_size: int) -> PredictionModels:
    stage1, info = load_network(stage1_path)
    stage2 = [load_network(path)[0] for path in stage2_paths]
    if not stage2:
        raise ConfigError("At least one stage-2 checkpoint is required")
    return PredictionModels(stage1, stage2, int(info.get("input_size") or default_size))


##################################################
# Stages
##################################################


def stage1_probabilities(case: PreparedCase, network: NetworkInstance, size: int, batch_size: int = 8) -> np.ndarray:
    _, ny, nx = case.image.voxels.shape
    if ny < size or nx < size:
        logger.error(f"Volume {case.volume_id} is {ny}x{nx}, smaller than the stage-1 size {size}")
        raise GeometryError(f"Volume '{case.volume_id}' is {ny}x{nx}, smaller than the stage-1 size {size}")
    slabs = np.stack([downsample_xy(stack_25d(case.image, z), size) for z in range(case.image.voxels.shape[0])])
    return network.predict_proba(slabs, batch_size)


def stage1_predict(case: PreparedCase, network: NetworkInstance, size: int, batch_size: int = 8) -> LabelVolume:
    """Coarse kidney+tumor meta-class mask at native in-plane resolution.

    Every slice is segmented at size x size, upsampled by nearest neighbour
    and labels 1 and 2 are merged into 1.
    """
    probs = stage1_probabilities(case, network, size, batch_size)
    _, ny, nx = case.image.voxels.shape
    labels = resize_nearest(argmax_classes(probs), ny, nx)
    return LabelVolume((labels > 0).astype(np.uint8), case.image.spacing)


def stage2_predict(case: PreparedCase, roi: Roi, networks: list[NetworkInstance],
                   batch_size: int = 8) -> list[ProbabilityVolume]:
    """Full-resolution probabilities inside one ROI, one ProbabilityVolume per network.

    Raises:
        GeometryError: If the ROI does not fit inside the volume.
    """
    roi.check_bounds(case.image.voxels.shape)
    slabs = np.stack([crop_roi_slab(case, roi, z) for z in roi.z_indices])
    return [ProbabilityVolume(network.predict_proba(slabs, batch_size), roi.z0, roi) for network in networks]


def stage1_roi_probabilities(probs: np.ndarray, case: PreparedCase, roi: Roi) -> ProbabilityVolume:
    _, ny, nx = case.image.voxels.shape
    native = resize_nearest(probs[roi.z0:roi.z1 + 1], ny, nx)
    return ProbabilityVolume(np.ascontiguousarray(roi.window(native)), roi.z0, roi)


def _check_members(members: list[ProbabilityVolume]) -> None:
    if not members:
        raise GeometryError("Ensemble needs at least one probability volume")
    first = members[0]
    for member in members[1:]:
        if member.probs.shape != first.probs.shape or member.z0 != first.z0 or member.roi != first.roi:
            logger.error("Ensemble members disagree on geometry")
            raise GeometryError("Ensemble members must share the same geometry")


def mean_probabilities(members: list[ProbabilityVolume]) -> np.ndarray:
    _check_members(members)
    return np.mean([member.probs.astype(np.float64) for member in members], axis=0)


def ensemble(members: list[ProbabilityVolume], mode: str = "mean") -> np.ndarray:
    """Combines per-model probabilities into ROI-local labels [nz, H, W].

    ``mean`` averages class probabilities; ``vote`` counts each model's argmax.
    Ties go to the higher class index in both modes.

    Raises:
        GeometryError: If the members are empty or disagree on geometry.
        ConfigError: If the mode is unknown.
    """
    if mode == "mean":
        return argmax_classes(mean_probabilities(members))
    if mode == "vote":
        _check_members(members)
        classes = members[0].probs.shape[1]
        votes = sum(np.eye(classes, dtype=np.int64)[argmax_classes(m.probs)].transpose(0, 3, 1, 2) for m in members)
        return argmax_classes(votes)
    raise ConfigError(f"Unknown ensemble mode '{mode}'")


def predict_volume(raw: Volume, models: PredictionModels, cfg: PipelineConfig, volume_id: str = "") -> LabelVolume:
    """Segments one raw CT volume through every stage.

    preprocess -> stage 1 -> size filter -> ROI extraction -> stage 2 ->
    ensemble -> paste into the resliced grid -> size filter -> reslice back.
    Overlapping ROIs keep the label whose mean tumor probability is higher.

    Args:
        raw (Volume): Volume in HU at its original geometry.
        models (PredictionModels): Stage-1 network and the stage-2 ensemble members.
        cfg (PipelineConfig): Inference settings.
        volume_id (str): Used in log records.

    Returns:
        LabelVolume: Labels {0, 1, 2} with exactly the raw geometry.
    """
    logger.info(f"Received request to segment {volume_id or 'volume'} {raw.dims}")
    case = preprocess_case(raw, None, cfg.preprocess, volume_id)
    shape = case.image.voxels.shape
    threshold = cfg.component_threshold(case.image.spacing)

    stage1_probs = None
    if cfg.include_stage1:
        stage1_probs = stage1_probabilities(case, models.stage1, models.stage1_size, cfg.batch_size)
        _, ny, nx = shape
        coarse = LabelVolume((resize_nearest(argmax_classes(stage1_probs), ny, nx) > 0).astype(np.uint8),
                             case.image.spacing)
    else:
        coarse = stage1_predict(case, models.stage1, models.stage1_size, cfg.batch_size)
    coarse = filter_small_components(coarse, threshold)
    rois = extract_rois(coarse, cfg.preprocess.roi_size)

    if not rois:
        logger.warning(f"No kidney found in {volume_id or 'volume'}; returning an all-background mask")
        return LabelVolume(np.zeros(raw.voxels.shape, dtype=np.uint8), raw.spacing)

    labels = np.zeros(shape, dtype=np.uint8)
    best_tumor = np.full(shape, -1.0)
    for roi in rois:
        members = stage2_predict(case, roi, models.stage2, cfg.batch_size)
        if stage1_probs is not None:
            members.append(stage1_roi_probabilities(stage1_probs, case, roi))
        local = ensemble(members, cfg.ensemble_mode)
        tumor = mean_probabilities(members)[:, 2]
        region = (slice(roi.z0, roi.z1 + 1), slice(roi.y0, roi.y1), slice(roi.x0, roi.x1))
        take = tumor > best_tumor[region]
        labels[region] = np.where(take, local, labels[region])
        best_tumor[region] = np.where(take, tumor, best_tumor[region])

    labels = filter_small_components(labels, threshold)
    restored = reslice_z(LabelVolume(labels, case.image.spacing), case.source_spacing[2], depth=case.source_depth)
    logger.info(f"Successfully segmented {volume_id or 'volume'} with {len(rois)} ROIs")
    return LabelVolume(restored.voxels, raw.spacing)


##################################################
# Files
##################################################


def predict_file(image_path: str | Path, out_path: str | Path, models: PredictionModels, cfg: PipelineConfig,
                 overlay_dir: str | Path | None = None) -> LabelVolume:
    image_path = Path(image_path)
    volume_id = image_path.name[:-len(IMAGE_SUFFIX)] if image_path.name.endswith(IMAGE_SUFFIX) else image_path.stem
    raw = read_volume(image_path)
    mask = predict_volume(raw, models, cfg, volume_id)
    write_volume(mask, out_path)
    if overlay_dir is not None:
        write_overlays(raw, mask, overlay_dir, (cfg.preprocess.hu_min, cfg.preprocess.hu_max))
    return mask


def predict_directory(in_dir: str | Path, out_dir: str | Path, models: PredictionModels, cfg: PipelineConfig,
                      jobs: int = 1, overlay_dir: str | Path | None = None) -> list[Path]:
    """Segments every ``<id>.img.kvl`` in a directory into ``<out_dir>/<id>.seg.kvl``, ``jobs`` volumes at a time."""
    volume_ids = list_cases(in_dir)
    if not volume_ids:
        raise GeometryError(f"No image volumes in {in_dir}")
    out_dir = Path(out_dir)

    def run(volume_id: str) -> Path:
        out_path = out_dir / f"{volume_id}{LABEL_SUFFIX}"
        overlays = Path(overlay_dir) / volume_id if overlay_dir is not None else None
        predict_file(Path(in_dir) / f"{volume_id}{IMAGE_SUFFIX}", out_path, models, cfg, overlays)
        return out_path

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        return list(pool.map(run, volume_ids))
