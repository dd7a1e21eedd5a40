import logging
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage

from kidney.errors import ConfigError, GeometryError, ShapeError
from kidney.utils.component_utils import Roi, extract_rois
from kidney.utils.logger import configure_logger
from kidney.utils.volume_utils import LabelVolume, Volume, case_paths, read_volume


logger = logging.getLogger(__name__)
configure_logger(logger)


CONTEXT_SLICES = 2
DEGENERATE_STD = 1e-6
MAX_AUGMENT_ATTEMPTS = 10


@dataclass(frozen=True)
class PreprocessConfig:
    """Settings for the reslice -> window -> standardize chain and slab sizes."""
    thickness: float = 3.0
    hu_min: float = -30.0
    hu_max: float = 300.0
    stage1_size: int = 256
    roi_size: int = 256

    def __post_init__(self):
        if self.hu_min >= self.hu_max:
            raise ConfigError(f"hu_min ({self.hu_min}) must be below hu_max ({self.hu_max})")
        if self.thickness <= 0:
            raise ConfigError(f"Slice thickness must be > 0, got {self.thickness}")
        for name in ("stage1_size", "roi_size"):
            size = getattr(self, name)
            if size < 16 or size % 2:
                raise ConfigError(f"{name} must be even and >= 16, got {size}")


class Group(str, Enum):
    B = "B"
    K = "K"
    KT = "KT"


@dataclass
class Slab:
    """One 2.5D sample: slices z-2..z+2 as channels plus the central label slice."""
    image: np.ndarray
    target: np.ndarray
    group: Group
    volume_id: str = ""
    z: int = 0
    fill_value: float = 0.0

    @property
    def provenance(self) -> str:
        return f"{self.volume_id}@z={self.z}"


@dataclass(frozen=True)
class AugmentationPolicy:
    rotation: bool = False
    rotation_p: float = 1.0
    max_angle: float = 30.0
    hflip: bool = False
    hflip_p: float = 0.5
    crop_zoom: bool = False
    crop_zoom_p: float = 0.66
    crop_range: tuple[float, float] = (0.75, 0.95)

    def __post_init__(self):
        for name in ("rotation_p", "hflip_p", "crop_zoom_p"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        low, high = self.crop_range
        if not 0.0 < low <= high <= 1.0:
            raise ConfigError(f"crop_range must satisfy 0 < low <= high <= 1, got {self.crop_range}")

    @property
    def enabled(self) -> bool:
        return self.rotation or self.hflip or self.crop_zoom


@dataclass
class PreparedCase:
    """A volume after the fixed chain, with what is needed to map predictions back."""
    volume_id: str
    image: Volume
    labels: LabelVolume | None
    fill_value: float
    source_spacing: tuple[float, float, float]
    source_depth: int


##################################################
# Volume chain
##################################################


def reslice_z(volume: Volume, target_thickness: float, depth: int | None = None) -> Volume:
    """Resamples a volume along z to a new slice thickness.

    Output slice k samples the input at z = k * target / sz (clamped to the
    last slice). Images are interpolated linearly, labels take the nearest slice.

    Args:
        volume (Volume): Image or LabelVolume.
        target_thickness (float): New sz in mm.
        depth (int | None): Output slice count; defaults to max(1, round(nz * sz / target)).

    Returns:
        Volume: Same type as the input, in-plane grid untouched.

    Raises:
        GeometryError: If the thickness or depth is not positive.
    """
    if target_thickness <= 0:
        raise GeometryError(f"Target thickness must be > 0, got {target_thickness}")
    nz = volume.voxels.shape[0]
    sx, sy, sz = volume.spacing
    if depth is None:
        depth = max(1, int(np.floor(nz * sz / target_thickness + 0.5)))
    if depth < 1:
        raise GeometryError(f"Reslice depth must be >= 1, got {depth}")

    spacing = (sx, sy, target_thickness)
    is_labels = isinstance(volume, LabelVolume)
    if np.isclose(sz, target_thickness, rtol=0.0, atol=1e-6) and depth == nz:
        return type(volume)(volume.voxels.copy(), spacing)

    # A depth rounded up places its last positions past the final slice; the clip repeats that slice.
    positions = np.clip(np.arange(depth) * (target_thickness / sz), 0.0, nz - 1)
    if is_labels:
        nearest = np.floor(positions + 0.5).astype(np.int64)
        return LabelVolume(volume.voxels[np.minimum(nearest, nz - 1)], spacing)

    lower = np.floor(positions).astype(np.int64)
    upper = np.minimum(lower + 1, nz - 1)
    frac = (positions - lower)[:, None, None]
    data = volume.voxels.astype(np.float64)
    voxels = data[lower] * (1.0 - frac) + data[upper] * frac
    return Volume(voxels.astype(np.float32), spacing)


def hu_window(volume: Volume, hu_min: float = -30.0, hu_max: float = 300.0) -> Volume:
    if hu_min >= hu_max:
        raise ConfigError(f"hu_min ({hu_min}) must be below hu_max ({hu_max})")
    return Volume(np.clip(volume.voxels, hu_min, hu_max), volume.spacing)


def standardization_stats(volume: Volume) -> tuple[float, float]:
    data = volume.voxels.astype(np.float64)
    return float(data.mean()), float(data.std())


def standardize(volume: Volume) -> Volume:
    """Shifts and scales a volume to zero mean and unit variance using its own statistics.

    A near-constant volume (std < 1e-6) becomes all zeros.
    """
    mean, std = standardization_stats(volume)
    if std < DEGENERATE_STD:
        return Volume(np.zeros_like(volume.voxels), volume.spacing)
    data = (volume.voxels.astype(np.float64) - mean) / std
    return Volume(data.astype(np.float32), volume.spacing)


def preprocess_case(image: Volume, labels: LabelVolume | None, cfg: PreprocessConfig,
                    volume_id: str = "") -> PreparedCase:
    """Runs reslice -> window -> standardize on an image and reslices its labels.

    Args:
        image (Volume): Raw CT volume in HU.
        labels (LabelVolume | None): Ground truth with the same geometry, if any.
        cfg (PreprocessConfig): Chain settings.
        volume_id (str): Identifier carried into every slab.

    Returns:
        PreparedCase: Standardized image, resliced labels and the standardized hu_min.

    Raises:
        GeometryError: If labels do not share the image geometry.
    """
    if labels is not None and not labels.same_geometry(image):
        logger.error(f"Label geometry of {volume_id} does not match its image")
        raise GeometryError(f"Label geometry of '{volume_id}' does not match its image")

    resliced = reslice_z(image, cfg.thickness)
    windowed = hu_window(resliced, cfg.hu_min, cfg.hu_max)
    mean, std = standardization_stats(windowed)
    fill_value = 0.0 if std < DEGENERATE_STD else (cfg.hu_min - mean) / std
    resliced_labels = reslice_z(labels, cfg.thickness) if labels is not None else None

    logger.debug(f"Prepared {volume_id}: {image.dims} -> {windowed.dims}")
    return PreparedCase(
        volume_id=volume_id,
        image=standardize(windowed),
        labels=resliced_labels,
        fill_value=float(fill_value),
        source_spacing=image.spacing,
        source_depth=image.voxels.shape[0],
    )


def load_prepared_case(directory: str | Path, volume_id: str) -> PreparedCase:
    """Reads a case written by ``preprocess``; the fill value is recovered as the volume minimum."""
    image_path, label_path = case_paths(directory, volume_id)
    image = read_volume(image_path)
    labels = read_volume(label_path) if label_path.exists() else None
    return PreparedCase(
        volume_id=volume_id,
        image=image,
        labels=labels,
        fill_value=float(image.voxels.min()),
        source_spacing=image.spacing,
        source_depth=image.voxels.shape[0],
    )


##################################################
# Slabs
##################################################


def stack_25d(volume: Volume | np.ndarray, z: int) -> np.ndarray:
    """Returns slices z-2..z+2 as a [5,H,W] array, replicating the edge slices."""
    voxels = volume.voxels if isinstance(volume, Volume) else np.asarray(volume)
    nz = voxels.shape[0]
    if not 0 <= z < nz:
        raise GeometryError(f"Slice index {z} outside [0, {nz})")
    indices = np.clip(np.arange(z - CONTEXT_SLICES, z + CONTEXT_SLICES + 1), 0, nz - 1)
    return voxels[indices].astype(np.float32)


def _area_weights(size_in: int, size_out: int) -> np.ndarray:
    scale = size_in / size_out
    weights = np.zeros((size_out, size_in))
    for i in range(size_out):
        start, stop = i * scale, (i + 1) * scale
        for j in range(int(np.floor(start)), min(int(np.ceil(stop)), size_in)):
            weights[i, j] = min(stop, j + 1) - max(start, j)
    return weights / scale


def resize_nearest(array: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour resize of the last two axes; output pixel i reads floor((i + 0.5) * H / height)."""
    h, w = array.shape[-2:]
    rows = np.minimum(np.floor((np.arange(height) + 0.5) * h / height).astype(np.int64), h - 1)
    cols = np.minimum(np.floor((np.arange(width) + 0.5) * w / width).astype(np.int64), w - 1)
    return array[..., rows[:, None], cols[None, :]]


def downsample_xy(array: np.ndarray, size: int, labels: bool = False) -> np.ndarray:
    """Shrinks the last two axes to size x size.

    Images are area-averaged; label slices use nearest neighbour so only
    existing label values survive.

    Raises:
        ShapeError: If the request would enlarge either axis.
    """
    h, w = array.shape[-2:]
    if size > h or size > w:
        logger.error(f"Refusing to upsample {h}x{w} to {size}x{size}")
        raise ShapeError(f"downsample_xy cannot enlarge {h}x{w} to {size}x{size}")
    if labels:
        return resize_nearest(array, size, size)
    if (h, w) == (size, size):
        return array.astype(np.float32)
    out = np.einsum("sh,...hw,tw->...st", _area_weights(h, size), array.astype(np.float64), _area_weights(w, size))
    return out.astype(np.float32)


def classify_group(target: np.ndarray) -> Group:
    target = np.asarray(target)
    if target.size and (target.min() < 0 or target.max() > 2):
        logger.error(f"Label slice holds values outside {{0, 1, 2}}: {np.unique(target)}")
        raise GeometryError("Label slice holds values outside {0, 1, 2}")
    if (target == 2).any():
        return Group.KT
    if (target == 1).any():
        return Group.K
    return Group.B


def build_stage1_slabs(case: PreparedCase, size: int) -> list[Slab]:
    """One downsampled slab per axial slice of a labelled case."""
    if case.labels is None:
        raise GeometryError(f"Case '{case.volume_id}' has no labels to train on")
    slabs = []
    for z in range(case.image.voxels.shape[0]):
        target = downsample_xy(case.labels.voxels[z], size, labels=True)
        slabs.append(Slab(
            image=downsample_xy(stack_25d(case.image, z), size),
            target=np.ascontiguousarray(target, dtype=np.uint8),
            group=classify_group(target),
            volume_id=case.volume_id,
            z=z,
            fill_value=case.fill_value,
        ))
    return slabs


def crop_roi_slab(case: PreparedCase, roi: Roi, z: int) -> np.ndarray:
    return np.ascontiguousarray(roi.window(stack_25d(case.image, z)))


def build_stage2_slabs(case: PreparedCase, roi_size: int) -> list[Slab]:
    """Full-resolution slabs cropped to the ground-truth kidney ROIs."""
    if case.labels is None:
        raise GeometryError(f"Case '{case.volume_id}' has no labels to train on")
    rois = extract_rois(case.labels.voxels > 0, roi_size)
    slabs = []
    for roi in rois:
        for z in roi.z_indices:
            target = np.ascontiguousarray(roi.window(case.labels.voxels[z]), dtype=np.uint8)
            slabs.append(Slab(
                image=crop_roi_slab(case, roi, z),
                target=target,
                group=classify_group(target),
                volume_id=case.volume_id,
                z=z,
                fill_value=case.fill_value,
            ))
    logger.debug(f"Built {len(slabs)} stage-2 slabs from {len(rois)} ROIs of {case.volume_id}")
    return slabs


##################################################
# Augmentation
##################################################


def rotate_slab(image: np.ndarray, target: np.ndarray, angle: float, fill_value: float) -> tuple[np.ndarray, np.ndarray]:
    rotated = ndimage.rotate(image, angle, axes=(1, 2), reshape=False, order=1,
                             mode="constant", cval=fill_value)
    labels = ndimage.rotate(target, angle, axes=(0, 1), reshape=False, order=0, mode="constant", cval=0)
    return rotated.astype(np.float32), labels.astype(np.uint8)


def hflip_slab(image: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.ascontiguousarray(image[..., ::-1]), np.ascontiguousarray(target[..., ::-1])


def crop_zoom_slab(image: np.ndarray, target: np.ndarray, fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Crops the central fraction of the slice and rescales it back to the full size."""
    h, w = target.shape
    rows = (h - fraction * h) / 2 + (np.arange(h) + 0.5) * fraction - 0.5
    cols = (w - fraction * w) / 2 + (np.arange(w) + 0.5) * fraction - 0.5
    grid = np.stack(np.meshgrid(rows, cols, indexing="ij"))
    zoomed = np.stack([ndimage.map_coordinates(channel, grid, order=1, mode="nearest") for channel in image])
    labels = ndimage.map_coordinates(target, grid, order=0, mode="nearest")
    return zoomed.astype(np.float32), labels.astype(np.uint8)


def _augment_once(slab: Slab, policy: AugmentationPolicy, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    image, target = slab.image, slab.target
    if policy.rotation and rng.random() < policy.rotation_p:
        angle = rng.uniform(-policy.max_angle, policy.max_angle)
        image, target = rotate_slab(image, target, angle, slab.fill_value)
    if policy.hflip and rng.random() < policy.hflip_p:
        image, target = hflip_slab(image, target)
    if policy.crop_zoom and rng.random() < policy.crop_zoom_p:
        image, target = crop_zoom_slab(image, target, rng.uniform(*policy.crop_range))
    return image, target


def augment(slab: Slab, policy: AugmentationPolicy, seed: int) -> Slab:
    """Applies the policy to a KT slab; B and K slabs come back untouched.

    A draw that removes every tumor pixel is rejected and redrawn; after
    MAX_AUGMENT_ATTEMPTS failures the original slab is returned.

    Args:
        slab (Slab): Sample to transform.
        policy (AugmentationPolicy): Which transforms may fire.
        seed (int): Seed for this slab's draw.

    Returns:
        Slab: A new slab with the same shape and group KT, or the input itself.
    """
    if slab.group != Group.KT or not policy.enabled:
        return slab
    rng = np.random.default_rng(seed)
    for _ in range(MAX_AUGMENT_ATTEMPTS):
        image, target = _augment_once(slab, policy, rng)
        if (target == 2).any():
            return replace(slab, image=image, target=target)
    logger.warning(f"Augmentation removed the tumor from {slab.provenance} {MAX_AUGMENT_ATTEMPTS} times; "
                   "using the original slab")
    return slab
