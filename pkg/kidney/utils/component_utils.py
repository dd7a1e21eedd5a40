import logging
from dataclasses import dataclass

import numpy as np
from skimage.measure import label, regionprops

from kidney.errors import ConfigError, GeometryError
from kidney.utils.logger import configure_logger
from kidney.utils.volume_utils import LabelVolume


logger = logging.getLogger(__name__)
configure_logger(logger)


CONNECTIVITY = {6: 1, 18: 2, 26: 3}
ROI_Z_PADDING = 2


@dataclass(frozen=True)
class Component:
    """A labelled foreground region; bbox is (z0, y0, x0, z1, y1, x1) with exclusive upper bounds."""
    label: int
    voxels: int
    bbox: tuple[int, int, int, int, int, int]


@dataclass(frozen=True)
class Roi:
    """Square in-plane window of a volume plus an inclusive z range."""
    kidney_index: int
    x0: int
    y0: int
    z0: int
    z1: int
    size: int

    @property
    def x1(self) -> int:
        return self.x0 + self.size

    @property
    def y1(self) -> int:
        return self.y0 + self.size

    @property
    def z_indices(self) -> range:
        return range(self.z0, self.z1 + 1)

    def window(self, array: np.ndarray) -> np.ndarray:
        """Crops the last two axes ([..., y, x]) to the window."""
        return array[..., self.y0:self.y1, self.x0:self.x1]

    def check_bounds(self, shape: tuple[int, int, int]) -> None:
        nz, ny, nx = shape
        if self.x0 < 0 or self.y0 < 0 or self.x1 > nx or self.y1 > ny or self.z0 < 0 or self.z1 >= nz or self.z1 < self.z0:
            logger.error(f"ROI {self} lies outside a volume of shape {shape}")
            raise GeometryError(f"ROI {self} lies outside a volume of shape {shape}")


def _binary(mask) -> np.ndarray:
    voxels = mask.voxels if isinstance(mask, LabelVolume) else np.asarray(mask)
    return voxels > 0


def label_components(mask, connectivity: int = 26) -> np.ndarray:
    if connectivity not in CONNECTIVITY:
        raise ConfigError(f"Connectivity must be one of {sorted(CONNECTIVITY)}, got {connectivity}")
    return label(_binary(mask), connectivity=CONNECTIVITY[connectivity])


def connected_components(mask, connectivity: int = 26) -> list[Component]:
    """Labels the foreground of a 3D mask and describes every component.

    Args:
        mask (LabelVolume | np.ndarray): Any non-zero voxel is foreground.
        connectivity (int): 6, 18 or 26.

    Returns:
        list[Component]: Sorted by descending voxel count, ties by label id.
    """
    labelled = label_components(mask, connectivity)
    components = [Component(int(region.label), int(region.area), tuple(int(b) for b in region.bbox))
                  for region in regionprops(labelled)]
    return sorted(components, key=lambda c: (-c.voxels, c.label))


def filter_small_components(mask, min_voxels: int, connectivity: int = 26):
    """Removes every component with min_voxels or fewer voxels; labels of survivors are kept.

    Returns the same type it was given (LabelVolume or array).

    Raises:
        ConfigError: If min_voxels < 1.
    """
    if min_voxels < 1:
        raise ConfigError(f"min_voxels must be >= 1, got {min_voxels}")
    voxels = mask.voxels if isinstance(mask, LabelVolume) else np.asarray(mask)
    labelled = label_components(voxels, connectivity)
    counts = np.bincount(labelled.ravel())
    keep = counts > min_voxels
    keep[0] = False
    filtered = np.where(keep[labelled], voxels, 0).astype(voxels.dtype)
    removed = int((counts[1:] <= min_voxels).sum())
    if removed:
        logger.debug(f"Removed {removed} components of <= {min_voxels} voxels")
    if isinstance(mask, LabelVolume):
        return LabelVolume(filtered, mask.spacing)
    return filtered


def _place(low: int, high: int, size: int, extent: int) -> int:
    start = (low + high + 1 - size) // 2
    return int(min(max(start, 0), extent - size))


def extract_rois(mask, roi_size: int, max_rois: int = 2) -> list[Roi]:
    """Builds one fixed-size window per kidney candidate, largest components first.

    Each window is centred on the component's x-y bounding box and shifted
    back inside the image at the borders; its z range is the component's z
    extent padded by two slices and clamped.

    Args:
        mask (LabelVolume | np.ndarray): Coarse meta-class mask (nz, ny, nx).
        roi_size (int): Window edge in pixels.
        max_rois (int): How many components to keep.

    Returns:
        list[Roi]: Empty when the mask has no foreground.

    Raises:
        GeometryError: If the window is larger than the image.
    """
    binary = _binary(mask)
    nz, ny, nx = binary.shape
    if roi_size > nx or roi_size > ny:
        logger.error(f"ROI size {roi_size} exceeds the {ny}x{nx} image")
        raise GeometryError(f"ROI size {roi_size} exceeds the {ny}x{nx} image")

    rois = []
    for index, component in enumerate(connected_components(binary)[:max_rois]):
        z0, y0, x0, z1, y1, x1 = component.bbox
        rois.append(Roi(
            kidney_index=index,
            x0=_place(x0, x1 - 1, roi_size, nx),
            y0=_place(y0, y1 - 1, roi_size, ny),
            z0=max(0, z0 - ROI_Z_PADDING),
            z1=min(nz - 1, z1 - 1 + ROI_Z_PADDING),
            size=roi_size,
        ))
    return rois
