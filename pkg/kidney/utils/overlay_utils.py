import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from kidney.errors import GeometryError  # noqa: E402
from kidney.utils.logger import configure_logger  # noqa: E402
from kidney.utils.volume_utils import LabelVolume, Volume  # noqa: E402


logger = logging.getLogger(__name__)
configure_logger(logger)


CONTOUR_COLORS = {1: "lime", 2: "red"}


def write_overlays(image: Volume, labels: LabelVolume, directory: str | Path,
                   hu_range: tuple[float, float] = (-30.0, 300.0)) -> list[Path]:
    """Saves one grayscale PNG per labelled axial slice with kidney and tumor contours.

    Args:
        image (Volume): CT volume in HU.
        labels (LabelVolume): Mask with the same geometry.
        directory (str | Path): Output directory, created if needed.
        hu_range (tuple): Display window.

    Returns:
        list[Path]: Written files, ``slice_<z>.png``.
    """
    if not labels.same_geometry(image):
        logger.error("Overlay labels do not match the image geometry")
        raise GeometryError("Overlay labels do not match the image geometry")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sx, sy, _ = image.spacing

    written = []
    for z in np.flatnonzero(labels.voxels.reshape(labels.voxels.shape[0], -1).any(axis=1)):
        figure, axis = plt.subplots(figsize=(4, 4 * sy / sx))
        axis.imshow(image.voxels[z], cmap="gray", vmin=hu_range[0], vmax=hu_range[1], interpolation="nearest")
        for value, color in CONTOUR_COLORS.items():
            region = labels.voxels[z] >= value
            if region.any() and not region.all():
                axis.contour(region.astype(float), levels=[0.5], colors=color, linewidths=0.8)
        axis.set_axis_off()
        path = directory / f"slice_{int(z):04d}.png"
        figure.savefig(path, bbox_inches="tight", dpi=100)
        plt.close(figure)
        written.append(path)

    logger.info(f"Wrote {len(written)} overlay images to {directory}")
    return written
