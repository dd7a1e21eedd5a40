import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from kidney.errors import GeometryError
from kidney.utils.logger import configure_logger
from kidney.utils.volume_utils import LabelVolume, Volume


logger = logging.getLogger(__name__)
configure_logger(logger)


FAT_THRESHOLD_HU = -30.0
WINDOW_MAX_HU = 300.0


@dataclass
class Ellipsoid:
    """Axis-aligned ellipsoid in mm, measured from the centre of voxel (0, 0, 0)."""
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    hu: float = 0.0

    def mask(self, shape: tuple[int, int, int], spacing: tuple[float, float, float]) -> np.ndarray:
        nz, ny, nx = shape
        sx, sy, sz = spacing
        z, y, x = np.ogrid[:nz, :ny, :nx]
        cx, cy, cz = self.center
        rx, ry, rz = self.radii
        return (((x * sx - cx) / rx) ** 2 + ((y * sy - cy) / ry) ** 2 + ((z * sz - cz) / rz) ** 2) <= 1.0


@dataclass
class PhantomSpec:
    """Recipe for one synthetic abdominal CT volume with known labels.

    Kidneys are ellipsoids (label 1); an optional tumor sphere (label 2) sits on
    one of them; distractor ellipsoids add label-0 soft tissue inside the HU
    window so localization cannot be solved by thresholding.
    """
    seed: int = 0
    dims: tuple[int, int, int] = (128, 128, 60)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.5)
    kidneys: list[Ellipsoid] = field(default_factory=list)
    kidney_hu: tuple[float, float] = (150.0, 250.0)
    tumor: bool = False
    tumor_center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    tumor_radius: float = 0.0
    tumor_hu: tuple[float, float] = (60.0, 120.0)
    fat_hu: float = -100.0
    distractors: list[Ellipsoid] = field(default_factory=list)
    noise_sigma: float = 10.0

    def validate(self) -> None:
        """Checks the invariants that do not need a rasterized volume.

        Raises:
            GeometryError: On degenerate radii, bad dims/spacing or HU ranges outside the contract.
        """
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise GeometryError(f"Phantom dims must be three positive extents, got {self.dims}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise GeometryError(f"Phantom spacing must be positive, got {self.spacing}")
        for shape in self.kidneys + self.distractors:
            if min(shape.radii) <= 0:
                logger.error(f"Degenerate ellipsoid radii {shape.radii}")
                raise GeometryError(f"Ellipsoid radii must be > 0, got {shape.radii}")
        low, high = self.kidney_hu
        if not (FAT_THRESHOLD_HU < low <= high < WINDOW_MAX_HU):
            raise GeometryError(f"Kidney HU range {self.kidney_hu} must lie inside (-30, 300)")
        if self.fat_hu >= FAT_THRESHOLD_HU:
            raise GeometryError(f"Fat HU {self.fat_hu} must be below -30")
        if self.noise_sigma < 0:
            raise GeometryError("Noise sigma must be >= 0")
        if self.tumor:
            if self.tumor_radius <= 0:
                logger.error(f"Degenerate tumor radius {self.tumor_radius}")
                raise GeometryError(f"Tumor radius must be > 0, got {self.tumor_radius}")
            if not self.kidneys:
                raise GeometryError("A tumor needs at least one kidney to sit on")


def _tumor_mask(spec: PhantomSpec, shape: tuple[int, int, int]) -> np.ndarray:
    radius = spec.tumor_radius
    return Ellipsoid(spec.tumor_center, (radius, radius, radius)).mask(shape, spec.spacing)


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, LabelVolume]:
    """Rasterizes a PhantomSpec into an image volume and its label volume.

    Deterministic given ``spec.seed``.

    Args:
        spec (PhantomSpec): The recipe.

    Returns:
        tuple[Volume, LabelVolume]: Image in HU and labels {0, 1, 2}.

    Raises:
        GeometryError: If the PhantomSpec is invalid or the tumor does not touch exactly one kidney.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    nx, ny, nz = spec.dims
    shape = (nz, ny, nx)

    image = np.full(shape, spec.fat_hu, dtype=np.float32)
    labels = np.zeros(shape, dtype=np.uint8)

    for distractor in spec.distractors:
        image[distractor.mask(shape, spec.spacing)] = distractor.hu

    kidney_masks = []
    for kidney in spec.kidneys:
        mask = kidney.mask(shape, spec.spacing)
        image[mask] = rng.uniform(*spec.kidney_hu)
        labels[mask] = 1
        kidney_masks.append(mask)

    if spec.tumor:
        tumor = _tumor_mask(spec, shape)
        if not tumor.any():
            raise GeometryError("Tumor sphere does not cover any voxel")
        grown = ndimage.binary_dilation(tumor, structure=np.ones((3, 3, 3), dtype=bool))
        touched = sum(bool((grown & mask).any()) for mask in kidney_masks)
        if touched != 1:
            logger.error(f"Tumor touches {touched} kidneys")
            raise GeometryError(f"Tumor must overlap or abut exactly one kidney, touches {touched}")
        image[tumor] = rng.uniform(*spec.tumor_hu)
        labels[tumor] = 2

    if spec.noise_sigma > 0:
        image += rng.normal(0.0, spec.noise_sigma, size=shape).astype(np.float32)

    logger.debug(f"Generated phantom seed={spec.seed} with {int((labels == 1).sum())} kidney "
                 f"and {int((labels == 2).sum())} tumor voxels")
    return Volume(image, spec.spacing), LabelVolume(labels, spec.spacing)


def random_phantom_spec(rng: np.random.Generator, dims: tuple[int, int, int] = (128, 128, 60),
                        spacing: tuple[float, float, float] = (1.0, 1.0, 1.5), with_tumor: bool = True,
                        single_kidney_probability: float = 0.1, noise_sigma: float = 10.0) -> PhantomSpec:
    """Draws a plausible abdomen: two kidneys (sometimes one), a liver stand-in, a spine and maybe a tumor.

    Args:
        rng (np.random.Generator): Source of randomness.
        dims (tuple): (nx, ny, nz) voxels.
        spacing (tuple): (sx, sy, sz) mm.
        with_tumor (bool): Whether to place a tumor on one kidney.
        single_kidney_probability (float): Chance of a post-nephrectomy phantom.
        noise_sigma (float): Gaussian noise in HU.

    Returns:
        PhantomSpec: A spec that satisfies every PhantomSpec invariant.
    """
    fx, fy, fz = (d * s for d, s in zip(dims, spacing))
    kidneys = []
    sides = [-1.0, 1.0]
    if rng.random() < single_kidney_probability:
        sides = [float(rng.choice(sides))]
    for side in sides:
        center = (fx * (0.5 + side * rng.uniform(0.22, 0.27)),
                  fy * rng.uniform(0.52, 0.58),
                  fz * rng.uniform(0.45, 0.55))
        radii = (fx * 0.11 * rng.uniform(0.85, 1.15),
                 fy * 0.15 * rng.uniform(0.85, 1.15),
                 fz * 0.30 * rng.uniform(0.85, 1.15))
        kidneys.append(Ellipsoid(center, radii))

    distractors = [
        Ellipsoid((fx * rng.uniform(0.3, 0.4), fy * 0.22, fz * 0.5),
                  (fx * 0.2, fy * 0.1, fz * 0.45), hu=float(rng.uniform(50.0, 70.0))),
        Ellipsoid((fx * 0.5, fy * 0.75, fz * 0.5),
                  (fx * 0.07, fy * 0.07, fz * 10.0), hu=float(rng.uniform(240.0, 290.0))),
    ]

    spec = PhantomSpec(
        seed=int(rng.integers(0, 2**31)),
        dims=tuple(dims),
        spacing=tuple(spacing),
        kidneys=kidneys,
        distractors=distractors,
        noise_sigma=noise_sigma,
    )
    if with_tumor:
        host = kidneys[int(rng.integers(len(kidneys)))]
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        depth = rng.uniform(0.6, 1.05)
        spec.tumor = True
        spec.tumor_center = tuple(float(c + r * d * depth) for c, r, d in zip(host.center, host.radii, direction))
        spec.tumor_radius = float(min(host.radii[:2]) * rng.uniform(0.35, 0.7))
    return spec
