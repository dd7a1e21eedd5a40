import logging
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from kidney.errors import (
    BadMagicError,
    GeometryError,
    TruncatedFileError,
    UnknownDtypeError,
)
from kidney.utils.logger import configure_logger


logger = logging.getLogger(__name__)
configure_logger(logger)


VOLUME_MAGIC = b"KVL1"
DTYPE_IMAGE = 0
DTYPE_LABELS = 1
HEADER = struct.Struct("<4sB3I3f")

IMAGE_SUFFIX = ".img.kvl"
LABEL_SUFFIX = ".seg.kvl"


@dataclass
class Volume:
    """CT image in HU. ``voxels`` has numpy shape (nz, ny, nx), i.e. x varies fastest.

    Spacing is (sx, sy, sz) in mm per voxel.
    """
    voxels: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        self.spacing = tuple(float(np.float32(s)) for s in self.spacing)
        self.validate()

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.voxels.shape
        return nx, ny, nz

    def validate(self) -> None:
        """Checks the geometry invariants.

        Raises:
            GeometryError: If the grid is not 3-D, any extent is zero or any spacing is not positive.
        """
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise GeometryError(f"Volume must be a non-empty 3-D grid, got shape {self.voxels.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise GeometryError(f"Spacing must be three positive values, got {self.spacing}")

    def same_geometry(self, other: "Volume") -> bool:
        return self.voxels.shape == other.voxels.shape and np.allclose(self.spacing, other.spacing)


@dataclass
class LabelVolume(Volume):
    """Label grid with 0=background, 1=kidney, 2=tumor, same geometry rules as Volume."""

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.uint8)
        self.spacing = tuple(float(np.float32(s)) for s in self.spacing)
        self.validate()

    def validate(self) -> None:
        super().validate()
        if self.voxels.size and self.voxels.max() > 2:
            raise GeometryError("Labels must lie in {0, 1, 2}")


##################################################
# KVL1 format
##################################################


def atomic_write(path: str | Path, payload: bytes) -> None:
    """Writes bytes to a temp file in the target directory, then renames it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except Exception:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def encode_volume(volume: Volume) -> bytes:
    is_labels = isinstance(volume, LabelVolume)
    dtype_code = DTYPE_LABELS if is_labels else DTYPE_IMAGE
    header = HEADER.pack(VOLUME_MAGIC, dtype_code, *volume.dims, *volume.spacing)
    payload = volume.voxels.astype("<u1" if is_labels else "<f4").tobytes()
    return header + payload


def decode_volume(blob: bytes, source: str = "<bytes>") -> Volume:
    """Parses a KVL1 byte string.

    Raises:
        TruncatedFileError: If the header or payload is shorter than declared.
        BadMagicError: If the magic is not KVL1.
        UnknownDtypeError: If the dtype code is neither 0 nor 1.
    """
    if len(blob) < 4:
        raise TruncatedFileError(f"{source}: file too short for a KVL1 header")
    if blob[:4] != VOLUME_MAGIC:
        logger.error(f"{source}: bad magic {blob[:4]!r}")
        raise BadMagicError(f"{source}: bad magic {blob[:4]!r}, expected {VOLUME_MAGIC!r}")
    if len(blob) < HEADER.size:
        raise TruncatedFileError(f"{source}: file too short for a KVL1 header")

    _, dtype_code, nx, ny, nz, sx, sy, sz = HEADER.unpack_from(blob)
    if dtype_code == DTYPE_IMAGE:
        dtype, cls = np.dtype("<f4"), Volume
    elif dtype_code == DTYPE_LABELS:
        dtype, cls = np.dtype("<u1"), LabelVolume
    else:
        logger.error(f"{source}: unknown dtype code {dtype_code}")
        raise UnknownDtypeError(f"{source}: unknown dtype code {dtype_code}")

    expected = nx * ny * nz * dtype.itemsize
    payload = blob[HEADER.size:]
    if len(payload) < expected:
        logger.error(f"{source}: payload has {len(payload)} bytes, expected {expected}")
        raise TruncatedFileError(f"{source}: payload has {len(payload)} bytes, expected {expected}")

    voxels = np.frombuffer(payload, dtype=dtype, count=nx * ny * nz).reshape(nz, ny, nx)
    return cls(voxels.copy(), (sx, sy, sz))


def write_volume(volume: Volume, path: str | Path) -> None:
    """Writes an image or label volume in the little-endian KVL1 format.

    Layout: magic "KVL1", u8 dtype (0 image f32, 1 labels u8), 3 x u32 dims,
    3 x f32 spacing, then the voxels with x fastest.
    """
    atomic_write(path, encode_volume(volume))
    logger.debug(f"Wrote volume {volume.dims} to {path}")


def read_volume(path: str | Path) -> Volume:
    with open(path, "rb") as handle:
        blob = handle.read()
    return decode_volume(blob, source=str(path))


##################################################
# Case directories
##################################################


def list_cases(directory: str | Path) -> list[str]:
    """Returns the sorted volume ids that have an image file in the directory."""
    directory = Path(directory)
    return sorted(p.name[:-len(IMAGE_SUFFIX)] for p in directory.glob(f"*{IMAGE_SUFFIX}"))


def list_label_cases(directory: str | Path) -> list[str]:
    directory = Path(directory)
    return sorted(p.name[:-len(LABEL_SUFFIX)] for p in directory.glob(f"*{LABEL_SUFFIX}"))


def case_paths(directory: str | Path, volume_id: str) -> tuple[Path, Path]:
    directory = Path(directory)
    return directory / f"{volume_id}{IMAGE_SUFFIX}", directory / f"{volume_id}{LABEL_SUFFIX}"
