import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from kidney.errors import (
    BadMagicError,
    MissingParameterError,
    NameCollisionError,
    TruncatedFileError,
)
from kidney.utils.logger import configure_logger
from kidney.utils.volume_utils import atomic_write


logger = logging.getLogger(__name__)
configure_logger(logger)


CHECKPOINT_MAGIC = b"KCK1"
OPTIMIZER_PREFIX = "optim/"


@dataclass
class CheckpointMeta:
    epoch: int = 0
    val_dice: float = 0.0
    info: dict = field(default_factory=dict)


@dataclass
class Checkpoint:
    """Named-parameter snapshot: network tensors, optimizer entries and meta block."""
    params: dict[str, np.ndarray]
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)
    meta: CheckpointMeta = field(default_factory=CheckpointMeta)


class _Reader:
    def __init__(self, blob: bytes, source: str):
        self.blob = blob
        self.offset = 0
        self.source = source

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.blob):
            logger.error(f"{self.source}: truncated while reading {what}")
            raise TruncatedFileError(f"{self.source}: truncated while reading {what}")
        chunk = self.blob[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str, what: str):
        packer = struct.Struct(fmt)
        return packer.unpack(self.take(packer.size, what))


def _entries(params: dict[str, np.ndarray], optimizer_state: dict[str, np.ndarray]) -> list[tuple[str, np.ndarray]]:
    entries = []
    seen = set()
    named = list(params.items())
    named += [(OPTIMIZER_PREFIX + name, value) for name, value in optimizer_state.items()]
    for name, value in named:
        if name in seen:
            logger.error(f"Checkpoint entry name collision: {name}")
            raise NameCollisionError(f"Checkpoint entry name collision: '{name}'")
        seen.add(name)
        entries.append((name, np.asarray(value)))
    return entries


def encode_checkpoint(params: dict[str, np.ndarray], optimizer_state: dict[str, np.ndarray],
                      meta: CheckpointMeta) -> bytes:
    for name in params:
        if name.startswith(OPTIMIZER_PREFIX):
            raise NameCollisionError(f"Parameter name '{name}' collides with the optimizer namespace")
    entries = _entries(params, optimizer_state)

    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(entries))]
    for name, value in entries:
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(value.astype("<f4").tobytes())

    info = json.dumps(meta.info, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<IfI", meta.epoch, meta.val_dice, len(info)))
    chunks.append(info)
    return b"".join(chunks)


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    """Parses a KCK1 byte string.

    Raises:
        BadMagicError: If the magic is not KCK1.
        TruncatedFileError: If any entry or the meta block is cut short.
        NameCollisionError: If two entries share a name.
    """
    reader = _Reader(blob, source)
    magic = reader.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        logger.error(f"{source}: bad magic {magic!r}")
        raise BadMagicError(f"{source}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")

    (count,) = reader.unpack("<I", "entry count")
    params: dict[str, np.ndarray] = {}
    optimizer_state: dict[str, np.ndarray] = {}
    seen = set()
    for index in range(count):
        (length,) = reader.unpack("<H", f"entry {index} name length")
        name = reader.take(length, f"entry {index} name").decode("utf-8")
        if name in seen:
            logger.error(f"{source}: duplicate entry {name}")
            raise NameCollisionError(f"{source}: duplicate entry '{name}'")
        seen.add(name)
        (ndim,) = reader.unpack("<B", f"entry '{name}' rank")
        shape = reader.unpack(f"<{ndim}I", f"entry '{name}' dims")
        size = int(np.prod(shape, dtype=np.int64))
        payload = reader.take(4 * size, f"entry '{name}' payload")
        value = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
        if name.startswith(OPTIMIZER_PREFIX):
            optimizer_state[name[len(OPTIMIZER_PREFIX):]] = value
        else:
            params[name] = value

    epoch, val_dice, info_length = reader.unpack("<IfI", "meta block")
    info = json.loads(reader.take(info_length, "meta info").decode("utf-8")) if info_length else {}
    return Checkpoint(params, optimizer_state, CheckpointMeta(int(epoch), float(val_dice), info))


def save_checkpoint(params: dict[str, np.ndarray], optimizer_state: dict[str, np.ndarray],
                    meta: CheckpointMeta, path: str | Path) -> None:
    """Writes a KCK1 checkpoint atomically.

    Layout: magic "KCK1", u32 entry count, then per entry {u16 name length,
    UTF-8 name, u8 ndim, ndim x u32 dims, f32 payload}; optimizer entries carry
    the "optim/" prefix. The meta block follows: u32 epoch, f32 validation
    Dice, u32 JSON length, UTF-8 JSON (architecture, preset, stage).

    Raises:
        NameCollisionError: If two entries would share a name.
    """
    logger.info(f"Saving checkpoint with {len(params)} parameters to {path}")
    atomic_write(path, encode_checkpoint(params, optimizer_state, meta))


def load_checkpoint(path: str | Path, expected_names: Iterable[str] | None = None) -> Checkpoint:
    """Reads a KCK1 checkpoint and optionally checks that named parameters are present.

    Raises:
        MissingParameterError: If an expected parameter name is absent.
    """
    logger.info(f"Loading checkpoint from {path}")
    with open(path, "rb") as handle:
        checkpoint = decode_checkpoint(handle.read(), source=str(path))
    for name in expected_names or ():
        if name not in checkpoint.params:
            logger.error(f"Checkpoint {path} is missing parameter {name}")
            raise MissingParameterError(f"Checkpoint {path} is missing parameter '{name}'")
    return checkpoint
