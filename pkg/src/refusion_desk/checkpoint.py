"""RFCK checkpoint format: config echo plus named float64 parameter blobs."""
from __future__ import annotations

import logging
from pathlib import Path
import struct

import numpy as np

from .config import model_config_text, parse_model_config_text
from .const import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from .exceptions import CheckpointFormatError, ConfigError
from .integrator import export_architecture, parse_architecture
from .model import EncoderModel

_LOGGER = logging.getLogger(__name__)

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
ARCH_KEY = "arch.choices"
SEED_KEY = "init.seed"
TAU_KEY = "fusion.tau"


def encode_checkpoint(model: EncoderModel, seed: int = 0) -> bytes:
    """Serialize the model's config, architecture and every parameter."""
    extra = {SEED_KEY: str(seed), TAU_KEY: repr(model.tau)}
    architecture = model.architecture()
    if model.config.fusion_sites and architecture is not None:
        extra[ARCH_KEY] = export_architecture(architecture).strip().replace("\n", ";")
    config_bytes = model_config_text(model.config, extra).encode("utf-8")
    parameters = model.named_parameters()

    chunks = [CHECKPOINT_MAGIC, _U32.pack(CHECKPOINT_VERSION), _U32.pack(len(config_bytes)), config_bytes]
    chunks.append(_U32.pack(len(parameters)))
    for name in sorted(parameters):
        value = np.ascontiguousarray(parameters[name].value, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.extend([_U32.pack(len(encoded)), encoded, _U32.pack(value.ndim)])
        chunks.extend(_U64.pack(dim) for dim in value.shape)
        chunks.append(value.tobytes())
    return b"".join(chunks)


def save_checkpoint(model: EncoderModel, path: str | Path, seed: int = 0) -> None:
    """Write the last-step checkpoint."""
    data = encode_checkpoint(model, seed)
    Path(path).write_bytes(data)
    _LOGGER.info("Saved checkpoint (%d bytes) to %s", len(data), path)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointFormatError(f"truncated while reading {what}", self.offset)
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(_U32.size, what))[0]

    def u64(self, what: str) -> int:
        return _U64.unpack(self.take(_U64.size, what))[0]


def decode_checkpoint(data: bytes) -> EncoderModel:
    """Rebuild a model and load every blob, strictly by name and shape."""
    reader = _Reader(data)
    if reader.take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad magic", 0)
    version = reader.u32("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", len(CHECKPOINT_MAGIC))
    config_offset = reader.offset
    config_text = reader.take(reader.u32("config length"), "config").decode("utf-8")
    try:
        model_config, extra = parse_model_config_text(config_text)
    except ConfigError as err:
        raise CheckpointFormatError(f"invalid config echo: {err}", config_offset) from err

    model = EncoderModel(model_config, seed=int(extra.get(SEED_KEY, "0")))
    if ARCH_KEY in extra:
        model.apply_architecture(parse_architecture(extra[ARCH_KEY].replace(";", "\n")))
    if TAU_KEY in extra:
        model.set_tau(float(extra[TAU_KEY]))
    parameters = model.named_parameters()

    count = reader.u32("blob count")
    seen: set[str] = set()
    for _ in range(count):
        blob_offset = reader.offset
        name = reader.take(reader.u32("name length"), "name").decode("utf-8")
        ndim = reader.u32("ndim")
        shape = tuple(reader.u64("shape") for _ in range(ndim))
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        values = np.frombuffer(reader.take(8 * size, f"blob {name}"), dtype="<f8").reshape(shape)
        if name not in parameters:
            raise CheckpointFormatError(f"unexpected parameter {name!r}", blob_offset)
        if parameters[name].shape != shape:
            expected = parameters[name].shape
            raise CheckpointFormatError(f"shape mismatch for {name!r}: {shape} vs {expected}", blob_offset)
        parameters[name].value = values.astype(np.float64)
        seen.add(name)
    missing = sorted(set(parameters) - seen)
    if missing:
        raise CheckpointFormatError(f"missing parameters: {', '.join(missing)}", reader.offset)
    if reader.offset != len(data):
        raise CheckpointFormatError("trailing bytes", reader.offset)
    return model


def load_checkpoint(path: str | Path) -> EncoderModel:
    """Read an RFCK file."""
    model = decode_checkpoint(Path(path).read_bytes())
    _LOGGER.info("Loaded checkpoint from %s", path)
    return model
