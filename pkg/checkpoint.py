"""
Weight checkpoint file.

Layout (little-endian): magic b"CRPNW1", u32 tensor count, then a manifest of
(u32 name length, utf-8 name, u32 ndim, u32 dims...) per tensor, then every
tensor's float32 data in manifest order.

Besides the model tensors (`<param>.weight`, `<param>.bias`,
`stats.stage<t>.mean/std`) a training checkpoint carries the momentum buffers
(`momentum.<param>.weight/bias`) and the completed-epoch counter (`meta.epoch`).
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from cascade_pipeline import CascadeModel, PipelineConfig
from errors import FormatError
from synth_data import ByteReader

logger = logging.getLogger(__name__)

MAGIC = b"CRPNW1"


@dataclass
class Checkpoint:
    model: CascadeModel
    buffers: Optional[List[np.ndarray]] = None
    epoch: int = 0


def _parameter_names(model: CascadeModel) -> List[str]:
    names = []
    for name in model.params:
        names.extend([f"{name}.weight", f"{name}.bias"])
    return names


def write_tensors(tensors: Dict[str, np.ndarray], path) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name, array in tensors.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", array.ndim))
            f.write(struct.pack(f"<{array.ndim}I", *array.shape))
        for array in tensors.values():
            f.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_tensors(path) -> Dict[str, np.ndarray]:
    reader = ByteReader(Path(path).read_bytes())
    if reader.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("bad magic, not a CRPNW1 checkpoint", 0)
    (count,) = reader.unpack("<I", "tensor count")

    manifest = []
    for _ in range(count):
        (length,) = reader.unpack("<I", "name length")
        start = reader.offset
        try:
            name = reader.take(length, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid utf-8", start)
        (ndim,) = reader.unpack("<I", "tensor rank")
        dims = reader.unpack(f"<{ndim}I", "tensor dims") if ndim else ()
        manifest.append((name, tuple(dims)))

    tensors = {}
    for name, dims in manifest:
        size = int(np.prod(dims)) if dims else 1
        tensors[name] = reader.floats(size, f"data of '{name}'").reshape(dims)
    if not reader.exhausted:
        raise FormatError(f"{len(reader.data) - reader.offset} trailing bytes", reader.offset)
    return tensors


def save_checkpoint(path, model: CascadeModel, buffers: List[np.ndarray] = None, epoch: int = 0) -> None:
    tensors = dict(model.tensors())
    if buffers is not None:
        for name, buf in zip(_parameter_names(model), buffers):
            tensors[f"momentum.{name}"] = buf
    tensors["meta.epoch"] = np.array([epoch], dtype=np.float32)
    write_tensors(tensors, path)
    logger.info("wrote checkpoint %s (%d tensors, epoch %d)", path, len(tensors), epoch)


def load_checkpoint(path, cfg: PipelineConfig) -> Checkpoint:
    """Rebuild model (and training state when present) for the architecture in cfg"""
    tensors = read_tensors(path)
    model = CascadeModel.from_tensors(tensors, cfg)

    names = _parameter_names(model)
    buffers = None
    if all(f"momentum.{n}" in tensors for n in names):
        buffers = [tensors[f"momentum.{n}"] for n in names]
    epoch = int(tensors["meta.epoch"][0]) if "meta.epoch" in tensors else 0
    return Checkpoint(model, buffers, epoch)
