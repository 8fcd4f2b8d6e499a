"""
Checkpoint files.

Layout: an 8-byte little-endian header length, a UTF-8 JSON header, then the
raw little-endian tensor blobs at the offsets listed in the header. Tensors
keep the model's float width.
"""

import json
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np

from src.config import VERSION, RunConfig
from src.errors import CheckpointMismatch
from src.field import RadianceModel
from src.geometry import SceneBounds
from src.optim import AdamState

logger = logging.getLogger("HybridTrainer")

FORMAT = "hybridnerf-checkpoint/1"
_LENGTH = struct.Struct("<Q")


@dataclass
class Checkpoint:
    header: dict[str, Any]
    tensors: dict[str, np.ndarray]

    @property
    def step(self) -> int:
        return int(self.header["step"])

    @property
    def config(self) -> RunConfig:
        return RunConfig.model_validate(self.header["config"])

    @property
    def bounds(self) -> SceneBounds:
        return SceneBounds.model_validate(self.header["bounds"])

    @property
    def num_images(self) -> int:
        return int(self.header["num_images"])

    @property
    def vertical_scale(self) -> Optional[float]:
        """Plane altitude stretch the model was trained with."""
        value = self.header.get("vertical_scale")
        return None if value is None else float(value)

    def parameters(self) -> dict[str, np.ndarray]:
        return {n: t for n, t in self.tensors.items() if not n.startswith(("adam.m/", "adam.v/"))}

    def adam_state(self) -> Optional[AdamState]:
        if "adam_step" not in self.header:
            return None
        params = self.parameters()
        return AdamState(
            m={n: self.tensors[f"adam.m/{n}"].copy() for n in params},
            v={n: self.tensors[f"adam.v/{n}"].copy() for n in params},
            step=int(self.header["adam_step"]),
        )


def _little_endian(array: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<"))


def save_checkpoint(
    path: Path,
    model: RadianceModel,
    config: RunConfig,
    bounds: SceneBounds,
    step: int,
    adam: Optional[AdamState] = None,
    rng_state: Optional[dict] = None,
) -> Path:
    """Write atomically: the file appears complete or not at all."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = dict(model.parameters())
    if adam is not None:
        tensors.update({f"adam.m/{n}": m for n, m in adam.m.items()})
        tensors.update({f"adam.v/{n}": v for n, v in adam.v.items()})

    table, offset = [], 0
    blobs = []
    for name, array in tensors.items():
        data = _little_endian(array)
        table.append(
            {"name": name, "dtype": data.dtype.str, "shape": list(data.shape), "offset": offset}
        )
        blobs.append(data)
        offset += data.nbytes

    header = {
        "format": FORMAT,
        "version": VERSION,
        "step": step,
        "config": config.snapshot(),
        "bounds": bounds.model_dump(mode="json"),
        "num_images": model.num_images,
        "vertical_scale": model.encoding.planes.vertical_scale,
        "tensors": table,
    }
    if adam is not None:
        header["adam_step"] = adam.step
    if rng_state is not None:
        header["rng_state"] = rng_state
    encoded = json.dumps(header).encode("utf-8")

    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_LENGTH.pack(len(encoded)))
        f.write(encoded)
        for data in blobs:
            f.write(data.tobytes())
    os.replace(tmp, path)
    logger.info(f"Checkpoint saved - step {step} to {path}", extra={"step": step, "bytes": offset})
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointMismatch(f"Could not read checkpoint {path}: {e}") from e
    if len(raw) < _LENGTH.size:
        raise CheckpointMismatch(f"{path} is too short to be a checkpoint")
    (length,) = _LENGTH.unpack_from(raw)
    try:
        header = json.loads(raw[_LENGTH.size : _LENGTH.size + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointMismatch(f"{path} has an unreadable header: {e}") from e
    if header.get("format") != FORMAT:
        raise CheckpointMismatch(f"{path} is not a {FORMAT} file (got {header.get('format')})")

    base = _LENGTH.size + length
    tensors = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        if start + count * dtype.itemsize > len(raw):
            raise CheckpointMismatch(f"{path} is truncated at tensor {entry['name']}")
        tensors[entry["name"]] = (
            np.frombuffer(raw, dtype=dtype, count=count, offset=start)
            .reshape(entry["shape"])
            .astype(dtype.newbyteorder("="))
        )
    return Checkpoint(header, tensors)


def copy_into_model(checkpoint: Checkpoint, model: RadianceModel) -> None:
    """Overwrite the model's arrays in place, checking names and shapes."""
    stored = checkpoint.parameters()
    live = model.parameters()
    if set(stored) != set(live):
        missing = sorted(set(live) - set(stored))
        extra = sorted(set(stored) - set(live))
        raise CheckpointMismatch(
            f"checkpoint tensors do not match the model (missing {missing[:3]}, unexpected {extra[:3]})"
        )
    for name, array in live.items():
        if stored[name].shape != array.shape:
            raise CheckpointMismatch(
                f"{name}: checkpoint shape {stored[name].shape} vs model {array.shape}"
            )
        array[...] = stored[name]


def restore_model(checkpoint: Checkpoint) -> RadianceModel:
    """Rebuild the model described by the checkpoint header and load its tensors."""
    config = checkpoint.config
    encoding = config.encoding
    if encoding.planes.vertical_scale is None and checkpoint.vertical_scale is not None:
        planes = encoding.planes.model_copy(update={"vertical_scale": checkpoint.vertical_scale})
        encoding = encoding.model_copy(update={"planes": planes})
    model = RadianceModel(
        encoding,
        config.field,
        checkpoint.bounds,
        checkpoint.num_images,
        seed=config.optim.seed,
        dtype=config.optim.dtype,
    )
    copy_into_model(checkpoint, model)
    return model


def check_compatible(checkpoint: Checkpoint, config: RunConfig) -> None:
    """The sections that shape the model must agree with the requested config."""
    stored = checkpoint.config
    for section in ("encoding", "field"):
        if getattr(stored, section) != getattr(config, section):
            raise CheckpointMismatch(
                f"checkpoint was trained with a different [{section}] configuration"
            )
