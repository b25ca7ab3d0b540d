"""Binary checkpoint container shared by the SRGAN, the classifier and φ weights.

Layout (all integers little-endian)::

    magic            8 bytes, identifies the payload kind
    version          u32
    metadata length  u64, followed by UTF-8 JSON metadata
    tensor count     u32
    per tensor       u16 name length, name, u8 dtype code, u8 rank,
                     rank x u64 shape, raw values
    checksum         32-byte SHA-256 of everything before it
"""

import hashlib
import json
import logging
import os
import struct
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from app.core.errors import CheckpointCorruptError, CheckpointError, CheckpointVersionError
from app.core.graph import ModelGraph
from app.core.optim import OptimizerConfig, OptimizerState
from app.core.tensor import ParamStore, Tensor

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

SR_MAGIC = b"SRWBSRG1"
CLASSIFIER_MAGIC = b"SRWBCLF1"
FEATURE_MAGIC = b"SRWBPHI1"

DTYPE_CODES = {"<f4": 1, "<f8": 2}
CODE_DTYPES = {code: np.dtype(name) for name, code in DTYPE_CODES.items()}

_DIGEST = 32


def encode_container(magic: bytes, metadata: Dict[str, Any], tensors: Dict[str, np.ndarray]) -> bytes:
    """Serialize metadata and named tensors into container bytes."""
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    chunks = [magic, struct.pack("<I", FORMAT_VERSION), struct.pack("<Q", len(meta)), meta]
    chunks.append(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value)
        dtype = arr.dtype.newbyteorder("<")
        if dtype.str not in DTYPE_CODES:
            raise CheckpointError(f"Tensor '{name}' has unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", DTYPE_CODES[dtype.str], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.astype(dtype, copy=False).tobytes())
    payload = b"".join(chunks)
    return payload + hashlib.sha256(payload).digest()


def decode_container(data: bytes, magic: bytes) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Parse container bytes.

    Raises:
        CheckpointCorruptError: Wrong magic, truncation or checksum mismatch
        CheckpointVersionError: Unsupported format version
    """
    if len(data) < 8 + 4 + _DIGEST or data[:8] != magic:
        raise CheckpointCorruptError(f"Not a {magic!r} checkpoint (magic bytes {data[:8]!r})")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"Checkpoint format version {version}, this build reads version {FORMAT_VERSION}"
        )
    payload, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointCorruptError("Checkpoint checksum mismatch")

    try:
        offset = 12
        (meta_len,) = struct.unpack_from("<Q", payload, offset)
        offset += 8
        metadata = json.loads(payload[offset:offset + meta_len].decode("utf-8"))
        offset += meta_len
        (count,) = struct.unpack_from("<I", payload, offset)
        offset += 4
        tensors: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", payload, offset)
            offset += 2
            name = payload[offset:offset + name_len].decode("utf-8")
            offset += name_len
            code, ndim = struct.unpack_from("<BB", payload, offset)
            offset += 2
            shape = struct.unpack_from(f"<{ndim}Q", payload, offset)
            offset += 8 * ndim
            dtype = CODE_DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if offset + nbytes > len(payload):
                raise CheckpointCorruptError(f"Tensor '{name}' is truncated")
            raw = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
            tensors[name] = raw.reshape(shape).astype(dtype.newbyteorder("="))
            offset += nbytes
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointCorruptError(f"Checkpoint body is malformed: {e}") from e
    if offset != len(payload):
        raise CheckpointCorruptError("Trailing bytes after the last tensor")
    return metadata, tensors


def write_container(
    path: Union[str, Path], magic: bytes, metadata: Dict[str, Any], tensors: Dict[str, np.ndarray]
) -> Path:
    """Atomically write a container file (temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_container(magic, metadata, tensors))
    os.replace(tmp, path)
    logger.info(f"Wrote checkpoint {path}")
    return path


def read_container(path: Union[str, Path], magic: bytes) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    return decode_container(data, magic)


def graph_entries(prefix: str, graph: ModelGraph) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Metadata and tensors describing a graph and its parameters."""
    meta = {
        "graph": graph.to_dict(),
        "params": graph.params.names(),
        "trainable": graph.params.trainable(),
    }
    tensors = {f"{prefix}/{name}": t.data for name, t in graph.params.items()}
    return meta, tensors


def restore_graph(prefix: str, meta: Dict[str, Any], tensors: Dict[str, np.ndarray]) -> ModelGraph:
    trainable = set(meta["trainable"])
    try:
        params = ParamStore({
            name: Tensor(tensors[f"{prefix}/{name}"], requires_grad=name in trainable)
            for name in meta["params"]
        })
    except KeyError as e:
        raise CheckpointCorruptError(f"Missing tensor {e} for graph '{prefix}'") from e
    return ModelGraph.from_dict(meta["graph"], params)


def optimizer_entries(prefix: str, state: OptimizerState) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    meta = {
        "config": state.config.model_dump(mode="json"),
        "step": state.step,
        "slots": {name: list(slots) for name, slots in state.slots.items()},
    }
    tensors = {
        f"{prefix}/{name}/{slot}": value
        for name, slots in state.slots.items()
        for slot, value in slots.items()
    }
    return meta, tensors


def restore_optimizer(prefix: str, meta: Dict[str, Any], tensors: Dict[str, np.ndarray]) -> OptimizerState:
    try:
        slots = {
            name: {slot: tensors[f"{prefix}/{name}/{slot}"] for slot in slot_names}
            for name, slot_names in meta["slots"].items()
        }
    except KeyError as e:
        raise CheckpointCorruptError(f"Missing optimizer tensor {e} for '{prefix}'") from e
    return OptimizerState(OptimizerConfig.model_validate(meta["config"]), slots, meta["step"])


def save_feature_weights(params: ParamStore, path: Union[str, Path]) -> Path:
    """Write feature-extractor weights for ``FeatureExtractorSpec.weights_path``."""
    return write_container(
        path, FEATURE_MAGIC, {"params": params.names()},
        {name: t.data for name, t in params.items()},
    )


def load_feature_weights(path: Union[str, Path]) -> ParamStore:
    meta, tensors = read_container(path, FEATURE_MAGIC)
    return ParamStore({name: Tensor(tensors[name]) for name in meta["params"]})
