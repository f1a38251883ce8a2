# atvc_lab/serialization.py
"""
Portable byte layout for checkpoints and inspected messages.

Layout (all integers unsigned little-endian, all values float64 little-endian):

    magic    8 bytes   b"ATVCCKPT"
    version  uint32    FORMAT_VERSION
    count    uint32    number of named arrays
    then, per array:
        name_len uint32, name (utf-8), ndim uint32, dims uint64 * ndim,
        values float64 * prod(dims) in C order

Round trips are bit-exact.
"""

import logging
import os
import struct
from typing import Dict, Tuple

import numpy as np

from atvc_lab.atvc import GaussianMessage
from atvc_lab.errors import ContractError
from atvc_lab.nn import ParamStore

logger = logging.getLogger(__name__)

MAGIC = b"ATVCCKPT"
FORMAT_VERSION = 1
DEFAULT_CHECKPOINT_FILENAME = "checkpoint.atvc"
META_PREFIX = "meta/"


def encode_arrays(arrays: Dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(arrays))]
    for name, value in arrays.items():
        value = np.ascontiguousarray(value, dtype="<f8")
        encoded_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded_name)))
        chunks.append(encoded_name)
        chunks.append(struct.pack("<I", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        chunks.append(value.tobytes(order="C"))
    return b"".join(chunks)


def decode_arrays(blob: bytes) -> Dict[str, np.ndarray]:
    if blob[:len(MAGIC)] != MAGIC:
        raise ContractError("not a checkpoint: bad magic bytes")
    offset = len(MAGIC)
    version, count = struct.unpack_from("<II", blob, offset)
    offset += 8
    if version != FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, offset)
        offset += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(blob, dtype="<f8", count=size, offset=offset)
        offset += 8 * size
        arrays[name] = values.reshape(shape).astype(np.float64)
    if offset != len(blob):
        raise ContractError(f"checkpoint has {len(blob) - offset} trailing bytes")
    return arrays


def write_arrays(arrays: Dict[str, np.ndarray], filename: str) -> str:
    directory = os.path.dirname(filename)
    if directory:
        os.makedirs(directory, exist_ok=True)
    try:
        with open(filename, "wb") as f:
            f.write(encode_arrays(arrays))
    except OSError as e:
        logger.error(f"Error writing arrays to {filename}: {e}")
        raise
    logger.debug(f"wrote {len(arrays)} arrays to {filename}")
    return filename


def read_arrays(filename: str) -> Dict[str, np.ndarray]:
    try:
        with open(filename, "rb") as f:
            blob = f.read()
    except FileNotFoundError:
        logger.error(f"Checkpoint file not found at {filename}")
        raise
    return decode_arrays(blob)


def save_checkpoint(store: ParamStore, meta: Dict[str, float],
                    filename: str = DEFAULT_CHECKPOINT_FILENAME) -> str:
    """Parameters, Adam moments and scalar metadata (iteration, KL coefficient, shapes)."""
    arrays = store.state_arrays()
    for key, value in meta.items():
        arrays[f"{META_PREFIX}{key}"] = np.atleast_1d(np.asarray(value, dtype=np.float64))
    path = write_arrays(arrays, filename)
    logger.info(f"Checkpoint saved to {path}")
    return path


def load_checkpoint(filename: str) -> Tuple[ParamStore, Dict[str, float]]:
    arrays = read_arrays(filename)
    meta = {key[len(META_PREFIX):]: float(value.reshape(-1)[0])
            for key, value in arrays.items() if key.startswith(META_PREFIX)}
    store = ParamStore.from_state_arrays({k: v for k, v in arrays.items() if not k.startswith(META_PREFIX)})
    logger.info(f"Checkpoint loaded from {filename} ({len(store)} parameter tensors)")
    return store, meta


def encode_message(message: GaussianMessage) -> bytes:
    """Wire form of one message: sender_id, mu and sigma (L follows from the dims)."""
    return encode_arrays({
        "sender_id": np.array([float(message.sender_id)]),
        "mu": message.mu,
        "sigma": message.sigma,
    })


def decode_message(blob: bytes) -> GaussianMessage:
    arrays = decode_arrays(blob)
    return GaussianMessage(int(arrays["sender_id"][0]), arrays["mu"], arrays["sigma"])
