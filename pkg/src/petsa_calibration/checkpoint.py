"""Versioned binary container for frozen forecasters and adapted calibration snapshots.

Layout (little-endian)::

    b"PETSACKP" | version u16 | header length u32 | JSON header | float64 blob | sha256

The header lists every array's name and shape in blob order. The trailing
32-byte digest covers everything before it.
"""

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
from loguru import logger

from petsa_calibration.enums import ForecasterKind
from petsa_calibration.exceptions import DataError
from petsa_calibration.forecasters import Forecaster, make_forecaster
from petsa_calibration.utils import atomic_write_bytes

MAGIC = b"PETSACKP"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sHI")
_DIGEST_SIZE = 32


class CheckpointError(DataError):
    pass


def checkpoint_path(directory: os.PathLike, dataset: str, kind: ForecasterKind, lookback: int, horizon: int) -> Path:
    return Path(directory) / f"{dataset}_{ForecasterKind(kind).value}_L{lookback}_H{horizon}.ckpt"


def encode_container(header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    header = dict(header)
    header["arrays"] = [{"name": name, "shape": list(np.shape(a))} for name, a in arrays.items()]
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes)) + header_bytes + blob
    return body + hashlib.sha256(body).digest()


def decode_container(data: bytes, source: str = "<bytes>") -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < _PREFIX.size + _DIGEST_SIZE:
        raise CheckpointError(f"{source} is truncated ({len(data)} bytes)")
    magic, version, header_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{source} is not a checkpoint file")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source} has format version {version}, expected {FORMAT_VERSION}")
    body, digest = data[:-_DIGEST_SIZE], data[-_DIGEST_SIZE:]
    header_end = _PREFIX.size + header_len
    if header_end > len(body):
        raise CheckpointError(f"{source} is truncated inside its header")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{source} failed its checksum; refusing to load")
    header = json.loads(body[_PREFIX.size : header_end].decode("utf-8"))

    arrays = {}
    offset = header_end
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        n_bytes = int(np.prod(shape, dtype=np.int64)) * 8
        if offset + n_bytes > len(body):
            raise CheckpointError(f"{source} is truncated inside array {spec['name']}")
        values = np.frombuffer(body, dtype="<f8", count=n_bytes // 8, offset=offset)
        arrays[spec["name"]] = values.reshape(shape).astype(np.float64)
        offset += n_bytes
    if offset != len(body):
        raise CheckpointError(f"{source} has {len(body) - offset} unexpected trailing bytes")
    return header, arrays


def write_container(path: os.PathLike, header: dict, arrays: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_container(header, arrays))


def read_container(path: os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint {path} not found")
    return decode_container(path.read_bytes(), str(path))


def save_checkpoint(f: Forecaster, path: os.PathLike) -> None:
    header = {
        "kind": f.KIND.value,
        "lookback": f.lookback,
        "horizon": f.horizon,
        "n_vars": f.n_vars,
        "channel_independent": f.channel_independent,
        "provenance": f.provenance,
    }
    write_container(path, header, f.numpy_parameters())
    logger.info(f"Saved {f.KIND.value} checkpoint to {path}")


def load_checkpoint(
    path: os.PathLike,
    lookback: int | None = None,
    horizon: int | None = None,
    n_vars: int | None = None,
) -> Forecaster:
    """Load a forecaster, optionally checking its dimensions against the expected ones.

    :raises CheckpointError: On a damaged file, a version mismatch, or a dimension mismatch.
    """
    header, arrays = read_container(path)
    try:
        kind = ForecasterKind(header["kind"])
    except ValueError as ex:
        raise CheckpointError(f"{path} holds a {header['kind']!r} container, not a forecaster") from ex
    if not header.get("channel_independent", True):
        raise CheckpointError(f"{path} holds a channel-mixing backbone; calibration needs a channel-independent one")
    for key, expected in (("lookback", lookback), ("horizon", horizon), ("n_vars", n_vars)):
        if expected is not None and header[key] != expected:
            raise CheckpointError(f"{path} has {key}={header[key]}, but the configuration expects {expected}")
    return make_forecaster(
        kind,
        header["lookback"],
        header["horizon"],
        header["n_vars"],
        parameters=arrays,
        provenance=header.get("provenance", {}),
    )
