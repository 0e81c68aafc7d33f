"""DA3T tensor container, checkpoints, and atomic file writes.

Layout of a ``.da3t`` file (all integers little-endian)::

    bytes 0-3   magic b"DA3T"
    byte  4     dtype code (0 = f32, 1 = f64, 2 = u32)
    byte  5     rank r
    4*r bytes   u32 extents
    payload     row-major elements in the declared dtype
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import ConfigError

MAGIC = b"DA3T"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<u4")}
_CODE_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint32): 2}

MANIFEST = "manifest.json"


@contextlib.contextmanager
def atomic_open(path, mode: str = "w", **kwargs):
    """Write to a temporary sibling and ``os.replace`` it into place on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **kwargs) as fh:
            yield fh
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr)
    try:
        code = _CODE_OF[arr.dtype.newbyteorder("=")]
    except KeyError:
        raise ConfigError(f"DA3T supports f32/f64/u32, not {arr.dtype}") from None
    if arr.ndim > 255:
        raise ConfigError("DA3T rank must fit in one byte")
    header = MAGIC + struct.pack("<BB", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()
    return header + payload


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise ConfigError("not a DA3T container (bad magic)")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in _CODES:
        raise ConfigError(f"unknown DA3T dtype code {code}")
    shape = struct.unpack_from(f"<{rank}I", buf, 6)
    offset = 6 + 4 * rank
    dtype = _CODES[code]
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) - offset != count * dtype.itemsize:
        raise ConfigError(
            f"DA3T payload is {len(buf) - offset} bytes, expected {count * dtype.itemsize}"
        )
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(shape)
    return arr.astype(dtype.newbyteorder("="))


def save_tensor(path, arr) -> None:
    with atomic_open(path, "wb") as fh:
        fh.write(encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def write_json(path, obj) -> None:
    with atomic_open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def save_checkpoint(directory, params: dict[str, np.ndarray]) -> Path:
    """One DA3T file per parameter plus a JSON manifest (name -> file, shape, sha256)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for i, name in enumerate(sorted(params)):
        blob = encode_tensor(params[name])
        fname = f"p{i:04d}.da3t"
        with atomic_open(directory / fname, "wb") as fh:
            fh.write(blob)
        entries[name] = {
            "file": fname,
            "shape": list(params[name].shape),
            "dtype": str(np.asarray(params[name]).dtype),
            "sha256": hashlib.sha256(blob).hexdigest(),
        }
    write_json(directory / MANIFEST, {"format": "DA3T-checkpoint/1", "params": entries})
    return directory


def load_checkpoint(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest = read_json(directory / MANIFEST)
    params = {}
    for name, entry in manifest["params"].items():
        blob = (directory / entry["file"]).read_bytes()
        if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
            raise ConfigError(f"checkpoint entry {name!r} fails its checksum")
        params[name] = decode_tensor(blob)
    return params


def write_csv(path, header: list[str], rows) -> None:
    with atomic_open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_csv(header, rows))


def format_csv(header, rows) -> str:
    import csv
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()
