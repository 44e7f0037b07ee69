"""Binary tensor interchange ("DMT1") and checkpoint directories.

DMT1 layout: magic b"DMT1", u8 rank, rank x u32 little-endian dims,
then float32 little-endian payload in row-major order.

A checkpoint is a directory of DMT1 files plus ``manifest.json`` mapping
parameter name -> {file, shape}.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DMT1"


class FormatError(ValueError):
    pass


def write_dmt(path, array) -> None:
    # asarray with order="C" keeps rank-0 arrays rank 0
    # (ascontiguousarray would promote them to rank 1)
    arr = np.asarray(array, dtype=np.float32, order="C")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f4").tobytes())


def read_dmt(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        (rank,) = struct.unpack("<B", fh.read(1))
        dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        payload = fh.read(4 * n)
        if len(payload) != 4 * n:
            raise FormatError(f"{path}: truncated payload")
        arr = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    return arr.reshape(dims)


def save_checkpoint(directory, params: dict, extra: dict | None = None) -> None:
    """Write named arrays as DMT1 files with a manifest.

    ``extra`` entries land in the manifest verbatim (e.g. config provenance).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"tensors": {}}
    for name in sorted(params):
        arr = params[name]
        data = arr.data if hasattr(arr, "data") and not isinstance(arr, np.ndarray) else arr
        fname = name.replace("/", "_") + ".dmt"
        write_dmt(directory / fname, data)
        manifest["tensors"][name] = {"file": fname, "shape": list(np.shape(data))}
    if extra:
        manifest.update(extra)
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_checkpoint(directory) -> dict:
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    out = {}
    for name, meta in manifest["tensors"].items():
        arr = read_dmt(directory / meta["file"])
        if list(arr.shape) != meta["shape"]:
            raise FormatError(f"{name}: shape {arr.shape} != manifest {meta['shape']}")
        out[name] = arr
    return out


def load_manifest(directory) -> dict:
    with open(Path(directory) / "manifest.json") as fh:
        return json.load(fh)
