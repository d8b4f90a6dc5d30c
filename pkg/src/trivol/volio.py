"""Volume file IO.

Two formats:

* raw: ``<name>.raw`` little-endian float32 voxels in C order, with a JSON
  sidecar ``<name>.json`` holding ``{"shape": [x, y, z], "dtype": "float32",
  "byte_order": "little", "spacing": [sx, sy, sz]}``.
* NIfTI-1: ``<name>.nii`` / ``<name>.nii.gz``. Minimal built-in implementation
  (no external dependency): float32 writes; reads float32/float64/int16/uint8
  with scl_slope/scl_inter applied.
"""

from __future__ import annotations

import gzip
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ManifestError

NIFTI_HEADER_SIZE = 348
_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32, 64: np.float64}


def save_raw(path: str | Path, volume: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    volume = np.ascontiguousarray(volume, dtype="<f4")
    sidecar = {"shape": list(volume.shape), "dtype": "float32", "byte_order": "little",
               "spacing": list(spacing)}
    path.with_suffix(".json").write_text(json.dumps(sidecar))
    path.write_bytes(volume.tobytes())
    return path


def load_raw(path: str | Path) -> np.ndarray:
    path = Path(path)
    sidecar_path = path.with_suffix(".json")
    if not sidecar_path.exists():
        raise ManifestError(f"raw volume {path} has no JSON sidecar at {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text())
    if sidecar.get("dtype") != "float32" or sidecar.get("byte_order") != "little":
        raise ManifestError(f"{sidecar_path}: only little-endian float32 raw volumes are supported")
    shape = tuple(sidecar["shape"])
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ManifestError(f"{path}: voxel count {data.size} does not match sidecar shape {shape}")
    return data.reshape(shape).astype(np.float32)


def save_nifti(path: str | Path, volume: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    volume = np.ascontiguousarray(volume, dtype="<f4")
    header = bytearray(NIFTI_HEADER_SIZE)
    struct.pack_into("<i", header, 0, NIFTI_HEADER_SIZE)              # sizeof_hdr
    dims = (3, *volume.shape, 1, 1, 1, 1)
    struct.pack_into("<8h", header, 40, *dims)                        # dim
    struct.pack_into("<h", header, 70, 16)                            # datatype = float32
    struct.pack_into("<h", header, 72, 32)                            # bitpix
    struct.pack_into("<8f", header, 76, 1.0, *spacing, 1.0, 1.0, 1.0, 1.0)  # pixdim
    struct.pack_into("<f", header, 108, 352.0)                        # vox_offset
    struct.pack_into("<f", header, 112, 1.0)                          # scl_slope
    struct.pack_into("<f", header, 116, 0.0)                          # scl_inter
    header[344:348] = b"n+1\x00"                                      # magic
    blob = bytes(header) + b"\x00" * 4 + volume.tobytes(order="F")
    if path.name.endswith(".nii.gz"):
        path.write_bytes(gzip.compress(blob))
    else:
        path.write_bytes(blob)
    return path


def load_nifti(path: str | Path) -> np.ndarray:
    path = Path(path)
    blob = path.read_bytes()
    if path.name.endswith(".gz") or blob[:2] == b"\x1f\x8b":
        blob = gzip.decompress(blob)
    if len(blob) < NIFTI_HEADER_SIZE:
        raise ManifestError(f"{path}: too short for a NIfTI-1 header")
    magic = blob[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise ManifestError(f"{path}: not a NIfTI-1 file (magic {magic!r})")
    dim = struct.unpack_from("<8h", blob, 40)
    ndim = dim[0]
    if ndim < 3:
        raise ManifestError(f"{path}: expected a 3D volume, header says {ndim}D")
    shape = tuple(dim[1:4])
    (datatype,) = struct.unpack_from("<h", blob, 70)
    if datatype not in _NIFTI_DTYPES:
        raise ManifestError(f"{path}: unsupported NIfTI datatype code {datatype}")
    (vox_offset,) = struct.unpack_from("<f", blob, 108)
    (scl_slope,) = struct.unpack_from("<f", blob, 112)
    (scl_inter,) = struct.unpack_from("<f", blob, 116)
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder("<")
    count = int(np.prod(shape))
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=int(vox_offset))
    volume = data.reshape(shape, order="F").astype(np.float32)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        volume = volume * slope + scl_inter
    return volume


def save_volume(path: str | Path, volume: np.ndarray, fmt: str = "raw") -> Path:
    if fmt == "raw":
        return save_raw(path, volume)
    if fmt == "nifti":
        return save_nifti(path, volume)
    raise ManifestError(f"unknown volume format {fmt!r}")


def load_volume(path: str | Path) -> np.ndarray:
    """Dispatch on extension: .nii/.nii.gz -> NIfTI, anything else -> raw+sidecar."""
    name = Path(path).name
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return load_nifti(path)
    return load_raw(path)
