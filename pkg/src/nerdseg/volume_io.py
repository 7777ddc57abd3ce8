"""Reading and writing volumes.

Two formats are supported: single-file NIfTI-1 (.nii / .nii.gz), parsed
directly from the 348-byte header, and a raw little-endian float32 dump
(.raw) with a JSON sidecar carrying shape, spacing, and provenance.

The NIfTI reader handles the common scalar dtypes, either endianness, and
slope/intercept scaling; it rejects multi-frame files and split .hdr/.img
pairs rather than guessing.
"""
from __future__ import annotations

import gzip
import json
import struct
from pathlib import Path

import numpy as np

from .data import Volume
from .errors import ConfigError, ShapeError

RAW_FORMAT_VERSION = 1

_NIFTI_DTYPES = {
    2: "u1", 4: "i2", 8: "i4", 16: "f4", 64: "f8",
    256: "i1", 512: "u2", 768: "u4",
}
_HDR_SIZE = 348


def _open_maybe_gzip(path: Path, mode: str):
    if path.name.endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def read_nifti(path, modality: str = "", volume_id: str = "") -> Volume:
    """Parse a single-file NIfTI-1 image into a Volume.

    Axes come back as (depth, height, width) = (z, y, x), matching the
    on-disk x-fastest layout, and spacing follows the same axis order.
    """
    path = Path(path)
    with _open_maybe_gzip(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HDR_SIZE + 4:
        raise ConfigError(f"{path}: file too short for a NIfTI-1 header")
    (size,) = struct.unpack_from("<i", blob, 0)
    endian = "<"
    if size != _HDR_SIZE:
        (size,) = struct.unpack_from(">i", blob, 0)
        endian = ">"
        if size != _HDR_SIZE:
            raise ConfigError(f"{path}: sizeof_hdr is not 348; not a NIfTI-1 file")
    magic = struct.unpack_from("4s", blob, 344)[0]
    if magic[:3] == b"ni1":
        raise ConfigError(f"{path}: split .hdr/.img pairs are not supported")
    if magic[:3] != b"n+1":
        raise ConfigError(f"{path}: bad magic {magic!r}")
    dim = struct.unpack_from(endian + "8h", blob, 40)
    datatype, bitpix = struct.unpack_from(endian + "2h", blob, 70)
    pixdim = struct.unpack_from(endian + "8f", blob, 76)
    (vox_offset,) = struct.unpack_from(endian + "f", blob, 108)
    slope, inter = struct.unpack_from(endian + "2f", blob, 112)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise ConfigError(f"{path}: dim[0] = {ndim} is out of range")
    for axis in range(4, ndim + 1):
        if dim[axis] > 1:
            raise ShapeError(
                f"{path}: only 3D volumes are supported, axis {axis} has size {dim[axis]}"
            )
    nx = max(dim[1], 1)
    ny = max(dim[2], 1) if ndim >= 2 else 1
    nz = max(dim[3], 1) if ndim >= 3 else 1
    if datatype not in _NIFTI_DTYPES:
        raise ConfigError(f"{path}: unsupported NIfTI datatype code {datatype}")
    dtype = np.dtype(endian + _NIFTI_DTYPES[datatype])
    if bitpix != dtype.itemsize * 8:
        raise ConfigError(f"{path}: bitpix {bitpix} contradicts datatype {datatype}")
    offset = int(vox_offset)
    if offset < _HDR_SIZE:
        raise ConfigError(f"{path}: vox_offset {vox_offset} overlaps the header")
    count = nx * ny * nz
    available = (len(blob) - offset) // dtype.itemsize
    if available < count:
        raise ShapeError(
            f"{path}: data section holds {available} voxels, header promises {count}"
        )
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    values = data.reshape(nz, ny, nx).astype(np.float32)
    if slope not in (0.0, 1.0) or inter != 0.0:
        scale = slope if slope != 0.0 else 1.0
        values = values * np.float32(scale) + np.float32(inter)
    spacing = (float(pixdim[3]), float(pixdim[2]), float(pixdim[1]))
    spacing = tuple(s if s > 0 else 1.0 for s in spacing)
    return Volume(values=values, spacing=spacing, modality=modality,
                  volume_id=volume_id or path.name.split(".")[0])


def write_nifti(path, volume: Volume) -> Path:
    """Write a Volume as single-file NIfTI-1 float32."""
    path = Path(path)
    nz, ny, nx = volume.values.shape
    header = bytearray(_HDR_SIZE)
    struct.pack_into("<i", header, 0, _HDR_SIZE)
    struct.pack_into("<8h", header, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<2h", header, 70, 16, 32)  # float32
    sz, sy, sx = volume.spacing
    struct.pack_into("<8f", header, 76, 1.0, sx, sy, sz, 0, 0, 0, 0)
    struct.pack_into("<f", header, 108, float(_HDR_SIZE + 4))
    struct.pack_into("<2f", header, 112, 1.0, 0.0)
    struct.pack_into("B", header, 123, 2)  # spatial units: mm
    struct.pack_into("4s", header, 344, b"n+1\x00")
    payload = bytes(header) + b"\x00\x00\x00\x00" + \
        np.ascontiguousarray(volume.values, dtype="<f4").tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    with _open_maybe_gzip(path, "wb") as fh:
        fh.write(payload)
    return path


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def read_raw(path, modality: str = "", volume_id: str = "") -> Volume:
    """Read a .raw float32 dump described by its JSON sidecar."""
    path = Path(path)
    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        raise FileNotFoundError(f"missing sidecar {sidecar} for {path}")
    with open(sidecar) as fh:
        meta = json.load(fh)
    version = meta.get("format_version")
    if version != RAW_FORMAT_VERSION:
        raise ConfigError(f"{sidecar}: unsupported format_version {version!r}")
    shape = tuple(int(s) for s in meta["shape"])
    if len(shape) != 3:
        raise ShapeError(f"{sidecar}: shape must have 3 axes, got {meta['shape']}")
    if meta.get("dtype", "float32") != "float32":
        raise ConfigError(f"{sidecar}: only float32 raw volumes are supported")
    data = np.fromfile(path, dtype="<f4")
    expected = int(np.prod(shape))
    if data.size != expected:
        raise ShapeError(
            f"{path}: holds {data.size} voxels but sidecar shape {shape} needs {expected}"
        )
    return Volume(
        values=data.reshape(shape),
        spacing=tuple(meta.get("spacing", (1.0, 1.0, 1.0))),
        modality=modality or meta.get("modality", ""),
        volume_id=volume_id or meta.get("volume_id", path.stem),
    )


def write_raw(path, volume: Volume) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(volume.values, dtype="<f4").tofile(path)
    meta = {
        "format_version": RAW_FORMAT_VERSION,
        "shape": list(volume.values.shape),
        "dtype": "float32",
        "spacing": list(volume.spacing),
        "modality": volume.modality,
        "volume_id": volume.volume_id,
    }
    with open(_sidecar_path(path), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def read_volume(path, modality: str = "", volume_id: str = "") -> Volume:
    """Dispatch on suffix: .nii / .nii.gz / .raw."""
    name = str(path)
    if name.endswith((".nii", ".nii.gz")):
        return read_nifti(path, modality, volume_id)
    if name.endswith(".raw"):
        return read_raw(path, modality, volume_id)
    raise ConfigError(f"unsupported volume format: {name} (expected .nii, .nii.gz, or .raw)")


def write_volume(path, volume: Volume) -> Path:
    name = str(path)
    if name.endswith((".nii", ".nii.gz")):
        return write_nifti(path, volume)
    if name.endswith(".raw"):
        return write_raw(path, volume)
    raise ConfigError(f"unsupported volume format: {name} (expected .nii, .nii.gz, or .raw)")
