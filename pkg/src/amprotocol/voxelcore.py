"""Volumetric data model, slice extraction and the binary grid file format.

Arrays are held with shape ``(nx, ny, nz)`` and serialized in Fortran
order, so the x index varies fastest on disk.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

MAGIC = b"AMVX"
VERSION = 1
DTYPE_F32 = 0
DTYPE_U8 = 1
# magic, version, dtype, 2 pad, 3 x u32 dims, 3 x f32 pitch, u64 payload bytes
_HEADER = struct.Struct("<4sBB2x3I3fQ")
HEADER_SIZE = _HEADER.size


class FormatError(ValueError):
    """Raised when a grid file cannot be decoded."""


class Label(IntEnum):
    BACKGROUND = 0
    MATERIAL = 1
    PORE = 2


PLANES = ("XY", "XZ")


def _check_geometry(dims, pitch):
    dims = tuple(int(d) for d in dims)
    # the file stores pitch as f32; rounding here keeps round trips exact
    pitch = tuple(float(np.float32(p)) for p in pitch)
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise ValueError(f"dims must be three positive integers, got {dims}")
    if len(pitch) != 3 or not all(np.isfinite(p) and p > 0 for p in pitch):
        raise ValueError(f"pitch must be three positive lengths, got {pitch}")
    return dims, pitch


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Scalar intensity volume in [0, 1] with a physical voxel pitch in mm."""

    values: np.ndarray
    pitch: tuple

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float32, copy=True)
        if values.ndim != 3:
            raise ValueError("values must be a 3-D array")
        _, pitch = _check_geometry(values.shape, self.pitch)
        if not np.all(np.isfinite(values)) or values.min() < 0.0 or values.max() > 1.0:
            raise ValueError("intensities must lie in [0, 1]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "pitch", pitch)

    @property
    def dims(self):
        return tuple(self.values.shape)

    @property
    def voxel_volume(self):
        return float(np.prod(self.pitch))

    @property
    def bulk_volume(self):
        """Volume of the whole grid box in mm^3."""
        return self.voxel_volume * self.values.size

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return self.pitch == other.pitch and np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class LabelMask:
    """Per-voxel BACKGROUND / MATERIAL / PORE classes."""

    labels: np.ndarray
    pitch: tuple

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.uint8, copy=True)
        if labels.ndim != 3:
            raise ValueError("labels must be a 3-D array")
        _, pitch = _check_geometry(labels.shape, self.pitch)
        if labels.size and labels.max() > Label.PORE:
            raise ValueError("labels must be 0 (background), 1 (material) or 2 (pore)")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "pitch", pitch)

    @property
    def dims(self):
        return tuple(self.labels.shape)

    @property
    def voxel_volume(self):
        return float(np.prod(self.pitch))

    def count(self, label):
        return int(np.count_nonzero(self.labels == label))

    def __eq__(self, other):
        if not isinstance(other, LabelMask):
            return NotImplemented
        return self.pitch == other.pitch and np.array_equal(self.labels, other.labels)


@dataclass(frozen=True, eq=False)
class SliceImage:
    """A planar section of a grid.

    ``values`` has shape ``(width, height)``: for an XY slice that is
    ``(nx, ny)``, for an XZ slice ``(nx, nz)``.
    """

    plane: str
    index: int
    values: np.ndarray
    pitch: tuple

    @property
    def width(self):
        return self.values.shape[0]

    @property
    def height(self):
        return self.values.shape[1]

    def __eq__(self, other):
        if not isinstance(other, SliceImage):
            return NotImplemented
        return (self.plane, self.index, self.pitch) == (other.plane, other.index, other.pitch) and (
            np.array_equal(self.values, other.values)
        )


def new_grid(dims, pitch, fill=0.0):
    """Return a grid of shape ``dims`` with every voxel set to ``fill``."""
    dims, pitch = _check_geometry(dims, pitch)
    if not 0.0 <= fill <= 1.0:
        raise ValueError(f"fill must lie in [0, 1], got {fill}")
    return VoxelGrid(np.full(dims, fill, dtype=np.float32), pitch)


def _plane_axis(plane):
    if plane == "XY":
        return 2
    if plane == "XZ":
        return 1
    raise ValueError(f"plane must be 'XY' or 'XZ', got {plane!r}")


def extract_slice(volume, plane, index):
    """Cut the XY (fixed z) or XZ (fixed y) section at ``index``.

    Works on a :class:`VoxelGrid` or a :class:`LabelMask`; the returned
    values keep the source dtype.
    """
    axis = _plane_axis(plane)
    data = volume.values if isinstance(volume, VoxelGrid) else volume.labels
    extent = data.shape[axis]
    if not 0 <= index < extent:
        raise IndexError(f"{plane} slice index {index} outside [0, {extent})")
    values = np.take(data, index, axis=axis)
    values.setflags(write=False)
    pitch = (volume.pitch[0], volume.pitch[2 if plane == "XZ" else 1])
    return SliceImage(plane, int(index), values, pitch)


def stack_slices(slices, pitch_z):
    """Rebuild a grid from its full sequence of XY slices."""
    values = np.stack([s.values for s in slices], axis=2)
    px, py = slices[0].pitch
    return VoxelGrid(values, (px, py, pitch_z))


def write_grid(volume, path):
    """Serialize a grid or mask to ``path`` in the AMVX format."""
    if isinstance(volume, VoxelGrid):
        dtype_code, payload = DTYPE_F32, volume.values.astype("<f4")
    elif isinstance(volume, LabelMask):
        dtype_code, payload = DTYPE_U8, volume.labels
    else:
        raise TypeError(f"cannot write {type(volume).__name__}")
    body = payload.tobytes(order="F")
    header = _HEADER.pack(MAGIC, VERSION, dtype_code, *volume.dims, *volume.pitch, len(body))
    Path(path).write_bytes(header + body)


def read_grid(path):
    """Read a grid or mask written by :func:`write_grid`.

    Raises
    ------
    FormatError
        If the header is malformed or the payload does not match it. The
        message names the offending field.
    """
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        if raw[:4] != MAGIC[: len(raw[:4])]:
            raise FormatError("bad magic")
        raise FormatError(f"truncated header: {len(raw)} of {HEADER_SIZE} bytes")
    magic, version, dtype_code, nx, ny, nz, px, py, pz, nbytes = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError("bad magic")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if dtype_code not in (DTYPE_F32, DTYPE_U8):
        raise FormatError(f"unknown dtype {dtype_code}")
    if min(nx, ny, nz) == 0:
        raise FormatError(f"dims must be positive, got {(nx, ny, nz)}")
    itemsize = 4 if dtype_code == DTYPE_F32 else 1
    expected = nx * ny * nz * itemsize
    if nbytes != expected:
        raise FormatError(f"dims/payload mismatch: dims imply {expected} bytes, header says {nbytes}")
    body = raw[HEADER_SIZE:]
    if len(body) < expected:
        raise FormatError(f"truncated payload: {len(body)} of {expected} bytes")
    if len(body) > expected:
        raise FormatError(f"dims/payload mismatch: {len(body) - expected} trailing bytes")
    dtype = "<f4" if dtype_code == DTYPE_F32 else np.uint8
    data = np.frombuffer(body, dtype=dtype).reshape((nx, ny, nz), order="F")
    pitch = (float(px), float(py), float(pz))
    try:
        if dtype_code == DTYPE_F32:
            return VoxelGrid(data, pitch)
        return LabelMask(data, pitch)
    except ValueError as exc:
        raise FormatError(f"payload: {exc}") from None


def write_pgm(image, path):
    """Write a slice (or 2-D array in [0, 1]) as binary 8-bit PGM.

    Intensities are scaled by 255 and rounded half-up. The image row is
    the second array axis, so an XY slice is drawn with x across.
    """
    values = image.values if isinstance(image, SliceImage) else np.asarray(image)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("PGM export needs a 2-D image")
    pixels = np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    width, height = pixels.shape
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pixels.T.tobytes(order="C"))
