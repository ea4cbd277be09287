"""Typed 3D volumes and the ``.qvol`` on-disk format.

A volume on disk is a pair of files sharing a stem::

    name.qvol.json   UTF-8 header (dims, voxel_size_mm, b0_dir, dtype, field_kind)
    name.qvol.raw    little-endian payload, x-fastest

In memory the data is a numpy array of shape ``(nx, ny, nz)`` indexed
``[x, y, z]``; the x-fastest payload order is Fortran order on that array.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DTYPES = {"real32": np.dtype("<f4"), "complex64": np.dtype("<c8")}
FIELD_KINDS = ("susceptibility_ppm", "field_ppm", "phase_rad", "magnitude", "mask")

# default display window for susceptibility maps, ppm
SUSCEPTIBILITY_WINDOW = (-0.1, 0.2)


class VolumeError(ValueError):
    """Raised for malformed headers, payloads or volume contents."""


@dataclass(frozen=True)
class VolumeHeader:
    dims: tuple[int, int, int]
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    b0_dir: tuple[float, float, float] = (0.0, 0.0, 1.0)
    dtype: str = "real32"
    field_kind: str = "susceptibility_ppm"

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "voxel_size", tuple(float(v) for v in self.voxel_size))
        object.__setattr__(self, "b0_dir", tuple(float(b) for b in self.b0_dir))
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise VolumeError(f"dims must be three positive integers, got {self.dims}")
        if len(self.voxel_size) != 3 or any(not v > 0 for v in self.voxel_size):
            raise VolumeError(f"voxel sizes must be positive, got {self.voxel_size}")
        if len(self.b0_dir) != 3 or abs(np.linalg.norm(self.b0_dir) - 1.0) > 1e-6:
            raise VolumeError(f"b0_dir must be a unit vector, got {self.b0_dir}")
        if self.dtype not in DTYPES:
            raise VolumeError(f"unknown dtype {self.dtype!r}")
        if self.field_kind not in FIELD_KINDS:
            raise VolumeError(f"unknown field_kind {self.field_kind!r}")

    def to_json(self) -> dict:
        return {
            "dims": list(self.dims),
            "voxel_size_mm": list(self.voxel_size),
            "b0_dir": list(self.b0_dir),
            "dtype": self.dtype,
            "field_kind": self.field_kind,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "VolumeHeader":
        try:
            return cls(
                dims=doc["dims"],
                voxel_size=doc["voxel_size_mm"],
                b0_dir=doc["b0_dir"],
                dtype=doc["dtype"],
                field_kind=doc["field_kind"],
            )
        except KeyError as exc:
            raise VolumeError(f"header missing key {exc.args[0]!r}") from None


@dataclass(frozen=True)
class Volume:
    """Immutable header + data pair. ``data`` is cast to the header dtype."""

    header: VolumeHeader
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.size != int(np.prod(self.header.dims)):
            raise VolumeError(
                f"data has {arr.size} values, dims {self.header.dims} need "
                f"{int(np.prod(self.header.dims))}"
            )
        if arr.ndim == 1:
            arr = arr.reshape(self.header.dims, order="F")
        elif arr.shape != self.header.dims:
            raise VolumeError(f"data shape {arr.shape} does not match dims {self.header.dims}")
        arr = np.array(arr, dtype=DTYPES[self.header.dtype].newbyteorder("="))
        if self.header.field_kind == "mask" and not np.all((arr == 0) | (arr == 1)):
            raise VolumeError("mask volumes may only contain 0 and 1")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, data, field_kind="susceptibility_ppm", voxel_size=(1.0, 1.0, 1.0),
                   b0_dir=(0.0, 0.0, 1.0)) -> "Volume":
        data = np.asarray(data)
        dtype = "complex64" if np.iscomplexobj(data) else "real32"
        header = VolumeHeader(data.shape, voxel_size, b0_dir, dtype, field_kind)
        return cls(header, data)

    @property
    def dims(self):
        return self.header.dims

    def flat(self) -> np.ndarray:
        """Data in x-fastest order."""
        return self.data.ravel(order="F")


def _paths(path) -> tuple[Path, Path]:
    p = str(path)
    for suffix in (".json", ".raw"):
        if p.endswith(".qvol" + suffix):
            p = p[: -len(suffix)]
    if not p.endswith(".qvol"):
        p = p + ".qvol"
    return Path(p + ".json"), Path(p + ".raw")


def read_qvol(path) -> Volume:
    """Read ``path`` (``x.qvol``, ``x.qvol.json`` or the bare stem ``x``)."""
    header_path, raw_path = _paths(path)
    with open(header_path, encoding="utf-8") as f:
        header = VolumeHeader.from_json(json.load(f))
    payload = raw_path.read_bytes()
    dt = DTYPES[header.dtype]
    expected = int(np.prod(header.dims)) * dt.itemsize
    if len(payload) != expected:
        raise VolumeError(
            f"{raw_path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    data = np.frombuffer(payload, dtype=dt).reshape(header.dims, order="F")
    return Volume(header, data)


def write_qvol(v: Volume, path) -> None:
    header_path, raw_path = _paths(path)
    os.makedirs(header_path.parent or ".", exist_ok=True)
    dt = DTYPES[v.header.dtype]
    payload = np.asarray(v.data, dtype=dt).tobytes(order="F")
    with open(header_path, "w", encoding="utf-8") as f:
        json.dump(v.header.to_json(), f, indent=2)
        f.write("\n")
    raw_path.write_bytes(payload)


def window_to_uint8(values, lo: float, hi: float) -> np.ndarray:
    """Map ``[lo, hi]`` linearly onto ``[0, 255]``, round half up, clamp."""
    if not lo < hi:
        raise ValueError(f"window needs lo < hi, got ({lo}, {hi})")
    scaled = (np.asarray(values, dtype=np.float64) - lo) / (hi - lo) * 255.0
    return np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)


def export_slice(v: Volume, axis: str, index: int, window=SUSCEPTIBILITY_WINDOW, path=None):
    """Render one slice as 8-bit grayscale.

    Returns the image array (rows follow the second remaining axis so that
    an axial slice shows y vertically). Writes a PNG when ``path`` is given.
    """
    if axis not in ("x", "y", "z"):
        raise ValueError(f"axis must be one of x, y, z, got {axis!r}")
    ax = "xyz".index(axis)
    n = v.dims[ax]
    if not 0 <= index < n:
        raise IndexError(f"slice index {index} outside [0, {n}) along {axis}")
    plane = np.take(np.real(v.data), index, axis=ax)
    img = window_to_uint8(plane.T, *window)
    if path is not None:
        from PIL import Image

        Image.fromarray(img).save(path)  # uint8 2D -> mode "L"
    return img
