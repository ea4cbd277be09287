"""Piecewise-constant ellipsoid phantoms and measurement noise.

Shape coordinates are millimetres in the grid frame: voxel ``(i, j, k)`` sits
at ``(i * dx, j * dy, k * dz)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

ROLES = ("brain", "structure", "background")


@dataclass(frozen=True)
class Ellipsoid:
    center_mm: tuple[float, float, float]
    semi_axes_mm: tuple[float, float, float]
    chi_ppm: float
    role: str = "structure"

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}; expected one of {ROLES}")
        if len(self.center_mm) != 3 or len(self.semi_axes_mm) != 3:
            raise ValueError("center_mm and semi_axes_mm need three components")
        if any(a < 0 for a in self.semi_axes_mm):
            raise ValueError("semi-axes must be non-negative")

    @property
    def volume_mm3(self) -> float:
        a, b, c = self.semi_axes_mm
        return 4.0 / 3.0 * np.pi * a * b * c

    @classmethod
    def from_json(cls, doc: dict) -> "Ellipsoid":
        return cls(
            center_mm=tuple(float(c) for c in doc["center_mm"]),
            semi_axes_mm=tuple(float(a) for a in doc["semi_axes_mm"]),
            chi_ppm=float(doc["chi_ppm"]),
            role=doc.get("role", "structure"),
        )

    def to_json(self) -> dict:
        return {
            "center_mm": list(self.center_mm),
            "semi_axes_mm": list(self.semi_axes_mm),
            "chi_ppm": self.chi_ppm,
            "role": self.role,
        }


def _inside(shape: Ellipsoid, dims, voxel_size) -> np.ndarray:
    r2 = 0.0
    for axis, (n, dv, c, a) in enumerate(zip(dims, voxel_size, shape.center_mm, shape.semi_axes_mm)):
        lo, hi = -0.5 * dv, (n - 0.5) * dv
        if c - a < lo or c + a > hi:
            raise ValueError(f"shape {shape} leaves the grid along axis {'xyz'[axis]}")
        x = np.arange(n) * dv - c
        if a > 0:
            d = (x / a) ** 2
        else:
            d = np.where(np.abs(x) < 0.5 * dv, 0.0, np.inf)
        r2 = r2 + d.reshape([-1 if i == axis else 1 for i in range(3)])
    return r2 <= 1.0


def make_phantom(shapes, dims, voxel_size=(1.0, 1.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """Rasterize ``shapes`` in order (later shapes overwrite earlier ones).

    Returns ``(chi, mask)`` where ``mask`` is the union of ``brain`` shapes.
    """
    dims = tuple(int(d) for d in dims)
    chi = np.zeros(dims)
    mask = np.zeros(dims, dtype=bool)
    for shape in shapes:
        inside = _inside(shape, dims, voxel_size)
        chi[inside] = shape.chi_ppm
        if shape.role == "brain":
            mask |= inside
    return chi, mask.astype(np.float64)


def preset_shapes(name: str, dims, voxel_size=(1.0, 1.0, 1.0)) -> list[Ellipsoid]:
    """Built-in phantoms scaled to the grid extent.

    ``healthy``: brain ellipsoid at 0 ppm with deep-grey-matter-like and
    white-matter-like inclusions in the 0.05-0.15 ppm range. ``hemorrhage``
    adds a 1.6 ppm sphere, ``calcification`` a -2.0 ppm sphere.
    """
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")
    ext = np.array(dims, dtype=float) * np.array(voxel_size, dtype=float)
    c = np.floor(np.array(dims) / 2) * np.array(voxel_size, dtype=float)

    def at(offset, axes, chi, role="structure"):
        return Ellipsoid(tuple(c + np.array(offset) * ext), tuple(np.array(axes) * ext), chi, role)

    shapes = [
        at((0, 0, 0), (0.40, 0.34, 0.36), 0.0, "brain"),
        at((-0.12, 0.06, 0.02), (0.06, 0.08, 0.07), 0.10),
        at((0.12, 0.06, 0.02), (0.06, 0.08, 0.07), 0.10),
        at((-0.10, -0.08, -0.02), (0.05, 0.05, 0.05), 0.15),
        at((0.10, -0.08, -0.02), (0.05, 0.05, 0.05), 0.15),
        at((0.0, 0.0, 0.16), (0.18, 0.10, 0.06), -0.05),
        at((0.0, 0.20, -0.05), (0.03, 0.06, 0.10), 0.08),
    ]
    if name == "hemorrhage":
        shapes.append(at((0.20, -0.10, -0.14), (0.07, 0.07, 0.07), 1.6))
    elif name == "calcification":
        shapes.append(at((-0.20, -0.10, -0.14), (0.05, 0.05, 0.05), -2.0))
    return shapes


PRESETS = ("healthy", "hemorrhage", "calcification")


def load_phantom_spec(doc) -> tuple[list[Ellipsoid], tuple[int, int, int], tuple[float, float, float]]:
    """Parse a phantom JSON document (dict or path).

    Either ``{"preset": name, "dims": [...], "voxel_size_mm": [...]}`` or
    ``{"dims": [...], "voxel_size_mm": [...], "shapes": [...]}``; a preset
    may also carry extra ``shapes`` that are drawn after it.
    """
    if not isinstance(doc, dict):
        with open(doc, encoding="utf-8") as f:
            doc = json.load(f)
    dims = tuple(int(d) for d in doc["dims"])
    voxel_size = tuple(float(v) for v in doc.get("voxel_size_mm", (1.0, 1.0, 1.0)))
    shapes = []
    if "preset" in doc:
        shapes += preset_shapes(doc["preset"], dims, voxel_size)
    shapes += [Ellipsoid.from_json(s) for s in doc.get("shapes", [])]
    return shapes, dims, voxel_size


def add_noise(meas, sigma: float, outlier_frac: float = 0.0, outlier_sigma: float = 0.0,
              seed=0) -> np.ndarray:
    """Add i.i.d. Gaussian noise to every real and imaginary component.

    A Bernoulli(``outlier_frac``) subset of components draws from
    ``N(0, outlier_sigma**2)`` instead of ``N(0, sigma**2)``.
    """
    if not 0.0 <= outlier_frac <= 1.0:
        raise ValueError("outlier_frac must lie in [0, 1]")
    if sigma < 0 or outlier_sigma < 0:
        raise ValueError("noise standard deviations must be non-negative")
    meas = np.asarray(meas)
    rng = np.random.default_rng(seed)
    shape = (2,) + meas.shape
    std = np.full(shape, float(sigma))
    std[rng.random(shape) < outlier_frac] = outlier_sigma
    noise = std * rng.standard_normal(shape)
    if np.iscomplexobj(meas):
        return meas + noise[0] + 1j * noise[1]
    return meas + noise[0]
