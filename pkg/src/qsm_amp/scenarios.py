"""Synthetic datasets shared by the ablation scripts and the acceptance tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dipole import EchoProtocol, EchoSet, dipole_kernel, field_from_chi, forward_measurements
from .phantom import Ellipsoid, add_noise, make_phantom, preset_shapes

# short echoes keep the hemorrhage phase below pi at 3 T
SHORT_TE = (0.002, 0.004, 0.006)


@dataclass
class Scenario:
    chi: np.ndarray
    mask: np.ndarray
    echoes: EchoSet
    background_ppm: np.ndarray | None = None


def outlier_scenario(n=48, preset="hemorrhage", sigma=0.01, outlier_frac=0.05, outlier_sigma=0.2,
                     seed=0, echo_times=SHORT_TE) -> Scenario:
    """Phantom data with Gaussian noise plus a sparse set of large-variance outliers.

    The brain mask doubles as the magnitude, so voxels outside it carry no data.
    """
    dims = (n, n, n)
    chi, mask = make_phantom(preset_shapes(preset, dims), dims)
    protocol = EchoProtocol(3.0, echo_times)
    meas = forward_measurements(chi, protocol, mask, dipole_kernel(dims))
    noisy = add_noise(meas, sigma, outlier_frac, outlier_sigma, seed=seed)
    return Scenario(chi, mask, EchoSet.from_measurements(noisy, protocol))


def background_sources(n) -> list[Ellipsoid]:
    """Three spheres in the corners of an ``n^3`` grid, clear of the preset brain."""
    return [
        Ellipsoid((0.08 * n, 0.08 * n, 0.10 * n), (0.07 * n,) * 3, 1.0, "background"),
        Ellipsoid((0.90 * n, 0.15 * n, 0.88 * n), (0.08 * n,) * 3, -1.0, "background"),
        Ellipsoid((0.50 * n, 0.93 * n, 0.06 * n), (0.05 * n,) * 3, 1.0, "background"),
    ]


def background_scenario(n=32, peak_ppm=0.02, sigma=0.01, seed=0,
                        echo_times=SHORT_TE) -> Scenario:
    """Healthy phantom whose brain also sees a smooth field from sources outside it.

    The sources are scaled so the field inside the mask peaks at ``peak_ppm``;
    only the in-mask susceptibility counts as ground truth.
    """
    dims = (n, n, n)
    chi, mask = make_phantom(preset_shapes("healthy", dims), dims)
    src, _ = make_phantom(background_sources(n), dims)
    if np.any((src != 0) & (mask > 0)):
        raise ValueError("background sources overlap the brain")
    kernel = dipole_kernel(dims)
    bg = field_from_chi(src, kernel)
    scale = peak_ppm / np.abs(bg[mask > 0]).max()
    protocol = EchoProtocol(3.0, echo_times)
    meas = forward_measurements(chi + scale * src, protocol, mask, kernel)
    echoes = EchoSet.from_measurements(add_noise(meas, sigma, seed=seed), protocol)
    return Scenario(chi, mask, echoes, scale * bg * mask)
