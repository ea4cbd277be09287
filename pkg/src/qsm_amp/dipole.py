"""Dipole kernel, multi-echo nonlinear forward model and its linearization.

Susceptibility is kept in ppm throughout; the only place the 1e-6 factor
appears is :func:`phase_scale`. Complex measurements are realified by
stacking ``(real, imag)`` on a leading axis so every measurement array has
shape ``(2, E, nx, ny, nz)``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.fft as sfft
from scipy import stats

from .volume import Volume, read_qvol, write_qvol

GAMMA_HZ_PER_T = 42.577478e6
MAX_DENSE_UNKNOWNS = 2000


def _unit(b0_dir):
    b = np.asarray(b0_dir, dtype=np.float64)
    if b.shape != (3,) or abs(np.linalg.norm(b) - 1.0) > 1e-6:
        raise ValueError(f"b0_dir must be a unit 3-vector, got {b0_dir}")
    return b


@dataclass(frozen=True)
class KSpaceDipole:
    dims: tuple[int, int, int]
    kernel: np.ndarray = field(repr=False)

    @cached_property
    def half(self) -> np.ndarray:
        """Kernel restricted to the real-FFT half grid."""
        return np.ascontiguousarray(self.kernel[..., : self.dims[2] // 2 + 1])

    def apply(self, x) -> np.ndarray:
        """``F* D F x`` for a real array (or a stack of them on leading axes)."""
        x = np.asarray(x, dtype=np.float64)
        axes = (-3, -2, -1)
        return sfft.irfftn(sfft.rfftn(x, axes=axes) * self.half, s=self.dims, axes=axes)

    @cached_property
    def impulse_response(self) -> np.ndarray:
        """Circulant first column of ``F* D F`` (the response to a unit impulse at 0)."""
        return sfft.irfftn(self.half, s=self.dims)


def dipole_kernel(dims, voxel_size=(1.0, 1.0, 1.0), b0_dir=(0.0, 0.0, 1.0)) -> KSpaceDipole:
    """``D(k) = 1/3 - (k . b0)^2 / |k|^2`` on the unshifted FFT grid, ``D(0) = 0``."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"invalid dims {dims}")
    if any(not v > 0 for v in voxel_size):
        raise ValueError(f"voxel sizes must be positive, got {voxel_size}")
    b = _unit(b0_dir)
    k = np.meshgrid(
        *[sfft.fftfreq(n) / dv for n, dv in zip(dims, voxel_size)], indexing="ij"
    )
    k2 = k[0] ** 2 + k[1] ** 2 + k[2] ** 2
    kb = b[0] * k[0] + b[1] * k[1] + b[2] * k[2]
    with np.errstate(invalid="ignore", divide="ignore"):
        d = 1.0 / 3.0 - kb**2 / k2
    d[0, 0, 0] = 0.0
    return KSpaceDipole(dims, d)


def field_from_chi(chi, kernel: KSpaceDipole) -> np.ndarray:
    """Tissue field in ppm of B0 produced by ``chi`` (ppm)."""
    chi = np.asarray(getattr(chi, "data", chi), dtype=np.float64)
    if chi.shape != kernel.dims:
        raise ValueError(f"chi shape {chi.shape} does not match kernel dims {kernel.dims}")
    return kernel.apply(chi)


@dataclass(frozen=True)
class EchoProtocol:
    b0: float
    echo_times: tuple[float, ...]
    gamma: float = GAMMA_HZ_PER_T

    def __post_init__(self):
        te = tuple(float(t) for t in self.echo_times)
        object.__setattr__(self, "echo_times", te)
        if not self.b0 > 0:
            raise ValueError("b0 must be positive")
        if not te or te[0] < 0 or any(b <= a for a, b in zip(te, te[1:])):
            raise ValueError(f"echo times must be non-negative and strictly increasing: {te}")

    @property
    def n_echoes(self) -> int:
        return len(self.echo_times)

    def scales(self) -> np.ndarray:
        return np.array([phase_scale(self, e) for e in range(self.n_echoes)])

    def to_json(self) -> dict:
        return {"b0_T": self.b0, "gamma_hz_per_t": self.gamma, "echo_times_s": list(self.echo_times)}

    @classmethod
    def from_json(cls, doc: dict) -> "EchoProtocol":
        return cls(
            b0=doc["b0_T"],
            echo_times=doc["echo_times_s"],
            gamma=doc.get("gamma_hz_per_t", GAMMA_HZ_PER_T),
        )


def phase_scale(protocol: EchoProtocol, e: int) -> float:
    """Radians of phase per ppm of field at echo ``e``."""
    return 2.0 * np.pi * protocol.gamma * protocol.echo_times[e] * protocol.b0 * 1e-6


def _weights(weights, protocol, dims):
    w = np.asarray(weights, dtype=np.float64)
    if w.shape == tuple(dims):
        w = np.broadcast_to(w, (protocol.n_echoes,) + tuple(dims))
    if w.shape != (protocol.n_echoes,) + tuple(dims):
        raise ValueError(f"weights shape {w.shape} inconsistent with {protocol.n_echoes} echoes x {dims}")
    return w


def echo_phases(chi, protocol: EchoProtocol, kernel: KSpaceDipole) -> np.ndarray:
    """Noise-free phases ``A_e chi``, shape ``(E, nx, ny, nz)``."""
    f = field_from_chi(chi, kernel)
    return protocol.scales()[:, None, None, None] * f


def forward_measurements(chi, protocol: EchoProtocol, weights, kernel: KSpaceDipole) -> np.ndarray:
    """``W_e exp(i A_e chi)`` per echo, complex ``(E, nx, ny, nz)``."""
    phase = echo_phases(chi, protocol, kernel)
    return _weights(weights, protocol, kernel.dims) * np.exp(1j * phase)


def g_offset(chi_r, protocol: EchoProtocol, weights, kernel: KSpaceDipole) -> np.ndarray:
    """Linearization constant ``W_e exp(i A_e chi_r) (i A_e chi_r - 1)``."""
    phase = echo_phases(chi_r, protocol, kernel)
    return _weights(weights, protocol, kernel.dims) * np.exp(1j * phase) * (1j * phase - 1.0)


def realify(z) -> np.ndarray:
    return np.stack([z.real, z.imag])


def complexify(w) -> np.ndarray:
    return w[0] + 1j * w[1]


@dataclass(frozen=True)
class EchoSet:
    """Local-field phases and magnitude weights for every echo.

    ``phases`` and ``weights`` have shape ``(E, nx, ny, nz)``.
    """

    phases: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    protocol: EchoProtocol
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    b0_dir: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        phases = np.asarray(self.phases, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if phases.ndim != 4 or phases.shape[0] != self.protocol.n_echoes:
            raise ValueError(f"phases shape {phases.shape} does not hold {self.protocol.n_echoes} echoes")
        if weights.shape != phases.shape:
            raise ValueError("phases and weights must share dims")
        if np.any(weights < 0):
            raise ValueError("weights must be non-negative")
        _unit(self.b0_dir)
        object.__setattr__(self, "phases", phases)
        object.__setattr__(self, "weights", weights)

    @property
    def dims(self):
        return self.phases.shape[1:]

    def measurements(self) -> np.ndarray:
        return self.weights * np.exp(1j * self.phases)

    def kernel(self) -> KSpaceDipole:
        return dipole_kernel(self.dims, self.voxel_size, self.b0_dir)

    def normalized(self) -> "EchoSet":
        """Copy with weights scaled so their maximum is 1."""
        peak = self.weights.max()
        if peak <= 0:
            return self
        return EchoSet(self.phases, self.weights / peak, self.protocol, self.voxel_size, self.b0_dir)

    @classmethod
    def from_measurements(cls, meas, protocol, voxel_size=(1.0, 1.0, 1.0), b0_dir=(0.0, 0.0, 1.0)):
        return cls(np.angle(meas), np.abs(meas), protocol, voxel_size, b0_dir)

    def save(self, directory) -> None:
        d = Path(directory)
        os.makedirs(d, exist_ok=True)
        with open(d / "protocol.json", "w", encoding="utf-8") as f:
            json.dump(self.protocol.to_json(), f, indent=2)
        for e in range(self.protocol.n_echoes):
            for name, arr, kind in (("phase", self.phases[e], "phase_rad"),
                                    ("magnitude", self.weights[e], "magnitude")):
                vol = Volume.from_array(arr, kind, self.voxel_size, self.b0_dir)
                write_qvol(vol, d / f"{name}_e{e + 1}.qvol")

    @classmethod
    def load(cls, directory) -> "EchoSet":
        d = Path(directory)
        with open(d / "protocol.json", encoding="utf-8") as f:
            protocol = EchoProtocol.from_json(json.load(f))
        phases, weights = [], []
        header = None
        for e in range(protocol.n_echoes):
            ph = read_qvol(d / f"phase_e{e + 1}.qvol")
            mag = read_qvol(d / f"magnitude_e{e + 1}.qvol")
            header = ph.header
            phases.append(ph.data)
            weights.append(mag.data)
        return cls(np.array(phases), np.array(weights), protocol, header.voxel_size, header.b0_dir)


class LinearizedModel:
    """First-order expansion of the multi-echo model about ``chi_r``.

    ``apply`` maps a real susceptibility volume to realified weighted
    measurements ``(2, E, nx, ny, nz)``; ``adjoint`` is its exact transpose.
    ``rhs`` is ``realify(W exp(i phi) + g(chi_r))``.
    """

    def __init__(self, chi_r, echoes: EchoSet, kernel: KSpaceDipole):
        chi_r = np.asarray(chi_r, dtype=np.float64)
        if chi_r.shape != kernel.dims or tuple(echoes.dims) != kernel.dims:
            raise ValueError("chi_r, echoes and kernel must share dims")
        self.kernel = kernel
        self.echoes = echoes
        self.chi_r = chi_r
        self.scales = echoes.protocol.scales()
        phase_r = self.scales[:, None, None, None] * kernel.apply(chi_r)
        self.phase_r = phase_r
        rotor = echoes.weights * np.exp(1j * phase_r)
        # realified per-echo gain of the linear term, s_e * i * W e^{i phase_r}
        self._gain = realify(1j * rotor * self.scales[:, None, None, None])
        self.rhs = realify(echoes.measurements() + rotor * (1j * phase_r - 1.0))
        self.n = int(np.prod(kernel.dims))
        self.m = self.rhs.size

    @property
    def dims(self):
        return self.kernel.dims

    def apply(self, chi) -> np.ndarray:
        f = self.kernel.apply(chi)
        out = np.empty(self.rhs.shape)
        np.multiply(self._gain[0], f, out=out[0])
        np.multiply(self._gain[1], f, out=out[1])
        return out

    def adjoint(self, w) -> np.ndarray:
        w = np.asarray(w).reshape(self.rhs.shape)
        back = np.einsum("ce...,ce...->...", self._gain, w)
        return self.kernel.apply(back)

    def column_norms_sq(self) -> np.ndarray:
        """Squared norm of every column, via ``sum_e s_e^2 (W_e^2 * a^2)``."""
        energy = np.tensordot(self.scales**2, self.echoes.weights**2, axes=1)
        a2 = self.kernel.impulse_response**2
        return sfft.irfftn(sfft.rfftn(energy) * sfft.rfftn(a2), s=self.dims)

    def frob_norm_sq(self, mask=None) -> float:
        """Exact ``||J diag(mask)||_F^2``."""
        if mask is None:
            energy = float(np.dot(self.scales**2, (self.echoes.weights**2).reshape(len(self.scales), -1).sum(1)))
            return energy * float(np.mean(self.kernel.kernel**2))
        return float(np.sum(self.column_norms_sq()[np.asarray(mask, dtype=bool)]))

    def residual(self, chi) -> np.ndarray:
        """Realified nonlinear data residual ``W exp(i phi) - W exp(i A chi)``."""
        model = forward_measurements(chi, self.echoes.protocol, self.echoes.weights, self.kernel)
        return realify(self.echoes.measurements() - model)


def linearize(chi_r, echoes: EchoSet, kernel: KSpaceDipole) -> LinearizedModel:
    return LinearizedModel(chi_r, echoes, kernel)


def hutchinson_frob_norm_sq(apply, shape, n_probes=8, seed=0) -> float:
    """Randomized estimate of ``||J||_F^2 = E ||J z||^2`` over Rademacher ``z``."""
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(n_probes):
        z = rng.choice([-1.0, 1.0], size=shape)
        total += float(np.sum(apply(z) ** 2))
    return total / n_probes


def dense_operator(dims, protocol: EchoProtocol, echo=0, voxel_size=(1.0, 1.0, 1.0),
                   b0_dir=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Densify ``A_e = scale_e F* D F`` column by column."""
    n = int(np.prod(dims))
    if n > MAX_DENSE_UNKNOWNS:
        raise ValueError(
            f"refusing to densify {n} unknowns (limit {MAX_DENSE_UNKNOWNS}); use dims <= 12^3"
        )
    kernel = dipole_kernel(dims, voxel_size, b0_dir)
    s = phase_scale(protocol, echo)
    eye = np.eye(n).reshape((n,) + tuple(dims))
    cols = s * kernel.apply(eye).reshape(n, n)
    return cols.T


def operator_entry_stats(dims, protocol: EchoProtocol, echo=0, bins=64, sample=1000, seed=0) -> dict:
    """Moments and histogram of the entries of the dense operator ``A_e``."""
    a = dense_operator(dims, protocol, echo)
    entries = a.ravel()
    row_mean = a.mean(axis=1)
    row_norm = np.linalg.norm(a, axis=1)
    counts, edges = np.histogram(entries, bins=bins)
    rng = np.random.default_rng(seed)
    pick = rng.choice(entries.size, size=min(sample, entries.size), replace=False)
    return {
        "dims": list(dims),
        "echo": echo,
        "n_entries": int(entries.size),
        "mean": float(entries.mean()),
        "variance": float(entries.var()),
        "skewness": float(stats.skew(entries)),
        "excess_kurtosis": float(stats.kurtosis(entries)),
        "max_abs_row_mean": float(np.abs(row_mean).max()),
        "max_rel_row_mean": float(np.max(np.abs(row_mean) / row_norm)),
        "normality_pvalue": float(stats.normaltest(entries[pick]).pvalue),
        "histogram": {"counts": counts.tolist(), "edges": edges.tolist()},
    }
