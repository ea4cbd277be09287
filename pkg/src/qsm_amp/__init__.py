"""Nonlinear QSM dipole inversion with approximate message passing.

Modules follow the processing chain: ``volume`` (I/O), ``phantom`` and
``dipole`` (phantoms, noise, forward model), ``wavelet`` (orthogonal 3D DWT),
``gamp`` (generic solver), ``recon`` (two-stage reconstruction and
baselines), ``metrics``, ``scenarios`` (synthetic experiment data) and ``cli``.
"""

__version__ = "0.1.0"
