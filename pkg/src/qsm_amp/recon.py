"""Two-stage AMP reconstruction with parameter estimation, plus baselines.

Pipeline (``reconstruct_amp_pe``)::

    chi0 = ls_init(...)                       # weighted least squares, CG
    stage 1: repeat { linearize at chi ; GAMP (Laplace / AWGN) }
    xi    = fraction of stage-1 residuals inside 3 noise std
    stage 2: repeat { linearize at chi ; GAMP (Laplace / 2-GM, xi frozen) }

The wavelet coefficients are the GAMP unknowns; the operator handed to the
solver is ``J diag(mask) H^T`` where ``J`` is the linearized forward model
and ``H`` the orthogonal wavelet analysis.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft
from scipy.sparse.linalg import LinearOperator, cg

from . import gamp
from .dipole import EchoSet, KSpaceDipole, linearize, realify, forward_measurements
from .gamp import (AwgnChannel, DivergenceError, GampConfig, GaussMixChannel, GmNoiseParams,
                   LaplacePrior, gamp_solve)
from .wavelet import BASES, default_levels, dwt3, idwt3

logger = logging.getLogger(__name__)

MASK_POLICIES = ("final_only", "during_optimization")
METHODS = ("amp-pe", "amp-awgn", "amp-free-xi", "tkd", "ls")


class ConfigError(ValueError):
    pass


@dataclass
class ReconConfig:
    basis: str = "db1"
    levels: int | None = None
    alpha: float = 0.01
    beta: float = 0.1
    outer_max: int = 20
    inner_max: int = 50
    zeta: float = 1e-3
    tol: float = 1e-4
    mask_policy: str = "final_only"
    weight_normalization: bool = True
    ls_iters: int = 30
    ls_reg: float = 1e-3
    tau2_factor: float = 100.0
    outlier_sigmas: float = 3.0
    tkd_threshold: float = 0.15
    lambda_rule: str = "marginal"

    REQUIRED = ("basis", "alpha", "beta", "outer_max", "inner_max", "zeta")

    def __post_init__(self):
        if self.basis not in BASES:
            raise ConfigError(f"basis: unsupported {self.basis!r}")
        if not self.zeta > 0:
            raise ConfigError("zeta: must be positive")
        if self.outer_max < 1 or self.inner_max < 1:
            raise ConfigError("outer_max/inner_max: must be >= 1")
        if not (0 < self.alpha <= 1 and 0 < self.beta <= 1):
            raise ConfigError("alpha/beta: damping rates must lie in (0, 1]")
        if self.lambda_rule not in gamp.LAMBDA_RULES:
            raise ConfigError(f"lambda_rule: expected one of {gamp.LAMBDA_RULES}")
        if self.mask_policy not in MASK_POLICIES:
            raise ConfigError(f"mask_policy: expected one of {MASK_POLICIES}")

    @classmethod
    def from_json(cls, doc: dict) -> "ReconConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        for key in cls.REQUIRED:
            if key not in doc:
                raise ConfigError(f"missing config field {key!r}")
        unknown = set(doc) - names
        if unknown:
            raise ConfigError(f"unknown config field(s) {sorted(unknown)}")
        return cls(**doc)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def gamp_config(self) -> GampConfig:
        return GampConfig(alpha=self.alpha, beta=self.beta, max_iter=self.inner_max, tol=self.tol)


@dataclass
class ReconReport:
    chi: np.ndarray = field(repr=False)
    method: str
    params: dict
    changes: dict
    wall_time: float
    stage1_chi: np.ndarray | None = field(default=None, repr=False)
    trace: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        return {
            "method": self.method,
            "params": self.params,
            "changes": self.changes,
            "wall_time_s": self.wall_time,
            "outer_iterations": {k: len(v) for k, v in self.changes.items()},
        }


class ReconDivergenceError(RuntimeError):
    def __init__(self, msg, report: ReconReport):
        super().__init__(msg)
        self.report = report


class SynthesisOperator:
    """``v -> J(mask * H^T v)`` with its transpose, for the solver."""

    def __init__(self, model, basis, levels, mask=None):
        self.model = model
        self.basis = basis
        self.levels = levels
        self.mask = None if mask is None else np.asarray(mask, dtype=np.float64)
        self.n = model.n
        self.m = model.m
        self.frob_norm_sq = model.frob_norm_sq(self.mask)

    def to_image(self, v):
        chi = idwt3(v, self.basis, self.levels)
        return chi if self.mask is None else chi * self.mask

    def apply(self, v):
        return self.model.apply(self.to_image(v))

    def adjoint(self, w):
        g = self.model.adjoint(w)
        if self.mask is not None:
            g = g * self.mask
        return dwt3(g, self.basis, self.levels)


def _prepare(echoes: EchoSet, config: ReconConfig):
    if config.weight_normalization:
        echoes = echoes.normalized()
    kernel = echoes.kernel()
    levels = config.levels or default_levels(echoes.dims)
    return echoes, kernel, levels


def ls_init(echoes: EchoSet, kernel: KSpaceDipole, n_iter=30, reg=1e-3, mask=None) -> np.ndarray:
    """CG solution of the Tikhonov-regularized linearization about zero.

    Minimizes ``||J chi - rhs||^2 + mu ||chi||^2`` with
    ``mu = reg * ||J||_F^2 / N`` using a fixed number of CG iterations.
    """
    model = linearize(np.zeros(kernel.dims), echoes, kernel)
    mk = None if mask is None else np.asarray(mask, dtype=np.float64)
    mu = reg * model.frob_norm_sq() / model.n
    shape = kernel.dims

    def normal(x):
        x = x.reshape(shape)
        if mk is not None:
            x = x * mk
        out = model.adjoint(model.apply(x)) + mu * x
        if mk is not None:
            out = out * mk
        return out.ravel()

    b = model.adjoint(model.rhs)
    if mk is not None:
        b = b * mk
    if not np.any(b):
        return np.zeros(shape)
    op = LinearOperator((model.n, model.n), matvec=normal, dtype=np.float64)
    x, _ = cg(op, b.ravel(), rtol=1e-30, atol=0.0, maxiter=n_iter)
    return x.reshape(shape)


def estimate_gm_weights(residual, tau0, n_sigmas=3.0):
    """Two-step mixture weights from a preliminary residual.

    Entries with ``|eps| <= n_sigmas * sqrt(tau0)`` count as inliers;
    ``xi1`` is their fraction. Both weights are clamped to ``[1e-4, 1 - 1e-4]``.
    """
    eps = np.abs(np.ravel(residual))
    if eps.size == 0:
        raise ValueError("empty residual")
    if not tau0 > 0:
        raise ValueError("tau0 must be positive")
    xi2 = float(np.mean(eps > n_sigmas * np.sqrt(tau0)))
    xi2 = float(np.clip(xi2, *gamp.XI_CLAMP))
    return 1.0 - xi2, xi2


def _outer_loop(echoes, kernel, chi, prior, channel, config, levels, mask, stage, state):
    """Algorithm-1 outer loop: relinearize, solve, test relative change."""
    changes = []
    gcfg = config.gamp_config()
    v = dwt3(chi, config.basis, levels)
    for r in range(config.outer_max):
        model = linearize(chi, echoes, kernel)
        op = SynthesisOperator(model, config.basis, levels, mask)
        try:
            res = gamp_solve(op, model.rhs, prior, channel, gcfg, v0=v, tau_v0=state.get("tau_v"))
        except DivergenceError as exc:
            state["trace"].extend({"stage": stage, "outer": r + 1, **e} for e in exc.trace)
            raise
        state["trace"].extend({"stage": stage, "outer": r + 1, **e} for e in res.trace)
        v, state["tau_v"] = res.v, res.tau_v
        new = op.to_image(v)
        change = float(np.linalg.norm(new - chi) / max(np.linalg.norm(new), 1e-30))
        changes.append(change)
        chi = new
        logger.info("%s outer %d: change %.3e (%d inner)", stage, r + 1, change, res.n_iter)
        if change < config.zeta:
            break
    return chi, changes


def _finish(chi, mask):
    return chi if mask is None else chi * np.asarray(mask, dtype=np.float64)


def _run(echoes, config, mask, method):
    config = config or ReconConfig()
    t0 = time.perf_counter()
    echoes, kernel, levels = _prepare(echoes, config)
    opt_mask = mask if config.mask_policy == "during_optimization" else None
    chi0 = ls_init(echoes, kernel, config.ls_iters, config.ls_reg, opt_mask)
    model0 = linearize(chi0, echoes, kernel)
    res0 = model0.residual(chi0)
    v0 = dwt3(chi0, config.basis, levels)
    lam0 = gamp.estimate_lambda(v0, 1.0) if np.any(v0) else 1.0
    tau_ls = max(float(np.mean(res0**2)), gamp.EPS)

    state = {"trace": [], "tau_v": None}
    prior = LaplacePrior(lam0, rule=config.lambda_rule)
    awgn = AwgnChannel(tau_ls)
    changes = {}
    params = {}

    def partial(chi, stage1=None):
        return ReconReport(_finish(chi, mask), method, params, changes,
                           time.perf_counter() - t0, stage1, state["trace"])

    chi = chi0
    try:
        chi, changes["stage1"] = _outer_loop(echoes, kernel, chi0, prior, awgn, config, levels,
                                             opt_mask, "stage1", state)
    except DivergenceError as exc:
        raise ReconDivergenceError(str(exc), partial(chi)) from exc
    params.update(lam=prior.lam, tau0=awgn.tau0)
    stage1 = chi
    if method == "amp-awgn":
        params["lambda"] = params.pop("lam")
        return partial(chi, stage1)

    residual = linearize(stage1, echoes, kernel).residual(stage1)
    xi = estimate_gm_weights(residual, awgn.tau0, config.outlier_sigmas)
    params["xi_two_step"] = list(xi)
    gm = GmNoiseParams(xi, (awgn.tau0, config.tau2_factor * awgn.tau0),
                       weights_frozen=(method == "amp-pe"))
    mix = GaussMixChannel(gm)
    try:
        chi, changes["stage2"] = _outer_loop(echoes, kernel, stage1, prior, mix, config, levels,
                                             opt_mask, "stage2", state)
    except DivergenceError as exc:
        raise ReconDivergenceError(str(exc), partial(chi, stage1)) from exc
    params["lambda"] = prior.lam
    params.pop("lam")
    params.update(tau=list(mix.gm.tau), xi=list(mix.gm.xi))
    return partial(chi, stage1)


def reconstruct_amp_pe(echoes: EchoSet, config: ReconConfig | None = None, mask=None) -> ReconReport:
    """Full two-stage reconstruction with frozen two-step mixture weights."""
    return _run(echoes, config, mask, "amp-pe")


def reconstruct_amp_awgn(echoes: EchoSet, config: ReconConfig | None = None, mask=None) -> ReconReport:
    """Single-Gaussian noise model only (stage 1 of the full pipeline)."""
    return _run(echoes, config, mask, "amp-awgn")


def reconstruct_amp_free_weights(echoes: EchoSet, config: ReconConfig | None = None,
                                 mask=None) -> ReconReport:
    """Stage 2 with mixture weights re-estimated every iteration."""
    return _run(echoes, config, mask, "amp-free-xi")


def reconstruct_ls(echoes: EchoSet, config: ReconConfig | None = None, mask=None) -> ReconReport:
    config = config or ReconConfig()
    t0 = time.perf_counter()
    echoes, kernel, _ = _prepare(echoes, config)
    opt_mask = mask if config.mask_policy == "during_optimization" else None
    chi = ls_init(echoes, kernel, config.ls_iters, config.ls_reg, opt_mask)
    return ReconReport(_finish(chi, mask), "ls", {}, {}, time.perf_counter() - t0)


def estimate_field(echoes: EchoSet) -> np.ndarray:
    """Per-voxel field (ppm) from a magnitude-weighted fit of temporally unwrapped phases."""
    scales = echoes.protocol.scales()
    phase = np.concatenate([np.zeros((1,) + tuple(echoes.dims)), echoes.phases])
    unwrapped = np.unwrap(phase, axis=0)[1:]
    w2 = echoes.weights**2
    s = scales[:, None, None, None]
    num = np.sum(w2 * s * unwrapped, axis=0)
    den = np.sum(w2 * s**2, axis=0)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def tkd_baseline(field_ppm, kernel: KSpaceDipole, threshold=0.15) -> np.ndarray:
    """Truncated k-space division; ``|D|`` floored at ``threshold``, ``D(0)`` term zeroed."""
    if not 0 < threshold <= 2.0 / 3.0:
        raise ValueError("threshold must lie in (0, 2/3]")
    d = kernel.half
    trunc = np.where(d >= 0, 1.0, -1.0) * np.maximum(np.abs(d), threshold)
    inv = 1.0 / trunc
    inv[0, 0, 0] = 0.0
    f = np.asarray(field_ppm, dtype=np.float64)
    return sfft.irfftn(sfft.rfftn(f) * inv, s=kernel.dims)


def reconstruct_tkd(echoes: EchoSet, config: ReconConfig | None = None, mask=None) -> ReconReport:
    config = config or ReconConfig()
    t0 = time.perf_counter()
    field_ppm = estimate_field(echoes)
    if mask is not None:
        field_ppm = field_ppm * np.asarray(mask, dtype=np.float64)
    chi = tkd_baseline(field_ppm, echoes.kernel(), config.tkd_threshold)
    return ReconReport(_finish(chi, mask), "tkd", {"threshold": config.tkd_threshold}, {},
                       time.perf_counter() - t0)


DISPATCH = {
    "amp-pe": reconstruct_amp_pe,
    "amp-awgn": reconstruct_amp_awgn,
    "amp-free-xi": reconstruct_amp_free_weights,
    "tkd": reconstruct_tkd,
    "ls": reconstruct_ls,
}


def reconstruct(method, echoes, config=None, mask=None) -> ReconReport:
    if method not in DISPATCH:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    return DISPATCH[method](echoes, config, mask)
