"""Scalar-variance GAMP with MAP channels and damped parameter estimation.

The solver works on any operator object exposing ``apply``, ``adjoint``,
``frob_norm_sq`` (float), ``n`` and ``m``. Input channel: Laplace prior
(soft thresholding). Output channels: a single Gaussian (AWGN) or a
two-component zero-mean Gaussian mixture. All vectors may carry arbitrary
array shapes; only sums and elementwise operations are used.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfcx, expit

logger = logging.getLogger(__name__)

EPS = 1e-12
XI_CLAMP = (1e-4, 1.0 - 1e-4)


class ParameterEstimationWarning(UserWarning):
    """A parameter update was skipped and the previous value kept."""


class DivergenceError(RuntimeError):
    """GAMP iterate blew up; ``trace`` holds the per-iteration diagnostics."""

    def __init__(self, msg, trace=None, v=None):
        super().__init__(msg)
        self.trace = trace or []
        self.v = v


def damp(old, new, rate):
    """``old + rate * (new - old)`` with ``rate`` in (0, 1]."""
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"damping rate must lie in (0, 1], got {rate}")
    if rate == 1.0:
        return new
    return old + rate * (new - old)


# ---------------------------------------------------------------- input side

def laplace_denoise(r, tau_r, lam):
    """MAP denoiser for a Laplace(``lam``) prior: soft threshold at ``lam * tau_r``.

    Returns ``(v, tau_v)`` where ``tau_v`` is the scalar posterior variance
    (``tau_r`` times the fraction of surviving coefficients).
    """
    if not tau_r > 0:
        raise ValueError(f"tau_r must be positive, got {tau_r}")
    r = np.asarray(r, dtype=np.float64)
    thr = lam * tau_r
    v = np.sign(r) * np.maximum(np.abs(r) - thr, 0.0)
    frac = np.count_nonzero(v) / max(v.size, 1)
    return v, max(tau_r * frac, EPS * tau_r)


def estimate_lambda(v, previous=None):
    """Laplace rate maximising the likelihood of ``v``: ``N / (sum |v| + eps)``.

    For an all-zero ``v`` the previous value is returned with a warning.
    """
    v = np.asarray(v)
    total = float(np.sum(np.abs(v)))
    if total == 0.0:
        warnings.warn("all coefficients are zero; lambda left unchanged", ParameterEstimationWarning)
        return previous
    return v.size / (total + EPS)


def laplace_posterior_abs_mean(r, tau_r, lam):
    """``E|v|`` under the posterior ``Laplace(v; lam) N(r; v, tau_r)``.

    The posterior is a pair of truncated Gaussians centred at
    ``r -/+ lam * tau_r``. Writing both branch masses through ``erfcx``
    cancels the common Gaussian factor, so nothing underflows.
    """
    r = np.asarray(r, dtype=np.float64)
    sd = np.sqrt(tau_r)
    mu_pos, mu_neg = r - lam * tau_r, r + lam * tau_r
    root2 = np.sqrt(2.0)
    with np.errstate(over="ignore"):
        e_pos = erfcx(-mu_pos / (sd * root2))
        e_neg = erfcx(mu_neg / (sd * root2))
        w_pos = 1.0 / (1.0 + e_neg / e_pos)
    c = sd * np.sqrt(2.0 / np.pi)
    mean_pos = mu_pos + c / e_pos
    mean_neg = c / e_neg - mu_neg
    return w_pos * mean_pos + (1.0 - w_pos) * mean_neg


def estimate_lambda_marginal(r, tau_r, lam):
    """EM step on the Laplace rate using the denoiser input ``(r, tau_r)``.

    ``N / sum E|v|`` with the expectation under the posterior rather than
    at the thresholded point estimate. Its fixed point maximises the
    marginal likelihood of ``r`` and, unlike :func:`estimate_lambda`, does
    not feed the sparsity of the thresholded estimate back into the rate.
    """
    total = float(np.sum(laplace_posterior_abs_mean(r, tau_r, lam)))
    return np.size(r) / (total + EPS)


# --------------------------------------------------------------- output side

def awgn_output(p, tau_p, y, tau0):
    """Posterior mean/variance of ``z ~ N(p, tau_p)`` given ``y = z + N(0, tau0)``."""
    if not (np.all(np.asarray(tau_p) > 0) and tau0 > 0):
        raise ValueError("variances must be positive")
    z = (tau0 * p + tau_p * y) / (tau_p + tau0)
    tau_z = tau_p * tau0 / (tau_p + tau0)
    return z, tau_z


@dataclass
class GmNoiseParams:
    xi: tuple[float, float] = (0.9, 0.1)
    tau: tuple[float, float] = (1.0, 100.0)
    weights_frozen: bool = True

    def __post_init__(self):
        xi = tuple(float(x) for x in self.xi)
        tau = tuple(float(t) for t in self.tau)
        if len(xi) != 2 or len(tau) != 2:
            raise ValueError("two mixture components expected")
        if min(xi) < 0 or abs(sum(xi) - 1.0) > 1e-9:
            raise ValueError(f"mixture weights must be non-negative and sum to 1, got {xi}")
        if min(tau) <= 0:
            raise ValueError(f"mixture variances must be positive, got {tau}")
        self.xi, self.tau = xi, tau


def _gm_terms(p, tau_p, y, params: GmNoiseParams):
    """Outlier responsibility and per-component posterior means/variances."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    (xi1, xi2), (t1, t2) = params.xi, params.tau
    v1, v2 = tau_p + t1, tau_p + t2
    d2 = (y - p) ** 2
    # log-odds of component 2; a difference of finite terms, so no underflow
    with np.errstate(divide="ignore"):
        odds = (np.log(xi2) - np.log(xi1) - 0.5 * np.log(v2 / v1)
                + 0.5 * d2 * (1.0 / v1 - 1.0 / v2))
    resp2 = expit(odds)
    m1 = (t1 * p + tau_p * y) / v1
    m2 = (t2 * p + tau_p * y) / v2
    return resp2, (m1, m2), (tau_p * t1 / v1, tau_p * t2 / v2)


def _gm_moments(resp2, m, v):
    z = m[0] + resp2 * (m[1] - m[0])
    tau_z = v[0] + resp2 * (v[1] - v[0]) + resp2 * (1.0 - resp2) * (m[1] - m[0]) ** 2
    return z, tau_z


def gm2_output(p, tau_p, y, params: GmNoiseParams):
    """Posterior moments of ``z`` under the two-component Gaussian-mixture noise."""
    if not tau_p > 0:
        raise ValueError("tau_p must be positive")
    return _gm_moments(*_gm_terms(p, tau_p, y, params))


def estimate_tau_awgn(y, z, tau_z):
    """EM update of the noise variance: ``mean((y - z)^2 + tau_z)``."""
    y = np.asarray(y)
    val = float(np.mean((y - z) ** 2 + tau_z))
    return max(val, EPS)


def estimate_tau_gm(y, p, tau_p, params: GmNoiseParams, terms=None):
    """EM update of both mixture variances with the weights held fixed.

    A component whose total responsibility falls below ``1e-8 * M`` keeps
    its previous variance (with a warning). The result is ordered so that
    ``tau1 <= tau2``.
    """
    resp2, m, v = terms or _gm_terms(p, tau_p, y, params)
    y = np.asarray(y)
    resp = (1.0 - resp2, resp2)
    tau = list(params.tau)
    for s in range(2):
        mass = float(np.sum(resp[s]))
        if mass < 1e-8 * y.size:
            warnings.warn(f"mixture component {s + 1} has no responsibility; variance kept",
                          ParameterEstimationWarning)
            continue
        tau[s] = max(float(np.sum(resp[s] * ((y - m[s]) ** 2 + v[s]))) / mass, EPS)
    return tuple(sorted(tau))


def estimate_xi_free(y, p, tau_p, params: GmNoiseParams, terms=None):
    """Responsibility-averaged mixture weights (the unconstrained EM update)."""
    resp2 = (terms or _gm_terms(p, tau_p, y, params))[0]
    xi2 = float(np.clip(np.mean(resp2), *XI_CLAMP))
    return (1.0 - xi2, xi2)


# ------------------------------------------------------------------ channels

LAMBDA_RULES = ("map", "marginal")


class LaplacePrior:
    """Laplace prior with a damped rate update.

    ``rule="map"`` re-fits the rate to the current coefficients,
    ``rule="marginal"`` uses :func:`estimate_lambda_marginal` on the last
    denoiser input.
    """

    def __init__(self, lam=1.0, estimate=True, rule="map"):
        if rule not in LAMBDA_RULES:
            raise ValueError(f"unknown lambda rule {rule!r}; choose from {LAMBDA_RULES}")
        self.lam = float(lam)
        self.estimate = estimate
        self.rule = rule
        self._last = None

    def denoise(self, r, tau_r):
        self._last = (r, tau_r)
        return laplace_denoise(r, tau_r, self.lam)

    def update(self, v, beta):
        if not self.estimate:
            return
        if self.rule == "marginal" and self._last is not None:
            new = estimate_lambda_marginal(*self._last, self.lam)
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ParameterEstimationWarning)
                new = estimate_lambda(v, self.lam)
        self.lam = damp(self.lam, new, beta)

    def params(self):
        return {"lambda": self.lam}


class AwgnChannel:
    def __init__(self, tau0=1.0, estimate=True):
        self.tau0 = float(tau0)
        self.estimate = estimate

    def posterior(self, p, tau_p, y):
        return awgn_output(p, tau_p, y, self.tau0)

    def update(self, y, p, tau_p, z, tau_z, beta):
        if self.estimate:
            self.tau0 = damp(self.tau0, estimate_tau_awgn(y, z, tau_z), beta)

    def params(self):
        return {"tau0": self.tau0}


class GaussMixChannel:
    """Two-component mixture; weights frozen unless ``params.weights_frozen`` is False."""

    def __init__(self, params: GmNoiseParams, estimate=True):
        self.gm = params
        self.estimate = estimate
        self._terms = None

    def posterior(self, p, tau_p, y):
        if not tau_p > 0:
            raise ValueError("tau_p must be positive")
        self._terms = (p, _gm_terms(p, tau_p, y, self.gm))
        return _gm_moments(*self._terms[1])

    def update(self, y, p, tau_p, z, tau_z, beta):
        if not self.estimate:
            return
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ParameterEstimationWarning)
            # reuse the responsibilities from the posterior call on the same p
            terms = self._terms[1] if self._terms is not None and self._terms[0] is p else None
            tau_new = estimate_tau_gm(y, p, tau_p, self.gm, terms)
            xi_new = None if self.gm.weights_frozen else estimate_xi_free(y, p, tau_p, self.gm, terms)
        tau = tuple(sorted(damp(o, n, beta) for o, n in zip(self.gm.tau, tau_new)))
        xi = self.gm.xi
        if xi_new is not None:
            xi2 = float(np.clip(damp(xi[1], xi_new[1], beta), *XI_CLAMP))
            xi = (1.0 - xi2, xi2)
        self.gm = GmNoiseParams(xi, tau, self.gm.weights_frozen)

    def params(self):
        return {"tau": list(self.gm.tau), "xi": list(self.gm.xi)}


# -------------------------------------------------------------------- solver

@dataclass
class GampConfig:
    alpha: float = 0.01
    beta: float = 0.1
    max_iter: int = 50
    tol: float = 1e-4
    min_iter: int = 3
    estimate_params: bool = True
    blowup: float = 1e3


@dataclass
class GampResult:
    v: np.ndarray
    tau_v: float
    n_iter: int
    converged: bool
    trace: list = field(default_factory=list)


class MatrixOperator:
    """Dense matrix wrapped in the solver's operator interface."""

    def __init__(self, a):
        self.a = np.asarray(a, dtype=np.float64)
        self.m, self.n = self.a.shape
        self.frob_norm_sq = float(np.sum(self.a**2))

    def apply(self, v):
        return self.a @ v

    def adjoint(self, w):
        return self.a.T @ w


def gamp_solve(op, y, prior, channel, config: GampConfig = GampConfig(), v0=None,
               tau_v0=None, callback=None) -> GampResult:
    """Run damped scalar-variance GAMP from ``v0``.

    Each iteration updates, in order: the output linear step (with Onsager
    correction), the output channel posterior, the input linear step, the
    input denoiser; the new coefficients are damped at ``alpha`` and, when
    ``estimate_params`` is set, the prior and noise parameters are
    re-estimated and damped at ``beta``.
    """
    y = np.asarray(y, dtype=np.float64)
    fro = float(op.frob_norm_sq)
    if fro <= 0:
        raise ValueError("operator has zero Frobenius norm")
    m_over, n_over = fro / op.m, fro / op.n
    v = np.zeros(op.n) if v0 is None else np.array(v0, dtype=np.float64)
    if tau_v0 is None:
        tau_v0 = float(np.mean(v**2)) or 2.0 / prior.lam**2
    tau_v = float(tau_v0)
    s = np.zeros_like(y)
    trace = []
    norm_min = np.inf
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        tau_p = max(m_over * tau_v, EPS)
        bv = op.apply(v)
        p = bv - tau_p * s
        z, tau_z = channel.posterior(p, tau_p, y)
        tau_z_bar = float(np.mean(tau_z))
        s = (z - p) / tau_p
        tau_s = max(1.0 - tau_z_bar / tau_p, EPS) / tau_p
        tau_r = 1.0 / (n_over * tau_s)
        r = v + tau_r * op.adjoint(s)
        v_new, tau_v = prior.denoise(r, tau_r)
        v_prev = v
        v = damp(v, v_new, config.alpha)
        if config.estimate_params:
            prior.update(v, config.beta)
            channel.update(y, p, tau_p, z, tau_z, config.beta)

        vnorm = float(np.linalg.norm(v))
        change = float(np.linalg.norm(v - v_prev)) / max(vnorm, EPS)
        entry = {
            "iter": it,
            "residual_norm": float(np.linalg.norm(y - bv)),
            "change": change,
            "tau_v": tau_v,
            **prior.params(),
            **channel.params(),
        }
        trace.append(entry)
        if callback is not None:
            callback(entry)
        if not np.isfinite(vnorm) or (vnorm > 0 and vnorm > config.blowup * norm_min):
            raise DivergenceError(
                f"GAMP diverged at iteration {it}: |v| = {vnorm:.3e}, min so far {norm_min:.3e}",
                trace, v_prev,
            )
        if vnorm > 0:
            norm_min = min(norm_min, vnorm)
        if change < config.tol and it >= config.min_iter and vnorm > 0:
            converged = True
            break
    return GampResult(v, tau_v, it, converged, trace)


def write_trace(trace, path) -> None:
    """One JSON object per line."""
    with open(path, "w", encoding="utf-8") as f:
        for entry in trace:
            f.write(json.dumps(entry) + "\n")
