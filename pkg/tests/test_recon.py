import numpy as np
import pytest

from qsm_amp import gamp, recon
from qsm_amp.dipole import EchoProtocol, EchoSet, dipole_kernel, field_from_chi
from qsm_amp.metrics import nrmse
from qsm_amp.recon import (ConfigError, ReconConfig, ReconDivergenceError, estimate_field,
                           estimate_gm_weights, ls_init, reconstruct, reconstruct_tkd, tkd_baseline)
from qsm_amp.scenarios import outlier_scenario

FAST = dict(alpha=0.05, outer_max=3, inner_max=20)


@pytest.fixture(scope="module")
def clean32():
    return outlier_scenario(32, "healthy", sigma=0.0, outlier_frac=0.0)


@pytest.fixture(scope="module")
def noisy16():
    return outlier_scenario(16, "hemorrhage", sigma=0.01, outlier_frac=0.05, outlier_sigma=0.2)


def test_config_validation():
    with pytest.raises(ConfigError, match="basis"):
        ReconConfig(basis="db3")
    with pytest.raises(ConfigError, match="zeta"):
        ReconConfig(zeta=0.0)
    with pytest.raises(ConfigError):
        ReconConfig(alpha=0.0)
    with pytest.raises(ConfigError, match="mask_policy"):
        ReconConfig(mask_policy="sometimes")
    with pytest.raises(ConfigError, match="'alpha'"):
        ReconConfig.from_json({"basis": "db1", "beta": 0.1, "outer_max": 2, "inner_max": 2,
                               "zeta": 1e-3})
    with pytest.raises(ConfigError, match="unknown"):
        ReconConfig.from_json({**ReconConfig().to_json(), "gamma": 1})
    assert ReconConfig.from_json(ReconConfig().to_json()) == ReconConfig()


def test_gm_weights_counting_example():
    xi = estimate_gm_weights(np.array([0.1, 0.2, 5.0, 0.05]), 1.0 / 9.0)
    assert xi == pytest.approx((0.75, 0.25))


def test_gm_weights_clamp_and_errors():
    assert estimate_gm_weights(np.zeros(10), 1.0)[1] == 1e-4
    with pytest.raises(ValueError):
        estimate_gm_weights(np.array([]), 1.0)
    with pytest.raises(ValueError):
        estimate_gm_weights(np.ones(3), 0.0)


def test_gm_weights_planted_outliers(rng):
    m, sigma = 100000, 0.01
    out = rng.random(m) < 0.05
    eps = np.where(out, 10 * sigma, sigma) * rng.standard_normal(m)
    assert abs(estimate_gm_weights(eps, sigma**2)[1] - 0.05) <= 0.02


def test_ls_init_zero_phases_gives_zero(protocol):
    dims = (16, 16, 16)
    es = EchoSet(np.zeros((3,) + dims), np.ones((3,) + dims), protocol)
    assert np.linalg.norm(ls_init(es, dipole_kernel(dims))) <= 1e-8


def test_ls_init_is_weight_scale_invariant(clean32):
    es = clean32.echoes
    kernel = es.kernel()
    doubled = EchoSet(es.phases, 2 * es.weights, es.protocol)
    a, b = ls_init(es, kernel), ls_init(doubled, kernel)
    assert np.linalg.norm(a - b) <= 1e-10 * np.linalg.norm(a)


def test_noiseless_ls_bounded_and_amp_improves(clean32):
    ls = reconstruct("ls", clean32.echoes, ReconConfig(), clean32.mask)
    amp = reconstruct("amp-pe", clean32.echoes, ReconConfig(alpha=0.05, outer_max=10), clean32.mask)
    awgn = reconstruct("amp-awgn", clean32.echoes, ReconConfig(alpha=0.05, outer_max=10),
                       clean32.mask)
    e_ls = nrmse(ls.chi, clean32.chi, clean32.mask)
    e_amp = nrmse(amp.chi, clean32.chi, clean32.mask)
    assert e_ls < 60
    assert e_amp < e_ls
    assert abs(nrmse(awgn.chi, clean32.chi, clean32.mask) - e_amp) <= 2.0


def test_ls_dispatch_equals_ls_init(noisy16):
    es = noisy16.echoes
    rep = reconstruct("ls", es, ReconConfig())
    norm = es.normalized()
    np.testing.assert_array_equal(rep.chi, ls_init(norm, norm.kernel(), 30, 1e-3))


def test_infinite_zeta_runs_one_outer_per_stage(noisy16):
    rep = reconstruct("amp-pe", noisy16.echoes, ReconConfig(zeta=np.inf, **FAST))
    assert {k: len(v) for k, v in rep.changes.items()} == {"stage1": 1, "stage2": 1}
    assert set(rep.params) == {"tau0", "lambda", "xi_two_step", "tau", "xi"}


def test_awgn_equals_stage_one(noisy16):
    cfg = ReconConfig(**FAST)
    full = reconstruct("amp-pe", noisy16.echoes, cfg, noisy16.mask)
    awgn = reconstruct("amp-awgn", noisy16.echoes, cfg, noisy16.mask)
    np.testing.assert_array_equal(awgn.chi, full.stage1_chi * noisy16.mask)
    assert awgn.changes["stage1"] == full.changes["stage1"]
    assert len(full.changes["stage1"]) <= cfg.outer_max


def test_stage_two_starts_from_stage_one(noisy16, monkeypatch):
    calls = []
    original = recon._outer_loop

    def spy(echoes, kernel, chi, prior, channel, *rest):
        out = original(echoes, kernel, chi, prior, channel, *rest)
        calls.append((chi.copy(), out[0].copy(), prior.lam))
        return out

    monkeypatch.setattr(recon, "_outer_loop", spy)
    recon.reconstruct("amp-pe", noisy16.echoes, ReconConfig(**FAST))
    (_, end1, lam1), (start2, _, _) = calls
    np.testing.assert_array_equal(start2, end1)
    assert lam1 > 0


def test_final_only_mask_does_not_change_trajectory(noisy16):
    cfg = ReconConfig(**FAST)
    masked = reconstruct("amp-pe", noisy16.echoes, cfg, noisy16.mask)
    free = reconstruct("amp-pe", noisy16.echoes, cfg)
    np.testing.assert_array_equal(masked.chi, free.chi * noisy16.mask)
    np.testing.assert_array_equal(masked.stage1_chi, free.stage1_chi)
    assert masked.changes == free.changes


def test_during_optimization_keeps_support(noisy16):
    cfg = ReconConfig(mask_policy="during_optimization", **FAST)
    rep = reconstruct("amp-pe", noisy16.echoes, cfg, noisy16.mask)
    assert not np.any(rep.stage1_chi[noisy16.mask == 0])


def test_free_weights_stay_clamped(noisy16):
    rep = reconstruct("amp-free-xi", noisy16.echoes, ReconConfig(**FAST))
    lo, hi = gamp.XI_CLAMP
    assert all(lo <= x <= hi for x in rep.params["xi"])
    assert sum(rep.params["xi"]) == pytest.approx(1.0)


def test_outlier_free_weight_variants_agree():
    sc = outlier_scenario(16, "healthy", sigma=0.01, outlier_frac=0.0)
    cfg = ReconConfig(**FAST)
    a = nrmse(reconstruct("amp-pe", sc.echoes, cfg, sc.mask).chi, sc.chi, sc.mask)
    b = nrmse(reconstruct("amp-free-xi", sc.echoes, cfg, sc.mask).chi, sc.chi, sc.mask)
    assert abs(a - b) <= 5.0


def test_divergence_returns_partial_report(noisy16):
    with pytest.raises(ReconDivergenceError) as info:
        reconstruct("amp-pe", noisy16.echoes, ReconConfig(alpha=1.0, outer_max=3, inner_max=50))
    rep = info.value.report
    assert np.all(np.isfinite(rep.chi))
    assert rep.trace and rep.method == "amp-pe"


def test_unknown_method():
    with pytest.raises(ValueError, match="unknown method"):
        reconstruct("medi", None)


# ------------------------------------------------------------------ TKD

def test_tkd_exact_off_the_cone(rng):
    dims = (16, 16, 16)
    kernel = dipole_kernel(dims)
    spec = np.fft.fftn(rng.standard_normal(dims))
    spec[np.abs(kernel.kernel) <= 0.15] = 0.0
    spec[0, 0, 0] = 0.0
    chi = np.fft.ifftn(spec).real
    assert np.linalg.norm(chi) > 0
    back = tkd_baseline(field_from_chi(chi, kernel), kernel, 0.15)
    assert np.linalg.norm(back - chi) <= 1e-8 * np.linalg.norm(chi)


def test_tkd_zero_field_and_threshold_checks():
    kernel = dipole_kernel((8, 8, 8))
    assert not tkd_baseline(np.zeros((8, 8, 8)), kernel).any()
    with pytest.raises(ValueError):
        tkd_baseline(np.zeros((8, 8, 8)), kernel, 0.7)


def test_tkd_overtruncation_is_worse(clean32):
    lo = reconstruct_tkd(clean32.echoes, ReconConfig(tkd_threshold=0.15), clean32.mask)
    hi = reconstruct_tkd(clean32.echoes, ReconConfig(tkd_threshold=2 / 3), clean32.mask)
    assert nrmse(hi.chi, clean32.chi, clean32.mask) > nrmse(lo.chi, clean32.chi, clean32.mask)


def test_field_estimate_recovers_noiseless_field():
    dims = (8, 8, 8)
    r = np.random.default_rng(5)
    field = 0.05 * r.standard_normal(dims)
    proto = EchoProtocol(3.0, (0.002, 0.004, 0.006))
    phases = np.angle(np.exp(1j * proto.scales()[:, None, None, None] * field))
    es = EchoSet(phases, np.ones((3,) + dims), proto)
    np.testing.assert_allclose(estimate_field(es), field, atol=1e-12)
