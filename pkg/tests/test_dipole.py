import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qsm_amp.dipole import (EchoProtocol, EchoSet, dense_operator, dipole_kernel, echo_phases,
                            field_from_chi, forward_measurements, g_offset, hutchinson_frob_norm_sq,
                            linearize, operator_entry_stats, phase_scale, realify)
from qsm_amp.phantom import make_phantom, preset_shapes
from qsm_amp.volume import Volume


def brute_force_dipole_field(chi, voxel_size=(1.0, 1.0, 1.0), b0=(0.0, 0.0, 1.0)):
    """O(N^2) DFT: explicit sums over every (k, x) pair, no FFT involved."""
    dims = chi.shape
    grids = np.meshgrid(*[np.arange(n) for n in dims], indexing="ij")
    pos = np.stack([g.ravel() for g in grids], axis=1)  # (N, 3) integer coordinates
    freq = np.stack([np.where(g > n // 2, g - n, g).ravel() for g, n in zip(grids, dims)], axis=1)
    kphys = freq / (np.array(dims) * np.array(voxel_size))
    k2 = np.sum(kphys**2, axis=1)
    kb = kphys @ np.asarray(b0)
    with np.errstate(invalid="ignore", divide="ignore"):
        d = np.where(k2 > 0, 1.0 / 3.0 - kb**2 / k2, 0.0)
    phase = 2j * np.pi * (freq / np.array(dims)) @ pos.T  # (K, N)
    spectrum = np.exp(-phase) @ chi.ravel()
    field = (np.exp(phase).T @ (d * spectrum)) / chi.size
    return field.real.reshape(dims), np.abs(field.imag).max()


def test_kernel_special_directions():
    k = dipole_kernel((8, 8, 8)).kernel
    assert k[0, 0, 0] == 0.0
    assert k[0, 0, 1] == pytest.approx(-2.0 / 3.0)
    assert k[1, 0, 0] == pytest.approx(1.0 / 3.0)
    assert k[0, 3, 0] == pytest.approx(1.0 / 3.0)
    assert k.min() >= -2.0 / 3.0 - 1e-15 and k.max() <= 1.0 / 3.0 + 1e-15


def test_kernel_oblique_b0_and_anisotropic_voxels():
    b0 = np.array([0.0, 0.6, 0.8])
    k = dipole_kernel((6, 8, 10), (1.0, 0.5, 2.0), b0).kernel
    kx, ky, kz = 1 / 6, 1 / (8 * 0.5), 1 / (10 * 2.0)
    kvec = np.array([kx, ky, kz])
    expected = 1 / 3 - (kvec @ b0) ** 2 / (kvec @ kvec)
    assert k[1, 1, 1] == pytest.approx(expected, rel=1e-13)


def test_field_matches_brute_force_dft(rng):
    chi = rng.standard_normal((8, 8, 8))
    kernel = dipole_kernel(chi.shape)
    oracle, imag = brute_force_dipole_field(chi)
    assert imag <= 1e-10 * np.linalg.norm(oracle)
    fast = field_from_chi(chi, kernel)
    assert np.linalg.norm(fast - oracle) <= 1e-10 * np.linalg.norm(oracle)


def test_field_matches_brute_force_oblique(rng):
    # odd sizes: no Nyquist plane, so the oblique kernel is Hermitian and the field real
    chi = rng.standard_normal((5, 7, 9))
    b0 = (0.6, 0.0, 0.8)
    oracle, _ = brute_force_dipole_field(chi, (1.0, 1.2, 0.9), b0)
    fast = field_from_chi(chi, dipole_kernel(chi.shape, (1.0, 1.2, 0.9), b0))
    assert np.linalg.norm(fast - oracle) <= 1e-10 * np.linalg.norm(oracle)


def test_impulse_response_is_inverse_fft_of_kernel():
    kernel = dipole_kernel((8, 8, 8))
    impulse = np.zeros((8, 8, 8))
    impulse[0, 0, 0] = 1.0
    np.testing.assert_allclose(field_from_chi(impulse, kernel), np.fft.ifftn(kernel.kernel).real,
                               atol=1e-15)
    np.testing.assert_allclose(kernel.impulse_response, np.fft.ifftn(kernel.kernel).real, atol=1e-15)


def test_constant_chi_gives_zero_field():
    kernel = dipole_kernel((8, 8, 8))
    assert np.abs(field_from_chi(np.full((8, 8, 8), 0.37), kernel)).max() < 1e-15


def test_field_accepts_volume_and_checks_dims():
    kernel = dipole_kernel((4, 4, 4))
    v = Volume.from_array(np.ones((4, 4, 4)))
    assert field_from_chi(v, kernel).shape == (4, 4, 4)
    with pytest.raises(ValueError):
        field_from_chi(np.zeros((4, 4, 5)), kernel)


@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 2**32 - 1))
def test_field_linearity(a, b, seed):
    r = np.random.default_rng(seed)
    x1, x2 = r.standard_normal((2, 6, 6, 6))
    kernel = dipole_kernel((6, 6, 6))
    lhs = field_from_chi(a * x1 + b * x2, kernel)
    rhs = a * field_from_chi(x1, kernel) + b * field_from_chi(x2, kernel)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12 * (1 + abs(a) + abs(b)) * 10)


def test_phase_scale_example():
    proto = EchoProtocol(3.0, (0.00732,), 42.577478e6)
    expected = 2 * np.pi * 42.577478e6 * 0.00732 * 3 * 1e-6
    assert phase_scale(proto, 0) == pytest.approx(expected, rel=1e-15)
    assert phase_scale(proto, 0) == pytest.approx(5.87479, abs=1e-5)
    assert phase_scale(EchoProtocol(3.0, (0.0, 0.01)), 0) == 0.0


@pytest.mark.parametrize("bad", [(), (0.01, 0.005), (-0.001, 0.002), (0.004, 0.004)])
def test_protocol_rejects_bad_echo_times(bad):
    with pytest.raises(ValueError):
        EchoProtocol(3.0, bad)


def test_protocol_json_roundtrip(protocol):
    assert EchoProtocol.from_json(protocol.to_json()) == protocol


def test_forward_measurements_against_brute_force(rng, protocol):
    chi = 0.1 * rng.standard_normal((8, 8, 8))
    w = rng.uniform(0.5, 1.0, (8, 8, 8))
    field, _ = brute_force_dipole_field(chi)
    expected = np.stack([w * np.exp(1j * s * field) for s in protocol.scales()])
    got = forward_measurements(chi, protocol, w, dipole_kernel(chi.shape))
    assert np.linalg.norm(got - expected) <= 1e-10 * np.linalg.norm(expected)


def test_linearization_is_first_order_accurate(rng, protocol):
    dims = (8, 8, 8)
    kernel = dipole_kernel(dims)
    w = rng.uniform(0.5, 1.0, (protocol.n_echoes,) + dims)
    chi_r = 0.05 * rng.standard_normal(dims)
    delta = rng.standard_normal(dims)
    echoes = EchoSet.from_measurements(forward_measurements(chi_r, protocol, w, kernel), protocol)
    model = linearize(chi_r, echoes, kernel)
    offset = realify(g_offset(chi_r, protocol, w, kernel))
    errs = []
    for eps in (1e-2, 5e-3):
        chi = chi_r + eps * delta
        exact = realify(forward_measurements(chi, protocol, w, kernel))
        errs.append(np.linalg.norm(exact - (model.apply(chi) - offset)))
    assert errs[1] / errs[0] == pytest.approx(0.25, rel=0.05)
    # at the expansion point the model reproduces the data exactly
    np.testing.assert_allclose(model.apply(chi_r) - offset, realify(echoes.measurements()), atol=1e-12)
    np.testing.assert_allclose(model.residual(chi_r), 0.0, atol=1e-12)


def test_adjoint_dot_test(rng, protocol):
    dims = (16, 16, 16)
    kernel = dipole_kernel(dims)
    w = rng.uniform(0, 1, (protocol.n_echoes,) + dims)
    echoes = EchoSet(rng.uniform(-np.pi, np.pi, w.shape), w, protocol)
    model = linearize(0.1 * rng.standard_normal(dims), echoes, kernel)
    for _ in range(5):
        x = rng.standard_normal(dims)
        y = rng.standard_normal(model.rhs.shape)
        lhs, rhs = np.vdot(model.apply(x), y), np.vdot(x, model.adjoint(y))
        assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


def dense_jacobian(model):
    n = model.n
    eye = np.eye(n).reshape((n,) + model.dims)
    return np.stack([model.apply(e).ravel() for e in eye], axis=1)


def test_frobenius_exact_and_hutchinson_against_dense(rng, protocol):
    dims = (6, 6, 6)
    kernel = dipole_kernel(dims)
    w = rng.uniform(0, 1, (protocol.n_echoes,) + dims)
    echoes = EchoSet(rng.uniform(-np.pi, np.pi, w.shape), w, protocol)
    model = linearize(0.1 * rng.standard_normal(dims), echoes, kernel)
    j = dense_jacobian(model)
    fro = float(np.sum(j**2))
    assert model.frob_norm_sq() == pytest.approx(fro, rel=1e-10)
    np.testing.assert_allclose(model.column_norms_sq().ravel(), np.sum(j**2, axis=0), rtol=1e-10)
    mask = rng.random(dims) < 0.4
    assert model.frob_norm_sq(mask) == pytest.approx(float(np.sum(j[:, mask.ravel()] ** 2)), rel=1e-10)
    est = hutchinson_frob_norm_sq(model.apply, dims, n_probes=64, seed=3)
    assert abs(est - fro) <= 0.10 * fro


def test_echoset_validation_and_normalization(protocol):
    dims = (2, 2, 2)
    with pytest.raises(ValueError):
        EchoSet(np.zeros((2,) + dims), np.ones((2,) + dims), protocol)
    with pytest.raises(ValueError):
        EchoSet(np.zeros((3,) + dims), -np.ones((3,) + dims), protocol)
    es = EchoSet(np.zeros((3,) + dims), np.full((3,) + dims, 4.0), protocol)
    assert es.normalized().weights.max() == 1.0


def test_echoset_save_load(tmp_path, rng, protocol):
    dims = (4, 4, 2)
    es = EchoSet(rng.uniform(-3, 3, (3,) + dims), rng.uniform(0, 1, (3,) + dims), protocol,
                 (1.0, 1.0, 2.0))
    es.save(tmp_path / "echoes")
    back = EchoSet.load(tmp_path / "echoes")
    assert back.protocol == protocol
    assert back.voxel_size == (1.0, 1.0, 2.0)
    np.testing.assert_array_equal(back.phases, es.phases.astype(np.float32))
    np.testing.assert_array_equal(back.weights, es.weights.astype(np.float32))


def test_hemorrhage_phases_at_short_echoes_stay_unwrapped(protocol):
    dims = (32, 32, 32)
    chi, _ = make_phantom(preset_shapes("hemorrhage", dims), dims)
    assert np.abs(echo_phases(chi, protocol, dipole_kernel(dims))).max() < np.pi


def test_dense_operator_size_guard(protocol):
    with pytest.raises(ValueError, match="refusing"):
        dense_operator((64, 64, 64), protocol)


def test_dense_operator_columns(rng, protocol):
    dims = (4, 4, 4)
    a = dense_operator(dims, protocol, echo=1)
    x = rng.standard_normal(dims)
    expected = phase_scale(protocol, 1) * field_from_chi(x, dipole_kernel(dims))
    np.testing.assert_allclose(a @ x.ravel(), expected.ravel(), atol=1e-13)


def test_operator_entry_stats(protocol):
    stats = operator_entry_stats((8, 8, 8), protocol, bins=64)
    assert len(stats["histogram"]["counts"]) == 64
    assert sum(stats["histogram"]["counts"]) == stats["n_entries"] == 512**2
    assert stats["max_rel_row_mean"] <= 1e-10
    assert abs(stats["mean"]) <= 1e-12
    assert 0.0 <= stats["normality_pvalue"] <= 1.0
