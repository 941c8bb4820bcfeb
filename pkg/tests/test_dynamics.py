import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capdirac.algebra import pauli_matrices
from capdirac.dynamics import (
    FlowError,
    band_data,
    egorov_defect,
    evolve_symbol,
    flow_batch,
    heisenberg,
    hyperbolicity_margin,
    integrate_flow,
    moyal_first_order,
    nontrapping_verdict,
    poisson,
    principal_symbol,
    sample_energy_shell,
    symbol_eigs,
    transport_generator,
    transport_matrix,
)
from capdirac.model import ModelSpec, PhysParams, make_bump_potential, pauli_coeff, zero_potential
from capdirac.quantize import Grid

S1, S2, S3 = pauli_matrices()
I2 = np.eye(2)


def _model(V=None, hbar=0.1, mass=1.0):
    return ModelSpec(PhysParams(hbar, mass), zero_potential() if V is None else V)


FREE = _model()
EM = _model(make_bump_potential(0, 2, 0.5 * I2) + make_bump_potential(0.5, 1.5, -0.4 * S1))
GENERAL = _model(make_bump_potential(0.2, 1.5, pauli_coeff(0.3, 0.2, 0.4, 0.5)))


# --- symbol and bands --------------------------------------------------------------


def test_principal_symbol_free():
    d = principal_symbol(FREE, 0.3, 2.0)
    np.testing.assert_array_equal(d, 2.0 * S1 + S3)


@settings(max_examples=60, deadline=None)
@given(x=st.floats(-3, 3), xi=st.floats(-6, 6), which=st.sampled_from(["em", "general"]))
def test_symbol_eigs_spectral_decomposition(x, xi, which):
    m = EM if which == "em" else GENERAL
    e = symbol_eigs(m, x, xi)
    d = principal_symbol(m, x, xi)
    assert e.completeness_defect() <= 1e-12
    recon = sum(v * P for v, P in zip(e.values, e.projectors))
    np.testing.assert_allclose(recon, d, atol=1e-12)
    for P in e.projectors:
        np.testing.assert_allclose(P @ P, P, atol=1e-12)
        np.testing.assert_allclose(P, P.conj().T, atol=1e-14)


def test_em_closed_form_matches_eigh():
    x = np.linspace(-2, 2, 41)
    xi = np.linspace(-3, 3, 41)
    lam, _ = band_data(EM, x, xi)
    ref = np.linalg.eigvalsh(principal_symbol(EM, x, xi))
    np.testing.assert_allclose(lam, ref, atol=1e-13)


def test_free_band_values():
    e = symbol_eigs(FREE, 0.0, 0.75)
    np.testing.assert_allclose(e.values, [-1.25, 1.25], atol=1e-15)


def test_degenerate_symbol_merges_projectors():
    e = symbol_eigs(_model(mass=0.0), 0.0, 0.0)
    assert e.values.size == 1
    np.testing.assert_allclose(e.projectors[0], I2, atol=1e-14)


def test_hyperbolicity_margin_oracles():
    # m = c = 1 and V = 0: the gap is 2 <xi> exactly
    assert hyperbolicity_margin(FREE) == pytest.approx(2.0, abs=1e-12)
    massless = _model(EM.potential, mass=0.0)
    assert hyperbolicity_margin(massless) <= 1e-12
    with pytest.raises(ValueError):
        hyperbolicity_margin(FREE, samples=999)


# --- flow ------------------------------------------------------------------------------


@pytest.mark.parametrize("branch", [1, -1])
def test_free_flow_is_straight_line(branch):
    x0, xi0, T = -0.5, 0.8, 3.0
    tr = integrate_flow(FREE, x0, xi0, branch, T)
    v = branch * xi0 / np.sqrt(xi0**2 + 1)
    np.testing.assert_allclose(tr.x, x0 + v * tr.t, atol=1e-10)
    np.testing.assert_allclose(tr.xi, xi0, atol=1e-12)
    xb, kb, _ = flow_batch(FREE, np.array([x0]), np.array([xi0]), branch, T, 200)
    assert xb[0] == pytest.approx(x0 + v * T, abs=1e-10) and kb[0] == pytest.approx(xi0)


def test_flow_conserves_band_energy():
    tr = integrate_flow(GENERAL, -1.0, 0.4, 1, 6.0)
    assert tr.energy_drift(GENERAL) <= 1e-8


def test_backward_flow_inverts_forward():
    x1, k1, _ = flow_batch(EM, np.array([0.1]), np.array([0.3]), 1, 2.0, 400)
    x0, k0, _ = flow_batch(EM, x1, k1, 1, 2.0, 400, backward=True)
    assert x0[0] == pytest.approx(0.1, abs=1e-9) and k0[0] == pytest.approx(0.3, abs=1e-9)


def test_flow_rejects_degenerate_start():
    with pytest.raises(FlowError):
        integrate_flow(_model(mass=0.0), 0.0, 0.0, 1, 1.0)
    with pytest.raises(ValueError):
        integrate_flow(FREE, 0.0, 1.0, 0, 1.0)


def test_exit_time_free_oracle():
    xi0 = 1.0
    v = xi0 / np.sqrt(2)
    _, _, te = flow_batch(FREE, np.array([0.0]), np.array([xi0]), 1, 10.0, 1000, exit_radius=2.0)
    assert te[0] == pytest.approx(2.0 / v, abs=1e-9)


def test_energy_shell_samples_lie_on_shell():
    x, xi, br = sample_energy_shell(GENERAL, (1.2, 1.5), 2.0, 200, seed=1)
    lam, _ = band_data(GENERAL, x, xi)
    e = np.where(br == 1, lam[:, 1], lam[:, 0])
    assert x.size == 200 and np.all((e >= 1.2) & (e <= 1.5)) and np.all(np.abs(x) <= 2.0)


def test_nontrapping_free_and_trapped_well():
    rep = nontrapping_verdict(FREE, (1.2, 1.5), 2.0, 20.0, seeds=200)
    assert rep.nontrapping and rep.worst_exit_time < 20.0
    # a scalar well whose energies are below the continuum threshold outside it
    well = _model(make_bump_potential(0, 1.0, -0.6 * I2))
    rep = nontrapping_verdict(well, (0.6, 0.8), 2.0, 10.0, seeds=100)
    assert not rep.nontrapping and rep.trapped_seeds


# --- symbol calculus and transport -------------------------------------------------------


def test_moyal_first_order_weyl_oracle():
    c0, c1 = moyal_first_order(lambda x, k: x, lambda x, k: k, 0.7, -1.3)
    assert c0 == pytest.approx(0.7 * -1.3) and c1 == pytest.approx(0.5j, abs=1e-9)


def test_moyal_matrix_order():
    a = lambda x, k: np.broadcast_to(S1, np.shape(x) + (2, 2)) * x[..., None, None]  # noqa: E731
    b = lambda x, k: np.broadcast_to(S3, np.shape(x) + (2, 2)) * k[..., None, None]  # noqa: E731
    c0, c1 = moyal_first_order(a, b, np.array([0.4]), np.array([0.9]))
    np.testing.assert_allclose(c0[0], 0.36 * S1 @ S3, atol=1e-12)
    np.testing.assert_allclose(c1[0], 0.5j * S1 @ S3, atol=1e-9)


def test_poisson_convention():
    assert poisson(lambda x, k: k, lambda x, k: x, 0.2, 0.3) == pytest.approx(1.0, abs=1e-9)
    v = poisson(lambda x, k: x**2, lambda x, k: k**2, 0.5, 2.0)
    assert v == pytest.approx(-4.0, abs=1e-8)


@pytest.mark.parametrize("model", [EM, GENERAL], ids=["em", "general"])
def test_generator_hermitian_and_transport_unitary(model):
    G = transport_generator(model, 1, np.array([0.1, -0.4]), np.array([0.5, 1.2]))
    np.testing.assert_allclose(G, np.conj(np.swapaxes(G, -1, -2)), atol=1e-14)
    t = transport_matrix(model, 1, 0.1, 0.5, 2.0)
    assert t.unitarity_defect() <= 1e-8
    assert transport_matrix(model, 1, 0.1, 0.5, 0.0).unitarity_defect() == 0.0


def test_evolved_identity_symbol_is_identity():
    ev = evolve_symbol(GENERAL, lambda x, k: np.ones(np.shape(x)), 1.0, steps=200)
    vals = ev(np.linspace(-1, 1, 7), np.linspace(-2, 2, 7))
    np.testing.assert_allclose(vals, np.broadcast_to(I2, vals.shape), atol=1e-8)


def test_evolved_symbol_cache_reuse():
    ev = evolve_symbol(FREE, lambda x, k: np.exp(-x**2 - k**2), 0.5, steps=50)
    a = ev(np.array([0.1, 0.2]), np.array([0.0, 0.3]))
    n = len(ev._cache)
    b = ev(np.array([0.2]), np.array([0.3]))
    assert len(ev._cache) == n
    np.testing.assert_array_equal(a[1], b[0])


def test_free_flow_translates_scalar_position_symbol():
    # positive-energy projector part of a scalar symbol follows x + t xi / <xi>
    a0 = lambda x, k: np.exp(-x**2)  # noqa: E731
    ev = evolve_symbol(FREE, a0, 1.0, steps=100)
    x, k = np.array([0.3]), np.array([0.6])
    v = k / np.sqrt(1 + k**2)
    P = band_data(FREE, x, k)[1]
    want = np.exp(-(x + v) ** 2) * P[:, 1] + np.exp(-(x - v) ** 2) * P[:, 0]
    np.testing.assert_allclose(ev(x, k), want, atol=1e-8)


# --- Heisenberg and Egorov --------------------------------------------------------------


def test_heisenberg_preserves_identity_and_commuting_ops():
    grid = Grid(4.0, 32)
    m = _model(hbar=0.2)
    np.testing.assert_allclose(heisenberg(m, grid, np.eye(64), 1.3), np.eye(64), atol=1e-12)


def test_egorov_identity_symbol():
    m = _model(make_bump_potential(0, 2, 0.5 * I2) + make_bump_potential(0.5, 1.5, -0.4 * S1), hbar=0.2)
    grid = Grid(4.0, 32)
    d = egorov_defect(m, lambda x, k: np.ones(np.shape(x)), 1.0, grid, steps=200)
    assert d <= 1e-10


def test_egorov_free_momentum_symbol_commutes():
    grid = Grid(4.0, 32)
    m = _model(hbar=0.2)
    d = egorov_defect(m, lambda x, k: np.exp(-k**2), 1.0, grid, steps=200)
    assert d <= 1e-6
