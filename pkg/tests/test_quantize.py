import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from capdirac.algebra import pauli_matrices, standard_representation
from capdirac.model import (
    CapSpec,
    DistortionParam,
    ModelError,
    PhysParams,
    make_bump_potential,
    make_cap,
    make_scaling_g,
    pauli_coeff,
    zero_potential,
)
from capdirac.quantize import (
    Grid,
    assemble_cap,
    assemble_distorted,
    assemble_free,
    assemble_perturbed,
    dump_operator,
    fourier_derivative,
    grid_for,
    load_operator,
    momentum_operator,
    multiplication,
    radial_reduce,
    weyl_quantize,
)

P = PhysParams(0.1)
S1, S2, S3 = pauli_matrices()


def _free_oracle(grid, p):
    e = np.sqrt((p.c * p.hbar * grid.momenta) ** 2 + (p.mass * p.c**2) ** 2)
    return np.sort(np.concatenate([e, -e]))


# --- grids and free operator ----------------------------------------------------------


def test_grid_basics():
    g = Grid(3.0, 12)
    assert g.h == pytest.approx(0.5)
    assert g.nodes[0] == -3.0 and g.nodes[-1] == pytest.approx(2.5)
    k = g.momenta
    assert k.min() == pytest.approx(-g.k_max) and k.max() < g.k_max
    with pytest.raises(ModelError):
        Grid(1.0, 11)


def test_grid_for_reaches_cutoff():
    g = grid_for(6.0, 0.05, 3.35)
    assert g.n == 256 and P.hbar * 0 + 0.05 * g.k_max >= 3.35


@pytest.mark.parametrize("n,L,hbar", [(64, 5.0, 0.3), (128, 8.0, 0.1), (96, 3.0, 1.0)])
def test_free_spectrum_matches_dispersion(n, L, hbar):
    grid, p = Grid(L, n), PhysParams(hbar)
    ev = np.sort(np.linalg.eigvalsh(assemble_free(grid, None, p).matrix))
    want = _free_oracle(grid, p)
    np.testing.assert_allclose(ev, want, rtol=1e-10)


def test_free_rest_energy_and_gap():
    grid = Grid(5.0, 64)
    ev = np.linalg.eigvalsh(assemble_free(grid, None, P).matrix)
    assert np.sum(np.isclose(ev, 1.0, atol=1e-13)) == 1 and np.sum(np.isclose(ev, -1.0, atol=1e-13)) == 1
    assert not np.any(np.abs(ev) < 1.0 - 1e-13)


def test_fourier_derivative_is_antihermitian_and_exact():
    g = Grid(np.pi, 32)
    Dx = fourier_derivative(g)
    np.testing.assert_allclose(Dx, -Dx.conj().T, atol=1e-14)
    x = g.nodes
    np.testing.assert_allclose(Dx @ np.sin(3 * x), 3 * np.cos(3 * x), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(4, 48).map(lambda k: 2 * k), L=st.floats(1.0, 20.0), hbar=st.floats(0.01, 1.0),
       mass=st.floats(0.0, 3.0))
def test_free_spectral_accuracy_property(n, L, hbar, mass):
    grid, p = Grid(L, n), PhysParams(hbar, mass)
    ev = np.sort(np.linalg.eigvalsh(assemble_free(grid, None, p).matrix))
    want = _free_oracle(grid, p)
    np.testing.assert_allclose(ev, want, rtol=1e-10, atol=1e-12)


# --- perturbed and CAP operators ----------------------------------------------------


def test_perturbed_zero_potential_is_free():
    grid = Grid(4.0, 32)
    a = assemble_perturbed(grid, None, P, zero_potential()).matrix
    np.testing.assert_array_equal(a, assemble_free(grid, None, P).matrix)


def test_assembly_is_linear():
    grid = Grid(4.0, 32)
    V = make_bump_potential(0.3, 1.2, pauli_coeff(0.2, 0.1, -0.3, 0.5))
    d = assemble_perturbed(grid, None, P, V).matrix - assemble_free(grid, None, P).matrix
    np.testing.assert_allclose(d, multiplication(V(grid.nodes)), atol=1e-15)


def test_perturbed_hermitian_and_box_check():
    grid = Grid(4.0, 48)
    V = make_bump_potential(0.0, 2.0, pauli_coeff(-0.5, 0.3, 0.2, 0.1))
    op = assemble_perturbed(grid, None, P, V)
    assert op.hermiticity_defect() <= 1e-10
    with pytest.raises(ModelError):
        assemble_perturbed(grid, None, P, make_bump_potential(3.0, 1.5, np.eye(2)))


def test_scalar_well_binds_in_gap():
    grid = Grid(6.0, 96)
    p = PhysParams(0.2)
    V = make_bump_potential(0.0, 1.5, -1.0 * np.eye(2))
    ev = np.linalg.eigvalsh(assemble_perturbed(grid, None, p, V).matrix)
    gap = ev[np.abs(ev) < 1.0]
    assert gap.size >= 1
    # oracle: the lowest positive-branch level exceeds the well bottom -1 + mc^2
    assert gap.min() > 1.0 - 1.0 - 1e-12


def test_cap_without_absorption_equals_perturbed():
    grid = Grid(4.0, 32)
    V = make_bump_potential(0, 1, np.eye(2))
    W0 = CapSpec(1.5, 2.0, 1.0, evaluator=lambda x: np.zeros_like(x))
    np.testing.assert_array_equal(assemble_cap(grid, None, P, V, W0).matrix,
                                  assemble_perturbed(grid, None, P, V).matrix)


@pytest.mark.parametrize("variant", ["infinite", "dirichlet"])
def test_cap_eigenvalues_in_lower_half_plane(variant):
    grid = Grid(5.0, 96)
    V = make_bump_potential(0, 1.0, pauli_coeff(0.8, 0.2))
    W = make_cap(1.2, 2.5, 1.0, imag_ratio=0.3)
    op = assemble_cap(grid, None, P, V, W, variant, R=4.0 if variant == "dirichlet" else None)
    assert np.max(np.linalg.eigvals(op.matrix).imag) <= 1e-10


def test_cap_numerical_range():
    grid = Grid(5.0, 64)
    W = make_cap(1.2, 2.5, 0.7)
    J = assemble_cap(grid, None, P, zero_potential(), W).matrix
    rng = np.random.default_rng(3)
    v = rng.standard_normal((J.shape[0], 200)) + 1j * rng.standard_normal((J.shape[0], 200))
    v /= np.linalg.norm(v, axis=0)
    fov = np.einsum("ij,ij->j", v.conj(), J @ v)
    assert np.all(fov.imag >= -(0.7 + 1e-12)) and np.all(fov.imag <= 1e-12)


def test_dirichlet_radius_checks():
    grid = Grid(5.0, 64)
    W = make_cap(1.2, 2.5, 1.0)
    with pytest.raises(ModelError):
        assemble_cap(grid, None, P, zero_potential(), W, "dirichlet", R=2.0)
    op = assemble_cap(grid, None, P, zero_potential(), W, "dirichlet", R=4.0)
    assert op.kind == "CapDirichlet" and np.all(np.abs(op.x) < 4.0)


# --- distorted operator ------------------------------------------------------------


@pytest.fixture(scope="module")
def distorted_setup():
    g = make_scaling_g(1.5, 5.6)
    grid = Grid(g.outer + 1.0, 128)
    V = make_bump_potential(0.4, 1.0, np.eye(2)) + make_bump_potential(-0.4, 1.0, np.eye(2))
    return g, grid, V


def test_distorted_at_zero_theta_is_perturbed(distorted_setup):
    g, grid, V = distorted_setup
    a = assemble_distorted(grid, None, P, V, g, DistortionParam(0.0)).matrix
    np.testing.assert_array_equal(a, assemble_perturbed(grid, None, P, V).matrix)


def test_distorted_rows_frozen_inside_R0(distorted_setup):
    g, grid, V = distorted_setup
    a = assemble_distorted(grid, None, P, V, g, DistortionParam(0.2j)).matrix
    b = assemble_perturbed(grid, None, P, V).matrix
    inner = np.flatnonzero(np.abs(grid.nodes) <= g.R0)
    rows = np.concatenate([inner, grid.n + inner])
    np.testing.assert_array_equal(a[rows], b[rows])


def test_distorted_commutes_with_sigma3_parity(distorted_setup):
    # V even and scalar, g odd: sigma_3 combined with x -> -x is a symmetry up to
    # the unpaired Nyquist mode, which contributes one rank per off-diagonal block
    g, grid, V = distorted_setup
    a = assemble_distorted(grid, None, P, V, g, DistortionParam(0.1 + 0.2j)).matrix
    par = np.eye(grid.n)[grid.parity()]
    pi = np.kron(S3, par)
    sv = np.linalg.svd(pi @ a @ pi - a, compute_uv=False)
    assert sv[2] <= 1e-10 * sv[0]


def test_distorted_requires_frozen_support(distorted_setup):
    g, grid, _ = distorted_setup
    with pytest.raises(ModelError):
        assemble_distorted(grid, None, P, make_bump_potential(1.0, 1.0, np.eye(2)), g, DistortionParam(0.2j))
    with pytest.raises(ModelError):
        DistortionParam(0.6j)


def test_conjugation_formula_symbolic():
    x, th = sp.symbols("x theta")
    g = x**3 / 7 + sp.sin(x) / 3
    f = sp.exp(-x**2) * sp.cos(2 * x)
    phi = x + th * g
    J = sp.diff(phi, x)
    Uf = sp.sqrt(J) * f.subs(x, phi)
    lhs = sp.sqrt(J) * sp.diff(f, x).subs(x, phi)  # U (f')
    a = 1 / J
    b = -th * sp.diff(g, x, 2) / (2 * J**2)
    rhs = a * sp.diff(Uf, x) + b * Uf
    num = sp.lambdify((x, th), lhs - rhs, "numpy")
    xs = np.linspace(-1.5, 1.5, 41)
    for t in (0.1j, 0.25j, 0.1 + 0.2j):
        assert np.max(np.abs(num(xs, t))) <= 1e-12


def _conjugation_error(n):
    g = make_scaling_g(0.5, 6.0)
    grid = Grid(8.0, n)
    dp = DistortionParam(0.2j)
    p = PhysParams(1.0, mass=0.0)
    op = assemble_distorted(grid, None, p, zero_potential(), g, dp).matrix
    x, th = grid.nodes, dp.theta
    phi = x + th * g(x)
    J = 1 + th * g.d1(x)
    f = np.exp(-phi**2 / 4)
    Uf = np.sqrt(J) * f
    U_fprime = np.sqrt(J) * (-phi / 2) * f
    # upper-right block is a P - i hbar b, which should map U f to -i U f'
    return np.max(np.abs(op[:n, n:] @ Uf + 1j * U_fprime))


def test_distorted_kinetic_matches_conjugation_on_grid():
    # the compactly supported scaling limits convergence to faster than algebraic
    e1, e2 = _conjugation_error(512), _conjugation_error(1024)
    assert e2 <= 1e-5 and e2 <= e1 / 10


# --- Weyl quantisation -----------------------------------------------------------------


def test_weyl_identity():
    grid = Grid(4.0, 32)
    op = weyl_quantize(lambda x, xi: np.ones(np.broadcast(x, xi).shape), grid, P)
    np.testing.assert_allclose(op.matrix, np.eye(32), atol=1e-14)


def test_weyl_momentum_is_fourier_derivative():
    grid = Grid(4.0, 32)
    op = weyl_quantize(lambda x, xi: xi + 0 * x, grid, P)
    np.testing.assert_allclose(op.matrix, momentum_operator(grid, P.hbar), atol=1e-10)


def test_weyl_function_of_x_is_multiplication():
    grid = Grid(4.0, 32)
    op = weyl_quantize(lambda x, xi: np.cos(x) + 0 * xi, grid, P)
    np.testing.assert_allclose(op.matrix, np.diag(np.cos(grid.nodes)), atol=1e-14)


def test_weyl_symmetrized_product():
    grid = Grid(4.0, 32)
    X = np.diag(grid.nodes)
    Pm = momentum_operator(grid, P.hbar)
    op = weyl_quantize(lambda x, xi: x * xi, grid, P, wrap=False)
    np.testing.assert_allclose(op.matrix, 0.5 * (X @ Pm + Pm @ X), atol=1e-12)


def test_weyl_matrix_symbol_blocks():
    grid = Grid(4.0, 16)

    def sym(x, xi):
        shape = np.broadcast(x, xi).shape
        return np.broadcast_to(S3, shape + (2, 2)) * np.cos(x)[..., None, None]

    op = weyl_quantize(sym, grid, P)
    np.testing.assert_allclose(op.matrix, np.kron(S3, np.diag(np.cos(grid.nodes))), atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(c=st.lists(st.floats(-2, 2), min_size=5, max_size=5), n=st.sampled_from([16, 24, 32]))
def test_weyl_adjoint_property(c, n):
    grid = Grid(3.0, n)

    def sym(x, xi):
        shape = np.broadcast(x, xi).shape
        f = c[0] * np.cos(x) * np.exp(-xi**2) + c[1] * np.sin(2 * x) * xi / (1 + xi**2)
        h = c[2] * np.exp(-(x - xi) ** 2) + c[3] * np.cos(x + xi)
        return (f[..., None, None] * np.eye(2) + h[..., None, None] * S1
                + (c[4] * np.sin(x) * np.exp(-xi**2))[..., None, None] * S2 + np.zeros(shape + (2, 2)))

    def sym_dag(x, xi):
        return np.conj(np.swapaxes(sym(x, xi), -1, -2))

    a = weyl_quantize(sym, grid, P).matrix
    b = weyl_quantize(sym_dag, grid, P).matrix
    np.testing.assert_allclose(a.conj().T, b, atol=1e-10)


def test_weyl_boundedness():
    grid = Grid(6.0, 64)
    p = PhysParams(0.2)
    for w in (0.5, 1.0, 2.0):
        def sym(x, xi, w=w):
            return np.exp(-(x / w) ** 2 - xi**2) + 0j

        nrm = np.linalg.norm(weyl_quantize(sym, grid, p).matrix, 2)
        # sup-norm bound with derivatives up to order 2 in each variable
        bound = 1.0 + 2.0 / w + 4.0 / w**2
        assert nrm <= 4.0 * bound


# --- radial reduction and dumps -----------------------------------------------------


def test_radial_free_threshold():
    p = PhysParams(0.5)
    prob = radial_reduce(lambda r: 0 * r, -1, p, n=300, R=30.0)
    ev = prob.eigenvalues()
    assert np.min(np.abs(ev)) >= 1.0 - 1.0 / 30.0
    assert prob.hermiticity_defect() <= 1e-10


def test_radial_bound_state_emerges_continuously():
    p = PhysParams(0.5)
    lowest = []
    for depth in np.linspace(0.0, 1.5, 7):
        V = make_bump_potential(0.0, 2.0, -depth * np.eye(2))
        ev = radial_reduce(V, -1, p, n=300, R=20.0).eigenvalues()
        lowest.append(np.min(ev[ev > -1.0 + 1e-9]))
    lowest = np.array(lowest)
    assert np.all(np.diff(lowest) < 0)
    assert np.max(np.abs(np.diff(lowest))) < 0.5
    assert lowest[-1] < 1.0 < lowest[0] + 1e-12


def test_radial_rejects_non_radial():
    p = PhysParams(0.5)
    with pytest.raises(ModelError):
        radial_reduce(make_bump_potential(0.5, 1.0, np.eye(2)), -1, p)
    with pytest.raises(ModelError):
        radial_reduce(make_bump_potential(0.0, 1.0, S3), -1, p)
    with pytest.raises(ModelError):
        radial_reduce(lambda r: 0 * r, 0, p)


def test_dump_roundtrip(tmp_path):
    g = make_scaling_g(1.0, 4.0)
    grid = Grid(6.0, 16)
    op = assemble_distorted(grid, None, P, zero_potential(), g, DistortionParam(0.2j))
    path = tmp_path / "op.bin"
    dump_operator(op, path)
    assert path.stat().st_size == 16 * op.matrix.size
    raw = np.fromfile(path, dtype="<f8")
    assert raw[0] == op.matrix[0, 0].real and raw[1] == op.matrix[0, 0].imag
    back = load_operator(path)
    np.testing.assert_array_equal(back.matrix, op.matrix)
    assert back.kind == op.kind and back.theta == op.theta and back.grid == op.grid


def test_3d_representation_rejected_by_1d_assembly():
    with pytest.raises(ModelError):
        assemble_free(Grid(4.0, 16), standard_representation(3), P)
