"""Grid discretisations of the Dirac-type operators and discrete Weyl quantisation."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import circulant

from .algebra import DiracRep, standard_representation
from .model import (CapSpec, DistortionParam, MatrixPotential, ModelError, PhysParams,
                    ScalingFn, smoothstep)

__all__ = [
    "Grid",
    "grid_for",
    "AssembledOperator",
    "fourier_derivative",
    "momentum_operator",
    "assemble_free",
    "assemble_perturbed",
    "assemble_cap",
    "assemble_distorted",
    "weyl_quantize",
    "RadialProblem",
    "radial_reduce",
    "dump_operator",
    "load_operator",
    "multiplication",
]

KINDS = ("FreeDirac", "PerturbedDirac", "CapInfinite", "CapDirichlet", "DistortedDirac",
         "DistortedCap", "Weyl", "Radial")


@dataclass(frozen=True)
class Grid:
    half_length: float
    n: int
    boundary: str = "periodic"

    def __post_init__(self):
        if self.boundary not in ("periodic", "dirichlet"):
            raise ModelError(f"unknown boundary {self.boundary!r}")
        if self.boundary == "periodic" and self.n % 2:
            raise ModelError("periodic grids need an even number of points")
        if self.n < 2 or not self.half_length > 0:
            raise ModelError("grid needs n >= 2 and L > 0")

    @property
    def h(self) -> float:
        return 2.0 * self.half_length / self.n

    @property
    def nodes(self) -> np.ndarray:
        return -self.half_length + self.h * np.arange(self.n)

    @property
    def momenta(self) -> np.ndarray:
        return 2.0 * np.pi * np.fft.fftfreq(self.n, self.h)

    @property
    def k_max(self) -> float:
        return np.pi * self.n / (2.0 * self.half_length)

    def parity(self) -> np.ndarray:
        """Index map j -> index of -x_j."""
        return (-np.arange(self.n)) % self.n


def grid_for(half_length: float, hbar: float, xi_max: float, multiple: int = 8) -> Grid:
    """Smallest periodic grid on [-L, L) whose momentum cutoff hbar*k_max reaches xi_max."""
    n = int(np.ceil(2.0 * half_length * xi_max / (np.pi * hbar)))
    n = multiple * int(np.ceil(n / multiple))
    return Grid(float(half_length), max(n, multiple))


@dataclass
class AssembledOperator:
    matrix: np.ndarray = field(repr=False)
    kind: str
    params: Optional[PhysParams]
    grid: Grid
    theta: Optional[DistortionParam] = None
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.matrix.shape

    def hermiticity_defect(self) -> float:
        m = self.matrix
        return float(np.linalg.norm(m - m.conj().T, 2) / max(np.linalg.norm(m, 2), 1e-300))

    @property
    def spinor_dim(self) -> int:
        return self.meta.get("spinor_dim", 2)

    @property
    def node_index(self) -> np.ndarray:
        return self.meta.get("nodes", np.arange(self.grid.n))

    @property
    def x(self) -> np.ndarray:
        return self.grid.nodes[self.node_index]


def fourier_derivative(grid: Grid) -> np.ndarray:
    """Exactly anti-Hermitian spectral derivative on a periodic grid (Nyquist mode kept)."""
    if grid.boundary != "periodic":
        raise ModelError("Fourier differentiation needs a periodic grid")
    col = np.fft.ifft(1j * grid.momenta)
    d = circulant(col)
    return 0.5 * (d - d.conj().T)


def momentum_operator(grid: Grid, hbar: float) -> np.ndarray:
    """-i hbar d/dx, Hermitian."""
    p = -1j * hbar * fourier_derivative(grid)
    return 0.5 * (p + p.conj().T)


def _rep(rep):
    return standard_representation(1) if rep is None else rep


def _check_rep(rep: DiracRep):
    if rep.dim != 1:
        raise ModelError("grid assembly is one-dimensional; use radial_reduce for 3D")


def multiplication(values: np.ndarray) -> np.ndarray:
    """Block matrix for pointwise multiplication by matrices values[j] (shape (N, s, s))."""
    n, s, _ = values.shape
    out = np.zeros((s * n, s * n), dtype=complex)
    idx = np.arange(n)
    for a in range(s):
        for b in range(s):
            out[a * n + idx, b * n + idx] = values[:, a, b]
    return out


def _free_matrix(grid, rep, p):
    pm = momentum_operator(grid, p.hbar)
    return np.kron(p.c * rep.alphas[0], pm) + np.kron(p.rest_energy * rep.beta, np.eye(grid.n))


def assemble_free(grid: Grid, rep: DiracRep = None, p: PhysParams = None) -> AssembledOperator:
    rep = _rep(rep)
    _check_rep(rep)
    m = _free_matrix(grid, rep, p)
    return AssembledOperator(m, "FreeDirac", p, grid, meta={"spinor_dim": rep.spinor_dim})


def _potential_block(grid, V: MatrixPotential):
    if V.support_radius >= grid.half_length:
        raise ModelError("potential support exceeds the computational box")
    return multiplication(V(grid.nodes))


def assemble_perturbed(grid: Grid, rep: DiracRep, p: PhysParams, V: MatrixPotential) -> AssembledOperator:
    rep = _rep(rep)
    _check_rep(rep)
    m = _free_matrix(grid, rep, p) + _potential_block(grid, V)
    return AssembledOperator(m, "PerturbedDirac", p, grid, meta={"spinor_dim": rep.spinor_dim})


def _cap_block(x, W: CapSpec, s):
    w = W(x)
    return np.kron(np.eye(s), np.diag(w))


def assemble_cap(grid: Grid, rep: DiracRep, p: PhysParams, V: MatrixPotential, W: CapSpec,
                 variant: str = "infinite", R: float = None) -> AssembledOperator:
    """J = D - iW on the periodic grid, or its compression to nodes with |x| < R."""
    rep = _rep(rep)
    d = assemble_perturbed(grid, rep, p, V).matrix
    s = rep.spinor_dim
    m = d - 1j * _cap_block(grid.nodes, W, s)
    if variant == "infinite":
        return AssembledOperator(m, "CapInfinite", p, grid, meta={"spinor_dim": s})
    if variant != "dirichlet":
        raise ModelError(f"unknown CAP variant {variant!r}")
    if R is None or R <= W.R2:
        raise ModelError("Dirichlet CAP needs R > R2")
    if R > grid.half_length:
        raise ModelError("Dirichlet radius exceeds the grid")
    keep = np.flatnonzero(np.abs(grid.nodes) < R)
    rows = np.concatenate([a * grid.n + keep for a in range(s)])
    sub = m[np.ix_(rows, rows)]
    g = Grid(grid.half_length, grid.n, "dirichlet")
    return AssembledOperator(sub, "CapDirichlet", p, g, meta={"spinor_dim": s, "nodes": keep, "R": R})


def assemble_distorted(grid: Grid, rep: DiracRep, p: PhysParams, V: MatrixPotential, g: ScalingFn,
                       dp: DistortionParam, with_cap: CapSpec = None) -> AssembledOperator:
    """Conjugated operator U D U^{-1} for x -> x + theta g(x), in the form

    c*sigma_1 (a(x) P - i hbar b(x)) + beta m c^2 + V,  a = 1/(1+theta g'),
    b = -theta g''/(2 (1+theta g')^2),  P = -i hbar d/dx.
    """
    rep = _rep(rep)
    _check_rep(rep)
    if V.support_radius > g.R0:
        raise ModelError("scaling function is not frozen on the potential support")
    if with_cap is not None and with_cap.R2 > g.R0:
        raise ModelError("CAP must be saturated where the scaling acts (R2 <= R0)")
    if g.outer >= grid.half_length:
        raise ModelError("grid does not reach the identity region of g")
    th = complex(dp.theta)
    x = grid.nodes
    jac = 1.0 + th * g.d1(x)
    a = 1.0 / jac
    b = -th * g.d2(x) / (2.0 * jac**2)
    pm = momentum_operator(grid, p.hbar)
    kin = a[:, None] * pm - 1j * p.hbar * np.diag(b)
    m = np.kron(p.c * rep.alphas[0], kin) + np.kron(p.rest_energy * rep.beta, np.eye(grid.n))
    m = m + _potential_block(grid, V)
    kind = "DistortedDirac"
    if with_cap is not None:
        m = m - 1j * _cap_block(x, with_cap, rep.spinor_dim)
        kind = "DistortedCap"
    return AssembledOperator(m, kind, p, grid, theta=dp, meta={"spinor_dim": rep.spinor_dim})


def weyl_quantize(symbol, grid: Grid, p: PhysParams, wrap: bool = True) -> AssembledOperator:
    """Midpoint-rule Weyl quantisation on a periodic grid.

    K_ij = (1/N) sum_k exp(i k (x_i - x_j)) a(m_ij, hbar k).  With ``wrap`` the
    midpoint is taken along the shortest periodic path; the antipodal band
    averages both candidate midpoints so Hermitian symbols give Hermitian matrices.
    """
    if grid.boundary != "periodic":
        raise ModelError("Weyl quantisation needs a periodic grid")
    n, L, h = grid.n, grid.half_length, grid.h
    y = -L + 0.5 * h * np.arange(2 * n)
    k = grid.momenta
    try:
        vals = np.asarray(symbol(y[:, None], p.hbar * k[None, :]), dtype=complex)
    except Exception as exc:  # noqa: BLE001
        raise ModelError(f"symbol evaluation failed: {exc}") from exc
    if vals.ndim == 2:
        vals = vals[..., None, None]
    vals = np.broadcast_to(vals, (2 * n, n) + vals.shape[2:])
    s = vals.shape[-1]
    table = np.fft.ifft(vals, axis=1)  # table[s_mid, d mod n]
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    if wrap:
        d = (i - j + n // 2) % n - n // 2
        smid = (2 * j + d) % (2 * n)
        blk = table[smid, d % n]
        anti = d == -n // 2
        alt = table[(smid + n) % (2 * n), d % n]
        blk = np.where(anti[..., None, None], 0.5 * (blk + alt), blk)
    else:
        d = i - j
        blk = table[i + j, d % n]
    out = np.zeros((s * n, s * n), dtype=complex)
    for a in range(s):
        for b in range(s):
            out[a * n:(a + 1) * n, b * n:(b + 1) * n] = blk[..., a, b]
    return AssembledOperator(out, "Weyl", p, grid, meta={"spinor_dim": s})


@dataclass
class RadialProblem:
    """Staggered radial discretisation: G at r_i = i h, F at (i + 1/2) h."""

    matrix: np.ndarray = field(repr=False)
    r_upper: np.ndarray
    r_lower: np.ndarray
    kappa: int
    params: PhysParams

    def hermiticity_defect(self) -> float:
        m = self.matrix
        return float(np.linalg.norm(m - m.conj().T, 2) / np.linalg.norm(m, 2))

    def eigenvalues(self):
        return np.linalg.eigvalsh(self.matrix)


def radial_reduce(V, kappa: int, p: PhysParams, n: int = 400, R: float = 20.0) -> RadialProblem:
    """Partial-wave reduction for a radial scalar potential V(r) (callable or bump potential).

    Hermitian block form [[mc^2 + V, C^dagger], [C, -mc^2 + V]] with
    C = c hbar (d/dr + kappa/r), Dirichlet for G at r = 0 and r = R.
    """
    if kappa == 0 or int(kappa) != kappa:
        raise ModelError("kappa must be a nonzero integer")
    if isinstance(V, MatrixPotential):
        if any(abs(t.center) > 0 for t in V.terms):
            raise ModelError("potential is not radial")
        comps = np.array([t.coeff for t in V.terms]) if V.terms else np.zeros((0, V.spinor_dim, V.spinor_dim))
        if np.any(np.abs(comps - comps[:, :1, :1] * np.eye(V.spinor_dim)) > 0):
            raise ModelError("radial reduction needs a scalar potential")
        vfun = lambda r: V(r)[..., 0, 0].real  # noqa: E731
    else:
        vfun = V
    h = R / n
    rg = h * np.arange(1, n)
    rf = h * (np.arange(n) + 0.5)
    ng, nf = rg.size, rf.size
    C = np.zeros((nf, ng))
    for i in range(nf):
        # F point i sits between G points i (r=i h) and i+1; G(0) = G(R) = 0
        for jg, sgn in ((i - 1, -1.0), (i, 1.0)):
            if 0 <= jg < ng:
                C[i, jg] += sgn / h + 0.5 * kappa / rf[i]
    C *= p.c * p.hbar
    mc2 = p.rest_energy
    top = np.diag(mc2 + vfun(rg))
    bot = np.diag(-mc2 + vfun(rf))
    m = np.block([[top, C.T], [C, bot]]).astype(complex)
    return RadialProblem(m, rg, rf, int(kappa), p)


def dump_operator(op: AssembledOperator, path) -> None:
    """Row-major little-endian float64 (re, im) pairs plus a JSON sidecar."""
    path = str(path)
    np.ascontiguousarray(op.matrix, dtype="<c16").tofile(path)
    meta = {
        "kind": op.kind,
        "shape": list(op.matrix.shape),
        "dtype": "complex128-le-rowmajor",
        "grid": {"half_length": op.grid.half_length, "n": op.grid.n, "boundary": op.grid.boundary},
        "params": None if op.params is None else
        {"hbar": op.params.hbar, "mass": op.params.mass, "c": op.params.c},
        "theta": None if op.theta is None else [complex(op.theta.theta).real, complex(op.theta.theta).imag,
                                                 op.theta.eps],
        "nodes": [int(v) for v in op.node_index],
        "spinor_dim": op.spinor_dim,
    }
    with open(path + ".json", "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)


def load_operator(path) -> AssembledOperator:
    path = str(path)
    with open(path + ".json") as fh:
        meta = json.load(fh)
    m = np.fromfile(path, dtype="<c16").reshape(meta["shape"])
    g = Grid(**meta["grid"])
    p = None if meta["params"] is None else PhysParams(**meta["params"])
    th = None if meta["theta"] is None else DistortionParam(complex(*meta["theta"][:2]), meta["theta"][2])
    return AssembledOperator(m, meta["kind"], p, g, th,
                             {"spinor_dim": meta["spinor_dim"], "nodes": np.array(meta["nodes"])})


def smooth_cutoff(x, inner: float, outer: float):
    """1 on |x| <= inner, 0 on |x| >= outer."""
    return 1.0 - smoothstep((np.abs(np.asarray(x, float)) - inner) / (outer - inner))
