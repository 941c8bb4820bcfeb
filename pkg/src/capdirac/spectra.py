"""Non-Hermitian spectral tools: box eigenvalues, Riesz ranks, resolvents, resonances."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy.optimize import brentq, minimize_scalar

from .model import DistortionParam, ModelSpec, PhysParams, SpectralBox
from .quantize import AssembledOperator, Grid, assemble_distorted

__all__ = [
    "SolverError",
    "ContourError",
    "eigs_in_box",
    "eigs_near",
    "box_eigenvalues",
    "eigenvalues",
    "cluster",
    "riesz_rank",
    "resolvent_norm",
    "EssentialCurve",
    "essential_curve",
    "essential_branch",
    "distance_to_essential",
    "Resonance",
    "identify_resonances",
]


class SolverError(RuntimeError):
    pass


class ContourError(SolverError):
    pass


def _mat(A):
    return A.matrix if isinstance(A, AssembledOperator) else np.asarray(A)


def eigenvalues(A) -> np.ndarray:
    try:
        return sla.eigvals(_mat(A), check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SolverError(f"eigensolver failed: {exc}") from exc


def cluster(values, tol: float = 1e-8):
    """Group nearly equal values; returns list of (mean value, count)."""
    vals = sorted(np.asarray(values, dtype=complex), key=lambda z: (z.real, z.imag))
    groups: list = []
    for z in vals:
        for g in groups:
            if abs(z - g[0] / len(g[1])) <= tol * max(1.0, abs(z)):
                g[0] += z
                g[1].append(z)
                break
        else:
            groups.append([z, [z]])
    return [(g[0] / len(g[1]), len(g[1])) for g in groups]


def eigs_near(A, center: complex, radius: float, k0: int = 40, k_max: int = 600):
    """Every eigenvalue within ``radius`` of ``center`` by shift-invert Arnoldi.

    The number of requested Ritz values doubles until the farthest converged one
    lies outside the disk, so no eigenvalue inside can have been skipped.
    """
    from scipy.sparse.linalg import ArpackError, ArpackNoConvergence, LinearOperator, eigs

    m = _mat(A)
    n = m.shape[0]
    lu = sla.lu_factor(m - center * np.eye(m.shape[0]))
    op = LinearOperator(m.shape, matvec=lambda v: sla.lu_solve(lu, v), dtype=complex)
    k = k0
    v0 = np.ones(n, dtype=complex) / np.sqrt(n)
    while True:
        if k >= n - 2:
            return eigenvalues(m)
        try:
            mu = eigs(op, k=k, which="LM", return_eigenvectors=False, v0=v0, tol=1e-14,
                      ncv=min(n - 1, 2 * k + 20), maxiter=20 * n)
        except (ArpackError, ArpackNoConvergence) as exc:
            raise SolverError(f"Arnoldi iteration failed: {exc}") from exc
        lam = center + 1.0 / mu
        if np.max(np.abs(lam - center)) > radius or k >= k_max:
            if k >= k_max and np.max(np.abs(lam - center)) <= radius:
                raise SolverError("too many eigenvalues near the shift")
            return lam
        k *= 2


def box_eigenvalues(A, box: SpectralBox, method: str = "dense", pad: float = 0.0):
    """Eigenvalues of A (all of them for ``dense``; those near the box for ``arnoldi``).

    Wide boxes are cut into square-ish tiles along the real axis, each searched
    with its own shift; a tile keeps only the values in its own vertical slab.
    """
    if method == "dense":
        return eigenvalues(A)
    if method != "arnoldi":
        raise ValueError(f"unknown eigen method {method!r}")
    height = box.t - box.b + 2 * pad
    width = box.r - box.l + 2 * pad
    tiles = max(1, int(np.ceil(width / max(height, 1e-12) / 1.5)))
    step = width / tiles
    left = box.l - pad
    out = []
    for k in range(tiles):
        lo, hi = left + k * step, left + (k + 1) * step
        c = 0.5 * (lo + hi) + 0.5j * (box.b + box.t)
        rad = 0.5 * abs(complex(step, height)) * (1 + 1e-9)
        lam = eigs_near(A, c, rad)
        keep = np.abs(lam - c) <= rad
        if tiles > 1:
            keep &= (lam.real >= lo) if k > 0 else True
            keep &= (lam.real < hi) if k < tiles - 1 else True
        out.append(lam[keep])
    return np.concatenate(out)


def eigs_in_box(A, box: SpectralBox, tol: float = 1e-8, values=None, method: str = "dense"):
    """All eigenvalues inside ``box`` with algebraic multiplicities from clustering."""
    ev = box_eigenvalues(A, box, method) if values is None else np.asarray(values)
    inside = ev[box.contains(ev)]
    return cluster(inside, tol)


def _contour_nodes(center, radius, q):
    phi = 2.0 * np.pi * (np.arange(q) + 0.5) / q
    return center + radius * np.exp(1j * phi), radius * np.exp(1j * phi) / q


def _projector_dense(m, center, radius, q):
    n = m.shape[0]
    eye = np.eye(n)
    P = np.zeros((n, n), dtype=complex)
    for z, w in zip(*_contour_nodes(center, radius, q)):
        sv = sla.svdvals(z * eye - m)
        if sv[-1] < 1e-8:
            raise ContourError(f"contour passes within {sv[-1]:.2e} of the spectrum")
        P += w * sla.solve(z * eye - m, eye)
    return P


def _projector_probe(T, center, radius, q, probes):
    n = T.shape[0]
    Y = np.zeros_like(probes)
    d = np.diag(T)
    for z, w in zip(*_contour_nodes(center, radius, q)):
        if np.min(np.abs(z - d)) < 1e-8:
            raise ContourError("contour passes through an eigenvalue")
        Y += w * sla.solve_triangular(z * np.eye(n) - T, probes)
    return Y


def riesz_rank(A, center: complex, radius: float, quad_points: int = 64, max_points: int = 4096,
               dense_limit: int = 600, schur=None, seed: int = 0, trace_tol: float = 0.05) -> int:
    """Rank of the Riesz projector (1/2 pi i) \\oint (z - A)^{-1} dz over a circle.

    Small matrices use the full projector and count singular values >= 1/2.
    Larger ones use a complex Schur form and a block of random probe vectors.
    The node count doubles until two consecutive ranks agree with each other and
    with the rounded trace of the quadrature projector. The trace only sees
    eigenvalues, so an eigenvalue just outside the contour with an
    ill-conditioned eigenvector cannot make a wrong rank look converged.
    """
    m = _mat(A)
    n = m.shape[0]
    if n <= dense_limit and schur is None:
        def rank(q):
            P = _projector_dense(m, center, radius, q)
            return int(np.sum(sla.svdvals(P) >= 0.5)), np.trace(P).real
    else:
        T, _ = sla.schur(m, output="complex") if schur is None else schur
        k = min(n, 24)
        rng = np.random.default_rng(seed)
        probes = rng.standard_normal((n, k)) + 1j * rng.standard_normal((n, k))
        d = np.diag(T)

        def rank(q):
            sv = sla.svdvals(_projector_probe(T, center, radius, q, probes))
            r = int(np.sum(sv > 1e-7 * np.sqrt(n)))
            if r == k:
                raise SolverError("probe block too small for this projector")
            z, w = _contour_nodes(center, radius, q)
            tr = np.sum(w[:, None] / (z[:, None] - d[None, :])).real
            return r, tr
    q = quad_points
    prev, _ = rank(q)
    while q < max_points:
        q *= 2
        cur, tr = rank(q)
        if cur == prev and abs(tr - cur) <= trace_tol:
            return cur
        prev = cur
    raise ContourError("Riesz rank did not stabilise; the contour may be too close to the spectrum")


def resolvent_norm(A, z: complex) -> float:
    m = _mat(A)
    sv = sla.svdvals(m - z * np.eye(m.shape[0]))
    smin = sv[-1]
    if smin <= np.finfo(float).eps * max(sv[0], 1.0):
        raise SolverError("z lies in the (numerical) spectrum")
    return float(1.0 / smin)


@dataclass
class EssentialCurve:
    theta: complex
    lam: np.ndarray
    upper: np.ndarray
    lower: np.ndarray

    @property
    def samples(self):
        return [(l, z) for l, z in zip(self.lam, self.upper)] + [(l, z) for l, z in zip(self.lam, self.lower)]


def essential_branch(lam, theta, p: PhysParams, sign: int = 1):
    """sign * c * (lam/(1+theta)^2 + m^2 c^2)^(1/2) with the principal square root."""
    lam = np.asarray(lam, dtype=float)
    return sign * p.c * np.sqrt(lam / (1.0 + complex(theta)) ** 2 + (p.mass * p.c) ** 2 + 0j)


def essential_curve(theta, p: PhysParams, lambda_max: float, count: int = 200) -> EssentialCurve:
    th = complex(theta.theta if isinstance(theta, DistortionParam) else theta)
    lam = np.linspace(0.0, lambda_max, count)
    return EssentialCurve(th, lam, essential_branch(lam, th, p, 1), essential_branch(lam, th, p, -1))


def distance_to_essential(z, theta, p: PhysParams) -> np.ndarray:
    """Distance from each z to the rotated essential spectrum, via xi = sqrt(lambda)."""
    th = complex(theta.theta if isinstance(theta, DistortionParam) else theta)
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    out = np.empty(z.shape, dtype=float)
    for idx, zz in np.ndenumerate(z):
        best = np.inf
        xmax = 2.0 * abs(zz) / p.c + 2.0 * p.mass * p.c + 1.0
        xs = np.linspace(0.0, xmax, 2001)
        for sgn in (1, -1):
            f = lambda s, sgn=sgn: abs(zz - essential_branch(s * s, th, p, sgn))  # noqa: E731
            vals = np.abs(zz - essential_branch(xs**2, th, p, sgn))
            i = int(np.argmin(vals))
            lo, hi = xs[max(i - 1, 0)], xs[min(i + 1, xs.size - 1)]
            res = minimize_scalar(f, bounds=(lo, hi), method="bounded",
                                  options={"xatol": 1e-13 * (1 + xmax)})
            best = min(best, vals[i], float(res.fun))
            # |.| has a kink when z is on the curve; the stationarity condition does not
            h = 1e-7 * (1 + xmax)
            dfun = lambda s, sgn=sgn: f(s + h) ** 2 - f(s - h) ** 2  # noqa: E731
            a, b = max(lo, 0.0), hi
            if a < b and dfun(a) * dfun(b) < 0:
                best = min(best, f(brentq(dfun, a, b, xtol=1e-15)))
        out[idx] = best
    return out


@dataclass
class Resonance:
    value: complex
    multiplicity: int
    theta_used: DistortionParam
    hbar: float
    stability: float
    ambiguous: bool = False
    values_by_theta: dict = field(default_factory=dict)

    def record(self):
        return {"hbar": self.hbar, "theta_im": complex(self.theta_used.theta).imag,
                "re": float(self.value.real), "im": float(self.value.imag),
                "multiplicity": self.multiplicity, "drift": float(self.stability)}


@dataclass
class DistortedSolve:
    """Eigen-data of one distorted operator, kept for reuse."""

    op: AssembledOperator
    values: np.ndarray
    schur: Optional[tuple] = None


def solve_distorted(model: ModelSpec, grid: Grid, dp: DistortionParam, with_cap=None,
                    want_schur: bool = False, box: SpectralBox = None,
                    method: str = "dense") -> DistortedSolve:
    """Assemble D_theta (or J_theta) and compute its eigenvalues.

    With ``method="arnoldi"`` only eigenvalues near ``box`` are returned.
    """
    op = assemble_distorted(grid, None, model.params, model.potential, model.scaling, dp, with_cap)
    if method == "arnoldi":
        if box is None:
            raise ValueError("arnoldi solves need a box")
        pad = 0.05 * max(box.r - box.l, box.t - box.b)
        return DistortedSolve(op, box_eigenvalues(op, box, "arnoldi", pad))
    if want_schur:
        T, Z = sla.schur(op.matrix, output="complex")
        return DistortedSolve(op, np.diag(T).copy(), (T, Z))
    return DistortedSolve(op, eigenvalues(op))


def _match(z, pool):
    if pool.size == 0:
        return None, np.inf
    d = np.abs(pool - z)
    i = int(np.argmin(d))
    return i, d[i]


def identify_resonances(model: ModelSpec, box: SpectralBox, grid: Grid, taus=None,
                        stability_tol: float = 1e-6, margin: float = None,
                        multiplicity: bool = True, solves=None, method: str = "dense"):
    """theta-stable eigenvalues of the distorted operator inside ``box``.

    Candidates from each theta are paired by reciprocal nearest neighbours with
    the reference (first) theta. Drift is the largest relative displacement.
    """
    taus = model.taus if taus is None else tuple(taus)
    if len(taus) < 2:
        raise ValueError("need at least two distortion parameters")
    box.check_resonance_box(model.params.rest_energy)
    dps = [DistortionParam(1j * t, model.eps) for t in taus]
    if solves is None:
        solves = [solve_distorted(model, grid, dp, want_schur=(k == 0 and multiplicity
                                                              and method == "dense"),
                                  box=box, method=method)
                  for k, dp in enumerate(dps)]
    if margin is None:
        margin = 10.0 * stability_tol
    pad = 0.05 * max(box.r - box.l, box.t - box.b)
    pools = []
    for s, dp in zip(solves, dps):
        v = s.values[box.contains(s.values, pad)]
        if v.size:
            v = v[distance_to_essential(v, dp.theta, model.params) >= margin]
        pools.append(v)
    ref = pools[0]
    out = []
    for z in ref[box.contains(ref)]:
        drift, ambiguous, per = 0.0, False, {taus[0]: z}
        ok = True
        for t, pool in zip(taus[1:], pools[1:]):
            i, d = _match(z, pool)
            if i is None:
                ok = False
                break
            back, _ = _match(pool[i], ref)
            if ref[back] != z:
                ambiguous = True
            drift = max(drift, d / abs(z))
            per[t] = pool[i]
        if not ok or drift > stability_tol:
            continue
        mult = 1
        if multiplicity and solves[0].values.size < solves[0].op.shape[0]:
            near = np.abs(solves[0].values - z) <= 1e-8 * max(1.0, abs(z))
            mult = int(np.sum(near))
        elif multiplicity:
            others = np.abs(solves[0].values - z)
            others = others[others > 0]
            rad = 0.5 * min(others.min() if others.size else 1.0, 1e-2)
            mult = riesz_rank(solves[0].op, z, rad, schur=solves[0].schur)
            if mult == 0:
                ambiguous = True
                mult = 1
        out.append(Resonance(complex(z), mult, dps[0], model.params.hbar, float(drift), ambiguous, per))
    out.sort(key=lambda r: (r.value.real, r.value.imag))
    return out
