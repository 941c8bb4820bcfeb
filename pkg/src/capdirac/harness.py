"""Experiment pipelines comparing resonances with CAP eigenvalues.

Every pipeline is a pure function of a model and an hbar ladder; reports are
plain dataclasses that serialise to JSON-friendly records.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .dynamics import hyperbolicity_margin, nontrapping_verdict
from .model import (
    CapSpec,
    DistortionParam,
    ModelError,
    ModelSpec,
    PhysParams,
    SpectralBox,
    make_bump_potential,
    make_cap,
    make_scaling_g,
    pauli_coeff,
    zero_potential,
)
from .quantize import (
    AssembledOperator,
    Grid,
    assemble_cap,
    assemble_distorted,
    assemble_perturbed,
    grid_for,
    smooth_cutoff,
)
from .spectra import (
    SolverError,
    box_eigenvalues,
    eigs_near,
    identify_resonances,
    resolvent_norm,
    solve_distorted,
)

__all__ = [
    "GateConstants",
    "PreconditionError",
    "QuasimodeTrial",
    "QuasimodeVerdict",
    "RungRecord",
    "ComparisonReport",
    "CountingReport",
    "shared_grid",
    "cutoff_state",
    "cap_support_mass",
    "eigenvector",
    "run_resonance_to_cap",
    "run_cap_to_resonance",
    "run_intersecting",
    "counting_sweep",
    "dirichlet_trial",
    "eigenvector_trial",
    "quasimode_to_resonance",
    "resolvent_constant",
    "barrier_model",
    "em_model",
    "deep_well_model",
    "free_model",
    "DEFAULT_LADDER",
]

DEFAULT_LADDER = tuple(0.2 * 2.0**-k for k in range(4))


class PreconditionError(RuntimeError):
    """A theorem precondition failed; ``evidence`` carries the diagnostic."""

    def __init__(self, msg, evidence=None):
        super().__init__(msg)
        self.evidence = evidence


@dataclass(frozen=True)
class GateConstants:
    """Unspecified theorem constants, exposed as configuration."""

    C: float = 1.0
    C0: float = 1.0
    B: float = 1.0
    M: float = 1.0
    N: float = 0.0
    K: float = 8.0


def _log(h):
    return np.log(1.0 / h)


def _cplx(z):
    return None if z is None else [float(np.real(z)), float(np.imag(z))]


# --- grids and states -----------------------------------------------------------


def shared_grid(model: ModelSpec, xi_max: float = 5.0, pad: float = 1.0) -> Grid:
    """Periodic grid holding the whole scaling transition, used for D, J and D_theta alike.

    Using one grid for every operator makes the interior discretisation identical,
    so it cancels when resonances and CAP eigenvalues are compared.
    """
    if model.scaling is None:
        raise ModelError("model has no scaling function")
    return grid_for(model.scaling.outer + pad, model.params.hbar, xi_max)


def _nodes_for(u, x):
    u = np.asarray(u)
    x = np.asarray(x, float)
    if u.size % x.size:
        raise ValueError("state length is not a multiple of the node count")
    return u.reshape(-1, x.size)


def cutoff_state(u, op: AssembledOperator, cut_radius: float, inner: float):
    """Normalised chi*u and the commutator size ||[D, chi] u||.

    chi equals 1 on |x| <= inner and vanishes for |x| >= cut_radius.
    """
    if cut_radius > op.grid.half_length:
        raise ModelError("cut radius exceeds the grid")
    x = op.grid.nodes
    chi = np.tile(smooth_cutoff(x, inner, cut_radius), op.shape[0] // x.size)
    u = np.asarray(u, dtype=complex)
    cu = chi * u
    comm = op.matrix @ cu - chi * (op.matrix @ u)
    nrm = np.linalg.norm(cu)
    if nrm == 0:
        raise ValueError("cutoff annihilates the state")
    return cu / nrm, float(np.linalg.norm(comm))


def cap_support_mass(u, W: CapSpec, x) -> float:
    """sqrt of the fraction of ||u||^2 carried by nodes with |x| >= R1."""
    blocks = _nodes_for(u, x)
    dens = np.sum(np.abs(blocks) ** 2, axis=0)
    tot = dens.sum()
    if tot == 0:
        return 0.0
    return float(np.sqrt(dens[np.abs(np.asarray(x)) >= W.R1].sum() / tot))


def eigenvector(A, z: complex, iters: int = 3):
    """Unit eigenvector for the eigenvalue closest to z (inverse iteration)."""
    m = A.matrix if isinstance(A, AssembledOperator) else np.asarray(A)
    n = m.shape[0]
    shift = z + 1e-10 * max(1.0, abs(z)) * (1 + 1j)
    lu = sla.lu_factor(m - shift * np.eye(n))
    v = np.random.default_rng(0).standard_normal(n).astype(complex)
    for _ in range(iters):
        v = sla.lu_solve(lu, v)
        v /= np.linalg.norm(v)
    return v


def _nearest(z, pool):
    """Element of pool nearest to z; ties go to the smaller |Im|."""
    pool = np.asarray(pool)
    if pool.size == 0:
        return None
    d = np.abs(pool - z)
    order = np.lexsort((np.abs(pool.imag), d))
    return complex(pool[order[0]])


def _in_theorem_box(w, z0, eps, hbar):
    if w is None:
        return False
    half = eps * _log(hbar)
    return bool(abs(w.real - z0.real) <= half and -eps <= w.imag <= 0.0)


# --- reports -----------------------------------------------------------------


@dataclass
class RungRecord:
    hbar: float
    n: int
    z0: Optional[complex] = None
    w0: Optional[complex] = None
    epsilon: Optional[float] = None
    gate: bool = False
    contained: Optional[bool] = None
    distance: Optional[float] = None
    status: str = "ok"
    extra: dict = field(default_factory=dict)

    def record(self):
        d = asdict(self)
        d["z0"], d["w0"] = _cplx(self.z0), _cplx(self.w0)
        d["extra"] = {k: (_cplx(v) if isinstance(v, complex) else v) for k, v in self.extra.items()}
        return d


@dataclass
class ComparisonReport:
    experiment: str
    model_hash: str
    regime: str
    ladder: tuple
    rungs: list
    verdicts: dict = field(default_factory=dict)

    @property
    def distances(self):
        return [r.distance for r in self.rungs]

    def records(self):
        return [r.record() for r in self.rungs]

    def summary(self):
        return {"experiment": self.experiment, "model_hash": self.model_hash, "regime": self.regime,
                "ladder": list(self.ladder), "verdicts": self.verdicts}


def _monotone_decreasing(vals):
    vals = [v for v in vals if v is not None]
    return len(vals) >= 2 and all(b < a for a, b in zip(vals, vals[1:]))


def _verdicts(rungs):
    gated = [r for r in rungs if r.gate and r.contained is not None]
    return {
        "distance_decreasing": _monotone_decreasing([r.distance for r in rungs]),
        "gated_rungs": len(gated),
        "all_gated_contained": all(r.contained for r in gated),
        "skipped": [r.hbar for r in rungs if r.status != "ok"],
    }


# --- pipelines ------------------------------------------------------------------


def _resonance_rung(m: ModelSpec, box, grid, taus, target, method, cap=None):
    """(z0, solves) for one rung; z0 is None when nothing theta-stable is found."""
    taus = m.taus if taus is None else tuple(taus)
    dps = [DistortionParam(1j * t, m.eps) for t in taus]
    solves = [solve_distorted(m, grid, dp, with_cap=cap, box=box, method=method) for dp in dps]
    res = identify_resonances(m, box, grid, taus, solves=solves, method=method, multiplicity=False)
    if not res:
        return None, solves, res
    z0 = _nearest(target, [r.value for r in res])
    return z0, solves, res


def _target(box, target):
    return 0.5 * (box.l + box.r) if target is None else complex(target)


def _resonance_pipeline(model, box, ladder, power, experiment, xi_max, target, taus, gates, method,
                        extra_fn=None):
    ladder = tuple(float(h) for h in ladder)
    target = _target(box, target)
    rungs = []
    for h in ladder:
        m = model.with_hbar(h)
        grid = shared_grid(m, xi_max)
        rec = RungRecord(h, grid.n)
        z0, solves, res = _resonance_rung(m, box, grid, taus, target, method)
        if z0 is None:
            rec.status = "no resonance"
            rungs.append(rec)
            continue
        rec.z0 = z0
        rec.extra["drift"] = max(r.stability for r in res if r.value == z0)
        J = assemble_cap(grid, None, m.params, m.potential, m.cap)
        w0 = _nearest(z0, box_eigenvalues(J, box, method, 0.05 * (box.r - box.l)))
        rec.w0 = w0
        rec.distance = None if w0 is None else float(abs(w0 - z0))
        rec.epsilon = float(h ** (-power) * abs(z0.imag))
        rec.gate = bool(abs(z0.imag) <= h**power / (gates.C * _log(h)))
        rec.contained = _in_theorem_box(w0, z0, rec.epsilon, h)
        if not rec.gate:
            rec.status = "hypothesis unmet"
        if extra_fn is not None:
            rec.extra.update(extra_fn(m, grid, z0, solves))
        rungs.append(rec)
    rep = ComparisonReport(experiment, model.fingerprint(), model.regime, ladder, rungs)
    rep.verdicts = _verdicts(rungs)
    return rep


def run_resonance_to_cap(model: ModelSpec, box: SpectralBox, hbar_ladder=DEFAULT_LADDER,
                         xi_max: float = 5.0, target=None, taus=None,
                         gates: GateConstants = GateConstants(), method: str = "arnoldi"):
    """From a theta-stable resonance z0 to the nearest CAP eigenvalue w0, per rung.

    The box half-width is hbar^-5 |Im z0|; containment is asserted only where
    |Im z0| <= hbar^5 / (C log 1/hbar).
    """
    if model.regime != "non-intersecting":
        raise PreconditionError(f"regime is {model.regime!r}, expected non-intersecting")
    return _resonance_pipeline(model, box, hbar_ladder, 5, "resonance_to_cap", xi_max, target,
                               taus, gates, method)


def run_cap_to_resonance(model: ModelSpec, box: SpectralBox, hbar_ladder=DEFAULT_LADDER,
                         xi_max: float = 5.0, target=None, taus=None,
                         gates: GateConstants = GateConstants(), method: str = "arnoldi"):
    """From a CAP eigenvalue w0 to a resonance, with the quasimode residual check.

    The J-eigenvector f is cut off with chi = 1 on |x| <= R2 and chi = 0 beyond
    R0. The residual ||(D - Re w0) chi f|| / ||chi f|| is compared with
    sqrt(-Im w0); the ratio is reported as ``C``. ``identity_defect`` is
    | ||sqrt(Re W) f||^2 + Im w0 ||f||^2 | for unit f, which vanishes exactly.
    """
    if model.regime != "non-intersecting":
        raise PreconditionError(f"regime is {model.regime!r}, expected non-intersecting")
    ladder = tuple(float(h) for h in hbar_ladder)
    target = _target(box, target)
    rungs = []
    for h in ladder:
        m = model.with_hbar(h)
        grid = shared_grid(m, xi_max)
        rec = RungRecord(h, grid.n)
        J = assemble_cap(grid, None, m.params, m.potential, m.cap)
        wv = box_eigenvalues(J, box, method)
        wv = wv[box.contains(wv)]
        if wv.size == 0:
            rec.status = "no CAP eigenvalue"
            rungs.append(rec)
            continue
        w0 = _nearest(target, wv)
        f = eigenvector(J, w0)
        D = assemble_perturbed(grid, None, m.params, m.potential)
        rew = np.tile(np.real(m.cap(grid.nodes)), 2)
        ident = abs(np.sum(rew * np.abs(f) ** 2) + w0.imag)
        v, comm = cutoff_state(f, D, m.scaling.R0, m.cap.R2)
        resid = float(np.linalg.norm(D.matrix @ v - w0.real * v))
        rec.w0 = w0
        rec.extra.update({"residual": resid, "commutator": comm, "identity_defect": float(ident),
                          "C": resid / np.sqrt(-w0.imag) if w0.imag < 0 else None})
        rec.epsilon = float(h**-4 * np.sqrt(max(-w0.imag, 0.0)))
        rec.gate = bool(-w0.imag <= (h**4 / (gates.C * _log(h))) ** 2)
        z0, _, _ = _resonance_rung(m, box, grid, taus, w0, method)
        rec.z0 = z0
        if z0 is not None:
            rec.distance = float(abs(w0 - z0))
            half = rec.epsilon * _log(h)
            rec.contained = bool(abs(z0.real - w0.real) <= half and -rec.epsilon <= z0.imag <= 0.0)
        if not rec.gate:
            rec.status = "hypothesis unmet"
        rungs.append(rec)
    rep = ComparisonReport("cap_to_resonance", model.fingerprint(), model.regime, ladder, rungs)
    rep.verdicts = _verdicts(rungs)
    cs = [r.extra["C"] for r in rungs if r.extra.get("C") is not None]
    if cs:
        mean = float(np.mean(cs))
        rep.verdicts["C_mean"] = mean
        rep.verdicts["C_spread"] = float(max(abs(c - mean) for c in cs) / mean)
    return rep


def run_intersecting(model: ModelSpec, box: SpectralBox, hbar_ladder=DEFAULT_LADDER,
                     xi_max: float = 5.0, target=None, taus=None,
                     gates: GateConstants = GateConstants(), method: str = "arnoldi",
                     flow_radius: float = None, t_max: float = 20.0, seeds: int = 1000,
                     seed: int = 0):
    """Intersecting-support variant: nontrapping gate, hbar^-6 boxes, CAP-support mass.

    Raises PreconditionError (with the verdict attached) on a trapping model.
    """
    if model.regime != "intersecting":
        raise PreconditionError(f"regime is {model.regime!r}, expected intersecting")
    R = model.scaling.R0 if flow_radius is None else flow_radius
    verdict = nontrapping_verdict(model, (box.l, box.r), R, t_max, seeds, seed, inner=model.cap.R1)
    if not verdict.nontrapping:
        raise PreconditionError("flow is trapping outside the CAP inner radius", verdict)
    margin = hyperbolicity_margin(model, (-R, R), seed=seed)
    if margin <= 0:
        raise PreconditionError("hyperbolicity fails", margin)

    def mass(m, grid, z0, solves):
        op = solves[0].op
        u = eigenvector(op, z0)
        v, _ = cutoff_state(u, op, m.scaling.R0, m.R0prime)
        return {"cap_support_mass": cap_support_mass(v, m.cap, grid.nodes)}

    rep = _resonance_pipeline(model, box, hbar_ladder, 6, "intersecting", xi_max, target, taus,
                              gates, method, mass)
    masses = [r.extra.get("cap_support_mass") for r in rep.rungs]
    rep.verdicts["nontrapping"] = verdict.record()
    rep.verdicts["hyperbolicity_margin"] = float(margin)
    rep.verdicts["cap_mass_decreasing"] = _monotone_decreasing(masses)
    return rep


# --- counting -----------------------------------------------------------------------


@dataclass
class CountingReport:
    model_hash: str
    ladder: tuple
    resonance_counts: list
    cap_counts: list
    resonance_exponent: Optional[float]
    cap_exponent: Optional[float]

    def records(self):
        return [{"hbar": h, "resonances": r, "cap": c}
                for h, r, c in zip(self.ladder, self.resonance_counts, self.cap_counts)]

    def summary(self):
        return {"model_hash": self.model_hash, "ladder": list(self.ladder),
                "resonance_exponent": self.resonance_exponent, "cap_exponent": self.cap_exponent}


def _fit_exponent(ladder, counts):
    pts = [(np.log(1 / h), np.log(c)) for h, c in zip(ladder, counts) if c > 0]
    if len(pts) < 2:
        return None
    a, b = np.array(pts).T
    return float(np.polyfit(a, b, 1)[0])


def counting_sweep(model: ModelSpec, box: SpectralBox, hbar_ladder=DEFAULT_LADDER,
                   xi_max: float = 5.0, taus=None, method: str = "arnoldi") -> CountingReport:
    """Resonance and CAP-eigenvalue counts in a fixed box, with log-log slopes."""
    ladder = tuple(float(h) for h in hbar_ladder)
    rc, cc = [], []
    for h in ladder:
        m = model.with_hbar(h)
        if m.potential.is_zero:
            rc.append(0)
            cc.append(0)
            continue
        grid = shared_grid(m, xi_max)
        res = identify_resonances(m, box, grid, taus, method=method)
        rc.append(int(sum(r.multiplicity for r in res)))
        if m.cap is None:
            cc.append(0)
            continue
        J = assemble_cap(grid, None, m.params, m.potential, m.cap)
        cc.append(int(np.sum(box.contains(box_eigenvalues(J, box, method)))))
    return CountingReport(model.fingerprint(), ladder, rc, cc, _fit_exponent(ladder, rc),
                          _fit_exponent(ladder, cc))


# --- quasimodes -----------------------------------------------------------------------


@dataclass
class QuasimodeTrial:
    energy: float
    state: np.ndarray
    radius: float
    residual: float
    grid: Grid
    hbar: float
    gates: GateConstants = GateConstants()

    def box_width(self) -> float:
        g = self.gates
        h = self.hbar
        return float(max(g.C0 * g.B * g.M * self.residual * h ** (-4 - g.N),
                         np.exp(-g.B / h), h**g.K))


def _finish_trial(D, u, grid, radius, hbar, gates):
    u = u / np.linalg.norm(u)
    E = float(np.real(np.vdot(u, D.matrix @ u)))
    resid = float(np.linalg.norm(D.matrix @ u - E * u))
    return QuasimodeTrial(E, u, radius, resid, grid, hbar, gates)


def dirichlet_trial(model: ModelSpec, grid: Grid, radius: float, target: float,
                    taper: float = 0.5, gates: GateConstants = GateConstants(),
                    localize: float = None, window: float = 0.1) -> QuasimodeTrial:
    """Eigenstate of D compressed to |x| < radius, smoothly cut to zero at ``radius``.

    Without ``localize`` the eigenvalue nearest ``target`` is used. With it, the
    state within ``window`` of the target carrying the most mass in
    |x| < localize is used instead, which skips states living outside a well.
    """
    p = model.params
    D = assemble_perturbed(grid, None, p, model.potential)
    n = grid.n
    keep = np.flatnonzero(np.abs(grid.nodes) < radius)
    rows = np.concatenate([keep, n + keep])
    sub = D.matrix[np.ix_(rows, rows)]
    w, vecs = sla.eigh(sub)
    j = int(np.argmin(np.abs(w - target)))
    if localize is not None:
        near = np.flatnonzero(np.abs(w - target) <= window)
        inner = np.tile(np.abs(grid.nodes[keep]) < localize, 2)
        if near.size:
            j = int(near[np.argmax(np.sum(np.abs(vecs[inner][:, near]) ** 2, axis=0))])
    u = np.zeros(2 * n, dtype=complex)
    u[rows] = vecs[:, j]
    u *= np.tile(smooth_cutoff(grid.nodes, radius - taper, radius), 2)
    return _finish_trial(D, u, grid, radius, p.hbar, gates)


def eigenvector_trial(model: ModelSpec, grid: Grid, target: float, radius: float,
                      gates: GateConstants = GateConstants()) -> QuasimodeTrial:
    """Exact discrete eigenvector of D nearest ``target``, zeroed for |x| >= radius."""
    p = model.params
    D = assemble_perturbed(grid, None, p, model.potential)
    w, vecs = sla.eigh(D.matrix)
    j = int(np.argmin(np.abs(w - target)))
    u = vecs[:, j] * np.tile(np.abs(grid.nodes) < radius, 2)
    return _finish_trial(D, u, grid, radius, p.hbar, gates)


@dataclass
class QuasimodeVerdict:
    status: str
    value: Optional[complex]
    b: float
    box: tuple
    gate_bound: float

    def record(self):
        return {"status": self.status, "value": _cplx(self.value), "b": self.b,
                "box": list(self.box), "gate_bound": self.gate_bound}


def quasimode_to_resonance(trial: QuasimodeTrial, model: ModelSpec, corollary: bool = False,
                           taus=None, stability_tol: float = 1e-6,
                           search_grid: Grid = None) -> QuasimodeVerdict:
    """Look for a resonance (or a CAP eigenvalue with ``corollary``) in the b(hbar)-box.

    The trial may live on a small fine grid; the search runs on ``search_grid``
    (default: the shared grid of the model), which must hold the scaling region.
    """
    g = trial.gates
    h = trial.hbar
    power = (5 if corollary else 4) + g.N
    bound = h**power / (g.C * _log(h))
    b = trial.box_width()
    half = b * _log(h)
    box = (trial.energy - half, trial.energy + half, -b, 0.0)
    if trial.residual > bound:
        return QuasimodeVerdict("refused", None, b, box, bound)
    m = model.with_hbar(h)
    grid = shared_grid(m) if search_grid is None else search_grid
    rad = 2.0 * half + 1e-9
    tol = 1e-10

    def inside(z):
        return (abs(z.real - trial.energy) <= half and -b - tol <= z.imag <= tol)

    if corollary:
        J = assemble_cap(grid, None, m.params, m.potential, m.cap)
        cand = [complex(z) for z in eigs_near(J, trial.energy, rad) if inside(z)]
    else:
        taus = m.taus if taus is None else tuple(taus)
        vals = []
        for t in taus:
            op = assemble_distorted(grid, None, m.params, m.potential, m.scaling,
                                    DistortionParam(1j * t, m.eps))
            vals.append(eigs_near(op, trial.energy, rad))
        cand = [complex(z) for z in vals[0] if inside(z)
                and all(np.min(np.abs(v - z)) <= stability_tol * max(1.0, abs(z)) for v in vals[1:])]
    if not cand:
        return QuasimodeVerdict("not-found", None, b, box, bound)
    return QuasimodeVerdict("found", _nearest(trial.energy, cand), b, box, bound)


# --- resolvent diagnostic -----------------------------------------------------------


def resolvent_constant(op, box: SpectralBox, hbar: float, K: float = 8.0, n_re: int = 5,
                       n_im: int = 12, im_max: float = 0.5) -> float:
    """max of ||(A - z)^{-1}|| * Im z over lines Im z in [hbar^K, im_max] above the box."""
    best = 0.0
    for y in np.geomspace(hbar**K, im_max, n_im):
        for x in np.linspace(box.l, box.r, n_re):
            try:
                best = max(best, resolvent_norm(op, complex(x, y)) * y)
            except SolverError:
                return np.inf
    return float(best)


# --- reference models ---------------------------------------------------------


def barrier_model(hbar: float = 0.1, height: float = 1.1, R1: float = 1.4,
                  R0: float = 2.1, eta: float = 7.6) -> ModelSpec:
    """Two scalar bumps at +-0.75 trapping shape resonances between them.

    ``R1`` below the potential support radius 1.25 gives the intersecting regime.
    """
    V = (make_bump_potential(0.75, 0.5, height * np.eye(2))
         + make_bump_potential(-0.75, 0.5, height * np.eye(2)))
    return ModelSpec(PhysParams(hbar), V, make_cap(R1, 2.0, 1.0), make_scaling_g(R0, eta),
                     taus=(0.15, 0.25))


def em_model(hbar: float = 0.1) -> ModelSpec:
    """Electric bump plus a sigma_1 (vector-potential) bump; used for flows and transport."""
    V = make_bump_potential(0.0, 2.0, pauli_coeff(0.5)) + make_bump_potential(0.5, 1.5, pauli_coeff(0, -0.4))
    return ModelSpec(PhysParams(hbar), V)


def deep_well_model(hbar: float = 0.025, depth: float = 1.2, barrier: float = 1.8) -> ModelSpec:
    """Central well flanked by wide barriers; holds gap bound states and very narrow resonances.

    Keep ``barrier`` below 2 mc^2, otherwise well states leak into hole states
    of the barriers (Klein tunnelling).
    """
    V = (make_bump_potential(0.0, 0.5, -depth * np.eye(2))
         + make_bump_potential(1.1, 0.6, barrier * np.eye(2))
         + make_bump_potential(-1.1, 0.6, barrier * np.eye(2)))
    return ModelSpec(PhysParams(hbar), V, make_cap(1.8, 2.3, 1.0), make_scaling_g(2.5, 9.1),
                     taus=(0.15, 0.25))


def free_model(hbar: float = 0.1) -> ModelSpec:
    return ModelSpec(PhysParams(hbar), zero_potential(), make_cap(1.4, 2.0, 1.0),
                     make_scaling_g(2.1, 7.6), taus=(0.15, 0.25))
