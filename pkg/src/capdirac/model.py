"""Physical inputs: parameters, potentials, absorbing potentials, scaling functions."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Optional

import numpy as np

from .algebra import pauli_matrices

__all__ = [
    "ModelError",
    "PhysParams",
    "smoothstep",
    "smoothstep_integral",
    "bump",
    "MatrixPotential",
    "make_bump_potential",
    "zero_potential",
    "pauli_coeff",
    "CapSpec",
    "CapReport",
    "make_cap",
    "validate_cap",
    "ScalingFn",
    "make_scaling_g",
    "DistortionParam",
    "phi_theta",
    "jacobian_theta",
    "SpectralBox",
    "ModelSpec",
]

SQRT2 = np.sqrt(2.0)
G_MARGIN = 0.05


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class PhysParams:
    hbar: float
    mass: float = 1.0
    c: float = 1.0

    def __post_init__(self):
        if not self.hbar > 0 or not self.c > 0:
            raise ModelError("hbar and c must be strictly positive")
        if self.mass < 0:
            raise ModelError("mass must be nonnegative")

    @property
    def rest_energy(self) -> float:
        return self.mass * self.c**2


# --- smooth transitions -----------------------------------------------------

def _f(t, n):
    t = np.asarray(t, dtype=float)
    pos = t > 0
    ts = np.where(pos, t, 1.0)
    e = np.where(pos, np.exp(-1.0 / ts), 0.0)
    if n == 0:
        return e
    if n == 1:
        return e / ts**2
    return e * (1.0 / ts**4 - 2.0 / ts**3)


def smoothstep(t, n: int = 0):
    """C-infinity step s(t) = f(t)/(f(t)+f(1-t)), f(t)=exp(-1/t); n-th derivative for n<=2.

    s = 0 for t <= 0, s = 1 for t >= 1 and s(t) + s(1-t) = 1.
    """
    u0, u1, u2 = _f(t, 0), _f(t, 1), _f(t, 2)
    t1 = 1.0 - np.asarray(t, dtype=float)
    v0, v1, v2 = _f(t1, 0), -_f(t1, 1), _f(t1, 2)
    S, S1, S2 = u0 + v0, u1 + v1, u2 + v2
    if n == 0:
        return u0 / S
    num1 = u1 * S - u0 * S1
    if n == 1:
        return num1 / S**2
    if n == 2:
        return (u2 * S - u0 * S2) / S**2 - 2.0 * S1 * num1 / S**3
    raise ValueError("only derivatives up to order 2 are available")


_GL_X, _GL_W = np.polynomial.legendre.leggauss(48)


def smoothstep_integral(v):
    """Antiderivative S(v) = int_0^v s, using S(v) = v - 1/2 + S(1-v) above 1/2."""
    v = np.asarray(v, dtype=float)
    vv = np.clip(v, 0.0, 1.0)
    hi = vv > 0.5
    w = np.where(hi, 1.0 - vv, vv)
    nodes = 0.5 * w[..., None] * (_GL_X + 1.0)
    val = 0.5 * w * np.sum(_GL_W * smoothstep(nodes), axis=-1)
    return np.where(hi, vv - 0.5 + val, val) + np.maximum(v - 1.0, 0.0)


def bump(r2):
    """exp(1 - 1/(1 - r^2)) inside the unit ball, 0 outside; takes r^2."""
    r2 = np.asarray(r2, dtype=float)
    inside = r2 < 1.0
    safe = np.where(inside, r2, 0.0)
    return np.where(inside, np.exp(1.0 - 1.0 / (1.0 - safe)), 0.0)


# --- potentials -------------------------------------------------------------

@dataclass(frozen=True)
class _BumpTerm:
    center: float
    radius: float
    coeff: np.ndarray


@dataclass(frozen=True)
class MatrixPotential:
    """Sum of matrix-valued bumps, V(x) = sum coeff_k * bump((x - c_k)/r_k)."""

    terms: tuple
    spinor_dim: int = 2
    smoothness: str = "bump"

    @property
    def support_radius(self) -> float:
        if not self.terms:
            return 0.0
        return max(abs(t.center) + t.radius for t in self.terms)

    @property
    def is_zero(self) -> bool:
        return all(not np.any(t.coeff) for t in self.terms)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape + (self.spinor_dim, self.spinor_dim), dtype=complex)
        for t in self.terms:
            out += bump(((x - t.center) / t.radius) ** 2)[..., None, None] * t.coeff
        return out

    def derivative(self, x):
        """Analytic dV/dx."""
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape + (self.spinor_dim, self.spinor_dim), dtype=complex)
        for t in self.terms:
            u = (x - t.center) / t.radius
            r2 = u * u
            inside = r2 < 1.0
            den = np.where(inside, (1.0 - r2) ** 2, 1.0)
            d = np.where(inside, -2.0 * u / (t.radius * den), 0.0) * bump(r2)
            out += d[..., None, None] * t.coeff
        return out

    def __add__(self, other: "MatrixPotential") -> "MatrixPotential":
        if other.spinor_dim != self.spinor_dim:
            raise ModelError("spinor dimensions differ")
        return MatrixPotential(self.terms + other.terms, self.spinor_dim)

    def pauli_components(self):
        """For 2x2 potentials: per-term real coefficients of (I, s1, s2, s3)."""
        if self.spinor_dim != 2:
            raise ModelError("Pauli decomposition needs 2-component potentials")
        s = (np.eye(2),) + pauli_matrices()
        return [tuple(float(np.real(np.trace(m @ t.coeff)) / 2) for m in s) for t in self.terms]

    @cached_property
    def _em(self) -> bool:
        return self.spinor_dim == 2 and all(c[2] == 0 and c[3] == 0 for c in self.pauli_components())

    def is_electromagnetic(self) -> bool:
        """True when V = phi*I + a*sigma_1 (the 1D electromagnetic form)."""
        return self._em

    def hermiticity_defect(self, x) -> float:
        v = self(x)
        return float(np.max(np.abs(v - np.conj(np.swapaxes(v, -1, -2))), initial=0.0))

    def to_record(self):
        return [[t.center, t.radius, *c] for t, c in zip(self.terms, self.pauli_components())]


def make_bump_potential(center, radius, coeff) -> MatrixPotential:
    """One bump of peak matrix ``coeff`` supported in |x - center| < radius."""
    coeff = np.atleast_2d(np.asarray(coeff, dtype=complex))
    if not radius > 0:
        raise ModelError("radius must be positive")
    if coeff.shape[0] != coeff.shape[1]:
        raise ModelError("coefficient must be square")
    if np.max(np.abs(coeff - coeff.conj().T)) > 1e-14:
        raise ModelError("coefficient matrix is not Hermitian")
    return MatrixPotential((_BumpTerm(float(center), float(radius), coeff),), coeff.shape[0])


def zero_potential(spinor_dim: int = 2) -> MatrixPotential:
    return MatrixPotential((), spinor_dim)


def pauli_coeff(c0=0.0, c1=0.0, c2=0.0, c3=0.0):
    s1, s2, s3 = pauli_matrices()
    return c0 * np.eye(2) + c1 * s1 + c2 * s2 + c3 * s3


# --- absorbing potential ----------------------------------------------------

@dataclass(frozen=True)
class CapSpec:
    """W(x) = (1 + i*imag_ratio) * delta0 * s((|x| - R1)/(R2 - R1)) unless ``evaluator`` is given."""

    R1: float
    R2: float
    delta0: float
    imag_ratio: float = 0.0
    dom_const: float = 1.0
    evaluator: Optional[Callable] = field(default=None, compare=False, repr=False)

    def __call__(self, x):
        if self.evaluator is not None:
            return np.asarray(self.evaluator(np.asarray(x, dtype=float)), dtype=complex)
        x = np.asarray(x, dtype=float)
        ramp = smoothstep((np.abs(x) - self.R1) / (self.R2 - self.R1))
        return (1.0 + 1j * self.imag_ratio) * self.delta0 * ramp

    def scaled(self, factor: float) -> "CapSpec":
        return replace(self, delta0=self.delta0 * factor)


def make_cap(R1, R2, delta0, imag_ratio=0.0, dom_const=None) -> CapSpec:
    if not 0 <= R1 < R2:
        raise ModelError("need 0 <= R1 < R2")
    if not delta0 > 0:
        raise ModelError("delta0 must be positive")
    if dom_const is None:
        dom_const = max(1.0, abs(imag_ratio) * np.sqrt(delta0))
    return CapSpec(float(R1), float(R2), float(delta0), float(imag_ratio), float(dom_const))


@dataclass
class CapReport:
    violations: dict
    measured_dom_const: float
    passed: bool


def validate_cap(spec: CapSpec, sample_count: int = 10_000, tol: float = 1e-12) -> CapReport:
    """Check positivity, support, floor and domination of W on a uniform sample grid."""
    if sample_count < 1000:
        raise ModelError("need at least 1000 samples")
    xmax = 2.0 * spec.R2 + 1.0
    x = np.linspace(-xmax, xmax, sample_count)
    w = spec(x)
    re, im = w.real, w.imag
    ax = np.abs(x)
    v = {
        "nonnegative": float(max(0.0, -re.min())),
        "support": float(np.max(np.abs(w[ax < spec.R1]), initial=0.0)),
        "floor": float(max(0.0, np.max(spec.delta0 - re[ax > spec.R2], initial=-np.inf))),
    }
    pos = re > 0
    ratio = np.abs(im[pos]) / np.sqrt(re[pos])
    measured = float(np.max(ratio, initial=0.0))
    zero_re = ~pos
    v["domination"] = float(max(0.0, measured - spec.dom_const,
                                np.max(np.abs(im[zero_re]), initial=0.0)))
    passed = all(val <= tol for val in v.values())
    return CapReport(v, measured, passed)


# --- scaling function -------------------------------------------------------

@dataclass(frozen=True)
class ScalingFn:
    """Odd scaling function g = sign(x) h(|x|), zero on |x| <= R0, identity past R0 + eta.

    h' is a smooth plateau: it rises over a fraction ``rise`` of the transition,
    stays at 1 + kappa, then relaxes to 1 over a fraction ``fall``.  Writing
    g(x) = x s(|x|) gives s = h(r)/r, a smooth 0 -> 1 transition.
    """

    R0: float
    eta: float
    rise: float = 0.1
    fall: float = 0.1
    requested_eta: float = None
    widenings: int = 0

    @property
    def kappa(self) -> float:
        return (self.R0 / self.eta + self.rise / 2) / (1.0 - self.rise / 2 - self.fall / 2)

    @property
    def outer(self) -> float:
        return self.R0 + self.eta

    def _u(self, x):
        return (np.abs(np.asarray(x, dtype=float)) - self.R0) / self.eta

    def _q(self, u, n=0):
        a, d, k = self.rise, self.fall, self.kappa
        up, down = u / a, (u - 1.0 + d) / d
        if n == 0:
            return (1 + k) * smoothstep(up) - k * smoothstep(down)
        return (1 + k) * smoothstep(up, 1) / a - k * smoothstep(down, 1) / d

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        u = self._u(x)
        a, d, k = self.rise, self.fall, self.kappa
        Q = (1 + k) * a * smoothstep_integral(u / a) - k * d * smoothstep_integral((u - 1 + d) / d)
        return np.sign(x) * self.eta * Q

    def d1(self, x):
        return self._q(self._u(x))

    def d2(self, x):
        x = np.asarray(x, dtype=float)
        return np.sign(x) * self._q(self._u(x), 1) / self.eta

    def sup_derivative(self, samples: int = 20_001) -> float:
        r = np.linspace(self.R0, self.outer, samples)
        return float(np.max(np.abs(self.d1(r))))

    @property
    def margin(self) -> float:
        return SQRT2 - self.sup_derivative()

    def jacobian_matrix_norm(self, r):
        """Operator norm of Dg for the radial 3D extension: max(|h'|, |h/r|)."""
        r = np.asarray(r, dtype=float)
        hr = np.where(r > 0, self(r) / np.where(r > 0, r, 1.0), 0.0)
        return np.maximum(np.abs(self.d1(r)), np.abs(hr))


def make_scaling_g(R0: float, eta: float, rise: float = 0.1, fall: float = 0.1,
                   max_widenings: int = 10, factor: float = 1.25) -> ScalingFn:
    """Build g and widen eta until sup|Dg| < sqrt(2) - 0.05."""
    if not (R0 > 0 and eta > 0):
        raise ModelError("R0 and eta must be positive")
    if not (0 < rise and 0 < fall and rise + fall <= 1):
        raise ModelError("rise and fall fractions must be positive with sum <= 1")
    e = float(eta)
    for k in range(max_widenings + 1):
        g = ScalingFn(float(R0), e, rise, fall, float(eta), k)
        if g.margin >= G_MARGIN:
            return g
        e *= factor
    raise ModelError(f"cannot satisfy sup|g'| < sqrt(2) with R0={R0} after {max_widenings} widenings")


@dataclass(frozen=True)
class DistortionParam:
    theta: complex
    eps: float = 0.5

    def __post_init__(self):
        if not 0 < self.eps < 1:
            raise ModelError("eps must lie in (0, 1)")
        th = complex(self.theta)
        if th.imag < 0:
            raise ModelError("distortion parameter needs Im theta >= 0")
        if abs(th) >= self.r_eps:
            raise ModelError(f"|theta| = {abs(th):.4g} outside admissible disk r_eps = {self.r_eps:.4g}")

    @property
    def r_eps(self) -> float:
        return self.eps / np.sqrt(1 + self.eps**2)


def phi_theta(x, dp: DistortionParam, g: ScalingFn):
    x = np.asarray(x, dtype=float)
    return x + complex(dp.theta) * g(x)


def jacobian_theta(x, dp: DistortionParam, g: ScalingFn, dim: int = 1):
    """det(I + theta Dg). For dim=3, ``x`` has shape (..., 3) and g acts radially."""
    th = complex(dp.theta)
    if dim == 1:
        return 1.0 + th * g.d1(x)
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    hr = np.where(r > 0, g(r) / np.where(r > 0, r, 1.0), 0.0)
    return (1.0 + th * g.d1(r)) * (1.0 + th * hr) ** 2


@dataclass(frozen=True)
class SpectralBox:
    l: float
    r: float
    b: float
    t: float

    def __post_init__(self):
        if self.l > self.r or self.b > self.t:
            raise ModelError("box needs l <= r and b <= t")

    def contains(self, z, pad: float = 0.0):
        z = np.asarray(z)
        return ((z.real >= self.l - pad) & (z.real <= self.r + pad)
                & (z.imag >= self.b - pad) & (z.imag <= self.t + pad))

    def check_resonance_box(self, rest_energy: float):
        if not (self.l > rest_energy and self.b < 0 < self.t):
            raise ModelError("resonance boxes need l > mc^2 and b < 0 < t")


# --- full model -------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    """All physical inputs. ``thetas`` holds the imaginary parts tau of theta = i tau."""

    params: PhysParams
    potential: MatrixPotential
    cap: Optional[CapSpec] = None
    scaling: Optional[ScalingFn] = None
    taus: tuple = (0.15, 0.2, 0.25)
    eps: float = 0.5

    @property
    def R0prime(self) -> float:
        return self.potential.support_radius

    @property
    def regime(self) -> str:
        if self.cap is None:
            return "none"
        return "non-intersecting" if self.R0prime < self.cap.R1 else "intersecting"

    def distortions(self):
        return [DistortionParam(1j * t, self.eps) for t in self.taus]

    def with_hbar(self, hbar: float) -> "ModelSpec":
        return replace(self, params=replace(self.params, hbar=float(hbar)))

    def with_cap(self, cap) -> "ModelSpec":
        return replace(self, cap=cap)

    def validate(self):
        """Raise ModelError on inconsistent radii or invalid components."""
        x = np.linspace(-self.R0prime - 1, self.R0prime + 1, 2001)
        if self.potential.hermiticity_defect(x) > 1e-12:
            raise ModelError("potential is not Hermitian")
        self.distortions()
        if self.cap is not None:
            rep = validate_cap(self.cap)
            if not rep.passed:
                raise ModelError(f"CAP assumptions violated: {rep.violations}")
        if self.scaling is not None:
            if self.scaling.R0 < self.R0prime:
                raise ModelError("scaling function is not frozen on the potential support")
            if self.cap is not None and self.regime == "non-intersecting" and self.scaling.R0 < self.cap.R2:
                raise ModelError("scaling freeze radius must exceed R2")
        return self

    def fingerprint(self) -> str:
        rec = {
            "params": [self.params.hbar, self.params.mass, self.params.c],
            "potential": self.potential.to_record(),
            "cap": None if self.cap is None else [self.cap.R1, self.cap.R2, self.cap.delta0, self.cap.imag_ratio],
            "scaling": None if self.scaling is None else [self.scaling.R0, self.scaling.eta],
            "taus": list(self.taus),
            "eps": self.eps,
        }
        return hashlib.sha256(json.dumps(rec, sort_keys=True).encode()).hexdigest()[:16]
