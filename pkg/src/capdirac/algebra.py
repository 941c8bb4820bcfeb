"""Pauli and Dirac matrices with Clifford-relation checks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DiracRep",
    "AlgebraError",
    "pauli_matrices",
    "standard_representation",
    "clifford_defect",
]


class AlgebraError(ValueError):
    pass


def pauli_matrices():
    """Return (sigma_1, sigma_2, sigma_3) as complex 2x2 arrays."""
    s1 = np.array([[0, 1], [1, 0]], dtype=complex)
    s2 = np.array([[0, -1j], [1j, 0]], dtype=complex)
    s3 = np.array([[1, 0], [0, -1]], dtype=complex)
    return s1, s2, s3


@dataclass(frozen=True)
class DiracRep:
    """Alpha/beta family of a Dirac operator in ``dim`` space dimensions."""

    dim: int
    alphas: tuple
    beta: np.ndarray = field(repr=False)

    @property
    def spinor_dim(self) -> int:
        return self.beta.shape[0]

    def symbol(self, xi, mass=1.0, c=1.0):
        """Free symbol c*alpha.xi + beta*m*c^2 for xi of shape (..., dim)."""
        xi = np.asarray(xi, dtype=float)
        if self.dim == 1 and (xi.ndim == 0 or xi.shape[-1] != 1):
            xi = xi[..., None]
        out = np.zeros(xi.shape[:-1] + self.beta.shape, dtype=complex)
        for k, a in enumerate(self.alphas):
            out += c * xi[..., k, None, None] * a
        return out + mass * c**2 * self.beta

    def conjugated(self, u):
        """Return the family u A u^dagger (u unitary)."""
        uh = u.conj().T
        return DiracRep(self.dim, tuple(u @ a @ uh for a in self.alphas), u @ self.beta @ uh)


def standard_representation(dim: int) -> DiracRep:
    s = pauli_matrices()
    if dim == 1:
        return DiracRep(1, (s[0].copy(),), s[2].copy())
    if dim == 3:
        z = np.zeros((2, 2), dtype=complex)
        i2 = np.eye(2, dtype=complex)
        alphas = tuple(np.block([[z, si], [si, z]]) for si in s)
        beta = np.block([[i2, z], [z, -i2]])
        return DiracRep(3, alphas, beta)
    raise AlgebraError(f"unsupported dimension {dim}; expected 1 or 3")


def clifford_defect(rep: DiracRep) -> float:
    """Largest operator-norm violation of the Dirac anticommutation relations."""
    mats = list(rep.alphas) + [rep.beta]
    n = rep.beta.shape
    if any(m.shape != n or m.ndim != 2 or n[0] != n[1] for m in mats):
        raise AlgebraError("matrices in the representation have inconsistent shapes")
    eye = np.eye(n[0])
    worst = 0.0
    for j, a in enumerate(mats):
        worst = max(worst, np.linalg.norm(a - a.conj().T, 2))
        for k in range(j, len(mats)):
            b = mats[k]
            target = 2 * eye if j == k else 0 * eye
            worst = max(worst, np.linalg.norm(a @ b + b @ a - target, 2))
    return float(worst)
