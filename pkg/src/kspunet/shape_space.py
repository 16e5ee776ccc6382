"""Kendall pre-shape geometry for planar landmark configurations.

Landmark configurations are stored as ``(m, k)`` arrays: one row per
coordinate axis, one column per landmark. Everything here works in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DegenerateConfiguration, DimensionMismatch

DEGENERATE_NORM = 1e-9


@dataclass(frozen=True)
class Rotation2:
    """Planar rotation stored by its angle in radians."""

    angle: float = 0.0

    def __post_init__(self):
        # normalize into (-pi, pi]
        a = float(np.arctan2(np.sin(self.angle), np.cos(self.angle)))
        if a == -np.pi:
            a = np.pi
        object.__setattr__(self, "angle", a)

    @property
    def matrix(self) -> np.ndarray:
        c, s = np.cos(self.angle), np.sin(self.angle)
        return np.array([[c, -s], [s, c]])

    def inverse(self) -> Rotation2:
        return Rotation2(-self.angle)

    def compose(self, other: Rotation2) -> Rotation2:
        """Rotation equal to applying ``other`` first, then ``self``."""
        return Rotation2(self.angle + other.angle)


def _as_config(points) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionMismatch(f"expected an (m, k) matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("landmark configuration contains non-finite entries")
    return x


def project_to_preshape(config) -> np.ndarray:
    """Center the landmarks at the origin and scale to unit Frobenius norm.

    Raises:
        DegenerateConfiguration: if the centered configuration has norm below 1e-9.
    """
    x = _as_config(config)
    centered = x - x.mean(axis=1, keepdims=True)
    norm = np.linalg.norm(centered)
    if norm < DEGENERATE_NORM:
        raise DegenerateConfiguration(f"centered landmark norm {norm:.3e} is degenerate")
    return centered / norm


def is_preshape(x, tol: float = 1e-12) -> bool:
    x = np.asarray(x, dtype=np.float64)
    return bool(np.all(np.abs(x.sum(axis=1)) <= tol) and abs(np.linalg.norm(x) - 1.0) <= tol)


@lru_cache(maxsize=64)
def _helmert(k: int) -> np.ndarray:
    h = np.zeros((k - 1, k))
    for j in range(1, k):
        c = 1.0 / np.sqrt(j * (j + 1))
        h[j - 1, :j] = c
        h[j - 1, j] = -j * c
    h.setflags(write=False)
    return h


def helmert_submatrix(k: int) -> np.ndarray:
    """Return the ``(k-1, k)`` Helmert sub-matrix.

    Row ``j`` (1-indexed) holds ``j`` copies of ``1/sqrt(j(j+1))`` followed by
    ``-j/sqrt(j(j+1))`` and zeros. Rows are orthonormal and sum to zero.
    """
    if k < 2:
        raise ValueError(f"Helmert sub-matrix needs k >= 2, got {k}")
    return _helmert(int(k)).copy()


def psi(x) -> np.ndarray:
    """Map a pre-shape onto the unit sphere in R^{(k-1)m}.

    The Helmert sub-matrix acts on the landmark index; the ``(m, k-1)`` result
    is flattened row-major.
    """
    x = _as_config(x)
    y = (x @ _helmert(x.shape[1]).T).ravel()
    return y / np.linalg.norm(y)


def psi_inverse(p, k: int, m: int = 2) -> np.ndarray:
    """Inverse of :func:`psi` on the centered subspace."""
    p = np.asarray(p, dtype=np.float64).ravel()
    if p.size != (k - 1) * m:
        raise DimensionMismatch(f"expected a vector of length {(k - 1) * m}, got {p.size}")
    x = p.reshape(m, k - 1) @ _helmert(k)
    return x / np.linalg.norm(x)


def rotate(x, rotation: Rotation2) -> np.ndarray:
    """Apply ``rotation`` to every landmark of a planar configuration."""
    x = _as_config(x)
    if x.shape[0] != 2:
        raise DimensionMismatch("rotations are only defined for m = 2")
    return rotation.matrix @ x


def standardize_orientation(m_shape, rotation: Rotation2) -> np.ndarray:
    """Undo the orientation ``rotation`` of a pre-shape: returns R^{-1} M."""
    return rotate(m_shape, rotation.inverse())


def procrustes_distance(a, b) -> float:
    """Geodesic distance between the shapes of two planar pre-shapes.

    The optimal rotation has a closed form in the plane: treating landmarks as
    complex numbers, the best alignment score is ``|<b, a>|`` with phase
    ``arg <b, a>``. The angle is recovered from the chord between ``a`` and the
    aligned ``b`` (arccos of the score loses half the digits near zero).
    """
    a = _as_config(a)
    b = _as_config(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[0] != 2:
        raise DimensionMismatch("procrustes_distance supports m = 2 only")
    za = a[0] + 1j * a[1]
    zb = b[0] + 1j * b[1]
    inner = np.vdot(zb, za)
    phase = inner / abs(inner) if abs(inner) > 0 else 1.0
    chord = np.linalg.norm(za - phase * zb)
    return float(2.0 * np.arcsin(np.clip(chord / 2.0, 0.0, 1.0)))


def regular_polygon(k: int) -> np.ndarray:
    """Pre-shape of a regular k-gon; used as a fallback mean shape."""
    t = 2 * np.pi * np.arange(k) / k
    return project_to_preshape(np.stack([np.cos(t), np.sin(t)]))
