"""Configuration-space geometry for flat tori and the round 2-sphere.

Supported spaces are the flat d-torus (d = 1, 2, 3) with coordinates taken
mod 1, and the unit sphere S^2 embedded in R^3. Torus geometry works through
shortest-lift displacements; sphere points are kept on the sphere by
retraction and all tangent bookkeeping happens in ambient coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TORUS = "torus"
SPHERE2 = "sphere2"

# Per-component displacement beyond which the choice of lift is ambiguous.
WINDING_GUARD = 0.4

__all__ = [
    "ConfigSpace",
    "torus",
    "sphere2",
    "LoopTooCoarse",
    "RetractionBreakdown",
    "torus_wrap",
    "torus_displacement",
    "sphere_retract",
    "sphere_project_tangent",
    "sphere_tangent_basis",
    "normalize_rows",
    "winding_vector",
]


class LoopTooCoarse(ValueError):
    """Consecutive loop points are too far apart for an unambiguous lift."""


class RetractionBreakdown(ValueError):
    """A retraction step annihilated the base point."""


@dataclass(frozen=True)
class ConfigSpace:
    """Flat torus (points in [0,1)^dim) or the unit 2-sphere (ambient R^3)."""

    kind: str
    dim: int

    def __post_init__(self):
        if self.kind == TORUS:
            if self.dim not in (1, 2, 3):
                raise ValueError("torus dimension must be 1, 2 or 3")
        elif self.kind == SPHERE2:
            if self.dim != 3:
                raise ValueError("sphere2 has ambient dimension 3")
        else:
            raise ValueError(f"unknown configuration space kind {self.kind!r}")

    @property
    def is_torus(self) -> bool:
        return self.kind == TORUS

    @property
    def is_sphere(self) -> bool:
        return self.kind == SPHERE2


def torus(dim: int) -> ConfigSpace:
    return ConfigSpace(TORUS, dim)


def sphere2() -> ConfigSpace:
    return ConfigSpace(SPHERE2, 3)


def torus_wrap(q):
    """Map torus coordinates to the fundamental domain [0,1)^d."""
    q = np.asarray(q, dtype=float)
    return q - np.floor(q)


def torus_displacement(q0, q1):
    """Shortest displacement from q0 to q1 on the torus, componentwise.

    Each component lies in [-1/2, 1/2); the antipodal tie at distance
    exactly 1/2 resolves to the -1/2 representative, so the map is a
    total function.
    """
    d = np.asarray(q1, dtype=float) - np.asarray(q0, dtype=float)
    return d - np.floor(d + 0.5)


def normalize_rows(x):
    """Scale each row of x to unit Euclidean norm."""
    x = np.asarray(x, dtype=float)
    n = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    if np.any(n < 1e-12):
        raise RetractionBreakdown("retraction breakdown: vanishing point norm")
    return x / n


def sphere_retract(q, step):
    """Move q along the tangential part of step and renormalize.

    The step is first projected to the tangent space at q, so a purely
    radial step is a no-op. Raises RetractionBreakdown when the shifted
    point has norm below 1e-12 and no direction survives.
    """
    q = np.asarray(q, dtype=float)
    step = np.asarray(step, dtype=float)
    tangent = step - np.sum(step * q, axis=-1, keepdims=True) * q
    s = q + tangent
    n = np.sqrt(np.sum(s * s, axis=-1, keepdims=True))
    if np.any(n < 1e-12):
        raise RetractionBreakdown("retraction breakdown: step annihilated the base point")
    return s / n


def sphere_project_tangent(q, vec):
    """Project ambient vectors onto the tangent planes of unit points q."""
    q = np.asarray(q, dtype=float)
    vec = np.asarray(vec, dtype=float)
    return vec - np.sum(vec * q, axis=-1, keepdims=True) * q


def sphere_tangent_basis(q):
    """Deterministic orthonormal tangent basis at a unit point q, shape (3, 2)."""
    q = np.asarray(q, dtype=float)
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(q)))] = 1.0
    t1 = np.cross(axis, q)
    t1 = t1 / np.linalg.norm(t1)
    t2 = np.cross(q, t1)
    return np.stack([t1, t2], axis=1)


def winding_vector(points, guard: float = WINDING_GUARD):
    """Integer homotopy class of a closed torus polyline.

    Sums the shortest-lift displacements around the loop; for an admissible
    loop the sum is an exact lattice vector. Any displacement component with
    magnitude >= guard makes the lift ambiguous and raises LoopTooCoarse.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    disp = torus_displacement(pts, np.roll(pts, -1, axis=0))
    if np.any(np.abs(disp) >= guard):
        raise LoopTooCoarse("loop too coarse: displacement component >= %g" % guard)
    total = disp.sum(axis=0)
    w = np.rint(total).astype(int)
    if np.any(np.abs(total - w) > 1e-6):
        # Closed loops sum to a lattice vector up to rounding; anything else
        # means the input was not a loop of torus points.
        raise LoopTooCoarse("loop too coarse: winding sum %r is not integral" % (total,))
    return tuple(int(c) for c in w)
