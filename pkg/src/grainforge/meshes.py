"""Procedural triangle meshes for the built-in scenarios.

All meshes are generated in owner-local coordinates and triangulated
explicitly; scenario files scale and place them.
"""

from __future__ import annotations

import numpy as np

from .core import ValidationError


def _quad_grid(points_fn, nu: int, nv: int) -> np.ndarray:
    """Triangulate an nu x nv quad grid over the parametric patch
    points_fn(u, v) with u, v in [0, 1]; 2 * nu * nv facets."""
    tris = []
    for i in range(nu):
        for j in range(nv):
            p00 = points_fn(i / nu, j / nv)
            p10 = points_fn((i + 1) / nu, j / nv)
            p01 = points_fn(i / nu, (j + 1) / nv)
            p11 = points_fn((i + 1) / nu, (j + 1) / nv)
            tris.append((p00, p10, p11))
            tris.append((p00, p11, p01))
    return np.asarray(tris, dtype=np.float64)


def mixer_blades(nu: int = 241, nv: int = 3) -> np.ndarray:
    """Two crossed vertical paddles spanning the unit box: x/y in [-0.9, 0.9],
    z in [-0.5, 0.5].  Defaults produce 4 * 241 * 3 = 2892 facets."""
    def blade_x(u, v):
        return (-0.9 + 1.8 * u, 0.0, -0.5 + v)

    def blade_y(u, v):
        return (0.0, -0.9 + 1.8 * u, -0.5 + v)

    return np.concatenate([_quad_grid(blade_x, nu, nv), _quad_grid(blade_y, nu, nv)])


def rectangle(half_w: float, half_d: float, z: float = 0.0) -> np.ndarray:
    """Two facets covering [-half_w, half_w] x [-half_d, half_d] at height z."""
    def patch(u, v):
        return (-half_w + 2 * half_w * u, -half_d + 2 * half_d * v, z)

    return _quad_grid(patch, 1, 1)


def plate_with_slot(half_w: float, half_d: float, slot_half: float,
                    z: float = 0.0) -> np.ndarray:
    """A floor plate with a full-depth slot |x| < slot_half cut out (the
    hopper orifice).  slot_half <= 0 gives a closed plate."""
    if slot_half <= 0.0:
        return rectangle(half_w, half_d, z)
    if slot_half >= half_w:
        raise ValidationError("slot wider than the plate")

    def left(u, v):
        return (-half_w + (half_w - slot_half) * u, -half_d + 2 * half_d * v, z)

    def right(u, v):
        return (slot_half + (half_w - slot_half) * u, -half_d + 2 * half_d * v, z)

    return np.concatenate([_quad_grid(left, 1, 1), _quad_grid(right, 1, 1)])


def builtin(name: str) -> np.ndarray:
    """Named meshes usable from scenario files as `builtin:<name>`."""
    if name == "mixer":
        return mixer_blades()
    if name == "paddle":
        return mixer_blades(nu=6, nv=1)
    raise ValidationError(f"unknown builtin mesh {name!r}")
