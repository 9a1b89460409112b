"""Domain model: materials, clump templates, owners, geometries, families,
and the compressed-coordinate state store.

Owners carry mass properties (mass, principal MOI, pose, velocities);
geometries are their contactable pieces (component spheres, mesh facets,
analytic planes/cylinders) and carry the material.  Owner positions are
stored compressed: a packed voxel index plus three 16-bit sub-voxel
coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .types import (
    BOUNDARY_MASS,
    FAMILY,
    INDEX,
    NUM_FAMILIES,
    REAL,
    STATE_REAL,
    SUBVOXELS_PER_EDGE,
    VOXEL_BITS_PER_AXIS,
    VOXELS_PER_AXIS,
)


class ValidationError(ValueError):
    """A user-supplied value violates a documented invariant."""


class ConfigurationError(RuntimeError):
    """The simulation is assembled or used inconsistently."""


class OutOfDomainError(ValueError):
    """A position falls outside the simulation domain."""


# Geometry kinds (values shared with the compiled kernels).
GEOM_SPHERE = 0
GEOM_TRIANGLE = 1
GEOM_PLANE = 2
GEOM_CYLINDER = 3

# Owner kinds.
OWNER_CLUMP = 0
OWNER_MESH = 1
OWNER_ANALYTIC = 2

# Fixed-width per-geometry parameter block (local frame):
#   sphere:   [ox, oy, oz, radius]
#   triangle: [v0x..v0z, v1x..v1z, v2x..v2z]
#   plane:    [px, py, pz, nx, ny, nz]          n = outward (push) normal
#   cylinder: [px, py, pz, ax, ay, az, radius, facing]   facing +1 = solid
#             column (pushes away from axis), -1 = container wall (pushes
#             toward the axis)
GEOM_PARAMS = 9

_RANGE_CHECKS = {
    "E": lambda v: v > 0.0,
    "nu": lambda v: 0.0 <= v < 0.5,
    "CoR": lambda v: 0.0 <= v <= 1.0,
    "mu": lambda v: v >= 0.0,
    "Crr": lambda v: v >= 0.0,
}


class MaterialTable:
    """Named scalar properties per material plus symmetric pairwise overrides.

    When a pairwise property (CoR, mu, Crr, or any custom name) has no
    override for a pair, the lookup falls back to min(value_A, value_B).
    E and nu are per-material quantities; force models combine them through
    the Hertzian effective-modulus formulas at force time.
    """

    def __init__(self):
        self._props: list[dict[str, float]] = []
        self._pair: dict[tuple[str, int, int], float] = {}

    def __len__(self):
        return len(self._props)

    def load_material(self, props: dict[str, float]) -> int:
        if not props:
            raise ValidationError("material properties must be non-empty")
        for name, value in props.items():
            check = _RANGE_CHECKS.get(name)
            if check is not None and not check(float(value)):
                raise ValidationError(f"{name} out of range: {value!r}")
        if len(self._props) >= 255:
            raise ValidationError("at most 255 materials supported")
        self._props.append({k: float(v) for k, v in props.items()})
        return len(self._props) - 1

    def set_pair(self, name: str, a: int, b: int, value: float) -> None:
        self._check_id(a)
        self._check_id(b)
        check = _RANGE_CHECKS.get(name)
        if check is not None and not check(float(value)):
            raise ValidationError(f"{name} out of range: {value!r}")
        lo, hi = (a, b) if a <= b else (b, a)
        self._pair[(name, lo, hi)] = float(value)

    def get(self, name: str, mid: int) -> float:
        self._check_id(mid)
        try:
            return self._props[mid][name]
        except KeyError:
            raise ConfigurationError(
                f"material {mid} does not define property {name!r}"
            ) from None

    def has(self, name: str, mid: int) -> bool:
        self._check_id(mid)
        return name in self._props[mid]

    def get_pair(self, name: str, a: int, b: int) -> float:
        lo, hi = (a, b) if a <= b else (b, a)
        override = self._pair.get((name, lo, hi))
        if override is not None:
            return override
        return min(self.get(name, a), self.get(name, b))

    def pair_matrix(self, name: str) -> np.ndarray:
        """Dense symmetric lookup table for the kernels."""
        n = len(self._props)
        out = np.zeros((n, n), dtype=np.float64)
        for a in range(n):
            for b in range(a, n):
                out[a, b] = out[b, a] = self.get_pair(name, a, b)
        return out

    def single_array(self, name: str) -> np.ndarray:
        return np.array(
            [self.get(name, m) for m in range(len(self._props))], dtype=np.float64
        )

    def _check_id(self, mid: int) -> None:
        if not 0 <= mid < len(self._props):
            raise ValidationError(f"unknown material id {mid}")


@dataclass(frozen=True)
class ClumpSphere:
    offset: np.ndarray  # local meters, shape (3,)
    radius: float
    material: int


@dataclass(frozen=True)
class ClumpTemplate:
    """Rigid composition of component spheres with aggregate mass properties."""

    mass: float
    moi: np.ndarray  # principal moments, shape (3,)
    spheres: tuple[ClumpSphere, ...]
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "moi", np.asarray(self.moi, dtype=np.float64))
        if self.mass <= 0.0:
            raise ValidationError(f"clump mass must be positive, got {self.mass}")
        if self.moi.shape != (3,) or np.any(self.moi <= 0.0):
            raise ValidationError("clump MOI components must be positive")
        if not self.spheres:
            raise ValidationError("clump template needs at least one sphere")
        for s in self.spheres:
            if s.radius <= 0.0:
                raise ValidationError(f"sphere radius must be positive, got {s.radius}")

    def scaled(self, s: float) -> "ClumpTemplate":
        """Geometric scaling: offsets/radii by s, mass by s^3, MOI by s^5."""
        if s <= 0.0:
            raise ValidationError(f"scale factor must be positive, got {s}")
        return ClumpTemplate(
            mass=self.mass * s**3,
            moi=self.moi * s**5,
            spheres=tuple(
                ClumpSphere(np.asarray(c.offset, dtype=np.float64) * s, c.radius * s, c.material)
                for c in self.spheres
            ),
            name=self.name,
        )

    @staticmethod
    def solid_sphere(radius: float, mass: float, material: int, name: str = "") -> "ClumpTemplate":
        moi = 0.4 * mass * radius * radius
        return ClumpTemplate(
            mass=mass,
            moi=np.array([moi, moi, moi]),
            spheres=(ClumpSphere(np.zeros(3), radius, material),),
            name=name,
        )


@dataclass(frozen=True)
class Domain:
    """Axis-aligned simulation box; fixes the voxel grid resolution."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float64))
        if np.any(self.hi <= self.lo):
            raise ValidationError("domain must have positive extent on every axis")

    @staticmethod
    def cube(size: float, center=(0.0, 0.0, 0.0)) -> "Domain":
        c = np.asarray(center, dtype=np.float64)
        h = 0.5 * float(size)
        return Domain(c - h, c + h)

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def voxel_edge(self) -> float:
        # One edge length for all axes, sized by the longest extent so the
        # 21-bit per-axis budget always suffices.
        return float(np.max(self.extent)) / VOXELS_PER_AXIS

    @property
    def precision(self) -> float:
        return self.voxel_edge / SUBVOXELS_PER_EDGE

    def contains(self, xyz) -> bool:
        p = np.asarray(xyz, dtype=np.float64)
        return bool(np.all(p >= self.lo) and np.all(p <= self.hi))


def encode_position(xyz, domain: Domain):
    """Pack positions into (voxel index, sub-voxel triple).

    Accepts one point or an (n, 3) array.  Raises OutOfDomainError when any
    coordinate leaves the box (the divergence watchdog path).
    """
    p = np.atleast_2d(np.asarray(xyz, dtype=np.float64))
    if np.any(p < domain.lo) or np.any(p > domain.hi):
        bad = np.argwhere((p < domain.lo) | (p > domain.hi))
        i = int(bad[0][0])
        raise OutOfDomainError(
            f"position {p[i].tolist()} outside domain "
            f"[{domain.lo.tolist()}, {domain.hi.tolist()}]"
        )
    edge = domain.voxel_edge
    t = (p - domain.lo) / edge
    cell = np.minimum(np.floor(t), VOXELS_PER_AXIS - 1).astype(np.uint64)
    sub = np.minimum(
        np.floor((t - cell) * SUBVOXELS_PER_EDGE), SUBVOXELS_PER_EDGE - 1
    ).astype(np.uint16)
    bits = np.uint64(VOXEL_BITS_PER_AXIS)
    voxel = cell[:, 0] | (cell[:, 1] << bits) | (cell[:, 2] << (bits + bits))
    if np.asarray(xyz).ndim == 1:
        return voxel[0], sub[0]
    return voxel, sub


def decode_position(voxel, sub, domain: Domain) -> np.ndarray:
    """Inverse of encode_position; error is at most voxel_edge / 2**16 per axis."""
    v = np.atleast_1d(np.asarray(voxel, dtype=np.uint64))
    s = np.atleast_2d(np.asarray(sub, dtype=np.uint16))
    bits = np.uint64(VOXEL_BITS_PER_AXIS)
    mask = np.uint64(VOXELS_PER_AXIS - 1)
    cell = np.stack(
        [v & mask, (v >> bits) & mask, (v >> (bits + bits)) & mask], axis=1
    ).astype(np.float64)
    frac = s.astype(np.float64) / SUBVOXELS_PER_EDGE
    out = domain.lo + (cell + frac) * domain.voxel_edge
    if np.asarray(voxel).ndim == 0:
        return out[0]
    return out


@dataclass
class FamilyPrescription:
    """Per-family motion override, applied at the end of every step."""

    lin_vel: tuple[str, str, str] | None = None
    ang_vel: tuple[str, str, str] | None = None
    fixed: bool = False


class FamilyTable:
    """256 per-family prescriptions plus the symmetric contact-mask matrix."""

    def __init__(self):
        self.prescriptions = [FamilyPrescription() for _ in range(NUM_FAMILIES)]
        self.mask = np.ones((NUM_FAMILIES, NUM_FAMILIES), dtype=bool)

    def set_mask(self, a: int, b: int, allow: bool) -> None:
        _check_family(a)
        _check_family(b)
        self.mask[a, b] = allow
        self.mask[b, a] = allow

    def allowed(self, a: int, b: int) -> bool:
        return bool(self.mask[a, b])

    def set_fixed(self, family: int) -> None:
        _check_family(family)
        self.prescriptions[family].fixed = True

    def set_lin_vel(self, family: int, vx: str, vy: str, vz: str) -> None:
        _check_family(family)
        self.prescriptions[family].lin_vel = (str(vx), str(vy), str(vz))

    def set_ang_vel(self, family: int, wx: str, wy: str, wz: str) -> None:
        _check_family(family)
        self.prescriptions[family].ang_vel = (str(wx), str(wy), str(wz))


def _check_family(f: int) -> None:
    if not 0 <= int(f) < NUM_FAMILIES:
        raise ValidationError(f"family tag must be in [0, 255], got {f}")


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector v by unit quaternion q = (w, x, y, z)."""
    w, x, y, z = (float(c) for c in q)
    u = np.array([x, y, z])
    v = np.asarray(v, dtype=np.float64)
    return v + 2.0 * np.cross(u, np.cross(u, v) + w * v)


def quat_rotate_inv(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    w, x, y, z = (float(c) for c in q)
    return quat_rotate(np.array([w, -x, -y, -z]), v)


def quat_rotate_many(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate rows of v (n, 3) by rows of q (n, 4), vectorized."""
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    w = q[:, :1]
    u = q[:, 1:]
    return v + 2.0 * np.cross(u, np.cross(u, v) + w * v)


class StateStore:
    """Structure-of-arrays simulation state.

    Setup-phase methods are single-threaded; after engine initialization the
    dynamics worker owns all mutation and other threads only see snapshots.
    """

    _CHUNK = 1024

    def __init__(self, domain: Domain, materials: MaterialTable):
        self.domain = domain
        self.materials = materials
        self.families = FamilyTable()
        self.templates: list[ClumpTemplate] = []

        self.n_owners = 0
        self.owner_kind = np.zeros(0, dtype=np.uint8)
        self.owner_template = np.zeros(0, dtype=np.int32)
        self.owner_family = np.zeros(0, dtype=FAMILY)
        self.voxel = np.zeros(0, dtype=np.uint64)
        self.subvoxel = np.zeros((0, 3), dtype=np.uint16)
        self.quat = np.zeros((0, 4), dtype=REAL)
        self.lin_vel = np.zeros((0, 3), dtype=STATE_REAL)
        self.ang_vel = np.zeros((0, 3), dtype=STATE_REAL)  # owner-local frame
        self.mass = np.zeros(0, dtype=STATE_REAL)
        self.moi = np.zeros((0, 3), dtype=STATE_REAL)
        # Per-step contact accumulators (global frame), written by the
        # dynamics worker, read by trackers between steps.
        self.acc_force = np.zeros((0, 3), dtype=np.float64)
        self.acc_torque = np.zeros((0, 3), dtype=np.float64)
        # External loads injected through trackers (global frame).
        self.ext_force = np.zeros((0, 3), dtype=np.float64)
        self.ext_torque = np.zeros((0, 3), dtype=np.float64)

        self.n_geoms = 0
        self.geom_owner = np.zeros(0, dtype=INDEX)
        self.geom_kind = np.zeros(0, dtype=np.uint8)
        self.geom_material = np.zeros(0, dtype=np.uint8)
        self.geom_params = np.zeros((0, GEOM_PARAMS), dtype=REAL)
        # geometry id -> index among spheres only (broadphase works on these)
        self.owner_geoms: list[list[int]] = []

        self.owner_wildcards: dict[str, np.ndarray] = {}
        self.geom_wildcards: dict[str, np.ndarray] = {}

    # -- capacity -----------------------------------------------------------

    def _grow_owners(self, extra: int) -> None:
        need = self.n_owners + extra
        cap = self.owner_kind.shape[0]
        if need <= cap:
            return
        new = max(need, cap * 2, self._CHUNK)
        for name in (
            "owner_kind", "owner_template", "owner_family", "voxel", "subvoxel",
            "quat", "lin_vel", "ang_vel", "mass", "moi",
            "acc_force", "acc_torque", "ext_force", "ext_torque",
        ):
            arr = getattr(self, name)
            shape = (new,) + arr.shape[1:]
            grown = np.zeros(shape, dtype=arr.dtype)
            grown[: arr.shape[0]] = arr
            setattr(self, name, grown)
        for name, arr in self.owner_wildcards.items():
            grown = np.zeros(new, dtype=arr.dtype)
            grown[: arr.shape[0]] = arr
            self.owner_wildcards[name] = grown

    def _grow_geoms(self, extra: int) -> None:
        need = self.n_geoms + extra
        cap = self.geom_owner.shape[0]
        if need <= cap:
            return
        new = max(need, cap * 2, self._CHUNK)
        for name in ("geom_owner", "geom_kind", "geom_material", "geom_params"):
            arr = getattr(self, name)
            shape = (new,) + arr.shape[1:]
            grown = np.zeros(shape, dtype=arr.dtype)
            grown[: arr.shape[0]] = arr
            setattr(self, name, grown)
        for name, arr in self.geom_wildcards.items():
            grown = np.zeros(new, dtype=arr.dtype)
            grown[: arr.shape[0]] = arr
            self.geom_wildcards[name] = grown

    # -- construction -------------------------------------------------------

    def register_template(self, template: ClumpTemplate) -> int:
        for s in template.spheres:
            self.materials._check_id(s.material)
        self.templates.append(template)
        return len(self.templates) - 1

    def _new_owner(self, kind: int, family: int, xyz, mass: float, moi) -> int:
        _check_family(family)
        self._grow_owners(1)
        i = self.n_owners
        vox, sub = encode_position(np.asarray(xyz, dtype=np.float64), self.domain)
        self.owner_kind[i] = kind
        self.owner_template[i] = -1
        self.owner_family[i] = family
        self.voxel[i] = vox
        self.subvoxel[i] = sub
        self.quat[i] = (1.0, 0.0, 0.0, 0.0)
        self.lin_vel[i] = 0.0
        self.ang_vel[i] = 0.0
        self.mass[i] = mass
        self.moi[i] = np.asarray(moi, dtype=np.float64)
        self.n_owners += 1
        self.owner_geoms.append([])
        return i

    def _new_geom(self, owner: int, kind: int, material: int, params) -> int:
        self._grow_geoms(1)
        g = self.n_geoms
        self.geom_owner[g] = owner
        self.geom_kind[g] = kind
        self.geom_material[g] = material
        p = np.zeros(GEOM_PARAMS, dtype=np.float64)
        p[: len(params)] = params
        self.geom_params[g] = p
        self.n_geoms += 1
        self.owner_geoms[owner].append(g)
        return g

    def add_clumps(self, template_id: int, positions) -> list[int]:
        if not 0 <= template_id < len(self.templates):
            raise ValidationError(f"unknown template id {template_id}")
        template = self.templates[template_id]
        positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        owners = []
        if positions.size == 0:
            return owners
        for xyz in positions:
            i = self._new_owner(OWNER_CLUMP, 0, xyz, template.mass, template.moi)
            self.owner_template[i] = template_id
            for s in template.spheres:
                self._new_geom(
                    i, GEOM_SPHERE, s.material,
                    [s.offset[0], s.offset[1], s.offset[2], s.radius],
                )
            owners.append(i)
        return owners

    def add_mesh(self, triangles, material: int, family: int = 0,
                 mass: float = BOUNDARY_MASS, moi=None, position=(0.0, 0.0, 0.0)) -> int:
        """One owner with a triangle geometry per facet.

        Triangle vertices are owner-local; the owner pose places the mesh in
        the world.
        """
        tris = np.asarray(triangles, dtype=np.float64)
        if tris.ndim != 3 or tris.shape[1:] != (3, 3):
            raise ValidationError("triangles must have shape (n, 3, 3)")
        areas = 0.5 * np.linalg.norm(
            np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1
        )
        bad = np.nonzero(areas <= 0.0)[0]
        if bad.size:
            raise ValidationError(f"degenerate triangle at facet index {int(bad[0])}")
        if moi is None:
            moi = (BOUNDARY_MASS, BOUNDARY_MASS, BOUNDARY_MASS)
        i = self._new_owner(OWNER_MESH, family, position, mass, moi)
        for t in tris:
            self._new_geom(i, GEOM_TRIANGLE, material, t.reshape(9))
        return i

    def add_analytic(self, components, family: int = 0,
                     mass: float = BOUNDARY_MASS, moi=None,
                     position=(0.0, 0.0, 0.0)) -> int:
        """Owner made of analytic components.

        Each component is ("plane", point, normal) or
        ("cylinder", point, axis, radius, facing) with facing +1 for a solid
        column and -1 for a container wall.
        """
        if moi is None:
            moi = (BOUNDARY_MASS, BOUNDARY_MASS, BOUNDARY_MASS)
        i = self._new_owner(OWNER_ANALYTIC, family, position, mass, moi)
        for comp in components:
            kind = comp[0]
            if kind == "plane":
                _, point, normal, material = comp
                n = np.asarray(normal, dtype=np.float64)
                norm = np.linalg.norm(n)
                if norm == 0.0:
                    raise ValidationError("plane normal must be non-zero")
                n = n / norm
                self._new_geom(i, GEOM_PLANE, material, list(point) + list(n))
            elif kind == "cylinder":
                _, point, axis, radius, facing, material = comp
                a = np.asarray(axis, dtype=np.float64)
                norm = np.linalg.norm(a)
                if norm == 0.0 or radius <= 0.0:
                    raise ValidationError("cylinder needs a non-zero axis and positive radius")
                a = a / norm
                self._new_geom(
                    i, GEOM_CYLINDER, material,
                    list(point) + list(a) + [float(radius), float(facing)],
                )
            else:
                raise ValidationError(f"unknown analytic component kind {kind!r}")
        return i

    def add_box_boundaries(self, material: int, family: int = 0) -> int:
        """Six inward-pushing planes on the domain faces."""
        lo, hi = self.domain.lo, self.domain.hi
        comps = []
        for axis in range(3):
            for side, sign in ((lo, 1.0), (hi, -1.0)):
                point = np.zeros(3)
                point[axis] = side[axis]
                normal = np.zeros(3)
                normal[axis] = sign
                comps.append(("plane", point, normal, material))
        return self.add_analytic(comps, family=family)

    # -- geometry edits (setup phase) ----------------------------------------

    def scale_mesh(self, owner: int, s) -> None:
        """Scale local facet vertices by a scalar or per-axis 3-vector."""
        if self.owner_kind[owner] != OWNER_MESH:
            raise ValidationError("scale_mesh works on mesh owners only")
        factors = np.tile(np.broadcast_to(np.asarray(s, dtype=np.float64), (3,)), 3)
        for g in self.owner_geoms[owner]:
            self.geom_params[g] = self.geom_params[g] * factors.astype(REAL)

    def set_family(self, owner: int, family: int) -> None:
        _check_family(family)
        self.owner_family[owner] = family

    # -- queries --------------------------------------------------------------

    def positions(self) -> np.ndarray:
        """Decoded owner positions, shape (n_owners, 3)."""
        return decode_position(
            self.voxel[: self.n_owners], self.subvoxel[: self.n_owners], self.domain
        )

    def set_position(self, owner: int, xyz) -> None:
        vox, sub = encode_position(np.asarray(xyz, dtype=np.float64), self.domain)
        self.voxel[owner] = vox
        self.subvoxel[owner] = sub

    def sphere_count(self) -> int:
        return int(np.sum(self.geom_kind[: self.n_geoms] == GEOM_SPHERE))

    def ensure_owner_wildcard(self, name: str, default: float = 0.0) -> np.ndarray:
        if name not in self.owner_wildcards:
            arr = np.full(max(self.owner_kind.shape[0], 1), default, dtype=REAL)
            self.owner_wildcards[name] = arr
        return self.owner_wildcards[name]

    def ensure_geom_wildcard(self, name: str, default: float = 0.0) -> np.ndarray:
        if name not in self.geom_wildcards:
            arr = np.full(max(self.geom_owner.shape[0], 1), default, dtype=REAL)
            self.geom_wildcards[name] = arr
        return self.geom_wildcards[name]
