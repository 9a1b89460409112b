"""Force-model evaluation.

The default history-based Hertz-Mindlin model and the bonded-breakage model
are written once as scalar python functions and compiled with numba for the
hot path; the plain-python originals back the generic plugin interface, so
both routes execute the same statements in the same order.

Custom models implement the same scalar-core contract and are registered by
name; material property names a model references must match LoadMaterial
keys.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numba import njit

from . import _kernels as K
from .core import ConfigurationError, MaterialTable, ValidationError
from .types import REAL

_JIT = dict(nogil=True, fastmath=False)

PI = math.pi


def effective_contact_params(e_a: float, nu_a: float, e_b: float, nu_b: float):
    """Hertzian effective Young's and shear moduli for a contact pair."""
    e_cnt = 1.0 / ((1.0 - nu_a * nu_a) / e_a + (1.0 - nu_b * nu_b) / e_b)
    g_cnt = 1.0 / (
        2.0 * (2.0 - nu_a) * (1.0 + nu_a) / e_a
        + 2.0 * (2.0 - nu_b) * (1.0 + nu_b) / e_b
    )
    return e_cnt, g_cnt


def restitution_damping(cor: float) -> float:
    """beta = ln(CoR) / sqrt(ln^2(CoR) + pi^2), CoR clamped below at 1e-12."""
    loge = math.log(1e-12) if cor < 1e-12 else math.log(cor)
    return loge / math.sqrt(loge * loge + PI * PI)


# ---------------------------------------------------------------------------
# scalar model cores (python originals; jitted twins below)
# ---------------------------------------------------------------------------
# Core contract: inputs are the per-contact kinematic state, the stacked
# material pair parameters and the wildcard row; out[0:3] receives the force
# on A (global frame), out[3:6] the torque_only_force.  Both start at zero
# every evaluation.  A core touches only its own wildcard row.

def _pair_kinematics(cpx, cpy, cpz, pax, pay, paz, pbx, pby, pbz,
                     vax, vay, vaz, vbx, vby, vbz,
                     wax, way, waz, wbx, wby, wbz):
    """Relative velocity of A w.r.t. B at the contact point (global frame)
    and the rolling direction vector rotVelCPB - rotVelCPA.

    Angular velocities are global; lever arms run from each owner's center
    to the contact point.
    """
    rax = cpx - pax
    ray = cpy - pay
    raz = cpz - paz
    rbx = cpx - pbx
    rby = cpy - pby
    rbz = cpz - pbz
    rotax = way * raz - waz * ray
    rotay = waz * rax - wax * raz
    rotaz = wax * ray - way * rax
    rotbx = wby * rbz - wbz * rby
    rotby = wbz * rbx - wbx * rbz
    rotbz = wbx * rby - wby * rbx
    vx = (vax + rotax) - (vbx + rotbx)
    vy = (vay + rotay) - (vby + rotby)
    vz = (vaz + rotaz) - (vbz + rotbz)
    return vx, vy, vz, rotbx - rotax, rotby - rotay, rotbz - rotaz


def hertz_mindlin_core(overlap, ts, sim_time,
                       b2ax, b2ay, b2az,
                       vx, vy, vz,
                       wrx, wry, wrz,
                       mass_eff, ra, rb,
                       mat_a, mat_b, pair, wild, out):
    """History-based Hertz-Mindlin with rolling resistance.

    pair stack rows: 0 E_cnt, 1 G_cnt, 2 CoR, 3 mu, 4 Crr.
    wildcard row: 0..2 delta_tan, 3 delta_time.
    """
    out[0] = 0.0; out[1] = 0.0; out[2] = 0.0
    out[3] = 0.0; out[4] = 0.0; out[5] = 0.0
    if overlap <= 0.0:
        # margin-region false positive: no force, history untouched
        return
    e_cnt = pair[0, mat_a, mat_b]
    g_cnt = pair[1, mat_a, mat_b]
    cor = pair[2, mat_a, mat_b]
    mu = pair[3, mat_a, mat_b]
    crr = pair[4, mat_a, mat_b]

    projection = vx * b2ax + vy * b2ay + vz * b2az
    vtx = vx - projection * b2ax
    vty = vy - projection * b2ay
    vtz = vz - projection * b2az

    # contact history update (history is stored in 32 bits; arithmetic
    # happens in 64-bit scratch on both the compiled and plain paths)
    dtx = float(wild[0]) + ts * vtx
    dty = float(wild[1]) + ts * vty
    dtz = float(wild[2]) + ts * vtz
    disp_proj = dtx * b2ax + dty * b2ay + dtz * b2az
    dtx -= disp_proj * b2ax
    dty -= disp_proj * b2ay
    dtz -= disp_proj * b2az
    delta_time = float(wild[3]) + ts

    sqrt_rd = math.sqrt(overlap * (ra * rb) / (ra + rb))
    sn = 2.0 * e_cnt * sqrt_rd
    loge = math.log(1e-12) if cor < 1e-12 else math.log(cor)
    beta = loge / math.sqrt(loge * loge + PI * PI)
    k_n = 2.0 / 3.0 * sn
    gamma_n = 2.0 * math.sqrt(5.0 / 6.0) * beta * math.sqrt(sn * mass_eff)

    fn = k_n * overlap + gamma_n * projection
    out[0] = fn * b2ax
    out[1] = fn * b2ay
    out[2] = fn * b2az

    if crr > 0.0:
        # suppressed during the initial collision transient
        add_rolling = True
        r_eff = math.sqrt((ra * rb) / (ra + rb))
        kn_simple = 4.0 / 3.0 * e_cnt * math.sqrt(r_eff)
        gn_simple = -2.0 * math.sqrt(5.0 / 3.0 * mass_eff * e_cnt) * beta * r_eff ** 0.25
        d_coeff = gn_simple / (2.0 * math.sqrt(kn_simple * mass_eff))
        if d_coeff < 1.0:
            t_collision = PI * math.sqrt(mass_eff / (kn_simple * (1.0 - d_coeff * d_coeff)))
            if delta_time <= t_collision:
                add_rolling = False
        if add_rolling:
            v_rot_mag = math.sqrt(wrx * wrx + wry * wry + wrz * wrz)
            if v_rot_mag > 1e-12:
                fmag = math.sqrt(out[0] * out[0] + out[1] * out[1] + out[2] * out[2])
                scale = crr * fmag / v_rot_mag
                out[3] = wrx * scale
                out[4] = wry * scale
                out[5] = wrz * scale

    if mu > 0.0:
        kt = 8.0 * g_cnt * sqrt_rd
        gt = -2.0 * math.sqrt(5.0 / 6.0) * beta * math.sqrt(mass_eff * kt)
        tfx = -kt * dtx - gt * vtx
        tfy = -kt * dty - gt * vty
        tfz = -kt * dtz - gt * vtz
        ft = math.sqrt(tfx * tfx + tfy * tfy + tfz * tfz)
        if ft > 1e-12:
            fmag = math.sqrt(out[0] * out[0] + out[1] * out[1] + out[2] * out[2])
            ft_max = fmag * mu
            if ft > ft_max:
                scale = ft_max / ft
                tfx *= scale
                tfy *= scale
                tfz *= scale
                # reverse-engineer the clamped micro-displacement
                dtx = (tfx + gt * vtx) / (-kt)
                dty = (tfy + gt * vty) / (-kt)
                dtz = (tfz + gt * vtz) / (-kt)
        else:
            tfx = 0.0
            tfy = 0.0
            tfz = 0.0
        out[0] += tfx
        out[1] += tfy
        out[2] += tfz

    wild[0] = dtx
    wild[1] = dty
    wild[2] = dtz
    wild[3] = delta_time


def _make_breakage_core(hertz_fallback):
    def breakage_core(overlap, ts, sim_time,
                      b2ax, b2ay, b2az,
                      vx, vy, vz,
                      wrx, wry, wrz,
                      mass_eff, ra, rb,
                      mat_a, mat_b, pair, wild, out):
        """Bonded elastoplastic contact with tensile/shear failure and a
        capped bending resistance; broken contacts fall back to the default
        Hertz-Mindlin law under compression.

        pair stack rows: 0 E_eq, 1 G_cnt, 2 CoR, 3 mu, 4 Crr, 5 nu,
        6 tension, 7 cohesion.  wildcard row: 0..2 delta_tan, 3 delta_time,
        4 unbroken, 5 initialLength.
        """
        unbroken = float(wild[4])
        if unbroken <= 1e-12:
            hertz_fallback(overlap, ts, sim_time, b2ax, b2ay, b2az,
                           vx, vy, vz, wrx, wry, wrz, mass_eff, ra, rb,
                           mat_a, mat_b, pair, wild, out)
            return
        out[0] = 0.0; out[1] = 0.0; out[2] = 0.0
        out[3] = 0.0; out[4] = 0.0; out[5] = 0.0
        e_eq = pair[0, mat_a, mat_b]
        cor = pair[2, mat_a, mat_b]
        mu = pair[3, mat_a, mat_b]
        nu_cnt = pair[5, mat_a, mat_b]
        tension = pair[6, mat_a, mat_b]
        cohesion = pair[7, mat_a, mat_b]

        projection = vx * b2ax + vy * b2ay + vz * b2az
        vtx = vx - projection * b2ax
        vty = vy - projection * b2ay
        vtz = vz - projection * b2az
        dtx = float(wild[0]) + ts * vtx
        dty = float(wild[1]) + ts * vty
        dtz = float(wild[2]) + ts * vtz
        disp_proj = dtx * b2ax + dty * b2ay + dtz * b2az
        dtx -= disp_proj * b2ax
        dty -= disp_proj * b2ay
        dtz -= disp_proj * b2az
        wild[3] = float(wild[3]) + ts

        delta_d = overlap - float(wild[5])
        kn = e_eq * (ra * rb) / (ra + rb)
        rmax = ra if ra > rb else rb
        area = rmax * rmax * PI
        breaking_force = tension * area
        delta_y = breaking_force / kn
        delta_u = 3.0 * delta_y

        if delta_d > delta_y:
            fmag = kn * delta_d
        else:
            # softening branch between yield and failure
            fmag = ((delta_u - delta_d) - delta_y) * kn * 0.5
        damping = 0.01 * math.sqrt(mass_eff * kn)
        out[0] = b2ax * fmag - damping * vx
        out[1] = b2ay * fmag - damping * vy
        out[2] = b2az * fmag - damping * vz
        if delta_d < delta_u:
            unbroken = -1.0

        kt = nu_cnt * kn
        norm_mag = math.sqrt(out[0] * out[0] + out[1] * out[1] + out[2] * out[2])
        if delta_d > delta_y:
            fs_max = norm_mag * mu + cohesion * area
        else:
            fs_max = norm_mag * mu
        loge = math.log(1e-12) if cor < 1e-12 else math.log(cor)
        beta = loge / math.sqrt(loge * loge + PI * PI)
        gt = -2.0 * math.sqrt(5.0 / 6.0) * beta * math.sqrt(mass_eff * kt)
        tfx = -kt * dtx - gt * vtx
        tfy = -kt * dty - gt * vty
        tfz = -kt * dtz - gt * vtz
        out[0] += tfx
        out[1] += tfy
        out[2] += tfz
        if math.sqrt(tfx * tfx + tfy * tfy + tfz * tfz) > fs_max:
            unbroken = -1.0

        # bending resistance, capped; produces torque only
        v_rot_mag = math.sqrt(wrx * wrx + wry * wry + wrz * wrz)
        if v_rot_mag > 1e-12:
            kr = ra * rb * kt
            eta = 0.1
            var_1 = ts * kr / ra
            fmag2 = math.sqrt(out[0] * out[0] + out[1] * out[1] + out[2] * out[2])
            var_2 = eta * fmag2
            torque_mag = var_1 if var_1 < var_2 else var_2
            scale = torque_mag / v_rot_mag
            out[3] = wrx * scale
            out[4] = wry * scale
            out[5] = wrz * scale

        wild[0] = dtx
        wild[1] = dty
        wild[2] = dtz
        wild[4] = unbroken

    return breakage_core


_pair_kinematics_jit = njit(inline="always", **_JIT)(_pair_kinematics)
hertz_mindlin_core_jit = njit(**_JIT)(hertz_mindlin_core)
breakage_core = _make_breakage_core(hertz_mindlin_core)
breakage_core_jit = njit(**_JIT)(_make_breakage_core(hertz_mindlin_core_jit))


# ---------------------------------------------------------------------------
# plugin interface
# ---------------------------------------------------------------------------

@dataclass
class ContactContext:
    """The user-referable variable bundle handed to a force model for one
    contact pair.  force / torque_only_force start at zero."""

    contact_pnt: np.ndarray
    b2a: np.ndarray
    overlap_depth: float
    ts: float
    time: float
    a_owner_pos: np.ndarray
    b_owner_pos: np.ndarray
    a_ori_q: np.ndarray
    b_ori_q: np.ndarray
    a_owner_mass: float
    b_owner_mass: float
    a_radius: float
    b_radius: float
    a_mat: int
    b_mat: int
    a_lin_vel: np.ndarray
    b_lin_vel: np.ndarray
    a_rot_vel: np.ndarray            # owner-local frames
    b_rot_vel: np.ndarray
    a_owner: int = 0
    b_owner: int = 0
    a_geo: int = 0
    b_geo: int = 0
    a_family: int = 0
    b_family: int = 0
    a_owner_moi: np.ndarray = field(default_factory=lambda: np.ones(3))
    b_owner_moi: np.ndarray = field(default_factory=lambda: np.ones(3))
    loc_cpa: np.ndarray | None = None
    loc_cpb: np.ndarray | None = None
    body_a_pos: np.ndarray | None = None
    body_b_pos: np.ndarray | None = None
    wildcards: dict = field(default_factory=dict)
    force: np.ndarray = field(default_factory=lambda: np.zeros(3))
    torque_only_force: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass
class ContactResult:
    """Force on A in the global frame; the solver applies the reaction to B."""

    force: np.ndarray
    torque_only_force: np.ndarray
    wildcards: dict


def _quat_rot_py(q, v):
    w, x, y, z = (float(c) for c in q)
    tx = y * v[2] - z * v[1] + w * v[0]
    ty = z * v[0] - x * v[2] + w * v[1]
    tz = x * v[1] - y * v[0] + w * v[2]
    return (
        v[0] + 2.0 * (y * tz - z * ty),
        v[1] + 2.0 * (z * tx - x * tz),
        v[2] + 2.0 * (x * ty - y * tx),
    )


@dataclass(frozen=True)
class ForceModel:
    """A contact force model: one scalar core, compiled and plain twins.

    wildcard names are ordered; a contact's wildcard row is stored in this
    order.  pair_props lists the material property names stacked after the
    implicit E_cnt / G_cnt rows.
    """

    name: str
    core: Callable
    jit_core: Callable
    wildcards: tuple[str, ...]
    pair_props: tuple[str, ...]

    def evaluate(self, ctx: ContactContext, pair_stack: np.ndarray) -> ContactResult:
        """Generic plugin path: identical statement sequence to the kernel."""
        wax, way, waz = _quat_rot_py(ctx.a_ori_q, np.asarray(ctx.a_rot_vel, dtype=np.float64))
        wbx, wby, wbz = _quat_rot_py(ctx.b_ori_q, np.asarray(ctx.b_rot_vel, dtype=np.float64))
        vx, vy, vz, wrx, wry, wrz = _pair_kinematics(
            float(ctx.contact_pnt[0]), float(ctx.contact_pnt[1]), float(ctx.contact_pnt[2]),
            float(ctx.a_owner_pos[0]), float(ctx.a_owner_pos[1]), float(ctx.a_owner_pos[2]),
            float(ctx.b_owner_pos[0]), float(ctx.b_owner_pos[1]), float(ctx.b_owner_pos[2]),
            float(ctx.a_lin_vel[0]), float(ctx.a_lin_vel[1]), float(ctx.a_lin_vel[2]),
            float(ctx.b_lin_vel[0]), float(ctx.b_lin_vel[1]), float(ctx.b_lin_vel[2]),
            wax, way, waz, wbx, wby, wbz,
        )
        ma = float(ctx.a_owner_mass)
        mb = float(ctx.b_owner_mass)
        mass_eff = (ma * mb) / (ma + mb)
        wild = np.zeros(len(self.wildcards), dtype=REAL)
        for i, name in enumerate(self.wildcards):
            wild[i] = ctx.wildcards.get(name, 0.0)
        out = np.zeros(6, dtype=np.float64)
        self.core(
            float(ctx.overlap_depth), float(ctx.ts), float(ctx.time),
            float(ctx.b2a[0]), float(ctx.b2a[1]), float(ctx.b2a[2]),
            vx, vy, vz, wrx, wry, wrz,
            mass_eff, float(ctx.a_radius), float(ctx.b_radius),
            int(ctx.a_mat), int(ctx.b_mat), pair_stack, wild, out,
        )
        return ContactResult(
            force=out[:3].copy(),
            torque_only_force=out[3:].copy(),
            wildcards={name: float(wild[i]) for i, name in enumerate(self.wildcards)},
        )


_REGISTRY: dict[str, ForceModel] = {}


def register_force_model(model: ForceModel) -> ForceModel:
    if model.name in _REGISTRY:
        raise ConfigurationError(f"force model {model.name!r} already registered")
    _REGISTRY[model.name] = model
    return model


def get_force_model(name: str) -> ForceModel:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise ConfigurationError(f"unknown force model {name!r}") from None


DEFAULT_MODEL = register_force_model(ForceModel(
    name="hertz_mindlin",
    core=hertz_mindlin_core,
    jit_core=hertz_mindlin_core_jit,
    wildcards=("delta_tan_x", "delta_tan_y", "delta_tan_z", "delta_time"),
    pair_props=("CoR", "mu", "Crr"),
))

BREAKAGE_MODEL = register_force_model(ForceModel(
    name="breakage",
    core=breakage_core,
    jit_core=breakage_core_jit,
    wildcards=("delta_tan_x", "delta_tan_y", "delta_tan_z", "delta_time",
               "unbroken", "initialLength"),
    pair_props=("CoR", "mu", "Crr", "nu", "tension", "cohesion"),
))


def material_pair_stack(materials: MaterialTable, model: ForceModel) -> np.ndarray:
    """Stacked (2 + n_props, n_mat, n_mat) parameter matrices for a model:
    row 0 E_cnt, row 1 G_cnt, then the model's declared pairwise properties.
    Raises ConfigurationError naming any missing material property."""
    n = len(materials)
    if n == 0:
        raise ConfigurationError("no materials loaded")
    e = materials.single_array("E")
    nu = materials.single_array("nu")
    stack = np.zeros((2 + len(model.pair_props), n, n), dtype=np.float64)
    for a in range(n):
        for b in range(n):
            e_cnt, g_cnt = effective_contact_params(e[a], nu[a], e[b], nu[b])
            stack[0, a, b] = e_cnt
            stack[1, a, b] = g_cnt
    for i, prop in enumerate(model.pair_props):
        stack[2 + i] = materials.pair_matrix(prop)
    return stack


# ---------------------------------------------------------------------------
# spec-level convenience ops on a ContactContext (thin wrappers used by
# tests and scripts; the kernels run the fused cores)
# ---------------------------------------------------------------------------

def evaluate_default_model(ctx: ContactContext, materials: MaterialTable) -> ContactResult:
    return DEFAULT_MODEL.evaluate(ctx, material_pair_stack(materials, DEFAULT_MODEL))


def hertz_normal(ctx: ContactContext, e_cnt: float, cor: float, mass_eff: float,
                 vel_b2a: np.ndarray):
    """Normal spring-damper contribution and the delta_time advance."""
    if ctx.overlap_depth <= 0.0:
        return np.zeros(3), ctx.wildcards.get("delta_time", 0.0)
    n = np.asarray(ctx.b2a, dtype=np.float64)
    projection = float(np.dot(vel_b2a, n))
    r_eff = ctx.a_radius * ctx.b_radius / (ctx.a_radius + ctx.b_radius)
    sqrt_rd = math.sqrt(ctx.overlap_depth * r_eff)
    sn = 2.0 * e_cnt * sqrt_rd
    beta = restitution_damping(cor)
    k_n = 2.0 / 3.0 * sn
    gamma_n = 2.0 * math.sqrt(5.0 / 6.0) * beta * math.sqrt(sn * mass_eff)
    force = (k_n * ctx.overlap_depth + gamma_n * projection) * n
    return force, ctx.wildcards.get("delta_time", 0.0) + ctx.ts


def mindlin_tangential(ctx: ContactContext, g_cnt: float, cor: float, mu: float,
                       mass_eff: float, normal_force: np.ndarray,
                       vel_b2a: np.ndarray):
    """Tangential history force with Coulomb capping; returns the force and
    the updated micro-displacement."""
    n = np.asarray(ctx.b2a, dtype=np.float64)
    if mu <= 0.0 or ctx.overlap_depth <= 0.0:
        u = np.array([ctx.wildcards.get(k, 0.0) for k in
                      ("delta_tan_x", "delta_tan_y", "delta_tan_z")])
        return np.zeros(3), u
    projection = float(np.dot(vel_b2a, n))
    vt = vel_b2a - projection * n
    u = np.array([ctx.wildcards.get(k, 0.0) for k in
                  ("delta_tan_x", "delta_tan_y", "delta_tan_z")])
    u = u + ctx.ts * vt
    u = u - float(np.dot(u, n)) * n
    r_eff = ctx.a_radius * ctx.b_radius / (ctx.a_radius + ctx.b_radius)
    sqrt_rd = math.sqrt(ctx.overlap_depth * r_eff)
    kt = 8.0 * g_cnt * sqrt_rd
    beta = restitution_damping(cor)
    gt = -2.0 * math.sqrt(5.0 / 6.0) * beta * math.sqrt(mass_eff * kt)
    ft_vec = -kt * u - gt * vt
    ft = float(np.linalg.norm(ft_vec))
    if ft > 1e-12:
        ft_max = float(np.linalg.norm(normal_force)) * mu
        if ft > ft_max:
            ft_vec = ft_vec * (ft_max / ft)
            u = (ft_vec + gt * vt) / (-kt)
    else:
        ft_vec = np.zeros(3)
    return ft_vec, u


def rolling_resistance(ctx: ContactContext, e_cnt: float, cor: float, crr: float,
                       mass_eff: float, total_force: np.ndarray,
                       v_rot: np.ndarray):
    """Rolling-resistance torque force, gated during collision onset."""
    if crr <= 0.0 or ctx.overlap_depth <= 0.0:
        return np.zeros(3)
    beta = restitution_damping(cor)
    r_eff = math.sqrt(ctx.a_radius * ctx.b_radius / (ctx.a_radius + ctx.b_radius))
    kn_simple = 4.0 / 3.0 * e_cnt * math.sqrt(r_eff)
    gn_simple = -2.0 * math.sqrt(5.0 / 3.0 * mass_eff * e_cnt) * beta * r_eff ** 0.25
    d_coeff = gn_simple / (2.0 * math.sqrt(kn_simple * mass_eff))
    if d_coeff < 1.0:
        t_collision = PI * math.sqrt(mass_eff / (kn_simple * (1.0 - d_coeff * d_coeff)))
        if ctx.wildcards.get("delta_time", 0.0) <= t_collision:
            return np.zeros(3)
    mag = float(np.linalg.norm(v_rot))
    if mag <= 1e-12:
        return np.zeros(3)
    return (np.asarray(v_rot) / mag) * (crr * float(np.linalg.norm(total_force)))


# ---------------------------------------------------------------------------
# contact evaluation kernel (built per model; numba specializes on the core)
# ---------------------------------------------------------------------------

def make_contact_kernel(jit_core):
    """Fused ACS sweep: re-evaluate the contact geometry, assemble the
    per-contact kinematic state, and run the model core.  Numba specializes
    one kernel per registered model."""

    @njit(nogil=True, fastmath=False)
    def kernel(kind, slot_a, slot_b, owner_a, owner_b, mat_a, mat_b,
               sph_centers, sph_radii, tri_world, ana_world, ana_kind,
               owner_pos, lin_vel, ang_vel_global, mass,
               pair_stack, wild, ts, sim_time, out_ft, depth, cp):
        touching = 0
        for k in range(kind.shape[0]):
            dep, bx, by, bz, px, py, pz, rb = K.contact_geom_one(
                kind[k], slot_a[k], slot_b[k], sph_centers, sph_radii,
                tri_world, ana_world, ana_kind,
            )
            depth[k] = dep
            cp[k, 0] = px; cp[k, 1] = py; cp[k, 2] = pz
            oa = owner_a[k]
            ob = owner_b[k]
            vx, vy, vz, wrx, wry, wrz = _pair_kinematics_jit(
                px, py, pz,
                owner_pos[oa, 0], owner_pos[oa, 1], owner_pos[oa, 2],
                owner_pos[ob, 0], owner_pos[ob, 1], owner_pos[ob, 2],
                np.float64(lin_vel[oa, 0]), np.float64(lin_vel[oa, 1]), np.float64(lin_vel[oa, 2]),
                np.float64(lin_vel[ob, 0]), np.float64(lin_vel[ob, 1]), np.float64(lin_vel[ob, 2]),
                ang_vel_global[oa, 0], ang_vel_global[oa, 1], ang_vel_global[oa, 2],
                ang_vel_global[ob, 0], ang_vel_global[ob, 1], ang_vel_global[ob, 2],
            )
            ma = np.float64(mass[oa])
            mb = np.float64(mass[ob])
            mass_eff = (ma * mb) / (ma + mb)
            jit_core(
                dep, ts, sim_time, bx, by, bz,
                vx, vy, vz, wrx, wry, wrz,
                mass_eff,
                np.float64(sph_radii[slot_a[k]]), rb,
                mat_a[k], mat_b[k], pair_stack, wild[k], out_ft[k],
            )
            if dep > 0.0:
                if kind[k] == 0:
                    touching += 2
                else:
                    touching += 1
        return touching

    return kernel


# ---------------------------------------------------------------------------
# owner reduction / bond installation
# ---------------------------------------------------------------------------

def reduce_to_owners(owner_a, owner_b, forces, tofs, contact_points,
                     owner_pos, mass, gravity):
    """Per-owner totals: force = m g + sum F, torque = sum (r x F + tau_r),
    with the reaction applied to B at its own lever arm."""
    n = owner_pos.shape[0]
    acc_f = np.zeros((n, 3), dtype=np.float64)
    acc_t = np.zeros((n, 3), dtype=np.float64)
    K.reduce_to_owners(
        np.asarray(owner_a, dtype=np.int64), np.asarray(owner_b, dtype=np.int64),
        np.asarray(forces, dtype=np.float64), np.asarray(tofs, dtype=np.float64),
        np.asarray(contact_points, dtype=np.float64),
        np.asarray(owner_pos, dtype=np.float64), acc_f, acc_t,
    )
    acc_f += np.asarray(mass, dtype=np.float64)[:, None] * np.asarray(gravity, dtype=np.float64)
    return acc_f, acc_t


def build_bonds(centers, radii, geom_ids, owner_ids, gamma_int: float):
    """Bond every sphere pair whose center distance is below
    gamma_int * (R_i + R_j); initialLength records the overlap at creation.

    Returns (ContactArray with bond wildcards, stats dict).  Bond counting is
    pure geometry; no dynamics needed.
    """
    from . import broadphase as B

    if gamma_int <= 0.0:
        raise ValidationError(f"gamma_int must be positive, got {gamma_int}")
    centers = np.asarray(centers, dtype=np.float64)
    radii = np.asarray(radii, dtype=REAL)
    m = centers.shape[0]
    families = np.zeros(m, dtype=np.uint8)
    mask = np.ones((256, 256), dtype=bool)
    r_max = float(radii.max()) if m else 0.0
    margin = max(0.0, (gamma_int - 1.0) * 2.0 * r_max) + 1e-12
    snap = B.DetectionSnapshot(
        sph_center=centers, sph_radius=radii,
        sph_geom=np.arange(m, dtype=np.int64),
        sph_owner=np.asarray(owner_ids, dtype=np.int64),
        sph_family=families,
        tri_world=np.zeros((0, 9)), tri_geom=np.zeros(0, dtype=np.int64),
        tri_owner=np.zeros(0, dtype=np.int64), tri_family=np.zeros(0, dtype=np.uint8),
        ana_world=np.zeros((0, 8)), ana_kind=np.zeros(0, dtype=np.uint8),
        ana_geom=np.zeros(0, dtype=np.int64), ana_owner=np.zeros(0, dtype=np.int64),
        ana_family=np.zeros(0, dtype=np.uint8),
        mask=mask,
    )
    cand = B.detect_contacts(snap, margin)
    a = cand.geom_a
    b = cand.geom_b
    d = np.linalg.norm(centers[a] - centers[b], axis=1)
    rsum = radii[a].astype(np.float64) + radii[b].astype(np.float64)
    keep = d < gamma_int * rsum
    a = a[keep]
    b = b[keep]
    overlap = rsum[keep] - d[keep]
    bonds = B.ContactArray(
        np.full(a.shape[0], B.CONTACT_SS, dtype=np.uint8),
        np.asarray(geom_ids, dtype=np.int64)[a],
        np.asarray(geom_ids, dtype=np.int64)[b],
    )
    for name in BREAKAGE_MODEL.wildcards:
        bonds.wildcards[name] = np.zeros(bonds.size, dtype=REAL)
    bonds.wildcards["unbroken"][:] = 1.0
    bonds.wildcards["initialLength"][:] = overlap.astype(REAL)
    bonds = bonds.canonicalize()

    degree = np.bincount(a, minlength=m) + np.bincount(b, minlength=m)
    assigned = np.bincount(a, minlength=m)
    stats = {
        "count": int(a.shape[0]),
        "mean_degree": float(degree.mean()) if m else 0.0,
        "modal_degree": int(np.bincount(degree).argmax()) if m else 0,
        "modal_assigned": int(np.bincount(assigned).argmax()) if m else 0,
    }
    return bonds, stats
