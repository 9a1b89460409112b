"""Compiled hot loops (numba).

All kernels are serial and release the GIL, so the kinematics and dynamics
workers genuinely overlap.  Every kernel writes either thread-private output
slots or runs single-threaded, keeping results bit-reproducible run to run.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .types import SUBVOXELS_PER_EDGE, VOXEL_BITS_PER_AXIS, VOXELS_PER_AXIS

JIT = dict(nogil=True, cache=True, fastmath=False)

# Geometry kind codes, mirrored from core.py (kernels cannot import it).
GEOM_SPHERE = 0
GEOM_TRIANGLE = 1
GEOM_PLANE = 2
GEOM_CYLINDER = 3

FLAT_RADIUS = 1.0e18  # curvature stand-in for planes/triangles


# ---------------------------------------------------------------------------
# compressed coordinates
# ---------------------------------------------------------------------------

@njit(**JIT)
def encode_positions(pos, lo, hi, edge, voxel, sub):
    """Pack positions; returns the index of the first owner outside the
    domain box (the divergence-watchdog path) or -1."""
    n = pos.shape[0]
    for i in range(n):
        v = np.uint64(0)
        for ax in range(3):
            if pos[i, ax] < lo[ax] or pos[i, ax] > hi[ax]:
                return i
            t = (pos[i, ax] - lo[ax]) / edge
            cell = int(t)
            if cell >= VOXELS_PER_AXIS:
                cell = VOXELS_PER_AXIS - 1
            s = int((t - cell) * SUBVOXELS_PER_EDGE)
            if s >= SUBVOXELS_PER_EDGE:
                s = SUBVOXELS_PER_EDGE - 1
            v = v | (np.uint64(cell) << np.uint64(VOXEL_BITS_PER_AXIS * ax))
            sub[i, ax] = s
        voxel[i] = v
    return -1


@njit(**JIT)
def decode_positions(voxel, sub, lo, edge, out):
    n = voxel.shape[0]
    mask = np.uint64(VOXELS_PER_AXIS - 1)
    b = np.uint64(VOXEL_BITS_PER_AXIS)
    for i in range(n):
        v = voxel[i]
        cx = np.float64(v & mask)
        cy = np.float64((v >> b) & mask)
        cz = np.float64((v >> (b + b)) & mask)
        out[i, 0] = lo[0] + (cx + sub[i, 0] / SUBVOXELS_PER_EDGE) * edge
        out[i, 1] = lo[1] + (cy + sub[i, 1] / SUBVOXELS_PER_EDGE) * edge
        out[i, 2] = lo[2] + (cz + sub[i, 2] / SUBVOXELS_PER_EDGE) * edge


# ---------------------------------------------------------------------------
# rigid-body transforms
# ---------------------------------------------------------------------------

@njit(inline="always", **JIT)
def _quat_rot(qw, qx, qy, qz, vx, vy, vz):
    # v + 2 u x (u x v + w v), u = (qx, qy, qz)
    tx = qy * vz - qz * vy + qw * vx
    ty = qz * vx - qx * vz + qw * vy
    tz = qx * vy - qy * vx + qw * vz
    rx = vx + 2.0 * (qy * tz - qz * ty)
    ry = vy + 2.0 * (qz * tx - qx * tz)
    rz = vz + 2.0 * (qx * ty - qy * tx)
    return rx, ry, rz


@njit(inline="always", **JIT)
def _quat_rot_inv(qw, qx, qy, qz, vx, vy, vz):
    return _quat_rot(qw, -qx, -qy, -qz, vx, vy, vz)


@njit(**JIT)
def sphere_world(sph_geom, geom_params, geom_owner, owner_pos, quat,
                 out_center, out_radius):
    for k in range(sph_geom.shape[0]):
        g = sph_geom[k]
        o = geom_owner[g]
        ox = np.float64(geom_params[g, 0])
        oy = np.float64(geom_params[g, 1])
        oz = np.float64(geom_params[g, 2])
        qw = np.float64(quat[o, 0]); qx = np.float64(quat[o, 1])
        qy = np.float64(quat[o, 2]); qz = np.float64(quat[o, 3])
        rx, ry, rz = _quat_rot(qw, qx, qy, qz, ox, oy, oz)
        out_center[k, 0] = owner_pos[o, 0] + rx
        out_center[k, 1] = owner_pos[o, 1] + ry
        out_center[k, 2] = owner_pos[o, 2] + rz
        out_radius[k] = geom_params[g, 3]


@njit(**JIT)
def triangle_world(tri_geom, geom_params, geom_owner, owner_pos, quat, out):
    for k in range(tri_geom.shape[0]):
        g = tri_geom[k]
        o = geom_owner[g]
        qw = np.float64(quat[o, 0]); qx = np.float64(quat[o, 1])
        qy = np.float64(quat[o, 2]); qz = np.float64(quat[o, 3])
        for v in range(3):
            lx = np.float64(geom_params[g, 3 * v + 0])
            ly = np.float64(geom_params[g, 3 * v + 1])
            lz = np.float64(geom_params[g, 3 * v + 2])
            rx, ry, rz = _quat_rot(qw, qx, qy, qz, lx, ly, lz)
            out[k, 3 * v + 0] = owner_pos[o, 0] + rx
            out[k, 3 * v + 1] = owner_pos[o, 1] + ry
            out[k, 3 * v + 2] = owner_pos[o, 2] + rz


@njit(**JIT)
def analytic_world(ana_geom, geom_kind, geom_params, geom_owner, owner_pos,
                   quat, out):
    """World-space analytic parameters: plane [p, n], cylinder [p, a, r, facing]."""
    for k in range(ana_geom.shape[0]):
        g = ana_geom[k]
        o = geom_owner[g]
        qw = np.float64(quat[o, 0]); qx = np.float64(quat[o, 1])
        qy = np.float64(quat[o, 2]); qz = np.float64(quat[o, 3])
        px, py, pz = _quat_rot(
            qw, qx, qy, qz,
            np.float64(geom_params[g, 0]), np.float64(geom_params[g, 1]),
            np.float64(geom_params[g, 2]),
        )
        out[k, 0] = owner_pos[o, 0] + px
        out[k, 1] = owner_pos[o, 1] + py
        out[k, 2] = owner_pos[o, 2] + pz
        dx, dy, dz = _quat_rot(
            qw, qx, qy, qz,
            np.float64(geom_params[g, 3]), np.float64(geom_params[g, 4]),
            np.float64(geom_params[g, 5]),
        )
        out[k, 3] = dx
        out[k, 4] = dy
        out[k, 5] = dz
        out[k, 6] = geom_params[g, 6]
        out[k, 7] = geom_params[g, 7]


# ---------------------------------------------------------------------------
# narrow-phase primitives
# ---------------------------------------------------------------------------

@njit(inline="always", **JIT)
def _closest_on_triangle(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    """Closest point on the closed triangle abc to p (Ericson, RTCD 5.1.5)."""
    abx = bx - ax; aby = by - ay; abz = bz - az
    acx = cx - ax; acy = cy - ay; acz = cz - az
    apx = px - ax; apy = py - ay; apz = pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az
    bpx = px - bx; bpy = py - by; bpz = pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bx, by, bz
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        t = d1 / (d1 - d3)
        return ax + t * abx, ay + t * aby, az + t * abz
    cpx = px - cx; cpy = py - cy; cpz = pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cx, cy, cz
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        t = d2 / (d2 - d6)
        return ax + t * acx, ay + t * acy, az + t * acz
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return (bx + t * (cx - bx), by + t * (cy - by), bz + t * (cz - bz))
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return (ax + abx * v + acx * w, ay + aby * v + acy * w, az + abz * v + acz * w)


@njit(**JIT)
def closest_point_on_triangle(p, tri):
    qx, qy, qz = _closest_on_triangle(
        p[0], p[1], p[2],
        tri[0, 0], tri[0, 1], tri[0, 2],
        tri[1, 0], tri[1, 1], tri[1, 2],
        tri[2, 0], tri[2, 1], tri[2, 2],
    )
    d = math.sqrt((p[0] - qx) ** 2 + (p[1] - qy) ** 2 + (p[2] - qz) ** 2)
    return qx, qy, qz, d


@njit(inline="always", **JIT)
def _analytic_gap(kind, prm, cx, cy, cz):
    """Signed distance from a sphere center to an analytic surface plus the
    unit push direction (B2A) and signed curvature radius of the surface."""
    if kind == GEOM_PLANE:
        nx = prm[3]; ny = prm[4]; nz = prm[5]
        s = (cx - prm[0]) * nx + (cy - prm[1]) * ny + (cz - prm[2]) * nz
        return s, nx, ny, nz, FLAT_RADIUS
    # cylinder
    ax = prm[3]; ay = prm[4]; az = prm[5]
    wx = cx - prm[0]; wy = cy - prm[1]; wz = cz - prm[2]
    axial = wx * ax + wy * ay + wz * az
    rx = wx - axial * ax; ry = wy - axial * ay; rz = wz - axial * az
    rho = math.sqrt(rx * rx + ry * ry + rz * rz)
    radius = prm[6]
    facing = prm[7]
    if rho < 1e-300:
        return radius, 0.0, 0.0, 0.0, radius
    inv = 1.0 / rho
    if facing > 0.0:  # solid column, pushes away from the axis
        return rho - radius, rx * inv, ry * inv, rz * inv, radius
    # container wall, pushes toward the axis; concave => negative curvature
    return radius - rho, -rx * inv, -ry * inv, -rz * inv, -radius


# ---------------------------------------------------------------------------
# uniform-grid broad phase
# ---------------------------------------------------------------------------

@njit(inline="always", **JIT)
def _bin_of(x, y, z, glo, inv_bin, nb):
    ix = int((x - glo[0]) * inv_bin)
    iy = int((y - glo[1]) * inv_bin)
    iz = int((z - glo[2]) * inv_bin)
    if ix < 0: ix = 0
    if iy < 0: iy = 0
    if iz < 0: iz = 0
    if ix >= nb[0]: ix = nb[0] - 1
    if iy >= nb[1]: iy = nb[1] - 1
    if iz >= nb[2]: iz = nb[2] - 1
    return (iz * nb[1] + iy) * nb[0] + ix


@njit(**JIT)
def bin_ranges(centers, radii, margin, glo, inv_bin, nb, out_ranges):
    """Per sphere: inclusive bin index ranges its enlarged AABB touches."""
    n = centers.shape[0]
    for i in range(n):
        r = np.float64(radii[i]) + margin
        for ax in range(3):
            lo = int((centers[i, ax] - r - glo[ax]) * inv_bin)
            hi = int((centers[i, ax] + r - glo[ax]) * inv_bin)
            if lo < 0: lo = 0
            if hi < 0: hi = 0
            if lo >= nb[ax]: lo = nb[ax] - 1
            if hi >= nb[ax]: hi = nb[ax] - 1
            out_ranges[i, 2 * ax] = lo
            out_ranges[i, 2 * ax + 1] = hi


@njit(**JIT)
def fill_bins(ranges, nb, counts, starts, entries):
    """Two-phase CSR fill; call once with entries.size == 0 to count."""
    n = ranges.shape[0]
    counting = entries.shape[0] == 0
    for i in range(n):
        for iz in range(ranges[i, 4], ranges[i, 5] + 1):
            for iy in range(ranges[i, 2], ranges[i, 3] + 1):
                for ix in range(ranges[i, 0], ranges[i, 1] + 1):
                    b = (iz * nb[1] + iy) * nb[0] + ix
                    if counting:
                        counts[b] += 1
                    else:
                        entries[starts[b] + counts[b]] = i
                        counts[b] += 1


@njit(**JIT)
def collect_sphere_pairs(starts, entries, centers, radii, margin,
                         sph_owner, sph_family, mask, glo, inv_bin, nb,
                         out_a, out_b):
    """Sphere-sphere candidates.  A pair is tested in every shared bin but
    reported only in the bin holding the min corner of the two enlarged
    bounding boxes' intersection (a point both spheres are registered under,
    whatever the radius ratio).  Returns the pair count; pass zero-length
    outputs to count only."""
    nbins = starts.shape[0] - 1
    counting = out_a.shape[0] == 0
    cnt = 0
    for b in range(nbins):
        s0 = starts[b]
        s1 = starts[b + 1]
        for u in range(s0, s1):
            i = entries[u]
            for v in range(u + 1, s1):
                j = entries[v]
                if sph_owner[i] == sph_owner[j]:
                    continue
                if not mask[sph_family[i], sph_family[j]]:
                    continue
                dx = centers[i, 0] - centers[j, 0]
                dy = centers[i, 1] - centers[j, 1]
                dz = centers[i, 2] - centers[j, 2]
                ri = np.float64(radii[i]) + margin
                rj = np.float64(radii[j]) + margin
                rr = ri + rj - margin
                if dx * dx + dy * dy + dz * dz >= rr * rr:
                    continue
                mx = max(centers[i, 0] - ri, centers[j, 0] - rj)
                my = max(centers[i, 1] - ri, centers[j, 1] - rj)
                mz = max(centers[i, 2] - ri, centers[j, 2] - rj)
                if _bin_of(mx, my, mz, glo, inv_bin, nb) != b:
                    continue
                if not counting:
                    if i < j:
                        out_a[cnt] = i
                        out_b[cnt] = j
                    else:
                        out_a[cnt] = j
                        out_b[cnt] = i
                cnt += 1
    return cnt


@njit(**JIT)
def tri_bin_ranges(tri_world, margin, glo, inv_bin, nb, out_ranges):
    m = tri_world.shape[0]
    for t in range(m):
        for ax in range(3):
            lo = tri_world[t, ax]
            hi = tri_world[t, ax]
            for v in range(1, 3):
                val = tri_world[t, 3 * v + ax]
                if val < lo: lo = val
                if val > hi: hi = val
            l = int((lo - margin - glo[ax]) * inv_bin)
            h = int((hi + margin - glo[ax]) * inv_bin)
            if l < 0: l = 0
            if h < 0: h = 0
            if l >= nb[ax]: l = nb[ax] - 1
            if h >= nb[ax]: h = nb[ax] - 1
            out_ranges[t, 2 * ax] = l
            out_ranges[t, 2 * ax + 1] = h


@njit(**JIT)
def collect_sphere_tri_pairs(sph_starts, sph_entries, tri_starts, tri_entries,
                             centers, radii, margin, sph_owner, sph_family,
                             tri_world, tri_owner, tri_family, mask,
                             glo, inv_bin, nb, out_s, out_t):
    """Sphere-triangle candidates, deduplicated by the min corner of the
    intersection of the two registration boxes."""
    nbins = sph_starts.shape[0] - 1
    counting = out_s.shape[0] == 0
    cnt = 0
    for b in range(nbins):
        t0 = tri_starts[b]
        t1 = tri_starts[b + 1]
        if t0 == t1:
            continue
        s0 = sph_starts[b]
        s1 = sph_starts[b + 1]
        for u in range(s0, s1):
            i = sph_entries[u]
            for v in range(t0, t1):
                t = tri_entries[v]
                if sph_owner[i] == tri_owner[t]:
                    continue
                if not mask[sph_family[i], tri_family[t]]:
                    continue
                qx, qy, qz = _closest_on_triangle(
                    centers[i, 0], centers[i, 1], centers[i, 2],
                    tri_world[t, 0], tri_world[t, 1], tri_world[t, 2],
                    tri_world[t, 3], tri_world[t, 4], tri_world[t, 5],
                    tri_world[t, 6], tri_world[t, 7], tri_world[t, 8],
                )
                dx = centers[i, 0] - qx
                dy = centers[i, 1] - qy
                dz = centers[i, 2] - qz
                rr = np.float64(radii[i]) + margin
                if dx * dx + dy * dy + dz * dz >= rr * rr:
                    continue
                mx = centers[i, 0] - rr
                my = centers[i, 1] - rr
                mz = centers[i, 2] - rr
                tlx = min(min(tri_world[t, 0], tri_world[t, 3]), tri_world[t, 6]) - margin
                tly = min(min(tri_world[t, 1], tri_world[t, 4]), tri_world[t, 7]) - margin
                tlz = min(min(tri_world[t, 2], tri_world[t, 5]), tri_world[t, 8]) - margin
                if tlx > mx: mx = tlx
                if tly > my: my = tly
                if tlz > mz: mz = tlz
                if _bin_of(mx, my, mz, glo, inv_bin, nb) != b:
                    continue
                if not counting:
                    out_s[cnt] = i
                    out_t[cnt] = t
                cnt += 1
    return cnt


@njit(**JIT)
def collect_sphere_analytic_pairs(centers, radii, margin, sph_owner,
                                  sph_family, ana_world, ana_kind, ana_owner,
                                  ana_family, mask, out_s, out_g):
    n = centers.shape[0]
    m = ana_world.shape[0]
    counting = out_s.shape[0] == 0
    cnt = 0
    for i in range(n):
        for k in range(m):
            if sph_owner[i] == ana_owner[k]:
                continue
            if not mask[sph_family[i], ana_family[k]]:
                continue
            gap, bx, by, bz, rb = _analytic_gap(
                ana_kind[k], ana_world[k],
                centers[i, 0], centers[i, 1], centers[i, 2],
            )
            if gap >= np.float64(radii[i]) + margin:
                continue
            if counting:
                cnt += 1
            else:
                out_s[cnt] = i
                out_g[cnt] = k
                cnt += 1
    return cnt


# ---------------------------------------------------------------------------
# per-step contact state (geometry part of the ContactContext)
# ---------------------------------------------------------------------------

@njit(inline="always", **JIT)
def contact_geom_one(kd, i, j, sph_centers, sph_radii, tri_world, ana_world,
                     ana_kind):
    """One ACS entry: penetration depth, B-to-A unit vector, contact point,
    and B-side curvature radius (signed for concave walls)."""
    cx = sph_centers[i, 0]; cy = sph_centers[i, 1]; cz = sph_centers[i, 2]
    ra = np.float64(sph_radii[i])
    if kd == 0:  # sphere-sphere
        dx = cx - sph_centers[j, 0]
        dy = cy - sph_centers[j, 1]
        dz = cz - sph_centers[j, 2]
        d = math.sqrt(dx * dx + dy * dy + dz * dz)
        rb = np.float64(sph_radii[j])
        if d < 1e-300:
            return ra + rb, 0.0, 0.0, 1.0, cx, cy, cz, rb
        inv = 1.0 / d
        bx = dx * inv; by = dy * inv; bz = dz * inv
        depth = ra + rb - d
    elif kd == 1:  # sphere-triangle
        qx, qy, qz = _closest_on_triangle(
            cx, cy, cz,
            tri_world[j, 0], tri_world[j, 1], tri_world[j, 2],
            tri_world[j, 3], tri_world[j, 4], tri_world[j, 5],
            tri_world[j, 6], tri_world[j, 7], tri_world[j, 8],
        )
        dx = cx - qx; dy = cy - qy; dz = cz - qz
        d = math.sqrt(dx * dx + dy * dy + dz * dz)
        if d < 1e-300:
            # center on the facet: fall back to the facet normal
            e1x = tri_world[j, 3] - tri_world[j, 0]
            e1y = tri_world[j, 4] - tri_world[j, 1]
            e1z = tri_world[j, 5] - tri_world[j, 2]
            e2x = tri_world[j, 6] - tri_world[j, 0]
            e2y = tri_world[j, 7] - tri_world[j, 1]
            e2z = tri_world[j, 8] - tri_world[j, 2]
            bx = e1y * e2z - e1z * e2y
            by = e1z * e2x - e1x * e2z
            bz = e1x * e2y - e1y * e2x
            nn = math.sqrt(bx * bx + by * by + bz * bz)
            bx /= nn; by /= nn; bz /= nn
        else:
            inv = 1.0 / d
            bx = dx * inv; by = dy * inv; bz = dz * inv
        depth = ra - d
        rb = FLAT_RADIUS
    else:  # sphere-analytic
        gap, bx, by, bz, rb = _analytic_gap(ana_kind[j], ana_world[j], cx, cy, cz)
        depth = ra - gap
    half = ra - 0.5 * depth
    return depth, bx, by, bz, cx - bx * half, cy - by * half, cz - bz * half, rb


@njit(**JIT)
def contact_geometry(kind, slot_a, slot_b, sph_centers, sph_radii,
                     tri_world, ana_world, ana_kind,
                     out_depth, out_b2a, out_cp, out_rb):
    """Standalone geometry pass over an ACS (the force kernel fuses the same
    helper; this entry point serves tests and diagnostics)."""
    for k in range(kind.shape[0]):
        depth, bx, by, bz, px, py, pz, rb = contact_geom_one(
            kind[k], slot_a[k], slot_b[k], sph_centers, sph_radii,
            tri_world, ana_world, ana_kind,
        )
        out_depth[k] = depth
        out_b2a[k, 0] = bx; out_b2a[k, 1] = by; out_b2a[k, 2] = bz
        out_cp[k, 0] = px; out_cp[k, 1] = py; out_cp[k, 2] = pz
        out_rb[k] = rb


# ---------------------------------------------------------------------------
# owner reduction and integration
# ---------------------------------------------------------------------------

@njit(**JIT)
def reduce_to_owners(owner_a, owner_b, forces, tofs, cps, owner_pos,
                     acc_force, acc_torque):
    """Scatter contact results to owners: +F at A's lever arm, -F at B's.
    torque_only_force contributes torque on both sides, no linear force."""
    acc_force[:] = 0.0
    acc_torque[:] = 0.0
    for k in range(owner_a.shape[0]):
        oa = owner_a[k]
        ob = owner_b[k]
        fx = forces[k, 0]; fy = forces[k, 1]; fz = forces[k, 2]
        gx = tofs[k, 0]; gy = tofs[k, 1]; gz = tofs[k, 2]
        rax = cps[k, 0] - owner_pos[oa, 0]
        ray = cps[k, 1] - owner_pos[oa, 1]
        raz = cps[k, 2] - owner_pos[oa, 2]
        rbx = cps[k, 0] - owner_pos[ob, 0]
        rby = cps[k, 1] - owner_pos[ob, 1]
        rbz = cps[k, 2] - owner_pos[ob, 2]
        acc_force[oa, 0] += fx
        acc_force[oa, 1] += fy
        acc_force[oa, 2] += fz
        acc_force[ob, 0] -= fx
        acc_force[ob, 1] -= fy
        acc_force[ob, 2] -= fz
        tx = fx + gx; ty = fy + gy; tz = fz + gz
        acc_torque[oa, 0] += ray * tz - raz * ty
        acc_torque[oa, 1] += raz * tx - rax * tz
        acc_torque[oa, 2] += rax * ty - ray * tx
        acc_torque[ob, 0] -= rby * tz - rbz * ty
        acc_torque[ob, 1] -= rbz * tx - rbx * tz
        acc_torque[ob, 2] -= rbx * ty - rby * tx


@njit(**JIT)
def integrate_step(h, gx, gy, gz, owner_pos, quat, lin_vel, ang_vel,
                   mass, moi, acc_force, acc_torque, ext_force, ext_torque,
                   family, fixed_flag, lv_mask, lv_val, av_mask, av_val,
                   prescribed_flag, v_err):
    """Semi-implicit Euler step in place.

    Velocity update uses the freshly reduced forces, position uses the new
    velocity; orientation integrates the local angular velocity with a
    first-order quaternion update plus renormalization.  Families carrying a
    prescription are force-immune: prescribed components are imposed, the
    rest keep their current values.  Returns the first owner whose speed
    exceeds v_err, or -1.
    """
    n = owner_pos.shape[0]
    bad = -1
    for i in range(n):
        fam = family[i]
        if fixed_flag[fam]:
            lin_vel[i, 0] = 0.0; lin_vel[i, 1] = 0.0; lin_vel[i, 2] = 0.0
            ang_vel[i, 0] = 0.0; ang_vel[i, 1] = 0.0; ang_vel[i, 2] = 0.0
            continue
        qw = np.float64(quat[i, 0]); qx = np.float64(quat[i, 1])
        qy = np.float64(quat[i, 2]); qz = np.float64(quat[i, 3])

        if prescribed_flag[fam]:
            vx = np.float64(lin_vel[i, 0])
            vy = np.float64(lin_vel[i, 1])
            vz = np.float64(lin_vel[i, 2])
            if lv_mask[fam, 0]:
                vx = lv_val[fam, 0]
            if lv_mask[fam, 1]:
                vy = lv_val[fam, 1]
            if lv_mask[fam, 2]:
                vz = lv_val[fam, 2]
            wx = np.float64(ang_vel[i, 0])
            wy = np.float64(ang_vel[i, 1])
            wz = np.float64(ang_vel[i, 2])
            if av_mask[fam, 0] or av_mask[fam, 1] or av_mask[fam, 2]:
                # prescriptions are given in the global frame
                pwx, pwy, pwz = _quat_rot(qw, qx, qy, qz, wx, wy, wz)
                if av_mask[fam, 0]:
                    pwx = av_val[fam, 0]
                if av_mask[fam, 1]:
                    pwy = av_val[fam, 1]
                if av_mask[fam, 2]:
                    pwz = av_val[fam, 2]
                wx, wy, wz = _quat_rot_inv(qw, qx, qy, qz, pwx, pwy, pwz)
        else:
            m = np.float64(mass[i])
            vx = np.float64(lin_vel[i, 0]) + h * ((acc_force[i, 0] + ext_force[i, 0]) / m + gx)
            vy = np.float64(lin_vel[i, 1]) + h * ((acc_force[i, 1] + ext_force[i, 1]) / m + gy)
            vz = np.float64(lin_vel[i, 2]) + h * ((acc_force[i, 2] + ext_force[i, 2]) / m + gz)

            # torque to the principal frame; gyroscopic term included
            tgx = acc_torque[i, 0] + ext_torque[i, 0]
            tgy = acc_torque[i, 1] + ext_torque[i, 1]
            tgz = acc_torque[i, 2] + ext_torque[i, 2]
            tlx, tly, tlz = _quat_rot_inv(qw, qx, qy, qz, tgx, tgy, tgz)
            wx = np.float64(ang_vel[i, 0]); wy = np.float64(ang_vel[i, 1]); wz = np.float64(ang_vel[i, 2])
            ix = np.float64(moi[i, 0]); iy = np.float64(moi[i, 1]); iz = np.float64(moi[i, 2])
            gyx = wy * (iz * wz) - wz * (iy * wy)
            gyy = wz * (ix * wx) - wx * (iz * wz)
            gyz = wx * (iy * wy) - wy * (ix * wx)
            wx += h * (tlx - gyx) / ix
            wy += h * (tly - gyy) / iy
            wz += h * (tlz - gyz) / iz

        owner_pos[i, 0] += h * vx
        owner_pos[i, 1] += h * vy
        owner_pos[i, 2] += h * vz

        hw = 0.5 * h
        dqw = hw * (-qx * wx - qy * wy - qz * wz)
        dqx = hw * (qw * wx + qy * wz - qz * wy)
        dqy = hw * (qw * wy + qz * wx - qx * wz)
        dqz = hw * (qw * wz + qx * wy - qy * wx)
        qw += dqw; qx += dqx; qy += dqy; qz += dqz
        inv = 1.0 / math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
        quat[i, 0] = qw * inv
        quat[i, 1] = qx * inv
        quat[i, 2] = qy * inv
        quat[i, 3] = qz * inv

        lin_vel[i, 0] = vx; lin_vel[i, 1] = vy; lin_vel[i, 2] = vz
        ang_vel[i, 0] = wx; ang_vel[i, 1] = wy; ang_vel[i, 2] = wz

        if bad < 0 and vx * vx + vy * vy + vz * vz > v_err * v_err:
            bad = i
    return bad


@njit(**JIT)
def integrate_and_refresh(h, gx, gy, gz, owner_pos, quat, lin_vel, ang_vel,
                          mass, moi, acc_force, acc_torque, ext_force,
                          ext_torque, family, fixed_flag, lv_mask, lv_val,
                          av_mask, av_val, prescribed_flag, v_err,
                          lo, hi, edge, voxel, sub,
                          sph_geom, geom_params, geom_owner, sph_centers):
    """Fused per-step tail: integrate, re-encode positions through the
    compressed store, decode back, and refresh sphere world centers.
    Returns (speeding owner or -1, out-of-domain owner or -1)."""
    bad = integrate_step(h, gx, gy, gz, owner_pos, quat, lin_vel, ang_vel,
                         mass, moi, acc_force, acc_torque, ext_force,
                         ext_torque, family, fixed_flag, lv_mask, lv_val,
                         av_mask, av_val, prescribed_flag, v_err)
    oob = encode_positions(owner_pos, lo, hi, edge, voxel, sub)
    if oob >= 0:
        return bad, oob
    decode_positions(voxel, sub, lo, edge, owner_pos)
    for k in range(sph_geom.shape[0]):
        g = sph_geom[k]
        o = geom_owner[g]
        ox = np.float64(geom_params[g, 0])
        oy = np.float64(geom_params[g, 1])
        oz = np.float64(geom_params[g, 2])
        qw = np.float64(quat[o, 0]); qx = np.float64(quat[o, 1])
        qy = np.float64(quat[o, 2]); qz = np.float64(quat[o, 3])
        rx, ry, rz = _quat_rot(qw, qx, qy, qz, ox, oy, oz)
        sph_centers[k, 0] = owner_pos[o, 0] + rx
        sph_centers[k, 1] = owner_pos[o, 1] + ry
        sph_centers[k, 2] = owner_pos[o, 2] + rz
    return bad, -1


@njit(**JIT)
def angular_velocity_global(quat, ang_vel, out):
    for i in range(quat.shape[0]):
        wx, wy, wz = _quat_rot(
            np.float64(quat[i, 0]), np.float64(quat[i, 1]),
            np.float64(quat[i, 2]), np.float64(quat[i, 3]),
            np.float64(ang_vel[i, 0]), np.float64(ang_vel[i, 1]),
            np.float64(ang_vel[i, 2]),
        )
        out[i, 0] = wx
        out[i, 1] = wy
        out[i, 2] = wz
