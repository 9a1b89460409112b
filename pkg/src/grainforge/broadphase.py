"""Margin-enlarged candidate contact detection (the kinematics worker's
payload): uniform-grid binning, narrow-phase candidate tests, and the
history-preserving merge of successive contact arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .core import ValidationError
from .types import REAL

CONTACT_SS = 0  # sphere-sphere
CONTACT_ST = 1  # sphere-triangle
CONTACT_SA = 2  # sphere-analytic

_MAX_BINS = 1 << 22
_KEY_GEOM_BITS = 24  # supports up to 2**24 geometries in the pair sort key


def compute_margin(v_max: float, h: float, n_max: int) -> float:
    """Added-margin thickness: both partners may close at v_max for up to
    n_max steps of size h between contact-array refreshes."""
    if v_max <= 0.0 or h <= 0.0 or n_max <= 0:
        raise ValidationError(
            f"margin inputs must be positive (v_max={v_max}, h={h}, n_max={n_max})"
        )
    return 2.0 * v_max * h * n_max


@dataclass
class MarginPolicy:
    """Detection margin bookkeeping for the delayed contact-array protocol."""

    v_max: float
    h: float
    n_max: int
    added: float = 0.0  # extra reach, e.g. bond interaction range

    @property
    def margin(self) -> float:
        return compute_margin(self.v_max, self.h, self.n_max) + self.added


class ContactArray:
    """Persistent candidate pairs plus per-contact wildcard storage.

    Pairs are kept canonically sorted by (kind, geometry A, geometry B) with
    A < B for sphere-sphere contacts; wildcard arrays run parallel to the
    pair list.
    """

    def __init__(self, kind=None, geom_a=None, geom_b=None, wildcards=None):
        self.kind = np.asarray(kind if kind is not None else [], dtype=np.uint8)
        self.geom_a = np.asarray(geom_a if geom_a is not None else [], dtype=np.int64)
        self.geom_b = np.asarray(geom_b if geom_b is not None else [], dtype=np.int64)
        self.wildcards: dict[str, np.ndarray] = {}
        if wildcards:
            for name, values in wildcards.items():
                arr = np.asarray(values, dtype=REAL)
                if arr.shape[0] != self.size:
                    raise ValidationError(
                        f"wildcard {name!r} length {arr.shape[0]} != pair count {self.size}"
                    )
                self.wildcards[name] = arr

    @property
    def size(self) -> int:
        return int(self.geom_a.shape[0])

    def __len__(self):
        return self.size

    def sort_keys(self) -> np.ndarray:
        if np.any(self.geom_a >= (1 << _KEY_GEOM_BITS)) or np.any(
            self.geom_b >= (1 << _KEY_GEOM_BITS)
        ):
            raise ValidationError("geometry ids exceed the sort-key budget")
        return (
            (self.kind.astype(np.uint64) << np.uint64(2 * _KEY_GEOM_BITS))
            | (self.geom_a.astype(np.uint64) << np.uint64(_KEY_GEOM_BITS))
            | self.geom_b.astype(np.uint64)
        )

    def canonicalize(self) -> "ContactArray":
        """Sort pairs into canonical order (stable), realigning wildcards."""
        order = np.argsort(self.sort_keys(), kind="stable")
        out = ContactArray(self.kind[order], self.geom_a[order], self.geom_b[order])
        for name, values in self.wildcards.items():
            out.wildcards[name] = values[order]
        return out

    def ensure_wildcards(self, names) -> None:
        for name in names:
            if name not in self.wildcards:
                self.wildcards[name] = np.zeros(self.size, dtype=REAL)

    def select(self, keep_mask: np.ndarray) -> "ContactArray":
        out = ContactArray(
            self.kind[keep_mask], self.geom_a[keep_mask], self.geom_b[keep_mask]
        )
        for name, values in self.wildcards.items():
            out.wildcards[name] = values[keep_mask]
        return out


def merge_history(old: ContactArray, new_pairs: ContactArray) -> ContactArray:
    """History-preserving merge.

    Pairs present in both arrays keep every wildcard value from `old`; pairs
    only in `new_pairs` get zero-initialized wildcards; pairs only in `old`
    are dropped.  Both inputs must be canonically ordered.
    """
    out = ContactArray(new_pairs.kind.copy(), new_pairs.geom_a.copy(),
                       new_pairs.geom_b.copy())
    names = set(old.wildcards) | set(new_pairs.wildcards)
    if old.size == 0:
        for name in names:
            out.wildcards[name] = np.zeros(out.size, dtype=REAL)
        return out
    old_keys = old.sort_keys()
    new_keys = out.sort_keys()
    pos = np.searchsorted(old_keys, new_keys)
    pos_clipped = np.minimum(pos, old.size - 1)
    matched = old_keys[pos_clipped] == new_keys
    src = pos_clipped[matched]
    for name in names:
        values = np.zeros(out.size, dtype=REAL)
        if name in old.wildcards:
            values[matched] = old.wildcards[name][src]
        out.wildcards[name] = values
    return out


@dataclass
class DetectionSnapshot:
    """Immutable world view the kinematics worker detects against."""

    sph_center: np.ndarray     # (m, 3) float64, world frame
    sph_radius: np.ndarray     # (m,) REAL
    sph_geom: np.ndarray       # (m,) global geometry ids
    sph_owner: np.ndarray
    sph_family: np.ndarray
    tri_world: np.ndarray      # (t, 9) float64
    tri_geom: np.ndarray
    tri_owner: np.ndarray
    tri_family: np.ndarray
    ana_world: np.ndarray      # (a, 8) float64
    ana_kind: np.ndarray
    ana_geom: np.ndarray
    ana_owner: np.ndarray
    ana_family: np.ndarray
    mask: np.ndarray           # (256, 256) bool
    stamp: int = 0


def _grid_for(snapshot: DetectionSnapshot, margin: float, bin_size: float | None):
    centers = snapshot.sph_center
    r_max = float(np.max(snapshot.sph_radius)) if centers.shape[0] else 0.0
    min_bin = 2.0 * (r_max + margin)
    if bin_size is None:
        bin_size = min_bin
    elif bin_size < min_bin:
        raise ValidationError(
            f"bin_size {bin_size} below max enlarged sphere diameter {min_bin}"
        )
    if bin_size <= 0.0:
        bin_size = 1.0
    pts = [centers] if centers.shape[0] else []
    if snapshot.tri_world.shape[0]:
        pts.append(snapshot.tri_world.reshape(-1, 3))
    if not pts:
        return None
    allpts = np.vstack(pts)
    glo = allpts.min(axis=0) - (r_max + margin) - 1e-9
    ghi = allpts.max(axis=0) + (r_max + margin) + 1e-9
    extent = ghi - glo
    while True:
        nb = np.maximum(np.ceil(extent / bin_size), 1).astype(np.int64)
        if int(nb[0]) * int(nb[1]) * int(nb[2]) <= _MAX_BINS:
            break
        bin_size *= 1.5
    return glo, 1.0 / bin_size, nb


def _csr_bins(ranges: np.ndarray, nb: np.ndarray):
    nbins = int(nb[0]) * int(nb[1]) * int(nb[2])
    counts = np.zeros(nbins, dtype=np.int64)
    K.fill_bins(ranges, nb, counts, np.zeros(1, dtype=np.int64),
                np.zeros(0, dtype=np.int64))
    starts = np.zeros(nbins + 1, dtype=np.int64)
    np.cumsum(counts, out=starts[1:])
    entries = np.zeros(int(starts[-1]), dtype=np.int64)
    counts[:] = 0
    K.fill_bins(ranges, nb, counts, starts, entries)
    return starts, entries


def detect_contacts(snapshot: DetectionSnapshot, margin: float,
                    bin_size: float | None = None) -> ContactArray:
    """Exactly the pairs whose margin-enlarged geometries overlap (strict
    inequality), excluding masked families and same-owner pairs.  Returns a
    canonically ordered ContactArray with no wildcards attached."""
    if margin < 0.0:
        raise ValidationError(f"margin must be non-negative, got {margin}")
    m = snapshot.sph_center.shape[0]
    kinds = []
    geoms_a = []
    geoms_b = []
    grid = _grid_for(snapshot, margin, bin_size)
    if m and grid is not None:
        glo, inv_bin, nb = grid
        ranges = np.zeros((m, 6), dtype=np.int64)
        K.bin_ranges(snapshot.sph_center, snapshot.sph_radius, margin, glo,
                     inv_bin, nb, ranges)
        starts, entries = _csr_bins(ranges, nb)
        empty = np.zeros(0, dtype=np.int64)
        n_ss = K.collect_sphere_pairs(
            starts, entries, snapshot.sph_center, snapshot.sph_radius, margin,
            snapshot.sph_owner, snapshot.sph_family, snapshot.mask,
            glo, inv_bin, nb, empty, empty,
        )
        a = np.zeros(n_ss, dtype=np.int64)
        b = np.zeros(n_ss, dtype=np.int64)
        K.collect_sphere_pairs(
            starts, entries, snapshot.sph_center, snapshot.sph_radius, margin,
            snapshot.sph_owner, snapshot.sph_family, snapshot.mask,
            glo, inv_bin, nb, a, b,
        )
        kinds.append(np.full(n_ss, CONTACT_SS, dtype=np.uint8))
        geoms_a.append(snapshot.sph_geom[a])
        geoms_b.append(snapshot.sph_geom[b])

        t = snapshot.tri_world.shape[0]
        if t:
            tri_ranges = np.zeros((t, 6), dtype=np.int64)
            K.tri_bin_ranges(snapshot.tri_world, margin, glo, inv_bin, nb,
                             tri_ranges)
            tstarts, tentries = _csr_bins(tri_ranges, nb)
            n_st = K.collect_sphere_tri_pairs(
                starts, entries, tstarts, tentries, snapshot.sph_center,
                snapshot.sph_radius, margin, snapshot.sph_owner,
                snapshot.sph_family, snapshot.tri_world, snapshot.tri_owner,
                snapshot.tri_family, snapshot.mask, glo, inv_bin, nb,
                empty, empty,
            )
            s = np.zeros(n_st, dtype=np.int64)
            tt = np.zeros(n_st, dtype=np.int64)
            K.collect_sphere_tri_pairs(
                starts, entries, tstarts, tentries, snapshot.sph_center,
                snapshot.sph_radius, margin, snapshot.sph_owner,
                snapshot.sph_family, snapshot.tri_world, snapshot.tri_owner,
                snapshot.tri_family, snapshot.mask, glo, inv_bin, nb,
                s, tt,
            )
            kinds.append(np.full(n_st, CONTACT_ST, dtype=np.uint8))
            geoms_a.append(snapshot.sph_geom[s])
            geoms_b.append(snapshot.tri_geom[tt])

    if m and snapshot.ana_world.shape[0]:
        empty = np.zeros(0, dtype=np.int64)
        n_sa = K.collect_sphere_analytic_pairs(
            snapshot.sph_center, snapshot.sph_radius, margin,
            snapshot.sph_owner, snapshot.sph_family, snapshot.ana_world,
            snapshot.ana_kind, snapshot.ana_owner, snapshot.ana_family,
            snapshot.mask, empty, empty,
        )
        s = np.zeros(n_sa, dtype=np.int64)
        g = np.zeros(n_sa, dtype=np.int64)
        K.collect_sphere_analytic_pairs(
            snapshot.sph_center, snapshot.sph_radius, margin,
            snapshot.sph_owner, snapshot.sph_family, snapshot.ana_world,
            snapshot.ana_kind, snapshot.ana_owner, snapshot.ana_family,
            snapshot.mask, s, g,
        )
        kinds.append(np.full(n_sa, CONTACT_SA, dtype=np.uint8))
        geoms_a.append(snapshot.sph_geom[s])
        geoms_b.append(snapshot.ana_geom[g])

    if not kinds:
        return ContactArray()
    arr = ContactArray(
        np.concatenate(kinds), np.concatenate(geoms_a), np.concatenate(geoms_b)
    )
    return arr.canonicalize()


def closest_point_on_triangle(p, tri):
    """Euclidean closest point on the closed triangle and its distance to p."""
    tri = np.asarray(tri, dtype=np.float64)
    area = 0.5 * np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0]))
    if area <= 0.0:
        raise ValidationError("degenerate triangle")
    qx, qy, qz, d = K.closest_point_on_triangle(
        np.asarray(p, dtype=np.float64), tri
    )
    return np.array([qx, qy, qz]), float(d)


def build_bins(centers, radii, bin_size, margin: float = 0.0):
    """Uniform-grid CSR structure over enlarged sphere bounding boxes.

    Exposed mainly for tests; detect_contacts drives the same kernels.
    Returns (grid_lo, inv_bin_size, bins_per_axis, starts, entries).
    """
    centers = np.asarray(centers, dtype=np.float64)
    radii = np.asarray(radii, dtype=REAL)
    r_max = float(radii.max()) if radii.size else 0.0
    min_bin = 2.0 * (r_max + margin)
    if bin_size < min_bin:
        raise ValidationError(
            f"bin_size {bin_size} below max enlarged sphere diameter {min_bin}"
        )
    glo = centers.min(axis=0) - (r_max + margin) - 1e-9
    ghi = centers.max(axis=0) + (r_max + margin) + 1e-9
    nb = np.maximum(np.ceil((ghi - glo) / bin_size), 1).astype(np.int64)
    ranges = np.zeros((centers.shape[0], 6), dtype=np.int64)
    K.bin_ranges(centers, radii, margin, glo, 1.0 / bin_size, nb, ranges)
    starts, entries = _csr_bins(ranges, nb)
    return glo, 1.0 / bin_size, nb, starts, entries
