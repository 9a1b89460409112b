"""Orchestration: the two asynchronous workers (kinematics produces candidate
contact arrays, dynamics integrates), lookahead adaptation, prescribed
motion, trackers, inspectors, samplers, active boxes and the divergence
watchdog.

The dynamics worker is the sole mutator of simulation state.  The kinematics
worker is a pure function from an immutable snapshot to a ContactArray.  The
two communicate through stamped single-producer single-consumer handoff
slots; ownership of a payload transfers on the ready signal.
"""

from __future__ import annotations

import math
import threading
import time as _time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from . import broadphase as B
from . import forces as F
from .core import (
    ClumpTemplate,
    ConfigurationError,
    Domain,
    GEOM_CYLINDER,
    GEOM_PLANE,
    GEOM_SPHERE,
    GEOM_TRIANGLE,
    MaterialTable,
    OWNER_CLUMP,
    StateStore,
    ValidationError,
    quat_rotate,
    quat_rotate_many,
)
from .types import NUM_FAMILIES, REAL


class DivergenceError(RuntimeError):
    """The watchdog tripped: an owner exceeded the error-out velocity or
    left the domain."""


_SAFE_EVAL_NS = {
    "t": 0.0, "sin": math.sin, "cos": math.cos, "tan": math.tan,
    "sqrt": math.sqrt, "exp": math.exp, "abs": abs, "pi": math.pi,
}


def _compile_expr(expr: str):
    """A prescribed-motion component: a constant or an expression of time t.
    Returns (constant_value, None) or (None, code)."""
    try:
        return float(expr), None
    except ValueError:
        pass
    try:
        code = compile(expr, "<prescription>", "eval")
        ns = dict(_SAFE_EVAL_NS)
        value = eval(code, {"__builtins__": {}}, ns)
        float(value)
    except Exception as exc:
        raise ConfigurationError(f"malformed prescription expression {expr!r}: {exc}")
    return None, code


@dataclass
class SchedulerState:
    """Handshake bookkeeping between the two workers."""

    n_max: int = 2
    step_counter: int = 0
    last_wo_stamp: int = -1      # stamp of the work order last sent
    last_ca_stamp: int = -1      # stamp the contact array in use was built from
    dynamics_waits: int = 0
    kinematics_waits: int = 0
    ca_updates: int = 0
    timing: dict = field(default_factory=lambda: {
        "dyn_force": 0.0, "dyn_integrate": 0.0, "dyn_transfer": 0.0,
        "dyn_wait": 0.0, "kin_detect": 0.0, "kin_transfer": 0.0,
        "kin_wait": 0.0,
    })
    step_time_ema: float = 0.0
    last_cd_seconds: float = 0.0


class _Slot:
    """Stamped single-producer single-consumer handoff buffer."""

    def __init__(self):
        self._cond = threading.Condition()
        self._payload = None
        self._ready = False

    def put(self, payload):
        with self._cond:
            self._payload = payload
            self._ready = True
            self._cond.notify_all()

    def take(self, timeout=None):
        with self._cond:
            if not self._cond.wait_for(lambda: self._ready, timeout=timeout):
                return None
            payload = self._payload
            self._payload = None
            self._ready = False
            return payload

    def peek_ready(self) -> bool:
        with self._cond:
            return self._ready


@dataclass
class ActiveBoxPolicy:
    """Axis-aligned boxes, each following an anchor owner; clumps outside all
    boxes are parked in the frozen family and skipped by detection and
    integration."""

    half_extents: list          # one (3,) per box
    anchors: list               # owner id per box, or None for a static box
    centers: list               # static center per box (used when anchor None)
    refresh_period: float
    frozen_family: int
    active_family: int


class Tracker:
    """Owner handle for state inquiries and fine-grain motion injection.
    Reads reflect the dynamics worker's last completed step."""

    def __init__(self, sim: "Simulator", owner: int):
        self._sim = sim
        self.owner = owner

    def pos(self) -> np.ndarray:
        return self._sim._pos[self.owner].copy()

    def vel(self) -> np.ndarray:
        return self._sim.store.lin_vel[self.owner].astype(np.float64)

    def ang_vel_local(self) -> np.ndarray:
        return self._sim.store.ang_vel[self.owner].astype(np.float64)

    def quat(self) -> np.ndarray:
        return self._sim.store.quat[self.owner].astype(np.float64)

    def moi(self) -> np.ndarray:
        return self._sim.store.moi[self.owner].astype(np.float64)

    def mass(self) -> float:
        return float(self._sim.store.mass[self.owner])

    def contact_force(self) -> np.ndarray:
        return self._sim.store.acc_force[self.owner].copy()

    def contact_torque(self) -> np.ndarray:
        return self._sim.store.acc_torque[self.owner].copy()

    def contact_acc(self) -> np.ndarray:
        return self.contact_force() / self.mass()

    def contact_ang_acc_local(self) -> np.ndarray:
        q = self._sim.store.quat[self.owner].astype(np.float64)
        tl = quat_rotate(np.array([q[0], -q[1], -q[2], -q[3]]),
                         self._sim.store.acc_torque[self.owner])
        return tl / self.moi()

    def set_pos(self, xyz) -> None:
        self._sim._set_owner_position(self.owner, xyz)

    def set_vel(self, v) -> None:
        self._sim.store.lin_vel[self.owner] = np.asarray(v, dtype=np.float64)

    def set_ang_vel_local(self, w) -> None:
        self._sim.store.ang_vel[self.owner] = np.asarray(w, dtype=np.float64)

    def set_external_force(self, f) -> None:
        self._sim.store.ext_force[self.owner] = np.asarray(f, dtype=np.float64)

    def set_external_torque(self, t) -> None:
        self._sim.store.ext_torque[self.owner] = np.asarray(t, dtype=np.float64)

    def set_family(self, family: int) -> None:
        self._sim.store.set_family(self.owner, family)


class Inspector:
    def __init__(self, sim: "Simulator", quantity: str):
        if quantity not in ("clump_max_absv", "avg_sph_contacts"):
            raise ConfigurationError(f"unknown inspector quantity {quantity!r}")
        self._sim = sim
        self.quantity = quantity

    def get_value(self) -> float:
        sim = self._sim
        if self.quantity == "clump_max_absv":
            s = sim.store
            n = s.n_owners
            if n == 0:
                return 0.0
            fixed = np.array(
                [p.fixed for p in s.families.prescriptions], dtype=bool
            )[s.owner_family[:n]]
            clump = s.owner_kind[:n] == OWNER_CLUMP
            sel = clump & ~fixed
            if not np.any(sel):
                return 0.0
            v = s.lin_vel[:n][sel].astype(np.float64)
            return float(np.sqrt((v * v).sum(axis=1)).max())
        # average true contacts per component sphere, false positives excluded
        n_sph = sim._sph_geom.shape[0]
        if n_sph == 0:
            return 0.0
        return sim._last_touching / n_sph


# Contact-evaluation kernels JIT-specialize per force model; share them
# across simulators.
_KERNEL_CACHE: dict[str, object] = {}


def _contact_kernel_for(model: F.ForceModel):
    kern = _KERNEL_CACHE.get(model.name)
    if kern is None:
        kern = F.make_contact_kernel(model.jit_core)
        _KERNEL_CACHE[model.name] = kern
    return kern


class Simulator:
    """A discrete element simulation: build the scene, initialize, then
    advance with do_dynamics."""

    # process-wide default for newly built simulators (the CLI --sync switch)
    default_sync = False

    def __init__(self, domain: Domain, force_model: str = "hertz_mindlin"):
        self.materials = MaterialTable()
        self.store = StateStore(domain, self.materials)
        self.model = F.get_force_model(force_model)
        self.gravity = np.zeros(3, dtype=np.float64)
        self.h = 1e-5
        self.v_err = 50.0
        self.scheduler = SchedulerState()
        self.margin_policy = B.MarginPolicy(v_max=self.v_err, h=self.h, n_max=2)
        self.sync_mode = bool(Simulator.default_sync)
        self.sim_time = 0.0
        self.active_box_policy: ActiveBoxPolicy | None = None

        self._initialized = False
        self._closed = False
        self._pos = np.zeros((0, 3), dtype=np.float64)
        self._sph_geom = np.zeros(0, dtype=np.int64)
        self._last_touching = 0
        self._acs = B.ContactArray()
        self._exc: BaseException | None = None

        # per-family prescription tables consumed by the integrator
        self._lv_mask = np.zeros((NUM_FAMILIES, 3), dtype=np.bool_)
        self._lv_val = np.zeros((NUM_FAMILIES, 3), dtype=np.float64)
        self._av_mask = np.zeros((NUM_FAMILIES, 3), dtype=np.bool_)
        self._av_val = np.zeros((NUM_FAMILIES, 3), dtype=np.float64)
        self._fixed_flag = np.zeros(NUM_FAMILIES, dtype=np.bool_)
        self._prescribed_flag = np.zeros(NUM_FAMILIES, dtype=np.bool_)
        # (family, which-table, axis, code) entries needing per-step eval
        self._dynamic_prescriptions: list = []

        # worker plumbing
        self._wo_pending = False
        self._n_max_floor = 2
        self._calm_cycles = 0
        self._fixed_n_max = None
        self._wo_slot = _Slot()
        self._ca_slot = _Slot()
        self._cmd = _Slot()
        self._done = _Slot()
        self._stop = threading.Event()
        self._dyn_thread: threading.Thread | None = None
        self._kin_thread: threading.Thread | None = None
        # test hooks: callables invoked inside worker loops
        self._kin_delay = None
        self._dyn_delay = None

    # -- scene construction (facade over the state store) --------------------

    def load_material(self, props: dict) -> int:
        return self.materials.load_material(props)

    def set_material_pair(self, name: str, a: int, b: int, value: float) -> None:
        self.materials.set_pair(name, a, b, value)

    def load_clump_template(self, template: ClumpTemplate) -> int:
        return self.store.register_template(template)

    def add_clumps(self, template_id: int, positions) -> list[int]:
        return self.store.add_clumps(template_id, positions)

    def add_mesh(self, triangles, material: int, family: int = 0,
                 mass: float | None = None, moi=None, position=(0, 0, 0)) -> int:
        kwargs = {}
        if mass is not None:
            kwargs["mass"] = mass
        return self.store.add_mesh(triangles, material, family=family,
                                   moi=moi, position=position, **kwargs)

    def add_analytic(self, components, family: int = 0, position=(0, 0, 0)) -> int:
        return self.store.add_analytic(components, family=family, position=position)

    def add_box_boundaries(self, material: int, family: int = 0) -> int:
        owner = self.store.add_box_boundaries(material, family=family)
        self.set_family_fixed(family)
        return owner

    def track(self, owner: int) -> Tracker:
        if not 0 <= owner < self.store.n_owners:
            raise ValidationError(f"unknown owner id {owner}")
        return Tracker(self, owner)

    def create_inspector(self, quantity: str) -> Inspector:
        return Inspector(self, quantity)

    # -- family control -------------------------------------------------------

    def set_family_prescribed_lin_vel(self, family: int, vx, vy, vz) -> None:
        self.store.families.set_lin_vel(family, vx, vy, vz)
        self._compile_family(family)

    def set_family_prescribed_ang_vel(self, family: int, wx, wy, wz) -> None:
        self.store.families.set_ang_vel(family, wx, wy, wz)
        self._compile_family(family)

    def set_family_fixed(self, family: int) -> None:
        self.store.families.set_fixed(family)
        self._fixed_flag[family] = True

    def set_family_mask(self, a: int, b: int, allow: bool) -> None:
        self.store.families.set_mask(a, b, allow)

    def _compile_family(self, family: int) -> None:
        p = self.store.families.prescriptions[family]
        self._prescribed_flag[family] = True
        self._dynamic_prescriptions = [
            e for e in self._dynamic_prescriptions if e[0] != family
        ]
        for exprs, mask, val in ((p.lin_vel, self._lv_mask, self._lv_val),
                                 (p.ang_vel, self._av_mask, self._av_val)):
            if exprs is None:
                continue
            for ax, comp in enumerate(exprs):
                if comp is None or str(comp).lower() == "none":
                    mask[family, ax] = False
                    continue
                const, code = _compile_expr(str(comp))
                mask[family, ax] = True
                if code is None:
                    val[family, ax] = const
                else:
                    self._dynamic_prescriptions.append((family, val, ax, code))

    # -- solver configuration --------------------------------------------------

    def set_gravity(self, g) -> None:
        self.gravity = np.asarray(g, dtype=np.float64)

    def set_init_time_step(self, h: float) -> None:
        if h <= 0.0:
            raise ValidationError(f"time step must be positive, got {h}")
        self.h = float(h)

    def set_error_out_velocity(self, v: float) -> None:
        if v <= 0.0:
            raise ValidationError(f"error-out velocity must be positive, got {v}")
        self.v_err = float(v)

    def set_sync_mode(self, sync: bool) -> None:
        """Force n_max = 1: a fresh contact array before every step."""
        self.sync_mode = bool(sync)

    def set_fixed_lookahead(self, n_max: int) -> None:
        """Pin n_max to a constant (disables adaptation); n_max = 1 is
        synchronous detection."""
        n_max = int(n_max)
        if n_max < 1:
            raise ValidationError(f"n_max must be >= 1, got {n_max}")
        if n_max == 1:
            self.sync_mode = True
        else:
            self.sync_mode = False
            self.scheduler.n_max = n_max
            self.margin_policy.n_max = n_max
        self._fixed_n_max = n_max

    def set_added_margin(self, added: float) -> None:
        self.margin_policy.added = float(added)

    def set_active_box_policy(self, policy: ActiveBoxPolicy) -> None:
        self.active_box_policy = policy
        self.set_family_fixed(policy.frozen_family)
        for fam in range(NUM_FAMILIES):
            self.set_family_mask(policy.frozen_family, fam, False)

    # -- bonds -------------------------------------------------------------------

    def init_bonds(self, gamma_int: float):
        """Install bonds between nearby sphere pairs; call after the scene is
        built and before initialize().  Requires the breakage force model."""
        if self.model.name != "breakage":
            raise ConfigurationError("init_bonds requires the breakage force model")
        if self._initialized:
            raise ConfigurationError("init_bonds must run before initialize()")
        s = self.store
        geom_ids = np.nonzero(s.geom_kind[:s.n_geoms] == GEOM_SPHERE)[0].astype(np.int64)
        owners = s.geom_owner[geom_ids]
        pos = s.positions()
        offsets = s.geom_params[geom_ids, :3].astype(np.float64)
        centers = pos[owners] + quat_rotate_many(s.quat[owners], offsets)
        radii = s.geom_params[geom_ids, 3].astype(REAL)
        bonds, stats = F.build_bonds(centers, radii, geom_ids, owners, gamma_int)
        r_max = float(radii.max()) if radii.size else 0.0
        self.set_added_margin(max(0.0, (gamma_int - 1.0) * 2.0 * r_max) + 0.05 * r_max)
        self._acs = bonds
        return stats

    # -- lifecycle ----------------------------------------------------------------

    def initialize(self) -> None:
        if self._initialized:
            raise ConfigurationError("already initialized")
        if len(self.materials) == 0:
            raise ConfigurationError("no materials loaded")
        s = self.store
        self.pair_stack = F.material_pair_stack(self.materials, self.model)
        self._kernel = _contact_kernel_for(self.model)
        self.margin_policy = B.MarginPolicy(
            v_max=self.v_err, h=self.h, n_max=self.scheduler.n_max,
            added=self.margin_policy.added,
        )

        n_g = s.n_geoms
        kinds = s.geom_kind[:n_g]
        self._sph_geom = np.nonzero(kinds == GEOM_SPHERE)[0].astype(np.int64)
        self._tri_geom = np.nonzero(kinds == GEOM_TRIANGLE)[0].astype(np.int64)
        self._ana_geom = np.nonzero(
            (kinds == GEOM_PLANE) | (kinds == GEOM_CYLINDER)
        )[0].astype(np.int64)
        # global geometry id -> slot within its kind
        self._geom_slot = np.zeros(n_g, dtype=np.int64)
        self._geom_slot[self._sph_geom] = np.arange(self._sph_geom.shape[0])
        self._geom_slot[self._tri_geom] = np.arange(self._tri_geom.shape[0])
        self._geom_slot[self._ana_geom] = np.arange(self._ana_geom.shape[0])
        self._sph_radius = s.geom_params[self._sph_geom, 3].astype(REAL)
        self._sph_owner = s.geom_owner[self._sph_geom]
        self._ana_kind_arr = s.geom_kind[self._ana_geom]

        self._pos = s.positions()
        n = s.n_owners
        self._sph_centers = np.zeros((self._sph_geom.shape[0], 3), dtype=np.float64)
        self._sph_radius_scratch = np.zeros(self._sph_geom.shape[0], dtype=REAL)
        self._tri_world = np.zeros((self._tri_geom.shape[0], 9), dtype=np.float64)
        self._ana_world = np.zeros((self._ana_geom.shape[0], 8), dtype=np.float64)
        self._ang_vel_global = np.zeros((n, 3), dtype=np.float64)
        self._ma_owners = np.unique(np.concatenate([
            s.geom_owner[self._tri_geom], s.geom_owner[self._ana_geom]
        ])) if (self._tri_geom.size or self._ana_geom.size) else np.zeros(0, dtype=np.int64)
        self._world_dirty = True
        self._next_box_refresh = 0.0

        if self._sph_geom.size:
            r_min = float(self._sph_radius.min())
            cap = int(r_min / (4.0 * self.v_err * self.h))
            self._margin_cap_steps = max(4, cap)
        else:
            self._margin_cap_steps = None

        self._install_acs(self._acs.canonicalize())
        self._initialized = True

        self._dyn_thread = threading.Thread(
            target=self._dynamics_loop, name="grainforge-dynamics", daemon=True
        )
        self._kin_thread = threading.Thread(
            target=self._kinematics_loop, name="grainforge-kinematics", daemon=True
        )
        self._dyn_thread.start()
        self._kin_thread.start()

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._stop.set()
        self._cmd.put(("stop", 0))
        self._wo_slot.put(None)
        for t in (self._dyn_thread, self._kin_thread):
            if t is not None:
                t.join(timeout=10.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False

    # -- driving --------------------------------------------------------------------

    def do_dynamics(self, duration: float) -> None:
        """Advance simulated time by `duration` under the two-worker protocol;
        returns with the state at a step boundary."""
        if not self._initialized:
            raise ConfigurationError("initialize() must be called first")
        if self._closed:
            raise ConfigurationError("simulator is closed")
        steps = int(math.ceil(duration / self.h - 1e-9))
        if steps <= 0:
            return
        self._cmd.put(("run", steps))
        result = self._done.take()
        if isinstance(result, BaseException):
            self.close()
            raise result

    def timing_report(self) -> dict:
        sch = self.scheduler
        rep = dict(sch.timing)
        rep.update(
            steps=sch.step_counter,
            n_max=sch.n_max,
            dynamics_waits=sch.dynamics_waits,
            kinematics_waits=sch.kinematics_waits,
            ca_updates=sch.ca_updates,
            margin=self._current_margin(),
        )
        return rep

    # -- internals: world geometry ------------------------------------------------

    def _refresh_world(self) -> None:
        """Recompute world-space geometry from owner poses."""
        s = self.store
        if self._sph_geom.shape[0]:
            K.sphere_world(self._sph_geom, s.geom_params, s.geom_owner,
                           self._pos, s.quat, self._sph_centers,
                           self._sph_radius_scratch)
        self._refresh_moving_world()

    def _refresh_moving_world(self) -> None:
        """Mesh/analytic world transforms; skipped while every such owner
        sits in a fixed family and nobody moved one by hand."""
        s = self.store
        moving = self._world_dirty
        if not moving and self._ma_owners.shape[0]:
            fams = s.owner_family[self._ma_owners]
            moving = bool(np.any(~self._fixed_flag[fams]))
        if not moving:
            return
        self._world_dirty = False
        if self._tri_geom.shape[0]:
            K.triangle_world(self._tri_geom, s.geom_params, s.geom_owner,
                             self._pos, s.quat, self._tri_world)
        if self._ana_geom.shape[0]:
            K.analytic_world(self._ana_geom, s.geom_kind, s.geom_params,
                             s.geom_owner, self._pos, s.quat, self._ana_world)

    def _set_owner_position(self, owner: int, xyz) -> None:
        self.store.set_position(owner, xyz)
        if self._initialized:
            self._pos[owner] = self.store.positions()[owner]
            self._world_dirty = True
            self._refresh_world()

    def _snapshot(self) -> B.DetectionSnapshot:
        s = self.store
        return B.DetectionSnapshot(
            sph_center=self._sph_centers.copy(),
            sph_radius=self._sph_radius,
            sph_geom=self._sph_geom,
            sph_owner=self._sph_owner,
            sph_family=s.owner_family[self._sph_owner].copy(),
            tri_world=self._tri_world.copy(),
            tri_geom=self._tri_geom,
            tri_owner=s.geom_owner[self._tri_geom],
            tri_family=s.owner_family[s.geom_owner[self._tri_geom]].copy(),
            ana_world=self._ana_world.copy(),
            ana_kind=self._ana_kind_arr,
            ana_geom=self._ana_geom,
            ana_owner=s.geom_owner[self._ana_geom],
            ana_family=s.owner_family[s.geom_owner[self._ana_geom]].copy(),
            mask=s.families.mask.copy(),
            stamp=self.scheduler.step_counter,
        )

    def _current_margin(self) -> float:
        # The detection margin covers the full staleness window: up to n_max
        # steps past the work order plus the in-flight detection itself.
        base = B.compute_margin(self.v_err, self.h, max(1, self.scheduler.n_max))
        return 2.0 * base + self.margin_policy.added

    # -- internals: contact array install -----------------------------------------

    def _install_acs(self, ca: B.ContactArray) -> None:
        ca.ensure_wildcards(self.model.wildcards)
        self._acs = ca
        s = self.store
        n = ca.size
        self._acs_kind = ca.kind.astype(np.uint8)
        self._acs_slot_a = self._geom_slot[ca.geom_a] if n else np.zeros(0, dtype=np.int64)
        self._acs_slot_b = self._geom_slot[ca.geom_b] if n else np.zeros(0, dtype=np.int64)
        self._acs_owner_a = s.geom_owner[ca.geom_a] if n else np.zeros(0, dtype=np.int64)
        self._acs_owner_b = s.geom_owner[ca.geom_b] if n else np.zeros(0, dtype=np.int64)
        self._acs_mat_a = s.geom_material[ca.geom_a].astype(np.int64) if n else np.zeros(0, dtype=np.int64)
        self._acs_mat_b = s.geom_material[ca.geom_b].astype(np.int64) if n else np.zeros(0, dtype=np.int64)
        self._wild = np.zeros((n, len(self.model.wildcards)), dtype=REAL)
        for i, name in enumerate(self.model.wildcards):
            self._wild[:, i] = ca.wildcards[name]
        self._out_ft = np.zeros((n, 6), dtype=np.float64)
        self._depth = np.zeros(n, dtype=np.float64)
        self._cp = np.zeros((n, 3), dtype=np.float64)

    def _sync_wildcards_to_acs(self) -> None:
        for i, name in enumerate(self.model.wildcards):
            self._acs.wildcards[name] = self._wild[:, i].copy()

    def _adopt_contacts(self, new_pairs: B.ContactArray) -> None:
        if new_pairs.size == self._acs.size and np.array_equal(
                new_pairs.geom_a, self._acs.geom_a) and np.array_equal(
                new_pairs.geom_b, self._acs.geom_b):
            # same candidate set: history lives in the wildcard matrix
            self.scheduler.ca_updates += 1
            self.scheduler.last_ca_stamp = self.scheduler.last_wo_stamp
            return
        self._sync_wildcards_to_acs()
        merged = B.merge_history(self._acs, new_pairs)
        if "unbroken" in self.model.wildcards and self._acs.size:
            # bonded pairs are persistent: re-append any intact bond the
            # detection sweep no longer sees
            old_keys = self._acs.sort_keys()
            new_keys = merged.sort_keys()
            pos = np.searchsorted(new_keys, old_keys)
            pos_c = np.minimum(pos, max(merged.size - 1, 0))
            present = (
                new_keys[pos_c] == old_keys if merged.size else
                np.zeros(self._acs.size, dtype=bool)
            )
            lost = (~present) & (self._acs.wildcards["unbroken"] > 0.0)
            if np.any(lost):
                keep = self._acs.select(lost)
                cat = B.ContactArray(
                    np.concatenate([merged.kind, keep.kind]),
                    np.concatenate([merged.geom_a, keep.geom_a]),
                    np.concatenate([merged.geom_b, keep.geom_b]),
                )
                for name in merged.wildcards:
                    cat.wildcards[name] = np.concatenate(
                        [merged.wildcards[name], keep.wildcards[name]]
                    )
                merged = cat.canonicalize()
        self._install_acs(merged)
        self.scheduler.ca_updates += 1
        self.scheduler.last_ca_stamp = self.scheduler.last_wo_stamp

    # -- internals: the dynamics worker ---------------------------------------------

    def _dynamics_loop(self) -> None:
        try:
            self._refresh_world()
            first = True
            while not self._stop.is_set():
                cmd = self._cmd.take()
                if cmd is None or cmd[0] == "stop":
                    break
                _, steps = cmd
                try:
                    if first:
                        self._send_work_order()
                        self._await_contacts()
                        first = False
                    for _ in range(steps):
                        self._maybe_update_contacts()
                        self._step_once()
                        if self._dyn_delay is not None:
                            self._dyn_delay()
                    self._done.put(("ok", self.scheduler.step_counter))
                except BaseException as exc:  # propagated to the caller
                    self._done.put(exc)
                    break
        finally:
            self._stop.set()
            self._wo_slot.put(None)

    def _send_work_order(self) -> None:
        t0 = _time.perf_counter()
        snap = self._snapshot()
        margin = self._current_margin()
        self._wo_slot.put((snap, margin))
        self.scheduler.last_wo_stamp = self.scheduler.step_counter
        self.scheduler.timing["dyn_transfer"] += _time.perf_counter() - t0

    def _await_contacts(self) -> None:
        t0 = _time.perf_counter()
        payload = self._ca_slot.take()
        waited = _time.perf_counter() - t0
        self.scheduler.timing["dyn_wait"] += waited
        if payload is None:
            raise ConfigurationError("kinematics worker stopped unexpectedly")
        ca, stamp, cd_seconds = payload
        t1 = _time.perf_counter()
        self._adopt_contacts(ca)
        self.scheduler.last_cd_seconds = cd_seconds
        self._adapt_n_max(waited_event=waited > 1e-4)
        self._wo_pending = True
        self.scheduler.timing["dyn_transfer"] += _time.perf_counter() - t1

    def _wo_throttle(self) -> int:
        # delay the next work order until the detection it triggers is
        # actually needed; keeps tiny scenes from re-detecting every step
        if self.sync_mode:
            return 1
        return max(1, self.scheduler.n_max // 2)

    def _maybe_update_contacts(self) -> None:
        sch = self.scheduler
        if self._ca_slot.peek_ready():
            self._await_contacts()
        else:
            lookahead = 1 if self.sync_mode else sch.n_max
            if sch.step_counter - sch.last_wo_stamp >= lookahead:
                if self._wo_pending:
                    self._send_work_order()
                    self._wo_pending = False
                sch.dynamics_waits += 1
                self._await_contacts()
        if self._wo_pending and \
                sch.step_counter - sch.last_wo_stamp >= self._wo_throttle():
            self._send_work_order()
            self._wo_pending = False

    def _adapt_n_max(self, waited_event: bool) -> None:
        """Lookahead adaptation: the smallest value that keeps the dynamics
        worker from waiting, estimated as 1.25 x the measured detection time
        in units of step time, clamped to [2, 1024].  Wait events raise a
        sticky floor that decays once the collaboration stays ideal, so the
        value does not oscillate against the wait threshold."""
        sch = self.scheduler
        if self.sync_mode:
            sch.n_max = 1
            return
        if self._fixed_n_max is not None:
            sch.n_max = self._fixed_n_max
            return
        if waited_event:
            self._n_max_floor = max(self._n_max_floor, sch.n_max + 1)
            self._calm_cycles = 0
        else:
            self._calm_cycles += 1
            if self._calm_cycles >= 64 and self._n_max_floor > 2:
                self._n_max_floor -= 1
                self._calm_cycles = 0
        if sch.step_time_ema <= 0.0 or sch.last_cd_seconds <= 0.0:
            return
        proposal = int(math.ceil(1.25 * sch.last_cd_seconds / sch.step_time_ema))
        # margin sanity: a lookahead fat enough to enlarge every sphere by
        # more than its own radius floods the candidate set, which slows
        # detection and would feed back into an even fatter margin.  Beyond
        # the cap the dynamics worker waits instead.
        if self._margin_cap_steps is not None:
            proposal = min(proposal, self._margin_cap_steps)
            self._n_max_floor = min(self._n_max_floor, self._margin_cap_steps)
        sch.n_max = min(1024, max(2, self._n_max_floor, proposal))
        self.margin_policy.n_max = sch.n_max

    def _eval_prescriptions(self) -> None:
        if not self._dynamic_prescriptions:
            return
        ns = dict(_SAFE_EVAL_NS)
        ns["t"] = self.sim_time
        for fam, val, ax, code in self._dynamic_prescriptions:
            val[fam, ax] = float(eval(code, {"__builtins__": {}}, ns))

    def _step_once(self) -> None:
        sch = self.scheduler
        s = self.store
        n = s.n_owners
        t0 = _time.perf_counter()

        if self.active_box_policy is not None and \
                self.sim_time >= self._next_box_refresh:
            self._apply_active_boxes()
            self._next_box_refresh = self.sim_time + self.active_box_policy.refresh_period

        # forces over the contact array
        K.angular_velocity_global(s.quat[:n], s.ang_vel[:n], self._ang_vel_global)
        if self._acs.size:
            self._last_touching = self._kernel(
                self._acs_kind, self._acs_slot_a, self._acs_slot_b,
                self._acs_owner_a, self._acs_owner_b,
                self._acs_mat_a, self._acs_mat_b,
                self._sph_centers, self._sph_radius, self._tri_world,
                self._ana_world, self._ana_kind_arr,
                self._pos, s.lin_vel[:n], self._ang_vel_global, s.mass[:n],
                self.pair_stack, self._wild, self.h, self.sim_time,
                self._out_ft, self._depth, self._cp,
            )
        else:
            self._last_touching = 0
        K.reduce_to_owners(
            self._acs_owner_a, self._acs_owner_b,
            self._out_ft[:, :3], self._out_ft[:, 3:], self._cp,
            self._pos, s.acc_force[:n], s.acc_torque[:n],
        )
        t1 = _time.perf_counter()
        sch.timing["dyn_force"] += t1 - t0

        # integration, position re-encoding, sphere world refresh
        self._eval_prescriptions()
        bad, oob = K.integrate_and_refresh(
            self.h, self.gravity[0], self.gravity[1], self.gravity[2],
            self._pos, s.quat[:n], s.lin_vel[:n], s.ang_vel[:n],
            s.mass[:n], s.moi[:n], s.acc_force[:n], s.acc_torque[:n],
            s.ext_force[:n], s.ext_torque[:n], s.owner_family[:n],
            self._fixed_flag, self._lv_mask, self._lv_val,
            self._av_mask, self._av_val, self._prescribed_flag, self.v_err,
            s.domain.lo, s.domain.hi, s.domain.voxel_edge,
            s.voxel[:n], s.subvoxel[:n],
            self._sph_geom, s.geom_params, s.geom_owner, self._sph_centers,
        )
        if oob >= 0:
            raise DivergenceError(
                f"owner {oob} left the domain at t={self.sim_time:.6g} "
                f"(position {self._pos[oob].tolist()})"
            )
        if bad >= 0:
            v = s.lin_vel[bad]
            raise DivergenceError(
                f"owner {bad} exceeded error-out velocity {self.v_err} m/s "
                f"(speed {float(np.linalg.norm(v)):.3g}) at t={self.sim_time:.6g}"
            )
        self._refresh_moving_world()

        sch.step_counter += 1
        self.sim_time = sch.step_counter * self.h
        dt_step = _time.perf_counter() - t0
        sch.timing["dyn_integrate"] += _time.perf_counter() - t1
        sch.step_time_ema = (
            dt_step if sch.step_time_ema == 0.0
            else 0.95 * sch.step_time_ema + 0.05 * dt_step
        )
        lookahead = 1 if self.sync_mode else sch.n_max
        assert sch.step_counter - sch.last_wo_stamp <= lookahead, \
            "lookahead bound violated"

    def _apply_active_boxes(self) -> None:
        policy = self.active_box_policy
        s = self.store
        n = s.n_owners
        fam = s.owner_family[:n]
        managed = (fam == policy.active_family) | (fam == policy.frozen_family)
        managed &= s.owner_kind[:n] == OWNER_CLUMP
        if not np.any(managed):
            return
        pos = self._pos[:n]
        inside = np.zeros(n, dtype=bool)
        for half, anchor, center in zip(policy.half_extents, policy.anchors,
                                        policy.centers):
            c = self._pos[anchor] if anchor is not None else np.asarray(center)
            h = np.asarray(half, dtype=np.float64)
            inside |= np.all(np.abs(pos - c) <= h, axis=1)
        new_fam = np.where(inside, policy.active_family, policy.frozen_family)
        changed = managed & (fam != new_fam)
        if np.any(changed):
            s.owner_family[:n][changed] = new_fam[changed]
            frozen_now = changed & (new_fam == policy.frozen_family)
            s.lin_vel[:n][frozen_now] = 0.0
            s.ang_vel[:n][frozen_now] = 0.0

    # -- internals: the kinematics worker ------------------------------------------

    def _kinematics_loop(self) -> None:
        sch = self.scheduler
        try:
            while not self._stop.is_set():
                t0 = _time.perf_counter()
                wo = self._wo_slot.take()
                waited = _time.perf_counter() - t0
                sch.timing["kin_wait"] += waited
                if wo is None:
                    break
                if waited > 1e-5:
                    sch.kinematics_waits += 1
                snap, margin = wo
                if self._kin_delay is not None:
                    self._kin_delay()
                t1 = _time.perf_counter()
                ca = B.detect_contacts(snap, margin)
                cd_seconds = _time.perf_counter() - t1
                sch.timing["kin_detect"] += cd_seconds
                t2 = _time.perf_counter()
                self._ca_slot.put((ca, snap.stamp, cd_seconds))
                sch.timing["kin_transfer"] += _time.perf_counter() - t2
        finally:
            self._ca_slot.put(None)


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------

def hcp_lattice(lo, hi, spacing: float, anchor=None) -> np.ndarray:
    """Ideal hexagonal close packing covering the box [lo, hi]; the
    nearest-neighbor distance equals `spacing`.  The lattice passes through
    `anchor` (default: the box corner lo)."""
    if spacing <= 0.0:
        raise ValidationError(f"spacing must be positive, got {spacing}")
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    anchor = lo if anchor is None else np.asarray(anchor, dtype=np.float64)
    r = spacing / 2.0
    dy = math.sqrt(3.0) * r
    dz = 2.0 * math.sqrt(6.0) / 3.0 * r
    eps = 1e-12

    def index_range(low, high, step):
        return (int(math.ceil(low / step - eps)),
                int(math.floor(high / step + eps)))

    pts = []
    k0, k1 = index_range(lo[2] - anchor[2], hi[2] - anchor[2], dz)
    for k in range(k0, k1 + 1):
        z = anchor[2] + k * dz
        yoff = (k % 2) * dy / 3.0
        j0, j1 = index_range(lo[1] - anchor[1] - yoff, hi[1] - anchor[1] - yoff, dy)
        for j in range(j0, j1 + 1):
            y = anchor[1] + j * dy + yoff
            xoff = ((j + k) % 2) * r
            i0, i1 = index_range(lo[0] - anchor[0] - xoff,
                                 hi[0] - anchor[0] - xoff, 2.0 * r)
            for i in range(i0, i1 + 1):
                pts.append((anchor[0] + i * 2.0 * r + xoff, y, z))
    return np.asarray(pts, dtype=np.float64).reshape(-1, 3)


def hcp_sample_cylinder(center, radius: float, half_height: float,
                        spacing: float) -> np.ndarray:
    """HCP lattice points clipped to a z-aligned cylinder; the lattice is
    anchored on the cylinder axis."""
    c = np.asarray(center, dtype=np.float64)
    lo = c - (radius, radius, half_height)
    hi = c + (radius, radius, half_height)
    pts = hcp_lattice(lo, hi, spacing, anchor=c)
    if pts.shape[0] == 0:
        return pts
    keep = (
        ((pts[:, 0] - c[0]) ** 2 + (pts[:, 1] - c[1]) ** 2 <= radius**2 + 1e-12)
        & (np.abs(pts[:, 2] - c[2]) <= half_height + 1e-12)
    )
    return pts[keep]


def hcp_sample_box(center, half_extents, spacing: float) -> np.ndarray:
    c = np.asarray(center, dtype=np.float64)
    h = np.asarray(half_extents, dtype=np.float64)
    return hcp_lattice(c - h, c + h, spacing)
