import math
import time

import numpy as np
import pytest

import grainforge as gf
from grainforge.core import ClumpSphere, ClumpTemplate, Domain
from grainforge.engine import ActiveBoxPolicy, SchedulerState, Simulator
from grainforge.engine import hcp_lattice, hcp_sample_box, hcp_sample_cylinder


def simple_sim(domain=None, **mat):
    props = {"E": 1e7, "nu": 0.3, "CoR": 0.6, "mu": 0.3, "Crr": 0.0}
    props.update(mat)
    sim = Simulator(domain or Domain.cube(4.0))
    sim.load_material(props)
    return sim


class TestLifecycle:
    def test_do_dynamics_before_initialize(self):
        sim = simple_sim()
        with pytest.raises(gf.ConfigurationError):
            sim.do_dynamics(0.1)

    def test_initialize_twice(self):
        sim = simple_sim()
        tpl = sim.load_clump_template(ClumpTemplate.solid_sphere(0.1, 1.0, 0))
        sim.add_clumps(tpl, [[0, 0, 0]])
        sim.initialize()
        try:
            with pytest.raises(gf.ConfigurationError, match="already initialized"):
                sim.initialize()
        finally:
            sim.close()

    def test_zero_duration_no_steps(self):
        sim = simple_sim()
        tpl = sim.load_clump_template(ClumpTemplate.solid_sphere(0.1, 1.0, 0))
        sim.add_clumps(tpl, [[0, 0, 0]])
        sim.set_gravity([0, 0, -9.81])
        sim.initialize()
        try:
            p0 = sim.track(0).pos()
            sim.do_dynamics(0.0)
            assert sim.scheduler.step_counter == 0
            assert np.array_equal(sim.track(0).pos(), p0)
        finally:
            sim.close()


class TestIntegration:
    def test_free_fall_velocity_exact(self):
        sim = simple_sim()
        tpl = sim.load_clump_template(ClumpTemplate.solid_sphere(0.1, 1.0, 0))
        sim.add_clumps(tpl, [[0, 0, 1.0]])
        sim.set_gravity([0, 0, -9.81])
        sim.set_init_time_step(1e-4)
        sim.initialize()
        try:
            sim.do_dynamics(0.1)
            assert sim.track(0).vel()[2] == pytest.approx(-0.981, abs=1e-6)
            # semi-implicit position: sum_{k=1..n} h * v_k, plus at most one
            # compression quantum of drift per step
            n = 1000
            expected_dz = -9.81 * 1e-4 * 1e-4 * n * (n + 1) / 2
            tol = n * sim.store.domain.precision
            assert sim.track(0).pos()[2] - 1.0 == pytest.approx(expected_dz, abs=tol)
        finally:
            sim.close()

    def test_quaternion_unit_norm_under_spin(self):
        sim = simple_sim()
        tpl = sim.load_clump_template(ClumpTemplate.solid_sphere(0.1, 1.0, 0))
        sim.add_clumps(tpl, [[0, 0, 0]])
        sim.track(0).set_ang_vel_local([3.0, 2.0, 1.0])
        sim.set_init_time_step(1e-4)
        sim.initialize()
        try:
            sim.do_dynamics(1.0)
            q = sim.track(0).quat()
            assert abs(np.linalg.norm(q) - 1.0) < 1e-6
        finally:
            sim.close()

    def test_zero_spin_quat_unchanged(self):
        sim = simple_sim()
        tpl = sim.load_clump_template(ClumpTemplate.solid_sphere(0.1, 1.0, 0))
        sim.add_clumps(tpl, [[0, 0, 0]])
        sim.set_init_time_step(1e-4)
        sim.initialize()
        try:
            sim.do_dynamics(0.05)
            assert np.array_equal(sim.track(0).quat(), [1.0, 0.0, 0.0, 0.0])
        finally:
            sim.close()


class TestPrescribedMotion:
    def test_ang_vel_overrides_contacts(self):
        sim = simple_sim()
        tpl = sim.load_clump_template(ClumpTemplate.solid_sphere(0.1, 1.0, 0))
        sim.add_clumps(tpl, [[0, 0, 0]])
        sim.track(0).set_family(10)
        sim.set_family_prescribed_ang_vel(10, "0", "0", "3.14159")
        sim.set_gravity([0, 0, -9.81])  # prescribed family ignores gravity too
        sim.set_init_time_step(1e-4)
        sim.initialize()
        try:
            sim.do_dynamics(0.01)
            assert np.allclose(sim.track(0).ang_vel_local(), [0, 0, 3.14159])
            assert np.allclose(sim.track(0).vel(), 0.0)
        finally:
            sim.close()

    def test_time_expression(self):
        sim = simple_sim()
        tpl = sim.load_clump_template(ClumpTemplate.solid_sphere(0.1, 1.0, 0))
        sim.add_clumps(tpl, [[0, 0, 0]])
        sim.track(0).set_family(4)
        sim.set_family_prescribed_lin_vel(4, "0.5 * sin(2 * t)", "0", "0")
        sim.set_init_time_step(1e-3)
        sim.initialize()
        try:
            sim.do_dynamics(0.25)
            # expressions are evaluated at each step's start time
            t = sim.sim_time - 1e-3
            assert sim.track(0).vel()[0] == pytest.approx(0.5 * math.sin(2 * t), rel=1e-6)
        finally:
            sim.close()

    def test_malformed_expression(self):
        sim = simple_sim()
        with pytest.raises(gf.ConfigurationError, match="prescription"):
            sim.set_family_prescribed_lin_vel(3, "import os", "0", "0")

    def test_fixed_family_never_moves(self):
        sim = simple_sim()
        tpl = sim.load_clump_template(ClumpTemplate.solid_sphere(0.1, 1.0, 0))
        sim.add_clumps(tpl, [[0, 0, 0]])
        sim.track(0).set_family(9)
        sim.set_family_fixed(9)
        sim.set_gravity([0, 0, -9.81])
        sim.set_init_time_step(1e-4)
        sim.initialize()
        try:
            sim.do_dynamics(0.2)
            assert np.allclose(sim.track(0).pos(), [0, 0, 0], atol=1e-11)
            assert np.all(sim.track(0).vel() == 0.0)
        finally:
            sim.close()

    def test_mask_blocks_contact(self):
        sim = simple_sim()
        tpl = sim.load_clump_template(ClumpTemplate.solid_sphere(0.1, 1.0, 0))
        a, b = sim.add_clumps(tpl, [[0, 0, 0], [0.15, 0, 0]])
        sim.track(a).set_family(3)
        sim.track(b).set_family(4)
        sim.set_family_mask(3, 4, False)
        sim.set_init_time_step(1e-4)
        sim.initialize()
        try:
            sim.do_dynamics(0.05)
            # overlapping spheres, masked: no forces, nobody moved
            assert np.allclose(sim.track(a).pos(), [0, 0, 0], atol=1e-11)
            assert sim.create_inspector("avg_sph_contacts").get_value() == 0.0
        finally:
            sim.close()


class TestTrackers:
    def test_set_pos_roundtrip(self):
        sim = simple_sim()
        tpl = sim.load_clump_template(ClumpTemplate.solid_sphere(0.1, 1.0, 0))
        sim.add_clumps(tpl, [[0, 0, 0]])
        sim.initialize()
        try:
            tr = sim.track(0)
            tr.set_pos([0.123456, -0.2, 0.9])
            assert np.allclose(tr.pos(), [0.123456, -0.2, 0.9], atol=1e-11)
        finally:
            sim.close()

    def test_contact_acc_no_contacts(self):
        sim = simple_sim()
        tpl = sim.load_clump_template(ClumpTemplate.solid_sphere(0.1, 1.0, 0))
        sim.add_clumps(tpl, [[0, 0, 0]])
        sim.set_gravity([0, 0, -9.81])
        sim.set_init_time_step(1e-4)
        sim.initialize()
        try:
            sim.do_dynamics(0.01)
            assert np.all(sim.track(0).contact_acc() == 0.0)
        finally:
            sim.close()

    def test_resting_sphere_contact_acc_balances_gravity(self):
        sim = simple_sim(E=1e7)
        tpl = sim.load_clump_template(ClumpTemplate.solid_sphere(0.1, 1.0, 0))
        sim.add_clumps(tpl, [[0, 0, 0.0999]])
        sim.add_analytic([("plane", (0, 0, 0), (0, 0, 1), 0)], family=255)
        sim.set_family_fixed(255)
        sim.set_gravity([0, 0, -9.81])
        sim.set_init_time_step(5e-5)
        sim.initialize()
        try:
            sim.do_dynamics(1.0)
            acc = sim.track(0).contact_acc()
            assert acc[2] == pytest.approx(9.81, rel=0.01)
        finally:
            sim.close()

    def test_external_load_hook(self):
        sim = simple_sim()
        tpl = sim.load_clump_template(ClumpTemplate.solid_sphere(0.1, 2.0, 0))
        sim.add_clumps(tpl, [[0, 0, 0]])
        sim.track(0).set_external_force([1.0, 0, 0])
        sim.set_init_time_step(1e-3)
        sim.initialize()
        try:
            sim.do_dynamics(0.1)
            assert sim.track(0).vel()[0] == pytest.approx(0.05, rel=1e-9)
        finally:
            sim.close()

    def test_unknown_owner(self):
        sim = simple_sim()
        with pytest.raises(gf.ValidationError):
            sim.track(5)


class TestInspectors:
    def test_static_scene_max_absv_zero(self):
        sim = simple_sim()
        tpl = sim.load_clump_template(ClumpTemplate.solid_sphere(0.1, 1.0, 0))
        sim.add_clumps(tpl, [[0, 0, 0], [1, 0, 0]])
        sim.initialize()
        try:
            sim.do_dynamics(0.001)
            assert sim.create_inspector("clump_max_absv").get_value() == 0.0
        finally:
            sim.close()

    def test_avg_contacts_two_touching_among_isolated(self):
        sim = simple_sim()
        tpl = sim.load_clump_template(ClumpTemplate.solid_sphere(0.1, 1.0, 0))
        pts = [[0, 0, 0], [0.19, 0, 0]] + [[i * 0.8 - 1.5, 1.5, 0] for i in range(4)]
        sim.add_clumps(tpl, pts)
        sim.set_init_time_step(1e-5)
        sim.initialize()
        try:
            sim.do_dynamics(1e-5 * 3)
            n = len(pts)
            assert sim.create_inspector("avg_sph_contacts").get_value() == \
                pytest.approx(2.0 / n)
        finally:
            sim.close()

    def test_unknown_quantity(self):
        sim = simple_sim()
        with pytest.raises(gf.ConfigurationError):
            sim.create_inspector("nope")


class TestWatchdog:
    def test_velocity_trip_names_owner(self):
        sim = simple_sim()
        tpl = sim.load_clump_template(ClumpTemplate.solid_sphere(0.1, 1.0, 0))
        sim.add_clumps(tpl, [[0, 0, 0]])
        sim.track(0).set_vel([25.0, 0, 0])
        sim.set_error_out_velocity(20.0)
        sim.set_init_time_step(1e-4)
        sim.initialize()
        try:
            with pytest.raises(gf.DivergenceError, match="owner 0"):
                sim.do_dynamics(0.1)
        finally:
            sim.close()

    def test_out_of_domain_trip(self):
        sim = simple_sim(domain=Domain.cube(1.0))
        tpl = sim.load_clump_template(ClumpTemplate.solid_sphere(0.05, 1.0, 0))
        sim.add_clumps(tpl, [[0.45, 0, 0]])
        sim.track(0).set_vel([3.0, 0, 0])
        sim.set_error_out_velocity(10.0)
        sim.set_init_time_step(1e-3)
        sim.initialize()
        try:
            with pytest.raises(gf.DivergenceError, match="left the domain"):
                sim.do_dynamics(0.5)
        finally:
            sim.close()


class TestSamplers:
    def test_nearest_neighbor_distance(self):
        pts = hcp_lattice((0, 0, 0), (0.5, 0.5, 0.5), 0.1)
        assert pts.shape[0] > 50
        d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
        np.fill_diagonal(d, np.inf)
        assert d.min() == pytest.approx(0.1, rel=1e-9)

    def test_cylinder_clipping(self):
        pts = hcp_sample_cylinder((0.5, -0.25, 1.0), 0.3, 0.2, 0.05)
        r = np.hypot(pts[:, 0] - 0.5, pts[:, 1] + 0.25)
        assert np.all(r <= 0.3 + 1e-9)
        assert np.all(np.abs(pts[:, 2] - 1.0) <= 0.2 + 1e-9)

    def test_thin_cylinder_single_column(self):
        pts = hcp_sample_cylinder((0, 0, 0), 0.02, 0.5, 0.05)
        assert pts.shape[0] >= 2
        assert np.allclose(pts[:, :2], 0.0, atol=1e-12)

    def test_count_matches_enumeration_oracle(self):
        # independent dense enumeration of the same lattice formula
        spacing = 3.0 * 0.005
        center = np.array([0.0, 0.0, 0.0])
        radius = 0.5 - 0.01
        half_h = 1.0 / 6.0
        pts = hcp_sample_cylinder(center, radius, half_h, spacing)
        r = spacing / 2
        dy = math.sqrt(3.0) * r
        dz = 2.0 * math.sqrt(6.0) / 3.0 * r
        count = 0
        kmax = int(half_h / dz) + 2
        span = int(radius / r) + 3
        for k in range(-kmax, kmax + 1):
            z = center[2] + k * dz
            if abs(z - center[2]) > half_h + 1e-12:
                continue
            for j in range(-span, span + 1):
                y = center[1] + j * dy + (k % 2) * dy / 3.0
                for i in range(-span, span + 1):
                    x = center[0] + i * 2 * r + ((j + k) % 2) * r
                    if (x - center[0]) ** 2 + (y - center[1]) ** 2 <= radius**2 + 1e-12:
                        count += 1
        assert pts.shape[0] == count

    def test_box_sampler_bounds(self):
        pts = hcp_sample_box((1, 2, 3), (0.2, 0.3, 0.1), 0.07)
        assert np.all(pts >= np.array([0.8, 1.7, 2.9]) - 1e-9)
        assert np.all(pts <= np.array([1.2, 2.3, 3.1]) + 1e-9)


class TestAdaptation:
    def _sim_with_scene(self):
        sim = simple_sim()
        tpl = sim.load_clump_template(ClumpTemplate.solid_sphere(0.1, 1.0, 0))
        sim.add_clumps(tpl, [[0, 0, 0]])
        return sim

    def test_formula(self):
        sim = self._sim_with_scene()
        sim._margin_cap_steps = 10_000
        sch = sim.scheduler
        sch.step_time_ema = 1e-3
        sch.last_cd_seconds = 1e-2  # CD = 10 step-times -> ceil(12.5) = 13
        sim._adapt_n_max(waited_event=False)
        assert sch.n_max == 13

    def test_floor_at_two(self):
        sim = self._sim_with_scene()
        sim._margin_cap_steps = 10_000
        sch = sim.scheduler
        sch.step_time_ema = 1e-3
        sch.last_cd_seconds = 1e-9
        sim._adapt_n_max(waited_event=False)
        assert sch.n_max == 2

    def test_wait_event_strictly_increases(self):
        sim = self._sim_with_scene()
        sim._margin_cap_steps = 10_000
        sch = sim.scheduler
        sch.step_time_ema = 1e-3
        sch.last_cd_seconds = 1e-9
        sch.n_max = 5
        sim._adapt_n_max(waited_event=True)
        assert sch.n_max > 5

    def test_sync_pins_to_one(self):
        sim = self._sim_with_scene()
        sim.set_sync_mode(True)
        sim.scheduler.step_time_ema = 1e-3
        sim.scheduler.last_cd_seconds = 1.0
        sim._adapt_n_max(waited_event=True)
        assert sim.scheduler.n_max == 1


class TestHandshake:
    def _settle_scene(self, seed=0, n=60, delays=None):
        rng = np.random.default_rng(seed)
        sim = simple_sim(domain=Domain.cube(2.0))
        tpl = sim.load_clump_template(ClumpTemplate.solid_sphere(0.05, 0.1, 0))
        pts = hcp_sample_box((0, 0, 0.3), (0.4, 0.4, 0.2), 0.11)[:n]
        sim.add_clumps(tpl, pts)
        sim.add_box_boundaries(0, family=255)
        sim.set_gravity([0, 0, -9.81])
        sim.set_init_time_step(1e-4)
        sim.set_error_out_velocity(8.0)
        if delays:
            sim._kin_delay, sim._dyn_delay = delays
        return sim

    def test_liveness_under_random_delays(self):
        rng = np.random.default_rng(4)

        def kin_delay():
            time.sleep(float(rng.uniform(0, 2e-3)))

        def dyn_delay():
            time.sleep(float(rng.uniform(0, 2e-4)))

        sim = self._settle_scene(delays=(kin_delay, dyn_delay))
        sim.initialize()
        try:
            sim.do_dynamics(0.05)
            assert sim.sim_time == pytest.approx(0.05, abs=1e-4)
        finally:
            sim.close()

    def test_lookahead_bound_holds(self):
        sim = self._settle_scene()
        sim.initialize()
        try:
            # the per-step assert inside _step_once enforces the bound
            sim.do_dynamics(0.2)
        finally:
            sim.close()

    def test_determinism_bitwise(self):
        outs = []
        for _ in range(2):
            sim = self._settle_scene()
            sim.initialize()
            try:
                sim.do_dynamics(0.3)
                outs.append((sim._pos.copy(),
                             sim.store.lin_vel[: sim.store.n_owners].copy()))
            finally:
                sim.close()
        assert np.array_equal(outs[0][0], outs[1][0])
        assert np.array_equal(outs[0][1], outs[1][1])

    def test_sync_matches_async_positions(self):
        results = {}
        for sync in (True, False):
            sim = self._settle_scene()
            sim.set_sync_mode(sync)
            sim.initialize()
            try:
                sim.do_dynamics(0.4)
                results[sync] = sim._pos.copy()
                margin = sim._current_margin()
            finally:
                sim.close()
        diff = np.max(np.linalg.norm(results[True] - results[False], axis=1))
        assert diff <= 10 * margin

    def test_penetration_bound(self):
        sim = self._settle_scene(n=40)
        sim.initialize()
        try:
            worst_excess = 0.0
            for _ in range(40):
                sim.do_dynamics(5e-3)
                # true overlaps from current state, brute force
                c = sim._sph_centers
                r = sim._sph_radius.astype(float)
                d = np.linalg.norm(c[:, None, :] - c[None, :, :], axis=2)
                rr = r[:, None] + r[None, :]
                np.fill_diagonal(d, np.inf)
                overlap = rr - d
                in_acs = np.zeros_like(overlap, dtype=bool)
                ss = sim._acs.kind == 0
                sa = sim._geom_slot[sim._acs.geom_a[ss]]
                sb = sim._geom_slot[sim._acs.geom_b[ss]]
                in_acs[sa, sb] = in_acs[sb, sa] = True
                missed = (overlap > 0) & ~in_acs
                if missed.any():
                    worst_excess = max(worst_excess, float(overlap[missed].max()))
            assert worst_excess == 0.0
        finally:
            sim.close()


class TestEnergyAndMomentum:
    def test_elastic_bounce_energy(self):
        sim = simple_sim(CoR=1.0, mu=0.0)
        tpl = sim.load_clump_template(ClumpTemplate.solid_sphere(0.05, 0.5, 0))
        a, b = sim.add_clumps(tpl, [[-0.06, 0, 0], [0.06, 0, 0]])
        sim.track(a).set_vel([0.5, 0, 0])
        sim.track(b).set_vel([-0.5, 0, 0])
        sim.set_init_time_step(1e-6)
        sim.initialize()
        try:
            sim.do_dynamics(0.05)
            ke = 0.5 * 0.5 * (np.linalg.norm(sim.track(a).vel()) ** 2
                              + np.linalg.norm(sim.track(b).vel()) ** 2)
            assert ke == pytest.approx(0.5 * 0.5 * (0.5**2 + 0.5**2), rel=0.02)
        finally:
            sim.close()

    def test_two_clump_momentum(self):
        sim = simple_sim(mu=0.4)
        tpl = sim.load_clump_template(ClumpTemplate(
            mass=0.4, moi=np.array([1e-4, 2e-4, 2e-4]),
            spheres=tuple(ClumpSphere(np.array([dx, 0, 0]), 0.05, 0)
                          for dx in (-0.03, 0.03)),
        ))
        a, b = sim.add_clumps(tpl, [[-0.1, 0.0, 0.0], [0.1, 0.02, 0.01]])
        sim.track(a).set_vel([0.8, 0, 0])
        sim.track(b).set_vel([-0.8, 0, 0])
        sim.track(b).set_ang_vel_local([0, 0, 5.0])
        sim.set_init_time_step(1e-6)
        sim.initialize()
        try:
            sim.do_dynamics(0.05)
            p = 0.4 * (sim.track(a).vel() + sim.track(b).vel())
            p_scale = 0.4 * 1.6
            assert np.max(np.abs(p)) / p_scale < 1e-10
        finally:
            sim.close()


class TestActiveBoxes:
    def _column(self, policy=None):
        sim = simple_sim(domain=Domain.cube(3.0))
        tpl = sim.load_clump_template(ClumpTemplate.solid_sphere(0.05, 0.1, 0))
        pts = hcp_sample_box((0, 0, 0.2), (0.3, 0.3, 0.15), 0.102)
        sim.add_clumps(tpl, pts)
        sim.add_analytic([("plane", (0, 0, 0), (0, 0, 1), 0)], family=255)
        sim.set_family_fixed(255)
        sim.set_gravity([0, 0, -9.81])
        sim.set_init_time_step(1e-4)
        sim.set_error_out_velocity(8.0)
        if policy is not None:
            sim.set_active_box_policy(policy)
        return sim

    def test_whole_domain_box_is_noop_bitwise(self):
        base = self._column()
        base.initialize()
        try:
            base.do_dynamics(0.15)
            ref = base._pos.copy()
        finally:
            base.close()
        policy = ActiveBoxPolicy(
            half_extents=[np.array([5.0, 5.0, 5.0])], anchors=[None],
            centers=[np.zeros(3)], refresh_period=0.01,
            frozen_family=200, active_family=0,
        )
        boxed = self._column(policy)
        boxed.initialize()
        try:
            boxed.do_dynamics(0.15)
            assert np.array_equal(boxed._pos, ref)
        finally:
            boxed.close()

    def test_outside_box_frozen(self):
        policy = ActiveBoxPolicy(
            half_extents=[np.array([0.08, 0.08, 5.0])], anchors=[None],
            centers=[np.zeros(3)], refresh_period=0.005,
            frozen_family=200, active_family=0,
        )
        sim = self._column(policy)
        sim.initialize()
        try:
            outside0 = np.nonzero(
                np.abs(sim._pos[:, 0]) > 0.12)[0]
            p0 = sim._pos[outside0].copy()
            sim.do_dynamics(0.1)
            assert np.allclose(sim._pos[outside0], p0, atol=1e-11)
            fams = sim.store.owner_family[outside0]
            assert np.all(fams == 200)
        finally:
            sim.close()


class TestTimingReport:
    def test_report_fields(self):
        sim = simple_sim()
        tpl = sim.load_clump_template(ClumpTemplate.solid_sphere(0.1, 1.0, 0))
        sim.add_clumps(tpl, [[0, 0, 0]])
        sim.set_init_time_step(1e-4)
        sim.initialize()
        try:
            sim.do_dynamics(0.02)
            rep = sim.timing_report()
            for key in ("dyn_force", "dyn_integrate", "dyn_transfer", "dyn_wait",
                        "kin_detect", "kin_transfer", "kin_wait", "steps",
                        "n_max", "margin"):
                assert key in rep
            assert rep["steps"] == 200
        finally:
            sim.close()
