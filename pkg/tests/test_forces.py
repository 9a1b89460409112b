import math

import numpy as np
import pytest

import grainforge as gf
from grainforge import forces as F
from grainforge.core import MaterialTable


def granular_materials(cor=0.6, mu=0.5, crr=0.0):
    mt = MaterialTable()
    mt.load_material({"E": 1e8, "nu": 0.3, "CoR": cor, "mu": mu, "Crr": crr})
    return mt


def make_ctx(overlap, mt=None, v_a=(0, 0, 0), v_b=(0, 0, 0),
             w_a=(0, 0, 0), w_b=(0, 0, 0), radius=0.005, wildcards=None,
             separation_axis=(1.0, 0.0, 0.0), mass=1e-3):
    """Two equal spheres along +x; A on the positive side."""
    n = np.asarray(separation_axis, dtype=float)
    d = 2 * radius - overlap
    pa = 0.5 * d * n
    pb = -0.5 * d * n
    return F.ContactContext(
        contact_pnt=0.5 * (pa + pb) + n * 0.0,
        b2a=n.copy(),
        overlap_depth=overlap,
        ts=1e-6,
        time=0.0,
        a_owner_pos=pa, b_owner_pos=pb,
        a_ori_q=np.array([1.0, 0, 0, 0]), b_ori_q=np.array([1.0, 0, 0, 0]),
        a_owner_mass=mass, b_owner_mass=mass,
        a_radius=radius, b_radius=radius,
        a_mat=0, b_mat=0,
        a_lin_vel=np.asarray(v_a, dtype=float),
        b_lin_vel=np.asarray(v_b, dtype=float),
        a_rot_vel=np.asarray(w_a, dtype=float),
        b_rot_vel=np.asarray(w_b, dtype=float),
        wildcards=dict(wildcards or {}),
    )


class TestEffectiveParams:
    def test_spec_value(self):
        e_cnt, g_cnt = gf.effective_contact_params(1e8, 0.3, 1e8, 0.3)
        # independent scalar evaluation of the definition
        assert e_cnt == pytest.approx(1.0 / (2 * (1 - 0.09) / 1e8), rel=1e-12)
        assert e_cnt == pytest.approx(5.4945e7, rel=1e-4)
        assert g_cnt == pytest.approx(
            1.0 / (2 * (2 - 0.3) * (1 + 0.3) / 1e8 * 2), rel=1e-12)

    def test_zero_poisson(self):
        e_cnt, _ = gf.effective_contact_params(1e8, 0.0, 1e8, 0.0)
        assert e_cnt == pytest.approx(5e7)

    def test_rigid_limit(self):
        e_cnt, _ = gf.effective_contact_params(1e20, 0.3, 1e8, 0.25)
        assert e_cnt == pytest.approx(1e8 / (1 - 0.25**2), rel=1e-6)


class TestBeta:
    def test_cor_06(self):
        loge = math.log(0.6)
        assert F.restitution_damping(0.6) == pytest.approx(
            loge / math.sqrt(loge**2 + math.pi**2))
        assert F.restitution_damping(0.6) == pytest.approx(-0.1605, abs=2e-4)

    def test_clamped_below(self):
        assert F.restitution_damping(0.0) == pytest.approx(
            math.log(1e-12) / math.sqrt(math.log(1e-12) ** 2 + math.pi**2))


class TestHertzNormal:
    def test_spec_magnitude(self):
        # R = 0.005, E = 1e8, nu = 0.3, delta = 1e-5, no velocity
        mt = granular_materials()
        ctx = make_ctx(1e-5)
        res = F.evaluate_default_model(ctx, mt)
        e_cnt, _ = gf.effective_contact_params(1e8, 0.3, 1e8, 0.3)
        expected = 4.0 / 3.0 * e_cnt * math.sqrt(0.0025 * 1e-5) * 1e-5
        assert np.linalg.norm(res.force) == pytest.approx(expected, rel=1e-9)
        assert expected == pytest.approx(0.116, abs=2e-3)
        # pure normal force along B2A
        assert res.force[1] == 0.0 and res.force[2] == 0.0

    def test_zero_overlap_zero_force(self):
        mt = granular_materials()
        res = F.evaluate_default_model(make_ctx(0.0), mt)
        assert np.all(res.force == 0.0)
        assert np.all(res.torque_only_force == 0.0)

    def test_false_positive_leaves_history(self):
        mt = granular_materials()
        wild = {"delta_tan_x": 0.25, "delta_time": 3.0}
        res = F.evaluate_default_model(make_ctx(-1e-4, wildcards=wild), mt)
        assert np.all(res.force == 0.0)
        assert res.wildcards["delta_tan_x"] == pytest.approx(0.25)
        assert res.wildcards["delta_time"] == pytest.approx(3.0)  # no advance

    def test_delta_time_advances_on_contact(self):
        mt = granular_materials()
        res = F.evaluate_default_model(make_ctx(1e-5), mt)
        assert res.wildcards["delta_time"] == pytest.approx(1e-6)


class TestMindlin:
    def test_no_velocity_no_history_no_tangent(self):
        mt = granular_materials()
        res = F.evaluate_default_model(make_ctx(1e-5), mt)
        assert res.force[1] == 0.0 and res.force[2] == 0.0

    def test_history_along_normal_projected_out(self):
        mt = granular_materials()
        wild = {"delta_tan_x": 1e-5}  # aligned with B2A = +x
        res = F.evaluate_default_model(make_ctx(1e-5, wildcards=wild), mt)
        assert res.wildcards["delta_tan_x"] == pytest.approx(0.0, abs=1e-12)
        assert res.force[1] == 0.0 and res.force[2] == 0.0

    def test_single_step_shear_force(self):
        # tangential velocity vt along y for one step: |Ft| = kt h vt + gt vt
        mt = granular_materials(mu=10.0)  # huge mu: no capping
        vt = 1e-3
        ctx = make_ctx(1e-5, v_a=(0, vt, 0))
        res = F.evaluate_default_model(ctx, mt)
        e_cnt, g_cnt = gf.effective_contact_params(1e8, 0.3, 1e8, 0.3)
        sqrt_rd = math.sqrt(1e-5 * 0.0025)
        kt = 8 * g_cnt * sqrt_rd
        beta = F.restitution_damping(0.6)
        gt = -2 * math.sqrt(5 / 6) * beta * math.sqrt(5e-4 * kt)
        expected = kt * 1e-6 * vt + gt * vt
        assert abs(res.force[1] + expected) / expected < 1e-6

    def test_capping_and_backsolve(self):
        mt = granular_materials(mu=0.2)
        ctx = make_ctx(1e-5, v_a=(0, 5.0, 0))  # violent shear
        res = F.evaluate_default_model(ctx, mt)
        fn = res.force[0]
        ft = math.hypot(res.force[1], res.force[2])
        assert ft <= 0.2 * abs(fn) * (1 + 1e-6)
        # stored history regenerates exactly the capped force
        e_cnt, g_cnt = gf.effective_contact_params(1e8, 0.3, 1e8, 0.3)
        sqrt_rd = math.sqrt(1e-5 * 0.0025)
        kt = 8 * g_cnt * sqrt_rd
        beta = F.restitution_damping(0.6)
        gt = -2 * math.sqrt(5 / 6) * beta * math.sqrt(5e-4 * kt)
        u = np.array([res.wildcards["delta_tan_x"], res.wildcards["delta_tan_y"],
                      res.wildcards["delta_tan_z"]], dtype=float)
        regenerated = -kt * u - gt * np.array([0.0, 5.0, 0.0])
        assert np.allclose(regenerated[1], res.force[1], rtol=1e-5)

    def test_mu_zero_skips_tangential(self):
        mt = granular_materials(mu=0.0)
        res = F.evaluate_default_model(make_ctx(1e-5, v_a=(0, 1.0, 0)), mt)
        assert res.force[1] == 0.0


class TestRolling:
    def test_zero_spin_zero_torque(self):
        mt = granular_materials(crr=0.2)
        res = F.evaluate_default_model(make_ctx(1e-5), mt)
        assert np.all(res.torque_only_force == 0.0)

    def test_gate_then_magnitude(self):
        mt = granular_materials(mu=0.0, crr=0.2)
        # spinning sphere B: v_rot nonzero
        young, nu = 1e8, 0.3
        e_cnt, _ = gf.effective_contact_params(young, nu, young, nu)
        mass_eff = 5e-4
        beta = F.restitution_damping(0.6)
        r_eff = math.sqrt(0.0025)
        kn_simple = 4 / 3 * e_cnt * math.sqrt(r_eff)
        gn_simple = -2 * math.sqrt(5 / 3 * mass_eff * e_cnt) * beta * r_eff**0.25
        d = gn_simple / (2 * math.sqrt(kn_simple * mass_eff))
        t_col = math.pi * math.sqrt(mass_eff / (kn_simple * (1 - d * d)))
        # during the transient: no rolling torque
        wild = {"delta_time": 0.0}
        ctx = make_ctx(1e-5, w_b=(0, 0, 10.0), wildcards=wild)
        res = F.evaluate_default_model(ctx, mt)
        assert np.all(res.torque_only_force == 0.0)
        # after the transient: |torque force| = Crr |Fn|
        wild = {"delta_time": t_col * 1.5}
        ctx = make_ctx(1e-5, w_b=(0, 0, 10.0), wildcards=wild)
        res = F.evaluate_default_model(ctx, mt)
        assert np.linalg.norm(res.torque_only_force) == pytest.approx(
            0.2 * np.linalg.norm(res.force), rel=1e-9)

    def test_crr_zero_skips(self):
        mt = granular_materials(crr=0.0)
        ctx = make_ctx(1e-5, w_b=(0, 0, 10.0), wildcards={"delta_time": 100.0})
        res = F.evaluate_default_model(ctx, mt)
        assert np.all(res.torque_only_force == 0.0)


class TestPluginEquivalence:
    def test_generic_path_matches_jit_bitwise(self):
        rng = np.random.default_rng(42)
        model = F.DEFAULT_MODEL
        mt = granular_materials(cor=0.55, mu=0.4, crr=0.1)
        stack = F.material_pair_stack(mt, model)
        for _ in range(300):
            overlap = float(rng.uniform(-1e-5, 3e-5))
            wild0 = rng.normal(scale=1e-5, size=4).astype(np.float32)
            wild0[3] = abs(wild0[3]) * 1e5
            args = (
                overlap, 1e-6, 0.0,
                1.0, 0.0, 0.0,
                float(rng.normal(scale=0.1)), float(rng.normal(scale=0.1)),
                float(rng.normal(scale=0.1)),
                float(rng.normal(scale=0.5)), float(rng.normal(scale=0.5)),
                float(rng.normal(scale=0.5)),
                5e-4, 0.005, 0.005, 0, 0,
            )
            wild_py = wild0.copy()
            wild_jit = wild0.copy()
            out_py = np.zeros(6)
            out_jit = np.zeros(6)
            model.core(*args, stack, wild_py, out_py)
            model.jit_core(*args, stack, wild_jit, out_jit)
            assert np.array_equal(out_py, out_jit)
            assert np.array_equal(wild_py, wild_jit)

    def test_registry_lookup(self):
        assert gf.get_force_model("hertz_mindlin") is F.DEFAULT_MODEL
        with pytest.raises(gf.ConfigurationError):
            gf.get_force_model("nope")

    def test_missing_property_errors_by_name(self):
        mt = MaterialTable()
        mt.load_material({"E": 1e8, "nu": 0.3})
        with pytest.raises(gf.ConfigurationError, match="CoR"):
            F.material_pair_stack(mt, F.DEFAULT_MODEL)


def granite_materials():
    mt = MaterialTable()
    mt.load_material({"E": 60e9, "nu": 0.25, "CoR": 0.5, "mu": 0.3,
                      "Crr": 0.0, "tension": -9.3e6, "cohesion": 200e6})
    return mt


class TestBreakage:
    R = 12e-3

    def eval_bond(self, overlap, initial_length, unbroken=1.0, v_a=(0, 0, 0),
                  w_b=(0, 0, 0)):
        mt = granite_materials()
        wild = {"unbroken": unbroken, "initialLength": initial_length}
        ctx = make_ctx(overlap, v_a=v_a, w_b=w_b, radius=self.R,
                       wildcards=wild, mass=0.019)
        stack = F.material_pair_stack(mt, F.BREAKAGE_MODEL)
        return F.BREAKAGE_MODEL.evaluate(ctx, stack)

    def test_elastic_origin(self):
        res = self.eval_bond(0.0, 0.0)
        assert np.linalg.norm(res.force) == pytest.approx(0.0, abs=1e-12)
        assert res.wildcards["unbroken"] == 1.0

    def test_granite_yield_threshold(self):
        # deltaY = tension * pi * R^2 / kn with kn = E_eq * R/2
        e_eq, _ = gf.effective_contact_params(60e9, 0.25, 60e9, 0.25)
        kn = e_eq * self.R / 2
        delta_y = -9.3e6 * math.pi * self.R**2 / kn
        assert delta_y < 0
        # just above yield: elastic branch F = kn * deltaD
        d = delta_y * 0.5
        res = self.eval_bond(d, 0.0)
        assert res.force[0] == pytest.approx(kn * d, rel=1e-6)
        # between yield and failure: softening branch
        d = delta_y * 2.0
        res = self.eval_bond(d, 0.0)
        delta_u = 3 * delta_y
        expected = ((delta_u - d) - delta_y) * kn * 0.5
        assert res.force[0] == pytest.approx(expected, rel=1e-6)
        assert res.wildcards["unbroken"] == 1.0

    def test_tensile_failure_latches(self):
        e_eq, _ = gf.effective_contact_params(60e9, 0.25, 60e9, 0.25)
        kn = e_eq * self.R / 2
        delta_u = 3 * (-9.3e6 * math.pi * self.R**2 / kn)
        res = self.eval_bond(delta_u * 1.1, 0.0)
        assert res.wildcards["unbroken"] == -1.0
        # latched: a later gentle state does not resurrect the bond
        res2 = self.eval_bond(0.0, 0.0, unbroken=-1.0)
        assert res2.wildcards["unbroken"] == -1.0

    def test_broken_contact_falls_back_to_hertz(self):
        res = self.eval_bond(1e-5, 0.0, unbroken=-1.0)
        e_cnt, _ = gf.effective_contact_params(60e9, 0.25, 60e9, 0.25)
        expected = 4 / 3 * e_cnt * math.sqrt(self.R / 2 * 1e-5) * 1e-5
        assert res.force[0] == pytest.approx(expected, rel=1e-9)

    def test_broken_separated_no_force(self):
        res = self.eval_bond(-1e-5, 0.0, unbroken=-1.0)
        assert np.all(res.force == 0.0)

    def test_bending_is_torque_only_and_capped(self):
        res = self.eval_bond(1e-5, 0.0, w_b=(0, 0, 40.0))
        e_eq, _ = gf.effective_contact_params(60e9, 0.25, 60e9, 0.25)
        kn = e_eq * self.R / 2
        kt = 0.25 * kn
        var1 = 1e-6 * (self.R * self.R * kt) / self.R
        var2 = 0.1 * np.linalg.norm(res.force)
        assert np.linalg.norm(res.torque_only_force) == pytest.approx(
            min(var1, var2), rel=1e-6)


class TestBonds:
    def test_no_bond_beyond_range(self):
        centers = np.array([[0.0, 0, 0], [0.05, 0, 0]])
        radii = np.full(2, 0.012, dtype=np.float32)
        bonds, stats = F.build_bonds(centers, radii, np.arange(2), np.arange(2), 0.7)
        assert bonds.size == 0

    def test_bond_inside_range_records_initial_length(self):
        centers = np.array([[0.0, 0, 0], [0.02, 0, 0]])
        radii = np.full(2, 0.012, dtype=np.float32)
        bonds, stats = F.build_bonds(centers, radii, np.arange(2), np.arange(2), 1.0)
        assert bonds.size == 1
        assert bonds.wildcards["unbroken"][0] == 1.0
        assert bonds.wildcards["initialLength"][0] == pytest.approx(0.004, rel=1e-5)

    def test_threshold_strict(self):
        radii = np.full(2, 0.012, dtype=np.float32)
        reach = float(radii[0]) + float(radii[1])  # stored-precision range
        centers = np.array([[0.0, 0, 0], [reach, 0, 0]])
        _, stats = F.build_bonds(centers, radii, np.arange(2), np.arange(2), 1.0)
        assert stats["count"] == 0  # exactly at range: no bond
        _, stats = F.build_bonds(centers, radii, np.arange(2), np.arange(2), 1.0001)
        assert stats["count"] == 1


class TestReduce:
    def test_cross_product_torque(self):
        owner_pos = np.zeros((2, 3))
        owner_pos[1] = [10, 0, 0]
        acc_f, acc_t = F.reduce_to_owners(
            owner_a=[0], owner_b=[1],
            forces=[[0.0, 0.0, 1.0]], tofs=[[0.0, 0.0, 0.0]],
            contact_points=[[1.0, 0.0, 0.0]],
            owner_pos=owner_pos, mass=np.zeros(2), gravity=np.zeros(3),
        )
        assert np.allclose(acc_t[0], [0.0, -1.0, 0.0])
        assert np.allclose(acc_f[0], [0, 0, 1])
        assert np.allclose(acc_f[1], [0, 0, -1])

    def test_gravity_term(self):
        acc_f, _ = F.reduce_to_owners(
            owner_a=np.zeros(0, int), owner_b=np.zeros(0, int),
            forces=np.zeros((0, 3)), tofs=np.zeros((0, 3)),
            contact_points=np.zeros((0, 3)),
            owner_pos=np.zeros((1, 3)), mass=[2.0], gravity=[0, 0, -9.81],
        )
        assert np.allclose(acc_f[0], [0, 0, -19.62])

    def test_newton_third_law_bitwise(self):
        rng = np.random.default_rng(0)
        n = 50
        forces = rng.normal(size=(n, 3))
        tofs = rng.normal(size=(n, 3)) * 0.1
        cps = rng.normal(size=(n, 3))
        owner_pos = np.zeros((2, 3))
        acc_f, _ = F.reduce_to_owners(
            owner_a=np.zeros(n, int), owner_b=np.ones(n, int),
            forces=forces, tofs=tofs, contact_points=cps,
            owner_pos=owner_pos, mass=np.zeros(2), gravity=np.zeros(3),
        )
        # accumulated at the same lever order: exact negation
        assert np.array_equal(acc_f[0], -acc_f[1])

    def test_torque_only_force_produces_pure_torque(self):
        owner_pos = np.zeros((2, 3))
        owner_pos[1] = [2, 0, 0]
        acc_f, acc_t = F.reduce_to_owners(
            owner_a=[0], owner_b=[1],
            forces=[[0.0, 0.0, 0.0]], tofs=[[0.0, 1.0, 0.0]],
            contact_points=[[1.0, 0.0, 0.0]],
            owner_pos=owner_pos, mass=np.zeros(2), gravity=np.zeros(3),
        )
        assert np.allclose(acc_f, 0.0)
        assert np.allclose(acc_t[0], [0.0, 0.0, 1.0])
        assert np.allclose(acc_t[1], [0.0, 0.0, 1.0])  # -r_b x -F


class TestRestitutionOracle:
    """Head-on impact integrated with an independent fine RK4 two-body
    oracle; the engine must recover the same post-impact speed."""

    @staticmethod
    def _rk4_impact(cor, v0=1.0, radius=0.05, mass=0.5, young=1e7, nu=0.3):
        e_cnt, _ = gf.effective_contact_params(young, nu, young, nu)
        m_eff = mass / 2.0
        r_eff = radius / 2.0
        beta = F.restitution_damping(cor)

        def accel(delta, ddelta):
            # overlap coordinate: m_eff delta'' = -F_n(delta, delta')
            if delta <= 0.0:
                return 0.0
            sn = 2 * e_cnt * math.sqrt(r_eff * delta)
            k_n = 2 / 3 * sn
            gamma_n = 2 * math.sqrt(5 / 6) * beta * math.sqrt(sn * m_eff)
            return -(k_n * delta - gamma_n * ddelta) / m_eff

        delta, ddelta = 1e-12, v0
        h = 2e-8
        for _ in range(1_000_000):
            k1v = accel(delta, ddelta)
            k1x = ddelta
            k2v = accel(delta + 0.5 * h * k1x, ddelta + 0.5 * h * k1v)
            k2x = ddelta + 0.5 * h * k1v
            k3v = accel(delta + 0.5 * h * k2x, ddelta + 0.5 * h * k2v)
            k3x = ddelta + 0.5 * h * k2v
            k4v = accel(delta + h * k3x, ddelta + h * k3v)
            k4x = ddelta + h * k3v
            delta += h / 6 * (k1x + 2 * k2x + 2 * k3x + k4x)
            ddelta += h / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
            if delta <= 0.0:
                return -ddelta
        raise RuntimeError("no separation")

    @pytest.mark.parametrize("cor", [0.3, 0.6, 0.9])
    def test_oracle_close_to_nominal(self, cor):
        out = self._rk4_impact(cor)
        assert abs(out - cor) / cor < 0.08
