import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import grainforge as gf
from grainforge.core import ClumpSphere, GEOM_SPHERE, GEOM_TRIANGLE, StateStore


def basic_materials():
    mt = gf.MaterialTable()
    mt.load_material({"E": 1e8, "nu": 0.3, "CoR": 0.6, "mu": 0.5, "Crr": 0.0})
    mt.load_material({"E": 1e8, "nu": 0.3, "CoR": 0.6, "mu": 0.2, "Crr": 0.0})
    return mt


class TestMaterialTable:
    def test_load_returns_fresh_ids(self):
        mt = gf.MaterialTable()
        assert mt.load_material({"E": 1e8, "nu": 0.3, "CoR": 0.6,
                                 "mu": 0.5, "Crr": 0.0}) == 0
        assert mt.load_material({"E": 2e8, "nu": 0.2}) == 1
        assert mt.get("E", 1) == 2e8

    def test_pair_override_symmetric(self):
        mt = basic_materials()
        mt.set_pair("mu", 0, 1, 0.5)
        assert mt.get_pair("mu", 1, 0) == 0.5
        assert mt.get_pair("mu", 0, 1) == 0.5

    def test_min_mixing_default(self):
        mt = basic_materials()
        assert mt.get_pair("mu", 0, 1) == pytest.approx(0.2)
        assert mt.get_pair("CoR", 0, 1) == pytest.approx(0.6)

    def test_nu_out_of_range(self):
        mt = gf.MaterialTable()
        with pytest.raises(gf.ValidationError, match="nu out of range"):
            mt.load_material({"E": 1e8, "nu": -0.1})
        with pytest.raises(gf.ValidationError, match="nu"):
            mt.load_material({"E": 1e8, "nu": 0.5})

    def test_empty_props_rejected(self):
        with pytest.raises(gf.ValidationError):
            gf.MaterialTable().load_material({})

    def test_missing_property_named(self):
        mt = basic_materials()
        with pytest.raises(gf.ConfigurationError, match="tension"):
            mt.get("tension", 0)

    def test_pair_matrix_symmetric(self):
        mt = basic_materials()
        mt.set_pair("mu", 0, 1, 0.35)
        m = mt.pair_matrix("mu")
        assert np.allclose(m, m.T)
        assert m[0, 1] == pytest.approx(0.35)


class TestClumpTemplate:
    def test_single_sphere_moi(self):
        # r = 0.2 m, mass 5 kg -> MOI = (2/5) m r^2 = 0.08 per axis
        t = gf.ClumpTemplate.solid_sphere(0.2, 5.0, 0)
        assert np.allclose(t.moi, 0.4 * 5.0 * 0.2**2)
        assert len(t.spheres) == 1

    def test_scaling_laws(self):
        t = gf.ClumpTemplate(
            mass=2.0, moi=np.array([1.0, 2.0, 3.0]),
            spheres=(ClumpSphere(np.array([0.1, 0.0, 0.0]), 0.05, 0),),
        )
        s = t.scaled(2.0)
        assert s.mass == pytest.approx(16.0)
        assert np.allclose(s.moi, [32.0, 64.0, 96.0])
        assert s.spheres[0].radius == pytest.approx(0.1)
        assert np.allclose(s.spheres[0].offset, [0.2, 0.0, 0.0])

    def test_scale_by_paper_factor(self):
        t = gf.ClumpTemplate(
            mass=2.6e3 * 5.5886717, moi=np.array([2.928, 2.6029, 3.9908]) * 2.6e3,
            spheres=tuple(
                ClumpSphere(np.array([dx, 0.0, 0.0]), 1.0, 0)
                for dx in (-0.5, 0.0, 0.5)
            ),
        )
        s = t.scaled(0.005)
        assert all(c.radius == pytest.approx(0.005) for c in s.spheres)
        assert s.mass == pytest.approx(2.6e3 * 5.5886717 * 0.005**3)

    @given(a=st.floats(0.1, 10.0), b=st.floats(0.1, 10.0))
    @settings(max_examples=30, deadline=None)
    def test_scaling_composes(self, a, b):
        t = gf.ClumpTemplate(
            mass=1.5, moi=np.array([1.0, 1.1, 1.2]),
            spheres=(ClumpSphere(np.array([0.2, -0.1, 0.3]), 0.07, 0),),
        )
        lhs = t.scaled(a).scaled(b)
        rhs = t.scaled(a * b)
        assert lhs.mass == pytest.approx(rhs.mass, rel=1e-6)
        assert np.allclose(lhs.moi, rhs.moi, rtol=1e-6)
        assert lhs.spheres[0].radius == pytest.approx(rhs.spheres[0].radius, rel=1e-6)
        assert np.allclose(lhs.spheres[0].offset, rhs.spheres[0].offset, rtol=1e-6)

    def test_invalid_rejected(self):
        with pytest.raises(gf.ValidationError):
            gf.ClumpTemplate(mass=-1.0, moi=np.ones(3),
                             spheres=(ClumpSphere(np.zeros(3), 0.1, 0),))
        with pytest.raises(gf.ValidationError):
            gf.ClumpTemplate(mass=1.0, moi=np.ones(3), spheres=())
        with pytest.raises(gf.ValidationError):
            gf.ClumpTemplate(mass=1.0, moi=np.ones(3),
                             spheres=(ClumpSphere(np.zeros(3), -0.1, 0),))


class TestCompressedPosition:
    def test_origin(self):
        dom = gf.Domain((0, 0, 0), (1, 1, 1))
        v, s = gf.encode_position([0.0, 0.0, 0.0], dom)
        assert v == 0 and tuple(s) == (0, 0, 0)
        assert np.allclose(gf.decode_position(v, s, dom), 0.0)

    def test_roundtrip_precision_claim(self):
        # 1 m domain, 21-bit voxels: voxel edge 2^-21, precision 2^-37
        dom = gf.Domain((0, 0, 0), (1, 1, 1))
        assert dom.voxel_edge == pytest.approx(2.0**-21)
        assert dom.precision == pytest.approx(2.0**-37)
        assert dom.precision < 1e-11
        p = np.array([0.5, 0.25, 0.75])
        v, s = gf.encode_position(p, dom)
        back = gf.decode_position(v, s, dom)
        assert np.max(np.abs(back - p)) <= 7.3e-12

    def test_out_of_domain(self):
        dom = gf.Domain((0, 0, 0), (1, 1, 1))
        with pytest.raises(gf.OutOfDomainError):
            gf.encode_position([1.5, 0.0, 0.0], dom)

    @given(st.lists(st.floats(0.0, 1.0, allow_nan=False), min_size=3, max_size=3))
    @settings(max_examples=200, deadline=None)
    def test_roundtrip_property(self, xyz):
        dom = gf.Domain((0, 0, 0), (1, 1, 1))
        v, s = gf.encode_position(xyz, dom)
        back = gf.decode_position(v, s, dom)
        assert np.max(np.abs(back - np.asarray(xyz))) <= dom.voxel_edge / 2**16 * (1 + 1e-9)

    def test_batch_roundtrip(self):
        rng = np.random.default_rng(3)
        dom = gf.Domain((-2.0, 0.5, -1.0), (3.0, 2.5, 0.0))
        pts = rng.uniform(dom.lo, dom.hi, (5000, 3))
        v, s = gf.encode_position(pts, dom)
        back = gf.decode_position(v, s, dom)
        assert np.max(np.abs(back - pts)) <= dom.voxel_edge / 2**16 * (1 + 1e-9)


class TestFamilyTable:
    def test_mask_symmetric(self):
        ft = gf.FamilyTable()
        ft.set_mask(3, 4, False)
        assert not ft.allowed(4, 3)
        assert not ft.allowed(3, 4)
        assert ft.allowed(3, 3)

    def test_family_range_checked(self):
        ft = gf.FamilyTable()
        with pytest.raises(gf.ValidationError):
            ft.set_mask(0, 256, False)


class TestStateStore:
    def _store(self):
        mt = basic_materials()
        return StateStore(gf.Domain.cube(2.0), mt)

    def test_add_clumps_counts(self):
        s = self._store()
        t = s.register_template(gf.ClumpTemplate(
            mass=1.0, moi=np.ones(3),
            spheres=tuple(ClumpSphere(np.array([dx, 0, 0]), 0.05, 0)
                          for dx in (-0.05, 0.0, 0.05)),
        ))
        owners = s.add_clumps(t, [[0, 0, 0], [0.3, 0, 0], [0, 0.3, 0], [0, 0, 0.3]])
        assert len(owners) == 4
        assert s.sphere_count() == 12
        assert s.add_clumps(t, np.zeros((0, 3))) == []

    def test_owner_geometry_consistency(self):
        s = self._store()
        t = s.register_template(gf.ClumpTemplate.solid_sphere(0.05, 1.0, 0))
        s.add_clumps(t, [[0, 0, 0], [0.5, 0, 0]])
        s.add_mesh(np.array([[[0, 0, 0], [1, 0, 0], [0, 1, 0]]]), 0)
        s.add_analytic([("plane", (0, 0, 0), (0, 0, 1), 0)])
        seen = {}
        for owner, geoms in enumerate(s.owner_geoms):
            for g in geoms:
                assert g not in seen
                seen[g] = owner
                assert s.geom_owner[g] == owner
        assert len(seen) == s.n_geoms

    def test_degenerate_triangle_reports_index(self):
        s = self._store()
        tris = np.array([
            [[0, 0, 0], [1, 0, 0], [0, 1, 0]],
            [[0, 0, 0], [1, 0, 0], [2, 0, 0]],  # zero area
        ])
        with pytest.raises(gf.ValidationError, match="facet index 1"):
            s.add_mesh(tris, 0)

    def test_box_boundaries_are_six_planes(self):
        s = self._store()
        owner = s.add_box_boundaries(0, family=255)
        assert len(s.owner_geoms[owner]) == 6

    def test_mesh_scale_and_family(self):
        s = self._store()
        m = s.add_mesh(np.array([[[0, 0, 0], [1, 0, 0], [0, 1, 0]]]), 0)
        s.scale_mesh(m, 2.0)
        assert np.allclose(s.geom_params[s.owner_geoms[m][0]][:9],
                           [0, 0, 0, 2, 0, 0, 0, 2, 0])
        s.set_family(m, 10)
        assert s.owner_family[m] == 10

    def test_position_out_of_domain_rejected(self):
        s = self._store()
        t = s.register_template(gf.ClumpTemplate.solid_sphere(0.05, 1.0, 0))
        with pytest.raises(gf.OutOfDomainError):
            s.add_clumps(t, [[5.0, 0, 0]])
