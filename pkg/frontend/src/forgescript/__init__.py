"""Classic solver-object scripting API over the grainforge engine.

Method names follow the familiar DEM scripting convention (LoadMaterial,
AddClumps, DoDynamics, ...); containers are plain python: dictionaries for
material properties, lists or numpy arrays for 3-vectors.  The layer never
reimplements solver logic; calls are buffered until Initialize() assembles
the native simulator, then forwarded 1:1.
"""

from __future__ import annotations

import numpy as np

import grainforge as gf
from grainforge import io as gio
from grainforge.engine import hcp_sample_cylinder

__version__ = gf.__version__

_BOUNDARY_FAMILY = 254
_EXTERNAL_FAMILY = 255


def _vec3(value, name="vector"):
    arr = np.asarray(value, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise TypeError(f"{name} must have exactly 3 components, got {value!r}")
    return arr


class HCPSampler:
    """Hexagonal close-packing sampler; spacing is the center separation."""

    def __init__(self, separation: float):
        self.separation = float(separation)

    def SampleCylinderZ(self, center, radius, half_height):
        pts = hcp_sample_cylinder(_vec3(center, "center"), float(radius),
                                  float(half_height), self.separation)
        return [list(p) for p in pts]


class ClumpTemplateHandle:
    def __init__(self, solver, mass, moi, components, material):
        self._solver = solver
        self.mass = float(mass)
        self.moi = _vec3(moi, "MOI")
        self.components = components  # [(offset, radius), ...]
        self.material = material
        self._scale = 1.0

    def Scale(self, factor):
        self._scale *= float(factor)
        return self

    def _build(self):
        tpl = gf.ClumpTemplate(
            mass=self.mass, moi=self.moi,
            spheres=tuple(gf.ClumpSphere(np.asarray(off, dtype=np.float64), r,
                                         self.material)
                          for off, r in self.components),
        )
        return tpl.scaled(self._scale) if self._scale != 1.0 else tpl


class ExternalObjectHandle:
    """Analytic object assembled from planes and cylinders."""

    def __init__(self, solver):
        self._solver = solver
        self.components = []
        self.family = _EXTERNAL_FAMILY
        self.owner = None

    def AddPlane(self, point, normal, material):
        self.components.append(("plane", list(_vec3(point, "point")),
                                list(_vec3(normal, "normal")), material))
        return self

    def AddCylinder(self, center, axis, radius, material, normal=0):
        # normal 0: container wall facing the axis; 1: solid column
        facing = 1.0 if normal else -1.0
        self.components.append(("cylinder", list(_vec3(center, "center")),
                                list(_vec3(axis, "axis")), float(radius),
                                facing, material))
        return self

    def SetFamily(self, family):
        self.family = int(family)
        return self


class MeshHandle:
    def __init__(self, solver, triangles, material):
        self._solver = solver
        self.triangles = triangles
        self.material = material
        self.family = 0
        self.scale = None
        self.owner = None
        self._pending_pos = None

    def GetNumTriangles(self):
        return int(self.triangles.shape[0])

    def Scale(self, factors):
        self.scale = np.broadcast_to(
            np.asarray(factors, dtype=np.float64).reshape(-1), (3,)
        ).copy() if np.asarray(factors).ndim else np.full(3, float(factors))
        return self

    def SetFamily(self, family):
        self.family = int(family)
        if self._solver._sim is not None and self.owner is not None:
            self._solver._sim.store.set_family(self.owner, self.family)
        return self


class TrackerHandle:
    def __init__(self, solver, target):
        self._solver = solver
        self._target = target

    def _tracker(self):
        sim = self._solver._sim
        if sim is None:
            raise RuntimeError("Initialize() must run before tracker queries")
        return sim.track(self._target.owner if hasattr(self._target, "owner")
                         else self._target)

    def SetPos(self, xyz):
        xyz = _vec3(xyz, "position")
        if self._solver._sim is None:
            self._solver._pending_positions.append((self._target, xyz))
        else:
            self._tracker().set_pos(xyz)

    def Pos(self):
        return list(self._tracker().pos())

    def Vel(self):
        return list(self._tracker().vel())

    def MOI(self):
        return list(self._tracker().moi())

    def Mass(self):
        return float(self._tracker().mass())

    def ContactAcc(self):
        return list(self._tracker().contact_acc())

    def ContactAngAccLocal(self):
        return list(self._tracker().contact_ang_acc_local())

    def SetVel(self, v):
        self._tracker().set_vel(_vec3(v, "velocity"))

    def AddExternalForce(self, f):
        self._tracker().set_external_force(_vec3(f, "force"))


class InspectorHandle:
    def __init__(self, solver, quantity):
        self._solver = solver
        self.quantity = quantity

    def GetValue(self):
        sim = self._solver._sim
        if sim is None:
            raise RuntimeError("Initialize() must run before inspector queries")
        return float(sim.create_inspector(self.quantity).get_value())


class DEMSolver:
    """The solver object: build the scene, Initialize, then DoDynamics."""

    def __init__(self):
        self._sim = None
        self._verbosity = "INFO"
        self._out_content = ("XYZ", "ABSV")
        self._materials = []
        self._material_pairs = []
        self._domain_size = None
        self._bounding_bc = None
        self._externals = []
        self._meshes = []
        self._templates = []
        self._clump_batches = []
        self._prescriptions = []
        self._masks = []
        self._step = 1e-5
        self._gravity = np.array([0.0, 0.0, -9.81])
        self._v_err = 50.0
        self._pending_positions = []
        self._force_model = "hertz_mindlin"

    # -- meta ---------------------------------------------------------------

    def SetVerbosity(self, level):
        self._verbosity = str(level)

    def SetOutputFormat(self, fmt):
        if str(fmt).upper() != "CSV":
            raise ValueError(f"unsupported output format {fmt!r}")

    def SetOutputContent(self, content):
        if isinstance(content, str):
            content = [content]
        cols = [str(c).upper() for c in content]
        if "XYZ" not in cols:
            cols = ["XYZ"] + cols
        self._out_content = tuple(cols)

    def SetMeshOutputFormat(self, fmt):
        if str(fmt).upper() != "VTK":
            raise ValueError(f"unsupported mesh output format {fmt!r}")

    # -- scene --------------------------------------------------------------

    def LoadMaterial(self, props: dict):
        if not isinstance(props, dict):
            raise TypeError("LoadMaterial takes a property dictionary")
        self._materials.append({str(k): float(v) for k, v in props.items()})
        return len(self._materials) - 1

    def SetMaterialPropertyPair(self, name, a, b, value):
        self._material_pairs.append((str(name), int(a), int(b), float(value)))

    def InstructBoxDomainDimension(self, x, y, z):
        self._domain_size = np.array([float(x), float(y), float(z)])

    def InstructBoxDomainBoundingBC(self, which, material):
        if str(which) != "all":
            raise ValueError("only the 'all' bounding BC is supported")
        self._bounding_bc = int(material)

    def AddExternalObject(self):
        obj = ExternalObjectHandle(self)
        self._externals.append(obj)
        return obj

    def AddWavefrontMeshObject(self, path, material):
        tris = gio.load_obj(path)
        mesh = MeshHandle(self, tris, int(material))
        self._meshes.append(mesh)
        return mesh

    def AddTriangleMeshObject(self, triangles, material):
        mesh = MeshHandle(self, np.asarray(triangles, dtype=np.float64),
                          int(material))
        self._meshes.append(mesh)
        return mesh

    def LoadClumpType(self, mass, moi, components, material):
        """components: a clump CSV path or [(offset, radius), ...]."""
        if isinstance(components, (str, bytes)):
            components = gio.load_clump_csv(components)
        tpl = ClumpTemplateHandle(self, mass, moi, components, int(material))
        self._templates.append(tpl)
        return tpl

    def AddClumps(self, template, xyz):
        pts = np.asarray(xyz, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise TypeError("AddClumps needs a list of 3-vectors")
        batch = {"template": template, "points": pts, "owners": None}
        self._clump_batches.append(batch)
        return batch

    def SetFamilyPrescribedAngVel(self, family, wx, wy, wz):
        self._prescriptions.append(("ang", int(family), (wx, wy, wz)))

    def SetFamilyPrescribedLinVel(self, family, vx, vy, vz):
        self._prescriptions.append(("lin", int(family), (vx, vy, vz)))

    def SetFamilyFixed(self, family):
        self._prescriptions.append(("fixed", int(family), None))

    def DisableContactBetweenFamilies(self, a, b):
        self._masks.append((int(a), int(b), False))

    def EnableContactBetweenFamilies(self, a, b):
        self._masks.append((int(a), int(b), True))

    def Track(self, obj):
        return TrackerHandle(self, obj)

    def CreateInspector(self, quantity):
        return InspectorHandle(self, quantity)

    # -- solver specs ---------------------------------------------------------

    def SetInitTimeStep(self, h):
        self._step = float(h)

    def SetGravitationalAcceleration(self, g):
        self._gravity = _vec3(g, "gravity")

    def SetErrorOutVelocity(self, v):
        self._v_err = float(v)

    def SetForceCalcThreadsPerBlock(self, n):
        pass  # GPU-era tuning knob; accepted for script compatibility

    def SetCDUpdateFreq(self, n):
        """Pin the contact-detection lookahead; 1 means synchronous."""
        self._cd_freq = int(n)

    def UseFrictionalHertzianModel(self):
        self._force_model = "hertz_mindlin"

    # -- lifecycle ---------------------------------------------------------------

    def Initialize(self):
        if self._sim is not None:
            raise RuntimeError("already initialized")
        if self._domain_size is None:
            raise RuntimeError("InstructBoxDomainDimension must be called")
        domain = gf.Domain(-self._domain_size / 2.0 * 1.02,
                           self._domain_size / 2.0 * 1.02)
        sim = gf.Simulator(domain, force_model=self._force_model)
        for props in self._materials:
            sim.load_material(props)
        for name, a, b, value in self._material_pairs:
            sim.set_material_pair(name, a, b, value)
        if self._bounding_bc is not None:
            sim.add_box_boundaries(self._bounding_bc, family=_BOUNDARY_FAMILY)
        for ext in self._externals:
            ext.owner = sim.add_analytic(
                [tuple(c) for c in ext.components], family=ext.family)
            sim.set_family_fixed(ext.family)
        for mesh in self._meshes:
            mesh.owner = sim.add_mesh(mesh.triangles, mesh.material,
                                      family=mesh.family)
            if mesh.scale is not None:
                sim.store.scale_mesh(mesh.owner, mesh.scale)
        for batch in self._clump_batches:
            tid = sim.load_clump_template(batch["template"]._build())
            batch["owners"] = sim.add_clumps(tid, batch["points"])
        for kind, family, value in self._prescriptions:
            if kind == "ang":
                sim.set_family_prescribed_ang_vel(family, *value)
            elif kind == "lin":
                sim.set_family_prescribed_lin_vel(family, *value)
            else:
                sim.set_family_fixed(family)
        for a, b, allow in self._masks:
            sim.set_family_mask(a, b, allow)
        sim.set_init_time_step(self._step)
        sim.set_gravity(self._gravity)
        sim.set_error_out_velocity(self._v_err)
        self._sim = sim
        for target, xyz in self._pending_positions:
            TrackerHandle(self, target).SetPos(xyz)
        sim.initialize()

    def DoDynamics(self, duration):
        self._require_sim().do_dynamics(float(duration))

    def WriteSphereFile(self, path):
        gio.write_sphere_csv(self._require_sim(), path, self._out_content)

    def WriteMeshFile(self, path):
        gio.write_mesh_vtk(self._require_sim(), path)

    def ShowThreadCollaborationStats(self):
        rep = self._require_sim().timing_report()
        if self._verbosity not in ("QUIET",):
            print(f"n_max={rep['n_max']} updates={rep['ca_updates']} "
                  f"dynamics_waits={rep['dynamics_waits']}")
        return rep

    def GetUpdateFreq(self):
        return self._require_sim().scheduler.n_max

    def GetAvgSphContacts(self):
        return float(self._require_sim()
                     .create_inspector("avg_sph_contacts").get_value())

    def GetNumOwners(self):
        return int(self._require_sim().store.n_owners)

    def Destroy(self):
        if self._sim is not None:
            self._sim.close()
            self._sim = None

    def _require_sim(self):
        if self._sim is None:
            raise RuntimeError("Initialize() must be called first")
        return self._sim

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.Destroy()
        return False
