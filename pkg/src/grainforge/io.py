"""Scenario configuration, asset loading (clump CSV, Wavefront OBJ) and
result export (particle CSV, legacy-ASCII mesh VTK).

Writers are deterministic: identical state produces byte-identical files.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

import numpy as np

from . import meshes
from .core import (
    ClumpSphere,
    ClumpTemplate,
    ConfigurationError,
    Domain,
    GEOM_SPHERE,
    GEOM_TRIANGLE,
    ValidationError,
)
from .engine import Simulator, hcp_sample_box, hcp_sample_cylinder


class ParseError(ValueError):
    """Malformed input file; the message carries the line number."""


# ---------------------------------------------------------------------------
# asset loaders
# ---------------------------------------------------------------------------

def load_clump_csv(path) -> list[tuple[np.ndarray, float]]:
    """Rows of `x,y,z,radius` in template-local meters; first line may be a
    header.  Returns [(offset, radius), ...]."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            try:
                values = [float(p) for p in parts]
            except ValueError:
                if lineno == 1:
                    continue  # header
                raise ParseError(f"{path}:{lineno}: not a numeric row: {line!r}")
            if len(values) != 4:
                raise ParseError(
                    f"{path}:{lineno}: expected x,y,z,radius, got {len(values)} fields"
                )
            if values[3] <= 0.0:
                raise ParseError(f"{path}:{lineno}: radius must be positive")
            out.append((np.array(values[:3]), values[3]))
    if not out:
        raise ParseError(f"{path}: no clump component rows found")
    return out


def load_obj(path) -> np.ndarray:
    """Wavefront OBJ triangles, shape (n, 3, 3).  Supports v and f records;
    convex polygons are fan-triangulated; normals and texture indices are
    ignored."""
    vertices = []
    tris = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            parts = raw.split()
            if not parts:
                continue
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise ParseError(f"{path}:{lineno}: vertex needs 3 coordinates")
                vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif tag == "f":
                idx = []
                for token in parts[1:]:
                    head = token.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError:
                        raise ParseError(f"{path}:{lineno}: bad face index {token!r}")
                    idx.append(i - 1 if i > 0 else len(vertices) + i)
                if len(idx) < 3:
                    raise ParseError(f"{path}:{lineno}: face needs >= 3 vertices")
                for k in range(1, len(idx) - 1):
                    tris.append((idx[0], idx[k], idx[k + 1]))
    if not tris:
        raise ParseError(f"{path}: no faces found")
    v = np.asarray(vertices, dtype=np.float64)
    try:
        return v[np.asarray(tris, dtype=np.int64)]
    except IndexError:
        raise ParseError(f"{path}: face index out of range")


def template_from_csv(path, mass: float, moi, material: int,
                      name: str = "") -> ClumpTemplate:
    comps = load_clump_csv(path)
    return ClumpTemplate(
        mass=mass, moi=np.asarray(moi, dtype=np.float64),
        spheres=tuple(ClumpSphere(off, r, material) for off, r in comps),
        name=name,
    )


# ---------------------------------------------------------------------------
# writers
# ---------------------------------------------------------------------------

_CONTENT_COLUMNS = {
    "XYZ": ("x", "y", "z"),
    "ABSV": ("absv",),
    "FAMILY": ("family",),
    "VEL": ("vx", "vy", "vz"),
}


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_sphere_csv(sim: Simulator, path, content=("XYZ", "ABSV")) -> None:
    """One row per component sphere, columns in the declared content order;
    positions carry full decoded precision."""
    for item in content:
        if item not in _CONTENT_COLUMNS:
            raise ValidationError(f"unknown output content {item!r}")
    s = sim.store
    sph = np.nonzero(s.geom_kind[: s.n_geoms] == GEOM_SPHERE)[0]
    owners = s.geom_owner[sph]
    sim._refresh_world()
    centers = sim._sph_centers
    vel = s.lin_vel[owners]
    absv = np.sqrt((vel.astype(np.float64) ** 2).sum(axis=1))
    family = s.owner_family[owners]
    header = ",".join(
        col for item in content for col in _CONTENT_COLUMNS[item]
    )
    lines = [header]
    for k in range(sph.shape[0]):
        cols = []
        for item in content:
            if item == "XYZ":
                cols += [_fmt(centers[k, 0]), _fmt(centers[k, 1]), _fmt(centers[k, 2])]
            elif item == "ABSV":
                cols.append(_fmt(absv[k]))
            elif item == "FAMILY":
                cols.append(str(int(family[k])))
            elif item == "VEL":
                cols += [_fmt(vel[k, 0]), _fmt(vel[k, 1]), _fmt(vel[k, 2])]
        lines.append(",".join(cols))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_mesh_vtk(sim: Simulator, path, owners=None) -> None:
    """Legacy-ASCII unstructured grid of all (or the given) mesh owners in
    their current world pose.  Shared-vertex welding is off: three points per
    facet."""
    s = sim.store
    tri = np.nonzero(s.geom_kind[: s.n_geoms] == GEOM_TRIANGLE)[0]
    if owners is not None:
        sel = np.isin(s.geom_owner[tri], np.asarray(owners))
        tri = tri[sel]
    sim._refresh_world()
    slot = sim._geom_slot[tri] if tri.size else np.zeros(0, dtype=np.int64)
    world = sim._tri_world[slot] if tri.size else np.zeros((0, 9))
    n_pts = 3 * world.shape[0]
    lines = [
        "# vtk DataFile Version 2.0",
        "grainforge mesh",
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {n_pts} double",
    ]
    for row in world:
        for v in range(3):
            lines.append(f"{_fmt(row[3*v])} {_fmt(row[3*v+1])} {_fmt(row[3*v+2])}")
    m = world.shape[0]
    lines.append(f"CELLS {m} {4*m}")
    for k in range(m):
        lines.append(f"3 {3*k} {3*k+1} {3*k+2}")
    lines.append(f"CELL_TYPES {m}")
    lines.extend(["5"] * m)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# declarative scenarios
# ---------------------------------------------------------------------------

@dataclass
class ScenarioConfig:
    """Parsed scenario file; build() assembles the simulator."""

    domain_size: np.ndarray
    domain_center: np.ndarray
    step: float
    gravity: np.ndarray
    error_out_velocity: float
    force_model: str
    duration: float
    fps: float
    content: tuple[str, ...]
    write_meshes: bool
    materials: list
    material_pairs: list
    templates: list
    fills: list
    meshes: list
    analytic: list
    box_boundaries: dict | None
    prescriptions: list
    masks: list
    name: str = "scenario"
    base_dir: str = "."

    @staticmethod
    def load(path) -> "ScenarioConfig":
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
        try:
            dom = raw["domain"]
            solver = raw.get("solver", {})
            out = raw.get("output", {})
            scenario = raw.get("scenario", {})
            return ScenarioConfig(
                domain_size=np.asarray(dom["size"], dtype=np.float64),
                domain_center=np.asarray(dom.get("center", [0, 0, 0]), dtype=np.float64),
                step=float(solver.get("step", 1e-5)),
                gravity=np.asarray(solver.get("gravity", [0, 0, -9.81]), dtype=np.float64),
                error_out_velocity=float(solver.get("error_out_velocity", 50.0)),
                force_model=str(solver.get("force_model", "hertz_mindlin")),
                duration=float(scenario.get("duration", 0.0)),
                fps=float(out.get("fps", 20.0)),
                content=tuple(out.get("content", ["XYZ", "ABSV"])),
                write_meshes=bool(out.get("meshes", False)),
                materials=raw.get("materials", []),
                material_pairs=raw.get("material_pairs", []),
                templates=raw.get("templates", []),
                fills=raw.get("fills", []),
                meshes=raw.get("meshes", []),
                analytic=raw.get("analytic", []),
                box_boundaries=raw.get("box_boundaries"),
                prescriptions=raw.get("prescriptions", []),
                masks=raw.get("masks", []),
                name=str(scenario.get("name", "scenario")),
                base_dir=os.path.dirname(os.path.abspath(path)),
            )
        except KeyError as exc:
            raise ConfigurationError(f"scenario file {path}: missing key {exc}")

    def build(self) -> Simulator:
        domain = Domain(
            self.domain_center - self.domain_size / 2.0,
            self.domain_center + self.domain_size / 2.0,
        )
        sim = Simulator(domain, force_model=self.force_model)
        mat_ids: dict[str, int] = {}
        for m in self.materials:
            props = {k: v for k, v in m.items() if k != "name"}
            mat_ids[m["name"]] = sim.load_material(props)

        def material(name) -> int:
            if name not in mat_ids:
                raise ConfigurationError(f"unknown material {name!r}")
            return mat_ids[name]

        for p in self.material_pairs:
            sim.set_material_pair(
                p["prop"], material(p["a"]), material(p["b"]), float(p["value"])
            )

        tpl_ids: dict[str, int] = {}
        for t in self.templates:
            mat = material(t["material"])
            if "csv" in t:
                tpl = template_from_csv(
                    os.path.join(self.base_dir, t["csv"]),
                    mass=float(t["mass"]), moi=t["moi"], material=mat,
                    name=t["name"],
                )
            else:
                spheres = tuple(
                    ClumpSphere(np.asarray(row[:3], dtype=np.float64), float(row[3]), mat)
                    for row in t["spheres"]
                )
                tpl = ClumpTemplate(
                    mass=float(t["mass"]),
                    moi=np.asarray(t["moi"], dtype=np.float64),
                    spheres=spheres, name=t["name"],
                )
            if "scale" in t:
                tpl = tpl.scaled(float(t["scale"]))
            tpl_ids[t["name"]] = sim.load_clump_template(tpl)

        # owner creation order mirrors the scripting workflow: domain
        # boundaries, analytic objects, meshes, then the granular fills
        if self.box_boundaries is not None:
            fam = int(self.box_boundaries.get("family", 254))
            sim.add_box_boundaries(material(self.box_boundaries["material"]), family=fam)

        for a in self.analytic:
            kind = a["kind"]
            mat = material(a["material"])
            if kind == "plane":
                comp = ("plane", a["point"], a["normal"], mat)
            elif kind == "cylinder":
                comp = ("cylinder", a["point"], a["axis"], float(a["radius"]),
                        float(a.get("facing", -1.0)), mat)
            else:
                raise ConfigurationError(f"unknown analytic kind {kind!r}")
            fam = int(a.get("family", 0))
            sim.add_analytic([comp], family=fam)
            if a.get("fixed", True):
                sim.set_family_fixed(fam)

        for m in self.meshes:
            src = m["source"]
            if src.startswith("builtin:"):
                tris = meshes.builtin(src.removeprefix("builtin:"))
            else:
                tris = load_obj(os.path.join(self.base_dir, src))
            owner = sim.add_mesh(
                tris, material(m["material"]), family=int(m.get("family", 0)),
                position=m.get("position", (0.0, 0.0, 0.0)),
            )
            if "scale" in m:
                sim.store.scale_mesh(owner, m["scale"])

        for f in self.fills:
            tid = tpl_ids[f["template"]]
            sampler = f.get("sampler", "box")
            if sampler == "cylinder":
                pts = hcp_sample_cylinder(
                    f["center"], float(f["radius"]), float(f["half_height"]),
                    float(f["spacing"]),
                )
            elif sampler == "box":
                pts = hcp_sample_box(
                    f["center"], f["half_extents"], float(f["spacing"])
                )
            else:
                raise ConfigurationError(f"unknown sampler {sampler!r}")
            owners = sim.add_clumps(tid, pts)
            fam = int(f.get("family", 0))
            for o in owners:
                sim.store.set_family(o, fam)

        for p in self.prescriptions:
            fam = int(p["family"])
            if p.get("fixed"):
                sim.set_family_fixed(fam)
            if "lin_vel" in p:
                sim.set_family_prescribed_lin_vel(fam, *p["lin_vel"])
            if "ang_vel" in p:
                sim.set_family_prescribed_ang_vel(fam, *p["ang_vel"])

        for m in self.masks:
            sim.set_family_mask(int(m["a"]), int(m["b"]), bool(m["allow"]))

        sim.set_gravity(self.gravity)
        sim.set_init_time_step(self.step)
        sim.set_error_out_velocity(self.error_out_velocity)
        return sim


def run_scenario(config: ScenarioConfig, out_dir, sync: bool = False,
                 frame_hook=None) -> dict:
    """Execute a scenario: write sphere (and mesh) frames at the configured
    cadence, then a timing summary.  Returns the summary dict."""
    os.makedirs(out_dir, exist_ok=True)
    sim = config.build()
    sim.set_sync_mode(sync)
    sim.initialize()
    import time as _t
    t0 = _t.perf_counter()
    frame_time = 1.0 / config.fps if config.fps > 0 else config.duration
    n_frames = int(round(config.duration * config.fps)) if config.fps > 0 else 1
    frame = 0
    try:
        write_sphere_csv(
            sim, os.path.join(out_dir, f"frame_{frame:04d}.csv"), config.content
        )
        if config.write_meshes:
            write_mesh_vtk(sim, os.path.join(out_dir, f"mesh_{frame:04d}.vtk"))
        for frame in range(1, n_frames + 1):
            sim.do_dynamics(frame_time)
            write_sphere_csv(
                sim, os.path.join(out_dir, f"frame_{frame:04d}.csv"), config.content
            )
            if config.write_meshes:
                write_mesh_vtk(sim, os.path.join(out_dir, f"mesh_{frame:04d}.vtk"))
            if frame_hook is not None:
                frame_hook(sim, frame)
        summary = {
            "scenario": config.name,
            "frames": frame + 1,
            "sim_time": sim.sim_time,
            "wall_time": _t.perf_counter() - t0,
            "watchdog": "ok",
        }
        summary.update(sim.timing_report())
    except Exception as exc:
        summary = {
            "scenario": config.name,
            "frames": frame,
            "sim_time": sim.sim_time,
            "wall_time": _t.perf_counter() - t0,
            "watchdog": f"error: {exc}",
        }
        raise
    finally:
        sim.close()
    return summary
