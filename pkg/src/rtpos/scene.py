"""Scene description: materials, buildings, RRU panels, UE tracks, file I/O.

Scene files are YAML documents validated against ``schema/scene.schema.json``.
Angles are degrees in files and radians in memory.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .geometry import Aabb, BvhTree, SpatialGrid, build_bvh, vec3

C_LIGHT = 299_792_458.0


class SceneError(ValueError):
    """Scene file could not be parsed or violates a scene invariant."""


@dataclass(frozen=True)
class Material:
    id: int
    refractive_index: float = 2.4
    scattering_amplitude: float = 0.4
    scattering_exponent: float = 4.0

    def __post_init__(self):
        if self.refractive_index < 1.0:
            raise SceneError(f"material {self.id}: refractive_index must be >= 1")
        if self.scattering_amplitude < 0.0:
            raise SceneError(f"material {self.id}: scattering_amplitude must be >= 0")
        if self.scattering_exponent <= 0.0:
            raise SceneError(f"material {self.id}: scattering_exponent must be > 0")


@dataclass(frozen=True)
class Building:
    """Vertical extrusion of a convex footprint polygon (counter-clockwise, xy)."""

    footprint: np.ndarray
    height: float
    material_id: int
    base: float = 0.0

    def __post_init__(self):
        fp = np.asarray(self.footprint, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "footprint", fp)
        if len(fp) < 3:
            raise SceneError("building footprint needs at least 3 vertices")
        if self.height <= 0:
            raise SceneError("building height must be positive")
        if _signed_area(fp) < 0:
            object.__setattr__(self, "footprint", fp[::-1].copy())
        if not _is_convex(self.footprint):
            raise SceneError("building footprint must be convex")

    @classmethod
    def box(cls, x0, y0, x1, y1, height, material_id=0) -> "Building":
        return cls(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float), height, material_id)

    @property
    def top(self) -> float:
        return self.base + self.height

    def translated(self, dx: float, dy: float) -> "Building":
        return replace(self, footprint=self.footprint + np.array([dx, dy]))

    def triangles(self) -> tuple[np.ndarray, list[int]]:
        """Vertex array ``(n, 3, 3)`` and a face index per triangle (walls, roof, floor)."""
        fp, k = self.footprint, len(self.footprint)
        z0, z1 = self.base, self.top
        tris, faces = [], []
        for i in range(k):
            a, b = fp[i], fp[(i + 1) % k]
            p00, p10 = [a[0], a[1], z0], [b[0], b[1], z0]
            p01, p11 = [a[0], a[1], z1], [b[0], b[1], z1]
            tris += [[p00, p10, p11], [p00, p11, p01]]
            faces += [i, i]
        for j in range(1, k - 1):
            tris.append([[*fp[0], z1], [*fp[j], z1], [*fp[j + 1], z1]])
            faces.append(k)
        for j in range(1, k - 1):
            tris.append([[*fp[0], z0], [*fp[j + 1], z0], [*fp[j], z0]])
            faces.append(k + 1)
        return np.array(tris, dtype=np.float64), faces

    def edges(self) -> list[tuple[np.ndarray, np.ndarray, str]]:
        """Roof edges and vertical corner edges as (start, end, kind)."""
        fp, k = self.footprint, len(self.footprint)
        out = []
        for i in range(k):
            a, b = fp[i], fp[(i + 1) % k]
            out.append((vec3(a[0], a[1], self.top), vec3(b[0], b[1], self.top), "roof"))
            out.append((vec3(a[0], a[1], self.base), vec3(a[0], a[1], self.top), "vertical"))
        return out

    @property
    def aabb(self) -> Aabb:
        lo = self.footprint.min(axis=0)
        hi = self.footprint.max(axis=0)
        return Aabb(vec3(lo[0], lo[1], self.base), vec3(hi[0], hi[1], self.top))

    @property
    def centroid(self) -> np.ndarray:
        return vec3(*self.footprint.mean(axis=0), self.base + 0.5 * self.height)


def _signed_area(fp: np.ndarray) -> float:
    x, y = fp[:, 0], fp[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _is_convex(fp: np.ndarray) -> bool:
    d1 = np.roll(fp, -1, axis=0) - fp
    d2 = np.roll(d1, -1, axis=0)
    cross = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    return bool(np.all(cross >= -1e-12))


@dataclass(frozen=True)
class Mesh:
    """Free triangle mesh; every triangle is its own reflecting face."""

    triangles: np.ndarray
    material_id: int


@dataclass(eq=False)
class SceneModel:
    """Static propagation environment.

    Treated as immutable once built; the BVH and spatial grid are derived lazily.
    """

    materials: dict[int, Material]
    buildings: list[Building]
    ground_extent: tuple[float, float, float, float]
    ground_material: int
    meshes: list[Mesh] = field(default_factory=list)
    sky_height: float | None = None

    def __post_init__(self):
        for where, mid in self._material_refs():
            if mid not in self.materials:
                raise SceneError(f"material id {mid} referenced by {where} is not defined")
        x0, y0, x1, y1 = self.ground_extent
        if not (x1 > x0 and y1 > y0):
            raise SceneError("ground extent must have positive area")

    def _material_refs(self):
        yield "ground", self.ground_material
        for i, b in enumerate(self.buildings):
            yield f"buildings[{i}]", b.material_id
        for i, m in enumerate(self.meshes):
            yield f"meshes[{i}]", m.material_id

    @cached_property
    def _soup(self):
        x0, y0, x1, y1 = self.ground_extent
        verts = [np.array([[[x0, y0, 0], [x1, y0, 0], [x1, y1, 0]],
                           [[x0, y0, 0], [x1, y1, 0], [x0, y1, 0]]], dtype=np.float64)]
        mats, faces, owners = [self.ground_material] * 2, [0, 0], [-1, -1]
        face = 1
        for bi, b in enumerate(self.buildings):
            t, f = b.triangles()
            verts.append(t)
            mats += [b.material_id] * len(t)
            faces += [face + x for x in f]
            owners += [bi] * len(t)
            face += max(f) + 1
        for m in self.meshes:
            t = np.asarray(m.triangles, dtype=np.float64).reshape(-1, 3, 3)
            verts.append(t)
            mats += [m.material_id] * len(t)
            faces += list(range(face, face + len(t)))
            owners += [-1] * len(t)
            face += len(t)
        return (np.concatenate(verts), np.array(mats, dtype=np.int64),
                np.array(faces, dtype=np.int64), np.array(owners, dtype=np.int64))

    @property
    def vertices(self) -> np.ndarray:
        return self._soup[0]

    @property
    def material_ids(self) -> np.ndarray:
        return self._soup[1]

    @property
    def face_ids(self) -> np.ndarray:
        """Coplanar reflecting face per triangle (a wall quad is one face)."""
        return self._soup[2]

    @property
    def building_ids(self) -> np.ndarray:
        return self._soup[3]

    @property
    def n_triangles(self) -> int:
        return len(self.vertices)

    @cached_property
    def normals(self) -> np.ndarray:
        v = self.vertices
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @cached_property
    def bvh(self) -> BvhTree:
        return build_bvh(self.vertices, self.material_ids)

    @cached_property
    def grid(self) -> SpatialGrid:
        return SpatialGrid.from_boxes([b.aabb for b in self.buildings])

    @cached_property
    def bounds(self) -> Aabb:
        x0, y0, x1, y1 = self.ground_extent
        top = max([b.top for b in self.buildings] + [0.0])
        sky = self.sky_height if self.sky_height is not None else top + 50.0
        return Aabb(vec3(x0, y0, 0.0), vec3(x1, y1, max(sky, top)))

    @cached_property
    def face_triangles(self) -> dict[int, np.ndarray]:
        out: dict[int, list[int]] = {}
        for i, f in enumerate(self.face_ids):
            out.setdefault(int(f), []).append(i)
        return {k: np.array(v) for k, v in out.items()}

    def material(self, mid: int) -> Material:
        return self.materials[int(mid)]


@dataclass(frozen=True)
class RruConfig:
    """Remote radio unit panel.

    ``rotation_azimuth`` and ``tilt`` enter the element displacement formula
    directly; the resulting boresight azimuth is ``pi - rotation_azimuth``.
    """

    id: int
    position: np.ndarray
    rotation_azimuth: float
    tilt: float = np.deg2rad(10.0)
    rows: int = 4
    cols: int = 8
    spacing_h: float | None = None
    spacing_v: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "position", vec3(self.position))
        if self.rows < 1 or self.cols < 1:
            raise SceneError(f"rru {self.id}: rows and cols must be >= 1")
        if not (0.0 <= self.tilt < np.pi / 2):
            raise SceneError(f"rru {self.id}: tilt must be in [0, 90) degrees")
        for s in (self.spacing_h, self.spacing_v):
            if s is not None and s <= 0:
                raise SceneError(f"rru {self.id}: element spacing must be positive")

    @classmethod
    def facing(cls, id: int, position, boresight_azimuth: float, **kw) -> "RruConfig":
        return cls(id, position, float(np.pi - boresight_azimuth), **kw)

    @property
    def boresight_azimuth(self) -> float:
        return float(np.mod(np.pi - self.rotation_azimuth + np.pi, 2 * np.pi) - np.pi)

    @property
    def boresight_elevation(self) -> float:
        return -self.tilt

    def spacings(self, wavelength: float) -> tuple[float, float]:
        dh = self.spacing_h if self.spacing_h is not None else wavelength / 2
        dv = self.spacing_v if self.spacing_v is not None else wavelength / 2
        return dh, dv

    @property
    def n_elements(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class UeTrajectory:
    ttis: np.ndarray
    positions: np.ndarray
    id: int = 0

    def __post_init__(self):
        t = np.asarray(self.ttis, dtype=np.int64).reshape(-1)
        p = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if len(t) != len(p):
            raise SceneError("ue track: tti and position counts differ")
        if np.any(np.diff(t) <= 0):
            raise SceneError(f"ue track {self.id}: tti indices must be strictly increasing")
        object.__setattr__(self, "ttis", t)
        object.__setattr__(self, "positions", p)

    def __len__(self):
        return len(self.ttis)


@dataclass(frozen=True)
class PerturbationSpec:
    wall_position_sigma: float = 0.0
    transmission_scale_low: float = 1.0
    transmission_scale_high: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.wall_position_sigma < 0:
            raise ValueError("wall_position_sigma must be >= 0")
        if not (0 < self.transmission_scale_low <= self.transmission_scale_high):
            raise ValueError("need 0 < transmission_scale_low <= transmission_scale_high")


@dataclass(eq=False)
class Scenario:
    """Everything a scene file holds."""

    scene: SceneModel
    rrus: list[RruConfig]
    tracks: list[UeTrajectory]
    carrier_frequency: float = 3.5e9
    name: str = ""
    ue_height: float = 1.5

    @property
    def wavelength(self) -> float:
        return C_LIGHT / self.carrier_frequency

    def rru(self, rru_id: int) -> RruConfig:
        for r in self.rrus:
            if r.id == rru_id:
                return r
        raise KeyError(f"unknown rru id {rru_id}")


def perturb_scene(scene: SceneModel, spec: PerturbationSpec) -> SceneModel:
    """Map with controlled errors: shifted buildings and rescaled material constants.

    Every building moves horizontally by an independent N(0, sigma) offset per
    axis; every material's refractive index and scattering amplitude are scaled
    by independent Uniform(low, high) factors. The input scene is not modified.
    """
    rng = np.random.default_rng(spec.rng_seed)
    offsets = rng.normal(0.0, 1.0, size=(len(scene.buildings), 2)) * spec.wall_position_sigma
    buildings = [b.translated(*off) if spec.wall_position_sigma > 0 else b
                 for b, off in zip(scene.buildings, offsets)]
    materials = {}
    for mid in sorted(scene.materials):
        m = scene.materials[mid]
        s_n, s_a = rng.uniform(spec.transmission_scale_low, spec.transmission_scale_high, size=2)
        if spec.transmission_scale_low == spec.transmission_scale_high == 1.0:
            materials[mid] = m
        else:
            # refractive index cannot drop below vacuum
            materials[mid] = replace(m, refractive_index=max(1.0, m.refractive_index * s_n),
                                     scattering_amplitude=m.scattering_amplitude * s_a)
    return SceneModel(materials, buildings, scene.ground_extent, scene.ground_material,
                      list(scene.meshes), scene.sky_height)


# --------------------------------------------------------------------------
# file I/O


def _schema() -> dict:
    return json.loads(resources.files("rtpos").joinpath("schema/scene.schema.json").read_text())


def _err_path(path) -> str:
    out = ""
    for p in path:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "<root>"


def parse_scene(doc: dict) -> Scenario:
    """Build a :class:`Scenario` from an already-parsed document."""
    try:
        jsonschema.validate(doc, _schema())
    except jsonschema.ValidationError as exc:
        raise SceneError(f"{_err_path(exc.absolute_path)}: {exc.message}") from None

    materials = {}
    for i, m in enumerate(doc["materials"]):
        if m["id"] in materials:
            raise SceneError(f"materials[{i}]: duplicate material id {m['id']}")
        materials[m["id"]] = Material(m["id"], m.get("n", 2.4), m.get("scattering_amplitude", 0.4),
                                      m.get("alpha_r", 4.0))
    buildings = []
    for i, b in enumerate(doc.get("buildings", [])):
        try:
            buildings.append(Building(np.array(b["footprint"], dtype=float), b["height"],
                                      b["material"], b.get("base", 0.0)))
        except SceneError as exc:
            raise SceneError(f"buildings[{i}]: {exc}") from None
    meshes = [Mesh(np.array(m["triangles"], dtype=float), m["material"]) for m in doc.get("meshes", [])]

    rrus = []
    for i, r in enumerate(doc.get("rrus", [])):
        try:
            rrus.append(RruConfig.facing(
                r["id"], r["position"], np.deg2rad(r["azimuth_deg"]),
                tilt=np.deg2rad(r.get("tilt_deg", 10.0)), rows=r.get("rows", 4), cols=r.get("cols", 8),
                spacing_h=r.get("spacing_h"), spacing_v=r.get("spacing_v")))
        except SceneError as exc:
            raise SceneError(f"rrus[{i}]: {exc}") from None
    if len({r.id for r in rrus}) != len(rrus):
        raise SceneError("rrus: duplicate rru id")

    tracks = []
    ue_height = doc.get("ue_height", 1.5)
    for i, tr in enumerate(doc.get("ue_tracks", [])):
        pts = tr["points"]
        ttis = [p["tti"] for p in pts]
        xyz = [p["xyz"] if len(p["xyz"]) == 3 else [*p["xyz"], ue_height] for p in pts]
        try:
            tracks.append(UeTrajectory(ttis, xyz, tr.get("id", i)))
        except SceneError as exc:
            raise SceneError(f"ue_tracks[{i}]: {exc}") from None

    ground = doc.get("ground", {})
    extent = ground.get("extent")
    if extent is None:
        pts = [b.footprint for b in buildings] + [r.position[None, :2] for r in rrus]
        pts += [t.positions[:, :2] for t in tracks]
        if not pts:
            raise SceneError("ground: extent required for an empty scene")
        allp = np.concatenate(pts)
        lo, hi = allp.min(axis=0) - 50.0, allp.max(axis=0) + 50.0
        extent = [lo[0], lo[1], hi[0], hi[1]]
    scene = SceneModel(materials, buildings, tuple(float(x) for x in extent),
                       ground.get("material", doc["materials"][0]["id"]), meshes, doc.get("sky_height"))

    box = scene.bounds
    for r in rrus:
        if not box.contains(r.position):
            raise SceneError(f"rru {r.id} lies outside the scene bounds")
    for tr in tracks:
        inside = np.all((tr.positions >= box.min_corner) & (tr.positions <= box.max_corner), axis=1)
        if not np.all(inside):
            k = int(np.argmin(inside))
            raise SceneError(f"ue track {tr.id}: point at tti {tr.ttis[k]} lies outside the scene bounds")
    return Scenario(scene, rrus, tracks, float(doc.get("carrier_frequency_hz", 3.5e9)), doc.get("name", ""),
                    float(ue_height))


def load_scene(path) -> Scenario:
    """Read and validate a YAML scene file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise SceneError(f"{path}: {exc.strerror}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise SceneError(f"{path}: parse error at {where}: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(doc, dict):
        raise SceneError(f"{path}: top level must be a mapping")
    try:
        return parse_scene(doc)
    except SceneError as exc:
        raise SceneError(f"{path}: {exc}") from None


def scenario_to_doc(sc: Scenario) -> dict:
    s = sc.scene
    doc = {
        "name": sc.name,
        "carrier_frequency_hz": sc.carrier_frequency,
        "ue_height": sc.ue_height,
        "materials": [{"id": m.id, "n": m.refractive_index, "scattering_amplitude": m.scattering_amplitude,
                       "alpha_r": m.scattering_exponent} for m in (s.materials[k] for k in sorted(s.materials))],
        "ground": {"extent": list(s.ground_extent), "material": s.ground_material},
        "buildings": [{"footprint": b.footprint.tolist(), "height": b.height, "material": b.material_id,
                       "base": b.base} for b in s.buildings],
        "rrus": [{"id": r.id, "position": r.position.tolist(),
                  "azimuth_deg": float(np.rad2deg(r.boresight_azimuth)), "tilt_deg": float(np.rad2deg(r.tilt)),
                  "rows": r.rows, "cols": r.cols,
                  **({"spacing_h": r.spacing_h} if r.spacing_h is not None else {}),
                  **({"spacing_v": r.spacing_v} if r.spacing_v is not None else {})} for r in sc.rrus],
        "ue_tracks": [{"id": t.id, "points": [{"tti": int(k), "xyz": p.tolist()}
                                              for k, p in zip(t.ttis, t.positions)]} for t in sc.tracks],
    }
    if s.meshes:
        doc["meshes"] = [{"triangles": m.triangles.tolist(), "material": m.material_id} for m in s.meshes]
    if s.sky_height is not None:
        doc["sky_height"] = s.sky_height
    return doc


def save_scene(sc: Scenario, path) -> None:
    Path(path).write_text(yaml.safe_dump(scenario_to_doc(sc), sort_keys=False))


def fixture_path(name: str) -> Path:
    """Path of a bundled scene (``two_ray_flat``, ``mirror_wall``, ``canyon``, ``block``)."""
    p = resources.files("rtpos").joinpath(f"fixtures/{name}.yaml")
    return Path(str(p))


def load_fixture(name: str) -> Scenario:
    return load_scene(fixture_path(name))


def with_scene(sc: Scenario, scene: SceneModel) -> Scenario:
    out = copy.copy(sc)
    out.scene = scene
    return out
