"""Ray-traced channel between a UE and RRU panels.

Path discovery shoots a Fibonacci sphere of rays from the transmitter,
bounces them specularly and collects the face sequences whose rays pass
through a capture sphere around each receiver. Every captured sequence is
then solved exactly with the image method and validated (reflection points
on their faces, unoccluded legs), so duplicate receptions collapse into one
path with exact length. Scattered and single-edge diffracted paths are
added on request.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import integrate

from .geometry import angles_from_direction, nearest_hits, segments_blocked, vec3
from .scene import C_LIGHT, Material, RruConfig, SceneModel

# --------------------------------------------------------------------------
# propagation physics


def free_space_field(r, wavelength: float):
    """Spherical wave ``exp(-i k r) / r`` with ``k = 2 pi / wavelength``."""
    r = np.asarray(r, dtype=np.float64)
    if np.any(r <= 0):
        raise ValueError("path length must be positive")
    k = 2 * np.pi / wavelength
    out = np.exp(-1j * k * r) / r
    return complex(out) if out.ndim == 0 else out


def fresnel_reflection(n1: float, n2: float, theta_i: float) -> tuple[float, float, float]:
    """Power reflection coefficients (R_perp, R_par) and the refraction angle.

    Total internal reflection returns ``R_perp = R_par = 1`` and ``theta_t = pi/2``.
    """
    if n1 < 1 or n2 < 1:
        raise ValueError("refractive indices must be >= 1")
    if not (0.0 <= theta_i < np.pi / 2):
        raise ValueError(f"incidence angle {theta_i!r} outside [0, pi/2)")
    s = n1 * np.sin(theta_i) / n2
    if s >= 1.0:
        return 1.0, 1.0, np.pi / 2
    theta_t = float(np.arcsin(s))
    ci, ct = np.cos(theta_i), np.cos(theta_t)
    # labels follow the usual optics convention: the parallel term vanishes at Brewster
    r_par = ((n2 * ci - n1 * ct) / (n2 * ci + n1 * ct)) ** 2
    r_perp = ((n2 * ct - n1 * ci) / (n2 * ct + n1 * ci)) ** 2
    return float(r_perp), float(r_par), theta_t


def reflection_amplitude(material: Material, theta_i: float) -> float:
    # single scalar polarisation: mean of the two power coefficients
    r_perp, r_par, _ = fresnel_reflection(1.0, material.refractive_index, min(theta_i, np.pi / 2 - 1e-12))
    return float(np.sqrt(0.5 * (r_perp + r_par)))


def scattering_gain(psi_r: float, material: Material) -> float:
    """Directive single-lobe scattering power relative to the specular direction."""
    if not (0.0 <= psi_r <= np.pi + 1e-12):
        raise ValueError("psi_r must lie in [0, pi]")
    lobe = max(0.0, (1.0 + np.cos(psi_r)) / 2.0)
    return float(material.scattering_amplitude ** 2 * lobe ** material.scattering_exponent)


@dataclass(frozen=True)
class DiffractionGeometry:
    h: float
    d1: float
    d2: float
    wavelength: float

    def __post_init__(self):
        if self.d1 <= 0 or self.d2 <= 0 or self.wavelength <= 0:
            raise ValueError("d1, d2 and wavelength must be positive")


def diffraction_v(geom: DiffractionGeometry) -> float:
    """Fresnel-Kirchhoff parameter; negative when the edge lies below the direct line."""
    return float(geom.h * np.sqrt(2.0 / geom.wavelength * (1.0 / geom.d1 + 1.0 / geom.d2)))


def diffraction_loss_db(v: float) -> float:
    """Knife-edge loss approximation; valid from v = -0.7 upward, 0 dB below."""
    if v < -0.7:
        return 0.0
    return float(6.9 + 20.0 * np.log10(np.sqrt((v - 0.1) ** 2 + 1.0) + v - 0.1))


def fresnel_integral_ratio(v: float) -> complex:
    """Diffracted-to-free-space field ratio by adaptive quadrature.

    Uses ``int_v^inf = (1 - i)/2 - int_0^v`` so only a finite integral is evaluated.
    """
    v = float(v)
    if not np.isfinite(v):
        raise ValueError("v must be finite")
    re, _ = integrate.quad(lambda t: np.cos(np.pi * t * t / 2), 0.0, v, limit=400, epsabs=1e-13, epsrel=1e-12)
    im, _ = integrate.quad(lambda t: -np.sin(np.pi * t * t / 2), 0.0, v, limit=400, epsabs=1e-13, epsrel=1e-12)
    tail = (0.5 - 0.5j) - (re + 1j * im)
    return complex((1 + 1j) / 2 * tail)


# --------------------------------------------------------------------------
# path records


@dataclass(frozen=True)
class Interaction:
    kind: str  # "reflection" | "scattering" | "diffraction"
    point: np.ndarray
    material_id: int
    face_id: int = -1


@dataclass(frozen=True)
class PathComponent:
    complex_gain: complex
    delay: float
    aoa_azimuth: float
    aoa_elevation: float
    aod_azimuth: float
    aod_elevation: float
    interactions: tuple[Interaction, ...]
    path_length: float

    @property
    def is_los(self) -> bool:
        return not self.interactions

    @property
    def gain_db(self) -> float:
        return float(20 * np.log10(max(abs(self.complex_gain), 1e-300)))

    @property
    def n_reflections(self) -> int:
        return sum(1 for i in self.interactions if i.kind == "reflection")

    def sort_key(self):
        return (round(self.path_length, 9), len(self.interactions),
                tuple((i.kind, i.face_id, *np.round(i.point, 6)) for i in self.interactions))


@dataclass(frozen=True)
class TraceConfig:
    carrier_frequency: float = 3.5e9
    max_reflections: int = 3
    ray_count: int = 10000
    capture_radius_coefficient: float = 1.0
    min_path_gain_db: float = -160.0
    enable_scattering: bool = False
    enable_diffraction: bool = True
    scattering_tile_size: float = 5.0

    def __post_init__(self):
        if self.max_reflections < 0:
            raise ValueError("max_reflections must be >= 0")
        if self.carrier_frequency <= 0:
            raise ValueError("carrier_frequency must be positive")
        if self.ray_count < 1:
            raise ValueError("ray_count must be >= 1")

    @property
    def wavelength(self) -> float:
        return C_LIGHT / self.carrier_frequency

    @property
    def angular_step(self) -> float:
        """Mean angular spacing of the launch directions (rad)."""
        return float(np.sqrt(4 * np.pi / self.ray_count))


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n, dtype=np.float64) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def reflect(d: np.ndarray, n: np.ndarray) -> np.ndarray:
    return d - 2.0 * np.sum(d * n, axis=-1, keepdims=True) * n


# --------------------------------------------------------------------------
# discovery


def discover_sequences(scene: SceneModel, tx, receivers: np.ndarray, cfg: TraceConfig) -> list[dict]:
    """Shoot-and-bounce discovery of reflecting-face sequences per receiver.

    Returns one ``{face_sequence: smallest miss distance}`` dict per receiver.
    """
    tx = vec3(tx)
    receivers = np.asarray(receivers, dtype=np.float64).reshape(-1, 3)
    bvh = scene.bvh
    dirs = fibonacci_sphere(cfg.ray_count)
    origins = np.broadcast_to(tx, dirs.shape).copy()
    offset = np.zeros(len(dirs))
    history = np.full((len(dirs), cfg.max_reflections), -1, dtype=np.int64)
    alive = np.arange(len(dirs))
    step = cfg.angular_step
    found: list[dict] = [dict() for _ in receivers]
    face_ids = scene.face_ids
    normals = scene.normals
    far = 10.0 * float(np.linalg.norm(scene.bounds.max_corner - scene.bounds.min_corner))

    for bounce in range(cfg.max_reflections + 1):
        if len(alive) == 0:
            break
        o, d = origins[alive], dirs[alive]
        hits = nearest_hits(bvh, o, d)
        seg_len = np.where(hits.hit, hits.t, far)
        for ri, rx in enumerate(receivers):
            s = np.clip(np.einsum("ij,ij->i", rx - o, d), 0.0, seg_len)
            miss = np.linalg.norm(o + s[:, None] * d - rx, axis=1)
            unfolded = offset[alive] + s
            cap = np.nonzero(miss < cfg.capture_radius_coefficient * np.maximum(unfolded, 1e-9) * step)[0]
            table = found[ri]
            for j in cap:
                key = tuple(int(f) for f in history[alive[j], :bounce])
                m = float(miss[j])
                if key not in table or m < table[key]:
                    table[key] = m
        if bounce == cfg.max_reflections:
            break
        keep = hits.hit
        idx = alive[keep]
        tri = hits.triangle_index[keep]
        pts = o[keep] + hits.t[keep, None] * d[keep]
        history[idx, bounce] = face_ids[tri]
        origins[idx] = pts
        dirs[idx] = reflect(d[keep], normals[tri])
        offset[idx] += hits.t[keep]
        alive = idx
    return found


# --------------------------------------------------------------------------
# exact path construction


def _in_face(scene: SceneModel, face: int, p: np.ndarray, tol: float = 1e-6) -> bool:
    for k in scene.face_triangles[face]:
        v = scene.vertices[k]
        e1, e2, w = v[1] - v[0], v[2] - v[0], p - v[0]
        d11, d12, d22 = e1 @ e1, e1 @ e2, e2 @ e2
        dw1, dw2 = w @ e1, w @ e2
        den = d11 * d22 - d12 * d12
        a = (d22 * dw1 - d12 * dw2) / den
        b = (d11 * dw2 - d12 * dw1) / den
        if a >= -tol and b >= -tol and a + b <= 1 + tol:
            return True
    return False


def _face_plane(scene: SceneModel, face: int) -> tuple[np.ndarray, np.ndarray, int]:
    k = scene.face_triangles[face][0]
    return scene.vertices[k, 0], scene.normals[k], int(scene.material_ids[k])


def image_points(scene: SceneModel, tx, rx, faces: Sequence[int]) -> np.ndarray | None:
    """Reflection points of the specular path tx -> faces -> rx, or None if geometrically invalid."""
    tx, rx = vec3(tx), vec3(rx)
    planes = [_face_plane(scene, f) for f in faces]
    images = [tx]
    for p0, n, _ in planes:
        img = images[-1]
        images.append(img - 2.0 * np.dot(img - p0, n) * n)
    pts = []
    target = rx
    for j in range(len(faces) - 1, -1, -1):
        p0, n, _ = planes[j]
        d = images[j + 1] - target
        den = np.dot(d, n)
        if abs(den) < 1e-12:
            return None
        s = np.dot(p0 - target, n) / den
        if not (1e-9 < s < 1 - 1e-9):
            return None
        p = target + s * d
        if not _in_face(scene, faces[j], p):
            return None
        pts.append(p)
        target = p
    return np.array(pts[::-1]).reshape(-1, 3)


def _angles(v) -> tuple[float, float]:
    az, el = angles_from_direction(v)
    return float(az), float(el)


def _make_path(chain: np.ndarray, interactions: tuple[Interaction, ...], factor: float,
               wavelength: float) -> PathComponent:
    legs = np.linalg.norm(np.diff(chain, axis=0), axis=1)
    length = float(legs.sum())
    gain = free_space_field(length, wavelength) * factor
    aoa = _angles(chain[-2] - chain[-1])
    aod = _angles(chain[1] - chain[0])
    return PathComponent(complex(gain), length / C_LIGHT, aoa[0], aoa[1], aod[0], aod[1], interactions, length)


def specular_path(scene: SceneModel, tx, rx, faces: Sequence[int], wavelength: float) -> PathComponent | None:
    tx, rx = vec3(tx), vec3(rx)
    if faces:
        pts = image_points(scene, tx, rx, faces)
        if pts is None:
            return None
    else:
        pts = np.empty((0, 3))
    chain = np.vstack([tx, pts, rx])
    if np.any(np.linalg.norm(np.diff(chain, axis=0), axis=1) < 1e-6):
        return None
    if np.any(segments_blocked(scene.bvh, chain[:-1], chain[1:])):
        return None
    factor = 1.0
    inter = []
    for j, f in enumerate(faces):
        _, n, mid = _face_plane(scene, f)
        d_in = chain[j + 1] - chain[j]
        cos_i = abs(np.dot(d_in, n)) / np.linalg.norm(d_in)
        factor *= reflection_amplitude(scene.material(mid), float(np.arccos(min(1.0, cos_i))))
        inter.append(Interaction("reflection", chain[j + 1], mid, int(f)))
    return _make_path(chain, tuple(inter), factor, wavelength)


def _scattered_paths(scene: SceneModel, tx, rx, cfg: TraceConfig) -> list[PathComponent]:
    tiles, owners = [], []
    size = cfg.scattering_tile_size
    for bi, b in enumerate(scene.buildings):
        fp, k = b.footprint, len(b.footprint)
        for i in range(k):
            a, c = fp[i], fp[(i + 1) % k]
            width = float(np.linalg.norm(c - a))
            nu, nv = max(1, int(np.ceil(width / size))), max(1, int(np.ceil(b.height / size)))
            us = (np.arange(nu) + 0.5) / nu
            vs = b.base + (np.arange(nv) + 0.5) / nv * b.height
            for u in us:
                xy = a + u * (c - a)
                for z in vs:
                    tiles.append([xy[0], xy[1], z])
                    owners.append((bi, i))
    if not tiles:
        return []
    tiles = np.array(tiles)
    tx, rx = vec3(tx), vec3(rx)
    # outward wall normals for ccw footprints
    normals = []
    for bi, i in owners:
        fp = scene.buildings[bi].footprint
        e = fp[(i + 1) % len(fp)] - fp[i]
        normals.append([e[1], -e[0], 0.0])
    normals = np.array(normals)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    front = (np.einsum("ij,ij->i", tx - tiles, normals) > 0) & (np.einsum("ij,ij->i", rx - tiles, normals) > 0)
    if not np.any(front):
        return []
    idx = np.nonzero(front)[0]
    pts = tiles[idx] + 1e-3 * normals[idx]
    blocked = segments_blocked(scene.bvh, np.broadcast_to(tx, pts.shape), pts) | \
        segments_blocked(scene.bvh, pts, np.broadcast_to(rx, pts.shape))
    out = []
    for j, p in zip(idx[~blocked], pts[~blocked]):
        n = normals[j]
        bi, wall = owners[j]
        mat = scene.material(scene.buildings[bi].material_id)
        spec = reflect((p - tx) / np.linalg.norm(p - tx), n)
        to_rx = (rx - p) / np.linalg.norm(rx - p)
        psi = float(np.arccos(np.clip(np.dot(spec, to_rx), -1.0, 1.0)))
        factor = min(1.0, float(np.sqrt(scattering_gain(psi, mat))))
        if factor <= 0:
            continue
        face = int(scene.face_ids[np.nonzero(scene.building_ids == bi)[0][2 * wall]])
        out.append(_make_path(np.vstack([tx, p, rx]), (Interaction("scattering", p, mat.id, face),),
                              factor, cfg.wavelength))
    return out


def _edge_point(e0, e1, a, b) -> np.ndarray | None:
    """Point on segment e0-e1 minimising |a-p| + |p-b| if it lies strictly inside the edge."""
    u = e1 - e0
    ell = np.linalg.norm(u)
    u = u / ell
    a1, a2 = np.dot(a - e0, u), np.dot(b - e0, u)
    r1 = np.linalg.norm(a - e0 - a1 * u)
    r2 = np.linalg.norm(b - e0 - a2 * u)
    if r1 + r2 < 1e-12:
        return None
    s = (a1 * r2 + a2 * r1) / (r1 + r2)
    if not (1e-6 < s < ell - 1e-6):
        return None
    return e0 + s * u


def _diffracted_paths(scene: SceneModel, tx, rx, cfg: TraceConfig) -> list[PathComponent]:
    tx, rx = vec3(tx), vec3(rx)
    if not segments_blocked(scene.bvh, tx[None], rx[None])[0]:
        return []
    direct = rx - tx
    dist = np.linalg.norm(direct)
    udir = direct / dist
    out = []
    # wrapper boxes of the buildings registered along the direct line
    for bi in scene.grid.objects_along_segment(tx, rx):
        b = scene.buildings[bi]
        box = b.aabb
        lo, hi = box.min_corner - 1e-6, box.max_corner + 1e-6
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = np.where(udir != 0, (lo - tx) / udir, -np.inf)
            t1 = np.where(udir != 0, (hi - tx) / udir, np.inf)
        inside_par = np.all((udir != 0) | ((tx >= lo) & (tx <= hi)))
        tn = np.max(np.minimum(t0, t1))
        tf = np.min(np.maximum(t0, t1))
        if not inside_par or tn > min(tf, dist) or tf < 0:
            continue
        for e0, e1, kind in b.edges():
            p = _edge_point(e0, e1, tx, rx)
            if p is None:
                continue
            if np.any(segments_blocked(scene.bvh, np.array([tx, p]), np.array([p, rx]))):
                continue
            d1, d2 = float(np.linalg.norm(p - tx)), float(np.linalg.norm(rx - p))
            h = float(np.linalg.norm(np.cross(p - tx, udir)))
            v = diffraction_v(DiffractionGeometry(h, d1, d2, cfg.wavelength))
            factor = 10 ** (-diffraction_loss_db(v) / 20)
            out.append(_make_path(np.vstack([tx, p, rx]),
                                  (Interaction("diffraction", p, b.material_id, -1),), factor, cfg.wavelength))
    return out


def _point_of(rx) -> np.ndarray:
    return rx.position if isinstance(rx, RruConfig) else vec3(rx)


def trace_to_receivers(scene: SceneModel, tx, receivers: Iterable, cfg: TraceConfig) -> list[list[PathComponent]]:
    """Trace one transmitter to several receivers, sharing the launched rays."""
    tx = vec3(tx)
    rx_pts = np.array([_point_of(r) for r in receivers], dtype=np.float64).reshape(-1, 3)
    found = discover_sequences(scene, tx, rx_pts, cfg) if cfg.max_reflections > 0 else [{} for _ in rx_pts]
    floor = 10 ** (cfg.min_path_gain_db / 20)
    out = []
    for rx, seqs in zip(rx_pts, found):
        seqs = dict(seqs)
        seqs.setdefault((), 0.0)
        paths = []
        for faces in sorted(seqs, key=lambda f: (seqs[f], len(f), f)):
            p = specular_path(scene, tx, rx, faces, cfg.wavelength)
            if p is not None:
                paths.append(p)
        if cfg.enable_scattering:
            paths += _scattered_paths(scene, tx, rx, cfg)
        if cfg.enable_diffraction:
            paths += _diffracted_paths(scene, tx, rx, cfg)
        paths = [p for p in paths if abs(p.complex_gain) >= floor]
        unique = {}
        for p in paths:
            unique.setdefault(p.sort_key(), p)
        out.append([unique[k] for k in sorted(unique)])
    return out


def trace_paths(scene: SceneModel, tx, rx, cfg: TraceConfig | None = None) -> list[PathComponent]:
    """All propagation paths from transmitter ``tx`` to receiver ``rx`` (an RRU or a point)."""
    return trace_to_receivers(scene, tx, [rx], cfg or TraceConfig())[0]


def received_power(paths: Sequence[PathComponent]) -> float:
    return float(sum(abs(p.complex_gain) ** 2 for p in paths))
