"""CU fusion: re-trace reported angles through the map and intersect the rays.

Each reported peak is expanded into a small grid of biased directions. Every
biased ray is traced from its RRU with specular reflections, and rays from
different RRUs that pass close to each other yield position candidates.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numba
import numpy as np

from .array_signal import AngleReport, Peak
from .geometry import direction_from_angles, nearest_hits
from .propagation import reflect
from .scene import SceneModel, RruConfig

FWHM_TO_SIGMA = 1.0 / 2.355
_MIN_SEGMENT = 1e-6


class NoPositionError(ValueError):
    """Raised when a candidate set cannot produce a position."""

    def __init__(self, msg: str = "no position"):
        super().__init__(msg)


@dataclass(frozen=True)
class BiasSearchConfig:
    max_bias: float = np.deg2rad(1.0)
    steps: int = 3
    max_reflections: int = 3
    # single knife-edge diffraction: a ray grazing a building edge spawns a fan on the diffraction cone
    diffraction: bool = False
    edge_tolerance: float = 1.0  # m, ray-to-edge distance that counts as grazing
    fan_step: float = np.deg2rad(2.0)
    fan_half_width: float = np.deg2rad(90.0)

    def __post_init__(self):
        if not self.max_bias > 0:
            raise ValueError("max_bias must be positive")
        if self.diffraction and not (self.edge_tolerance > 0 and self.fan_step > 0 and self.fan_half_width > 0):
            raise ValueError("diffraction fan parameters must be positive")
        if self.steps < 1 or self.steps % 2 == 0:
            raise ValueError("bias grid needs an odd number of steps per axis")
        if self.max_reflections < 0:
            raise ValueError("max_reflections must be >= 0")

    @property
    def prior_sigma(self) -> float:
        return self.max_bias / 3.0

    def offsets(self) -> np.ndarray:
        """Per-axis bias values; the centre entry is exactly zero."""
        if self.steps == 1:
            return np.zeros(1)
        x = np.linspace(-self.max_bias, self.max_bias, self.steps)
        return 0.5 * (x - x[::-1])  # bitwise mirror-symmetric

    def prior_density(self, d_az, d_el):
        s = self.prior_sigma
        return np.exp(-0.5 * (np.square(d_az) + np.square(d_el)) / s**2) / (2 * np.pi * s**2)


@dataclass(frozen=True)
class TracedRay:
    rru_id: int
    peak_index: int
    bias: tuple[float, float]
    points: np.ndarray  # polyline vertices, (n_segments + 1, 3)
    weight_factor: float
    faces: tuple[int, ...] = ()  # triangle index at each reflection
    edge_point: np.ndarray | None = None  # set on rays continuing from a diffracting edge

    @property
    def diffracted(self) -> bool:
        return self.edge_point is not None

    @property
    def n_segments(self) -> int:
        return len(self.points) - 1

    @property
    def n_reflections(self) -> int:
        return len(self.faces)

    def segments(self) -> tuple[np.ndarray, np.ndarray]:
        return self.points[:-1], self.points[1:]


@dataclass(frozen=True)
class PositionCandidate:
    position: np.ndarray
    weight: float
    ray_count: int = 1
    reflections: tuple[int, ...] = ()  # per contributing ray, bounces before the meeting point
    rru_set: frozenset = frozenset()
    los: bool = False
    min_distance: float = 0.0

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError("candidate weight must be >= 0")
        if self.ray_count < 1:
            raise ValueError("ray_count must be >= 1")

    @property
    def max_reflections(self) -> int:
        return max(self.reflections, default=0)


@dataclass(frozen=True)
class MissConfig:
    epsilon0: float = 25.0

    def __post_init__(self):
        if not self.epsilon0 > 0:
            raise ValueError("epsilon0 must be positive")


# --------------------------------------------------------------------------
# ray search


def peak_likelihood(peak: Peak, d_az, d_el, fallback_width: float = np.deg2rad(1.0)):
    """Gaussian in the angular offset from the peak centre, sigma from the half-power width."""
    wa = peak.width_az if np.isfinite(peak.width_az) and peak.width_az > 0 else fallback_width
    we = peak.width_el if np.isfinite(peak.width_el) and peak.width_el > 0 else fallback_width
    sa, se = wa * FWHM_TO_SIGMA, we * FWHM_TO_SIGMA
    return np.exp(-0.5 * (np.square(d_az) / sa**2 + np.square(d_el) / se**2))


def _exit_distance(bounds, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    lo, hi = bounds.min_corner, bounds.max_corner
    with np.errstate(divide="ignore", invalid="ignore"):
        t_hi = np.where(dirs > 0, (hi - origins) / dirs, np.inf)
        t_lo = np.where(dirs < 0, (lo - origins) / dirs, np.inf)
    return np.maximum(np.minimum(t_hi, t_lo).min(axis=1), 0.0)


def trace_polylines(scene: SceneModel, origins, directions, max_reflections: int):
    """Specular polylines for a batch of rays, clipped to the scene bounds.

    Returns ``(points, n_segments, faces)`` with ``points`` shaped
    ``(n, max_reflections + 2, 3)``; unused trailing vertices are NaN.
    """
    o = np.array(origins, dtype=np.float64).reshape(-1, 3)
    d = np.array(directions, dtype=np.float64).reshape(-1, 3)
    n = len(o)
    pts = np.full((n, max_reflections + 2, 3), np.nan)
    faces = np.full((n, max_reflections + 1), -1, dtype=np.int64)
    nseg = np.zeros(n, dtype=np.int64)
    pts[:, 0] = o
    active = np.arange(n)
    bounds = scene.bounds
    for k in range(max_reflections + 1):
        if len(active) == 0:
            break
        oa, da = o[active], d[active]
        t_exit = _exit_distance(bounds, oa, da)
        # the ground lies on the bounds floor, pad so a ground hit is not taken for an exit
        hits = nearest_hits(scene.bvh, oa, da, t_exit + 1e-6 * (1.0 + t_exit))
        t = np.where(hits.hit, hits.t, t_exit)
        end = oa + t[:, None] * da
        pts[active, k + 1] = end
        nseg[active] = k + 1
        keep = hits.hit & (t > _MIN_SEGMENT)
        if k == max_reflections:
            break
        faces[active[keep], k] = hits.triangle_index[keep]
        nrm = scene.normals[hits.triangle_index[keep]]
        o[active[keep]] = end[keep]
        d[active[keep]] = reflect(da[keep], nrm)
        active = active[keep]
    return pts, nseg, faces


def ray_search(reports: Sequence[AngleReport], scene: SceneModel, rrus: Sequence[RruConfig] | dict,
               cfg: BiasSearchConfig = BiasSearchConfig()) -> list[TracedRay]:
    """Launch biased rays around every reported peak and trace them through the map."""
    by_id = rrus if isinstance(rrus, dict) else {r.id: r for r in rrus}
    offs = cfg.offsets()
    daz, dele = (g.ravel() for g in np.meshgrid(offs, offs, indexing="ij"))
    prior = cfg.prior_density(daz, dele)

    meta, origins, dirs, factors = [], [], [], []
    for rep in reports:
        if rep.rru_id not in by_id:
            raise KeyError(f"unknown rru id {rep.rru_id}")
        pos = by_id[rep.rru_id].position
        for pi, peak in enumerate(rep.peaks):
            dv = direction_from_angles(peak.azimuth + daz, peak.elevation + dele)
            f = prior * peak_likelihood(peak, daz, dele)
            for j in range(len(daz)):
                meta.append((rep.rru_id, pi, (float(daz[j]), float(dele[j]))))
            origins.append(np.broadcast_to(pos, dv.shape))
            dirs.append(dv)
            factors.append(f)
    if not meta:
        return []
    pts, nseg, faces = trace_polylines(scene, np.concatenate(origins), np.concatenate(dirs),
                                       cfg.max_reflections)
    factors = np.concatenate(factors)
    out = []
    for i, (rid, pi, bias) in enumerate(meta):
        ns = int(nseg[i])
        fc = tuple(int(x) for x in faces[i, :ns - 1])
        out.append(TracedRay(rid, pi, bias, pts[i, :ns + 1].copy(), float(factors[i]), fc))
    if cfg.diffraction and scene.buildings:
        out += _diffraction_fans(scene, out, cfg)
    return out


def scene_edges(scene: SceneModel) -> tuple[np.ndarray, np.ndarray]:
    """Start and end points of every roof and vertical building edge."""
    e = [(a, b) for bld in scene.buildings for a, b, _ in bld.edges()]
    return np.array([a for a, _ in e]), np.array([b for _, b in e])


def _diffraction_fans(scene: SceneModel, parents: Sequence[TracedRay], cfg: BiasSearchConfig) -> list[TracedRay]:
    """Rays leaving grazed edges along the diffraction cone (equal angle to the edge).

    Only the first leg of a parent can graze an edge, matching the single
    diffraction paths of the forward model. Per reported peak and edge, the
    biased ray passing closest to the edge seeds one fan, and the fan splits
    that ray's weight factor evenly.
    """
    e0, e1 = scene_edges(scene)
    phis = np.arange(-cfg.fan_half_width, cfg.fan_half_width + 1e-12, cfg.fan_step)
    best: dict[tuple[int, int, int], tuple[float, TracedRay, np.ndarray]] = {}
    for ray in parents:
        a, b = ray.points[0], ray.points[1]
        for k in range(len(e0)):
            pa, pe = closest_points(a, b, e0[k], e1[k])
            dist = float(np.linalg.norm(pa - pe))
            key = (ray.rru_id, ray.peak_index, k)
            if dist < cfg.edge_tolerance and (key not in best or dist < best[key][0]):
                best[key] = (dist, ray, pe)
    meta, dirs = [], []
    for (_, _, k), (_, ray, pe) in sorted(best.items(), key=lambda kv: kv[0]):
        d = ray.points[1] - ray.points[0]
        d = d / np.linalg.norm(d)
        u_e = (e1[k] - e0[k]) / np.linalg.norm(e1[k] - e0[k])
        c = float(d @ u_e)
        perp = d - c * u_e
        if np.linalg.norm(perp) < 1e-9:
            continue  # ray runs along the edge, the cone degenerates
        u = perp / np.linalg.norm(perp)
        v = np.cross(u_e, u)
        fan = c * u_e + np.sqrt(max(0.0, 1.0 - c * c)) * (np.cos(phis)[:, None] * u + np.sin(phis)[:, None] * v)
        for f in fan:
            meta.append((ray, pe, ray.weight_factor / len(phis)))
            dirs.append(f)
    if not meta:
        return []
    origins = np.array([m[1] for m in meta])
    pts, _, _ = trace_polylines(scene, origins, np.array(dirs), 0)
    out = []
    for i, (ray, pe, weight) in enumerate(meta):
        end = pts[i, 1]
        if np.linalg.norm(end - pe) < cfg.edge_tolerance:
            continue  # straight back into the building
        out.append(TracedRay(ray.rru_id, ray.peak_index, ray.bias, np.vstack([ray.points[0], pe, end]),
                             weight, (), pe.copy()))
    return out


# --------------------------------------------------------------------------
# intersection


@numba.njit(cache=True)
def _closest_params(p1, q1, p2, q2):
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = d1 @ d1
    e = d2 @ d2
    f = d2 @ r
    c = d1 @ r
    b = d1 @ d2
    # degenerate (point) segments
    if a <= 1e-300 and e <= 1e-300:
        return 0.0, 0.0
    if a <= 1e-300:
        return 0.0, min(max(f / e, 0.0), 1.0)
    if e <= 1e-300:
        return min(max(-c / a, 0.0), 1.0), 0.0
    denom = a * e - b * b
    s = 0.0
    if denom > 1e-12 * a * e:
        s = min(max((b * f - c * e) / denom, 0.0), 1.0)
    t = (b * s + f) / e
    if t < 0.0:
        t = 0.0
        s = min(max(-c / a, 0.0), 1.0)
    elif t > 1.0:
        t = 1.0
        s = min(max((b - c) / a, 0.0), 1.0)
    return s, t


@numba.njit(cache=True)
def _pair_min_distance(pts, nseg, group, fan, box_lo, box_hi, d_max):
    """Ray pairs (i < j, distinct groups, not both fan rays) closer than ``d_max``.

    Returns parallel arrays ``(i, j, distance, segment_i, segment_j)``.
    """
    n = pts.shape[0]
    cap = 1024
    out_i = np.empty(cap, dtype=np.int64)
    out_j = np.empty(cap, dtype=np.int64)
    out_d = np.empty(cap)
    out_a = np.empty(cap, dtype=np.int64)
    out_b = np.empty(cap, dtype=np.int64)
    m = 0
    for i in range(n):
        for j in range(i + 1, n):
            if group[i] == group[j] or (fan[i] and fan[j]):
                continue
            sep = False
            for k in range(3):
                if box_lo[i, k] > box_hi[j, k] + d_max or box_lo[j, k] > box_hi[i, k] + d_max:
                    sep = True
                    break
            if sep:
                continue
            best = np.inf
            ba = -1
            bb = -1
            for a in range(nseg[i]):
                for b in range(nseg[j]):
                    s, t = _closest_params(pts[i, a], pts[i, a + 1], pts[j, b], pts[j, b + 1])
                    x = pts[i, a] + s * (pts[i, a + 1] - pts[i, a]) - pts[j, b] - t * (pts[j, b + 1] - pts[j, b])
                    dd = np.sqrt(x @ x)
                    # strict < keeps the earliest segment pair on ties
                    if dd < best:
                        best = dd
                        ba = a
                        bb = b
            if best < d_max:
                if m == cap:
                    cap *= 2
                    out_i = np.concatenate((out_i, np.empty(cap - m, dtype=np.int64)))
                    out_j = np.concatenate((out_j, np.empty(cap - m, dtype=np.int64)))
                    out_d = np.concatenate((out_d, np.empty(cap - m)))
                    out_a = np.concatenate((out_a, np.empty(cap - m, dtype=np.int64)))
                    out_b = np.concatenate((out_b, np.empty(cap - m, dtype=np.int64)))
                out_i[m] = i
                out_j[m] = j
                out_d[m] = best
                out_a[m] = ba
                out_b[m] = bb
                m += 1
    return out_i[:m], out_j[:m], out_d[:m], out_a[:m], out_b[:m]


def closest_points(p1, q1, p2, q2) -> tuple[np.ndarray, np.ndarray]:
    """Closest points between segments ``p1q1`` and ``p2q2``."""
    p1, q1, p2, q2 = (np.asarray(v, dtype=np.float64) for v in (p1, q1, p2, q2))
    s, t = _closest_params(p1, q1, p2, q2)
    return p1 + s * (q1 - p1), p2 + t * (q2 - p2)


def _pack(rays: Sequence[TracedRay]):
    smax = max(r.n_segments for r in rays)
    pts = np.zeros((len(rays), smax + 1, 3))
    nseg = np.array([r.n_segments for r in rays], dtype=np.int64)
    for i, r in enumerate(rays):
        pts[i, : r.n_segments + 1] = r.points
        pts[i, r.n_segments + 1:] = r.points[-1]
    return pts, nseg


def _inside(scene: SceneModel | None, p: np.ndarray, tol: float = 1e-6) -> bool:
    if p[2] < -tol:
        return False
    return scene is None or scene.bounds.contains(p, tol)


PLANE_MODES = ("auto", "always", "never")


def intersect_rays(rays: Sequence[TracedRay], ue_height: float = 1.5, d_intersect: float = 2.0,
                   scene: SceneModel | None = None, plane: str = "auto",
                   all_crossings: bool = False) -> list[PositionCandidate]:
    """Position candidates from the traced rays.

    Rays of distinct RRUs that come within ``d_intersect`` of each other give a
    candidate at the midpoint of their closest approach. Single rays give a
    candidate where they cross the ``z = ue_height`` plane; ``plane`` selects
    when: ``"auto"`` only if a single RRU reported, ``"always"`` or ``"never"``.
    """
    if not d_intersect > 0:
        raise ValueError("d_intersect must be positive")
    if plane not in PLANE_MODES:
        raise ValueError(f"plane must be one of {PLANE_MODES}")
    if not rays:
        return []
    # canonical order makes the result independent of the input ordering
    order = sorted(range(len(rays)), key=lambda i: (rays[i].rru_id, rays[i].peak_index, rays[i].bias,
                                                   rays[i].points.tobytes()))
    rays = [rays[i] for i in order]
    single = len({r.rru_id for r in rays}) == 1
    out = [] if single else _pair_candidates(rays, d_intersect, scene)
    if plane == "always" or (plane == "auto" and single):
        out += _plane_candidates(rays, ue_height, scene, all_crossings)
    return out


def _pair_candidates(rays, d_intersect, scene):
    pts, nseg = _pack(rays)
    group = np.array([r.rru_id for r in rays], dtype=np.int64)
    box_lo = np.nanmin(pts, axis=1)
    box_hi = np.nanmax(pts, axis=1)
    fan = np.array([r.diffracted for r in rays], dtype=np.bool_)
    # two diffraction cones meet along a whole curve, so fan-fan pairs carry no position information
    pi, pj, pd, sa, sb = _pair_min_distance(pts, nseg, group, fan, box_lo, box_hi, float(d_intersect))
    out = []
    for i, j, dist, a, b in zip(pi, pj, pd, sa, sb):
        pa, pb = closest_points(pts[i, a], pts[i, a + 1], pts[j, b], pts[j, b + 1])
        mid = 0.5 * (pa + pb)
        if not _inside(scene, mid):
            continue
        out.append(PositionCandidate(
            position=mid,
            weight=candidate_weight([rays[i], rays[j]]),
            ray_count=2,
            reflections=(int(a), int(b)),
            rru_set=frozenset((rays[i].rru_id, rays[j].rru_id)),
            los=bool(a == 0 and b == 0),
            min_distance=float(dist),
        ))
    return out


def _plane_candidates(rays, ue_height, scene, all_crossings=False):
    out = []
    for r in rays:
        z = r.points[:, 2] - ue_height
        for k in range(r.n_segments):
            if z[k] == 0.0 and k > 0:
                continue  # a crossing at a vertex was counted on the previous segment
            if z[k] * z[k + 1] <= 0 and z[k] != z[k + 1]:
                s = z[k] / (z[k] - z[k + 1])
                p = r.points[k] + s * (r.points[k + 1] - r.points[k])
                if _inside(scene, p):
                    out.append(PositionCandidate(p, r.weight_factor, 1, (k,), frozenset((r.rru_id,)),
                                                 los=(k == 0), min_distance=0.0))
                if not all_crossings:
                    break
    return out


# --------------------------------------------------------------------------
# weights, estimates, filters


def candidate_weight(rays: Iterable[TracedRay]) -> float:
    factors = [r.weight_factor for r in rays]
    if not factors:
        raise ValueError("candidate needs at least one contributing ray")
    return float(np.sum(factors))


def _stack(candidates: Sequence[PositionCandidate]) -> tuple[np.ndarray, np.ndarray]:
    p = np.array([c.position for c in candidates], dtype=np.float64).reshape(-1, 3)
    w = np.array([c.weight for c in candidates], dtype=np.float64)
    return p, w


def weighted_mean(points: np.ndarray, weights: np.ndarray) -> np.ndarray:
    total = float(np.sum(weights))
    if len(points) == 0 or not total > 0:
        raise NoPositionError()
    return (weights[:, None] * points).sum(axis=0) / total


def weighted_variance(points: np.ndarray, weights: np.ndarray) -> float:
    """Trace of the weighted covariance, m^2."""
    mu = weighted_mean(points, weights)
    return float(np.sum(weights * np.sum((points - mu) ** 2, axis=1)) / np.sum(weights))


def expected_position(candidates: Sequence[PositionCandidate]) -> np.ndarray:
    p, w = _stack(candidates)
    return weighted_mean(p, w)


@dataclass(frozen=True)
class FilterPolicy:
    min_ray_count: int = 1
    predicates: tuple[Callable[[PositionCandidate], bool], ...] = field(default_factory=tuple)


def max_reflections_predicate(limit: int) -> Callable[[PositionCandidate], bool]:
    return lambda c: c.max_reflections <= limit


def filter_candidates(candidates: Sequence[PositionCandidate], policy: FilterPolicy = FilterPolicy()
                      ) -> list[PositionCandidate]:
    return [c for c in candidates
            if c.ray_count >= policy.min_ray_count and all(pred(c) for pred in policy.predicates)]


def candidate_variance(candidates: Sequence[PositionCandidate]) -> float:
    if not candidates:
        return float("inf")
    p, w = _stack(candidates)
    if not np.sum(w) > 0:
        return float("inf")
    return weighted_variance(p, w)


def detect_miss(candidates: Sequence[PositionCandidate], cfg: MissConfig = MissConfig()) -> bool:
    return candidate_variance(candidates) > cfg.epsilon0
