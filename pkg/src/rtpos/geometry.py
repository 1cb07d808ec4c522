"""3D primitives, ray intersection and acceleration structures.

Coordinates are right-handed with z up. Points and directions are plain
``float64`` numpy arrays of shape ``(3,)``; batched queries take ``(n, 3)``.
Azimuth is measured from the +y axis clockwise toward +x, elevation from the
horizontal plane (positive up).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numba
import numpy as np

Vec3 = np.ndarray

T_EPSILON = 1e-4  # minimum hit distance (m), avoids self-intersection after a bounce
_DET_EPS = 1e-12
_UNIT_TOL = 1e-9


def vec3(x, y=None, z=None) -> Vec3:
    if y is None:
        out = np.asarray(x, dtype=np.float64).reshape(3).copy()
    else:
        out = np.array([x, y, z], dtype=np.float64)
    return out


def normalize(v) -> Vec3:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / n


def direction_from_angles(azimuth, elevation) -> np.ndarray:
    """Unit vector(s) for azimuth (from +y toward +x) and elevation, radians."""
    az, el = np.broadcast_arrays(np.asarray(azimuth, dtype=np.float64), np.asarray(elevation, dtype=np.float64))
    ce = np.cos(el)
    return np.stack([ce * np.sin(az), ce * np.cos(az), np.sin(el)], axis=-1)


def angles_from_direction(d) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`direction_from_angles`; ``d`` need not be unit."""
    d = np.asarray(d, dtype=np.float64)
    az = np.arctan2(d[..., 0], d[..., 1])
    el = np.arctan2(d[..., 2], np.hypot(d[..., 0], d[..., 1]))
    return az, el


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


@dataclass(frozen=True)
class Ray:
    origin: Vec3
    direction: Vec3
    accumulated_length: float = 0.0

    def __post_init__(self):
        o = vec3(self.origin)
        d = vec3(self.direction)
        if abs(np.linalg.norm(d) - 1.0) > _UNIT_TOL:
            raise ValueError(f"ray direction must be unit-norm, got |d|={np.linalg.norm(d)!r}")
        if self.accumulated_length < 0:
            raise ValueError("accumulated_length must be >= 0")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    @classmethod
    def towards(cls, origin, target, accumulated_length: float = 0.0) -> "Ray":
        origin = vec3(origin)
        return cls(origin, normalize(vec3(target) - origin), accumulated_length)

    def at(self, t: float) -> Vec3:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class Triangle:
    v0: Vec3
    v1: Vec3
    v2: Vec3
    material_id: int = 0

    def __post_init__(self):
        for name in ("v0", "v1", "v2"):
            object.__setattr__(self, name, vec3(getattr(self, name)))
        if self.area <= 1e-12:
            raise ValueError(f"degenerate triangle (area {self.area:.3g} m^2)")

    @property
    def area(self) -> float:
        return 0.5 * float(np.linalg.norm(np.cross(self.v1 - self.v0, self.v2 - self.v0)))

    @property
    def normal(self) -> Vec3:
        return normalize(np.cross(self.v1 - self.v0, self.v2 - self.v0))

    @property
    def aabb(self) -> "Aabb":
        pts = np.stack([self.v0, self.v1, self.v2])
        return Aabb(pts.min(axis=0), pts.max(axis=0))


@dataclass(frozen=True)
class Aabb:
    min_corner: Vec3
    max_corner: Vec3

    def __post_init__(self):
        lo, hi = vec3(self.min_corner), vec3(self.max_corner)
        if np.any(lo > hi):
            raise ValueError("Aabb min_corner must be <= max_corner component-wise")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    @classmethod
    def from_points(cls, pts) -> "Aabb":
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        return cls(pts.min(axis=0), pts.max(axis=0))

    def contains(self, p, tol: float = 0.0) -> bool:
        p = np.asarray(p)
        return bool(np.all(p >= self.min_corner - tol) and np.all(p <= self.max_corner + tol))

    def overlaps(self, other: "Aabb") -> bool:
        return bool(np.all(self.min_corner <= other.max_corner) and np.all(other.min_corner <= self.max_corner))

    def union(self, other: "Aabb") -> "Aabb":
        return Aabb(np.minimum(self.min_corner, other.min_corner), np.maximum(self.max_corner, other.max_corner))

    @property
    def center(self) -> Vec3:
        return 0.5 * (self.min_corner + self.max_corner)


class Hit(NamedTuple):
    t: float
    point: Vec3
    barycentric: tuple[float, float]
    triangle_index: int = -1
    material_id: int = -1


# --------------------------------------------------------------------------
# scalar kernels (shared by the single-ray API, the BVH and brute force)


@numba.njit(cache=True, inline="always")
def _mt_intersect(ox, oy, oz, dx, dy, dz, v0, e1, e2, t_min):
    # Moller-Trumbore, two-sided; returns (t, u, v) with t = inf on miss
    px = dy * e2[2] - dz * e2[1]
    py = dz * e2[0] - dx * e2[2]
    pz = dx * e2[1] - dy * e2[0]
    det = e1[0] * px + e1[1] * py + e1[2] * pz
    if abs(det) < _DET_EPS:
        return np.inf, 0.0, 0.0
    inv = 1.0 / det
    tx = ox - v0[0]
    ty = oy - v0[1]
    tz = oz - v0[2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf, 0.0, 0.0
    qx = ty * e1[2] - tz * e1[1]
    qy = tz * e1[0] - tx * e1[2]
    qz = tx * e1[1] - ty * e1[0]
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf, 0.0, 0.0
    t = (e2[0] * qx + e2[1] * qy + e2[2] * qz) * inv
    if t <= t_min:
        return np.inf, 0.0, 0.0
    return t, u, v


@numba.njit(cache=True, inline="always")
def _slab(ox, oy, oz, dx, dy, dz, lo, hi, t_max):
    # returns (t_near, t_far); t_near > t_far signals a miss
    t0 = 0.0
    t1 = t_max
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    for a in range(3):
        if abs(d[a]) < 1e-300:
            if o[a] < lo[a] or o[a] > hi[a]:
                return 1.0, 0.0
            continue
        inv = 1.0 / d[a]
        ta = (lo[a] - o[a]) * inv
        tb = (hi[a] - o[a]) * inv
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    return t0, t1


@numba.njit(cache=True)
def _brute_force_batch(origins, dirs, t_min, t_max, v0, e1, e2):
    n = origins.shape[0]
    m = v0.shape[0]
    best_t = np.full(n, np.inf)
    best_i = np.full(n, -1, dtype=np.int64)
    best_u = np.zeros(n)
    best_v = np.zeros(n)
    for r in range(n):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        bt = t_max[r]
        for k in range(m):
            t, u, v = _mt_intersect(ox, oy, oz, dx, dy, dz, v0[k], e1[k], e2[k], t_min)
            if t < bt or (t == bt and best_i[r] >= 0 and k < best_i[r]):
                bt = t
                best_i[r] = k
                best_u[r] = u
                best_v[r] = v
        if best_i[r] >= 0:
            best_t[r] = bt
    return best_t, best_i, best_u, best_v


@numba.njit(cache=True)
def _bvh_batch(origins, dirs, t_min, t_max, node_lo, node_hi, node_left, node_right,
               node_start, node_count, order, v0, e1, e2):
    n = origins.shape[0]
    best_t = np.full(n, np.inf)
    best_i = np.full(n, -1, dtype=np.int64)
    best_u = np.zeros(n)
    best_v = np.zeros(n)
    stack = np.empty(128, dtype=np.int64)
    for r in range(n):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        bt = t_max[r]
        bi = -1
        bu = 0.0
        bv = 0.0
        sp = 0
        tn, tf = _slab(ox, oy, oz, dx, dy, dz, node_lo[0], node_hi[0], bt)
        if tn <= tf * (1.0 + 1e-12) + 1e-12:
            stack[0] = 0
            sp = 1
        while sp > 0:
            sp -= 1
            nd = stack[sp]
            if node_count[nd] > 0:
                for j in range(node_start[nd], node_start[nd] + node_count[nd]):
                    k = order[j]
                    t, u, v = _mt_intersect(ox, oy, oz, dx, dy, dz, v0[k], e1[k], e2[k], t_min)
                    if t < bt or (t == bt and bi >= 0 and k < bi):
                        bt = t
                        bi = k
                        bu = u
                        bv = v
                continue
            a = node_left[nd]
            b = node_right[nd]
            ta0, ta1 = _slab(ox, oy, oz, dx, dy, dz, node_lo[a], node_hi[a], bt)
            tb0, tb1 = _slab(ox, oy, oz, dx, dy, dz, node_lo[b], node_hi[b], bt)
            hit_a = ta0 <= ta1 * (1.0 + 1e-12) + 1e-12
            hit_b = tb0 <= tb1 * (1.0 + 1e-12) + 1e-12
            # push the farther child first so the nearer one is popped first
            if hit_a and hit_b:
                if ta0 <= tb0:
                    stack[sp] = b
                    stack[sp + 1] = a
                else:
                    stack[sp] = a
                    stack[sp + 1] = b
                sp += 2
            elif hit_a:
                stack[sp] = a
                sp += 1
            elif hit_b:
                stack[sp] = b
                sp += 1
        if bi >= 0:
            best_t[r] = bt
            best_i[r] = bi
            best_u[r] = bu
            best_v[r] = bv
    return best_t, best_i, best_u, best_v


# --------------------------------------------------------------------------
# single-primitive API


def ray_triangle_intersect(ray: Ray, tri: Triangle, t_min: float = T_EPSILON) -> Hit | None:
    """Moller-Trumbore test of one ray against one triangle.

    Hits with ``t <= t_min`` are rejected. Boundary hits count.
    """
    o, d = ray.origin, ray.direction
    e1 = tri.v1 - tri.v0
    e2 = tri.v2 - tri.v0
    t, u, v = _mt_intersect(o[0], o[1], o[2], d[0], d[1], d[2], tri.v0, e1, e2, t_min)
    if not np.isfinite(t):
        return None
    return Hit(float(t), ray.at(t), (float(u), float(v)), material_id=tri.material_id)


def ray_aabb_intersect(ray: Ray, box: Aabb) -> tuple[float, float] | None:
    """Slab test. ``t_near`` is clamped to 0 for rays starting inside the box."""
    o, d = ray.origin, ray.direction
    tn, tf = _slab(o[0], o[1], o[2], d[0], d[1], d[2], box.min_corner, box.max_corner, np.inf)
    if tn > tf:
        return None
    return float(tn), float(tf)


# --------------------------------------------------------------------------
# triangle soup + BVH


@dataclass(frozen=True)
class BvhTree:
    """Flat BVH over a triangle soup.

    ``node_count[i] > 0`` marks a leaf holding ``order[node_start[i]:node_start[i] + node_count[i]]``.
    Internal nodes reference children through ``node_left``/``node_right``.
    """

    node_lo: np.ndarray
    node_hi: np.ndarray
    node_left: np.ndarray
    node_right: np.ndarray
    node_start: np.ndarray
    node_count: np.ndarray
    order: np.ndarray
    v0: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    material_ids: np.ndarray
    leaf_size: int = 4

    @property
    def n_nodes(self) -> int:
        return len(self.node_count)

    @property
    def n_triangles(self) -> int:
        return len(self.v0)

    def node_aabb(self, i: int) -> Aabb:
        return Aabb(self.node_lo[i], self.node_hi[i])

    def is_leaf(self, i: int) -> bool:
        return bool(self.node_count[i] > 0)

    def leaf_triangles(self, i: int) -> np.ndarray:
        s = self.node_start[i]
        return self.order[s:s + self.node_count[i]]

    def vertices(self) -> np.ndarray:
        """``(n, 3, 3)`` triangle vertices in original order."""
        return np.stack([self.v0, self.v0 + self.e1, self.v0 + self.e2], axis=1)


def triangle_arrays(triangles: Sequence[Triangle] | np.ndarray) -> np.ndarray:
    if isinstance(triangles, np.ndarray):
        return np.asarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
    return np.array([[t.v0, t.v1, t.v2] for t in triangles], dtype=np.float64).reshape(-1, 3, 3)


def build_bvh(triangles: Sequence[Triangle] | np.ndarray, material_ids=None, leaf_size: int = 4) -> BvhTree:
    """Median-split BVH on the longest centroid axis.

    ``triangles`` is a list of :class:`Triangle` or an ``(n, 3, 3)`` vertex array.
    Construction is deterministic for a fixed input order.
    """
    verts = triangle_arrays(triangles)
    n = len(verts)
    if n == 0:
        raise ValueError("empty scene")
    if leaf_size < 1:
        raise ValueError("leaf_size must be >= 1")
    if material_ids is None:
        if isinstance(triangles, np.ndarray):
            material_ids = np.zeros(n, dtype=np.int64)
        else:
            material_ids = np.array([t.material_id for t in triangles], dtype=np.int64)
    tri_lo = verts.min(axis=1)
    tri_hi = verts.max(axis=1)
    centroids = verts.mean(axis=1)

    lo, hi, left, right, start, count = [], [], [], [], [], []
    order = np.arange(n)

    def new_node() -> int:
        lo.append(None), hi.append(None), left.append(-1), right.append(-1), start.append(0), count.append(0)
        return len(lo) - 1

    # explicit stack: (node, begin, end) over `order`
    root = new_node()
    work = [(root, 0, n)]
    while work:
        node, b, e = work.pop()
        idx = order[b:e]
        lo[node] = tri_lo[idx].min(axis=0)
        hi[node] = tri_hi[idx].max(axis=0)
        if e - b <= leaf_size:
            start[node], count[node] = b, e - b
            continue
        c = centroids[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        order[b:e] = idx[np.argsort(c[:, axis], kind="stable")]
        mid = b + (e - b) // 2
        a_node, b_node = new_node(), new_node()
        left[node], right[node] = a_node, b_node
        work.append((b_node, mid, e))
        work.append((a_node, b, mid))

    return BvhTree(
        node_lo=np.array(lo), node_hi=np.array(hi),
        node_left=np.array(left, dtype=np.int64), node_right=np.array(right, dtype=np.int64),
        node_start=np.array(start, dtype=np.int64), node_count=np.array(count, dtype=np.int64),
        order=order.astype(np.int64),
        v0=np.ascontiguousarray(verts[:, 0]),
        e1=np.ascontiguousarray(verts[:, 1] - verts[:, 0]),
        e2=np.ascontiguousarray(verts[:, 2] - verts[:, 0]),
        material_ids=np.asarray(material_ids, dtype=np.int64),
        leaf_size=leaf_size,
    )


class BatchHits(NamedTuple):
    t: np.ndarray
    triangle_index: np.ndarray
    u: np.ndarray
    v: np.ndarray

    @property
    def hit(self) -> np.ndarray:
        return self.triangle_index >= 0


def _prep(origins, directions, t_max):
    o = np.ascontiguousarray(np.asarray(origins, dtype=np.float64).reshape(-1, 3))
    d = np.ascontiguousarray(np.asarray(directions, dtype=np.float64).reshape(-1, 3))
    tm = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (len(o),)).copy()
    return o, d, tm


def nearest_hits(bvh: BvhTree, origins, directions, t_max=np.inf, t_min: float = T_EPSILON) -> BatchHits:
    """Batched nearest-hit query; misses carry ``triangle_index == -1``."""
    o, d, tm = _prep(origins, directions, t_max)
    return BatchHits(*_bvh_batch(o, d, t_min, tm, bvh.node_lo, bvh.node_hi, bvh.node_left,
                                 bvh.node_right, bvh.node_start, bvh.node_count, bvh.order,
                                 bvh.v0, bvh.e1, bvh.e2))


def brute_force_hits(bvh: BvhTree, origins, directions, t_max=np.inf, t_min: float = T_EPSILON) -> BatchHits:
    """Reference query testing every triangle; same tie-break as :func:`nearest_hits`."""
    o, d, tm = _prep(origins, directions, t_max)
    return BatchHits(*_brute_force_batch(o, d, t_min, tm, bvh.v0, bvh.e1, bvh.e2))


def nearest_hit(ray: Ray, bvh: BvhTree, t_max: float = np.inf) -> Hit | None:
    res = nearest_hits(bvh, ray.origin[None], ray.direction[None], t_max)
    k = int(res.triangle_index[0])
    if k < 0:
        return None
    t = float(res.t[0])
    return Hit(t, ray.at(t), (float(res.u[0]), float(res.v[0])), k, int(bvh.material_ids[k]))


def segments_blocked(bvh: BvhTree, starts, ends, margin: float = 1e-3) -> np.ndarray:
    """True where the open segment start->end hits any triangle.

    Hits within ``margin`` of either endpoint are ignored, so segments that
    start or end on a surface do not count as blocked by it.
    """
    starts = np.asarray(starts, dtype=np.float64).reshape(-1, 3)
    ends = np.asarray(ends, dtype=np.float64).reshape(-1, 3)
    delta = ends - starts
    length = np.linalg.norm(delta, axis=1)
    ok = length > 2 * margin
    out = np.zeros(len(starts), dtype=bool)
    if not np.any(ok):
        return out
    d = delta[ok] / length[ok, None]
    o = starts[ok] + margin * d
    res = nearest_hits(bvh, o, d, t_max=length[ok] - 2 * margin, t_min=0.0)
    out[ok] = res.hit
    return out


# --------------------------------------------------------------------------
# spatial grid


@dataclass
class SpatialGrid:
    """Uniform grid mapping integer cells to the objects whose box overlaps them."""

    cell_size: float = 25.0
    cells: dict[tuple[int, int, int], list[int]] = field(default_factory=dict)
    boxes: list[Aabb] = field(default_factory=list)

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")

    @classmethod
    def from_boxes(cls, boxes: Sequence[Aabb], cell_size: float = 25.0) -> "SpatialGrid":
        grid = cls(cell_size)
        for box in boxes:
            grid.insert(box)
        return grid

    def cell_of(self, p) -> tuple[int, int, int]:
        c = np.floor(np.asarray(p, dtype=np.float64) / self.cell_size).astype(int)
        return int(c[0]), int(c[1]), int(c[2])

    def insert(self, box: Aabb) -> int:
        idx = len(self.boxes)
        self.boxes.append(box)
        lo, hi = self.cell_of(box.min_corner), self.cell_of(box.max_corner)
        for i in range(lo[0], hi[0] + 1):
            for j in range(lo[1], hi[1] + 1):
                for k in range(lo[2], hi[2] + 1):
                    self.cells.setdefault((i, j, k), []).append(idx)
        return idx

    def objects_in_cell(self, cell) -> list[int]:
        return list(self.cells.get(tuple(cell), ()))

    def objects_along_segment(self, p0, p1) -> list[int]:
        """Objects registered in any cell the segment passes through (3D DDA), sorted."""
        p0 = np.asarray(p0, dtype=np.float64)
        p1 = np.asarray(p1, dtype=np.float64)
        d = p1 - p0
        cell = np.array(self.cell_of(p0))
        last = np.array(self.cell_of(p1))
        step = np.sign(d).astype(int)
        with np.errstate(divide="ignore", invalid="ignore"):
            next_edge = (cell + (step > 0)) * self.cell_size
            t_next = np.where(step != 0, (next_edge - p0) / d, np.inf)
            t_delta = np.where(step != 0, self.cell_size / np.abs(d), np.inf)
        found: set[int] = set()
        max_steps = int(np.abs(last - cell).sum()) + 1
        for _ in range(max_steps + 1):
            found.update(self.cells.get((int(cell[0]), int(cell[1]), int(cell[2])), ()))
            if np.array_equal(cell, last):
                break
            a = int(np.argmin(t_next))
            if t_next[a] > 1.0:
                break
            cell[a] += step[a]
            t_next[a] += t_delta[a]
        return sorted(found)
