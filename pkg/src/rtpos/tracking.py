"""Robust Lp trend tracking of angle streams and cluster centres.

Each trend is a straight line ``omega = a * tti + b`` fitted to a bounded
buffer of recent estimates by minimising the sum of ``|residual|**p``.
With ``p = 1`` an isolated false detection barely moves the line.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .geometry import wrap_angle

RESIDUAL_FLOOR = 1e-6
_TIE = 1e-12
WEIGHT_FLOOR = 1e-6


class PredictionUnavailable(ValueError):
    pass


def _objective(t, y, a, b, p) -> float:
    return float(np.sum(np.abs(y - a * t - b) ** p))


def _wls(t, y, w) -> tuple[float, float]:
    sw, st, sy = w.sum(), w @ t, w @ y
    tm, ym = st / sw, sy / sw
    dt = t - tm
    a = float((w * dt) @ (y - ym) / ((w * dt) @ dt))
    return a, float(ym - a * tm)


def lp_fit(points, p: float = 1.0, max_iter: int = 100, tol: float = 1e-12,
           history: list | None = None) -> tuple[float, float]:
    """Line minimising ``sum |y - a t - b|^p`` by iteratively reweighted least squares.

    ``history`` (if given) receives the objective after every accepted
    iteration; the sequence is non-increasing because a step that would raise
    the objective ends the iteration instead.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if not (1.0 <= p <= 2.0):
        raise ValueError("p must be in [1, 2]")
    if len(pts) < 2 or np.ptp(pts[:, 0]) == 0:
        raise ValueError("degenerate abscissae")
    t0 = pts[:, 0].mean()
    t, y = pts[:, 0] - t0, pts[:, 1]

    a, b = _wls(t, y, np.ones_like(t))
    obj = _objective(t, y, a, b, p)
    if history is not None:
        history.append(obj)
    if p != 2.0:
        for _ in range(max_iter):
            r = np.maximum(np.abs(y - a * t - b), RESIDUAL_FLOOR)
            a2, b2 = _wls(t, y, r ** (p - 2.0))
            obj2 = _objective(t, y, a2, b2, p)
            if obj2 > obj:
                break
            converged = obj - obj2 <= tol * max(obj, 1.0)
            a, b, obj = a2, b2, obj2
            if history is not None:
                history.append(obj)
            if converged:
                break
        if p == 1.0:
            a, b, obj = _l1_polish(t, y, a, b, obj, history)
    return float(a), float(b - a * t0)


def _line(t, y, i, j) -> tuple[float, float]:
    a = (y[j] - y[i]) / (t[j] - t[i])
    return a, y[i] - a * t[i]


def _l1_polish(t, y, a, b, obj, history):
    """Exact L1 optimum by a vertex walk started near the IRLS solution.

    Every vertex of the L1 objective is a line through two points and the
    objective is convex and piecewise linear, so a vertex none of whose
    neighbours (one point swapped) is better is the global optimum.
    """
    r = np.abs(y - a * t - b)
    near = np.argsort(r, kind="stable")[: min(len(t), 6)]
    start = None
    for i_, i in enumerate(near):
        for j in near[i_ + 1:]:
            if t[i] != t[j]:
                a2, b2 = _line(t, y, i, j)
                obj2 = _objective(t, y, a2, b2, 1.0)
                if start is None or obj2 < start[2]:
                    start = (a2, b2, obj2, (int(i), int(j)))
    if start is None:
        return a, b, obj
    irls = (a, b, obj)
    a, b, obj, vertex = start
    for _ in range(len(t) ** 2):
        best = None
        for keep in vertex:
            for k in range(len(t)):
                if k in vertex or t[k] == t[keep]:
                    continue
                a2, b2 = _line(t, y, keep, k)
                obj2 = _objective(t, y, a2, b2, 1.0)
                if obj2 < obj * (1.0 - _TIE) and (best is None or obj2 < best[2]):
                    best = (a2, b2, obj2, (keep, k))
        if best is None:
            break
        a, b, obj, vertex = best
    # L1 optima can form a flat set; on a tie prefer the interpolating vertex
    if irls[2] < obj * (1.0 - _TIE):
        a, b, obj = irls
    if history is not None and history[-1] != obj:
        history.append(obj)
    return a, b, obj


# --------------------------------------------------------------------------
# multi-trend angle tracker


@dataclass(frozen=True)
class TrackerConfig:
    p: float = 1.0
    gate_factor: float = 3.0
    gate_min: float = np.deg2rad(1.0)
    gate_max: float = np.deg2rad(10.0)
    n_buffer_max: int = 32
    max_idle_ttis: int = 20
    merge_threshold: float = np.deg2rad(0.5)
    deviation_ceiling: float = np.deg2rad(5.0)
    min_points_for_purge: int = 4
    wrap: bool = True  # azimuth streams live on a circle

    def __post_init__(self):
        for name in ("gate_factor", "gate_min", "gate_max", "n_buffer_max", "max_idle_ttis",
                     "merge_threshold", "deviation_ceiling"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.n_buffer_max < 2:
            raise ValueError("n_buffer_max must be >= 2")


@dataclass(frozen=True)
class TrendState:
    id: int
    ttis: tuple[int, ...]
    values: tuple[float, ...]  # unwrapped onto one continuous branch
    p: float = 1.0
    a: float = 0.0
    b: float = 0.0
    deviation: float = float("inf")
    created: int = 0
    last_update: int = 0
    hits: int = 0

    @property
    def fitted(self) -> bool:
        return len(self.ttis) >= 2

    @property
    def n_buffer(self) -> int:
        return len(self.ttis)

    def residuals(self) -> np.ndarray:
        t = np.asarray(self.ttis, dtype=np.float64)
        return np.asarray(self.values) - self.a * t - self.b

    def raw_prediction(self, tti: int) -> float:
        """Unwrapped prediction; the last value for a trend that cannot be fitted yet."""
        return self.a * tti + self.b if self.fitted else self.values[-1]

    def gate(self, cfg: TrackerConfig) -> float:
        if not self.fitted or not np.isfinite(self.deviation):
            return cfg.gate_max
        return float(np.clip(cfg.gate_factor * self.deviation, cfg.gate_min, cfg.gate_max))


def fit_trend(trend: TrendState, n_buffer_max: int) -> TrendState:
    ttis, values = trend.ttis[-n_buffer_max:], trend.values[-n_buffer_max:]
    trend = replace(trend, ttis=ttis, values=values)
    if len(ttis) < 2:
        return replace(trend, a=0.0, b=float(values[-1]), deviation=float("inf"))
    a, b = lp_fit(np.column_stack([ttis, values]), trend.p)
    trend = replace(trend, a=a, b=b)
    dev = float(np.mean(np.abs(trend.residuals()) ** trend.p) ** (1.0 / trend.p))
    return replace(trend, deviation=dev)


def predict_angle(trend: TrendState, tti: int, wrap: bool = True) -> tuple[float, float]:
    """Extrapolated angle and its reliability weight ``N / sum |r|^p``."""
    if not trend.fitted:
        raise PredictionUnavailable(f"trend {trend.id} has fewer than 2 points")
    pred = trend.a * tti + trend.b
    s = float(np.sum(np.abs(trend.residuals()) ** trend.p))
    weight = trend.n_buffer / max(s, WEIGHT_FLOOR)
    return (wrap_angle(pred) if wrap else float(pred)), weight


def _branch(value: float, reference: float, wrap: bool) -> float:
    if not wrap:
        return value
    return reference + wrap_angle(value - reference)


def _redundant(x: TrendState, y: TrendState, tti: int, cfg: TrackerConfig) -> bool:
    """Lines agree now and on average over the younger buffer, so a mere crossing does not merge them."""
    young = x if x.ttis[0] >= y.ttis[0] else y
    gaps = []
    for t in (tti, *young.ttis):
        ref = y.raw_prediction(t)
        gaps.append(abs(_branch(x.raw_prediction(t), ref, cfg.wrap) - ref))
    return gaps[0] < cfg.merge_threshold and float(np.mean(gaps[1:])) < cfg.merge_threshold


@dataclass
class AngleTracker:
    """Multi-trend tracker for one (RRU, angle axis) stream."""

    cfg: TrackerConfig = field(default_factory=TrackerConfig)
    trends: list[TrendState] = field(default_factory=list)
    next_id: int = 0
    last_tti: int | None = None

    def _distance(self, trend: TrendState, value: float, tti: int) -> float:
        ref = trend.raw_prediction(tti)
        return abs(_branch(value, ref, self.cfg.wrap) - ref)

    def update(self, tti: int, estimates: Iterable[float]) -> list[int]:
        """Assign this TTI's estimates; returns the trend id per estimate (input order)."""
        tti = int(tti)
        if self.last_tti is not None and tti < self.last_tti:
            raise ValueError(f"non-monotonic tti {tti} after {self.last_tti}")
        self.last_tti = tti
        est = [float(e) for e in estimates]
        order = sorted(range(len(est)), key=lambda i: est[i])
        free_trends = {tr.id for tr in self.trends if not tr.ttis or tr.ttis[-1] < tti}
        by_id = {tr.id: tr for tr in self.trends}

        # nearest pairs first; sorting on values keeps the outcome order-independent
        pairs = []
        for i in order:
            for tr in self.trends:
                if tr.id in free_trends:
                    d = self._distance(tr, est[i], tti)
                    if d <= tr.gate(self.cfg):
                        pairs.append((d, tr.id, est[i], i))
        pairs.sort(key=lambda x: x[:3])
        assigned: dict[int, int] = {}
        for d, tid, _, i in pairs:
            if i in assigned or tid not in free_trends:
                continue
            assigned[i] = tid
            free_trends.discard(tid)
            tr = by_id[tid]
            v = _branch(est[i], tr.raw_prediction(tti), self.cfg.wrap)
            by_id[tid] = fit_trend(replace(tr, ttis=tr.ttis + (tti,), values=tr.values + (v,),
                                           last_update=tti, hits=tr.hits + 1), self.cfg.n_buffer_max)
        for i in order:
            if i not in assigned:
                tr = TrendState(self.next_id, (tti,), (est[i],), self.cfg.p, 0.0, est[i],
                                created=tti, last_update=tti, hits=1)
                by_id[tr.id] = fit_trend(tr, self.cfg.n_buffer_max)
                assigned[i] = tr.id
                self.next_id += 1
        self.trends = self._prune(sorted(by_id.values(), key=lambda tr: tr.id), tti)
        return [assigned[i] for i in range(len(est))]

    def _prune(self, trends: list[TrendState], tti: int) -> list[TrendState]:
        cfg = self.cfg
        keep = [tr for tr in trends
                if tti - tr.last_update <= cfg.max_idle_ttis
                and not (tr.n_buffer >= cfg.min_points_for_purge and tr.deviation > cfg.deviation_ceiling)]
        # redundant trends: predictions converged, keep the steadier (then older) one; a trend with
        # fewer points than the purge minimum fits them exactly, so its deviation does not count yet
        keep.sort(key=lambda tr: (tr.n_buffer < cfg.min_points_for_purge, tr.deviation, -tr.hits, tr.id))
        out: list[TrendState] = []
        for tr in keep:
            if not tr.fitted:
                out.append(tr)
                continue
            dup = any(o.fitted and _redundant(tr, o, tti, cfg) for o in out)
            if not dup:
                out.append(tr)
        return sorted(out, key=lambda tr: tr.id)

    def dominant(self) -> TrendState | None:
        """Trend with the most estimates inside the last buffer-length window (ties: more hits, then older)."""
        if not self.trends:
            return None
        since = self.last_tti - self.cfg.n_buffer_max

        def recent(tr: TrendState) -> int:
            return sum(1 for t in tr.ttis if t > since)

        return min(self.trends, key=lambda tr: (-recent(tr), -tr.hits, tr.id))

    def predict(self, tti: int) -> list[tuple[int, float, float]]:
        out = []
        for tr in self.trends:
            if tr.fitted:
                pred, w = predict_angle(tr, tti, self.cfg.wrap)
                out.append((tr.id, pred, w))
        return out


def update_tracker(tracker: AngleTracker, tti: int, estimates: Sequence[float]) -> tuple[AngleTracker, list[int]]:
    ids = tracker.update(tti, estimates)
    return tracker, ids


# --------------------------------------------------------------------------
# cluster-centre tracking


@dataclass
class CenterTracker:
    """Single-trend Lp tracker applied to x, y and z independently."""

    cfg: TrackerConfig = field(default_factory=lambda: TrackerConfig(wrap=False))
    axes: list[TrendState] | None = None
    last_tti: int | None = None

    def update(self, tti: int, center) -> np.ndarray:
        """Add one centre and return the fitted position at ``tti``."""
        tti = int(tti)
        if self.last_tti is not None and tti <= self.last_tti:
            raise ValueError(f"non-monotonic tti {tti} after {self.last_tti}")
        self.last_tti = tti
        c = np.asarray(center, dtype=np.float64).reshape(3)
        if self.axes is None:
            self.axes = [TrendState(k, (), (), self.cfg.p) for k in range(3)]
        self.axes = [fit_trend(replace(tr, ttis=tr.ttis + (tti,), values=tr.values + (float(c[k]),),
                                       last_update=tti, hits=tr.hits + 1), self.cfg.n_buffer_max)
                     for k, tr in enumerate(self.axes)]
        return self.position(tti)

    def position(self, tti: int) -> np.ndarray:
        if self.axes is None:
            raise PredictionUnavailable("no centres tracked yet")
        return np.array([tr.raw_prediction(tti) for tr in self.axes])

    def weight(self, tti: int) -> float:
        if self.axes is None or not self.axes[0].fitted:
            return 0.0
        return float(min(predict_angle(tr, tti, wrap=False)[1] for tr in self.axes))


def track_cluster_centers(stream: Iterable[tuple[int, Sequence[float]]],
                          cfg: TrackerConfig | None = None) -> tuple[CenterTracker, np.ndarray]:
    """Run the centre tracker over ``(tti, xyz)`` pairs; returns the tracker and fitted positions."""
    tr = CenterTracker(cfg or TrackerConfig(wrap=False))
    out = [tr.update(t, c) for t, c in stream]
    return tr, np.array(out).reshape(-1, 3)


def unwrap_azimuths(values: Sequence[float]) -> np.ndarray:
    return np.unwrap(np.asarray(values, dtype=np.float64))
