"""End-to-end experiment driver: trace, estimate angles, localize, cluster, track, summarize.

Randomness is keyed by ``(seed, tti, rru_id)`` tuples through
:class:`numpy.random.SeedSequence`, so a record never depends on execution
order or on the number of worker threads.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import types
import typing
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import yaml

import numpy as np

from . import io
from .array_signal import AngleReport, AoaConfig, Impairments, Interferer, Peak, estimate_aoa
from .clustering import ClusterConfig, Strategy, cluster_candidates, pick_position, select_cluster
from .positioning import (BiasSearchConfig, FilterPolicy, MissConfig, NoPositionError, candidate_variance,
                          detect_miss, expected_position, filter_candidates, intersect_rays, ray_search)
from .propagation import PathComponent, TraceConfig, received_power, trace_to_receivers
from .scene import PerturbationSpec, Scenario, SceneError, fixture_path, load_fixture, load_scene, perturb_scene
from .tracking import CenterTracker, TrackerConfig

log = logging.getLogger(__name__)

# stream tags keep the noise, calibration, interference and map draws independent
_NOISE, _CALIBRATION, _INTERFERENCE, _MAP = 1, 2, 3, 4


def rng_for(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def seed_for(*key: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])


@dataclass(frozen=True)
class ExperimentConfig:
    scene: str = "canyon"  # bundled fixture name or path to a scene file
    seeds: tuple[int, ...] = (0,)
    snr_db: float | None = 20.0
    calibration_sigma_deg: float = 1.0  # 3-sigma per-element phase error
    n_bs: int = 5
    rru_ids: tuple[int, ...] | None = None
    track_id: int | None = None
    tti_step: int = 1
    max_ttis: int | None = None
    aoa_mode: str = "music"  # "music" or "oracle" (exact path angles)
    oracle_paths: int = 3
    interference_rate: float = 0.0  # probability per (tti, rru) of a spurious source
    interference_power_db: float = 0.0
    perturbation: PerturbationSpec | None = None
    clustering: bool = True
    tracking: bool = False
    strategy: Strategy = Strategy.WEIGHTED_MEAN
    d_intersect: float = 2.0
    plane_candidates: str = "auto"
    all_crossings: bool = False
    min_ray_count: int = 1
    trace: TraceConfig = field(default_factory=TraceConfig)
    aoa: AoaConfig = field(default_factory=AoaConfig)
    bias: BiasSearchConfig = field(default_factory=BiasSearchConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    miss: MissConfig = field(default_factory=MissConfig)
    tracker: TrackerConfig = field(default_factory=lambda: TrackerConfig(wrap=False))
    out_dir: str | None = None

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.n_bs < 1:
            raise ValueError("n_bs must be >= 1")
        if self.aoa_mode not in ("music", "oracle"):
            raise ValueError(f"unknown aoa_mode {self.aoa_mode!r}")
        if not 0.0 <= self.interference_rate <= 1.0:
            raise ValueError("interference_rate must be in [0, 1]")
        if self.tti_step < 1:
            raise ValueError("tti_step must be >= 1")
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))


def _dataclass_in(hint):
    if dataclasses.is_dataclass(hint):
        return hint
    if typing.get_origin(hint) in (typing.Union, types.UnionType):
        for a in typing.get_args(hint):
            if dataclasses.is_dataclass(a):
                return a
    return None


def _build(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise ValueError(f"{where}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ValueError(f"{where}: unknown key(s) {unknown}")
    kw = {}
    for k, v in doc.items():
        sub = _dataclass_in(hints[k])
        if sub is not None and isinstance(v, dict):
            kw[k] = _build(sub, v, f"{where}.{k}")
        elif isinstance(v, list):
            kw[k] = tuple(v)
        else:
            kw[k] = v
    return cls(**kw)


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Experiment config from a nested mapping; keys mirror the dataclass fields."""
    return _build(ExperimentConfig, doc or {}, "config")


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    text = p.read_text()
    doc = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    return config_from_dict(doc)


def load_scenario(ref: str | Path) -> Scenario:
    p = Path(ref)
    if p.suffix in (".yaml", ".yml", ".json") or p.exists():
        return load_scene(p)
    if not fixture_path(str(ref)).exists():
        raise SceneError(f"no scene file or bundled fixture named {ref!r}")
    return load_fixture(str(ref))


@dataclass
class PreparedRun:
    """Scenario plus memoized forward traces, shared across seeds and sweep points."""

    scenario: Scenario
    trace_cfg: TraceConfig
    track_id: int | None = None
    tti_step: int = 1
    max_ttis: int | None = None
    _traces: dict = field(default_factory=dict)

    @property
    def track(self):
        tracks = self.scenario.tracks
        if not tracks:
            raise SceneError("scene has no ue track")
        if self.track_id is None:
            return tracks[0]
        for t in tracks:
            if t.id == self.track_id:
                return t
        raise SceneError(f"unknown ue track {self.track_id}")

    def epochs(self) -> list[tuple[int, np.ndarray]]:
        tr = self.track
        idx = list(range(0, len(tr.ttis), self.tti_step))
        if self.max_ttis is not None:
            idx = idx[: self.max_ttis]
        return [(int(tr.ttis[i]), tr.positions[i]) for i in idx]

    def paths(self, tti: int, ue: np.ndarray) -> dict[int, list[PathComponent]]:
        if tti not in self._traces:
            sc = self.scenario
            res = trace_to_receivers(sc.scene, ue, sc.rrus, self.trace_cfg)
            self._traces[tti] = {r.id: p for r, p in zip(sc.rrus, res)}
        return self._traces[tti]


def prepare(cfg: ExperimentConfig, scenario: Scenario | None = None) -> PreparedRun:
    sc = scenario if scenario is not None else load_scenario(cfg.scene)
    if cfg.rru_ids is not None:
        known = {r.id for r in sc.rrus}
        missing = [i for i in cfg.rru_ids if i not in known]
        if missing:
            raise SceneError(f"unknown rru id(s) {missing}")
    trace = replace(cfg.trace, carrier_frequency=sc.carrier_frequency)
    run = PreparedRun(sc, trace, cfg.track_id, cfg.tti_step, cfg.max_ttis)
    run.epochs()  # surfaces a missing track before any computation
    return run


@dataclass(frozen=True)
class TtiRecord:
    seed: int
    tti: int
    truth: np.ndarray
    estimate: np.ndarray  # NaN when no position could be formed
    error: float  # inf when no position
    miss: bool
    variance: float  # weighted variance over all filtered candidates
    cluster_variance: float  # variance inside the selected cluster
    n_candidates: int
    n_clusters: int
    n_rrus: int
    n_peaks: int

    @property
    def has_position(self) -> bool:
        return bool(np.all(np.isfinite(self.estimate)))


def select_rrus(paths: dict[int, list[PathComponent]], n_bs: int, allowed: Sequence[int] | None) -> list[int]:
    """The ``n_bs`` RRUs with the highest received path power (ties: lower id)."""
    ids = [i for i in sorted(paths) if (allowed is None or i in allowed) and paths[i]]
    ids.sort(key=lambda i: -received_power(paths[i]))
    return ids[:n_bs]


def oracle_report(rru_id: int, tti: int, paths: Sequence[PathComponent], n: int,
                  width: float = np.deg2rad(5.0)) -> AngleReport:
    strongest = sorted(paths, key=lambda p: -abs(p.complex_gain))[:n]
    peaks = tuple(Peak(p.aoa_azimuth, p.aoa_elevation, abs(p.complex_gain) ** 2, width, width) for p in strongest)
    return AngleReport(rru_id, tti, peaks)


def _impairments(cfg: ExperimentConfig, rru, seed: int, tti: int) -> Impairments:
    itf = ()
    if cfg.interference_rate > 0:
        rng = rng_for(seed, tti, rru.id, _INTERFERENCE)
        if rng.uniform() < cfg.interference_rate:
            half = np.deg2rad(cfg.aoa.grid.az_half_width_deg)
            az = rru.boresight_azimuth + rng.uniform(-half, half)
            el = np.deg2rad(rng.uniform(cfg.aoa.grid.el_min_deg, cfg.aoa.grid.el_max_deg))
            itf = (Interferer(float(az), float(el), cfg.interference_power_db),)
    return Impairments(cfg.snr_db, cfg.calibration_sigma_deg, None, itf)


def angle_reports(cfg: ExperimentConfig, run: PreparedRun, seed: int, tti: int,
                  paths: dict[int, list[PathComponent]]) -> list[AngleReport]:
    sc = run.scenario
    aoa = replace(cfg.aoa, carrier_frequency=sc.carrier_frequency)
    out = []
    for rid in select_rrus(paths, cfg.n_bs, cfg.rru_ids):
        rru = sc.rru(rid)
        if cfg.aoa_mode == "oracle":
            out.append(oracle_report(rid, tti, paths[rid], cfg.oracle_paths))
        else:
            out.append(estimate_aoa(rru, paths[rid], _impairments(cfg, rru, seed, tti), aoa,
                                    rng_seed=seed_for(seed, tti, rid, _NOISE), tti=tti,
                                    calibration_seed=seed_for(seed, rid, _CALIBRATION)))
    return out


def cu_scene(cfg: ExperimentConfig, run: PreparedRun, seed: int):
    """The map the central unit believes in: the true scene or a perturbed copy."""
    if cfg.perturbation is None:
        return run.scenario.scene
    spec = replace(cfg.perturbation, rng_seed=seed_for(seed, cfg.perturbation.rng_seed, _MAP))
    return perturb_scene(run.scenario.scene, spec)


@dataclass
class LocalizeResult:
    candidates: list
    clusters: list
    estimate: np.ndarray | None


def localize(cfg: ExperimentConfig, reports: Sequence[AngleReport], scene, rrus, ue_height: float
             ) -> LocalizeResult:
    rays = ray_search(reports, scene, rrus, cfg.bias)
    cands = intersect_rays(rays, ue_height, cfg.d_intersect, scene, cfg.plane_candidates, cfg.all_crossings)
    cands = filter_candidates(cands, FilterPolicy(cfg.min_ray_count))
    clusters = cluster_candidates(cands, cfg.cluster) if cands else []
    try:
        if cfg.clustering:
            est = pick_position(select_cluster(clusters), cfg.strategy)
        else:
            est = expected_position(cands)
    except NoPositionError:
        est = None
    return LocalizeResult(cands, clusters, est)


def run_seed(cfg: ExperimentConfig, run: PreparedRun, seed: int, sink: dict | None = None) -> list[TtiRecord]:
    sc = run.scenario
    scene = cu_scene(cfg, run, seed)
    tracker = CenterTracker(cfg.tracker) if cfg.tracking else None
    records = []
    for tti, ue in run.epochs():
        paths = run.paths(tti, ue)
        reports = angle_reports(cfg, run, seed, tti, paths)
        res = localize(cfg, reports, scene, sc.rrus, sc.ue_height)
        est = res.estimate
        if tracker is not None and est is not None:
            est = tracker.update(tti, est)
        elif tracker is not None and tracker.axes is not None:
            est = tracker.position(tti)
        if est is None:
            est = np.full(3, np.nan)
        err = float(np.linalg.norm(est - ue)) if np.all(np.isfinite(est)) else float("inf")
        main = select_cluster(res.clusters) if res.clusters else None
        records.append(TtiRecord(
            seed, tti, np.array(ue), np.asarray(est, dtype=np.float64), err,
            detect_miss(res.candidates, cfg.miss), candidate_variance(res.candidates),
            main.variance if main is not None else float("inf"),
            len(res.candidates), len(res.clusters), len(reports), sum(len(r.peaks) for r in reports)))
        if sink is not None:
            sink.setdefault("reports", []).extend(reports)
            sink.setdefault("candidates", []).extend(io.candidate_rows(tti, res.candidates))
            sink.setdefault("clusters", []).extend(io.cluster_rows(tti, res.clusters))
    return records


def run_pipeline(cfg: ExperimentConfig, run: PreparedRun | None = None, threads: int = 1,
                 sink: dict | None = None) -> list[TtiRecord]:
    """All seeds of one configuration; records ordered by (seed, tti) whatever ``threads`` is."""
    run = run if run is not None else prepare(cfg)
    # forward traces are shared, fill the cache before fanning out
    for tti, ue in run.epochs():
        run.paths(tti, ue)
    if threads > 1 and len(cfg.seeds) > 1 and sink is None:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(lambda s: run_seed(cfg, run, s), cfg.seeds))
    else:
        parts = [run_seed(cfg, run, s, sink) for s in cfg.seeds]
    return [r for part in parts for r in part]


# --------------------------------------------------------------------------
# statistics


def order_statistic(values, q: float) -> float:
    """Smallest sample with at least a fraction ``q`` of samples at or below it."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if len(v) == 0:
        raise ValueError("no samples")
    k = int(np.ceil(q * len(v) - 1e-12))
    return float(v[max(k, 1) - 1])


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y):
        raise ValueError("length mismatch")
    xc, yc = x - x.mean(), y - y.mean()
    den = np.sqrt((xc @ xc) * (yc @ yc))
    return float(xc @ yc / den) if den > 0 else float("nan")


@dataclass(frozen=True)
class ErrorSummary:
    errors: np.ndarray
    median: float
    p90: float
    mean: float
    pearson_r: float
    n_no_position: int = 0
    label: str = ""

    def cdf(self) -> tuple[np.ndarray, np.ndarray]:
        return io.cdf_points(self.errors)

    def row(self) -> list:
        finite = self.errors[np.isfinite(self.errors)]
        return [self.label, len(self.errors), self.n_no_position, self.median, self.p90,
                float(finite.mean()) if len(finite) else float("nan"), self.pearson_r]


def summarize(errors, variances, label: str = "") -> ErrorSummary:
    """Exact order statistics of the errors and Pearson r over finite (variance, error) pairs.

    Epochs without a position carry an infinite error, so they count against
    the percentiles instead of silently vanishing.
    """
    e = np.asarray(errors, dtype=np.float64)
    v = np.asarray(variances, dtype=np.float64)
    if len(e) != len(v):
        raise ValueError("length mismatch")
    if len(e) < 2:
        raise ValueError("need at least 2 samples")
    ok = np.isfinite(e) & np.isfinite(v)
    r = pearson(v[ok], e[ok]) if ok.sum() >= 2 else float("nan")
    finite = e[np.isfinite(e)]
    return ErrorSummary(e, order_statistic(e, 0.5), order_statistic(e, 0.9),
                        float(finite.mean()) if len(finite) else float("inf"), r,
                        int(np.sum(~np.isfinite(e))), label)


def summarize_records(records: Sequence[TtiRecord], label: str = "", variance: str = "cluster_variance"
                      ) -> ErrorSummary:
    """Summary of a run; the predicted variance is the selected cluster's by default."""
    return summarize([r.error for r in records], [getattr(r, variance) for r in records], label)


# --------------------------------------------------------------------------
# sweeps


SWEEP_DIMENSIONS = ("n_bs", "calibration_sigma", "perturbation")


def sweep_configs(cfg: ExperimentConfig, dimension: str, values: Sequence) -> list[tuple[str, ExperimentConfig]]:
    if dimension == "n_bs":
        return [(f"n_bs={int(v)}", replace(cfg, n_bs=int(v))) for v in values]
    if dimension == "calibration_sigma":
        return [(f"cal3sigma={float(v):g}deg", replace(cfg, calibration_sigma_deg=float(v))) for v in values]
    if dimension == "perturbation":
        base = cfg.perturbation or PerturbationSpec()
        return [(f"wall_sigma={float(v):g}m", replace(cfg, perturbation=replace(base, wall_position_sigma=float(v))))
                for v in values]
    raise ValueError(f"unknown sweep dimension {dimension!r}; expected one of {SWEEP_DIMENSIONS}")


def sweep(cfg: ExperimentConfig, dimension: str, values: Sequence, threads: int = 1,
          run: PreparedRun | None = None) -> list[ErrorSummary]:
    """One run_pipeline per grid point; traces are computed once and reused."""
    run = run if run is not None else prepare(cfg)
    out = []
    for label, c in sweep_configs(cfg, dimension, values):
        recs = run_pipeline(c, run, threads)
        out.append(summarize_records(recs, label))
        log.info("%s: median %.2f m, p90 %.2f m", label, out[-1].median, out[-1].p90)
    return out


def record_rows(records: Sequence[TtiRecord]) -> list[list]:
    return [[r.seed, r.tti, *r.truth, *r.estimate, r.error, r.miss, r.variance, r.cluster_variance,
             r.n_candidates, r.n_clusters, r.n_rrus, r.n_peaks] for r in records]
