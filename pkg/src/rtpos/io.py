"""CSV emitters for paths, angle reports, candidates, clusters, tracks and summaries.

Every writer emits a fixed header row; angles are written in degrees.
"""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PATH_HEADER = ["tti", "rru_id", "path_index", "kind", "n_reflections", "delay_s", "path_length_m",
               "gain_db", "gain_re", "gain_im", "aoa_az_deg", "aoa_el_deg", "aod_az_deg", "aod_el_deg"]
ANGLE_HEADER = ["tti", "rru_id", "az_deg", "el_deg", "power", "width_deg", "width_el_deg"]
CANDIDATE_HEADER = ["tti", "x", "y", "z", "weight", "ray_count", "rru_set"]
CLUSTER_HEADER = ["tti", "cluster_id", "weight", "x", "y", "z", "variance", "size"]
TRACK_HEADER = ["tti", "rru_id", "axis", "trend_id", "raw_deg", "predicted_deg", "weight"]
POSITION_HEADER = ["seed", "tti", "true_x", "true_y", "true_z", "est_x", "est_y", "est_z", "error_m",
                   "miss", "variance", "cluster_variance", "n_candidates", "n_clusters", "n_rrus", "n_peaks"]
SUMMARY_HEADER = ["label", "n", "n_no_position", "median_m", "p90_m", "mean_m", "pearson_r"]
CDF_HEADER = ["value", "cumulative_probability"]


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_rows(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            if len(r) != len(header):
                raise ValueError(f"row has {len(r)} fields, header has {len(header)}")
            w.writerow([_fmt(v) for v in r])
    return path


def read_rows(path) -> list[dict[str, str]]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def path_rows(tti: int, rru_id: int, paths) -> list[list]:
    out = []
    for k, p in enumerate(paths):
        kinds = "+".join(i.kind for i in p.interactions) or "los"
        g = complex(p.complex_gain)
        out.append([tti, rru_id, k, kinds, p.n_reflections, p.delay, p.path_length, p.gain_db, g.real, g.imag,
                    np.rad2deg(p.aoa_azimuth), np.rad2deg(p.aoa_elevation),
                    np.rad2deg(p.aod_azimuth), np.rad2deg(p.aod_elevation)])
    return out


def angle_rows(reports) -> list[list]:
    return [[r.tti, r.rru_id, np.rad2deg(p.azimuth), np.rad2deg(p.elevation), p.peak_power,
             np.rad2deg(p.width_az), np.rad2deg(p.width_el)] for r in reports for p in r.peaks]


def candidate_rows(tti: int, candidates) -> list[list]:
    return [[tti, *c.position, c.weight, c.ray_count, ";".join(str(i) for i in sorted(c.rru_set))]
            for c in candidates]


def cluster_rows(tti: int, clusters) -> list[list]:
    return [[tti, k, c.total_weight, *c.center, c.variance, c.size] for k, c in enumerate(clusters)]


def cdf_points(values) -> tuple[np.ndarray, np.ndarray]:
    """Empirical CDF steps; non-decreasing and ending at 1."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    n = len(v)
    return v, np.arange(1, n + 1) / n


def write_cdf(path, values) -> Path:
    x, p = cdf_points(values)
    return write_rows(path, CDF_HEADER, zip(x, p))
