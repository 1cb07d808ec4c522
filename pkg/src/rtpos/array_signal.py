"""Per-RRU signal processing: steering vectors, channel snapshots, MUSIC, CA-CFAR."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .geometry import direction_from_angles, wrap_angle
from .propagation import PathComponent
from .scene import C_LIGHT, RruConfig

SRS_N_RB = 272
SRS_K_TC = 2
SUBCARRIER_SPACING = 30e3


@dataclass(frozen=True)
class ArrayGeometry:
    """Element displacements (m) of a planar panel; element 0 sits at the origin."""

    displacements: np.ndarray
    boresight_azimuth: float = 0.0
    boresight_elevation: float = 0.0

    @classmethod
    def from_rru(cls, rru: RruConfig, wavelength: float) -> "ArrayGeometry":
        d_h, d_v = rru.spacings(wavelength)
        phi, th = rru.rotation_azimuth, rru.tilt
        iv, ih = np.meshgrid(np.arange(rru.rows), np.arange(rru.cols), indexing="ij")
        ih, iv = ih.ravel(), iv.ravel()
        dx = ih * d_h * np.cos(phi) + iv * d_v * np.sin(phi) * np.sin(th)
        dy = ih * d_h * np.sin(phi) - iv * d_v * np.cos(phi) * np.sin(th)
        dz = iv * d_v * np.cos(th)
        return cls(np.stack([dx, dy, dz], axis=1), rru.boresight_azimuth, rru.boresight_elevation)

    @property
    def n_elements(self) -> int:
        return len(self.displacements)


def steering_vector(geom: ArrayGeometry, azimuth, elevation, wavelength: float) -> np.ndarray:
    """Unit-modulus response ``exp(i k (d . u))``; broadcasts over angle arrays (last axis = element)."""
    u = direction_from_angles(azimuth, elevation)
    phase = (2 * np.pi / wavelength) * (u @ geom.displacements.T)
    return np.exp(1j * phase)


@dataclass(frozen=True)
class ElementPattern:
    """Sector element pattern with parabolic cuts, 3 dB beamwidths in degrees."""

    max_gain_dbi: float = 8.0
    beamwidth_az_deg: float = 65.0
    beamwidth_el_deg: float = 65.0
    front_to_back_db: float = 30.0

    def gain_db(self, az_offset, el_offset):
        a_h = -np.minimum(12.0 * (np.rad2deg(az_offset) / self.beamwidth_az_deg) ** 2, self.front_to_back_db)
        a_v = -np.minimum(12.0 * (np.rad2deg(el_offset) / self.beamwidth_el_deg) ** 2, self.front_to_back_db)
        return self.max_gain_dbi - np.minimum(-(a_v + a_h), self.front_to_back_db)

    def amplitude(self, geom: ArrayGeometry, azimuth, elevation):
        daz = wrap_angle(np.asarray(azimuth) - geom.boresight_azimuth)
        return 10 ** (self.gain_db(daz, np.asarray(elevation) - geom.boresight_elevation) / 20)


@dataclass(frozen=True)
class Interferer:
    """Uncorrelated plane-wave source; power relative to the total received signal power."""

    azimuth: float
    elevation: float
    relative_power_db: float = 0.0


@dataclass(frozen=True)
class Impairments:
    snr_db: float | None = 20.0
    calibration_sigma_deg_3sigma: float = 0.0
    noise_variance: float | None = None
    interference: tuple[Interferer, ...] = ()


@dataclass(frozen=True)
class SnapshotSet:
    data: np.ndarray  # elements x snapshots
    subcarrier_offsets: np.ndarray  # Hz from carrier
    calibration_phase: np.ndarray  # rad per element
    noise_variance: float

    @property
    def covariance(self) -> np.ndarray:
        return self.data @ self.data.conj().T / self.data.shape[1]


def srs_subcarrier_offsets(n: int = 64) -> np.ndarray:
    """``n`` tones evenly subsampled from the comb-2 SRS allocation over 272 PRBs."""
    total = SRS_N_RB * 12 // SRS_K_TC
    if not (1 <= n <= total):
        raise ValueError(f"snapshot count must be in [1, {total}]")
    idx = np.round(np.linspace(0, total - 1, n)).astype(int)
    return idx * SRS_K_TC * SUBCARRIER_SPACING


def synthesize_snapshots(paths: Sequence[PathComponent], rru: RruConfig, impairments: Impairments,
                         rng_seed, *, wavelength: float = C_LIGHT / 3.5e9, n_snapshots: int = 64,
                         pattern: ElementPattern | None = ElementPattern(),
                         calibration_seed=None) -> SnapshotSet:
    """Frequency-domain SRS observations at one panel, one column per subcarrier.

    Calibration phase errors come from ``calibration_seed`` (default ``rng_seed``)
    so the harness can hold them fixed per RRU while noise changes per TTI.
    """
    geom = ArrayGeometry.from_rru(rru, wavelength)
    m = geom.n_elements
    if n_snapshots < m:
        raise ValueError(f"need at least {m} snapshots for a full-rank covariance, got {n_snapshots}")
    freqs = srs_subcarrier_offsets(n_snapshots)
    rng = np.random.default_rng(rng_seed)
    cal_rng = np.random.default_rng(rng_seed if calibration_seed is None else calibration_seed)

    y = np.zeros((m, n_snapshots), dtype=np.complex128)
    if paths:
        az = np.array([p.aoa_azimuth for p in paths])
        el = np.array([p.aoa_elevation for p in paths])
        coef = np.array([p.complex_gain for p in paths])
        if pattern is not None:
            coef = coef * pattern.amplitude(geom, az, el)
        delays = np.array([p.delay for p in paths])
        a = steering_vector(geom, az, el, wavelength)  # paths x elements
        x = coef[:, None] * np.exp(-2j * np.pi * delays[:, None] * freqs[None, :])
        y = a.T @ x
    p_sig = float(np.mean(np.abs(y) ** 2)) if paths else 0.0

    for itf in impairments.interference:
        amp = np.sqrt(max(p_sig, 1e-300) * 10 ** (itf.relative_power_db / 10))
        sym = np.exp(2j * np.pi * rng.uniform(size=n_snapshots))
        y = y + amp * np.outer(steering_vector(geom, itf.azimuth, itf.elevation, wavelength), sym)

    sigma_cal = np.deg2rad(impairments.calibration_sigma_deg_3sigma) / 3.0
    cal = cal_rng.normal(0.0, 1.0, size=m) * sigma_cal
    y = y * np.exp(1j * cal)[:, None]

    if impairments.noise_variance is not None:
        nv = float(impairments.noise_variance)
    elif impairments.snr_db is not None and p_sig > 0:
        nv = p_sig / 10 ** (impairments.snr_db / 10)
    else:
        nv = 0.0 if impairments.snr_db is None else 1.0
    if nv > 0:
        y = y + np.sqrt(nv / 2) * (rng.standard_normal((m, n_snapshots)) + 1j * rng.standard_normal((m, n_snapshots)))
    return SnapshotSet(y, freqs, cal, nv)


# --------------------------------------------------------------------------
# MUSIC


@dataclass(frozen=True)
class SpectrumGrid:
    """Sector grid: azimuth relative to boresight, elevation absolute (degrees)."""

    az_half_width_deg: float = 60.0
    az_step_deg: float = 0.5
    el_min_deg: float = -30.0
    el_max_deg: float = 10.0
    el_step_deg: float = 0.5

    def axes(self, boresight_azimuth: float) -> tuple[np.ndarray, np.ndarray]:
        n_az = int(round(2 * self.az_half_width_deg / self.az_step_deg)) + 1
        n_el = int(round((self.el_max_deg - self.el_min_deg) / self.el_step_deg)) + 1
        az = boresight_azimuth + np.deg2rad(np.linspace(-self.az_half_width_deg, self.az_half_width_deg, n_az))
        el = np.deg2rad(np.linspace(self.el_min_deg, self.el_max_deg, n_el))
        return az, el


@dataclass(frozen=True)
class AngularSpectrum:
    azimuth: np.ndarray  # increasing, unwrapped around boresight
    elevation: np.ndarray
    power: np.ndarray  # (n_az, n_el)

    @property
    def az_step(self) -> float:
        return float(self.azimuth[1] - self.azimuth[0]) if len(self.azimuth) > 1 else 0.0

    @property
    def el_step(self) -> float:
        return float(self.elevation[1] - self.elevation[0]) if len(self.elevation) > 1 else 0.0


_STEERING_CACHE: dict = {}


def _grid_steering(geom: ArrayGeometry, grid: SpectrumGrid, wavelength: float):
    key = (geom.displacements.tobytes(), geom.boresight_azimuth, grid, wavelength)
    hit = _STEERING_CACHE.get(key)
    if hit is None:
        az, el = grid.axes(geom.boresight_azimuth)
        A = steering_vector(geom, az[:, None], el[None, :], wavelength)  # n_az x n_el x M
        hit = (az, el, np.ascontiguousarray(A.reshape(-1, geom.n_elements)))
        if len(_STEERING_CACHE) > 32:
            _STEERING_CACHE.clear()
        _STEERING_CACHE[key] = hit
    return hit


def music_spectrum(snapshots: SnapshotSet | np.ndarray, geom: ArrayGeometry, model_order: int,
                   grid: SpectrumGrid = SpectrumGrid(), wavelength: float = C_LIGHT / 3.5e9) -> AngularSpectrum:
    """MUSIC pseudo-spectrum ``1 / |V^H a|^2`` over a sector grid."""
    data = snapshots.data if isinstance(snapshots, SnapshotSet) else np.asarray(snapshots)
    m = geom.n_elements
    if not (0 <= model_order < m):
        raise ValueError(f"model order must be in [0, {m - 1}]")
    R = data @ data.conj().T / data.shape[1]
    w, V = np.linalg.eigh(R)  # ascending
    rank = int(np.sum(w > 1e-10 * max(w[-1], 1e-300)))
    if model_order > rank:
        raise ValueError(f"model order {model_order} exceeds covariance rank {rank}")
    az, el, A = _grid_steering(geom, grid, wavelength)
    Us = V[:, m - model_order:]
    proj = np.sum(np.abs(A.conj() @ Us) ** 2, axis=1) if model_order else 0.0
    denom = np.maximum(m - proj, m * 1e-12)
    return AngularSpectrum(az, el, (1.0 / denom).reshape(len(az), len(el)))


def estimate_model_order(eigenvalues: np.ndarray, gap_factor: float = 10.0, max_order: int = 8) -> int:
    """Number of eigenvalues above ``gap_factor`` times the noise floor (mean of the lower half)."""
    w = np.sort(np.asarray(eigenvalues, dtype=np.float64))
    floor = float(np.mean(w[: max(1, len(w) // 2)]))
    if floor <= 0:
        floor = max(w[-1], 1e-300) * 1e-12
    return int(min(np.sum(w > gap_factor * floor), max_order, len(w) - 1))


# --------------------------------------------------------------------------
# CA-CFAR


@dataclass(frozen=True)
class CfarConfig:
    threshold: float = 4.0
    window: tuple[int, int] = (21, 11)  # azimuth x elevation cells
    guard: int = 1


@dataclass(frozen=True)
class Peak:
    azimuth: float
    elevation: float
    peak_power: float
    width_az: float
    width_el: float
    index: tuple[int, int] = (-1, -1)

    @property
    def peak_width(self) -> tuple[float, float]:
        return self.width_az, self.width_el


def _half_power_width(line: np.ndarray, i: int, step: float) -> float:
    half = line[i] / 2.0
    n = len(line)
    lo = i
    while lo > 0 and line[lo - 1] >= half:
        lo -= 1
    hi = i
    while hi < n - 1 and line[hi + 1] >= half:
        hi += 1
    left = float(lo)
    if lo > 0:
        a, b = line[lo - 1], line[lo]
        left = lo - (b - half) / (b - a)
    right = float(hi)
    if hi < n - 1:
        a, b = line[hi], line[hi + 1]
        right = hi + (a - half) / (a - b)
    return max(right - left, 1.0) * step


def cfar_detect(spectrum: AngularSpectrum, cfg: CfarConfig = CfarConfig()) -> list[Peak]:
    """Cell-averaging CFAR over the 2D spectrum, reduced to local maxima.

    A cell is flagged when it exceeds ``threshold / (N_az N_el)`` times the sum
    of its window, the cell and a guard ring of ``cfg.guard`` cells excluded.
    Windows are clamped at the grid borders by edge replication.
    """
    P = spectrum.power
    n_az, n_el = cfg.window
    if n_az > P.shape[0] or n_el > P.shape[1]:
        raise ValueError("CFAR window larger than the spectrum grid")
    if cfg.threshold <= 0:
        raise ValueError("CFAR threshold must be positive")
    kernel = np.ones((n_az, n_el))
    ca, ce = n_az // 2, n_el // 2
    g = cfg.guard
    kernel[max(0, ca - g):ca + g + 1, max(0, ce - g):ce + g + 1] = 0.0
    window_sum = ndimage.correlate(P, kernel, mode="nearest")
    flagged = P > cfg.threshold / (n_az * n_el) * window_sum
    local_max = P >= ndimage.maximum_filter(P, size=3, mode="nearest")
    cand = flagged & local_max
    labels, n = ndimage.label(cand)
    peaks = []
    for lab in range(1, n + 1):
        cells = np.argwhere(labels == lab)
        i, j = (int(x) for x in cells[0])
        peaks.append(Peak(
            float(wrap_angle(spectrum.azimuth[i])), float(spectrum.elevation[j]), float(P[i, j]),
            _half_power_width(P[:, j], i, spectrum.az_step), _half_power_width(P[i, :], j, spectrum.el_step),
            (i, j)))
    peaks.sort(key=lambda p: (-p.peak_power, p.index))
    return peaks


def _refine(P: np.ndarray, peak: Peak, spectrum: AngularSpectrum) -> Peak:
    # parabolic interpolation of log power along each axis
    i, j = peak.index
    az, el = spectrum.azimuth[i], spectrum.elevation[j]
    L = np.log(P)
    if 0 < i < P.shape[0] - 1:
        a, b, c = L[i - 1, j], L[i, j], L[i + 1, j]
        den = a - 2 * b + c
        if den < 0:
            az += 0.5 * (a - c) / den * spectrum.az_step
    if 0 < j < P.shape[1] - 1:
        a, b, c = L[i, j - 1], L[i, j], L[i, j + 1]
        den = a - 2 * b + c
        if den < 0:
            el += 0.5 * (a - c) / den * spectrum.el_step
    return Peak(float(wrap_angle(az)), float(el), peak.peak_power, peak.width_az, peak.width_el, peak.index)


# --------------------------------------------------------------------------
# per-RRU estimation


@dataclass(frozen=True)
class AngleReport:
    rru_id: int
    tti: int
    peaks: tuple[Peak, ...] = ()


@dataclass(frozen=True)
class AoaConfig:
    carrier_frequency: float = 3.5e9
    n_snapshots: int = 64
    grid: SpectrumGrid = SpectrumGrid()
    cfar: CfarConfig = CfarConfig()
    eigen_gap_factor: float = 10.0
    max_order: int = 8
    refine: bool = True
    pattern: ElementPattern | None = field(default_factory=ElementPattern)

    @property
    def wavelength(self) -> float:
        return C_LIGHT / self.carrier_frequency


def estimate_from_snapshots(snapshots: SnapshotSet, rru: RruConfig, cfg: AoaConfig = AoaConfig(),
                            tti: int = 0) -> AngleReport:
    geom = ArrayGeometry.from_rru(rru, cfg.wavelength)
    R = snapshots.covariance
    order = estimate_model_order(np.linalg.eigvalsh(R), cfg.eigen_gap_factor, cfg.max_order)
    if order == 0:
        return AngleReport(rru.id, tti, ())
    spec = music_spectrum(snapshots, geom, order, cfg.grid, cfg.wavelength)
    peaks = cfar_detect(spec, cfg.cfar)[:order]
    if cfg.refine:
        peaks = [_refine(spec.power, p, spec) for p in peaks]
    return AngleReport(rru.id, tti, tuple(peaks))


def estimate_aoa(rru: RruConfig, paths: Sequence[PathComponent], impairments: Impairments,
                 cfg: AoaConfig = AoaConfig(), rng_seed=0, tti: int = 0, calibration_seed=None) -> AngleReport:
    """Snapshots -> MUSIC -> CA-CFAR for one RRU and TTI."""
    snaps = synthesize_snapshots(paths, rru, impairments, rng_seed, wavelength=cfg.wavelength,
                                 n_snapshots=cfg.n_snapshots, pattern=cfg.pattern,
                                 calibration_seed=calibration_seed)
    return estimate_from_snapshots(snaps, rru, cfg, tti)
