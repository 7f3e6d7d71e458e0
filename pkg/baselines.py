# THEORY:
# Classical reconstructions that consume the same projection files the field
# trainer does.
#
# FDK: line integrals are cosine-weighted on a virtual detector through the
# rotation axis, ramp-filtered row by row in the frequency domain (spatial
# ram-lak kernel, optional Hann window, zero padding), and backprojected
# voxel by voxel with (dso / depth)^2 weighting. The sum over views is scaled
# by pi / num_views, which is half the angular step for a full turn and the
# angular step for a half turn.
#
# SART: every view in turn updates the volume by the relaxed, row-normalized
# residual backprojected and divided by the column sums. Forward and back
# projection share the trilinear stencil of the phantom projector on the
# midpoint sampler, so A and A^T are an exact matched pair.

# CAVEATS & WARNINGS:
# - No Parker weights: short scans carry the usual low-frequency shading.
# - SART keeps one view's system in memory at a time; memory grows with
#   detector size times samples per ray.

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import cv2
import numpy as np

from errors import ConfigError, GeometryError, SartDivergedError
from geometry import ScanGeometry, detector_coordinates, intersect_aabb_batch, view_angles, view_rays
from phantom import ProjectionSet, Volume, normalize_minmax, trilinear_stencil, voxel_centers, world_to_voxel
from raycast import stratified_sample
from recon_logger import recon_logger

FILTERS = ('ram-lak', 'hann')
VIEW_ORDERS = ('sequential', 'random')


@dataclass(frozen=True)
class FdkConfig:
    filter: str = 'hann'
    padding: int = 2

    def __post_init__(self):
        if self.filter not in FILTERS:
            raise ConfigError(f"fdk filter must be one of {FILTERS}, got '{self.filter}'")
        if self.padding < 1 or self.padding & (self.padding - 1):
            raise ConfigError(f"fdk padding must be a power of two >= 1, got {self.padding}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


def ramp_filter(cols: int, pitch: float, config: FdkConfig) -> np.ndarray:
    """Frequency response (rfft bins) of the band-limited ramp for `cols` detector columns."""
    length = config.padding * _next_pow2(2 * cols - 1)
    n = np.arange(length)
    n = np.where(n < length // 2, n, n - length)
    kernel = np.zeros(length)
    kernel[n == 0] = 1.0 / (4.0 * pitch * pitch)
    odd = (n % 2) != 0
    kernel[odd] = -1.0 / (np.pi * n[odd] * pitch) ** 2
    response = np.fft.rfft(kernel).real
    if config.filter == 'hann':
        k = np.arange(response.size)
        response *= 0.5 * (1.0 + np.cos(np.pi * k / (length // 2)))
    return response


def filter_projections(line_integrals: np.ndarray, geom: ScanGeometry, config: FdkConfig) -> np.ndarray:
    """Cosine weighting plus row-wise ramp filtering, on the virtual detector through the axis."""
    _, rows, cols = line_integrals.shape
    mag = geom.dso / geom.dsd
    du = geom.pixel_pitch_u * mag
    u = (np.arange(cols) - 0.5 * (cols - 1)) * du
    v = (np.arange(rows) - 0.5 * (rows - 1)) * geom.pixel_pitch_v * mag
    weight = geom.dso / np.sqrt(geom.dso ** 2 + u[None, :] ** 2 + v[:, None] ** 2)
    response = ramp_filter(cols, du, config)
    length = 2 * (response.size - 1)
    spectrum = np.fft.rfft(line_integrals * weight[None], n=length, axis=-1)
    return np.fft.irfft(spectrum * response, n=length, axis=-1)[..., :cols] * du


def _backproject_slice(filtered: np.ndarray, geom: ScanGeometry, angles: List[float],
                       centers: np.ndarray) -> np.ndarray:
    """All views backprojected onto one x-slice of voxel centres, shape (ny, nz, 3)."""
    out = np.zeros(centers.shape[:-1])
    for view, angle in enumerate(angles):
        row, col, depth = detector_coordinates(geom, angle, centers)
        sampled = cv2.remap(filtered[view], col.astype(np.float32), row.astype(np.float32),
                            interpolation=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0.0)
        out += (geom.dso / depth) ** 2 * sampled
    return out


def fdk_reconstruct(proj: ProjectionSet, dims: Sequence[int], config: Optional[FdkConfig] = None,
                    normalize: bool = True, threads: int = 1, logger=recon_logger) -> Volume:
    """Filtered backprojection; with normalize=False returns the raw (unclamped) linear estimate."""
    config = config or FdkConfig()
    geom = proj.geometry
    if geom.num_views < 2:
        raise GeometryError("FDK needs at least 2 views")
    started = time.perf_counter()
    filtered = np.ascontiguousarray(filter_projections(proj.line_integrals(), geom, config))
    centers = voxel_centers(dims, geom.volume_extent)
    angles = view_angles(geom)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        slices = list(pool.map(lambda i: _backproject_slice(filtered, geom, angles, centers[i]),
                               range(centers.shape[0])))
    # Back to mu per mu_unit_mm
    data = np.stack(slices) * (math.pi / geom.num_views) * geom.mu_unit_mm
    vol = Volume(data=data, extent=geom.volume_extent)
    if normalize:
        vol = normalize_minmax(Volume(data=np.maximum(vol.data, 0.0), extent=vol.extent))
    logger.log_stage('fdk', f"filter={config.filter} padding={config.padding} views={geom.num_views} dims={tuple(dims)}",
                     (time.perf_counter() - started) * 1000.0)
    return vol


@dataclass(frozen=True)
class SartConfig:
    iterations: int = 20
    relaxation: float = 1.0
    order: str = 'sequential'
    positivity: bool = True
    seed: int = 0
    samples_per_ray: Optional[int] = None
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"sart iterations must be >= 1, got {self.iterations}")
        if not (0.0 <= self.relaxation < 2.0):
            raise ConfigError(f"sart relaxation must be in [0, 2), got {self.relaxation}")
        if self.order not in VIEW_ORDERS:
            raise ConfigError(f"sart order must be one of {VIEW_ORDERS}, got '{self.order}'")
        if self.samples_per_ray is not None and self.samples_per_ray < 2:
            raise ConfigError("sart samples_per_ray must be >= 2")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class ViewSystem:
    """Sparse rows of the system matrix for the hit rays of one view."""
    pixels: np.ndarray   # (H,) flat detector indices
    index: np.ndarray    # (H, K) flat voxel indices
    weight: np.ndarray   # (H, K) trilinear weight times sample spacing

    def forward(self, flat_volume: np.ndarray) -> np.ndarray:
        return np.sum(flat_volume[self.index] * self.weight, axis=-1)

    def back(self, ray_values: np.ndarray, size: int) -> np.ndarray:
        return np.bincount(self.index.ravel(), weights=(self.weight * ray_values[:, None]).ravel(), minlength=size)

    def row_sums(self) -> np.ndarray:
        return self.weight.sum(axis=-1)

    def column_sums(self, size: int) -> np.ndarray:
        return np.bincount(self.index.ravel(), weights=self.weight.ravel(), minlength=size)


def view_system(geom: ScanGeometry, angle: float, dims: Sequence[int], samples_per_ray: int) -> ViewSystem:
    origins, dirs = view_rays(geom, angle)
    lo, hi = geom.box
    t_near, t_far, hit = intersect_aabb_batch(origins, dirs, lo, hi)
    pixels = np.flatnonzero(hit)
    sampled = stratified_sample(origins[pixels], dirs[pixels], t_near[pixels], t_far[pixels], samples_per_ray)
    index, weight = trilinear_stencil(world_to_voxel(sampled.positions, dims, geom.volume_extent), dims)
    weight = weight * geom.attenuation_length(sampled.deltas)[..., None]
    return ViewSystem(pixels=pixels, index=index.reshape(pixels.size, -1), weight=weight.reshape(pixels.size, -1))


@dataclass
class SartResult:
    volume: Volume
    residual_norms: List[float] = field(default_factory=list)


def sart_reconstruct(proj: ProjectionSet, dims: Sequence[int], config: Optional[SartConfig] = None,
                     init: Optional[Volume] = None, logger=recon_logger) -> SartResult:
    config = config or SartConfig()
    geom = proj.geometry
    dims = tuple(int(n) for n in dims)
    samples = config.samples_per_ray or max(dims)
    size = int(np.prod(dims))
    measured = proj.line_integrals().reshape(geom.num_views, -1)
    if init is not None:
        x = init.data.astype(np.float64).reshape(-1).copy()
    else:
        x = np.zeros(size)
    angles = view_angles(geom)
    rng = np.random.default_rng(config.seed)
    started = time.perf_counter()
    norms: List[float] = []
    best = math.inf

    for sweep in range(config.iterations):
        views = rng.permutation(len(angles)) if config.order == 'random' else range(len(angles))
        squared = 0.0
        for v in views:
            system = view_system(geom, angles[v], dims, samples)
            if system.pixels.size == 0:
                continue
            residual = measured[v, system.pixels] - system.forward(x)
            squared += float(residual @ residual)
            if config.relaxation == 0.0:
                continue
            rows = system.row_sums()
            normalized = np.divide(residual, rows, out=np.zeros_like(residual), where=rows > 0)
            cols = system.column_sums(size)
            update = np.divide(system.back(normalized, size), cols, out=np.zeros(size), where=cols > 0)
            x += config.relaxation * update
        if config.positivity:
            np.maximum(x, 0.0, out=x)
        norm = math.sqrt(squared)
        norms.append(norm)
        best = min(best, norm)
        logging.info(f"SART sweep {sweep + 1}/{config.iterations}: residual norm {norm:.6e}")
        if best > 0 and norm > config.divergence_factor * best:
            raise SartDivergedError(f"SART residual {norm:.3e} at sweep {sweep + 1} is over "
                                    f"{config.divergence_factor:g}x its minimum {best:.3e}")

    logger.log_stage('sart', f"sweeps={config.iterations} lambda={config.relaxation} order={config.order} "
                             f"final residual={norms[-1]:.4e}", (time.perf_counter() - started) * 1000.0)
    return SartResult(volume=Volume(data=x.reshape(dims), extent=geom.volume_extent), residual_norms=norms)
