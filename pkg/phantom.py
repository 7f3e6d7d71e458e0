# THEORY:
# Ground truth for the toolkit. This module builds attenuation volumes
# (analytic phantoms or imported raw grids), pushes them through the same
# stratified midpoint sampler the trainer uses, and applies Beer's law to
# produce detector intensities. Noise is added afterwards so clean and noisy
# projection sets share one forward model.
#
# The trilinear stencil defined here is also the matched forward/back
# projector pair used by SART, so every method sees the same discretization.

# CAVEATS & WARNINGS:
# - Noise is additive Gaussian with sigma = fraction * mean intensity; no
#   photon statistics, scatter or beam hardening.
# - Voxel values outside the volume box are zero; the last half voxel at each
#   face ramps to zero under trilinear interpolation.

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

from errors import PhantomError, ShapeMismatchError
from geometry import ScanGeometry, intersect_aabb_batch, view_angles, view_rays
from raycast import stratified_sample, synthesize_intensity

NOISE_STREAM = 2
# Noise floor: the first float32 strictly above 1e-6
MIN_INTENSITY = float(np.nextafter(np.float32(1e-6), np.float32(1.0)))
RAYS_PER_CHUNK = 4096

# Corner offsets of a trilinear cell, bit k of the corner number selects +1 on axis k
CORNERS = np.array([[(k >> 0) & 1, (k >> 1) & 1, (k >> 2) & 1] for k in range(8)], dtype=np.int64)

# Ten-ellipsoid 3D Shepp-Logan (Toft intensities, Schabel's 3D extension).
#    A      a      b      c      x0      y0      z0    phi  theta  psi
SHEPP_LOGAN_3D = np.array([
    [1.0, .6900, .920, .810, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [-.8, .6624, .874, .780, 0.0, -.0184, 0.0, 0.0, 0.0, 0.0],
    [-.2, .1100, .310, .220, .22, 0.0, 0.0, -18.0, 0.0, 10.0],
    [-.2, .1600, .410, .280, -.22, 0.0, 0.0, 18.0, 0.0, 10.0],
    [.1, .2100, .250, .410, 0.0, .35, -.15, 0.0, 0.0, 0.0],
    [.1, .0460, .046, .050, 0.0, .1, .25, 0.0, 0.0, 0.0],
    [.1, .0460, .046, .050, 0.0, -.1, .25, 0.0, 0.0, 0.0],
    [.1, .0460, .023, .050, -.08, -.605, 0.0, 0.0, 0.0, 0.0],
    [.1, .0230, .023, .020, 0.0, -.606, 0.0, 0.0, 0.0, 0.0],
    [.1, .0230, .046, .020, .06, -.605, 0.0, 0.0, 0.0, 0.0],
])


class PhantomKind(str, Enum):
    SHEPP_LOGAN_3D = 'shepp_logan_3d'
    NESTED_BOXES = 'nested_boxes'
    UNIFORM_SPHERE = 'uniform_sphere'


class Convention(str, Enum):
    INTENSITY = 'INTENSITY'
    LINE_INTEGRAL = 'LINE_INTEGRAL'


@dataclass
class Volume:
    data: np.ndarray  # (nx, ny, nz), indexed [x, y, z]
    extent: Tuple[float, float, float]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.extent = tuple(float(e) for e in self.extent)
        if self.data.ndim != 3 or min(self.data.shape) < 2:
            raise ShapeMismatchError(f"volume needs >= 2 voxels per axis, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def spacing(self) -> np.ndarray:
        return np.asarray(self.extent) / np.asarray(self.dims)

    @property
    def box(self) -> Tuple[np.ndarray, np.ndarray]:
        half = 0.5 * np.asarray(self.extent, dtype=np.float64)
        return -half, half

    def voxel_centers(self) -> np.ndarray:
        return voxel_centers(self.dims, self.extent)


def voxel_centers(dims: Sequence[int], extent: Sequence[float]) -> np.ndarray:
    """World coordinates of every voxel centre of a grid over the centred box, shape (nx, ny, nz, 3)."""
    half = 0.5 * np.asarray(extent, dtype=np.float64)
    spacing = 2.0 * half / np.asarray(dims)
    axes = [-half[k] + (np.arange(int(n)) + 0.5) * spacing[k] for k, n in enumerate(dims)]
    return np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1)


@dataclass
class ProjectionSet:
    images: np.ndarray  # (num_views, rows, cols)
    geometry: ScanGeometry
    noise_fraction: float = 0.0
    convention: Convention = Convention.INTENSITY
    seed: Optional[int] = None
    i0: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.convention = Convention(self.convention)
        g = self.geometry
        expected = (g.num_views, g.detector_rows, g.detector_cols)
        if self.images.shape != expected:
            raise ShapeMismatchError(f"projection stack {self.images.shape} does not match geometry {expected}")
        if self.convention is Convention.INTENSITY:
            if np.any(self.images <= 0) or np.any(self.images > self.i0):
                raise ValueError("INTENSITY projections must lie in (0, I0]")
        elif np.any(self.images < 0):
            raise ValueError("LINE_INTEGRAL projections must be >= 0")

    def line_integrals(self) -> np.ndarray:
        if self.convention is Convention.LINE_INTEGRAL:
            return self.images.astype(np.float64)
        return -np.log(self.images.astype(np.float64) / self.i0)

    def intensities(self) -> np.ndarray:
        if self.convention is Convention.INTENSITY:
            return self.images.astype(np.float64)
        return self.i0 * np.exp(-self.images.astype(np.float64))

    def as_convention(self, convention: Convention) -> 'ProjectionSet':
        convention = Convention(convention)
        images = self.intensities() if convention is Convention.INTENSITY else self.line_integrals()
        return ProjectionSet(images=images, geometry=self.geometry, noise_fraction=self.noise_fraction,
                             convention=convention, seed=self.seed, i0=self.i0, meta=dict(self.meta))


def _ellipsoid_rotation(phi: float, theta: float, psi: float) -> np.ndarray:
    cphi, sphi = np.cos(phi), np.sin(phi)
    ctheta, stheta = np.cos(theta), np.sin(theta)
    cpsi, spsi = np.cos(psi), np.sin(psi)
    return np.array([
        [cpsi * cphi - ctheta * sphi * spsi, cpsi * sphi + ctheta * cphi * spsi, spsi * stheta],
        [-spsi * cphi - ctheta * sphi * cpsi, -spsi * sphi + ctheta * cphi * cpsi, cpsi * stheta],
        [stheta * sphi, -stheta * cphi, ctheta],
    ])


def _unit_grid(dims: Sequence[int]) -> np.ndarray:
    """Voxel centres mapped onto [-1, 1]^3, shape (nx, ny, nz, 3)."""
    axes = [(np.arange(n) + 0.5) / n * 2.0 - 1.0 for n in dims]
    return np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1)


def shepp_logan_values(coords: np.ndarray, table: np.ndarray = SHEPP_LOGAN_3D) -> np.ndarray:
    """Sum of ellipsoid amplitudes at points given in [-1, 1]^3 coordinates."""
    values = np.zeros(coords.shape[:-1])
    for a, ax, by, cz, x0, y0, z0, phi, theta, psi in table:
        rot = _ellipsoid_rotation(np.radians(phi), np.radians(theta), np.radians(psi))
        p = coords @ rot.T
        inside = ((p[..., 0] - x0) / ax) ** 2 + ((p[..., 1] - y0) / by) ** 2 + ((p[..., 2] - z0) / cz) ** 2 <= 1.0
        values[inside] += a
    return values


def make_phantom(kind, dims: Sequence[int], extent: Sequence[float] = (256.0, 256.0, 256.0),
                 mu: float = 0.5, radius_fraction: float = 0.8) -> Volume:
    try:
        kind = PhantomKind(kind)
    except ValueError:
        raise PhantomError(f"unknown phantom kind '{kind}' (choose from {[k.value for k in PhantomKind]})")
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 2:
        raise PhantomError(f"phantom dims must be 3 values >= 2, got {dims}")
    grid = _unit_grid(dims)

    if kind is PhantomKind.SHEPP_LOGAN_3D:
        if min(dims) < 16:
            raise PhantomError(f"shepp_logan_3d needs >= 16 voxels per axis, got {dims}")
        values = np.clip(shepp_logan_values(grid), 0.0, None)
        peak = values.max()
        data = values / peak if peak > 0 else values
    elif kind is PhantomKind.NESTED_BOXES:
        reach = np.abs(grid).max(axis=-1)
        data = np.where(reach <= 0.35, 1.0, np.where(reach <= 0.7, 0.5, 0.0))
    else:
        # Radius relative to the shortest half extent, measured in world units
        half = 0.5 * np.asarray(extent, dtype=np.float64)
        world = grid * half
        radius = radius_fraction * half.min()
        data = np.where(np.linalg.norm(world, axis=-1) <= radius, mu, 0.0)
    return Volume(data=data.astype(np.float32), extent=tuple(extent))


def normalize_minmax(vol: Volume) -> Volume:
    lo, hi = float(vol.data.min()), float(vol.data.max())
    if hi > lo:
        data = (vol.data.astype(np.float64) - lo) / (hi - lo)
    else:
        data = np.zeros_like(vol.data, dtype=np.float64)
    return Volume(data=data.astype(np.float32), extent=vol.extent)


def world_to_voxel(points: np.ndarray, vol_dims: Sequence[int], extent: Sequence[float]) -> np.ndarray:
    """Fractional voxel index coordinates; voxel centres sit on integers."""
    half = 0.5 * np.asarray(extent, dtype=np.float64)
    spacing = 2.0 * half / np.asarray(vol_dims)
    return (points + half) / spacing - 0.5


def trilinear_stencil(coords: np.ndarray, dims: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Flat voxel indices and weights of the 8 interpolation corners.

    Corners outside the grid get weight 0 (and a harmless index 0), which is
    the zero-padding convention for values outside the extent.
    """
    nx, ny, nz = (int(n) for n in dims)
    base = np.floor(coords).astype(np.int64)
    frac = coords - base
    shape = coords.shape[:-1] + (8,)
    index = np.zeros(shape, dtype=np.int64)
    weight = np.zeros(shape, dtype=np.float64)
    for k, (dx, dy, dz) in enumerate(CORNERS):
        cx, cy, cz = base[..., 0] + dx, base[..., 1] + dy, base[..., 2] + dz
        valid = (cx >= 0) & (cx < nx) & (cy >= 0) & (cy < ny) & (cz >= 0) & (cz < nz)
        w = ((frac[..., 0] if dx else 1.0 - frac[..., 0])
             * (frac[..., 1] if dy else 1.0 - frac[..., 1])
             * (frac[..., 2] if dz else 1.0 - frac[..., 2]))
        weight[..., k] = np.where(valid, w, 0.0)
        index[..., k] = np.where(valid, (cx * ny + cy) * nz + cz, 0)
    return index, weight


def sample_volume(vol: Volume, points: np.ndarray) -> np.ndarray:
    index, weight = trilinear_stencil(world_to_voxel(points, vol.dims, vol.extent), vol.dims)
    flat = vol.data.reshape(-1).astype(np.float64)
    return np.sum(flat[index] * weight, axis=-1)


def project_rays(vol: Volume, geom: ScanGeometry, origins: np.ndarray, directions: np.ndarray,
                 t_near: np.ndarray, t_far: np.ndarray, samples_per_ray: int) -> np.ndarray:
    """Line integrals (in attenuation units) along hit rays, midpoint rule."""
    sampled = stratified_sample(origins, directions, t_near, t_far, samples_per_ray, jitter=False)
    mu = sample_volume(vol, sampled.positions)
    return np.sum(mu * geom.attenuation_length(sampled.deltas), axis=-1)


def _project_view(vol: Volume, geom: ScanGeometry, angle: float, samples_per_ray: int) -> np.ndarray:
    origins, dirs = view_rays(geom, angle)
    lo, hi = geom.box
    t_near, t_far, hit = intersect_aabb_batch(origins, dirs, lo, hi)
    intensity = np.ones(origins.shape[0], dtype=np.float64)
    hit_ids = np.flatnonzero(hit)
    for start in range(0, hit_ids.size, RAYS_PER_CHUNK):
        ids = hit_ids[start:start + RAYS_PER_CHUNK]
        line = project_rays(vol, geom, origins[ids], dirs[ids], t_near[ids], t_far[ids], samples_per_ray)
        sampled_i, _ = synthesize_intensity(line[:, None], np.ones((ids.size, 1)))
        intensity[ids] = sampled_i
    return intensity.reshape(geom.detector_rows, geom.detector_cols)


def project_volume(vol: Volume, geom: ScanGeometry, samples_per_ray: int, threads: int = 1) -> ProjectionSet:
    if samples_per_ray < max(vol.dims):
        raise ValueError(f"samples_per_ray ({samples_per_ray}) must be >= the largest volume dimension ({max(vol.dims)})")
    if not np.allclose(vol.extent, geom.volume_extent):
        raise ShapeMismatchError(f"volume extent {vol.extent} differs from geometry extent {geom.volume_extent}")
    angles = view_angles(geom)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        views = list(pool.map(lambda a: _project_view(vol, geom, a, samples_per_ray), angles))
    images = np.stack(views).astype(np.float32)
    logging.info(f"Projected {vol.dims} volume into {len(angles)} views at {samples_per_ray} samples/ray")
    return ProjectionSet(images=images, geometry=geom, noise_fraction=0.0, convention=Convention.INTENSITY)


def add_noise(proj: ProjectionSet, fraction: float, seed: int) -> ProjectionSet:
    if fraction < 0:
        raise ValueError(f"noise fraction must be >= 0, got {fraction}")
    if proj.convention is not Convention.INTENSITY:
        raise ValueError("noise is applied to INTENSITY projections")
    if fraction == 0:
        return ProjectionSet(images=proj.images.copy(), geometry=proj.geometry, noise_fraction=0.0,
                             convention=proj.convention, seed=seed, i0=proj.i0, meta=dict(proj.meta))
    images = proj.images.astype(np.float64)
    sigma = fraction * float(images.mean())
    noisy = np.empty_like(images)
    # One counter-based stream per view: output does not depend on how views are scheduled
    for v in range(images.shape[0]):
        stream = np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, v, NOISE_STREAM]))
        noisy[v] = images[v] + sigma * stream.standard_normal(images[v].shape)
    noisy = np.clip(noisy, MIN_INTENSITY, proj.i0)
    return ProjectionSet(images=noisy, geometry=proj.geometry, noise_fraction=float(fraction),
                         convention=proj.convention, seed=seed, i0=proj.i0, meta=dict(proj.meta))
