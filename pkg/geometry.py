# THEORY:
# Circular-orbit cone-beam scanner model. The source rotates about the world
# z-axis at distance dso from the origin; a flat panel sits opposite it at
# distance dsd from the source, centred on the source-origin axis. Every
# detector pixel defines one straight ray from the source through the pixel
# centre, and every consumer of rays (projector, trainer, SART) asks this
# module for them so that the whole toolkit agrees on one geometry.
#
# Coordinates:
# - World units are millimetres, volume box centred at the origin.
# - Source at angle a: dso * (cos a, sin a, 0).
# - Detector centre: -(dsd - dso) * (cos a, sin a, 0).
# - Detector u axis (-sin a, cos a, 0), v axis (0, 0, 1).
# - Pixel (row, col): u = (col - (cols-1)/2) * pitch_u, v = (row - (rows-1)/2) * pitch_v.
# - Attenuation lengths: world distance / mu_unit_mm.

# CAVEATS & WARNINGS:
# - Tangent hits (t_near == t_far) and rays grazing a face plane are misses.
# - No detector offsets, tilt or helical pitch.

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from errors import GeometryError


@dataclass(frozen=True)
class ScanGeometry:
    dso: float
    dsd: float
    detector_rows: int
    detector_cols: int
    pixel_pitch_u: float
    pixel_pitch_v: float
    angle_start: float
    angle_end: float
    num_views: int
    volume_extent: Tuple[float, float, float]
    mu_unit_mm: float = 64.0

    def __post_init__(self):
        object.__setattr__(self, 'volume_extent', tuple(float(e) for e in self.volume_extent))
        if len(self.volume_extent) != 3:
            raise GeometryError(f"volume_extent needs 3 entries, got {len(self.volume_extent)}")
        if not (self.dsd > self.dso > 0):
            raise GeometryError(f"need dsd > dso > 0 (dso={self.dso}, dsd={self.dsd})")
        if self.num_views < 1:
            raise GeometryError(f"num_views must be >= 1, got {self.num_views}")
        if self.detector_rows < 1 or self.detector_cols < 1:
            raise GeometryError(f"detector dims must be >= 1, got {self.detector_rows}x{self.detector_cols}")
        if self.pixel_pitch_u <= 0 or self.pixel_pitch_v <= 0:
            raise GeometryError("pixel pitches must be > 0")
        if any(e <= 0 for e in self.volume_extent):
            raise GeometryError(f"volume_extent must be positive, got {self.volume_extent}")
        if self.mu_unit_mm <= 0:
            raise GeometryError("mu_unit_mm must be > 0")
        half_diagonal = 0.5 * math.sqrt(sum(e * e for e in self.volume_extent))
        if half_diagonal >= self.dso:
            raise GeometryError(
                f"volume box (half diagonal {half_diagonal:.1f} mm) does not fit inside the source orbit (dso={self.dso})")

    @property
    def box(self) -> Tuple[np.ndarray, np.ndarray]:
        half = 0.5 * np.asarray(self.volume_extent, dtype=np.float64)
        return -half, half

    @property
    def angular_step(self) -> float:
        return (self.angle_end - self.angle_start) / self.num_views

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d['volume_extent'] = list(self.volume_extent)
        return d

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ScanGeometry':
        expected = {f for f in cls.__dataclass_fields__}
        missing = expected - set(data)
        unknown = set(data) - expected
        if missing:
            raise GeometryError(f"geometry is missing fields: {sorted(missing)}")
        if unknown:
            raise GeometryError(f"geometry has unknown fields: {sorted(unknown)}")
        return cls(
            dso=float(data['dso']),
            dsd=float(data['dsd']),
            detector_rows=int(data['detector_rows']),
            detector_cols=int(data['detector_cols']),
            pixel_pitch_u=float(data['pixel_pitch_u']),
            pixel_pitch_v=float(data['pixel_pitch_v']),
            angle_start=float(data['angle_start']),
            angle_end=float(data['angle_end']),
            num_views=int(data['num_views']),
            volume_extent=tuple(data['volume_extent']),
            mu_unit_mm=float(data['mu_unit_mm']),
        )

    def content_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode('utf-8')).hexdigest()

    def with_views(self, num_views: int) -> 'ScanGeometry':
        d = self.to_dict()
        d['num_views'] = int(num_views)
        return ScanGeometry.from_dict(d)

    def attenuation_length(self, mm):
        return np.asarray(mm) / self.mu_unit_mm

    @classmethod
    def desk_default(cls, num_views: int = 50, angle_start: float = 0.0, angle_end: float = math.pi,
                     detector: int = 128, extent: float = 256.0) -> 'ScanGeometry':
        """dso=1000, dsd=1500, pitch chosen so the panel over-covers the volume by 10%."""
        dso, dsd = 1000.0, 1500.0
        pitch = detector_pitch_for(extent, dso, dsd, detector, margin=1.1)
        return cls(dso=dso, dsd=dsd, detector_rows=detector, detector_cols=detector,
                   pixel_pitch_u=pitch, pixel_pitch_v=pitch, angle_start=angle_start,
                   angle_end=angle_end, num_views=num_views, volume_extent=(extent, extent, extent))


def detector_pitch_for(extent: float, dso: float, dsd: float, pixels: int, margin: float = 1.1) -> float:
    # In-plane: cone tangent to the circle circumscribing the box footprint.
    r_xy = 0.5 * extent * math.sqrt(2.0)
    width_u = 2.0 * dsd * r_xy / math.sqrt(dso * dso - r_xy * r_xy)
    # Axial: box half height seen from the nearest point of that circle.
    width_v = 2.0 * dsd * (0.5 * extent) / (dso - r_xy)
    return margin * max(width_u, width_v) / pixels


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float = 0.0
    t_far: float = 0.0
    hit: bool = False


def view_angles(geom: ScanGeometry) -> List[float]:
    step = (geom.angle_end - geom.angle_start) / geom.num_views
    return [geom.angle_start + i * step for i in range(geom.num_views)]


def source_position(geom: ScanGeometry, angle: float) -> np.ndarray:
    return geom.dso * np.array([math.cos(angle), math.sin(angle), 0.0])


def _detector_points(geom: ScanGeometry, angle: float, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    center = -(geom.dsd - geom.dso) * np.array([c, s, 0.0])
    e_u = np.array([-s, c, 0.0])
    e_v = np.array([0.0, 0.0, 1.0])
    u = (np.asarray(cols, dtype=np.float64) - 0.5 * (geom.detector_cols - 1)) * geom.pixel_pitch_u
    v = (np.asarray(rows, dtype=np.float64) - 0.5 * (geom.detector_rows - 1)) * geom.pixel_pitch_v
    return center + u[..., None] * e_u + v[..., None] * e_v


def detector_coordinates(geom: ScanGeometry, angle: float, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project world points onto the detector of view `angle`.

    Returns fractional (row, col) pixel coordinates and the source-to-point
    depth along the central axis.
    """
    c, s = math.cos(angle), math.sin(angle)
    depth = geom.dso - (points[..., 0] * c + points[..., 1] * s)
    mag = geom.dsd / depth
    u = (-points[..., 0] * s + points[..., 1] * c) * mag
    v = points[..., 2] * mag
    col = u / geom.pixel_pitch_u + 0.5 * (geom.detector_cols - 1)
    row = v / geom.pixel_pitch_v + 0.5 * (geom.detector_rows - 1)
    return row, col, depth


def intersect_aabb_batch(origins: np.ndarray, directions: np.ndarray,
                         lo: np.ndarray, hi: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized slab test. Returns (t_near, t_far, hit) per ray."""
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    parallel = d == 0.0
    with np.errstate(divide='ignore', invalid='ignore'):
        inv = 1.0 / d
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
    # Axis-parallel rays: the slab is all or nothing; sitting on the face plane is outside.
    inside = (o > lo) & (o < hi)
    t_lo = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t0, t1))
    t_hi = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t0, t1))
    t_near = np.maximum(t_lo.max(axis=-1), 0.0)
    t_far = t_hi.min(axis=-1)
    hit = t_far > t_near
    return t_near, t_far, hit


def intersect_aabb(ray_origin, ray_direction, box) -> Optional[Tuple[float, float]]:
    """Single-ray slab test; None is a MISS."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
    t_near, t_far, hit = intersect_aabb_batch(ray_origin, ray_direction, lo, hi)
    if not hit[0]:
        return None
    return float(t_near[0]), float(t_far[0])


def view_rays(geom: ScanGeometry, angle: float) -> Tuple[np.ndarray, np.ndarray]:
    """Origins and unit directions for every pixel of one view, row-major."""
    rows, cols = np.meshgrid(np.arange(geom.detector_rows), np.arange(geom.detector_cols), indexing='ij')
    targets = _detector_points(geom, angle, rows.ravel(), cols.ravel())
    src = source_position(geom, angle)
    dirs = targets - src
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(src, dirs.shape).copy()
    return origins, dirs


def pixel_ray(geom: ScanGeometry, angle: float, row: int, col: int) -> Ray:
    if not (0 <= row < geom.detector_rows and 0 <= col < geom.detector_cols):
        raise GeometryError(f"pixel ({row}, {col}) outside {geom.detector_rows}x{geom.detector_cols} detector")
    src = source_position(geom, angle)
    target = _detector_points(geom, angle, np.array(row), np.array(col))
    direction = target - src
    direction /= np.linalg.norm(direction)
    lo, hi = geom.box
    t_near, t_far, hit = intersect_aabb_batch(src, direction, lo, hi)
    if not hit[0]:
        return Ray(origin=src, direction=direction, hit=False)
    return Ray(origin=src, direction=direction, t_near=float(t_near[0]), t_far=float(t_far[0]), hit=True)


def normalize_points(points: np.ndarray, geom: ScanGeometry) -> np.ndarray:
    """Map world points into the unit cube spanned by volume_extent."""
    lo, hi = geom.box
    return np.clip((points - lo) / (hi - lo), 0.0, 1.0)
