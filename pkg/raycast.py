"""Stratified ray sampling and differentiable Beer's-law synthesis.

Everything here is vectorized over a leading ray axis: arrays of shape (B,)
for per-ray scalars, (B, N) for per-sample scalars and (B, N, 3) for sample
positions.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

# Philox counter lane reserved for jitter streams; other lanes are used by
# ray-pool shuffling and noise.
JITTER_STREAM = 1


@dataclass
class RayBatch:
    origins: np.ndarray      # (B, 3) world mm
    directions: np.ndarray   # (B, 3) unit
    t_near: np.ndarray       # (B,)
    t_far: np.ndarray        # (B,)
    targets: np.ndarray      # (B,) measured I/I0 in (0, 1]
    ray_ids: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self.t_near.shape[0])

    def subset(self, index) -> 'RayBatch':
        return RayBatch(
            origins=self.origins[index],
            directions=self.directions[index],
            t_near=self.t_near[index],
            t_far=self.t_far[index],
            targets=self.targets[index],
            ray_ids=None if self.ray_ids is None else self.ray_ids[index],
        )


@dataclass
class SampledRays:
    t: np.ndarray          # (B, N) ray parameters of the samples
    positions: np.ndarray  # (B, N, 3)
    deltas: np.ndarray     # (B, N) spacing to the next sample, closing to t_far


@dataclass
class AttenuationCache:
    optical_depth: np.ndarray  # (B,) sum of mu * delta
    intensity: np.ndarray      # (B,)
    deltas: np.ndarray         # (B, N)


def jitter_stream(seed: int, step: int) -> np.random.Generator:
    """Counter-based stream for one training step."""
    return np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, int(step), JITTER_STREAM]))


def stratified_sample(origins: np.ndarray, directions: np.ndarray, t_near: np.ndarray, t_far: np.ndarray,
                      n_samples: int, jitter: bool = False, rng: Optional[np.random.Generator] = None,
                      offsets: Optional[np.ndarray] = None, close_last: bool = True) -> SampledRays:
    """One sample per equal-length bin of [t_near, t_far].

    With jitter the in-bin offsets come from `offsets` (shape (B, N), values in
    [0, 1)) or are drawn from `rng`; without jitter bin midpoints are used.
    """
    if n_samples < 2:
        raise ValueError(f"need at least 2 samples per ray, got {n_samples}")
    t_near = np.asarray(t_near, dtype=np.float64).reshape(-1)
    t_far = np.asarray(t_far, dtype=np.float64).reshape(-1)
    b = t_near.shape[0]
    if jitter:
        if offsets is None:
            if rng is None:
                raise ValueError("jittered sampling needs an rng or precomputed offsets")
            offsets = rng.random((b, n_samples))
        u = np.asarray(offsets, dtype=np.float64)
    else:
        u = np.full((b, n_samples), 0.5)
    width = (t_far - t_near) / n_samples
    t = t_near[:, None] + (np.arange(n_samples)[None, :] + u) * width[:, None]

    deltas = np.empty_like(t)
    deltas[:, :-1] = np.diff(t, axis=1)
    deltas[:, -1] = (t_far - t[:, -1]) if close_last else 0.0

    origins = np.asarray(origins, dtype=np.float64).reshape(b, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(b, 3)
    positions = origins[:, None, :] + t[:, :, None] * directions[:, None, :]
    return SampledRays(t=t, positions=positions, deltas=deltas)


def synthesize_intensity(mu: np.ndarray, delta: np.ndarray, i0: float = 1.0) -> Tuple[np.ndarray, AttenuationCache]:
    """I = I0 * exp(-sum_i mu_i * delta_i) per ray."""
    mu = np.atleast_2d(mu)
    delta = np.atleast_2d(delta).astype(mu.dtype, copy=False)
    optical_depth = np.sum(mu * delta, axis=-1)
    intensity = i0 * np.exp(-optical_depth)
    return intensity, AttenuationCache(optical_depth=optical_depth, intensity=intensity, deltas=delta)


def synthesize_backward(cache: AttenuationCache, d_intensity: np.ndarray) -> np.ndarray:
    """dL/dmu_i = dL/dI * (-delta_i * I)."""
    d_intensity = np.asarray(d_intensity, dtype=cache.intensity.dtype).reshape(-1)
    return -(d_intensity * cache.intensity)[:, None] * cache.deltas
