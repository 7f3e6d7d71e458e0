"""Position encoders: trainable multiresolution hash grid and fixed frequency lifting.

Points arrive normalized to the unit cube. The hash encoder keeps one feature
table per level; coarse levels whose (N+1)^3 corner lattice fits in the table
are indexed densely, finer levels go through the spatial hash.
"""

import math
from concurrent.futures import Executor
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigError

DEFAULT_PRIMES = (1, 2654435761, 805459861)
INIT_RANGE = 1e-4

@dataclass(frozen=True)
class HashEncoderConfig:
    levels: int = 16
    table_size: int = 2 ** 19
    features_per_level: int = 2
    base_resolution: int = 16
    growth_factor: float = 1.5
    primes: Tuple[int, int, int] = DEFAULT_PRIMES

    def __post_init__(self):
        object.__setattr__(self, 'primes', tuple(int(p) for p in self.primes))
        if self.levels < 1 or self.features_per_level < 1 or self.base_resolution < 1:
            raise ConfigError("hash encoder needs levels, features_per_level and base_resolution >= 1")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise ConfigError(f"table_size must be a power of two, got {self.table_size}")
        if self.growth_factor <= 1.0 and self.levels > 1:
            raise ConfigError(f"growth_factor must be > 1, got {self.growth_factor}")
        if len(self.primes) != 3:
            raise ConfigError("hash encoder needs exactly 3 primes")

    @classmethod
    def for_target(cls, target_resolution: int, **overrides) -> 'HashEncoderConfig':
        """Growth factor chosen so the finest level is about twice the target grid."""
        levels = overrides.get('levels', cls.levels)
        base = overrides.get('base_resolution', cls.base_resolution)
        finest = max(2 * int(target_resolution), base + 1)
        growth = math.exp(math.log(finest / base) / max(levels - 1, 1))
        overrides.setdefault('growth_factor', growth)
        return cls(**overrides)

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level

    def resolutions(self) -> List[int]:
        # Small epsilon so exact powers (e.g. 16 * 2.0**3) do not floor one short
        return [int(math.floor(self.base_resolution * self.growth_factor ** level + 1e-9))
                for level in range(self.levels)]

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d['primes'] = list(self.primes)
        return d


@dataclass(frozen=True)
class LevelSpec:
    level: int
    resolution: int
    dense: bool
    rows: int


@lru_cache(maxsize=64)
def level_specs(config: HashEncoderConfig) -> Tuple[LevelSpec, ...]:
    specs = []
    for level, res in enumerate(config.resolutions()):
        lattice = (res + 1) ** 3
        dense = lattice <= config.table_size
        specs.append(LevelSpec(level=level, resolution=res, dense=dense,
                               rows=lattice if dense else config.table_size))
    return tuple(specs)


def hash_index(corners: np.ndarray, spec: LevelSpec, config: HashEncoderConfig) -> np.ndarray:
    """Table row for integer corner coordinates on a level's lattice."""
    c = np.asarray(corners).astype(np.uint64)
    if spec.dense:
        side = np.uint64(spec.resolution + 1)
        return ((c[..., 0] * side + c[..., 1]) * side + c[..., 2]).astype(np.int64)
    p0, p1, p2 = (np.uint64(p) for p in config.primes)
    h = (c[..., 0] * p0) ^ (c[..., 1] * p1) ^ (c[..., 2] * p2)
    return (h & np.uint64(config.table_size - 1)).astype(np.int64)


def _cube(a: np.ndarray, xyz_op) -> np.ndarray:
    """Combine per-axis (P, 3, 2) terms into the 8 cell corners, corner k = x + 2y + 4z."""
    x = a[:, 0, None, None, :]
    y = a[:, 1, None, :, None]
    z = a[:, 2, :, None, None]
    return xyz_op(xyz_op(x, y), z).reshape(-1, 8)


def corner_rows(base: np.ndarray, spec: LevelSpec, config: HashEncoderConfig) -> np.ndarray:
    """Rows of the 8 corners of the cells whose lower corners are `base` (P, 3).

    Same rows as hash_index on each corner. Hashed levels run in 32-bit
    arithmetic, which keeps every bit below a table mask of at most 2^32.
    """
    c = np.stack([base, base + 1], axis=-1)
    if spec.dense:
        side = spec.resolution + 1
        scale = np.array([side * side, side, 1], dtype=np.int64)[None, :, None]
        return _cube(c.astype(np.int64) * scale, np.add).astype(np.intp)
    if config.table_size <= 2 ** 32:
        word = np.uint32
        primes = np.array([p & 0xFFFFFFFF for p in config.primes], dtype=word)
    else:
        word = np.uint64
        primes = np.array(config.primes, dtype=word)
    hashed = c.astype(word) * primes[None, :, None]
    return (_cube(hashed, np.bitwise_xor) & word(config.table_size - 1)).astype(np.intp)


def init_tables(config: HashEncoderConfig, seed: int = 0, dtype=np.float32) -> List[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [rng.uniform(-INIT_RANGE, INIT_RANGE, size=(spec.rows, config.features_per_level)).astype(dtype)
            for spec in level_specs(config)]


@dataclass
class HashCache:
    index: List[np.ndarray]   # per level (P, 8)
    weight: List[np.ndarray]  # per level (P, 8)


def _clamp_unit(points: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(points, dtype=np.float64).reshape(-1, 3), 0.0, 1.0)


def encode_hash(points: np.ndarray, tables: Sequence[np.ndarray],
                config: HashEncoderConfig) -> Tuple[np.ndarray, HashCache]:
    p = _clamp_unit(points)
    dtype = tables[0].dtype
    f = config.features_per_level
    out = np.empty((p.shape[0], config.output_dim), dtype=dtype)
    cache = HashCache(index=[], weight=[])
    for spec, table in zip(level_specs(config), tables):
        x = p * spec.resolution
        base = np.clip(np.floor(x), 0, spec.resolution - 1)
        frac = x - base
        index = corner_rows(base.astype(np.int64), spec, config)
        w = _cube(np.stack([1.0 - frac, frac], axis=-1), np.multiply).astype(dtype)
        out[:, spec.level * f:(spec.level + 1) * f] = np.einsum('pk,pkf->pf', w, np.take(table, index, axis=0))
        cache.index.append(index)
        cache.weight.append(w)
    return out, cache


def hash_grad_contributions(cache: HashCache, upstream: np.ndarray,
                            config: HashEncoderConfig) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Per level: flat table rows and the gradient rows they receive."""
    f = config.features_per_level
    parts = []
    for level, (index, weight) in enumerate(zip(cache.index, cache.weight)):
        g = upstream[:, level * f:(level + 1) * f]
        values = weight[:, :, None] * g[:, None, :]
        parts.append((index.reshape(-1), values.reshape(-1, f)))
    return parts


def _scatter_level(chunks: Sequence[List[Tuple[np.ndarray, np.ndarray]]], level: int,
                   table: np.ndarray) -> np.ndarray:
    rows, f = table.shape
    index = np.concatenate([chunk[level][0] for chunk in chunks])
    values = np.concatenate([chunk[level][1] for chunk in chunks])
    flat = (index[:, None] * f + np.arange(f)).reshape(-1)
    summed = np.bincount(flat, weights=values.reshape(-1), minlength=rows * f)
    return summed.reshape(rows, f).astype(table.dtype)


def scatter_contributions(chunks: Sequence[List[Tuple[np.ndarray, np.ndarray]]],
                          tables: Sequence[np.ndarray], executor: Optional[Executor] = None) -> List[np.ndarray]:
    """Sum gradient contributions into dense per-level arrays.

    Chunks are concatenated in order before a single bincount per level, so
    a batch split into contiguous chunks sums exactly like the unsplit batch.
    Levels are independent and may run on `executor`.
    """
    levels = range(len(tables))
    if executor is None:
        return [_scatter_level(chunks, level, tables[level]) for level in levels]
    return list(executor.map(lambda level: _scatter_level(chunks, level, tables[level]), levels))


def encode_hash_backward(cache: HashCache, upstream: np.ndarray, config: HashEncoderConfig,
                         grads: List[np.ndarray]) -> None:
    """Accumulate dL/dTheta into `grads` (same shapes as the tables). No gradient flows to points."""
    for g, dense in zip(grads, scatter_contributions([hash_grad_contributions(cache, upstream, config)], grads)):
        g += dense


def encode_frequency(points: np.ndarray, bands: int) -> np.ndarray:
    """[sin(2^k pi p), cos(2^k pi p)] per band k, three axes each."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.empty((p.shape[0], 6 * bands))
    for k in range(bands):
        arg = (2.0 ** k) * math.pi * p
        out[:, 6 * k:6 * k + 3] = np.sin(arg)
        out[:, 6 * k + 3:6 * k + 6] = np.cos(arg)
    return out


class HashEncoder:
    kind = 'hash'

    def __init__(self, config: HashEncoderConfig, seed: int = 0, dtype=np.float32,
                 tables: Optional[List[np.ndarray]] = None):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.tables = tables if tables is not None else init_tables(config, seed, self.dtype)

    @property
    def output_dim(self) -> int:
        return self.config.output_dim

    @property
    def params(self) -> List[np.ndarray]:
        return self.tables

    def forward(self, points: np.ndarray):
        return encode_hash(points, self.tables, self.config)

    def grad_contributions(self, cache: HashCache, upstream: np.ndarray):
        return hash_grad_contributions(cache, upstream, self.config)

    def scatter(self, chunks, executor: Optional[Executor] = None) -> List[np.ndarray]:
        return scatter_contributions(chunks, self.tables, executor)

    def describe(self) -> Dict[str, Any]:
        return {'kind': self.kind, **self.config.to_dict()}


class FrequencyEncoder:
    kind = 'frequency'

    def __init__(self, bands: int = 10, dtype=np.float32):
        if bands < 1:
            raise ConfigError(f"frequency encoder needs >= 1 band, got {bands}")
        self.bands = int(bands)
        self.dtype = np.dtype(dtype)

    @property
    def output_dim(self) -> int:
        return 6 * self.bands

    @property
    def params(self) -> List[np.ndarray]:
        return []

    def forward(self, points: np.ndarray):
        return encode_frequency(points, self.bands).astype(self.dtype), None

    def grad_contributions(self, cache, upstream):
        return []

    def scatter(self, chunks, executor: Optional[Executor] = None) -> List[np.ndarray]:
        return []

    def describe(self) -> Dict[str, Any]:
        return {'kind': self.kind, 'bands': self.bands}
