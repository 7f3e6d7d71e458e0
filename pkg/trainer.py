# THEORY:
# Self-supervised fitting of a neural attenuation field to measured
# projections. Each step draws a batch of detector rays that hit the volume,
# samples points along them, asks the field (encoder + MLP) for mu at every
# point, composites intensities with Beer's law and minimizes the summed
# squared difference to the measured intensities with Adam. The gradient is
# the hand-written reverse chain raycast -> field -> encoder.
#
# Work inside a step is cut into fixed-size ray chunks that run on a thread
# pool; chunk results are merged in chunk order, so the numbers do not depend
# on how many threads ran them. The optimizer step is a serial barrier.

# CAVEATS & WARNINGS:
# - Only hit rays train the field; MISS pixels carry no volume information.
# - The loss is a sum over the batch, not a mean.

import logging
import math
import time
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from encoding import FrequencyEncoder, HashEncoder, HashEncoderConfig
from errors import ConfigError, GeometryError, NonFiniteLossError, ShapeMismatchError, TrainingDivergedError
from field import MlpCache, MlpParams, MlpSpec, init_params, mlp_backward, mlp_forward
from geometry import ScanGeometry, intersect_aabb_batch, normalize_points, view_angles, view_rays
from metrics import psnr
from phantom import Convention, ProjectionSet, Volume, normalize_minmax, voxel_centers
from raycast import RayBatch, jitter_stream, stratified_sample, synthesize_backward, synthesize_intensity
from recon_logger import recon_logger
from trace_store import TraceStore
from volume_io import Checkpoint, save_checkpoint

SHUFFLE_STREAM = 3
HOLDOUT_STREAM = 4
RAYS_PER_TASK = 256
QUERY_CHUNK = 65536
DIVERGENCE_LOSS = 1e6
LR_SCHEDULES = ('exponential', 'step')
ENCODERS = ('hash', 'frequency')


@dataclass(frozen=True)
class TrainConfig:
    batch_rays: int = 2048
    samples_per_ray: int = 96
    iterations: int = 3000
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    lr_schedule: str = 'exponential'
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    jitter: bool = True
    encoder: str = 'hash'
    eval_every: int = 250
    holdout_fraction: float = 0.0
    workers: int = 1
    strict: bool = False
    close_last_interval: bool = True
    precision: str = 'float32'
    hash: Optional[HashEncoderConfig] = None
    frequency_bands: int = 10
    mlp_width: int = 32
    mlp_depth: int = 4
    mlp_skip_layer: Optional[int] = 1

    def __post_init__(self):
        if self.batch_rays < 1:
            raise ConfigError(f"batch_rays must be >= 1, got {self.batch_rays}")
        if self.samples_per_ray < 2:
            raise ConfigError(f"samples_per_ray must be >= 2, got {self.samples_per_ray}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if not (self.lr_start >= self.lr_end > 0):
            raise ConfigError(f"need lr_start >= lr_end > 0 (got {self.lr_start}, {self.lr_end})")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}, got '{self.lr_schedule}'")
        if self.encoder not in ENCODERS:
            raise ConfigError(f"encoder must be one of {ENCODERS}, got '{self.encoder}'")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if not (0.0 <= self.holdout_fraction < 1.0):
            raise ConfigError(f"holdout_fraction must be in [0, 1), got {self.holdout_fraction}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.precision not in ('float32', 'float64'):
            raise ConfigError(f"precision must be float32 or float64, got '{self.precision}'")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0 and self.adam_eps > 0):
            raise ConfigError("Adam needs betas in [0, 1) and eps > 0")

    @property
    def effective_workers(self) -> int:
        return 1 if self.strict else self.workers

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d['hash'] = self.hash.to_dict() if self.hash is not None else None
        return d


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Learning rate for a 0-based iteration; lands on lr_start and lr_end at the ends."""
    last = config.iterations - 1
    if last <= 0:
        return config.lr_start
    frac = min(max(iteration, 0), last) / last
    ratio = config.lr_end / config.lr_start
    if config.lr_schedule == 'exponential':
        return config.lr_start * ratio ** frac
    # Two-step staircase: lr_start, geometric midpoint, lr_end
    level = min(2, int(math.floor(3 * frac)))
    return config.lr_start * ratio ** (level / 2)


class AdamOptimizer:
    def __init__(self, params: Sequence[np.ndarray], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.step_count = 0

    @classmethod
    def for_config(cls, params: Sequence[np.ndarray], config: TrainConfig) -> 'AdamOptimizer':
        return cls(params, config.adam_beta1, config.adam_beta2, config.adam_eps)

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float,
             executor: Optional[Executor] = None):
        """Bias-corrected Adam update, in place on `params`.

        Arrays are updated independently; with an `executor` they are spread
        over its workers and the result is the same.
        """
        if len(grads) != len(params) or len(params) != len(self.m):
            raise ShapeMismatchError(f"{len(params)} params, {len(grads)} grads, {len(self.m)} moment slots")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t

        def update(k: int):
            p, m, v = params[k], self.m[k], self.v[k]
            g = np.asarray(grads[k], dtype=p.dtype)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)

        if executor is None:
            for k in range(len(params)):
                update(k)
        else:
            list(executor.map(update, range(len(params))))


@dataclass
class FieldCache:
    encoder: Any
    mlp: MlpCache


class FieldModel:
    """Encoder + MLP over world coordinates inside the geometry's volume box."""

    def __init__(self, encoder, mlp: MlpParams, geometry: ScanGeometry):
        if mlp.spec.input_dim != encoder.output_dim:
            raise ShapeMismatchError(f"MLP input {mlp.spec.input_dim} != encoder output {encoder.output_dim}")
        self.encoder = encoder
        self.mlp = mlp
        self.geometry = geometry

    @classmethod
    def create(cls, config: TrainConfig, geometry: ScanGeometry, target_resolution: int = 64) -> 'FieldModel':
        dtype = config.dtype
        if config.encoder == 'hash':
            hash_config = config.hash or HashEncoderConfig.for_target(target_resolution)
            encoder = HashEncoder(hash_config, seed=config.seed, dtype=dtype)
        else:
            encoder = FrequencyEncoder(config.frequency_bands, dtype=dtype)
        spec = MlpSpec(input_dim=encoder.output_dim, width=config.mlp_width,
                       depth=config.mlp_depth, skip_layer=config.mlp_skip_layer)
        return cls(encoder, init_params(config.seed + 1, spec, dtype), geometry)

    @property
    def params(self) -> List[np.ndarray]:
        return list(self.encoder.params) + self.mlp.arrays()

    def param_names(self) -> List[str]:
        names = [f"table_{i:02d}" for i in range(len(self.encoder.params))]
        for i in range(self.mlp.spec.depth):
            names.extend([f"mlp_w{i}", f"mlp_b{i}"])
        return names

    def forward(self, world_points: np.ndarray) -> Tuple[np.ndarray, FieldCache]:
        unit = normalize_points(np.asarray(world_points, dtype=np.float64).reshape(-1, 3), self.geometry)
        features, enc_cache = self.encoder.forward(unit)
        mu, mlp_cache = mlp_forward(features, self.mlp)
        return mu, FieldCache(encoder=enc_cache, mlp=mlp_cache)

    def backward_sparse(self, cache: FieldCache, d_mu: np.ndarray) -> Tuple[list, List[np.ndarray]]:
        """Per-level (rows, values) encoder contributions and MLP gradients (w0, b0, w1, ...)."""
        mlp_grads, d_features = mlp_backward(cache.mlp, d_mu)
        return self.encoder.grad_contributions(cache.encoder, d_features), mlp_grads.arrays()

    def backward(self, cache: FieldCache, d_mu: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray]]:
        """Dense encoder gradients and MLP gradients for one forward pass."""
        contributions, mlp_grads = self.backward_sparse(cache, d_mu)
        encoder_grads = self.encoder.scatter([contributions]) if contributions else []
        return encoder_grads, mlp_grads

    def query(self, world_points: np.ndarray, chunk: int = QUERY_CHUNK) -> np.ndarray:
        points = np.asarray(world_points, dtype=np.float64).reshape(-1, 3)
        out = np.empty(points.shape[0], dtype=self.mlp.dtype)
        for start in range(0, points.shape[0], chunk):
            mu, _ = self.forward(points[start:start + chunk])
            out[start:start + chunk] = mu
        return out


def build_ray_pool(proj: ProjectionSet) -> RayBatch:
    """Every detector ray that hits the volume, across all views, with its measured I/I0."""
    geom = proj.geometry
    lo, hi = geom.box
    targets = (proj.intensities() / proj.i0).reshape(geom.num_views, -1)
    pixels = geom.detector_rows * geom.detector_cols
    origins, dirs, near, far, tgt, ids = [], [], [], [], [], []
    for v, angle in enumerate(view_angles(geom)):
        o, d = view_rays(geom, angle)
        t_near, t_far, hit = intersect_aabb_batch(o, d, lo, hi)
        keep = np.flatnonzero(hit)
        origins.append(o[keep])
        dirs.append(d[keep])
        near.append(t_near[keep])
        far.append(t_far[keep])
        tgt.append(targets[v, keep])
        ids.append(v * pixels + keep)
    return RayBatch(origins=np.concatenate(origins), directions=np.concatenate(dirs),
                    t_near=np.concatenate(near), t_far=np.concatenate(far),
                    targets=np.concatenate(tgt), ray_ids=np.concatenate(ids))


def split_holdout(pool: RayBatch, fraction: float, seed: int) -> Tuple[RayBatch, Optional[RayBatch]]:
    if fraction <= 0 or len(pool) < 2:
        return pool, None
    rng = np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, 0, HOLDOUT_STREAM]))
    order = rng.permutation(len(pool))
    k = max(1, int(round(fraction * len(pool))))
    return pool.subset(np.sort(order[k:])), pool.subset(np.sort(order[:k]))


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, int(epoch), SHUFFLE_STREAM]))
    return rng.permutation(n)


@dataclass
class _ChunkResult:
    loss: float
    contributions: list
    mlp_grads: List[np.ndarray]


def render_rays(model: FieldModel, batch: RayBatch, samples_per_ray: int, offsets: Optional[np.ndarray] = None,
                close_last: bool = True):
    """Synthesized I/I0 per ray plus everything the backward pass needs."""
    sampled = stratified_sample(batch.origins, batch.directions, batch.t_near, batch.t_far, samples_per_ray,
                                jitter=offsets is not None, offsets=offsets, close_last=close_last)
    mu, field_cache = model.forward(sampled.positions)
    mu = mu.reshape(len(batch), samples_per_ray)
    deltas = model.geometry.attenuation_length(sampled.deltas).astype(mu.dtype)
    intensity, att_cache = synthesize_intensity(mu, deltas)
    return intensity, att_cache, field_cache


def _chunk_loss_and_grads(model: FieldModel, batch: RayBatch, start: int, samples_per_ray: int,
                          offsets: Optional[np.ndarray], close_last: bool) -> _ChunkResult:
    intensity, att_cache, field_cache = render_rays(model, batch, samples_per_ray, offsets, close_last)
    residual = intensity - batch.targets.astype(intensity.dtype)
    squared = residual.astype(np.float64) ** 2
    bad = np.flatnonzero(~np.isfinite(squared))
    if bad.size:
        index = start + int(bad[0])
        ray_id = None if batch.ray_ids is None else int(batch.ray_ids[bad[0]])
        raise NonFiniteLossError(f"non-finite loss at batch ray {index} (detector ray id {ray_id})", ray_index=index)
    d_mu = synthesize_backward(att_cache, 2.0 * residual)
    contributions, mlp_grads = model.backward_sparse(field_cache, d_mu.reshape(-1))
    return _ChunkResult(loss=float(squared.sum()), contributions=contributions, mlp_grads=mlp_grads)


def loss_and_grads(batch: RayBatch, model: FieldModel, samples_per_ray: int,
                   offsets: Optional[np.ndarray] = None, close_last: bool = True,
                   executor: Optional[Executor] = None) -> Tuple[float, List[np.ndarray]]:
    """Summed squared intensity residual over the batch and its gradient for every model parameter.

    Gradients are returned in `model.params` order. Chunks of RAYS_PER_TASK
    rays run on `executor` (inline when None) and are merged in chunk order;
    hash-table rows from every chunk are scattered once per call.
    """
    n = len(batch)
    if n == 0:
        return 0.0, [np.zeros_like(p) for p in model.params]
    starts = list(range(0, n, RAYS_PER_TASK))

    def run(start: int) -> _ChunkResult:
        stop = min(start + RAYS_PER_TASK, n)
        chunk_offsets = None if offsets is None else offsets[start:stop]
        return _chunk_loss_and_grads(model, batch.subset(slice(start, stop)), start, samples_per_ray,
                                     chunk_offsets, close_last)

    results = list(executor.map(run, starts)) if executor is not None else [run(s) for s in starts]

    loss = 0.0
    mlp_grads = [np.zeros_like(p) for p in model.mlp.arrays()]
    for result in results:
        loss += result.loss
        for acc, g in zip(mlp_grads, result.mlp_grads):
            acc += g
    encoder_grads = model.encoder.scatter([r.contributions for r in results], executor)
    return loss, encoder_grads + mlp_grads


def batch_loss(model: FieldModel, batch: RayBatch, samples_per_ray: int, close_last: bool = True) -> float:
    """Forward-only summed loss with midpoint samples (held-out and reprojection checks)."""
    total = 0.0
    for start in range(0, len(batch), RAYS_PER_TASK):
        chunk = batch.subset(slice(start, start + RAYS_PER_TASK))
        intensity, _, _ = render_rays(model, chunk, samples_per_ray, None, close_last)
        total += float(np.sum((intensity.astype(np.float64) - chunk.targets) ** 2))
    return total


def extract_volume(model: FieldModel, dims: Sequence[int], extent: Optional[Sequence[float]] = None) -> Volume:
    """Evaluate the field at every voxel centre of the requested grid."""
    extent = tuple(extent) if extent is not None else model.geometry.volume_extent
    dims = tuple(int(n) for n in dims)
    mu = model.query(voxel_centers(dims, extent).reshape(-1, 3))
    return Volume(data=mu.reshape(dims), extent=extent)


def make_checkpoint(model: FieldModel, optimizer: AdamOptimizer, iteration: int,
                    config: Optional[TrainConfig] = None) -> Checkpoint:
    arrays: Dict[str, np.ndarray] = {}
    names = model.param_names()
    for name, p in zip(names, model.params):
        arrays[name] = p.copy()
    for name, m, v in zip(names, optimizer.m, optimizer.v):
        arrays[f"adam_m.{name}"] = m.copy()
        arrays[f"adam_v.{name}"] = v.copy()
    return Checkpoint(
        encoder=model.encoder.describe(),
        mlp=model.mlp.spec.to_dict(),
        arrays=arrays,
        iteration=int(iteration),
        adam_step=optimizer.step_count,
        geometry=model.geometry.to_dict(),
        geometry_hash=model.geometry.content_hash(),
        train_config=config.to_dict() if config is not None else {},
    )


def restore_model(ckpt: Checkpoint) -> Tuple[FieldModel, AdamOptimizer]:
    geometry = ScanGeometry.from_dict(ckpt.geometry)
    if geometry.content_hash() != ckpt.geometry_hash:
        raise GeometryError("checkpoint geometry does not match its recorded hash")
    enc = dict(ckpt.encoder)
    kind = enc.pop('kind')
    if kind == 'hash':
        config = HashEncoderConfig(**enc)
        tables = [ckpt.arrays[f"table_{i:02d}"].copy() for i in range(config.levels)]
        encoder = HashEncoder(config, dtype=tables[0].dtype, tables=tables)
    elif kind == 'frequency':
        encoder = FrequencyEncoder(enc['bands'], dtype=ckpt.arrays['mlp_w0'].dtype)
    else:
        raise ConfigError(f"unknown encoder kind '{kind}' in checkpoint")
    spec = MlpSpec(**ckpt.mlp)
    mlp = MlpParams(spec=spec,
                    weights=[ckpt.arrays[f"mlp_w{i}"].copy() for i in range(spec.depth)],
                    biases=[ckpt.arrays[f"mlp_b{i}"].copy() for i in range(spec.depth)])
    model = FieldModel(encoder, mlp, geometry)
    optimizer = AdamOptimizer(model.params)
    optimizer.m = [ckpt.arrays[f"adam_m.{name}"].copy() for name in model.param_names()]
    optimizer.v = [ckpt.arrays[f"adam_v.{name}"].copy() for name in model.param_names()]
    optimizer.step_count = ckpt.adam_step
    tc = ckpt.train_config
    if tc:
        optimizer.beta1, optimizer.beta2, optimizer.eps = tc['adam_beta1'], tc['adam_beta2'], tc['adam_eps']
    return model, optimizer


@dataclass
class TrainResult:
    model: FieldModel
    optimizer: AdamOptimizer
    checkpoint: Checkpoint
    losses: np.ndarray
    trace: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return float(self.losses[-1]) if len(self.losses) else float('nan')


def train(proj: ProjectionSet, config: TrainConfig, ground_truth: Optional[Volume] = None,
          recon_dims: Optional[Sequence[int]] = None, trace_store: Optional[TraceStore] = None,
          checkpoint_path: Optional[str] = None, logger=recon_logger, steps: Optional[int] = None) -> TrainResult:
    """Fit a field to `proj`.

    `steps` caps the number of Adam steps actually taken (default: the whole
    schedule of `config.iterations`); the learning-rate schedule always spans
    the configured run. Zero steps returns the initialized model.
    """
    if proj.convention is not Convention.INTENSITY:
        proj = proj.as_convention(Convention.INTENSITY)
    steps = config.iterations if steps is None else int(steps)
    if not (0 <= steps <= config.iterations):
        raise ConfigError(f"steps must be in [0, {config.iterations}], got {steps}")
    geom = proj.geometry
    dims = tuple(recon_dims) if recon_dims is not None else (ground_truth.dims if ground_truth else (64, 64, 64))
    model = FieldModel.create(config, geom, max(dims))
    optimizer = AdamOptimizer.for_config(model.params, config)

    pool = build_ray_pool(proj)
    if len(pool) == 0:
        raise GeometryError("no detector ray intersects the volume box")
    train_pool, holdout = split_holdout(pool, config.holdout_fraction, config.seed)
    truth = normalize_minmax(ground_truth) if ground_truth is not None else None
    logger.log_stage('train', f"encoder={config.encoder} rays={len(train_pool)} "
                              f"holdout={0 if holdout is None else len(holdout)} iters={steps}/{config.iterations} "
                              f"workers={config.effective_workers}")

    workers = config.effective_workers
    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    losses = np.zeros(steps, dtype=np.float64)
    trace: List[Dict[str, Any]] = []
    n = len(train_pool)
    epoch, cursor = 0, 0
    order = epoch_order(n, config.seed, epoch)
    started = time.perf_counter()
    try:
        for it in range(steps):
            if cursor >= n:
                epoch += 1
                order = epoch_order(n, config.seed, epoch)
                cursor = 0
            batch = train_pool.subset(order[cursor:cursor + config.batch_rays])
            cursor += config.batch_rays
            offsets = None
            if config.jitter:
                offsets = jitter_stream(config.seed, it).random((len(batch), config.samples_per_ray))

            loss, grads = loss_and_grads(batch, model, config.samples_per_ray, offsets,
                                         config.close_last_interval, executor)
            lr = lr_at(it, config)
            if loss > DIVERGENCE_LOSS:
                raise TrainingDivergedError(
                    f"loss {loss:.3e} exceeds {DIVERGENCE_LOSS:.0e} at iteration {it} "
                    f"(lr={lr:.3e}, batch={len(batch)} rays, previous loss={losses[it - 1] if it else float('nan'):.3e})")
            optimizer.step(model.params, grads, lr, executor)
            losses[it] = loss

            if (it + 1) % config.eval_every == 0 or it == steps - 1:
                row = {'iter': it + 1, 'loss': loss, 'lr': lr, 'psnr': None, 'holdout_loss': None,
                       'wall_ms': round((time.perf_counter() - started) * 1000.0, 1)}
                if truth is not None:
                    row['psnr'] = psnr(normalize_minmax(extract_volume(model, truth.dims, truth.extent)), truth)
                if holdout is not None:
                    row['holdout_loss'] = batch_loss(model, holdout, config.samples_per_ray, config.close_last_interval)
                trace.append(row)
                if trace_store is not None:
                    trace_store.append(row)
                logger.log_iteration(row['iter'], config.iterations, loss, lr, row['psnr'],
                                     row['holdout_loss'], row['wall_ms'])
    finally:
        if executor is not None:
            executor.shutdown()

    checkpoint = make_checkpoint(model, optimizer, steps, config)
    if checkpoint_path:
        save_checkpoint(checkpoint, checkpoint_path)
    logging.info(f"Training finished after {steps} iterations in "
                 f"{(time.perf_counter() - started):.1f}s")
    return TrainResult(model=model, optimizer=optimizer, checkpoint=checkpoint, losses=losses, trace=trace)
