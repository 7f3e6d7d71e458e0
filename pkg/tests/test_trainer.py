import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np
import pytest

import trainer
from encoding import HashEncoderConfig
from errors import ConfigError, NonFiniteLossError, ShapeMismatchError, TrainingDivergedError
from geometry import ScanGeometry
from metrics import psnr
from phantom import make_phantom, normalize_minmax, project_volume
from pipeline import ExperimentRunner
from raycast import RayBatch, stratified_sample, synthesize_backward, synthesize_intensity
from settings import load_experiment_config
from trace_store import TRAIN_TRACE_COLUMNS, TraceStore
from trainer import (AdamOptimizer, FieldModel, TrainConfig, batch_loss, build_ray_pool, epoch_order,
                     extract_volume, loss_and_grads, lr_at, make_checkpoint, render_rays, restore_model,
                     split_holdout, train)
from volume_io import load_checkpoint, save_checkpoint

DEFAULT_CONFIG = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'config.yaml')
DESK_WORKERS = 8

TINY_HASH = HashEncoderConfig(levels=2, table_size=1024, features_per_level=2, base_resolution=4, growth_factor=2.0)


def _config(**overrides):
    params = dict(batch_rays=64, samples_per_ray=8, iterations=1, precision='float64', hash=TINY_HASH,
                  eval_every=5, seed=3, mlp_width=8)
    params.update(overrides)
    return TrainConfig(**params)


@pytest.fixture
def micro_projections(micro_geometry, micro_sphere):
    return project_volume(micro_sphere, micro_geometry, 16)


@pytest.fixture
def tiny_model(micro_geometry, rng):
    model = FieldModel.create(_config(), micro_geometry, 16)
    # Lift the tables out of their near-zero init so every layer carries signal
    for table in model.encoder.tables:
        table[:] = rng.normal(scale=0.5, size=table.shape)
    for b in model.mlp.biases:
        b[:] = rng.normal(scale=0.1, size=b.shape)
    return model


def _with_targets(batch, targets):
    return RayBatch(batch.origins, batch.directions, batch.t_near, batch.t_far, np.asarray(targets), batch.ray_ids)


class TestLearningRate:
    def test_end_points(self):
        config = TrainConfig(iterations=3000)
        assert lr_at(0, config) == pytest.approx(1e-3, abs=1e-15)
        assert lr_at(2999, config) == pytest.approx(1e-4, abs=1e-9)

    def test_exponential_midpoint_is_geometric_mean(self):
        config = TrainConfig(iterations=3001)
        assert lr_at(1500, config) == pytest.approx(np.sqrt(1e-3 * 1e-4), rel=1e-12)
        values = [lr_at(i, config) for i in range(0, 3001, 100)]
        assert all(b <= a for a, b in zip(values, values[1:]))

    def test_step_schedule(self):
        config = TrainConfig(iterations=301, lr_schedule='step')
        assert lr_at(0, config) == pytest.approx(1e-3)
        assert lr_at(150, config) == pytest.approx(np.sqrt(1e-3 * 1e-4))
        assert lr_at(300, config) == pytest.approx(1e-4)
        assert len({lr_at(i, config) for i in range(301)}) == 3

    def test_single_iteration_uses_start_rate(self):
        assert lr_at(0, TrainConfig(iterations=1)) == 1e-3


class TestTrainConfig:
    @pytest.mark.parametrize('overrides', [{'iterations': 0}, {'lr_start': 1e-5}, {'lr_schedule': 'cosine'},
                                           {'encoder': 'grid'}, {'holdout_fraction': 1.0}, {'workers': 0},
                                           {'precision': 'float16'}, {'samples_per_ray': 1}])
    def test_rejects(self, overrides):
        with pytest.raises(ConfigError):
            TrainConfig(**overrides)

    def test_strict_forces_one_worker(self):
        assert TrainConfig(workers=4, strict=True).effective_workers == 1
        assert TrainConfig(workers=4).effective_workers == 4


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        p = np.zeros(5)
        g = np.array([1.0, -2.0, 3.0, -4.0, 0.5])
        opt = AdamOptimizer([p])
        opt.step([p], [g], 0.1)
        np.testing.assert_allclose(p, -0.1 * np.sign(g), rtol=1e-6)
        assert opt.step_count == 1

    def test_mismatched_lists(self):
        p = np.zeros(3)
        with pytest.raises(ShapeMismatchError):
            AdamOptimizer([p]).step([p], [], 0.1)

    def test_zero_gradient_from_fresh_state_changes_nothing(self, rng):
        for case in range(100):
            params = [rng.normal(size=tuple(rng.integers(1, 6, size=2))) for _ in range(3)]
            before = [p.copy() for p in params]
            grads = [np.zeros_like(p) for p in params]
            lr = float(rng.uniform(1e-4, 1.0))
            if case % 10 == 0:
                with ThreadPoolExecutor(max_workers=2) as pool:
                    AdamOptimizer(params).step(params, grads, lr, pool)
            else:
                AdamOptimizer(params).step(params, grads, lr)
            for p, b in zip(params, before):
                np.testing.assert_array_equal(p, b)


class TestFieldModel:
    def test_parameter_names_line_up(self, micro_geometry):
        model = FieldModel.create(_config(), micro_geometry, 16)
        assert len(model.param_names()) == len(model.params) == 2 + 8
        assert model.param_names()[:3] == ['table_00', 'table_01', 'mlp_w0']

    def test_frequency_model_trains_only_the_mlp(self, micro_geometry):
        model = FieldModel.create(_config(encoder='frequency', frequency_bands=3), micro_geometry, 16)
        assert model.mlp.spec.input_dim == 18
        assert len(model.params) == 8

    def test_end_to_end_gradient_on_two_points(self, tiny_model, rng):
        points = rng.uniform(-30.0, 30.0, size=(2, 3))
        upstream = np.array([0.7, -1.3])

        def loss():
            mu, _ = tiny_model.forward(points)
            return float(upstream @ mu)

        _, cache = tiny_model.forward(points)
        encoder_grads, mlp_grads = tiny_model.backward(cache, upstream)
        h = 1e-6
        for param, grad in zip(tiny_model.params, encoder_grads + mlp_grads):
            flat, gflat = param.reshape(-1), grad.reshape(-1)
            candidates = np.flatnonzero(gflat) if np.any(gflat) else np.arange(flat.size)
            for k in candidates[:3]:
                saved = flat[k]
                flat[k] = saved + h
                plus = loss()
                flat[k] = saved - h
                minus = loss()
                flat[k] = saved
                assert gflat[k] == pytest.approx((plus - minus) / (2 * h), rel=1e-5, abs=1e-9)


class TestExtractVolume:
    def test_zeroed_mlp_gives_constant_half(self, micro_geometry):
        model = FieldModel.create(_config(), micro_geometry, 16)
        model.mlp.weights = [np.zeros_like(w) for w in model.mlp.weights]
        model.mlp.biases = [np.zeros_like(b) for b in model.mlp.biases]
        vol = extract_volume(model, (4, 5, 6))
        assert vol.dims == (4, 5, 6)
        np.testing.assert_array_equal(vol.data, 0.5)

    def test_one_evaluation_per_voxel_centre(self, micro_geometry):
        model = FieldModel.create(_config(), micro_geometry, 16)
        seen = []
        forward = model.forward

        def spy(points):
            seen.append(np.asarray(points).reshape(-1, 3))
            return forward(points)

        model.forward = spy
        extract_volume(model, (2, 2, 2))
        points = np.concatenate(seen)
        assert points.shape == (8, 3)
        np.testing.assert_allclose(np.abs(points), 16.0)


class TestLossAndGrads:
    def test_own_render_has_zero_loss(self, tiny_model, micro_projections):
        batch = build_ray_pool(micro_projections).subset(slice(0, 40))
        intensity, _, _ = render_rays(tiny_model, batch, 8)
        loss, grads = loss_and_grads(_with_targets(batch, intensity), tiny_model, 8)
        assert loss == 0.0
        for g in grads:
            assert not np.any(g)

    def test_single_ray_by_hand(self, tiny_model, micro_projections):
        batch = build_ray_pool(micro_projections).subset(np.array([7]))
        sampled = stratified_sample(batch.origins, batch.directions, batch.t_near, batch.t_far, 8)
        mu = tiny_model.query(sampled.positions.reshape(-1, 3))
        depth = float(np.sum(mu * sampled.deltas[0] / micro_projections.geometry.mu_unit_mm))
        expected = (float(batch.targets[0]) - np.exp(-depth)) ** 2
        loss, _ = loss_and_grads(batch, tiny_model, 8)
        assert loss == pytest.approx(expected, rel=1e-10)

    def test_matches_finite_differences(self, tiny_model, micro_projections, rng):
        batch = build_ray_pool(micro_projections).subset(slice(100, 120))
        batch = _with_targets(batch, rng.uniform(0.3, 0.9, 20))
        offsets = rng.random((20, 8))
        loss, grads = loss_and_grads(batch, tiny_model, 8, offsets=offsets)
        params = tiny_model.params
        picks = [(0, int(np.flatnonzero(grads[0].reshape(-1))[0])),
                 (1, int(np.flatnonzero(grads[1].reshape(-1))[-1])),
                 (2, 3), (5, 1), (len(params) - 1, 0)]
        h = 1e-6
        for which, k in picks:
            flat = params[which].reshape(-1)
            saved = flat[k]
            flat[k] = saved + h
            plus, _ = loss_and_grads(batch, tiny_model, 8, offsets=offsets)
            flat[k] = saved - h
            minus, _ = loss_and_grads(batch, tiny_model, 8, offsets=offsets)
            flat[k] = saved
            assert grads[which].reshape(-1)[k] == pytest.approx((plus - minus) / (2 * h), rel=1e-4, abs=1e-9)

    def test_thread_count_independent(self, tiny_model, micro_projections, rng):
        batch = build_ray_pool(micro_projections).subset(slice(0, 600))
        offsets = rng.random((600, 8))
        serial_loss, serial = loss_and_grads(batch, tiny_model, 8, offsets=offsets)
        with ThreadPoolExecutor(max_workers=3) as pool:
            threaded_loss, threaded = loss_and_grads(batch, tiny_model, 8, offsets=offsets, executor=pool)
        assert serial_loss == threaded_loss
        for a, b in zip(serial, threaded):
            np.testing.assert_array_equal(a, b)

    def test_non_finite_target_names_the_ray(self, tiny_model, micro_projections):
        batch = build_ray_pool(micro_projections).subset(slice(0, 10))
        targets = batch.targets.copy()
        targets[3] = np.nan
        with pytest.raises(NonFiniteLossError) as info:
            loss_and_grads(_with_targets(batch, targets), tiny_model, 8)
        assert info.value.ray_index == 3

    def test_empty_batch(self, tiny_model, micro_projections):
        loss, grads = loss_and_grads(build_ray_pool(micro_projections).subset(slice(0, 0)), tiny_model, 8)
        assert loss == 0.0 and len(grads) == len(tiny_model.params)


class TestGradientCheck:
    """Two rays, eight samples, float64, central differences with h = 1e-3."""
    H = 1e-3
    TOLERANCE = 1e-5

    @staticmethod
    def _relative_error(a, b):
        return abs(a - b) / max(abs(a), abs(b))

    @pytest.fixture
    def two_rays(self, tiny_model, micro_projections, rng):
        pool = build_ray_pool(micro_projections)
        longest = np.argsort(pool.t_near - pool.t_far, kind='stable')[:2]
        batch = pool.subset(longest)
        offsets = rng.random((2, 8))
        # Residual of half the rendered intensity on both rays
        intensity, _, _ = render_rays(tiny_model, batch, 8, offsets)
        return _with_targets(batch, 0.5 * intensity), offsets

    def test_every_parameter_array(self, tiny_model, two_rays):
        batch, offsets = two_rays
        sampled = stratified_sample(batch.origins, batch.directions, batch.t_near, batch.t_far, 8,
                                    jitter=True, offsets=offsets)
        points = sampled.positions.reshape(-1, 3)

        def relu_pattern():
            _, cache = tiny_model.forward(points)
            return [z > 0 for z in cache.mlp.preacts[:-1]]

        _, grads = loss_and_grads(batch, tiny_model, 8, offsets=offsets)
        base_pattern = relu_pattern()
        for name, param, grad in zip(tiny_model.param_names(), tiny_model.params, grads):
            flat, gflat = param.reshape(-1), grad.reshape(-1)
            checked = 0
            for k in np.argsort(-np.abs(gflat), kind='stable'):
                if checked == 3 or gflat[k] == 0:
                    break
                saved = flat[k]
                flat[k] = saved + self.H
                plus, _ = loss_and_grads(batch, tiny_model, 8, offsets=offsets)
                plus_pattern = relu_pattern()
                flat[k] = saved - self.H
                minus, _ = loss_and_grads(batch, tiny_model, 8, offsets=offsets)
                minus_pattern = relu_pattern()
                flat[k] = saved
                # a step across a ReLU kink has no central-difference limit
                if not all(np.array_equal(a, b) and np.array_equal(a, c)
                           for a, b, c in zip(base_pattern, plus_pattern, minus_pattern)):
                    continue
                numeric = (plus - minus) / (2 * self.H)
                assert self._relative_error(gflat[k], numeric) < self.TOLERANCE, f"{name}[{k}]"
                checked += 1
            assert checked > 0, name

    def test_attenuation_path(self, rng):
        mu = rng.uniform(0.1, 1.0, size=(2, 8))
        deltas = rng.uniform(0.05, 0.3, size=(2, 8))
        intensity, cache = synthesize_intensity(mu, deltas)
        targets = 0.5 * intensity

        def loss(m):
            i, _ = synthesize_intensity(m, deltas)
            return float(np.sum((i - targets) ** 2))

        d_mu = synthesize_backward(cache, 2.0 * (intensity - targets))
        for r in range(2):
            for s in range(8):
                plus, minus = mu.copy(), mu.copy()
                plus[r, s] += self.H
                minus[r, s] -= self.H
                numeric = (loss(plus) - loss(minus)) / (2 * self.H)
                assert self._relative_error(d_mu[r, s], numeric) < self.TOLERANCE


class TestRayPool:
    def test_only_hit_rays_with_valid_targets(self, micro_projections):
        pool = build_ray_pool(micro_projections)
        geom = micro_projections.geometry
        pixels = geom.detector_rows * geom.detector_cols
        assert 0 < len(pool) <= geom.num_views * pixels
        assert np.unique(pool.ray_ids).size == len(pool)
        assert np.all((pool.targets > 0) & (pool.targets <= 1.0))
        assert np.all(pool.t_far > pool.t_near)

    def test_holdout_split_is_disjoint(self, micro_projections):
        pool = build_ray_pool(micro_projections)
        train_part, holdout = split_holdout(pool, 0.25, seed=1)
        assert len(train_part) + len(holdout) == len(pool)
        assert not set(train_part.ray_ids) & set(holdout.ray_ids)
        assert split_holdout(pool, 0.0, seed=1)[1] is None

    def test_epoch_order(self):
        a = epoch_order(50, seed=2, epoch=0)
        np.testing.assert_array_equal(np.sort(a), np.arange(50))
        np.testing.assert_array_equal(a, epoch_order(50, seed=2, epoch=0))
        assert not np.array_equal(a, epoch_order(50, seed=2, epoch=1))


class TestTrain:
    def test_single_iteration(self, micro_projections):
        result = train(micro_projections, _config(iterations=1), recon_dims=(16, 16, 16))
        assert result.losses.shape == (1,) and result.final_loss == result.losses[0] > 0
        assert result.checkpoint.iteration == 1 and result.checkpoint.adam_step == 1
        assert [row['iter'] for row in result.trace] == [1]

    def test_loss_decreases_and_trace_is_written(self, micro_projections, micro_sphere, tmp_path):
        store = TraceStore(str(tmp_path / 'trace.csv'), TRAIN_TRACE_COLUMNS)
        config = _config(iterations=40, batch_rays=256, samples_per_ray=16, lr_start=2e-2, lr_end=2e-3,
                         eval_every=10, holdout_fraction=0.1, mlp_width=16, precision='float32')
        result = train(micro_projections, config, ground_truth=micro_sphere, trace_store=store,
                       checkpoint_path=str(tmp_path / 'model.nafckpt'))
        assert result.losses[-5:].mean() < result.losses[:5].mean()
        assert [row['iter'] for row in result.trace] == [10, 20, 30, 40]
        assert all(row['psnr'] is not None and row['holdout_loss'] is not None for row in result.trace)
        rows = store.rows()
        assert [r['iter'] for r in rows] == ['10', '20', '30', '40']
        assert load_checkpoint(str(tmp_path / 'model.nafckpt')).iteration == 40

    def test_same_seed_same_run_whatever_the_worker_count(self, micro_projections):
        config = _config(iterations=4, batch_rays=600)
        one = train(micro_projections, config)
        again = train(micro_projections, config)
        threaded = train(micro_projections, _config(iterations=4, batch_rays=600, workers=3))
        np.testing.assert_array_equal(one.losses, again.losses)
        np.testing.assert_array_equal(one.losses, threaded.losses)
        for a, b in zip(one.model.params, threaded.model.params):
            np.testing.assert_array_equal(a, b)

    def test_divergence_stops_training(self, micro_projections, monkeypatch):
        monkeypatch.setattr(trainer, 'DIVERGENCE_LOSS', -1.0)
        with pytest.raises(TrainingDivergedError, match="iteration 0"):
            train(micro_projections, _config(iterations=3))

    def test_zero_steps_returns_the_initialized_model(self, micro_projections):
        config = _config(iterations=5)
        result = train(micro_projections, config, recon_dims=(16, 16, 16), steps=0)
        assert result.losses.shape == (0,) and result.trace == []
        assert result.checkpoint.iteration == 0 and result.checkpoint.adam_step == 0
        assert np.isnan(result.final_loss)
        fresh = FieldModel.create(config, micro_projections.geometry, 16)
        for a, b in zip(result.model.params, fresh.params):
            np.testing.assert_array_equal(a, b)

    def test_partial_run_is_a_prefix_of_the_full_run(self, micro_projections):
        config = _config(iterations=4)
        full = train(micro_projections, config)
        partial = train(micro_projections, config, steps=2)
        np.testing.assert_array_equal(partial.losses, full.losses[:2])
        assert partial.checkpoint.iteration == 2 and [row['iter'] for row in partial.trace] == [2]

    @pytest.mark.parametrize('steps', [-1, 5])
    def test_steps_outside_the_schedule(self, micro_projections, steps):
        with pytest.raises(ConfigError, match="steps must be in"):
            train(micro_projections, _config(iterations=4), steps=steps)

    def test_strict_runs_are_bitwise_identical(self, micro_projections):
        config = _config(iterations=3, batch_rays=600, workers=4, strict=True, precision='float32')
        first = train(micro_projections, config)
        second = train(micro_projections, config)
        assert first.checkpoint.arrays.keys() == second.checkpoint.arrays.keys()
        for name, array in first.checkpoint.arrays.items():
            np.testing.assert_array_equal(array, second.checkpoint.arrays[name])
        np.testing.assert_array_equal(extract_volume(first.model, (16, 16, 16)).data,
                                      extract_volume(second.model, (16, 16, 16)).data)


class TestCheckpoint:
    def test_restore_reproduces_model_and_optimizer(self, micro_projections, tmp_path):
        config = _config(iterations=3)
        result = train(micro_projections, config)
        path = str(tmp_path / 'ckpt.nafckpt')
        save_checkpoint(make_checkpoint(result.model, result.optimizer, 3, config), path)
        model, optimizer = restore_model(load_checkpoint(path))
        points = micro_projections.geometry.box[1] * np.linspace(-0.9, 0.9, 30)[:, None]
        np.testing.assert_array_equal(model.query(points), result.model.query(points))
        assert optimizer.step_count == result.optimizer.step_count == 3
        for a, b in zip(optimizer.v, result.optimizer.v):
            np.testing.assert_array_equal(a, b)

    def test_restore_frequency_model(self, micro_geometry):
        config = _config(encoder='frequency', frequency_bands=2, hash=None)
        model = FieldModel.create(config, micro_geometry, 16)
        restored, _ = restore_model(make_checkpoint(model, AdamOptimizer(model.params), 0, config))
        points = np.zeros((4, 3))
        np.testing.assert_array_equal(restored.query(points), model.query(points))


@pytest.fixture(scope='module')
def desk_sphere():
    geom = ScanGeometry.desk_default(num_views=20)
    truth = make_phantom('uniform_sphere', (32, 32, 32), extent=geom.volume_extent)
    proj = project_volume(truth, geom, 64, threads=DESK_WORKERS)
    config = TrainConfig(iterations=1500, eval_every=1500, holdout_fraction=0.1, workers=DESK_WORKERS)
    return truth, proj, config, train(proj, config, ground_truth=truth)


@pytest.mark.slow
class TestDeskSphere:
    def test_loss_falls_a_hundredfold(self, desk_sphere):
        _, _, _, result = desk_sphere
        assert result.losses[9] >= 100.0 * result.losses[-10:].mean()

    def test_extracted_volume_matches_truth(self, desk_sphere):
        truth, _, _, result = desk_sphere
        recon = extract_volume(result.model, truth.dims, truth.extent)
        assert psnr(normalize_minmax(recon), normalize_minmax(truth)) > 25.0

    def test_holdout_loss_falls(self, desk_sphere):
        _, proj, config, result = desk_sphere
        _, holdout = split_holdout(build_ray_pool(proj), config.holdout_fraction, config.seed)
        early = train(proj, config, steps=10)
        early_loss = batch_loss(early.model, holdout, config.samples_per_ray)
        assert result.trace[-1]['holdout_loss'] < early_loss

    def test_reprojection_stays_close_to_training_loss(self, desk_sphere):
        truth, proj, config, result = desk_sphere
        recon = extract_volume(result.model, truth.dims, truth.extent)
        measured = build_ray_pool(proj)
        reprojected = build_ray_pool(project_volume(recon, proj.geometry, 64, threads=DESK_WORKERS))
        per_ray = float(np.mean((reprojected.targets - measured.targets) ** 2))
        assert per_ray <= 2.0 * result.losses[-10:].mean() / config.batch_rays


@pytest.mark.slow
def test_default_step_cost_fits_the_desk_budget():
    cfg = load_experiment_config(DEFAULT_CONFIG)
    runner = ExperimentRunner(cfg)
    truth = runner.build_phantom()
    proj = project_volume(truth, cfg.geometry, cfg.projector.samples_per_ray, threads=DESK_WORKERS)
    config = replace(cfg.train, workers=DESK_WORKERS)
    timings = []
    for steps in (1, 6):
        started = time.perf_counter()
        train(proj, config, recon_dims=truth.dims, steps=steps)
        timings.append(time.perf_counter() - started)
    per_step = (timings[1] - timings[0]) / 5
    assert per_step * config.iterations <= 1200.0
