import csv
import json
import os
from dataclasses import replace

import numpy as np
import pytest
from PIL import Image

from conftest import MICRO_CONFIG
from errors import GeometryError, ShapeMismatchError, UsageError
from phantom import Volume, add_noise, project_volume
from pipeline import ExperimentRunner
from settings import load_experiment_config, parse_experiment_config
from trainer import extract_volume, train
from volume_io import load_checkpoint, load_projections, load_volume, save_volume


@pytest.fixture
def micro_config():
    return parse_experiment_config(MICRO_CONFIG, source='micro.yaml')


@pytest.fixture
def runner(micro_config):
    return ExperimentRunner(micro_config)


@pytest.fixture
def scan(runner, tmp_path):
    return runner.simulate(str(tmp_path / 'scan'))


def _read_csv(path):
    with open(path, newline='') as f:
        return list(csv.DictReader(f))


class TestSimulate:
    def test_writes_truth_projections_and_manifest(self, scan, micro_config):
        truth = load_volume(scan.truth)
        assert truth.dims == (16, 16, 16)
        noisy = load_projections(scan.noisy)
        assert noisy.images.shape == (6, 24, 24)
        assert noisy.noise_fraction == 0.03 and noisy.seed == 7
        manifest = json.loads(open(scan.manifest).read())
        assert manifest['seeds'] == {'experiment': 7, 'noise': 7}
        assert manifest['geometry_hash'] == micro_config.geometry.content_hash()
        assert manifest['files']['noisy'] == 'projections_noisy.raw'

    def test_zero_noise_payloads_match(self, runner, tmp_path):
        paths = runner.simulate(str(tmp_path / 'clean'), noise_fraction=0.0)
        with open(paths.clean, 'rb') as a, open(paths.noisy, 'rb') as b:
            assert a.read() == b.read()

    def test_rerun_is_byte_identical(self, runner, tmp_path):
        first = runner.simulate(str(tmp_path / 'a'))
        second = runner.simulate(str(tmp_path / 'b'))
        names = sorted(os.listdir(first.directory))
        assert names == sorted(os.listdir(second.directory))
        for name in names:
            with open(os.path.join(first.directory, name), 'rb') as a, \
                    open(os.path.join(second.directory, name), 'rb') as b:
                assert a.read() == b.read(), name

    def test_raw_phantom_is_resampled_and_normalized(self, tmp_path):
        source = str(tmp_path / 'imported.raw')
        data = np.linspace(0.0, 3.0, 512).reshape(8, 8, 8)
        save_volume(Volume(data=data, extent=(10.0, 10.0, 10.0)), source)
        text = MICRO_CONFIG.replace('kind: uniform_sphere', f"kind: raw\n  path: {source}")
        vol = ExperimentRunner(parse_experiment_config(text)).build_phantom()
        assert vol.dims == (16, 16, 16) and vol.extent == (64.0, 64.0, 64.0)
        assert vol.data.min() == 0.0 and vol.data.max() == pytest.approx(1.0)


class TestReconstruct:
    def test_fdk_has_no_checkpoint(self, runner, scan, tmp_path):
        out = runner.reconstruct(scan.noisy, 'fdk', str(tmp_path / 'fdk'))
        assert out.checkpoint is None and out.trace is None
        assert load_volume(out.volume).dims == (16, 16, 16)
        meta = json.loads(open(out.metadata).read())
        assert meta['method'] == 'fdk' and meta['checkpoint_version'] is None
        assert meta['fdk_config'] == {'filter': 'hann', 'padding': 2}
        assert sorted(os.listdir(tmp_path / 'fdk')) == ['recon_fdk.meta.json', 'recon_fdk.raw', 'recon_fdk.raw.json']

    def test_field_method_writes_checkpoint_and_trace(self, runner, scan, tmp_path):
        out = runner.reconstruct(scan.noisy, 'naf', str(tmp_path / 'naf'), truth_path=scan.truth)
        assert load_checkpoint(out.checkpoint).iteration == 3
        rows = _read_csv(out.trace)
        assert [r['iter'] for r in rows] == ['2', '3']
        assert rows[0]['psnr'] != ''
        meta = json.loads(open(out.metadata).read())
        assert meta['iterations'] == 3 and meta['final_loss'] > 0
        assert 'trace' not in meta

    def test_frequency_ablation(self, runner, scan, tmp_path):
        out = runner.reconstruct(scan.noisy, 'naf-frequency', str(tmp_path / 'freq'))
        ckpt = load_checkpoint(out.checkpoint)
        assert ckpt.encoder['kind'] == 'frequency'
        assert not any(name.startswith('table_') for name in ckpt.arrays)

    @pytest.mark.parametrize('method', ['asd-pocs', 'art'])
    def test_unknown_and_reserved_methods(self, runner, scan, tmp_path, method):
        with pytest.raises(UsageError):
            runner.reconstruct(scan.noisy, method, str(tmp_path / 'x'))

    def test_geometry_must_match_config(self, micro_config, scan, tmp_path):
        other = ExperimentRunner(micro_config.with_views(4))
        with pytest.raises(GeometryError, match="num_views"):
            other.reconstruct(scan.noisy, 'fdk', str(tmp_path / 'x'))


class TestEvaluate:
    def test_truth_against_itself(self, runner, scan, tmp_path):
        report = runner.evaluate(scan.truth, scan.truth, str(tmp_path / 'eval'))
        assert report.summary_line() == "PSNR=99.00dB SSIM=1.0000"
        assert (tmp_path / 'eval' / 'report_truth.json').exists()
        assert len(_read_csv(tmp_path / 'eval' / 'slices_truth.csv')) == 16

    def test_grid_mismatch_needs_resample(self, runner, scan, tmp_path):
        coarse = str(tmp_path / 'coarse.raw')
        save_volume(Volume(data=np.ones((8, 8, 8)), extent=(64.0,) * 3), coarse)
        with pytest.raises(ShapeMismatchError, match="--resample"):
            runner.evaluate(coarse, scan.truth)
        report = runner.evaluate(coarse, scan.truth, resample=True, label='coarse')
        assert report.psnr_db < 99.0


class TestSweep:
    def test_grid_of_cells(self, runner, tmp_path):
        rows = runner.sweep_views(str(tmp_path / 'sweep'))
        assert [(r['views'], r['method']) for r in rows] == [(4, 'fdk'), (4, 'sart'), (6, 'fdk'), (6, 'sart')]
        assert all(r['status'] == 'ok' and r['psnr'] > 0 for r in rows)
        written = _read_csv(tmp_path / 'sweep' / 'sweep.csv')
        assert len(written) == 4 and all(float(r['wall_ms']) >= 0 for r in written)
        manifest = json.loads((tmp_path / 'sweep' / 'manifest.json').read_text())
        assert manifest['scans']['4'] == ['projections_clean.raw', 'projections_noisy.raw', 'truth.raw']
        assert load_projections(str(tmp_path / 'sweep' / 'views_004' / 'scan' / 'projections_noisy.raw')) \
            .geometry.num_views == 4

    def test_parallel_matches_serial(self, runner, tmp_path):
        serial = runner.sweep_views(str(tmp_path / 's'), view_counts=[4], methods=['fdk', 'sart'])
        parallel = runner.sweep_views(str(tmp_path / 'p'), view_counts=[4], methods=['fdk', 'sart'], parallel=True)
        assert [(r['psnr'], r['ssim']) for r in serial] == [(r['psnr'], r['ssim']) for r in parallel]

    def test_failing_cell_does_not_stop_the_sweep(self, runner, tmp_path):
        rows = runner.sweep_views(str(tmp_path / 'sweep'), view_counts=[1, 4], methods=['fdk'])
        assert rows[0]['status'] == 'error' and 'GeometryError' in rows[0]['error']
        assert rows[1]['status'] == 'ok'

    def test_unknown_method_rejected_up_front(self, runner, tmp_path):
        with pytest.raises(UsageError):
            runner.sweep_views(str(tmp_path / 'sweep'), methods=['fdk', 'art'])
        assert not (tmp_path / 'sweep').exists()


class TestExportSlices:
    def test_one_pgm_per_slice(self, runner, scan, tmp_path):
        paths = runner.export_slices(scan.truth, 2, str(tmp_path / 'png'))
        assert len(paths) == 16
        assert os.path.basename(paths[0]) == 'slice_z_00.pgm' and os.path.basename(paths[-1]) == 'slice_z_15.pgm'
        with Image.open(paths[8]) as img:
            assert img.mode == 'L' and img.size == (16, 16)
            assert np.asarray(img).max() == 255

    def test_constant_volume_is_mid_gray(self, runner, tmp_path):
        path = str(tmp_path / 'flat.raw')
        save_volume(Volume(data=np.full((4, 4, 4), 0.7), extent=(1.0,) * 3), path)
        for p in runner.export_slices(path, 0, str(tmp_path / 'out')):
            with Image.open(p) as img:
                assert np.all(np.asarray(img) == 128)

    def test_ramp_stays_ordered(self, runner, tmp_path):
        path = str(tmp_path / 'ramp.raw')
        ramp = np.broadcast_to(np.arange(12, dtype=np.float32), (4, 5, 12))
        save_volume(Volume(data=ramp, extent=(1.0,) * 3), path)
        levels = []
        for p in runner.export_slices(path, 2, str(tmp_path / 'out')):
            with Image.open(p) as img:
                pixels = np.asarray(img)
                assert pixels.shape == (4, 5) and np.all(pixels == pixels[0, 0])
                levels.append(int(pixels[0, 0]))
        assert levels[0] == 0 and levels[-1] == 255
        assert levels == sorted(levels)

    def test_bad_axis(self, runner, scan, tmp_path):
        with pytest.raises(UsageError):
            runner.export_slices(scan.truth, 3, str(tmp_path / 'out'))


DEFAULT_CONFIG = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'config.yaml')
DESK_THREADS = 8


@pytest.fixture(scope='module')
def desk_config():
    return load_experiment_config(DEFAULT_CONFIG).with_overrides(threads=DESK_THREADS)


@pytest.fixture(scope='module')
def desk_sweep(desk_config, tmp_path_factory):
    out = tmp_path_factory.mktemp('desk') / 'sweep'
    rows = ExperimentRunner(desk_config).sweep_views(str(out))
    return out, {(r['views'], r['method']): r for r in rows}


def _slice_psnr(path):
    return np.array([float(r['psnr']) for r in _read_csv(path)])


@pytest.mark.slow
class TestDeskBenchmark:
    def test_nine_cells(self, desk_sweep):
        _, cells = desk_sweep
        assert sorted(cells) == [(v, m) for v in (10, 25, 50) for m in ('fdk', 'naf', 'sart')]
        assert all(r['status'] == 'ok' for r in cells.values())

    def test_field_improves_with_views(self, desk_sweep):
        _, cells = desk_sweep
        scores = [cells[(v, 'naf')]['psnr'] for v in (10, 25, 50)]
        assert all(b >= a - 0.5 for a, b in zip(scores, scores[1:]))

    def test_fifty_view_ordering(self, desk_sweep):
        _, cells = desk_sweep
        naf, sart, fdk = (cells[(50, m)] for m in ('naf', 'sart', 'fdk'))
        assert naf['psnr'] >= 28.0
        assert naf['psnr'] >= fdk['psnr'] + 3.0
        assert naf['psnr'] >= sart['psnr'] - 0.5
        assert naf['ssim'] > fdk['ssim']

    def test_field_wins_most_central_slices(self, desk_sweep):
        out, _ = desk_sweep
        naf = _slice_psnr(out / 'views_050' / 'naf' / 'slices_naf_50.csv')
        sart = _slice_psnr(out / 'views_050' / 'sart' / 'slices_sart_50.csv')
        quarter = naf.size // 4
        central = slice(quarter, naf.size - quarter)
        assert np.mean(naf[central] >= sart[central]) >= 0.8


@pytest.fixture(scope='module')
def desk_scan(desk_config):
    runner = ExperimentRunner(desk_config)
    truth = runner.build_phantom()
    clean = project_volume(truth, desk_config.geometry, desk_config.projector.samples_per_ray, threads=DESK_THREADS)
    return truth, add_noise(clean, desk_config.noise.fraction, desk_config.seed)


@pytest.mark.slow
def test_hash_encoding_outpaces_frequency_encoding(desk_config, desk_scan):
    truth, noisy = desk_scan
    budget = dict(iterations=300, eval_every=15)
    hashed = train(noisy, replace(desk_config.train_config_for('naf'), **budget), ground_truth=truth)
    frequency = train(noisy, replace(desk_config.train_config_for('naf-frequency'), **budget), ground_truth=truth)
    target = frequency.trace[-1]['psnr']
    assert hashed.trace[-1]['psnr'] > target
    reached = next(row['iter'] for row in hashed.trace if row['psnr'] >= target)
    assert reached <= 0.6 * budget['iterations']


@pytest.mark.slow
def test_strict_desk_runs_are_bitwise_identical(desk_config, desk_scan):
    truth, noisy = desk_scan
    config = desk_config.with_overrides(strict=True).train
    first = train(noisy, config, recon_dims=truth.dims, steps=50)
    second = train(noisy, config, recon_dims=truth.dims, steps=50)
    for name, array in first.checkpoint.arrays.items():
        np.testing.assert_array_equal(array, second.checkpoint.arrays[name])
    np.testing.assert_array_equal(extract_volume(first.model, truth.dims).data,
                                  extract_volume(second.model, truth.dims).data)
