# THEORY:
# The experiment runner binds the modules into reproducible runs. It
# owns one validated ExperimentConfig and exposes the five workflows the CLI
# offers: simulate a scan from a phantom, reconstruct with any registered
# method, score a reconstruction against ground truth, sweep the number of
# views across methods, and export slices for visual inspection.
#
# Every workflow writes into a directory it is given and leaves a JSON
# manifest or metadata file beside its payloads (config echo, seeds, format
# versions) so the run can be repeated bit-identically in strict mode.

# CAVEATS & WARNINGS:
# - Manifests carry no timestamps; wall-clock numbers live in run metadata and logs.
# - Sweep cells share one simulated scan per view count.
# - Parallel sweeps run whole cells on threads; each cell still honours its own worker count.

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from PIL import Image

from errors import GeometryError, ShapeMismatchError, UsageError
from methods import FieldReconstructor, MethodRouter, ReconOutcome, ReconRequest
from metrics import MetricReport, evaluate_volumes, resample_volume
from phantom import PhantomKind, ProjectionSet, Volume, add_noise, make_phantom, normalize_minmax, project_volume
from recon_logger import recon_logger
from settings import ExperimentConfig
from trace_store import SWEEP_COLUMNS, TRAIN_TRACE_COLUMNS, TraceStore
from volume_io import (CHECKPOINT_VERSION, FORMAT_VERSION, list_artifacts, load_projections, load_volume,
                       load_volume_meta, save_projections, save_volume, write_json)

TRUTH_FILE = 'truth.raw'
CLEAN_FILE = 'projections_clean.raw'
NOISY_FILE = 'projections_noisy.raw'
MANIFEST_FILE = 'manifest.json'
AXIS_NAMES = ('x', 'y', 'z')
MID_GRAY = 128


@dataclass
class SimulationArtifacts:
    directory: str
    truth: str
    clean: str
    noisy: str
    manifest: str


@dataclass
class ReconArtifacts:
    volume: str
    metadata: str
    checkpoint: Optional[str] = None
    trace: Optional[str] = None


def _prepare_dir(path: str) -> str:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot create output directory {path}: {e.strerror}")
    if not os.access(path, os.W_OK):
        raise UsageError(f"output directory {path} is not writable")
    return path


class ExperimentRunner:
    def __init__(self, config: ExperimentConfig, logger=recon_logger, router: Optional[MethodRouter] = None):
        self.config = config
        self.logger = logger
        self.router = router or MethodRouter()

    @property
    def dims(self):
        return self.config.phantom.dims

    def build_phantom(self) -> Volume:
        p = self.config.phantom
        extent = self.config.geometry.volume_extent
        if p.kind == 'raw':
            vol = load_volume(p.path)
            if vol.dims != tuple(p.dims):
                logging.info(f"Resampling imported volume {vol.dims} -> {tuple(p.dims)}")
                vol = resample_volume(vol, p.dims)
            return normalize_minmax(Volume(data=vol.data, extent=extent))
        return make_phantom(PhantomKind(p.kind), p.dims, extent=extent, mu=p.mu, radius_fraction=p.radius_fraction)

    def simulate(self, out_dir: str, noise_fraction: Optional[float] = None) -> SimulationArtifacts:
        cfg = self.config
        _prepare_dir(out_dir)
        fraction = cfg.noise.fraction if noise_fraction is None else noise_fraction
        started = time.perf_counter()

        truth = self.build_phantom()
        clean = project_volume(truth, cfg.geometry, cfg.projector.samples_per_ray, threads=cfg.projector.threads)
        clean = replace(clean, seed=cfg.seed)
        noisy = add_noise(clean, fraction, cfg.seed)

        paths = SimulationArtifacts(directory=out_dir, truth=os.path.join(out_dir, TRUTH_FILE),
                                    clean=os.path.join(out_dir, CLEAN_FILE), noisy=os.path.join(out_dir, NOISY_FILE),
                                    manifest=os.path.join(out_dir, MANIFEST_FILE))
        save_volume(truth, paths.truth, meta={'phantom': cfg.phantom.kind})
        save_projections(clean, paths.clean)
        save_projections(noisy, paths.noisy)
        write_json(paths.manifest, {
            'format_version': FORMAT_VERSION,
            'config': cfg.to_dict(),
            'seeds': {'experiment': cfg.seed, 'noise': cfg.seed},
            'noise_fraction': fraction,
            'files': {'truth': TRUTH_FILE, 'clean': CLEAN_FILE, 'noisy': NOISY_FILE},
            'geometry_hash': cfg.geometry.content_hash(),
        })
        self.logger.log_stage('simulate', f"{cfg.phantom.kind} {tuple(cfg.phantom.dims)} views={cfg.geometry.num_views} "
                                          f"noise={fraction:g} -> {out_dir}", (time.perf_counter() - started) * 1000.0)
        return paths

    def _check_geometry(self, proj: ProjectionSet):
        if proj.geometry != self.config.geometry:
            ours, theirs = self.config.geometry.to_dict(), proj.geometry.to_dict()
            fields = [k for k in ours if ours[k] != theirs[k]]
            raise GeometryError(f"projection geometry differs from the configuration in {fields}")

    def reconstruct(self, projections_path: str, method: str, out_dir: str,
                    truth_path: Optional[str] = None) -> ReconArtifacts:
        reconstructor = self.router.get(method)
        proj = load_projections(projections_path)
        self._check_geometry(proj)
        truth = load_volume(truth_path) if truth_path else None
        _prepare_dir(out_dir)

        artifacts = ReconArtifacts(volume=os.path.join(out_dir, f"recon_{method}.raw"),
                                   metadata=os.path.join(out_dir, f"recon_{method}.meta.json"))
        request = ReconRequest(proj=proj, dims=self.dims, config=self.config, ground_truth=truth)
        if isinstance(reconstructor, FieldReconstructor):
            artifacts.trace = os.path.join(out_dir, f"trace_{method}.csv")
            artifacts.checkpoint = os.path.join(out_dir, f"checkpoint_{method}.nafckpt")
            if os.path.exists(artifacts.trace):
                os.remove(artifacts.trace)
            request.trace_store = TraceStore(artifacts.trace, TRAIN_TRACE_COLUMNS)
            request.checkpoint_path = artifacts.checkpoint

        outcome: ReconOutcome = self.router.reconstruct(method, request)
        save_volume(outcome.volume, artifacts.volume, meta={'method': method})
        metadata = {k: v for k, v in outcome.metadata.items() if k != 'trace'}
        write_json(artifacts.metadata, {
            **metadata,
            'format_version': FORMAT_VERSION,
            'checkpoint_version': CHECKPOINT_VERSION if artifacts.checkpoint else None,
            'config': self.config.to_dict(),
            'projections': os.path.abspath(projections_path),
            'seed': self.config.seed,
            'strict': self.config.train.strict,
        })
        self.logger.log_stage('reconstruct', f"{method} -> {artifacts.volume}", outcome.metadata.get('wall_ms'))
        return artifacts

    def evaluate(self, recon_path: str, truth_path: str, out_dir: Optional[str] = None,
                 resample: bool = False, label: Optional[str] = None) -> MetricReport:
        recon, truth = load_volume(recon_path), load_volume(truth_path)
        if recon.dims != truth.dims:
            if not resample:
                raise ShapeMismatchError(f"reconstruction {recon.dims} and truth {truth.dims} differ "
                                         f"(pass --resample to resample the reconstruction)")
            recon = resample_volume(recon, truth.dims)
        m = self.config.metrics
        report = evaluate_volumes(recon, truth, axis=m.axis, normalize=m.normalize, data_range=m.data_range)
        if out_dir:
            _prepare_dir(out_dir)
            stem = label or os.path.splitext(os.path.basename(recon_path))[0]
            report.save(os.path.join(out_dir, f"report_{stem}.json"), os.path.join(out_dir, f"slices_{stem}.csv"))
        if label is None:
            label = load_volume_meta(recon_path).get('method', os.path.basename(recon_path))
        self.logger.log_metrics(label, report.psnr_db, report.ssim)
        return report

    def _sweep_cell(self, views: int, method: str, scan: SimulationArtifacts, cell_dir: str) -> Dict[str, Any]:
        row: Dict[str, Any] = {'views': views, 'method': method, 'psnr': None, 'ssim': None,
                               'wall_ms': 0.0, 'status': 'ok', 'error': None}
        runner = ExperimentRunner(self.config.with_views(views), self.logger, self.router)
        started = time.perf_counter()
        try:
            recon = runner.reconstruct(scan.noisy, method, cell_dir, truth_path=scan.truth)
            row['wall_ms'] = round((time.perf_counter() - started) * 1000.0, 1)
            report = runner.evaluate(recon.volume, scan.truth, cell_dir, label=f"{method}_{views}")
            row['psnr'], row['ssim'] = report.psnr_db, report.ssim
        except Exception as e:
            row['wall_ms'] = round((time.perf_counter() - started) * 1000.0, 1)
            row['status'] = 'error'
            row['error'] = f"{type(e).__name__}: {e}"
            self.logger.log_failure(f"sweep cell views={views} method={method}", e)
        self.logger.log_sweep_cell(views, method, row['status'], row['psnr'], row['ssim'], row['wall_ms'])
        return row

    def sweep_views(self, out_dir: str, view_counts: Optional[Sequence[int]] = None,
                    methods: Optional[Sequence[str]] = None, parallel: Optional[bool] = None) -> List[Dict[str, Any]]:
        sweep = self.config.sweep
        view_counts = list(view_counts or sweep.view_counts)
        methods = list(methods or sweep.methods)
        parallel = sweep.parallel if parallel is None else parallel
        for method in methods:
            self.router.get(method)
        _prepare_dir(out_dir)

        scans: Dict[int, Optional[SimulationArtifacts]] = {}
        cells = []
        for views in view_counts:
            scan_error = None
            view_dir = os.path.join(out_dir, f"views_{views:03d}")
            try:
                scans[views] = ExperimentRunner(self.config.with_views(views), self.logger,
                                                self.router).simulate(os.path.join(view_dir, 'scan'))
            except Exception as e:
                self.logger.log_failure(f"sweep simulate views={views}", e)
                scans[views] = None
                scan_error = f"{type(e).__name__}: {e}"
            for method in methods:
                cells.append((views, method, os.path.join(view_dir, method),
                              scan_error))

        def run(cell) -> Dict[str, Any]:
            views, method, cell_dir, error = cell
            if error is not None:
                return {'views': views, 'method': method, 'psnr': None, 'ssim': None,
                        'wall_ms': 0.0, 'status': 'error', 'error': error}
            return self._sweep_cell(views, method, scans[views], cell_dir)

        if parallel and len(cells) > 1:
            with ThreadPoolExecutor(max_workers=max(1, sweep.workers)) as pool:
                rows = list(pool.map(run, cells))
        else:
            rows = [run(cell) for cell in cells]

        csv_path = os.path.join(out_dir, 'sweep.csv')
        if os.path.exists(csv_path):
            os.remove(csv_path)
        TraceStore(csv_path, SWEEP_COLUMNS).extend(rows)
        write_json(os.path.join(out_dir, MANIFEST_FILE), {
            'format_version': FORMAT_VERSION,
            'config': self.config.to_dict(),
            'view_counts': view_counts,
            'methods': methods,
            'parallel': parallel,
            'scans': {str(v): list_artifacts(s.directory) if s else [] for v, s in scans.items()},
        })
        return rows

    def export_slices(self, volume_path: str, axis: int, out_dir: str) -> List[str]:
        if axis not in (0, 1, 2):
            raise UsageError(f"axis must be 0, 1 or 2 (x, y, z), got {axis}")
        vol = load_volume(volume_path)
        _prepare_dir(out_dir)
        data = np.moveaxis(vol.data.astype(np.float64), axis, 0)
        lo, hi = float(data.min()), float(data.max())
        if hi > lo:
            pixels = np.round((data - lo) * (255.0 / (hi - lo))).astype(np.uint8)
        else:
            pixels = np.full(data.shape, MID_GRAY, dtype=np.uint8)
        width = len(str(data.shape[0]))
        paths = []
        for index in range(data.shape[0]):
            path = os.path.join(out_dir, f"slice_{AXIS_NAMES[axis]}_{index:0{width}d}.pgm")
            Image.fromarray(np.ascontiguousarray(pixels[index])).save(path)
            paths.append(path)
        self.logger.log_stage('export', f"{len(paths)} slices along {AXIS_NAMES[axis]} -> {out_dir}")
        return paths
