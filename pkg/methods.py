import logging
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

from baselines import fdk_reconstruct, sart_reconstruct
from errors import UsageError
from phantom import ProjectionSet, Volume
from settings import ExperimentConfig
from trace_store import TraceStore
from trainer import extract_volume, train

RESERVED_METHODS = ('asd-pocs',)


@dataclass
class ReconOutcome:
    volume: Volume
    metadata: Dict[str, Any] = field(default_factory=dict)


@dataclass
class ReconRequest:
    proj: ProjectionSet
    dims: Sequence[int]
    config: ExperimentConfig
    ground_truth: Optional[Volume] = None
    trace_store: Optional[TraceStore] = None
    checkpoint_path: Optional[str] = None


class Reconstructor:
    name: str = "base"

    def reconstruct(self, request: ReconRequest) -> ReconOutcome:
        raise NotImplementedError


class FieldReconstructor(Reconstructor):
    """Neural attenuation field; `naf` with the hash encoder, `naf-frequency` for the ablation."""

    def __init__(self, name: str = 'naf'):
        self.name = name

    def reconstruct(self, request: ReconRequest) -> ReconOutcome:
        config = request.config.train_config_for(self.name)
        result = train(request.proj, config, ground_truth=request.ground_truth, recon_dims=request.dims,
                       trace_store=request.trace_store, checkpoint_path=request.checkpoint_path)
        volume = extract_volume(result.model, request.dims, request.proj.geometry.volume_extent)
        return ReconOutcome(volume=volume, metadata={
            'train_config': config.to_dict(),
            'iterations': config.iterations,
            'final_loss': result.final_loss,
            'trace': result.trace,
        })


class FdkReconstructor(Reconstructor):
    name = "fdk"

    def reconstruct(self, request: ReconRequest) -> ReconOutcome:
        cfg = request.config
        volume = fdk_reconstruct(request.proj, request.dims, cfg.fdk, threads=cfg.fdk_threads)
        return ReconOutcome(volume=volume, metadata={'fdk_config': cfg.fdk.to_dict()})


class SartReconstructor(Reconstructor):
    name = "sart"

    def reconstruct(self, request: ReconRequest) -> ReconOutcome:
        cfg = request.config
        result = sart_reconstruct(request.proj, request.dims, cfg.sart)
        return ReconOutcome(volume=result.volume, metadata={
            'sart_config': cfg.sart.to_dict(),
            'residual_norms': result.residual_norms,
        })


class MethodRouter:
    def __init__(self, priority: Optional[List[str]] = None):
        order = priority or ['naf', 'naf-frequency', 'fdk', 'sart']
        self.methods: Dict[str, Reconstructor] = {}
        for name in [x.strip().lower() for x in order if x.strip()]:
            if name in ('naf', 'naf-frequency'):
                self.methods[name] = FieldReconstructor(name)
            elif name == 'fdk':
                self.methods[name] = FdkReconstructor()
            elif name == 'sart':
                self.methods[name] = SartReconstructor()

    @property
    def names(self) -> List[str]:
        return list(self.methods)

    def get(self, name: str) -> Reconstructor:
        if name in RESERVED_METHODS:
            raise UsageError(f"method '{name}' is reserved and not implemented")
        if name not in self.methods:
            raise UsageError(f"unknown method '{name}'; choose from {self.names}")
        return self.methods[name]

    def reconstruct(self, name: str, request: ReconRequest) -> ReconOutcome:
        method = self.get(name)
        started = time.perf_counter()
        outcome = method.reconstruct(request)
        wall_ms = (time.perf_counter() - started) * 1000.0
        outcome.metadata.update({'method': name, 'wall_ms': round(wall_ms, 1), 'dims': list(request.dims)})
        logging.info(f"MethodRouter: '{name}' finished in {wall_ms:.0f}ms")
        return outcome
