"""Experiment configuration: one YAML file, validated as a whole before any compute.

Physics fields (the whole geometry section, phantom kind and dims) have no
defaults. Everything else falls back to the values in SCHEMA. Errors name
the file and line of the offending key.
"""

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import yaml

from baselines import FdkConfig, SartConfig
from encoding import HashEncoderConfig
from errors import ConfigError
from geometry import ScanGeometry
from phantom import PhantomKind
from trainer import TrainConfig

DEFAULT_CONFIG_PATH = 'config.yaml'
REQUIRED = object()
METHODS = ('naf', 'naf-frequency', 'fdk', 'sart')
PHANTOM_KINDS = tuple(k.value for k in PhantomKind) + ('raw',)

# section -> key -> (kind, default); nested dicts are subsections
SCHEMA: Dict[str, Any] = {
    'seed': ('int', 0),
    'output_dir': ('str', 'runs'),
    'geometry': {
        'dso': ('float', REQUIRED),
        'dsd': ('float', REQUIRED),
        'detector_rows': ('int', REQUIRED),
        'detector_cols': ('int', REQUIRED),
        'pixel_pitch_u': ('float', REQUIRED),
        'pixel_pitch_v': ('float', REQUIRED),
        'angle_start_deg': ('float', REQUIRED),
        'angle_end_deg': ('float', REQUIRED),
        'num_views': ('int', REQUIRED),
        'volume_extent': ('float3', REQUIRED),
        'mu_unit_mm': ('float', 64.0),
    },
    'phantom': {
        'kind': ('str', REQUIRED),
        'dims': ('int3', REQUIRED),
        'mu': ('float', 0.5),
        'radius_fraction': ('float', 0.8),
        'path': ('optional_str', None),
    },
    'noise': {
        'fraction': ('float', 0.03),
    },
    'projector': {
        'samples_per_ray': ('optional_int', None),
        'threads': ('int', 1),
    },
    'train': {
        'batch_rays': ('int', 2048),
        'samples_per_ray': ('int', 96),
        'iterations': ('int', 3000),
        'lr_start': ('float', 1e-3),
        'lr_end': ('float', 1e-4),
        'lr_schedule': ('str', 'exponential'),
        'adam_beta1': ('float', 0.9),
        'adam_beta2': ('float', 0.999),
        'adam_eps': ('float', 1e-8),
        'jitter': ('bool', True),
        'eval_every': ('int', 250),
        'holdout_fraction': ('float', 0.0),
        'workers': ('int', 1),
        'strict': ('bool', False),
        'close_last_interval': ('bool', True),
        'precision': ('str', 'float32'),
        'hash': {
            'levels': ('int', 16),
            'table_size': ('int', 2 ** 19),
            'features_per_level': ('int', 2),
            'base_resolution': ('int', 16),
            'growth_factor': ('optional_float', None),
        },
        'frequency': {
            'bands': ('int', 10),
        },
        'mlp': {
            'width': ('int', 32),
            'depth': ('int', 4),
            'skip_layer': ('optional_int', 1),
        },
        'frequency_mlp': {
            'width': ('int', 256),
            'depth': ('int', 6),
            'skip_layer': ('optional_int', 3),
        },
    },
    'fdk': {
        'filter': ('str', 'hann'),
        'padding': ('int', 2),
        'threads': ('int', 1),
    },
    'sart': {
        'iterations': ('int', 20),
        'relaxation': ('float', 1.0),
        'order': ('str', 'sequential'),
        'positivity': ('bool', True),
        'samples_per_ray': ('optional_int', None),
    },
    'metrics': {
        'axis': ('int', 2),
        'normalize': ('bool', True),
        'data_range': ('float', 1.0),
    },
    'sweep': {
        'view_counts': ('int_list', [10, 25, 50]),
        'methods': ('str_list', ['naf', 'sart', 'fdk']),
        'parallel': ('bool', False),
        'workers': ('int', 1),
    },
}


@dataclass
class PhantomSettings:
    kind: str
    dims: Tuple[int, int, int]
    mu: float = 0.5
    radius_fraction: float = 0.8
    path: Optional[str] = None


@dataclass
class NoiseSettings:
    fraction: float = 0.03


@dataclass
class ProjectorSettings:
    samples_per_ray: int
    threads: int = 1


@dataclass
class MetricsSettings:
    axis: int = 2
    normalize: bool = True
    data_range: float = 1.0


@dataclass
class SweepSettings:
    view_counts: List[int] = field(default_factory=lambda: [10, 25, 50])
    methods: List[str] = field(default_factory=lambda: ['naf', 'sart', 'fdk'])
    parallel: bool = False
    workers: int = 1


@dataclass
class ExperimentConfig:
    geometry: ScanGeometry
    phantom: PhantomSettings
    noise: NoiseSettings
    projector: ProjectorSettings
    train: TrainConfig
    frequency_bands: int
    frequency_mlp: Dict[str, Any]
    fdk: FdkConfig
    fdk_threads: int
    sart: SartConfig
    metrics: MetricsSettings
    sweep: SweepSettings
    seed: int = 0
    output_dir: str = 'runs'
    source: str = '<memory>'

    def train_config_for(self, method: str) -> TrainConfig:
        if method == 'naf':
            return self.train
        if method == 'naf-frequency':
            return replace(self.train, encoder='frequency', hash=None, frequency_bands=self.frequency_bands,
                           mlp_width=self.frequency_mlp['width'], mlp_depth=self.frequency_mlp['depth'],
                           mlp_skip_layer=self.frequency_mlp['skip_layer'])
        raise ConfigError(f"'{method}' is not a field-training method")

    def with_overrides(self, seed: Optional[int] = None, strict: Optional[bool] = None,
                       threads: Optional[int] = None) -> 'ExperimentConfig':
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed, train=replace(cfg.train, seed=seed), sart=replace(cfg.sart, seed=seed))
        if strict is not None:
            cfg = replace(cfg, train=replace(cfg.train, strict=strict))
        if threads is not None:
            if threads < 1:
                raise ConfigError(f"--threads must be >= 1, got {threads}")
            cfg = replace(cfg, train=replace(cfg.train, workers=threads), fdk_threads=threads,
                          projector=replace(cfg.projector, threads=threads))
        return cfg

    def with_views(self, num_views: int) -> 'ExperimentConfig':
        return replace(self, geometry=self.geometry.with_views(num_views))

    def to_dict(self) -> Dict[str, Any]:
        """Config echo for manifests and run metadata."""
        return {
            'seed': self.seed,
            'output_dir': self.output_dir,
            'geometry': self.geometry.to_dict(),
            'phantom': asdict(self.phantom),
            'noise': asdict(self.noise),
            'projector': asdict(self.projector),
            'train': self.train.to_dict(),
            'frequency': {'bands': self.frequency_bands},
            'frequency_mlp': dict(self.frequency_mlp),
            'fdk': {**self.fdk.to_dict(), 'threads': self.fdk_threads},
            'sart': self.sart.to_dict(),
            'metrics': asdict(self.metrics),
            'sweep': asdict(self.sweep),
        }


def _describe(kind: str) -> str:
    return {
        'int': 'an integer', 'float': 'a number', 'bool': 'true or false', 'str': 'a string',
        'int3': 'a list of 3 integers', 'float3': 'a list of 3 numbers', 'int_list': 'a list of integers',
        'str_list': 'a list of strings', 'optional_int': 'an integer or null',
        'optional_float': 'a number or null', 'optional_str': 'a string or null',
    }[kind]


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_number(v) -> bool:
    return (_is_int(v) or isinstance(v, float)) and math.isfinite(v)


def _coerce(kind: str, value: Any):
    """Typed value, or raise TypeError."""
    if kind.startswith('optional_'):
        return None if value is None else _coerce(kind[len('optional_'):], value)
    if kind == 'int' and _is_int(value):
        return value
    if kind == 'float' and _is_number(value):
        return float(value)
    if kind == 'bool' and isinstance(value, bool):
        return value
    if kind == 'str' and isinstance(value, str):
        return value
    if kind in ('int3', 'float3') and isinstance(value, list) and len(value) == 3:
        check = _is_int if kind == 'int3' else _is_number
        if all(check(v) for v in value):
            return tuple(int(v) if kind == 'int3' else float(v) for v in value)
    if kind == 'int_list' and isinstance(value, list) and all(_is_int(v) for v in value):
        return list(value)
    if kind == 'str_list' and isinstance(value, list) and all(isinstance(v, str) for v in value):
        return list(value)
    raise TypeError(kind)


def _validate(node: yaml.Node, data: Any, schema: Dict[str, Any], section: str, source: str) -> Dict[str, Any]:
    """Walk a mapping node against its schema; returns typed values with defaults filled in."""
    line = node.start_mark.line + 1
    if not isinstance(node, yaml.MappingNode) or not isinstance(data, dict):
        raise ConfigError(f"{source}:{line}: section '{section}' must be a mapping")
    out: Dict[str, Any] = {}
    seen = set()
    for key_node, value_node in node.value:
        key = key_node.value
        key_line = key_node.start_mark.line + 1
        where = f"{section}.{key}" if section else key
        if key in seen:
            raise ConfigError(f"{source}:{key_line}: duplicate key '{key}' in section '{section or 'top level'}'")
        seen.add(key)
        if key not in schema:
            raise ConfigError(f"{source}:{key_line}: unknown key '{key}' in section '{section or 'top level'}'")
        spec = schema[key]
        if isinstance(spec, dict):
            if data[key] is None:
                out[key] = _defaults(spec, where, source, key_line)
            else:
                out[key] = _validate(value_node, data[key], spec, where, source)
            continue
        kind, _ = spec
        try:
            out[key] = _coerce(kind, data[key])
        except TypeError:
            raise ConfigError(f"{source}:{value_node.start_mark.line + 1}: '{where}' must be {_describe(kind)}, "
                              f"got {data[key]!r}")
    for key, spec in schema.items():
        if key in out:
            continue
        where = f"{section}.{key}" if section else key
        if isinstance(spec, dict):
            out[key] = _defaults(spec, where, source, line)
        elif spec[1] is REQUIRED:
            raise ConfigError(f"{source}:{line}: missing required key '{where}'")
        else:
            default = spec[1]
            out[key] = list(default) if isinstance(default, list) else default
    return out


def _defaults(schema: Dict[str, Any], section: str, source: str, line: int) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for key, spec in schema.items():
        where = f"{section}.{key}"
        if isinstance(spec, dict):
            out[key] = _defaults(spec, where, source, line)
        elif spec[1] is REQUIRED:
            raise ConfigError(f"{source}:{line}: missing required key '{where}'")
        else:
            out[key] = list(spec[1]) if isinstance(spec[1], list) else spec[1]
    return out


def parse_experiment_config(text: str, source: str = '<memory>') -> ExperimentConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, 'problem_mark', None)
        where = f"{source}:{mark.line + 1}" if mark is not None else source
        raise ConfigError(f"{where}: invalid YAML ({getattr(e, 'problem', e)})")
    if node is None:
        raise ConfigError(f"{source}:1: configuration is empty")
    raw = _validate(node, data, SCHEMA, '', source)
    return _build(raw, node, source)


def _section_line(node: yaml.MappingNode, key: str) -> int:
    for key_node, _ in node.value:
        if key_node.value == key:
            return key_node.start_mark.line + 1
    return node.start_mark.line + 1


def _build(raw: Dict[str, Any], node: yaml.MappingNode, source: str) -> ExperimentConfig:
    def fail(section: str, message: str):
        raise ConfigError(f"{source}:{_section_line(node, section)}: {section}: {message}")

    g = raw['geometry']
    try:
        geometry = ScanGeometry(
            dso=g['dso'], dsd=g['dsd'], detector_rows=g['detector_rows'], detector_cols=g['detector_cols'],
            pixel_pitch_u=g['pixel_pitch_u'], pixel_pitch_v=g['pixel_pitch_v'],
            angle_start=math.radians(g['angle_start_deg']), angle_end=math.radians(g['angle_end_deg']),
            num_views=g['num_views'], volume_extent=g['volume_extent'], mu_unit_mm=g['mu_unit_mm'])
    except ValueError as e:
        fail('geometry', str(e))

    p = raw['phantom']
    if p['kind'] not in PHANTOM_KINDS:
        fail('phantom', f"kind must be one of {PHANTOM_KINDS}, got '{p['kind']}'")
    if p['kind'] == 'raw' and not p['path']:
        fail('phantom', "kind 'raw' needs a path to a volume file")
    if min(p['dims']) < 2:
        fail('phantom', f"dims must be >= 2 on every axis, got {p['dims']}")
    phantom = PhantomSettings(**p)

    if raw['noise']['fraction'] < 0:
        fail('noise', "fraction must be >= 0")
    projector_samples = raw['projector']['samples_per_ray'] or 2 * max(phantom.dims)
    if projector_samples < max(phantom.dims):
        fail('projector', f"samples_per_ray must be >= the largest phantom dimension ({max(phantom.dims)})")
    if raw['projector']['threads'] < 1:
        fail('projector', "threads must be >= 1")

    seed = raw['seed']
    t = dict(raw['train'])
    h = t.pop('hash')
    frequency = t.pop('frequency')
    mlp = t.pop('mlp')
    frequency_mlp = t.pop('frequency_mlp')
    try:
        overrides = {k: v for k, v in h.items() if v is not None}
        if 'growth_factor' in overrides:
            hash_config = HashEncoderConfig(**overrides)
        else:
            hash_config = HashEncoderConfig.for_target(max(phantom.dims), **overrides)
        train = TrainConfig(**t, seed=seed, encoder='hash', hash=hash_config,
                            frequency_bands=frequency['bands'], mlp_width=mlp['width'],
                            mlp_depth=mlp['depth'], mlp_skip_layer=mlp['skip_layer'])
    except ValueError as e:
        fail('train', str(e))

    f = dict(raw['fdk'])
    fdk_threads = f.pop('threads')
    try:
        fdk = FdkConfig(**f)
    except ValueError as e:
        fail('fdk', str(e))
    try:
        sart = SartConfig(**raw['sart'], seed=seed)
    except ValueError as e:
        fail('sart', str(e))

    metrics = MetricsSettings(**raw['metrics'])
    if metrics.axis not in (0, 1, 2):
        fail('metrics', f"axis must be 0, 1 or 2, got {metrics.axis}")
    if metrics.data_range <= 0:
        fail('metrics', "data_range must be > 0")

    sweep = SweepSettings(**raw['sweep'])
    unknown = [m for m in sweep.methods if m not in METHODS]
    if unknown:
        fail('sweep', f"unknown methods {unknown}; choose from {METHODS}")
    if any(v < 1 for v in sweep.view_counts) or not sweep.view_counts:
        fail('sweep', "view_counts must be a non-empty list of positive integers")

    return ExperimentConfig(
        geometry=geometry, phantom=phantom, noise=NoiseSettings(**raw['noise']),
        projector=ProjectorSettings(samples_per_ray=projector_samples, threads=raw['projector']['threads']),
        train=train, frequency_bands=frequency['bands'], frequency_mlp=frequency_mlp,
        fdk=fdk, fdk_threads=fdk_threads, sart=sart, metrics=metrics, sweep=sweep,
        seed=seed, output_dir=raw['output_dir'], source=source)


def load_experiment_config(path: str = DEFAULT_CONFIG_PATH) -> ExperimentConfig:
    try:
        with open(path, 'r', encoding='utf-8') as file:
            text = file.read()
    except OSError as e:
        raise ConfigError(f"{path}: cannot read configuration ({e.strerror})")
    return parse_experiment_config(text, source=path)
