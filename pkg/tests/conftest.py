import os
import sys

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, ROOT)

from geometry import ScanGeometry  # noqa: E402
from phantom import make_phantom  # noqa: E402

MICRO_EXTENT = 64.0

MICRO_CONFIG = """\
seed: 7
output_dir: runs

geometry:
  dso: 1000.0
  dsd: 1500.0
  detector_rows: 24
  detector_cols: 24
  pixel_pitch_u: 6.5
  pixel_pitch_v: 6.5
  angle_start_deg: 0.0
  angle_end_deg: 180.0
  num_views: 6
  volume_extent: [64.0, 64.0, 64.0]
  mu_unit_mm: 64.0

phantom:
  kind: uniform_sphere
  dims: [16, 16, 16]

noise:
  fraction: 0.03

projector:
  samples_per_ray: 32

train:
  batch_rays: 64
  samples_per_ray: 16
  iterations: 3
  eval_every: 2
  hash:
    levels: 3
    table_size: 4096
    features_per_level: 2
    base_resolution: 4
  frequency:
    bands: 2
  frequency_mlp:
    width: 16
    depth: 3
    skip_layer: 1

sart:
  iterations: 2

sweep:
  view_counts: [4, 6]
  methods: [fdk, sart]
"""


@pytest.fixture
def micro_geometry():
    """8 views over 180 degrees, 24x24 detector, 64 mm box."""
    return ScanGeometry.desk_default(num_views=8, detector=24, extent=MICRO_EXTENT)


@pytest.fixture
def micro_sphere():
    return make_phantom('uniform_sphere', (16, 16, 16), extent=(MICRO_EXTENT,) * 3, mu=0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(20240617)


@pytest.fixture
def micro_config_path(tmp_path):
    path = tmp_path / 'config.yaml'
    path.write_text(MICRO_CONFIG, encoding='utf-8')
    return str(path)
