"""Reconstruction quality: PSNR, slice-averaged SSIM and per-slice curves.

SSIM uses the usual 11x11 Gaussian window (sigma 1.5) with K1=0.01, K2=0.03,
computed per 2D slice with cv2.GaussianBlur and averaged over slices.
"""

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Union

import cv2
import numpy as np

from errors import ShapeMismatchError
from phantom import Volume, normalize_minmax

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

VolumeLike = Union[Volume, np.ndarray]


def _as_array(v: VolumeLike) -> np.ndarray:
    data = v.data if isinstance(v, Volume) else v
    return np.asarray(data, dtype=np.float64)


def _pair(a: VolumeLike, b: VolumeLike):
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise ShapeMismatchError(f"cannot compare volumes of shape {x.shape} and {y.shape}")
    return x, y


def psnr(a: VolumeLike, b: VolumeLike, data_range: float = 1.0) -> float:
    if data_range <= 0:
        raise ValueError(f"data_range must be > 0, got {data_range}")
    x, y = _pair(a, b)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(data_range * data_range / mse))


def _blur(img: np.ndarray) -> np.ndarray:
    return cv2.GaussianBlur(img, (SSIM_WINDOW, SSIM_WINDOW), SSIM_SIGMA, borderType=cv2.BORDER_REFLECT)


def ssim_2d(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> float:
    if min(x.shape) < SSIM_WINDOW:
        raise ShapeMismatchError(f"slice {x.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    mu_x, mu_y = _blur(x), _blur(y)
    sigma_xx = _blur(x * x) - mu_x * mu_x
    sigma_yy = _blur(y * y) - mu_y * mu_y
    sigma_xy = _blur(x * y) - mu_x * mu_y
    numerator = (2.0 * mu_x * mu_y + c1) * (2.0 * sigma_xy + c2)
    denominator = (mu_x * mu_x + mu_y * mu_y + c1) * (sigma_xx + sigma_yy + c2)
    return float(np.mean(numerator / denominator))


def _slices(x: np.ndarray, axis: int):
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    return np.moveaxis(x, axis, 0)


def ssim(a: VolumeLike, b: VolumeLike, data_range: float = 1.0, axis: int = 2) -> float:
    """Mean of 2D SSIM over the slices normal to `axis` (axial by default)."""
    x, y = _pair(a, b)
    xs, ys = _slices(x, axis), _slices(y, axis)
    return float(np.mean([ssim_2d(xs[i], ys[i], data_range) for i in range(xs.shape[0])]))


@dataclass
class SliceCurves:
    axis: int
    psnr: np.ndarray
    ssim: np.ndarray

    def to_csv(self, path: str):
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(['axis', 'slice', 'psnr', 'ssim'])
            for i, (p, s) in enumerate(zip(self.psnr, self.ssim)):
                writer.writerow([self.axis, i, repr(float(p)), repr(float(s))])


def per_slice_curves(a: VolumeLike, b: VolumeLike, axis: int = 2, data_range: float = 1.0) -> SliceCurves:
    x, y = _pair(a, b)
    xs, ys = _slices(x, axis), _slices(y, axis)
    return SliceCurves(
        axis=axis,
        psnr=np.array([psnr(xs[i], ys[i], data_range) for i in range(xs.shape[0])]),
        ssim=np.array([ssim_2d(xs[i], ys[i], data_range) for i in range(xs.shape[0])]),
    )


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    per_slice: SliceCurves
    data_range: float = 1.0
    normalization: str = 'minmax'
    ssim_params: Dict[str, Any] = field(default_factory=lambda: {
        'window': SSIM_WINDOW, 'sigma': SSIM_SIGMA, 'k1': SSIM_K1, 'k2': SSIM_K2, 'mode': 'mean of 2D slices'})

    def summary_line(self) -> str:
        return f"PSNR={self.psnr_db:.2f}dB SSIM={self.ssim:.4f}"

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d['per_slice'] = {'axis': self.per_slice.axis,
                          'psnr': [float(v) for v in self.per_slice.psnr],
                          'ssim': [float(v) for v in self.per_slice.ssim]}
        return d

    def save(self, json_path: str, csv_path: str):
        directory = os.path.dirname(json_path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(json_path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2)
        self.per_slice.to_csv(csv_path)


def evaluate_volumes(recon: Volume, truth: Volume, axis: int = 2, normalize: bool = True,
                     data_range: float = 1.0) -> MetricReport:
    """Independently min-max normalize both volumes (by default) and score them."""
    if recon.dims != truth.dims:
        raise ShapeMismatchError(f"reconstruction {recon.dims} and truth {truth.dims} differ; resample first")
    if normalize:
        recon, truth = normalize_minmax(recon), normalize_minmax(truth)
    return MetricReport(
        psnr_db=psnr(recon, truth, data_range),
        ssim=ssim(recon, truth, data_range, axis),
        per_slice=per_slice_curves(recon, truth, axis, data_range),
        data_range=data_range,
        normalization='minmax' if normalize else 'none',
    )


def resample_volume(vol: Volume, dims) -> Volume:
    """Trilinear resampling onto a new grid over the same extent (two bilinear cv2.resize passes)."""
    nx, ny, nz = (int(n) for n in dims)
    src = vol.data.astype(np.float32)
    # Pass 1: every z-slice (x, y) -> (nx, ny)
    xy = np.stack([cv2.resize(src[:, :, k], (ny, nx), interpolation=cv2.INTER_LINEAR)
                   for k in range(src.shape[2])], axis=2)
    # Pass 2: every x-row (y, z) -> (ny, nz)
    out = np.stack([cv2.resize(np.ascontiguousarray(xy[i]), (nz, ny), interpolation=cv2.INTER_LINEAR)
                    for i in range(nx)], axis=0)
    return Volume(data=out, extent=vol.extent)
