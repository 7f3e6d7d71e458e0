# THEORY:
# On-disk formats shared by every command. Volumes and projection stacks are
# raw little-endian float32 payloads next to a JSON sidecar that carries the
# format tag, version, shape and the physics (geometry, convention, noise,
# seed). Trained models go into one binary checkpoint container:
#
#   b"NAFCKPT\0" | uint32 version | uint32 header bytes | JSON header | arrays
#
# where the header lists every array (name, dtype, shape) in payload order
# and echoes the training config, iteration and geometry hash.

# CAVEATS & WARNINGS:
# - Volume payloads are x-fastest (Fortran order over [x, y, z]).
# - Projection payloads are column-fastest over [view, row, col].
# - Every writer goes through a temp file + os.replace; readers reject a
#   version they do not know instead of guessing.

import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from errors import FormatError
from geometry import ScanGeometry
from phantom import Convention, ProjectionSet, Volume

FORMAT_VERSION = 1
CHECKPOINT_VERSION = 1
CHECKPOINT_MAGIC = b"NAFCKPT\0"
VOLUME_FORMAT = 'naf-volume'
PROJECTION_FORMAT = 'naf-projections'


def sidecar_path(path: str) -> str:
    return path + '.json'


def _atomic_write(path: str, payload: bytes):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix='.tmp-', suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def write_json(path: str, data: Dict[str, Any]):
    _atomic_write(path, (json.dumps(data, indent=2, sort_keys=True) + '\n').encode('utf-8'))


def read_json(path: str) -> Dict[str, Any]:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError:
        raise FormatError(f"{path}: sidecar not found")
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e})")
    if not isinstance(data, dict):
        raise FormatError(f"{path}: sidecar must be a JSON object")
    return data


def _require(meta: Dict[str, Any], key: str, path: str):
    if key not in meta:
        raise FormatError(f"{path}: missing field '{key}'")
    return meta[key]


def _check_header(meta: Dict[str, Any], expected_format: str, path: str):
    fmt = _require(meta, 'format', path)
    if fmt != expected_format:
        raise FormatError(f"{path}: field 'format' is '{fmt}', expected '{expected_format}'")
    version = _require(meta, 'version', path)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: field 'version' is {version}, this build reads version {FORMAT_VERSION}")
    if _require(meta, 'byte_order', path) != 'little':
        raise FormatError(f"{path}: field 'byte_order' must be 'little'")
    if _require(meta, 'dtype', path) != 'float32':
        raise FormatError(f"{path}: field 'dtype' must be 'float32'")


def _read_payload(path: str, count: int) -> np.ndarray:
    try:
        with open(path, 'rb') as f:
            raw = f.read()
    except FileNotFoundError:
        raise FormatError(f"{path}: payload not found")
    if len(raw) != 4 * count:
        raise FormatError(f"{path}: payload holds {len(raw)} bytes, sidecar shape needs {4 * count}")
    return np.frombuffer(raw, dtype='<f4').astype(np.float32)


def save_volume(vol: Volume, path: str, meta: Optional[Dict[str, Any]] = None):
    payload = np.ascontiguousarray(vol.data.astype('<f4').ravel(order='F')).tobytes()
    _atomic_write(path, payload)
    write_json(sidecar_path(path), {
        'format': VOLUME_FORMAT,
        'version': FORMAT_VERSION,
        'dims': list(vol.dims),
        'extent': list(vol.extent),
        'dtype': 'float32',
        'byte_order': 'little',
        'order': 'x-fastest',
        'meta': meta or {},
    })


def load_volume(path: str) -> Volume:
    side = sidecar_path(path)
    meta = read_json(side)
    _check_header(meta, VOLUME_FORMAT, side)
    dims = _require(meta, 'dims', side)
    extent = _require(meta, 'extent', side)
    if not (isinstance(dims, list) and len(dims) == 3 and all(isinstance(n, int) and n >= 2 for n in dims)):
        raise FormatError(f"{side}: field 'dims' must be three integers >= 2")
    if not (isinstance(extent, list) and len(extent) == 3 and all(isinstance(e, (int, float)) and e > 0 for e in extent)):
        raise FormatError(f"{side}: field 'extent' must be three positive numbers")
    if _require(meta, 'order', side) != 'x-fastest':
        raise FormatError(f"{side}: field 'order' must be 'x-fastest'")
    data = _read_payload(path, int(np.prod(dims))).reshape(dims, order='F')
    return Volume(data=data, extent=tuple(extent))


def load_volume_meta(path: str) -> Dict[str, Any]:
    return read_json(sidecar_path(path)).get('meta', {})


def save_projections(proj: ProjectionSet, path: str, meta: Optional[Dict[str, Any]] = None):
    _atomic_write(path, np.ascontiguousarray(proj.images.astype('<f4')).tobytes())
    write_json(sidecar_path(path), {
        'format': PROJECTION_FORMAT,
        'version': FORMAT_VERSION,
        'shape': list(proj.images.shape),
        'geometry': proj.geometry.to_dict(),
        'convention': proj.convention.value,
        'noise_fraction': proj.noise_fraction,
        'seed': proj.seed,
        'i0': proj.i0,
        'dtype': 'float32',
        'byte_order': 'little',
        'order': 'col-fastest',
        'meta': {**proj.meta, **(meta or {})},
    })


def load_projections(path: str) -> ProjectionSet:
    side = sidecar_path(path)
    meta = read_json(side)
    _check_header(meta, PROJECTION_FORMAT, side)
    shape = _require(meta, 'shape', side)
    if not (isinstance(shape, list) and len(shape) == 3 and all(isinstance(n, int) and n >= 1 for n in shape)):
        raise FormatError(f"{side}: field 'shape' must be three positive integers")
    try:
        geometry = ScanGeometry.from_dict(_require(meta, 'geometry', side))
    except (TypeError, ValueError) as e:
        raise FormatError(f"{side}: field 'geometry' is invalid ({e})")
    try:
        convention = Convention(_require(meta, 'convention', side))
    except ValueError:
        raise FormatError(f"{side}: field 'convention' must be INTENSITY or LINE_INTEGRAL")
    images = _read_payload(path, int(np.prod(shape))).reshape(shape)
    try:
        return ProjectionSet(images=images, geometry=geometry,
                             noise_fraction=float(_require(meta, 'noise_fraction', side)),
                             convention=convention, seed=meta.get('seed'),
                             i0=float(_require(meta, 'i0', side)), meta=meta.get('meta', {}))
    except ValueError as e:
        raise FormatError(f"{side}: {e}")


@dataclass
class Checkpoint:
    """Everything needed to rebuild a field model and resume its optimizer."""
    encoder: Dict[str, Any]
    mlp: Dict[str, Any]
    arrays: Dict[str, np.ndarray]
    iteration: int
    adam_step: int
    geometry: Dict[str, Any]
    geometry_hash: str
    train_config: Dict[str, Any] = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def header(self) -> Dict[str, Any]:
        return {
            'encoder': self.encoder,
            'mlp': self.mlp,
            'iteration': self.iteration,
            'adam_step': self.adam_step,
            'geometry': self.geometry,
            'geometry_hash': self.geometry_hash,
            'train_config': self.train_config,
            'arrays': [{'name': name, 'dtype': _dtype_tag(a), 'shape': list(a.shape)}
                       for name, a in self.arrays.items()],
        }


def _dtype_tag(a: np.ndarray) -> str:
    if a.dtype == np.float32:
        return 'float32'
    if a.dtype == np.float64:
        return 'float64'
    raise FormatError(f"checkpoint arrays must be float32 or float64, got {a.dtype}")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps(ckpt.header(), sort_keys=True).encode('utf-8')
    parts = [CHECKPOINT_MAGIC, struct.pack('<II', ckpt.version, len(header)), header]
    for a in ckpt.arrays.values():
        little = a.astype(a.dtype.newbyteorder('<'), copy=False)
        parts.append(np.ascontiguousarray(little).tobytes())
    return b''.join(parts)


def save_checkpoint(ckpt: Checkpoint, path: str):
    _atomic_write(path, checkpoint_bytes(ckpt))
    logging.info(f"Checkpoint written: {path} (iteration {ckpt.iteration}, {len(ckpt.arrays)} arrays)")


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, 'rb') as f:
            raw = f.read()
    except FileNotFoundError:
        raise FormatError(f"{path}: checkpoint not found")
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    offset = len(CHECKPOINT_MAGIC)
    if len(raw) < offset + 8:
        raise FormatError(f"{path}: truncated header")
    version, header_len = struct.unpack_from('<II', raw, offset)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}")
    offset += 8
    try:
        header = json.loads(raw[offset:offset + header_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt checkpoint header ({e})")
    offset += header_len

    arrays: Dict[str, np.ndarray] = {}
    for entry in _require(header, 'arrays', path):
        dtype = np.dtype('<f4') if entry['dtype'] == 'float32' else np.dtype('<f8')
        shape: Tuple[int, ...] = tuple(entry['shape'])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: payload truncated at array '{entry['name']}'")
        arrays[entry['name']] = np.frombuffer(raw, dtype=dtype, count=nbytes // dtype.itemsize,
                                              offset=offset).reshape(shape).astype(dtype.newbyteorder('='))
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes after the last array")

    return Checkpoint(
        encoder=_require(header, 'encoder', path),
        mlp=_require(header, 'mlp', path),
        arrays=arrays,
        iteration=int(_require(header, 'iteration', path)),
        adam_step=int(_require(header, 'adam_step', path)),
        geometry=_require(header, 'geometry', path),
        geometry_hash=_require(header, 'geometry_hash', path),
        train_config=header.get('train_config', {}),
        version=version,
    )


def list_artifacts(directory: str) -> List[str]:
    """Payload files (those with a sidecar) in a run directory."""
    if not os.path.isdir(directory):
        return []
    return sorted(name for name in os.listdir(directory)
                  if not name.endswith('.json') and os.path.exists(os.path.join(directory, sidecar_path(name))))
