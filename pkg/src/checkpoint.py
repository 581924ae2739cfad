#!/usr/bin/env python3
"""
Checkpoint files

Layout (little-endian):
    "EXPT" | u32 version | u32 tensor count
    per tensor: u32 name length | UTF-8 name | u8 dtype code (1=f32, 2=f64) |
                u32 ndim | u64 dims... | raw element data
    u64 CRC-64 of every preceding byte

Metadata travels as zero-element f64 tensors named "meta:<key>=<value>".
Optimizer state is stored as "optim/m/<param>", "optim/v/<param>",
"optim/t" and "optim/hparams".
"""

import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Union

import crcmod.predefined
import numpy as np

from .baselines import TnpEdModel
from .errors import BadMagicError, CrcMismatchError, PersistenceError, VersionMismatchError
from .model import ExPTConfig, ExPTModel, InContextEncoder
from .nncore import OptimizerState

MAGIC = b'EXPT'
FORMAT_VERSION = 1
DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
CODE_DTYPES = {1: np.dtype('<f4'), 2: np.dtype('<f8')}
META_PREFIX = 'meta:'

MODEL_CLASSES = {'expt': ExPTModel, 'tnp-ed': TnpEdModel}

_crc64 = crcmod.predefined.mkCrcFun('crc-64')


def crc64(data: bytes) -> int:
    return _crc64(data)


def encode_tensors(tensors: Dict[str, np.ndarray], version: int = FORMAT_VERSION) -> bytes:
    """Serialize named arrays into the checkpoint byte layout"""
    parts = [MAGIC, struct.pack('<II', version, len(tensors))]
    for name, array in tensors.items():
        array = np.asarray(array)
        if array.dtype not in DTYPE_CODES:
            raise PersistenceError(f"tensor '{name}' has unsupported dtype {array.dtype}")
        code = DTYPE_CODES[array.dtype]
        encoded = name.encode('utf-8')
        parts.append(struct.pack('<I', len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack('<BI', code, array.ndim))
        parts.append(struct.pack(f'<{array.ndim}Q', *array.shape))
        parts.append(np.ascontiguousarray(array, dtype=CODE_DTYPES[code]).tobytes())
    payload = b''.join(parts)
    return payload + struct.pack('<Q', crc64(payload))


def decode_tensors(blob: bytes, source: str = '<bytes>') -> 'OrderedDict[str, np.ndarray]':
    """Parse and verify checkpoint bytes: magic, then version, then CRC"""
    if len(blob) < 8 and MAGIC.startswith(blob[:4]):
        raise CrcMismatchError(f"{source}: file truncated in the header ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"{source}: not a checkpoint (bad magic {blob[:4]!r})")
    (version,) = struct.unpack_from('<I', blob, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{source}: format version {version}, this reader supports {FORMAT_VERSION}")
    if len(blob) < 20:
        raise CrcMismatchError(f"{source}: file truncated")
    payload, (stored,) = blob[:-8], struct.unpack('<Q', blob[-8:])
    if crc64(payload) != stored:
        raise CrcMismatchError(f"{source}: CRC-64 mismatch (stored {stored:016x}, computed {crc64(payload):016x})")

    tensors: 'OrderedDict[str, np.ndarray]' = OrderedDict()
    try:
        (count,) = struct.unpack_from('<I', payload, 8)
        offset = 12
        for _ in range(count):
            (name_len,) = struct.unpack_from('<I', payload, offset)
            offset += 4
            name = payload[offset:offset + name_len].decode('utf-8')
            offset += name_len
            code, ndim = struct.unpack_from('<BI', payload, offset)
            offset += 5
            dims = struct.unpack_from(f'<{ndim}Q', payload, offset)
            offset += 8 * ndim
            if code not in CODE_DTYPES:
                raise PersistenceError(f"{source}: tensor '{name}' has unknown dtype code {code}")
            dtype = CODE_DTYPES[code]
            size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            nbytes = size * dtype.itemsize
            if offset + nbytes > len(payload):
                raise PersistenceError(f"{source}: tensor '{name}' runs past the end of the file")
            data = np.frombuffer(payload, dtype=dtype, count=size, offset=offset)
            tensors[name] = data.reshape(dims).astype(dtype.newbyteorder('='), copy=True)
            offset += nbytes
    except (struct.error, UnicodeDecodeError) as exc:
        raise PersistenceError(f"{source}: malformed checkpoint: {exc}") from exc
    if offset != len(payload):
        raise PersistenceError(f"{source}: {len(payload) - offset} trailing bytes after the last tensor")
    return tensors


@dataclass
class LoadedCheckpoint:
    model: InContextEncoder
    optimizer: Optional[OptimizerState]
    metadata: Dict[str, str]

    @property
    def step(self) -> int:
        return int(self.metadata.get('step', 0))

    @property
    def config_hash(self) -> str:
        return self.metadata.get('config_hash', '')


def checkpoint_name(model_kind: str, step: int, config_hash: str) -> str:
    return f"{model_kind}-step{step}-{config_hash[:8]}.expt"


def save_checkpoint(model: InContextEncoder, optimizer_state: Optional[OptimizerState], path: Union[str, Path],
                    metadata: Optional[Dict[str, object]] = None,
                    parameters: Optional[Dict[str, np.ndarray]] = None) -> Path:
    """
    Write model parameters, optimizer state and metadata to a checkpoint file

    Args:
        model: model whose architecture (and parameters, unless given) are saved
        optimizer_state: AdamW state or None
        path: output file (written via a temporary file and rename)
        metadata: extra key/value pairs (step, config_hash, ...)
        parameters: parameter snapshot to save instead of the model's current values

    Returns:
        The written path
    """
    path = Path(path)
    params = parameters if parameters is not None else model.state_dict()
    meta = {'model': model.kind, 'arch': json.dumps(model.config.to_dict(), sort_keys=True)}
    meta.update({k: v for k, v in (metadata or {}).items()})

    tensors: Dict[str, np.ndarray] = OrderedDict()
    for key, value in meta.items():
        tensors[f"{META_PREFIX}{key}={value}"] = np.zeros(0, dtype=np.float64)
    tensors.update(params)
    if optimizer_state is not None and optimizer_state.m:
        names = list(params)
        for name, m, v in zip(names, optimizer_state.m, optimizer_state.v):
            tensors[f"optim/m/{name}"] = m
            tensors[f"optim/v/{name}"] = v
        tensors['optim/t'] = np.array([optimizer_state.t], dtype=np.float64)
        tensors['optim/hparams'] = np.array([optimizer_state.lr, optimizer_state.beta1, optimizer_state.beta2,
                                             optimizer_state.eps, optimizer_state.weight_decay], dtype=np.float64)

    blob = encode_tensors(tensors)
    path.parent.mkdir(parents=True, exist_ok=True)
    partial = path.with_name(path.name + '.part')
    try:
        partial.write_bytes(blob)
        os.replace(partial, path)
    except OSError as exc:
        raise PersistenceError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path: Union[str, Path]) -> LoadedCheckpoint:
    """Read a checkpoint, verify it and rebuild the model and optimizer state"""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise PersistenceError(f"cannot read checkpoint {path}: {exc}") from exc
    tensors = decode_tensors(blob, str(path))

    metadata: Dict[str, str] = {}
    params: Dict[str, np.ndarray] = OrderedDict()
    optim: Dict[str, np.ndarray] = {}
    for name, array in tensors.items():
        if name.startswith(META_PREFIX):
            key, _, value = name[len(META_PREFIX):].partition('=')
            metadata[key] = value
        elif name.startswith('optim/'):
            optim[name] = array
        else:
            params[name] = array

    kind = metadata.get('model')
    if kind not in MODEL_CLASSES or 'arch' not in metadata:
        raise PersistenceError(f"{path}: checkpoint does not describe a known model ({kind!r})")
    config = ExPTConfig(**json.loads(metadata['arch']))
    dtype = next(iter(params.values())).dtype if params else np.float32
    model = MODEL_CLASSES[kind](config, np.random.default_rng(0), dtype=dtype)
    model.load_state_dict(params)
    model.eval()

    state = None
    if 'optim/t' in optim:
        lr, beta1, beta2, eps, weight_decay = (float(v) for v in optim['optim/hparams'])
        state = OptimizerState(lr, beta1, beta2, eps, weight_decay, int(optim['optim/t'][0]),
                               [optim[f"optim/m/{name}"] for name in params],
                               [optim[f"optim/v/{name}"] for name in params])
    return LoadedCheckpoint(model, state, metadata)
