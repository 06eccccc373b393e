# vim: ai:sw=4:ts=4:sta:et:fo=croql
"""
Single-file checkpoint container.

Layout::

    b'LADDRCKP'                    magic
    uint64 little-endian           header length
    header                         UTF-8 JSON, sorted keys
    payload                        raw little-endian tensor bytes
    sha256                         over everything above

The header carries the format version, stage tag, counters, config snapshots,
non-tensor optimizer state, generator states and a tensor directory
(name, dtype, shape, byte offset, byte count).
"""
import dataclasses
import hashlib
import json
import logging
import os
import pathlib
import struct
import tempfile
from typing import Any, Dict, List, Optional, Tuple, Union

import deepdiff
import numpy as np
import torch
from torch import nn

from ladder_vfi import config


_LOGGER: logging.Logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION: int = 1
MAGIC: bytes = b'LADDRCKP'
_LENGTH_FORMAT: str = '<Q'
_LENGTH_SIZE: int = struct.calcsize(_LENGTH_FORMAT)
_CHECKSUM_SIZE: int = hashlib.sha256().digest_size
_MODEL_PREFIX: str = 'model.'
_OPTIMIZER_PREFIX: str = 'optimizer.'
_RNG_PREFIX: str = 'rng.'
_TORCH_TO_NUMPY: Dict[torch.dtype, str] = {
    torch.float16: '<f2',
    torch.float32: '<f4',
    torch.float64: '<f8',
    torch.int8: '|i1',
    torch.uint8: '|u1',
    torch.int16: '<i2',
    torch.int32: '<i4',
    torch.int64: '<i8',
    torch.bool: '|b1',
}
_NAME_TO_TORCH: Dict[str, torch.dtype] = {
    str(dtype).replace('torch.', ''): dtype for dtype in _TORCH_TO_NUMPY
}

PathLike = Union[str, pathlib.Path]


class CheckpointError(ValueError):
    """Unreadable, corrupted or incompatible checkpoint."""


@dataclasses.dataclass
class Checkpoint:  # pylint: disable=too-many-instance-attributes
    """
    Everything needed to resume or continue training.

    ``rng_state`` maps names to either tensors (e.g. the torch generator state) or
    JSON values (e.g. a numpy bit generator state).
    """

    model_state: Dict[str, torch.Tensor]
    model_config: config.ModelConfig
    stage: config.TrainingStage
    epoch: int = 0
    step: int = 0
    optimizer_state: Optional[Dict[str, Any]] = None
    train_config: Optional[config.TrainConfig] = None
    rng_state: Dict[str, Any] = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        self.stage = config.TrainingStage(self.stage)


def capture_checkpoint(
    model: nn.Module,
    *,
    stage: config.TrainingStage,
    epoch: int = 0,
    step: int = 0,
    optimizer: Optional[torch.optim.Optimizer] = None,
    train_config: Optional[config.TrainConfig] = None,
    rng_state: Optional[Dict[str, Any]] = None,
) -> Checkpoint:
    """Snapshot of a :py:class:`ladder_vfi.model.LadderModel` and its optimizer."""
    return Checkpoint(
        model_state={
            name: tensor.detach().cpu().clone() for name, tensor in model.state_dict().items()
        },
        model_config=model.config,
        stage=stage,
        epoch=epoch,
        step=step,
        optimizer_state=optimizer.state_dict() if optimizer is not None else None,
        train_config=train_config,
        rng_state=dict(rng_state or {}),
    )


# ----------------------------------------------------------------------------- encoding


def _split_optimizer_state(
    optimizer_state: Dict[str, Any]
) -> Tuple[Dict[str, torch.Tensor], Dict[str, Any]]:
    tensors: Dict[str, torch.Tensor] = {}
    scalars: Dict[str, Dict[str, Any]] = {}
    for param_id, values in optimizer_state['state'].items():
        for key, value in values.items():
            if isinstance(value, torch.Tensor):
                tensors[f'{_OPTIMIZER_PREFIX}{param_id}.{key}'] = value
            else:
                scalars.setdefault(str(param_id), {})[key] = value
    header = {
        'param_groups': _jsonable(optimizer_state['param_groups']),
        'scalars': scalars,
    }
    return tensors, header


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(key): _jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(item) for item in value]
    return value


def _tensor_bytes(name: str, tensor: torch.Tensor) -> bytes:
    dtype = _TORCH_TO_NUMPY.get(tensor.dtype)
    if dtype is None:
        raise CheckpointError(f'Tensor <{name}> has unsupported dtype <{tensor.dtype}>.')
    array = tensor.detach().cpu().contiguous().numpy()
    return array.astype(np.dtype(dtype), copy=False).tobytes()


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    """Serializes ``ckpt``; equal checkpoints give equal bytes."""
    tensors: List[Tuple[str, torch.Tensor]] = [
        (_MODEL_PREFIX + name, tensor) for name, tensor in ckpt.model_state.items()
    ]
    optimizer_header = None
    if ckpt.optimizer_state is not None:
        optimizer_tensors, optimizer_header = _split_optimizer_state(ckpt.optimizer_state)
        tensors.extend(optimizer_tensors.items())
    rng_header: Dict[str, Any] = {}
    for name, value in ckpt.rng_state.items():
        if isinstance(value, torch.Tensor):
            tensors.append((_RNG_PREFIX + name, value))
        else:
            rng_header[name] = _jsonable(value)
    directory: List[Dict[str, Any]] = []
    payload = bytearray()
    for name, tensor in tensors:
        data = _tensor_bytes(name, tensor)
        directory.append(
            {
                'name': name,
                'dtype': str(tensor.dtype).replace('torch.', ''),
                'shape': list(tensor.shape),
                'offset': len(payload),
                'nbytes': len(data),
            }
        )
        payload.extend(data)
    header = {
        'format_version': CHECKPOINT_FORMAT_VERSION,
        'stage': ckpt.stage.value,
        'epoch': ckpt.epoch,
        'step': ckpt.step,
        'model_config': config.config_snapshot(ckpt.model_config),
        'train_config': (
            config.config_snapshot(ckpt.train_config) if ckpt.train_config else None
        ),
        'optimizer': optimizer_header,
        'rng': rng_header,
        'tensors': directory,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
    body = MAGIC + struct.pack(_LENGTH_FORMAT, len(header_bytes)) + header_bytes + bytes(payload)
    return body + hashlib.sha256(body).digest()


def _read_body(blob: bytes, source: str) -> Tuple[Dict[str, Any], memoryview]:
    minimum = len(MAGIC) + _LENGTH_SIZE + _CHECKSUM_SIZE
    if len(blob) < minimum or not blob.startswith(MAGIC):
        raise CheckpointError(f'<{source}> is not a checkpoint or is truncated.')
    body, checksum = blob[:-_CHECKSUM_SIZE], blob[-_CHECKSUM_SIZE:]
    if hashlib.sha256(body).digest() != checksum:
        raise CheckpointError(f'Checksum mismatch in <{source}>: file is corrupted or truncated.')
    (header_length,) = struct.unpack_from(_LENGTH_FORMAT, body, len(MAGIC))
    header_start = len(MAGIC) + _LENGTH_SIZE
    header_end = header_start + header_length
    if header_end > len(body):
        raise CheckpointError(f'Header of <{source}> overruns the file.')
    try:
        header = json.loads(body[header_start:header_end].decode('utf-8'))
    except ValueError as err:
        raise CheckpointError(f'Header of <{source}> is not valid JSON. Error: {err}') from err
    version = header.get('format_version')
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f'Unsupported checkpoint format version <{version}> in <{source}>, '
            f'expected <{CHECKPOINT_FORMAT_VERSION}>.'
        )
    return header, memoryview(body)[header_end:]


def _decode_tensors(
    directory: List[Dict[str, Any]], payload: memoryview, source: str
) -> Dict[str, torch.Tensor]:
    tensors: Dict[str, torch.Tensor] = {}
    for entry in directory:
        name, offset, nbytes = entry['name'], entry['offset'], entry['nbytes']
        dtype = _NAME_TO_TORCH.get(entry['dtype'])
        if dtype is None:
            raise CheckpointError(f'Tensor <{name}> in <{source}> has unknown dtype.')
        if offset < 0 or offset + nbytes > len(payload):
            raise CheckpointError(f'Tensor <{name}> in <{source}> overruns the payload.')
        array = np.frombuffer(
            payload[offset : offset + nbytes], dtype=np.dtype(_TORCH_TO_NUMPY[dtype])
        )
        expected = int(np.prod(entry['shape'], dtype=np.int64))
        if array.size != expected:
            raise CheckpointError(f'Tensor <{name}> in <{source}> has a wrong byte count.')
        tensors[name] = torch.from_numpy(array.reshape(entry['shape']).copy())
    return tensors


def decode_checkpoint(blob: bytes, *, source: str = '<bytes>') -> Checkpoint:
    """
    Inverse of :py:func:`encode_checkpoint`. The checksum is verified before anything
    else is read.

    Raises:
        CheckpointError: bad magic, checksum mismatch, truncation or unknown version.
    """
    header, payload = _read_body(blob, source)
    tensors = _decode_tensors(header['tensors'], payload, source)
    model_state = {
        name[len(_MODEL_PREFIX) :]: tensor
        for name, tensor in tensors.items()
        if name.startswith(_MODEL_PREFIX)
    }
    rng_state: Dict[str, Any] = dict(header.get('rng') or {})
    rng_state.update(
        {
            name[len(_RNG_PREFIX) :]: tensor
            for name, tensor in tensors.items()
            if name.startswith(_RNG_PREFIX)
        }
    )
    optimizer_state = None
    if header.get('optimizer') is not None:
        state: Dict[int, Dict[str, Any]] = {}
        for param_id, values in header['optimizer']['scalars'].items():
            state.setdefault(int(param_id), {}).update(values)
        for name, tensor in tensors.items():
            if name.startswith(_OPTIMIZER_PREFIX):
                param_id, key = name[len(_OPTIMIZER_PREFIX) :].split('.', 1)
                state.setdefault(int(param_id), {})[key] = tensor
        optimizer_state = {
            'state': dict(sorted(state.items())),
            'param_groups': header['optimizer']['param_groups'],
        }
    try:
        model_config = config.model_config_from_snapshot(header['model_config'])
        train_config = (
            config.train_config_from_snapshot(header['train_config'])
            if header.get('train_config')
            else None
        )
        stage = config.TrainingStage(header['stage'])
    except (KeyError, TypeError, ValueError) as err:
        raise CheckpointError(f'Invalid configuration in <{source}>. Error: {err}') from err
    return Checkpoint(
        model_state=model_state,
        model_config=model_config,
        stage=stage,
        epoch=int(header['epoch']),
        step=int(header['step']),
        optimizer_state=optimizer_state,
        train_config=train_config,
        rng_state=rng_state,
    )


# ----------------------------------------------------------------------------- files


def save_checkpoint(ckpt: Checkpoint, path: PathLike) -> pathlib.Path:
    """
    Writes ``ckpt`` atomically: a temporary file in the target directory is renamed
    over ``path`` once complete.
    """
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_checkpoint(ckpt)
    with tempfile.NamedTemporaryFile(
        dir=path.parent, prefix=f'.{path.name}.', suffix='.tmp', delete=False
    ) as tmp:
        tmp.write(blob)
        tmp.flush()
        os.fsync(tmp.fileno())
        tmp_path = pathlib.Path(tmp.name)
    try:
        os.replace(tmp_path, path)
    except OSError:
        tmp_path.unlink(missing_ok=True)
        raise
    _LOGGER.info(
        'Saved checkpoint <%s> for stage <%s> at step <%s>.', path, ckpt.stage.value, ckpt.step
    )
    return path


def load_checkpoint(
    path: PathLike, *, expected_config: Optional[config.ModelConfig] = None
) -> Checkpoint:
    """
    Reads and verifies a checkpoint.

    Args:
        path: checkpoint file.
        expected_config: (optional) model configuration the checkpoint must match.

    Raises:
        FileNotFoundError: naming ``path``.
        CheckpointError: corrupted file or incompatible configuration.
    """
    path = pathlib.Path(path)
    if not path.is_file():
        raise FileNotFoundError(f'Checkpoint <{path}> does not exist.')
    ckpt = decode_checkpoint(path.read_bytes(), source=str(path))
    if expected_config is not None:
        check_compatible(ckpt.model_config, expected_config)
    _LOGGER.info(
        'Loaded checkpoint <%s> (stage <%s>, step <%s>).', path, ckpt.stage.value, ckpt.step
    )
    return ckpt


def config_differences(
    stored: config.ModelConfig, expected: config.ModelConfig
) -> List[str]:
    """
    One ``'<field>: checkpoint <a> != expected <b>'`` line per differing field.
    """
    stored_snapshot = config.config_snapshot(stored)
    expected_snapshot = config.config_snapshot(expected)
    diff = deepdiff.DeepDiff(stored_snapshot, expected_snapshot, view='tree')
    fields = sorted(
        {
            level.path(output_format='list')[0]
            for levels in diff.values()
            for level in levels
            if level.path(output_format='list')
        }
    )
    return [
        f'{field}: checkpoint {stored_snapshot.get(field)} != '
        f'expected {expected_snapshot.get(field)}'
        for field in fields
    ]


def check_compatible(stored: config.ModelConfig, expected: config.ModelConfig) -> None:
    """
    Raises:
        CheckpointError: listing every field that differs.
    """
    differences = config_differences(stored, expected)
    if differences:
        raise CheckpointError('Incompatible checkpoint configuration: ' + '; '.join(differences))


def apply_checkpoint(
    model: nn.Module,
    ckpt: Checkpoint,
    optimizer: Optional[torch.optim.Optimizer] = None,
) -> None:
    """
    Loads weights (and optionally optimizer state) after checking compatibility, so a
    mismatched checkpoint leaves ``model`` untouched.
    """
    check_compatible(ckpt.model_config, model.config)
    try:
        model.load_state_dict(ckpt.model_state, strict=True)
        if optimizer is not None and ckpt.optimizer_state is not None:
            optimizer.load_state_dict(ckpt.optimizer_state)
    except (RuntimeError, ValueError, KeyError) as err:
        raise CheckpointError(f'Checkpoint does not fit the model. Error: {err}') from err
