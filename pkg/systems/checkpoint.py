"""
Binary checkpoint files, little-endian:

    magic "AGTF" | u32 format version | u64 header length | UTF-8 JSON header
    u64 tensor count | per tensor: u16 name length, name, u8 rank, u64 dims, f32 data

Tensors are written in name order; Adam moments are stored as "<param>.m" and
"<param>.v". The header is dumped with sorted keys, so save -> load -> save
reproduces the file byte for byte.
"""

import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np

from control.configs import ModelConfig, TrainConfig
from control.errors import AggSumError, CheckpointError, VocabularyMismatchError
from engine.model import ParameterSet, Summarizer, parameter_shapes
from engine.tensor import Tensor
from engine.training import AdamState, Trainer
from systems.logger import LoggerSingleton


MAGIC = b'AGTF'
FORMAT_VERSION = 1
MOMENT_SUFFIXES = ('.m', '.v')

_logger = LoggerSingleton.new_instance()


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: Dict[str, np.ndarray]
    adam_m: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0
    epoch: int = 0
    batch_in_epoch: int = 0
    step: int = 0
    epoch_loss_sum: float = 0.0
    epoch_tokens: int = 0
    best_val_loss: Optional[float] = None
    lr: float = 1e-4
    bad_epochs: int = 0
    vocab_hash: str = ''
    tokenizer: str = 'word'
    version: int = FORMAT_VERSION

    def header(self) -> Dict[str, Any]:
        return {
            'adam_t': self.adam_t,
            'bad_epochs': self.bad_epochs,
            'batch_in_epoch': self.batch_in_epoch,
            'best_val_loss': self.best_val_loss,
            'epoch': self.epoch,
            'epoch_loss_sum': self.epoch_loss_sum,
            'epoch_tokens': self.epoch_tokens,
            'lr': self.lr,
            'model_config': self.model_config.to_dict(),
            'step': self.step,
            'tokenizer': self.tokenizer,
            'train_config': self.train_config.to_dict(),
            'vocab_hash': self.vocab_hash,
        }

    def tensors(self) -> Dict[str, np.ndarray]:
        out = dict(self.params)
        for name, value in self.adam_m.items():
            out[name + '.m'] = value
        for name, value in self.adam_v.items():
            out[name + '.v'] = value
        return out

    def check_vocab(self, vocab_hash: str):
        if self.vocab_hash and vocab_hash != self.vocab_hash:
            raise VocabularyMismatchError(self.vocab_hash, vocab_hash)


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    header = json.dumps(checkpoint.header(), sort_keys=True, separators=(',', ':')).encode('utf-8')
    chunks = [MAGIC, struct.pack('<I', checkpoint.version), struct.pack('<Q', len(header)), header]
    tensors = checkpoint.tensors()
    chunks.append(struct.pack('<Q', len(tensors)))
    for name in sorted(tensors):
        data = np.ascontiguousarray(tensors[name], dtype='<f4')
        encoded = name.encode('utf-8')
        if data.ndim > 255:
            raise CheckpointError(f'rank {data.ndim} does not fit the format', name)
        chunks.append(struct.pack('<H', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack('<B', data.ndim))
        chunks.append(struct.pack(f'<{data.ndim}Q', *data.shape))
        chunks.append(data.tobytes())
    return b''.join(chunks)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.blob):
            raise CheckpointError(f'file is truncated while reading {what}', what)
        chunk = self.blob[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(blob: bytes) -> Checkpoint:
    reader = _Reader(blob)
    if reader.take(4, 'magic') != MAGIC:
        raise CheckpointError('not a checkpoint file (bad magic)', 'magic')
    (version,) = reader.unpack('<I', 'version')
    if version != FORMAT_VERSION:
        raise CheckpointError(f'format version {version} is not supported (expected {FORMAT_VERSION})', 'version')
    (header_len,) = reader.unpack('<Q', 'header length')
    try:
        header = json.loads(reader.take(header_len, 'header').decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f'header is not valid JSON: {e}', 'header')
    (count,) = reader.unpack('<Q', 'tensor count')
    tensors = {}
    for _ in range(count):
        (name_len,) = reader.unpack('<H', 'tensor name')
        name = reader.take(name_len, 'tensor name').decode('utf-8')
        (rank,) = reader.unpack('<B', name)
        dims = reader.unpack(f'<{rank}Q', name) if rank else ()
        size = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(reader.take(4 * size, name), dtype='<f4').reshape(dims)
        tensors[name] = data.astype(np.float32)
    if reader.offset != len(blob):
        raise CheckpointError(f'{len(blob) - reader.offset} unexpected trailing bytes', 'tensor count')

    try:
        model_config = ModelConfig.from_dict(header['model_config'])
        train_config = TrainConfig.from_dict(header['train_config'])
    except KeyError as e:
        raise CheckpointError('header field is missing', str(e.args[0]))
    except AggSumError as e:
        raise CheckpointError(f'stored configuration is invalid: {e}', 'model_config')

    params, adam_m, adam_v = {}, {}, {}
    for name, value in tensors.items():
        if name.endswith('.m') and name[:-2] in tensors:
            adam_m[name[:-2]] = value
        elif name.endswith('.v') and name[:-2] in tensors:
            adam_v[name[:-2]] = value
        else:
            params[name] = value
    for name, shape in parameter_shapes(model_config).items():
        if name not in params:
            raise CheckpointError('parameter is missing', name)
        if params[name].shape != shape:
            raise CheckpointError(f'shape {params[name].shape} does not match the config ({shape})', name)
        for moments, suffix in ((adam_m, '.m'), (adam_v, '.v')):
            if name in moments and moments[name].shape != shape:
                raise CheckpointError(f'moment shape {moments[name].shape} does not match {shape}', name + suffix)
    unknown = sorted(set(params) - set(parameter_shapes(model_config)))
    if unknown:
        raise CheckpointError(f'tensor is not part of the configured model', unknown[0])

    try:
        return Checkpoint(model_config=model_config, train_config=train_config, params=params,
                          adam_m=adam_m, adam_v=adam_v, adam_t=int(header['adam_t']),
                          epoch=int(header['epoch']), batch_in_epoch=int(header['batch_in_epoch']),
                          step=int(header['step']),
                          epoch_loss_sum=float(header.get('epoch_loss_sum', 0.0)),
                          epoch_tokens=int(header.get('epoch_tokens', 0)),
                          best_val_loss=header['best_val_loss'],
                          lr=float(header['lr']), bad_epochs=int(header['bad_epochs']),
                          vocab_hash=header['vocab_hash'], tokenizer=header.get('tokenizer', 'word'),
                          version=version)
    except KeyError as e:
        raise CheckpointError('header field is missing', str(e.args[0]))


def save_checkpoint(path: str, checkpoint: Checkpoint):
    folder = os.path.dirname(path)
    if folder and not os.path.exists(folder):
        os.makedirs(folder)
    blob = encode_checkpoint(checkpoint)
    # write next to the target, then swap, so a crash never leaves half a file
    temp_path = path + '.tmp'
    with open(temp_path, 'wb') as file:
        file.write(blob)
    os.replace(temp_path, path)
    _logger.add_debug(f'checkpoint written: {path} ({len(blob)} bytes)')


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, 'rb') as file:
            blob = file.read()
    except OSError as e:
        raise CheckpointError(f'cannot read {path}: {e.strerror}', 'path')
    return decode_checkpoint(blob)


# ------------------------------ model / trainer bridges ------------------------------

def checkpoint_from_trainer(trainer: Trainer, tokenizer: str = 'word') -> Checkpoint:
    params = trainer.summarizer.params
    return Checkpoint(
        model_config=trainer.summarizer.config,
        train_config=trainer.config,
        params={name: p.data.copy() for name, p in params.items()},
        adam_m={name: m.copy() for name, m in trainer.state.m.items()},
        adam_v={name: v.copy() for name, v in trainer.state.v.items()},
        adam_t=trainer.state.t,
        epoch=trainer.epoch,
        batch_in_epoch=trainer.batch_in_epoch,
        step=trainer.step,
        epoch_loss_sum=trainer.epoch_loss_sum,
        epoch_tokens=trainer.epoch_tokens,
        best_val_loss=trainer.schedule.best,
        lr=trainer.schedule.lr,
        bad_epochs=trainer.schedule.bad_epochs,
        vocab_hash=trainer.vocab_hash,
        tokenizer=tokenizer,
    )


def summarizer_from_checkpoint(checkpoint: Checkpoint, dtype=np.float32) -> Summarizer:
    tensors = OrderedDict(
        (name, Tensor(checkpoint.params[name].astype(dtype), requires_grad=True))
        for name in parameter_shapes(checkpoint.model_config))
    return Summarizer(checkpoint.model_config, ParameterSet(tensors))


def restore_trainer(trainer: Trainer, checkpoint: Checkpoint):
    """Load parameters, moments and position into an already built Trainer."""
    params = trainer.summarizer.params
    for name, param in params.items():
        param.data = checkpoint.params[name].astype(param.dtype)
    trainer.state = AdamState(
        {name: checkpoint.adam_m.get(name, np.zeros(p.shape)).astype(p.dtype) for name, p in params.items()},
        {name: checkpoint.adam_v.get(name, np.zeros(p.shape)).astype(p.dtype) for name, p in params.items()},
        checkpoint.adam_t)
    trainer.epoch = checkpoint.epoch
    trainer.batch_in_epoch = checkpoint.batch_in_epoch
    trainer.step = checkpoint.step
    trainer.epoch_loss_sum = checkpoint.epoch_loss_sum
    trainer.epoch_tokens = checkpoint.epoch_tokens
    trainer.schedule.lr = checkpoint.lr
    trainer.schedule.best = checkpoint.best_val_loss
    trainer.schedule.bad_epochs = checkpoint.bad_epochs
    _logger.add_info(f'resumed at epoch {checkpoint.epoch + 1}, step {checkpoint.step}')
