from dataclasses import dataclass, fields
from typing import Any, Dict, Mapping

from control.errors import ConfigError


AGG_METHODS = ('none', 'add', 'projection', 'attention')
TOKENIZER_MODES = ('word', 'bpe', 'char')
PRECISIONS = ('float32', 'float64')


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 512
    n_heads: int = 8
    n_enc: int = 4
    n_dec: int = 4
    d_ff: int = 2048
    agg_layers: int = 1
    agg_method: str = 'attention'
    use_pointer: bool = True
    max_positions: int = 512

    def __post_init__(self):
        if self.vocab_size < 5:
            raise ConfigError(f'must be at least 5 (4 specials + 1 token), got {self.vocab_size}', 'vocab_size')
        if self.d_model <= 0 or self.d_model % 2:
            raise ConfigError(f'must be a positive even number, got {self.d_model}', 'd_model')
        if self.n_heads <= 0 or self.d_model % self.n_heads:
            raise ConfigError(f'{self.n_heads} heads do not divide d_model={self.d_model}', 'n_heads')
        if self.n_enc < 1:
            raise ConfigError(f'must be >= 1, got {self.n_enc}', 'n_enc')
        if self.n_dec < 1:
            raise ConfigError(f'must be >= 1, got {self.n_dec}', 'n_dec')
        if self.d_ff < 1:
            raise ConfigError(f'must be >= 1, got {self.d_ff}', 'd_ff')
        if self.agg_method not in AGG_METHODS:
            raise ConfigError(f'must be one of {AGG_METHODS}, got {self.agg_method!r}', 'agg_method')
        if self.agg_method != 'none' and not 1 <= self.agg_layers <= self.n_enc - 1:
            raise ConfigError(f'must be in [1, n_enc-1={self.n_enc - 1}] for {self.agg_method} aggregation, '
                              f'got {self.agg_layers}', 'agg_layers')
        if self.max_positions < 2:
            raise ConfigError(f'must be >= 2, got {self.max_positions}', 'max_positions')

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'ModelConfig':
        return cls(**_known(cls, data))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    dropout: float = 0.1
    batch_size: int = 8
    max_epochs: int = 20
    truncate_len: int = 500
    seed: int = 1
    patience_epochs: int = 2
    lr_decay_factor: float = 0.5
    plateau_epsilon: float = 1e-4
    clip_norm: float = 2.0
    max_steps: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f'must be > 0, got {self.learning_rate}', 'learning_rate')
        for key in ('beta1', 'beta2'):
            value = getattr(self, key)
            if not 0.0 <= value < 1.0:
                raise ConfigError(f'must be in [0, 1), got {value}', key)
        if not self.adam_eps > 0:
            raise ConfigError(f'must be > 0, got {self.adam_eps}', 'adam_eps')
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f'must be in [0, 1), got {self.dropout}', 'dropout')
        if self.batch_size < 1:
            raise ConfigError(f'must be >= 1, got {self.batch_size}', 'batch_size')
        if self.max_epochs < 1:
            raise ConfigError(f'must be >= 1, got {self.max_epochs}', 'max_epochs')
        if self.truncate_len < 1:
            raise ConfigError(f'must be >= 1, got {self.truncate_len}', 'truncate_len')
        if self.patience_epochs < 1:
            raise ConfigError(f'must be >= 1, got {self.patience_epochs}', 'patience_epochs')
        if not 0.0 < self.lr_decay_factor < 1.0:
            raise ConfigError(f'must be in (0, 1), got {self.lr_decay_factor}', 'lr_decay_factor')
        if self.plateau_epsilon < 0:
            raise ConfigError(f'must be >= 0, got {self.plateau_epsilon}', 'plateau_epsilon')
        if self.clip_norm < 0:
            raise ConfigError(f'must be >= 0 (0 disables), got {self.clip_norm}', 'clip_norm')
        if self.max_steps < 0:
            raise ConfigError(f'must be >= 0 (0 means unlimited), got {self.max_steps}', 'max_steps')

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'TrainConfig':
        return cls(**_known(cls, data))


@dataclass(frozen=True)
class BeamConfig:
    beam_size: int = 10
    no_repeat_ngram: int = 3
    length_penalty_alpha: float = 2.0
    min_len: int = 50
    max_len: int = 120

    def __post_init__(self):
        if self.beam_size < 1:
            raise ConfigError(f'must be >= 1, got {self.beam_size}', 'beam_size')
        if self.no_repeat_ngram < 0:
            raise ConfigError(f'must be >= 0 (0 disables), got {self.no_repeat_ngram}', 'no_repeat_ngram')
        if self.length_penalty_alpha < 0:
            raise ConfigError(f'must be >= 0, got {self.length_penalty_alpha}', 'length_penalty')
        if self.min_len < 0:
            raise ConfigError(f'must be >= 0, got {self.min_len}', 'min_len')
        if self.max_len < 1 or self.min_len > self.max_len:
            raise ConfigError(f'need 1 <= max_len and min_len <= max_len, got {self.min_len}..{self.max_len}', 'max_len')


@dataclass(frozen=True)
class RunConfig:
    """Every key of the flat configuration file; each one is also a CLI flag."""
    # tokenizer
    tokenizer: str = 'word'
    vocab_size: int = 50000
    bpe_merges: int = 30000
    max_target_len: int = 120
    # model
    d_model: int = 512
    n_heads: int = 8
    n_enc: int = 4
    n_dec: int = 4
    d_ff: int = 2048
    dropout: float = 0.1
    agg_method: str = 'attention'
    agg_layers: int = 1
    pointer: bool = True
    max_positions: int = 512
    precision: str = 'float32'
    # training
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    max_epochs: int = 20
    truncate_len: int = 500
    seed: int = 1
    patience_epochs: int = 2
    lr_decay_factor: float = 0.5
    clip_norm: float = 2.0
    max_steps: int = 0
    # generation
    beam_size: int = 10
    no_repeat_ngram: int = 3
    length_penalty: float = 2.0
    min_len: int = 50
    max_len: int = 120
    workers: int = 1
    # files
    train_path: str = 'data/train.jsonl'
    valid_path: str = 'data/valid.jsonl'
    vocab_path: str = 'data/vocab.txt'
    merges_path: str = 'data/merges.txt'
    output_dir: str = 'runs/default'
    log_file: str = 'logs/log_agg_summarizer.log'

    def __post_init__(self):
        if self.tokenizer not in TOKENIZER_MODES:
            raise ConfigError(f'must be one of {TOKENIZER_MODES}, got {self.tokenizer!r}', 'tokenizer')
        if self.vocab_size < 5:
            raise ConfigError(f'must be >= 5, got {self.vocab_size}', 'vocab_size')
        if self.bpe_merges < 0:
            raise ConfigError(f'must be >= 0, got {self.bpe_merges}', 'bpe_merges')
        if self.max_target_len < 1:
            raise ConfigError(f'must be >= 1, got {self.max_target_len}', 'max_target_len')
        if self.precision not in PRECISIONS:
            raise ConfigError(f'must be one of {PRECISIONS}, got {self.precision!r}', 'precision')
        if self.workers < 1:
            raise ConfigError(f'must be >= 1, got {self.workers}', 'workers')
        if self.max_positions < max(self.truncate_len, self.max_target_len + 1, self.max_len + 1):
            raise ConfigError(f'{self.max_positions} cannot hold truncate_len={self.truncate_len}, '
                              f'max_target_len+1={self.max_target_len + 1} and max_len+1={self.max_len + 1}',
                              'max_positions')
        # sub-configs validate their own ranges
        self.train_config()
        self.beam_config()
        self.model_config(vocab_size=max(self.vocab_size, 5))

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def from_flat(cls, values: Mapping[str, Any]) -> 'RunConfig':
        """Build from string (or typed) values; unknown keys are rejected."""
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError('unknown configuration key', key)
            kwargs[key] = coerce_value(key, raw, types[key])
        return cls(**kwargs)

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, d_model=self.d_model, n_heads=self.n_heads,
                           n_enc=self.n_enc, n_dec=self.n_dec, d_ff=self.d_ff,
                           agg_layers=self.agg_layers, agg_method=self.agg_method,
                           use_pointer=self.pointer, max_positions=self.max_positions)

    def train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, beta1=self.beta1, beta2=self.beta2,
                           adam_eps=self.adam_eps, dropout=self.dropout, batch_size=self.batch_size,
                           max_epochs=self.max_epochs, truncate_len=self.truncate_len, seed=self.seed,
                           patience_epochs=self.patience_epochs, lr_decay_factor=self.lr_decay_factor,
                           clip_norm=self.clip_norm, max_steps=self.max_steps)

    def beam_config(self) -> BeamConfig:
        return BeamConfig(beam_size=self.beam_size, no_repeat_ngram=self.no_repeat_ngram,
                          length_penalty_alpha=self.length_penalty, min_len=self.min_len,
                          max_len=self.max_len)


_TRUE = ('1', 'true', 'yes', 'on')
_FALSE = ('0', 'false', 'no', 'off')


def coerce_value(key: str, raw: Any, kind) -> Any:
    if isinstance(kind, str):
        kind = {'int': int, 'float': float, 'bool': bool, 'str': str}[kind]
    if kind is bool:
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in _TRUE:
            return True
        if text in _FALSE:
            return False
        raise ConfigError(f'expected on/off, got {raw!r}', key)
    if kind is int:
        if isinstance(raw, bool):
            raise ConfigError(f'expected an integer, got {raw!r}', key)
        try:
            return int(str(raw).strip()) if not isinstance(raw, int) else raw
        except ValueError:
            raise ConfigError(f'expected an integer, got {raw!r}', key)
    if kind is float:
        try:
            return float(raw)
        except (TypeError, ValueError):
            raise ConfigError(f'expected a number, got {raw!r}', key)
    return str(raw).strip()


def _known(cls, data: Mapping[str, Any]) -> Dict[str, Any]:
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f'unknown fields {unknown} for {cls.__name__}')
    return dict(data)
