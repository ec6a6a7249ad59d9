"""
Teacher-forced NLL training with Adam, global-norm clipping and the
validation-plateau learning-rate rule.

Randomness is keyed, not streamed: the batch order of an epoch comes from
(seed, epoch) and the dropout masks of a step from (seed, step). A run resumed
from a checkpoint therefore replays exactly the batches and masks the
uninterrupted run would have seen.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from control.configs import TrainConfig
from control.data_models import CorpusRecord, EncodedPair
from control.errors import ConfigError, ContractError, CorpusFormatError, EmptyInputError, TrainingError
from engine import tensor as T
from engine.model import Batch, Dropout, ParameterSet, Summarizer, collate
from engine.tensor import Tape, Tensor
from engine.tokenizer import Tokenizer
from systems.logger import LoggerSingleton


_logger = LoggerSingleton.new_instance()


# ------------------------------ loss ------------------------------

def nll_loss(log_probs: Tensor, targets, pad_mask=None, reduction: str = 'mean') -> Tensor:
    """
    -log p(y_t | y_<t, X) over unmasked steps, averaged per token ('mean') or
    summed ('sum'). log_probs is [..., T, V_ext]; targets and pad_mask are [..., T].
    """
    targets = np.asarray(targets, dtype=np.int64)
    if log_probs.shape[:-1] != targets.shape:
        raise ContractError(f'nll_loss: log_probs {log_probs.shape} do not match targets {targets.shape}')
    mask = np.ones(targets.shape, dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ContractError('nll_loss: every target step is masked')
    picked = T.reshape(T.gather_last(log_probs, targets), targets.shape)
    weights = mask.astype(log_probs.dtype)
    if reduction == 'mean':
        weights = weights / log_probs.dtype.type(count)
    elif reduction != 'sum':
        raise ContractError(f'unknown reduction {reduction!r}')
    return T.neg(T.sum(T.mul(picked, T.constant(weights))))


def per_pair_losses(log_probs: Tensor, targets, pad_mask) -> Tuple[np.ndarray, np.ndarray]:
    """Summed NLL and token count per batch row (the additive per-pair form)."""
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(pad_mask, dtype=bool)
    picked = np.take_along_axis(log_probs.data, targets[..., None], axis=-1)[..., 0]
    sums = -(picked * mask).sum(axis=-1).astype(np.float64)
    return sums, mask.sum(axis=-1)


def batch_loss(summarizer: Summarizer, batch: Batch, drop: Dropout = None, reduction: str = 'mean') -> Tensor:
    log_probs = summarizer.forward(batch, drop)
    return nll_loss(log_probs, batch.targets, batch.target_mask, reduction)


# ------------------------------ optimizer ------------------------------

@dataclass
class AdamState:
    """First/second moments per parameter name and the step counter t."""
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: ParameterSet) -> 'AdamState':
        return cls({n: np.zeros_like(p.data) for n, p in params.items()},
                   {n: np.zeros_like(p.data) for n, p in params.items()}, 0)


def adam_step(params: ParameterSet, state: AdamState, lr: float, grads: Optional[Mapping[str, np.ndarray]] = None,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """
    One bias-corrected Adam update, in place. Gradients come from `grads` or
    each parameter's .grad (missing means zero) and are left untouched.
    """
    grads = {} if grads is None else grads
    for name, param in params.items():
        grad = grads.get(name, param.grad)
        if grad is None:
            grad = np.zeros_like(param.data)
        if grad.shape != param.shape:
            raise TrainingError(f'gradient shape {grad.shape} does not match {param.shape}', name)
        if not np.all(np.isfinite(grad)):
            raise TrainingError('non-finite gradient', name)
    state.t += 1
    t = state.t
    for name, param in params.items():
        grad = grads.get(name, param.grad)
        if grad is None:
            grad = np.zeros_like(param.data)
        m = state.m.setdefault(name, np.zeros_like(param.data))
        v = state.v.setdefault(name, np.zeros_like(param.data))
        m[...] = beta1 * m + (1.0 - beta1) * grad
        v[...] = beta2 * v + (1.0 - beta2) * grad * grad
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        param.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)


def clip_grad_norm(params: ParameterSet, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm; returns the norm before clipping."""
    squares = 0.0
    for param in params.values():
        if param.grad is not None:
            squares += float(np.sum(np.square(param.grad, dtype=np.float64)))
    norm = math.sqrt(squares)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-6)
        for param in params.values():
            if param.grad is not None:
                param.grad = (param.grad * factor).astype(param.dtype)
    return norm


# ------------------------------ schedule ------------------------------

@dataclass
class PlateauSchedule:
    """Halve the rate once validation loss has not improved for `patience` epochs in a row."""
    lr: float
    patience: int = 2
    factor: float = 0.5
    epsilon: float = 1e-4
    best: Optional[float] = None
    bad_epochs: int = 0

    def step(self, val_loss: float) -> bool:
        """Record one epoch; returns True when the rate was decayed."""
        if self.best is None or val_loss < self.best - self.epsilon:
            self.best = val_loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.lr *= self.factor
            self.bad_epochs = 0
            return True
        return False


def simulate_lr_schedule(val_losses: Sequence[float], initial_lr: float, patience: int = 2,
                         factor: float = 0.5, epsilon: float = 1e-4) -> List[float]:
    """The learning rate in force after each epoch."""
    schedule = PlateauSchedule(initial_lr, patience, factor, epsilon)
    rates = []
    for loss in val_losses:
        schedule.step(loss)
        rates.append(schedule.lr)
    return rates


def lr_schedule_update(val_losses: Sequence[float], current_lr: float, patience: int = 2,
                       factor: float = 0.5, epsilon: float = 1e-4) -> float:
    """The rate after the last epoch of val_losses, given the rate before it."""
    if not val_losses:
        raise ContractError('lr_schedule_update needs at least one completed epoch')
    schedule = PlateauSchedule(1.0, patience, factor, epsilon)
    decayed = False
    for loss in val_losses:
        decayed = schedule.step(loss)
    return current_lr * factor if decayed else current_lr


# ------------------------------ data ------------------------------

def encode_records(records: Iterable[CorpusRecord], tokenizer: Tokenizer, truncate_len: int,
                   max_target_len: int) -> List[EncodedPair]:
    pairs = []
    for record in records:
        try:
            pairs.append(tokenizer.encode_pair(record.article, record.summary, truncate_len, max_target_len))
        except EmptyInputError as e:
            raise CorpusFormatError(str(e), line=record.line) from e
    return pairs


def batch_order(count: int, batch_size: int, seed: int, epoch: int) -> List[List[int]]:
    """Shuffled index batches for one epoch; a pure function of (seed, epoch)."""
    order = np.random.default_rng([seed, epoch]).permutation(count)
    return [order[i:i + batch_size].tolist() for i in range(0, count, batch_size)]


def make_batches(pairs: Sequence[EncodedPair], batch_size: int, use_pointer: bool,
                 seed: Optional[int] = None, epoch: int = 0) -> List[Batch]:
    """Collated batches, shuffled by (seed, epoch) or in input order when seed is None."""
    if seed is None:
        groups = [list(range(i, min(i + batch_size, len(pairs)))) for i in range(0, len(pairs), batch_size)]
    else:
        groups = batch_order(len(pairs), batch_size, seed, epoch)
    return [collate([pairs[i] for i in group], use_pointer) for group in groups]


def step_dropout(config: TrainConfig, step: int) -> Dropout:
    if config.dropout == 0.0:
        return Dropout.off()
    return Dropout(config.dropout, True, np.random.default_rng([config.seed, 1, step]))


def train_step(summarizer: Summarizer, batch: Batch, state: AdamState, lr: float, config: TrainConfig,
               step: int) -> float:
    """Forward, backward, clip and update on one batch; returns the batch loss."""
    params = summarizer.params
    params.zero_grad()
    with Tape() as tape:
        loss = batch_loss(summarizer, batch, step_dropout(config, step))
        tape.backward(loss)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(f'loss became {value} at step {step}')
    if config.clip_norm > 0:
        clip_grad_norm(params, config.clip_norm)
    adam_step(params, state, lr, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
    params.zero_grad()
    return value


def train_epoch(summarizer: Summarizer, pairs: Sequence[EncodedPair], config: TrainConfig, state: AdamState,
                lr: float, epoch: int, first_step: int = 0) -> float:
    """One pass over the shuffled data; returns the token-weighted mean training loss."""
    if not pairs:
        raise ConfigError('training set is empty', 'train_path')
    total, tokens = 0.0, 0
    step = first_step
    for batch in make_batches(pairs, config.batch_size, summarizer.config.use_pointer, config.seed, epoch):
        loss = train_step(summarizer, batch, state, lr, config, step)
        total += loss * batch.token_count()
        tokens += batch.token_count()
        step += 1
    return total / tokens


def evaluate_loss(summarizer: Summarizer, pairs: Sequence[EncodedPair], batch_size: int = 8) -> float:
    """Per-token mean NLL over a dataset, independent of batch size."""
    if not pairs:
        raise ConfigError('validation set is empty', 'valid_path')
    total, tokens = 0.0, 0
    for batch in make_batches(pairs, batch_size, summarizer.config.use_pointer):
        total += float(batch_loss(summarizer, batch, reduction='sum').item())
        tokens += batch.token_count()
    return total / tokens


# ------------------------------ trainer ------------------------------

class Trainer:
    """
    Owns the mutable training state of one run: parameters, Adam moments,
    position (epoch, batch within epoch, global step) and the plateau schedule.
    """

    def __init__(self, summarizer: Summarizer, config: TrainConfig, train_pairs: Sequence[EncodedPair],
                 valid_pairs: Sequence[EncodedPair] = (), vocab_hash: str = '',
                 on_epoch: Optional[Callable[[Dict[str, object]], None]] = None,
                 on_checkpoint: Optional[Callable[[str, 'Trainer'], None]] = None):
        if not train_pairs:
            raise ConfigError('training set is empty', 'train_path')
        self.summarizer = summarizer
        self.config = config
        self.train_pairs = list(train_pairs)
        self.valid_pairs = list(valid_pairs)
        self.vocab_hash = vocab_hash
        self.on_epoch = on_epoch
        self.on_checkpoint = on_checkpoint
        self.state = AdamState.for_params(summarizer.params)
        self.schedule = PlateauSchedule(config.learning_rate, config.patience_epochs,
                                        config.lr_decay_factor, config.plateau_epsilon)
        self.epoch = 0
        self.batch_in_epoch = 0
        self.step = 0
        # token-weighted running loss of the current epoch
        self.epoch_loss_sum = 0.0
        self.epoch_tokens = 0
        self.history: List[Dict[str, object]] = []

    @property
    def lr(self) -> float:
        return self.schedule.lr

    @property
    def best_val_loss(self) -> Optional[float]:
        return self.schedule.best

    def _epoch_batches(self) -> List[List[int]]:
        return batch_order(len(self.train_pairs), self.config.batch_size, self.config.seed, self.epoch)

    def _limit_reached(self) -> bool:
        return self.config.max_steps > 0 and self.step >= self.config.max_steps

    def train_steps(self, count: int) -> List[float]:
        """Run `count` optimizer steps from the current position, crossing epochs without validation."""
        losses = []
        while len(losses) < count:
            groups = self._epoch_batches()
            if self.batch_in_epoch >= len(groups):
                self._close_epoch()
                continue
            losses.append(self._next_batch(groups))
        return losses

    def _next_batch(self, groups: List[List[int]]) -> float:
        batch = collate([self.train_pairs[i] for i in groups[self.batch_in_epoch]],
                        self.summarizer.config.use_pointer)
        loss = train_step(self.summarizer, batch, self.state, self.lr, self.config, self.step)
        self.epoch_loss_sum += loss * batch.token_count()
        self.epoch_tokens += batch.token_count()
        self.batch_in_epoch += 1
        self.step += 1
        return loss

    def _close_epoch(self):
        self.epoch += 1
        self.batch_in_epoch = 0
        self.epoch_loss_sum = 0.0
        self.epoch_tokens = 0

    def run_epoch(self) -> Optional[Dict[str, object]]:
        """
        Finish the current epoch, validate, apply the schedule; returns the epoch
        record. When max_steps stops it mid-epoch, only `last` is written and None
        is returned, so a resumed run continues inside the same epoch.
        """
        groups = self._epoch_batches()
        while self.batch_in_epoch < len(groups) and not self._limit_reached():
            self._next_batch(groups)
        if self.batch_in_epoch < len(groups):
            _logger.add_info(f'step limit {self.config.max_steps} reached in epoch {self.epoch + 1} '
                             f'at batch {self.batch_in_epoch}/{len(groups)}')
            if self.on_checkpoint is not None:
                self.on_checkpoint('last', self)
            return None
        train_loss = self.epoch_loss_sum / self.epoch_tokens if self.epoch_tokens else float('nan')
        val_loss = evaluate_loss(self.summarizer, self.valid_pairs, self.config.batch_size) if self.valid_pairs else train_loss
        previous_best = self.schedule.best
        lr_used = self.lr
        if self.schedule.step(val_loss):
            _logger.add_info(f'validation loss flat for {self.config.patience_epochs} epochs, '
                             f'learning rate {lr_used:g} -> {self.lr:g}')
        record = {'epoch': self.epoch + 1, 'step': self.step, 'train_loss': train_loss,
                  'val_loss': val_loss, 'lr': lr_used}
        self.history.append(record)
        _logger.add_info(f'epoch {self.epoch + 1}: train {train_loss:.4f}, valid {val_loss:.4f}, lr {lr_used:g}')
        self._close_epoch()
        if self.on_epoch is not None:
            self.on_epoch(record)
        if self.on_checkpoint is not None:
            self.on_checkpoint('last', self)
            if previous_best is None or self.schedule.best != previous_best:
                self.on_checkpoint('best', self)
        return record

    def fit(self) -> List[Dict[str, object]]:
        while self.epoch < self.config.max_epochs and not self._limit_reached():
            if self.run_epoch() is None:
                break
        return self.history
