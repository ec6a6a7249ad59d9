"""
Aggregation Transformer: a Transformer encoder-decoder whose encoder final
states are re-distributed with history collected from earlier encoder layers,
plus an optional pointer (copy) output layer.

All functions are pure over (ParameterSet, ModelConfig, inputs); a model is
immutable during inference and can be shared by decoding workers.

Layer bookkeeping: `states[0]` is the embedded input U and `states[l]` is the
output of encoder layer l (1-based), so `states[N]` is the last layer.
"""

import math
from collections import OrderedDict
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from control.configs import ModelConfig
from control.data_models import EncodedPair
from control.errors import ConfigError, ContractError, EmbeddingIndexError, LengthError, ShapeError
from engine import tensor as T
from engine.tensor import Tensor
from engine.tokenizer import PAD, UNK


# ------------------------------ parameters ------------------------------

def _attention_shapes(prefix: str, d: int) -> List[Tuple[str, Tuple[int, ...]]]:
    return [(f'{prefix}.w_q', (d, d)), (f'{prefix}.w_k', (d, d)),
            (f'{prefix}.w_v', (d, d)), (f'{prefix}.w_o', (d, d))]


def _norm_shapes(prefix: str, d: int) -> List[Tuple[str, Tuple[int, ...]]]:
    return [(f'{prefix}.gain', (d,)), (f'{prefix}.bias', (d,))]


def _ff_shapes(prefix: str, d: int, d_ff: int) -> List[Tuple[str, Tuple[int, ...]]]:
    return [(f'{prefix}.w1', (d, d_ff)), (f'{prefix}.b1', (d_ff,)),
            (f'{prefix}.w2', (d_ff, d)), (f'{prefix}.b2', (d,))]


def parameter_shapes(config: ModelConfig) -> 'OrderedDict[str, Tuple[int, ...]]':
    """Names and shapes of every learnable tensor; a pure function of the config."""
    d, d_ff, V = config.d_model, config.d_ff, config.vocab_size
    shapes = [('embedding', (V, d))]
    for l in range(config.n_enc):
        p = f'encoder.{l}'
        shapes += _attention_shapes(f'{p}.self_attn', d) + _norm_shapes(f'{p}.norm1', d)
        shapes += _ff_shapes(f'{p}.ff', d, d_ff) + _norm_shapes(f'{p}.norm2', d)
    for l in range(config.n_dec):
        p = f'decoder.{l}'
        shapes += _attention_shapes(f'{p}.self_attn', d) + _norm_shapes(f'{p}.norm1', d)
        shapes += _attention_shapes(f'{p}.cross_attn', d) + _norm_shapes(f'{p}.norm2', d)
        shapes += _ff_shapes(f'{p}.ff', d, d_ff) + _norm_shapes(f'{p}.norm3', d)
    if config.agg_method == 'projection':
        shapes += [('aggregation.w_h', (config.agg_layers * d, d)), ('aggregation.b_h', (d,))]
        shapes += _attention_shapes('aggregation.attn', d)
    elif config.agg_method == 'attention':
        for i in range(config.agg_layers + 1):
            shapes += _attention_shapes(f'aggregation.attn{i}', d)
    shapes += [('output.w', (d, V)), ('output.b', (V,))]
    if config.use_pointer:
        shapes += [('pointer.w_dl', (d, 1)), ('pointer.b_gen', (1,)),
                   ('pointer.b_copy', (config.max_positions,))]
    return OrderedDict(shapes)


def parameter_names(config: ModelConfig) -> List[str]:
    return list(parameter_shapes(config))


def analytic_parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count, independent of parameter_shapes."""
    d, d_ff, V, L = config.d_model, config.d_ff, config.vocab_size, config.agg_layers
    attention = 4 * d * d
    norm = 2 * d
    ff = 2 * d * d_ff + d_ff + d
    count = V * d + V * d + V
    count += config.n_enc * (attention + ff + 2 * norm)
    count += config.n_dec * (2 * attention + ff + 3 * norm)
    if config.agg_method == 'projection':
        count += L * d * d + d + attention
    elif config.agg_method == 'attention':
        count += (L + 1) * attention
    if config.use_pointer:
        count += d + 1 + config.max_positions
    return count


class ParameterSet:
    """Named learnable tensors. Training needs exclusive access; inference only reads."""

    def __init__(self, tensors: 'OrderedDict[str, Tensor]'):
        self._tensors = OrderedDict(tensors)
        for name, tensor in self._tensors.items():
            tensor.name = name
            tensor.requires_grad = True

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> 'ParameterSet':
        rng = np.random.default_rng(seed)
        tensors = OrderedDict()
        for name, shape in parameter_shapes(config).items():
            leaf = name.rsplit('.', 1)[-1]
            if name == 'embedding':
                data = rng.normal(0.0, config.d_model ** -0.5, size=shape)
            elif leaf == 'gain':
                data = np.ones(shape)
            elif len(shape) == 2:
                bound = 1.0 / math.sqrt(shape[0])
                data = rng.uniform(-bound, bound, size=shape)
            else:
                data = np.zeros(shape)
            tensors[name] = Tensor(data.astype(dtype), requires_grad=True)
        return cls(tensors)

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise ContractError(f'no parameter named {name!r}')

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def names(self) -> List[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def values(self) -> List[Tensor]:
        return list(self._tensors.values())

    def count(self) -> int:
        return int(sum(t.size for t in self._tensors.values()))

    def zero_grad(self):
        for tensor in self._tensors.values():
            tensor.grad = None

    def with_extra(self, extra: Dict[str, Tensor]) -> 'ParameterSet':
        merged = OrderedDict(self._tensors)
        merged.update(extra)
        return ParameterSet(merged)

    def check_matches(self, config: ModelConfig):
        expected = parameter_shapes(config)
        for name, shape in expected.items():
            if name not in self._tensors:
                raise ShapeError(f'parameter {name} is missing')
            if self._tensors[name].shape != shape:
                raise ShapeError(f'parameter {name} has shape {self._tensors[name].shape}, config implies {shape}')


class Dropout:
    """Dropout settings for one forward pass; `off()` for inference."""

    def __init__(self, p: float = 0.0, training: bool = False, rng: Optional[np.random.Generator] = None):
        self.p = p
        self.training = training
        self.rng = rng

    @classmethod
    def off(cls) -> 'Dropout':
        return cls(0.0, False, None)

    def __call__(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.p, self.training, self.rng)


# ------------------------------ building blocks ------------------------------

@lru_cache(maxsize=16)
def _positional_table(max_len: int, d_model: int) -> np.ndarray:
    positions = np.arange(max_len, dtype=np.float64)[:, None]
    even = np.arange(0, d_model, 2, dtype=np.float64)
    angles = positions / np.power(10000.0, even / d_model)
    table = np.zeros((max_len, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    table.setflags(write=False)
    return table


def positional_encoding(max_len: int, d_model: int, dtype=None) -> Tensor:
    """PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(...); not learnable."""
    if d_model % 2:
        raise ConfigError(f'positional encoding needs an even width, got {d_model}', 'd_model')
    return T.constant(_positional_table(max_len, d_model).astype(dtype or T.get_default_dtype()))


def embed(ids: np.ndarray, params: ParameterSet, config: ModelConfig) -> Tensor:
    """Word embeddings plus sinusoidal position embeddings (E_w + E_p)."""
    ids = np.asarray(ids, dtype=np.int64)
    length = ids.shape[-1]
    if length > config.max_positions:
        raise LengthError(f'sequence of {length} tokens exceeds max_positions={config.max_positions}')
    table = params['embedding']
    words = T.embedding_lookup(table, ids)
    positions = T.constant(_positional_table(config.max_positions, config.d_model)[:length].astype(table.dtype))
    return T.add(words, positions)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = T.matmul(x, weight)
    return T.add(out, bias) if bias is not None else out


def scaled_dot_attention(Q: Tensor, K: Tensor, V: Tensor, mask=None, return_weights: bool = False):
    """softmax(Q K^T / sqrt(d_k) + mask) V; `mask` is True where a key is visible."""
    if Q.shape[-1] != K.shape[-1]:
        raise ShapeError(f'attention: query width {Q.shape} and key width {K.shape} differ')
    if K.shape[-2] != V.shape[-2]:
        raise ShapeError(f'attention: {K.shape[-2]} keys but {V.shape[-2]} values')
    d_k = Q.shape[-1]
    scores = T.scale(T.matmul(Q, T.swap_last(K)), 1.0 / math.sqrt(d_k))
    weights = T.softmax(scores, axis=-1, mask=mask)
    out = T.matmul(weights, V)
    return (out, weights) if return_weights else out


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, d_k = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * d_k))


def multi_head_attention(Q: Tensor, K: Tensor, V: Tensor, mask, params: ParameterSet,
                         prefix: str, n_heads: int) -> Tensor:
    """
    Concat(head_1..head_h) w_o with head_i = attention(Q w_q_i, K w_k_i, V w_v_i).

    Inputs are [batch, len, d_model] or unbatched [len, d_model]; `mask` is
    broadcastable to [batch, q_len, k_len] (True = visible key).
    """
    d_model = Q.shape[-1]
    if d_model % n_heads:
        raise ConfigError(f'{n_heads} heads do not divide width {d_model}', 'n_heads')
    unbatched = Q.ndim == 2
    if unbatched:
        Q, K, V = (T.reshape(x, (1,) + x.shape) for x in (Q, K, V))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        while mask.ndim < 3:
            mask = mask[None]
        mask = mask[:, None]
    q = _split_heads(T.matmul(Q, params[f'{prefix}.w_q']), n_heads)
    k = _split_heads(T.matmul(K, params[f'{prefix}.w_k']), n_heads)
    v = _split_heads(T.matmul(V, params[f'{prefix}.w_v']), n_heads)
    heads = scaled_dot_attention(q, k, v, mask)
    out = T.matmul(_merge_heads(heads), params[f'{prefix}.w_o'])
    if unbatched:
        out = T.reshape(out, out.shape[1:])
    return out


def position_wise_ff(x: Tensor, params: ParameterSet, prefix: str) -> Tensor:
    hidden = T.relu(linear(x, params[f'{prefix}.w1'], params[f'{prefix}.b1']))
    return linear(hidden, params[f'{prefix}.w2'], params[f'{prefix}.b2'])


def _norm(x: Tensor, params: ParameterSet, prefix: str) -> Tensor:
    return T.layer_norm(x, params[f'{prefix}.gain'], params[f'{prefix}.bias'])


def encoder_layer_forward(x: Tensor, params: ParameterSet, prefix: str, n_heads: int,
                          key_mask=None, drop: Dropout = None) -> Tensor:
    """h_s = Norm(MH(x, x, x) + x); out = Norm(PFF(h_s) + h_s). PAD keys are hidden by key_mask."""
    drop = drop or Dropout.off()
    attended = multi_head_attention(x, x, x, key_mask, params, f'{prefix}.self_attn', n_heads)
    h_s = _norm(T.add(drop(attended), x), params, f'{prefix}.norm1')
    fed = position_wise_ff(h_s, params, f'{prefix}.ff')
    return _norm(T.add(drop(fed), h_s), params, f'{prefix}.norm2')


def encoder_forward(U: Tensor, params: ParameterSet, config: ModelConfig,
                    key_mask=None, drop: Dropout = None) -> List[Tensor]:
    """All encoder layer outputs [h_el^(1) .. h_el^(N)]; aggregation needs the history."""
    length = U.shape[-2]
    if length == 0:
        raise ShapeError('encoder input is empty')
    if length > config.max_positions:
        raise LengthError(f'source of {length} tokens exceeds max_positions={config.max_positions}')
    outputs = []
    x = U
    for l in range(config.n_enc):
        x = encoder_layer_forward(x, params, f'encoder.{l}', config.n_heads, key_mask, drop)
        outputs.append(x)
    return outputs


def _check_window(layer_outputs: Sequence[Tensor], L: int):
    N = len(layer_outputs)
    if not 1 <= L <= N - 1:
        raise ConfigError(f'aggregation window L={L} needs 1 <= L <= N-1 with N={N} encoder layers',
                          'agg_layers')


def aggregate_add(layer_outputs: Sequence[Tensor], L: int) -> Tensor:
    """h_el^(N) + h_el^(N-1) + ... + h_el^(N-L), an unweighted sum."""
    _check_window(layer_outputs, L)
    N = len(layer_outputs)
    total = layer_outputs[N - 1]
    for l in range(N - 1, N - 1 - L, -1):
        total = T.add(total, layer_outputs[l - 1])
    return total


def aggregate_projection(layer_outputs: Sequence[Tensor], L: int, params: ParameterSet,
                         n_heads: int, key_mask=None) -> Tensor:
    """
    h^h = w^h Concat(h_el^(N-L) .. h_el^(N-1)) + b^h, then
    h^a = MH(Q=h^h, K=V=h_el^(N)).
    """
    _check_window(layer_outputs, L)
    N = len(layer_outputs)
    window = [layer_outputs[l - 1] for l in range(N - L, N)]
    concatenated = window[0] if L == 1 else T.concat_last_dim(window)
    history = linear(concatenated, params['aggregation.w_h'], params['aggregation.b_h'])
    last = layer_outputs[N - 1]
    return multi_head_attention(history, last, last, key_mask, params, 'aggregation.attn', n_heads)


def aggregate_attention(layer_outputs: Sequence[Tensor], L: int, params: ParameterSet,
                        n_heads: int, key_mask=None, embedded: Optional[Tensor] = None) -> Tensor:
    """
    Iterated history attention. The history starts at h_el^(N-L-1) (the
    embedded input U when N-L-1 = 0), then for l = N-L .. N-1
    h^h(l) = MH(Q=h^h(l-1), K=V=h_el^(l)); finally h^a = MH(Q=h^h(N-1), K=V=h_el^(N)).
    """
    _check_window(layer_outputs, L)
    N = len(layer_outputs)
    states = [embedded] + list(layer_outputs)
    if states[N - L - 1] is None:
        raise ContractError('attention aggregation over the first layer needs the embedded input')
    history = states[N - L - 1]
    for i, l in enumerate(range(N - L, N)):
        history = multi_head_attention(history, states[l], states[l], key_mask, params,
                                       f'aggregation.attn{i}', n_heads)
    return multi_head_attention(history, states[N], states[N], key_mask, params,
                                f'aggregation.attn{L}', n_heads)


def aggregate(config: ModelConfig, layer_outputs: Sequence[Tensor], params: ParameterSet,
              key_mask=None, embedded: Optional[Tensor] = None) -> Tensor:
    """The encoder final states handed to the decoder for config.agg_method."""
    if config.agg_method == 'none':
        return layer_outputs[-1]
    if config.agg_method == 'add':
        return aggregate_add(layer_outputs, config.agg_layers)
    if config.agg_method == 'projection':
        return aggregate_projection(layer_outputs, config.agg_layers, params, config.n_heads, key_mask)
    return aggregate_attention(layer_outputs, config.agg_layers, params, config.n_heads, key_mask, embedded)


def causal_mask(length: int) -> np.ndarray:
    """[1, length, length], True where step t may see step s <= t."""
    return np.tril(np.ones((length, length), dtype=bool))[None]


def decoder_layer_forward(y: Tensor, memory: Tensor, params: ParameterSet, prefix: str, n_heads: int,
                          self_mask=None, memory_mask=None, drop: Dropout = None) -> Tensor:
    """
    h_ms = Norm(MH*(y, y, y) + y) under the causal mask;
    h_d = Norm(MH(h_ms, memory, memory) + h_ms); out = Norm(PFF(h_d) + h_d).
    `memory` is h^a when aggregation is on, h_el^(N) otherwise.
    """
    drop = drop or Dropout.off()
    if self_mask is None:
        self_mask = causal_mask(y.shape[-2])
    attended = multi_head_attention(y, y, y, self_mask, params, f'{prefix}.self_attn', n_heads)
    h_ms = _norm(T.add(drop(attended), y), params, f'{prefix}.norm1')
    crossed = multi_head_attention(h_ms, memory, memory, memory_mask, params, f'{prefix}.cross_attn', n_heads)
    h_d = _norm(T.add(drop(crossed), h_ms), params, f'{prefix}.norm2')
    fed = position_wise_ff(h_d, params, f'{prefix}.ff')
    return _norm(T.add(drop(fed), h_d), params, f'{prefix}.norm3')


def pointer_gate(h_dl: Tensor, params: ParameterSet, config: ModelConfig) -> Tensor:
    """P_gen = sigmoid(h_dl w_dl + b_gen), shaped [..., tgt_len, 1] for broadcasting."""
    if not config.use_pointer:
        raise ContractError('pointer_gate called with the pointer disabled')
    return T.sigmoid(linear(h_dl, params['pointer.w_dl'], params['pointer.b_gen']))


def copy_attention(h_dl: Tensor, encoder_final: Tensor, params: ParameterSet, key_mask=None) -> Tensor:
    """alpha = softmax over source positions of h_dl u^T + b_copy, u the encoder final states."""
    source_len = encoder_final.shape[-2]
    scores = T.matmul(h_dl, T.swap_last(encoder_final))
    scores = T.add(scores, T.narrow(params['pointer.b_copy'], 0, 0, source_len))
    return T.softmax(scores, axis=-1, mask=key_mask)


def final_distribution(p_vocab: Tensor, alpha: Tensor, source_ext_ids, oov_count: int, p_gen) -> Tensor:
    """
    P_final = P_vocab * P_gen + P_copy * (1 - P_gen), where P_copy scatter-adds
    alpha_i onto the extended id of source position i and P_vocab is zero-padded
    over the oov slots.
    """
    ext_ids = np.asarray(source_ext_ids, dtype=np.int64)
    vocab_size = p_vocab.shape[-1]
    extended = vocab_size + oov_count
    if ext_ids.size and (ext_ids.max() >= extended or ext_ids.min() < 0):
        bad = ext_ids[(ext_ids >= extended) | (ext_ids < 0)].reshape(-1)[0]
        raise EmbeddingIndexError(int(bad), extended)
    if alpha.shape[-1] != ext_ids.shape[-1]:
        raise ShapeError(f'copy weights {alpha.shape} do not cover {ext_ids.shape[-1]} source positions')
    one_hot = np.zeros(ext_ids.shape + (extended,), dtype=p_vocab.dtype)
    np.put_along_axis(one_hot, ext_ids[..., None], 1.0, axis=-1)
    p_copy = T.matmul(alpha, T.constant(one_hot))
    if oov_count:
        pad = T.constant(np.zeros(p_vocab.shape[:-1] + (oov_count,), dtype=p_vocab.dtype))
        p_vocab = T.concat_last_dim([p_vocab, pad])
    if not isinstance(p_gen, Tensor):
        p_gen = T.constant(np.asarray(p_gen, dtype=p_vocab.dtype))
    return T.add(T.mul(p_copy, T.sub(1.0, p_gen)), T.mul(p_vocab, p_gen))


# ------------------------------ batching ------------------------------

@dataclass(frozen=True)
class Batch:
    source_ids: np.ndarray        # [B, S], PAD padded
    source_ext_ids: np.ndarray    # [B, S]
    source_mask: np.ndarray       # [B, S], True on real tokens
    decoder_input: np.ndarray     # [B, T], BOS-shifted target, in-vocabulary ids
    targets: np.ndarray           # [B, T], loss targets (extended ids in pointer mode)
    target_mask: np.ndarray       # [B, T], True on real steps
    oov_count: int

    @property
    def size(self) -> int:
        return self.source_ids.shape[0]

    def token_count(self) -> int:
        return int(self.target_mask.sum())


def collate(pairs: Sequence[EncodedPair], use_pointer: bool) -> Batch:
    """Pad a list of pairs to the longest source and target in the batch."""
    if not pairs:
        raise ContractError('cannot collate an empty batch')
    B = len(pairs)
    S = max(len(p.source_ids) for p in pairs)
    Tn = max(len(p.target_ids) - 1 for p in pairs)
    source_ids = np.full((B, S), PAD, dtype=np.int64)
    source_ext = np.full((B, S), PAD, dtype=np.int64)
    decoder_input = np.full((B, Tn), PAD, dtype=np.int64)
    targets = np.full((B, Tn), PAD, dtype=np.int64)
    for b, pair in enumerate(pairs):
        n = len(pair.source_ids)
        source_ids[b, :n] = pair.source_ids
        source_ext[b, :n] = pair.source_ext_ids if use_pointer else pair.source_ids
        full_target = pair.loss_targets(use_pointer)
        m = len(pair.target_ids) - 1
        decoder_input[b, :m] = pair.target_ids[:-1]
        targets[b, :m] = full_target[1:]
    oov_count = max(p.oov_count for p in pairs) if use_pointer else 0
    return Batch(source_ids, source_ext, source_ids != PAD, decoder_input, targets,
                 decoder_input != PAD, oov_count)


# ------------------------------ full model ------------------------------

class Memory(NamedTuple):
    states: List[Tensor]      # [U, h_el^(1), .., h_el^(N)]
    final: Tensor             # what the decoder attends to
    key_mask: np.ndarray      # [B, 1, S]


def encode_memory(params: ParameterSet, config: ModelConfig, source_ids: np.ndarray,
                  source_mask: Optional[np.ndarray] = None, drop: Dropout = None) -> Memory:
    """Run the encoder and the aggregation once per source."""
    drop = drop or Dropout.off()
    source_ids = np.asarray(source_ids, dtype=np.int64)
    if source_ids.ndim == 1:
        source_ids = source_ids[None]
    if source_ids.shape[-1] == 0:
        raise ShapeError('source is empty')
    if source_mask is None:
        source_mask = source_ids != PAD
    key_mask = np.asarray(source_mask, dtype=bool)[:, None, :]
    U = drop(embed(source_ids, params, config))
    layers = encoder_forward(U, params, config, key_mask, drop)
    final = aggregate(config, layers, params, key_mask, U)
    return Memory([U] + layers, final, key_mask)


def decoder_stack(params: ParameterSet, config: ModelConfig, memory: Memory,
                  decoder_input: np.ndarray, drop: Dropout = None) -> Tensor:
    drop = drop or Dropout.off()
    decoder_input = np.asarray(decoder_input, dtype=np.int64)
    length = decoder_input.shape[-1]
    if length > config.max_positions:
        raise LengthError(f'target of {length} tokens exceeds max_positions={config.max_positions}')
    y = drop(embed(decoder_input, params, config))
    self_mask = causal_mask(length)
    for l in range(config.n_dec):
        y = decoder_layer_forward(y, memory.final, params, f'decoder.{l}', config.n_heads,
                                  self_mask, memory.key_mask, drop)
    return y


def output_log_probs(params: ParameterSet, config: ModelConfig, memory: Memory, h_dl: Tensor,
                     source_ext_ids: np.ndarray, oov_count: int) -> Tensor:
    """log P_vocab, or log P_final when the pointer is on."""
    p_vocab = T.softmax(linear(h_dl, params['output.w'], params['output.b']), axis=-1)
    if not config.use_pointer:
        return T.log(p_vocab)
    p_gen = pointer_gate(h_dl, params, config)
    alpha = copy_attention(h_dl, memory.final, params, memory.key_mask)
    return T.log(final_distribution(p_vocab, alpha, source_ext_ids, oov_count, p_gen))


def forward(params: ParameterSet, config: ModelConfig, batch: Batch, drop: Dropout = None) -> Tensor:
    """Teacher-forced log-distributions [B, T, V (+ oov slots)] for every target step."""
    memory = encode_memory(params, config, batch.source_ids, batch.source_mask, drop)
    h_dl = decoder_stack(params, config, memory, batch.decoder_input, drop)
    return output_log_probs(params, config, memory, h_dl, batch.source_ext_ids, batch.oov_count)


def forward_pair(params: ParameterSet, config: ModelConfig, pair: EncodedPair) -> Tensor:
    return forward(params, config, collate([pair], config.use_pointer))


def reference_transformer_forward(params: ParameterSet, config: ModelConfig, batch: Batch) -> Tensor:
    """Plain Transformer path (last encoder layer to decoder, no pointer) for baseline checks."""
    key_mask = batch.source_mask[:, None, :]
    x = embed(batch.source_ids, params, config)
    for l in range(config.n_enc):
        x = encoder_layer_forward(x, params, f'encoder.{l}', config.n_heads, key_mask)
    y = embed(batch.decoder_input, params, config)
    mask = causal_mask(batch.decoder_input.shape[-1])
    for l in range(config.n_dec):
        y = decoder_layer_forward(y, x, params, f'decoder.{l}', config.n_heads, mask, key_mask)
    logits = linear(y, params['output.w'], params['output.b'])
    return T.log(T.softmax(logits, axis=-1))


class Summarizer:
    """A built model: config plus parameters, read-only during decoding."""

    def __init__(self, config: ModelConfig, params: ParameterSet):
        params.check_matches(config)
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> 'Summarizer':
        return cls(config, ParameterSet.initialize(config, seed, dtype))

    def forward(self, batch: Batch, drop: Dropout = None) -> Tensor:
        return forward(self.params, self.config, batch, drop)

    def start(self, source_ids: Sequence[int]) -> Memory:
        return encode_memory(self.params, self.config, np.asarray(source_ids, dtype=np.int64)[None])

    def step_log_probs(self, memory: Memory, prefixes: np.ndarray, source_ext_ids: Sequence[int],
                       oov_count: int) -> np.ndarray:
        """Next-token log-probabilities [n, V (+ oov)] for n prefixes sharing one source."""
        prefixes = np.asarray(prefixes, dtype=np.int64)
        prefixes = np.where(prefixes >= self.config.vocab_size, UNK, prefixes)
        h_dl = decoder_stack(self.params, self.config, memory, prefixes)
        ext = np.asarray(source_ext_ids, dtype=np.int64)[None]
        log_probs = output_log_probs(self.params, self.config, memory, h_dl, ext, oov_count)
        return log_probs.data[:, -1, :]
