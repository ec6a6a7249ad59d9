import math
from collections import OrderedDict
from dataclasses import replace

import numpy as np
import pytest

from conftest import TOY_WORDS, toy_model_config
from control.data_models import EncodedPair
from control.errors import ConfigError, ContractError, EmbeddingIndexError, LengthError, ShapeError
from engine import model as M
from engine import tensor as T
from engine.model import ParameterSet, Summarizer, collate
from engine.tensor import Tensor
from engine.tokenizer import BOS, EOS, UNK
from engine.training import batch_loss


def identity_block(prefix, d):
    return OrderedDict((f'{prefix}.{w}', Tensor(np.eye(d))) for w in ('w_q', 'w_k', 'w_v', 'w_o'))


def oracle_attention(q, k, v):
    out = []
    for row in q:
        scores = [sum(a * b for a, b in zip(row, key)) / math.sqrt(len(row)) for key in k]
        top = max(scores)
        e = [math.exp(s - top) for s in scores]
        z = sum(e)
        out.append([sum(e[j] / z * v[j][c] for j in range(len(v))) for c in range(len(v[0]))])
    return np.array(out)


@pytest.fixture
def oov_pairs(toy_records, oov_tokenizer):
    return [oov_tokenizer.encode_pair(r.article, r.summary) for r in toy_records[:4]]


def random_oov_pairs(gen, tokenizer, min_summary=1):
    """One to three pairs over the toy words; most of them are out of the small vocabulary."""
    pairs = []
    for _ in range(int(gen.integers(1, 4))):
        article = [TOY_WORDS[j] for j in gen.integers(0, len(TOY_WORDS), size=int(gen.integers(2, 11)))]
        pool = article + TOY_WORDS[:20]
        summary = [pool[j] for j in gen.integers(0, len(pool), size=int(gen.integers(min_summary, 6)))]
        pairs.append(tokenizer.encode_pair(' '.join(article), ' '.join(summary)))
    return pairs


METHODS = ['none', 'add', 'projection', 'attention']


# ------------------------------ positional encoding ------------------------------

def test_positional_encoding_values():
    pe = M.positional_encoding(10, 6).data
    np.testing.assert_array_equal(pe[0, 0::2], 0.0)
    np.testing.assert_array_equal(pe[0, 1::2], 1.0)
    assert pe[1, 0] == pytest.approx(0.841471, abs=1e-6)
    assert np.all(np.abs(pe) <= 1.0)
    assert not M.positional_encoding(10, 6).requires_grad


def test_positional_encoding_needs_even_width():
    with pytest.raises(ConfigError):
        M.positional_encoding(4, 5)


# ------------------------------ attention ------------------------------

def test_attention_single_key_returns_value():
    v = Tensor([[2.0, -1.0]])
    out = M.scaled_dot_attention(Tensor([[0.3, 0.1]]), Tensor([[1.0, 4.0]]), v)
    np.testing.assert_allclose(out.data, v.data)


def test_attention_identical_keys_average_values(rng):
    k = Tensor(np.tile(rng.normal(size=(1, 4)), (3, 1)))
    v = Tensor(rng.normal(size=(3, 2)))
    out = M.scaled_dot_attention(Tensor(rng.normal(size=(2, 4))), k, v)
    np.testing.assert_allclose(out.data, np.tile(v.data.mean(axis=0), (2, 1)), atol=1e-6)


def test_attention_two_by_two_oracle(float64):
    out, weights = M.scaled_dot_attention(Tensor([[1.0, 0.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]]),
                                          Tensor([[1.0], [0.0]]), return_weights=True)
    w = math.exp(1 / math.sqrt(2)) / (math.exp(1 / math.sqrt(2)) + 1.0)
    assert weights.data[0, 0] == pytest.approx(w, abs=1e-9)
    assert out.data[0, 0] == pytest.approx(w, abs=1e-9)


def test_attention_width_mismatch():
    with pytest.raises(ShapeError):
        M.scaled_dot_attention(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))), Tensor(np.ones((2, 4))))


def test_attention_masked_keys_get_zero_weight(rng):
    mask = np.array([[True, False, True, False]])
    _, weights = M.scaled_dot_attention(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 4))),
                                        Tensor(rng.normal(size=(4, 2))), mask, return_weights=True)
    assert np.all(weights.data[:, [1, 3]] == 0.0)


def test_single_head_identity_projections_reduce_to_attention(rng):
    params = ParameterSet(identity_block('blk', 4))
    q, kv = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(5, 4)))
    out = M.multi_head_attention(q, kv, kv, None, params, 'blk', 1)
    np.testing.assert_allclose(out.data, M.scaled_dot_attention(q, kv, kv).data, atol=1e-6)
    assert out.shape == (3, 4)


def test_multi_head_shape_and_head_count(rng):
    params = ParameterSet(identity_block('blk', 8))
    q = Tensor(rng.normal(size=(2, 3, 8)))
    kv = Tensor(rng.normal(size=(2, 7, 8)))
    assert M.multi_head_attention(q, kv, kv, None, params, 'blk', 4).shape == (2, 3, 8)
    with pytest.raises(ConfigError):
        M.multi_head_attention(q, kv, kv, None, params, 'blk', 3)


def test_multi_head_gradient(float64, rng):
    params = ParameterSet(OrderedDict((f'blk.{w}', Tensor(rng.normal(size=(4, 4)) * 0.5))
                                      for w in ('w_q', 'w_k', 'w_v', 'w_o')))
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    y = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    weights = Tensor(rng.normal(size=(3, 4)))

    def f(xs):
        return T.sum(T.mul(M.multi_head_attention(xs[0], xs[1], xs[1], None, params, 'blk', 2), weights))

    assert T.finite_diff_check(f, [x, y, params['blk.w_q'], params['blk.w_v']], floor=1e-6) < 1e-4


# ------------------------------ encoder / decoder ------------------------------

def test_encoder_layer_with_zero_weights_is_residual_only(rng):
    config = toy_model_config(20)
    params = ParameterSet.initialize(config, seed=3)
    for name in params.names():
        if name.startswith('encoder.0.self_attn') or name.startswith('encoder.0.ff'):
            params[name].data[...] = 0.0
    x = Tensor(rng.normal(size=(1, 3, 8)))
    out = M.encoder_layer_forward(x, params, 'encoder.0', config.n_heads)
    ones, zeros = Tensor(np.ones(8)), Tensor(np.zeros(8))
    expected = T.layer_norm(T.layer_norm(x, ones, zeros), ones, zeros)
    assert out.shape == x.shape
    np.testing.assert_allclose(out.data, expected.data, atol=1e-5)


def test_encoder_ignores_padded_positions(float64, rng):
    config = toy_model_config(20)
    params = ParameterSet.initialize(config, seed=3, dtype=np.float64)
    key_mask = np.array([[[True, True, False, True]]])
    U = rng.normal(size=(1, 4, 8))
    before = M.encoder_forward(Tensor(U), params, config, key_mask)[-1].data
    U[0, 2] += 5.0
    after = M.encoder_forward(Tensor(U), params, config, key_mask)[-1].data
    np.testing.assert_allclose(after[0, [0, 1, 3]], before[0, [0, 1, 3]], atol=1e-6)


def test_encoder_forward_returns_every_layer(rng):
    config = toy_model_config(20, n_enc=3, agg_layers=2)
    params = ParameterSet.initialize(config)
    outputs = M.encoder_forward(Tensor(rng.normal(size=(1, 5, 8))), params, config)
    assert len(outputs) == 3
    assert all(o.shape == (1, 5, 8) for o in outputs)

    single = toy_model_config(20, n_enc=1, agg_method='none')
    assert len(M.encoder_forward(Tensor(rng.normal(size=(1, 5, 8))), ParameterSet.initialize(single), single)) == 1


def test_encoder_rejects_long_sources():
    config = toy_model_config(20)
    params = ParameterSet.initialize(config)
    with pytest.raises(LengthError):
        M.encoder_forward(Tensor(np.zeros((1, 65, 8))), params, config)
    with pytest.raises(LengthError):
        M.embed(np.zeros((1, 65), dtype=int), params, config)


def test_decoder_layer_shapes(rng):
    config = toy_model_config(20)
    params = ParameterSet.initialize(config)
    memory = Tensor(rng.normal(size=(1, 3, 8)))
    for length in (1, 4):
        y = Tensor(rng.normal(size=(1, length, 8)))
        assert M.decoder_layer_forward(y, memory, params, 'decoder.0', 2).shape == (1, length, 8)


def test_causal_mask():
    np.testing.assert_array_equal(M.causal_mask(3)[0], [[1, 0, 0], [1, 1, 0], [1, 1, 1]])


# ------------------------------ aggregation ------------------------------

def test_aggregate_add_equal_layers(rng):
    h = rng.normal(size=(3, 4))
    layers = [Tensor(h) for _ in range(4)]
    for L in (1, 2, 3):
        np.testing.assert_allclose(M.aggregate_add(layers, L).data, (L + 1) * h, atol=1e-5)


def test_aggregate_add_is_order_free(rng):
    a, b, c = (Tensor(rng.normal(size=(2, 4))) for _ in range(3))
    np.testing.assert_allclose(M.aggregate_add([a, b, c], 2).data, M.aggregate_add([b, a, c], 2).data, atol=1e-6)
    np.testing.assert_allclose(M.aggregate_add([a, b], 1).data, a.data + b.data, atol=1e-6)


@pytest.mark.parametrize('L', [0, 4])
def test_aggregation_window_out_of_range(rng, L):
    layers = [Tensor(rng.normal(size=(2, 4))) for _ in range(4)]
    with pytest.raises(ConfigError) as info:
        M.aggregate_add(layers, L)
    assert info.value.key == 'agg_layers'
    with pytest.raises(ConfigError):
        toy_model_config(20, n_enc=4, agg_layers=L)


def test_aggregate_projection_identity_oracle(float64, rng):
    tensors = identity_block('aggregation.attn', 2)
    tensors['aggregation.w_h'] = Tensor(np.eye(2))
    tensors['aggregation.b_h'] = Tensor(np.zeros(2))
    params = ParameterSet(tensors)
    h1, h2 = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    out = M.aggregate_projection([Tensor(h1), Tensor(h2)], 1, params, 1)
    assert out.shape == (3, 2)
    np.testing.assert_allclose(out.data, oracle_attention(h1.tolist(), h2.tolist(), h2.tolist()), atol=1e-9)


def test_aggregate_projection_uses_history_window(rng):
    config = toy_model_config(20, n_enc=3, agg_method='projection', agg_layers=2)
    params = ParameterSet.initialize(config)
    assert params['aggregation.w_h'].shape == (16, 8)
    layers = [Tensor(rng.normal(size=(1, 4, 8))) for _ in range(3)]
    assert M.aggregate_projection(layers, 2, params, 2).shape == (1, 4, 8)


def test_aggregate_attention_call_trace(monkeypatch, rng):
    config = toy_model_config(20, n_enc=4, agg_layers=1)
    params = ParameterSet.initialize(config)
    states = [Tensor(rng.normal(size=(1, 3, 8))) for _ in range(5)]
    calls = []
    original = M.multi_head_attention

    def counting(*args, **kwargs):
        calls.append((args[5], args[1]))
        return original(*args, **kwargs)

    monkeypatch.setattr(M, 'multi_head_attention', counting)
    out = M.aggregate_attention(states[1:], 1, params, 2, embedded=states[0])
    assert out.shape == (1, 3, 8)
    assert [prefix for prefix, _ in calls] == ['aggregation.attn0', 'aggregation.attn1']
    assert calls[0][1] is states[3]
    assert calls[1][1] is states[4]


def test_aggregate_attention_over_first_layer_starts_from_embedding(monkeypatch, rng):
    config = toy_model_config(20, n_enc=3, agg_layers=2)
    params = ParameterSet.initialize(config)
    states = [Tensor(rng.normal(size=(1, 3, 8))) for _ in range(4)]
    queries = []
    original = M.multi_head_attention

    def counting(*args, **kwargs):
        queries.append(args[0])
        return original(*args, **kwargs)

    monkeypatch.setattr(M, 'multi_head_attention', counting)
    M.aggregate_attention(states[1:], 2, params, 2, embedded=states[0])
    assert len(queries) == 3
    assert queries[0] is states[0]
    with pytest.raises(ContractError):
        M.aggregate_attention(states[1:], 2, params, 2)


# ------------------------------ pointer ------------------------------

def test_pointer_gate_endpoints_and_oracle(float64, rng):
    config = toy_model_config(20)
    params = ParameterSet.initialize(config, dtype=np.float64)
    h = Tensor(rng.normal(size=(1, 3, 8)))
    params['pointer.w_dl'].data[...] = 0.0
    np.testing.assert_allclose(M.pointer_gate(h, params, config).data, 0.5)
    params['pointer.b_gen'].data[...] = 40.0
    assert np.all(M.pointer_gate(h, params, config).data > 1 - 1e-9)

    params['pointer.w_dl'].data[...] = rng.normal(size=(8, 1))
    params['pointer.b_gen'].data[...] = 0.3
    gate = M.pointer_gate(h, params, config).data
    for t in range(3):
        z = sum(h.data[0, t, i] * params['pointer.w_dl'].data[i, 0] for i in range(8)) + 0.3
        assert gate[0, t, 0] == pytest.approx(1 / (1 + math.exp(-z)), abs=1e-9)


def test_pointer_gate_disabled():
    config = toy_model_config(20, use_pointer=False)
    with pytest.raises(ContractError):
        M.pointer_gate(Tensor(np.zeros((1, 8))), ParameterSet.initialize(config), config)


def test_final_distribution_endpoints():
    p_vocab = Tensor([[0.2, 0.3, 0.5]])
    alpha = Tensor([[1.0]])
    out = M.final_distribution(p_vocab, alpha, [3], 2, 1.0)
    np.testing.assert_allclose(out.data, [[0.2, 0.3, 0.5, 0.0, 0.0]], atol=1e-7)

    out = M.final_distribution(Tensor(np.full((1, 5), 0.2)), alpha, [7], 3, 0.0)
    expected = np.zeros((1, 8))
    expected[0, 7] = 1.0
    np.testing.assert_allclose(out.data, expected, atol=1e-7)


def test_final_distribution_mixture():
    out = M.final_distribution(Tensor([[0.5, 0.5, 0.0]]), Tensor([[1.0]]), [2], 0, 0.5)
    np.testing.assert_allclose(out.data, [[0.25, 0.25, 0.5]], atol=1e-7)


def test_final_distribution_scatter_adds_repeated_ids():
    out = M.final_distribution(Tensor([[0.25, 0.25, 0.25, 0.25]]), Tensor([[0.3, 0.2, 0.5]]), [4, 1, 4], 1, 0.0)
    np.testing.assert_allclose(out.data, [[0.0, 0.2, 0.0, 0.0, 0.8]], atol=1e-7)


def test_final_distribution_rejects_unmapped_extended_id():
    with pytest.raises(EmbeddingIndexError) as info:
        M.final_distribution(Tensor([[0.5, 0.5]]), Tensor([[1.0]]), [3], 1, 0.5)
    assert info.value.token_id == 3


# ------------------------------ full model ------------------------------

@pytest.mark.parametrize('method', ['none', 'add', 'projection', 'attention'])
@pytest.mark.parametrize('pointer', [True, False])
def test_forward_rows_are_distributions(oov_pairs, method, pointer):
    config = toy_model_config(16, agg_method=method, use_pointer=pointer)
    batch = collate(oov_pairs, pointer)
    log_probs = M.forward(ParameterSet.initialize(config, seed=5), config, batch)
    expected_width = 16 + (batch.oov_count if pointer else 0)
    assert log_probs.shape == batch.targets.shape + (expected_width,)
    np.testing.assert_allclose(np.exp(log_probs.data).sum(axis=-1), 1.0, atol=1e-5)


def test_forward_rows_are_distributions_on_random_oov_batches(oov_tokenizer):
    gen = np.random.default_rng(71)
    for case in range(100):
        pointer = case % 2 == 0
        config = toy_model_config(16, agg_method=METHODS[case % 4], use_pointer=pointer)
        batch = collate(random_oov_pairs(gen, oov_tokenizer), pointer)
        log_probs = M.forward(ParameterSet.initialize(config, seed=case), config, batch).data
        assert log_probs.shape[-1] == 16 + (batch.oov_count if pointer else 0)
        np.testing.assert_allclose(np.exp(log_probs).sum(axis=-1), 1.0, atol=1e-5)
        picked = np.take_along_axis(log_probs, batch.targets[..., None], axis=-1)[..., 0]
        assert np.all(np.isfinite(picked[batch.target_mask]))


def test_copy_attention_rows_skip_padding(oov_pairs):
    config = toy_model_config(16)
    params = ParameterSet.initialize(config, seed=5)
    pairs = [oov_pairs[0], replace(oov_pairs[1], source_ids=oov_pairs[1].source_ids[:4],
                                   source_ext_ids=oov_pairs[1].source_ext_ids[:4])]
    batch = collate(pairs, True)
    memory = M.encode_memory(params, config, batch.source_ids, batch.source_mask)
    h_dl = M.decoder_stack(params, config, memory, batch.decoder_input)
    alpha = M.copy_attention(h_dl, memory.final, params, memory.key_mask).data
    assert np.all(alpha[1, :, 4:] == 0.0)
    np.testing.assert_allclose(alpha.sum(axis=-1), 1.0, atol=1e-5)


def test_decoder_is_causal(float64, oov_pairs):
    config = toy_model_config(16)
    params = ParameterSet.initialize(config, seed=5, dtype=np.float64)
    batch = collate(oov_pairs[:2], True)
    before = M.forward(params, config, batch).data
    t = 1
    changed = batch.decoder_input.copy()
    changed[:, t + 1:] = 7
    after = M.forward(params, config, replace(batch, decoder_input=changed)).data
    np.testing.assert_allclose(after[:, :t + 1], before[:, :t + 1], atol=1e-6)
    assert not np.allclose(after[:, t + 1:], before[:, t + 1:])


def test_decoder_is_causal_on_random_inputs(float64, oov_tokenizer):
    gen = np.random.default_rng(23)
    moved = 0
    for case in range(100):
        config = toy_model_config(16, agg_method=METHODS[case % 4], use_pointer=case % 3 != 0)
        params = ParameterSet.initialize(config, seed=case, dtype=np.float64)
        batch = collate(random_oov_pairs(gen, oov_tokenizer, min_summary=2), config.use_pointer)
        length = batch.decoder_input.shape[1]
        t = int(gen.integers(0, length - 1))
        changed = batch.decoder_input.copy()
        changed[:, t + 1:] = gen.integers(4, 16, size=changed[:, t + 1:].shape)
        before = M.forward(params, config, batch).data
        after = M.forward(params, config, replace(batch, decoder_input=changed)).data
        np.testing.assert_allclose(after[:, :t + 1], before[:, :t + 1], atol=1e-10)
        moved += not np.allclose(after[:, t + 1:], before[:, t + 1:])
    assert moved > 50


def test_baseline_matches_plain_transformer(oov_pairs, rng):
    config = toy_model_config(16, agg_method='none', use_pointer=False)
    params = ParameterSet.initialize(config, seed=9)
    batch = collate(oov_pairs, False)
    ours = M.forward(params, config, batch).data
    np.testing.assert_array_equal(ours, M.reference_transformer_forward(params, config, batch).data)

    unused = {name: Tensor(rng.normal(size=shape)) for name, shape in
              M.parameter_shapes(replace(config, agg_method='attention')).items() if name.startswith('aggregation')}
    np.testing.assert_array_equal(M.forward(params.with_extra(unused), config, batch).data, ours)


def test_parameter_names_are_unique_and_stable():
    config = toy_model_config(20, n_enc=3, agg_layers=2)
    names = M.parameter_names(config)
    assert len(names) == len(set(names))
    assert names == M.parameter_names(toy_model_config(20, n_enc=3, agg_layers=2))
    assert 'aggregation.attn2.w_o' in names
    assert 'pointer.b_copy' in names


@pytest.mark.parametrize('overrides', [
    {}, {'agg_method': 'none'}, {'agg_method': 'add'}, {'agg_method': 'projection'},
    {'n_enc': 4, 'agg_layers': 3}, {'use_pointer': False}, {'d_model': 12, 'n_heads': 3},
])
def test_parameter_count_matches_formula(overrides):
    config = toy_model_config(30, **overrides)
    assert ParameterSet.initialize(config).count() == M.analytic_parameter_count(config)


def test_aggregation_parameter_deltas():
    d = 8
    base = M.analytic_parameter_count(toy_model_config(30, agg_method='none'))
    assert M.analytic_parameter_count(toy_model_config(30, agg_method='attention')) - base == 2 * 4 * d * d
    assert M.analytic_parameter_count(toy_model_config(30, agg_method='projection')) - base == d * d + d + 4 * d * d
    assert M.analytic_parameter_count(toy_model_config(30, agg_method='add')) == base


def test_check_matches_rejects_wrong_shapes():
    config = toy_model_config(20)
    params = ParameterSet.initialize(toy_model_config(21))
    with pytest.raises(ShapeError):
        Summarizer(config, params)


def test_step_log_probs_maps_extended_prefix_ids_to_unk(oov_pairs):
    config = toy_model_config(16)
    model = Summarizer.create(config, seed=2)
    pair = oov_pairs[0]
    memory = model.start(pair.source_ids)
    ext = max(pair.oov_map)
    out = model.step_log_probs(memory, [[BOS, ext], [BOS, UNK]], pair.source_ext_ids, pair.oov_count)
    assert out.shape == (2, 16 + pair.oov_count)
    np.testing.assert_allclose(out[0], out[1], atol=1e-6)
    np.testing.assert_allclose(np.exp(out).sum(axis=-1), 1.0, atol=1e-5)


@pytest.mark.slow
@pytest.mark.parametrize('method', ['none', 'add', 'projection', 'attention'])
def test_full_model_gradient(float64, method):
    config = toy_model_config(12, agg_method=method, max_positions=8)
    model = Summarizer.create(config, seed=4, dtype=np.float64)
    pairs = [
        EncodedPair(source_ids=(4, UNK, 6, UNK, 7, 11), target_ids=(BOS, 8, UNK, 11, EOS),
                    source_ext_ids=(4, 12, 6, 13, 7, 11), oov_map={12: 'x', 13: 'y'},
                    target_ext_ids=(BOS, 8, 13, 11, EOS)),
        EncodedPair(source_ids=(9, 10, 5), target_ids=(BOS, 10, EOS),
                    source_ext_ids=(9, 10, 5), target_ext_ids=(BOS, 10, EOS)),
    ]
    batch = collate(pairs, True)
    error = T.finite_diff_check(lambda _: batch_loss(model, batch), model.params.values(), floor=1e-5)
    assert error < 1e-4
