import struct
from dataclasses import replace

import numpy as np
import pytest

from conftest import toy_model_config
from control.configs import TrainConfig
from control.errors import CheckpointError, VocabularyMismatchError
from engine.model import Summarizer, collate
from engine.training import Trainer
from systems.checkpoint import (FORMAT_VERSION, MAGIC, Checkpoint, checkpoint_from_trainer, decode_checkpoint,
                                encode_checkpoint, load_checkpoint, restore_trainer, save_checkpoint,
                                summarizer_from_checkpoint)


TRAIN = TrainConfig(learning_rate=1e-3, batch_size=8, dropout=0.1, seed=5)


def make_trainer(tokenizer, pairs, seed=0):
    model = Summarizer.create(toy_model_config(len(tokenizer.vocab)), seed=seed)
    return Trainer(model, TRAIN, pairs, vocab_hash=tokenizer.vocab.content_hash())


@pytest.fixture
def trained(toy_tokenizer, toy_pairs):
    trainer = make_trainer(toy_tokenizer, toy_pairs)
    trainer.train_steps(3)
    return trainer


def test_save_load_save_is_byte_identical(tmp_path, trained):
    first = tmp_path / 'a.agtf'
    second = tmp_path / 'b.agtf'
    save_checkpoint(str(first), checkpoint_from_trainer(trained))
    save_checkpoint(str(second), load_checkpoint(str(first)))
    assert first.read_bytes() == second.read_bytes()
    assert first.read_bytes()[:4] == MAGIC
    assert not (tmp_path / 'a.agtf.tmp').exists()


def test_round_trip_keeps_every_field(trained):
    original = checkpoint_from_trainer(trained, tokenizer='bpe')
    loaded = decode_checkpoint(encode_checkpoint(original))
    assert loaded.model_config == original.model_config
    assert loaded.train_config == original.train_config
    assert (loaded.epoch, loaded.batch_in_epoch, loaded.step, loaded.adam_t) == (0, 3, 3, 3)
    assert loaded.tokenizer == 'bpe'
    assert loaded.vocab_hash == original.vocab_hash
    assert loaded.best_val_loss is None
    for name, value in original.params.items():
        np.testing.assert_array_equal(loaded.params[name], value)
        np.testing.assert_array_equal(loaded.adam_m[name], original.adam_m[name])
        np.testing.assert_array_equal(loaded.adam_v[name], original.adam_v[name])


def test_truncated_file_fails_cleanly(tmp_path, trained):
    blob = encode_checkpoint(checkpoint_from_trainer(trained))
    for cut in (3, 10, len(blob) // 2, len(blob) - 1):
        path = tmp_path / f'cut{cut}.agtf'
        path.write_bytes(blob[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(str(path))


def test_version_and_magic_are_checked(trained):
    blob = encode_checkpoint(checkpoint_from_trainer(trained))
    with pytest.raises(CheckpointError) as info:
        decode_checkpoint(blob[:4] + struct.pack('<I', FORMAT_VERSION + 1) + blob[8:])
    assert info.value.field == 'version'
    with pytest.raises(CheckpointError) as info:
        decode_checkpoint(b'NOPE' + blob[4:])
    assert info.value.field == 'magic'
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob + b'\0')


def test_shape_mismatch_names_the_parameter(trained):
    checkpoint = checkpoint_from_trainer(trained)
    checkpoint.params['output.b'] = np.zeros(3, dtype=np.float32)
    with pytest.raises(CheckpointError) as info:
        decode_checkpoint(encode_checkpoint(checkpoint))
    assert info.value.field == 'output.b'

    checkpoint = checkpoint_from_trainer(trained)
    del checkpoint.params['embedding']
    with pytest.raises(CheckpointError) as info:
        decode_checkpoint(encode_checkpoint(checkpoint))
    assert info.value.field == 'embedding'


def test_missing_checkpoint_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path / 'absent.agtf'))


def test_vocab_hash_is_checked(trained):
    checkpoint = checkpoint_from_trainer(trained)
    checkpoint.check_vocab(trained.vocab_hash)
    with pytest.raises(VocabularyMismatchError):
        checkpoint.check_vocab('0' * 64)


def test_loaded_summarizer_reproduces_forward(trained, toy_pairs):
    model = summarizer_from_checkpoint(decode_checkpoint(encode_checkpoint(checkpoint_from_trainer(trained))))
    batch = collate(toy_pairs[:3], True)
    np.testing.assert_array_equal(model.forward(batch).data, trained.summarizer.forward(batch).data)


def test_resumed_training_matches_uninterrupted(toy_tokenizer, toy_pairs):
    straight = make_trainer(toy_tokenizer, toy_pairs)
    expected = straight.train_steps(10)

    first = make_trainer(toy_tokenizer, toy_pairs)
    first.train_steps(5)
    blob = encode_checkpoint(checkpoint_from_trainer(first))

    resumed = make_trainer(toy_tokenizer, toy_pairs, seed=99)
    restore_trainer(resumed, decode_checkpoint(blob))
    assert (resumed.epoch, resumed.batch_in_epoch, resumed.step) == (1, 1, 5)
    np.testing.assert_allclose(resumed.train_steps(5), expected[5:], atol=1e-6)


def test_plateau_state_survives_resume(toy_tokenizer, toy_pairs):
    trainer = make_trainer(toy_tokenizer, toy_pairs[:8])
    trainer.schedule.best = 2.5
    trainer.schedule.bad_epochs = 1
    trainer.schedule.lr = 2.5e-4
    checkpoint = decode_checkpoint(encode_checkpoint(checkpoint_from_trainer(trainer)))
    fresh = make_trainer(toy_tokenizer, toy_pairs[:8])
    restore_trainer(fresh, checkpoint)
    assert fresh.best_val_loss == 2.5
    assert fresh.schedule.bad_epochs == 1
    assert fresh.lr == 2.5e-4
    assert isinstance(checkpoint, Checkpoint)


def test_step_limit_mid_epoch_resumes_inside_the_epoch(toy_tokenizer, toy_pairs):
    config = replace(TRAIN, max_epochs=2)
    vocab_hash = toy_tokenizer.vocab.content_hash()

    def build(train_config, seed=0, **callbacks):
        model = Summarizer.create(toy_model_config(len(toy_tokenizer.vocab)), seed=seed)
        return Trainer(model, train_config, toy_pairs, toy_pairs[:8], vocab_hash, **callbacks)

    expected = build(config).fit()

    saved = {}
    limited = build(replace(config, max_steps=3),
                    on_checkpoint=lambda kind, t: saved.update({kind: encode_checkpoint(checkpoint_from_trainer(t))}))
    assert limited.fit() == []
    assert set(saved) == {'last'}

    resumed = build(config, seed=42)
    restore_trainer(resumed, decode_checkpoint(saved['last']))
    assert (resumed.epoch, resumed.batch_in_epoch, resumed.step) == (0, 3, 3)
    history = resumed.fit()
    assert [r['epoch'] for r in history] == [1, 2]
    for got, want in zip(history, expected):
        assert got['step'] == want['step']
        assert got['lr'] == want['lr']
        for key in ('train_loss', 'val_loss'):
            assert got[key] == pytest.approx(want[key], abs=1e-6)
