import os
import sys
from dataclasses import replace

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from control.configs import ModelConfig  # noqa: E402
from control.data_models import CorpusRecord  # noqa: E402
from engine import tensor as T  # noqa: E402
from engine.tokenizer import SPECIAL_TOKENS, Tokenizer, Vocabulary  # noqa: E402
from systems.logger import LoggerSingleton  # noqa: E402


TOY_WORDS = [f'w{i}' for i in range(56)]


def toy_model_config(vocab_size: int, **overrides) -> ModelConfig:
    """Desk-scale network: width 8, two heads, two layers each side, attention aggregation over one layer."""
    base = ModelConfig(vocab_size=vocab_size, d_model=8, n_heads=2, n_enc=2, n_dec=2, d_ff=16,
                       agg_layers=1, agg_method='attention', use_pointer=True, max_positions=64)
    return replace(base, **overrides) if overrides else base


@pytest.fixture(autouse=True, scope='session')
def quiet_logger(tmp_path_factory):
    logger = LoggerSingleton.new_instance()
    logger.set_log_file(str(tmp_path_factory.mktemp('logs') / 'tests.log'))
    logger.set_quiet(True)
    yield logger


@pytest.fixture(autouse=True)
def debug_checks():
    T.set_debug_checks(True)
    yield
    T.set_debug_checks(False)


@pytest.fixture
def float64():
    with T.default_dtype(np.float64):
        yield np.float64


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_copy_reorder_records(count: int, seed: int, article_len: int = 8):
    """Summary = first three article words in reverse order."""
    gen = np.random.default_rng(seed)
    records = []
    for i in range(count):
        words = [TOY_WORDS[j] for j in gen.choice(len(TOY_WORDS), size=article_len, replace=False)]
        records.append(CorpusRecord(' '.join(words), ' '.join(reversed(words[:3])), i + 1))
    return records


@pytest.fixture
def toy_records():
    return make_copy_reorder_records(32, seed=7)


@pytest.fixture
def toy_tokenizer():
    return Tokenizer(Vocabulary(list(SPECIAL_TOKENS) + TOY_WORDS, max_size=60), 'word')


@pytest.fixture
def toy_pairs(toy_records, toy_tokenizer):
    return [toy_tokenizer.encode_pair(r.article, r.summary) for r in toy_records]


@pytest.fixture
def oov_tokenizer():
    """A small vocabulary that leaves most toy words out, so the pointer has OOVs to copy."""
    return Tokenizer(Vocabulary(list(SPECIAL_TOKENS) + TOY_WORDS[:12], max_size=16), 'word')
