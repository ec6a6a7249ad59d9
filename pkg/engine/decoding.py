"""
Beam-search generation with no-repeat n-gram blocking, a GNMT length penalty
and min/max length bounds. Lengths count generated tokens, BOS and EOS excluded.

Search talks to the model through a Scorer: `log_probs(prefixes)` returns the
next-token log-distribution for a list of equal-length prefixes. The model
scorer runs the encoder and aggregation once per source and re-runs the
decoder over the full prefixes at each step.
"""

from typing import List, Optional, Protocol, Sequence

import numpy as np

from control.configs import BeamConfig
from control.data_models import Hypothesis
from control.errors import EmptyInputError
from engine.model import Summarizer
from engine.tokenizer import BOS, EOS, PAD, SourceEncoding, Tokenizer
from tools.tools import ngrams


NEG_INF = -np.inf


class Scorer(Protocol):
    def log_probs(self, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
        ...


class ModelScorer:
    """Binds a model to one encoded source; extended ids are scored in pointer mode."""

    def __init__(self, summarizer: Summarizer, source: SourceEncoding):
        if not source.source_ids:
            raise EmptyInputError('cannot decode an empty source')
        self.summarizer = summarizer
        self.source = source
        self.oov_count = len(source.oov_map) if summarizer.config.use_pointer else 0
        self.memory = summarizer.start(source.source_ids)
        self._ext_ids = source.source_ext_ids if summarizer.config.use_pointer else source.source_ids

    def log_probs(self, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
        out = self.summarizer.step_log_probs(self.memory, np.asarray(prefixes, dtype=np.int64),
                                             self._ext_ids, self.oov_count)
        return out.astype(np.float64)


def length_penalty(length: int, alpha: float) -> float:
    """((5 + length) / 6) ** alpha; lengths below 1 are treated as 1."""
    return ((5.0 + max(length, 1)) / 6.0) ** alpha


def hypothesis_score(hyp: Hypothesis, alpha: float) -> float:
    return hyp.log_prob / length_penalty(len(hyp.generated), alpha)


def block_repeat_ngrams(tokens, step_log_probs: np.ndarray, n: int) -> np.ndarray:
    """
    Copy of step_log_probs where every token that would complete an n-gram
    already present in `tokens` (generated ids, or a Hypothesis) is -inf.
    """
    if isinstance(tokens, Hypothesis):
        tokens = tokens.generated
    out = np.array(step_log_probs, dtype=np.float64, copy=True)
    if n < 1 or len(tokens) < n - 1:
        return out
    prefix = tuple(tokens[len(tokens) - (n - 1):]) if n > 1 else ()
    for gram in ngrams(list(tokens), n):
        if gram[:-1] == prefix and 0 <= gram[-1] < out.shape[-1]:
            out[..., gram[-1]] = NEG_INF
    return out


def _constrain(log_probs: np.ndarray, generated: int, config: BeamConfig, eos_id: int,
               banned_ids: Sequence[int]) -> np.ndarray:
    out = np.array(log_probs, dtype=np.float64, copy=True)
    size = out.shape[-1]
    for token in banned_ids:
        if 0 <= token < size and token != eos_id:
            out[..., token] = NEG_INF
    if generated >= config.max_len:
        forced = out[..., eos_id].copy()
        out[...] = NEG_INF
        out[..., eos_id] = forced
    elif generated < config.min_len:
        out[..., eos_id] = NEG_INF
    return out


def beam_search(scorer: Scorer, config: BeamConfig, bos_id: int = BOS, eos_id: int = EOS,
                banned_ids: Sequence[int] = (PAD, BOS)) -> Hypothesis:
    """
    Keep the beam_size best extensions by cumulative log-probability at every
    step; EOS is masked before min_len and is the only choice at max_len.
    Finished hypotheses are ranked by log-probability / length_penalty; the best
    live one is returned when nothing finished.
    """
    live = [Hypothesis([bos_id])]
    finished: List[Hypothesis] = []
    for generated in range(config.max_len + 1):
        if not live or len(finished) >= config.beam_size:
            break
        step = _constrain(scorer.log_probs([h.tokens for h in live]), generated, config, eos_id, banned_ids)
        if config.no_repeat_ngram:
            for i, hyp in enumerate(live):
                step[i] = block_repeat_ngrams(hyp.generated, step[i], config.no_repeat_ngram)
        totals = step + np.array([h.log_prob for h in live])[:, None]
        flat = totals.reshape(-1)
        order = np.argsort(-flat, kind='stable')[:config.beam_size]
        next_live = []
        for index in order:
            if not np.isfinite(flat[index]):
                break
            row, token = divmod(int(index), totals.shape[1])
            extended = live[row].extend(token, float(step[row, token]), eos_id)
            (finished if extended.finished else next_live).append(extended)
        live = next_live
    pool = finished or live
    if not pool:
        return Hypothesis([bos_id])
    return max(pool, key=lambda h: hypothesis_score(h, config.length_penalty_alpha))


def greedy_decode(scorer: Scorer, config: BeamConfig, bos_id: int = BOS, eos_id: int = EOS,
                  banned_ids: Sequence[int] = (PAD, BOS)) -> Hypothesis:
    """Argmax decoding under the same length and blocking constraints as beam_search."""
    hyp = Hypothesis([bos_id])
    for generated in range(config.max_len + 1):
        step = _constrain(scorer.log_probs([hyp.tokens]), generated, config, eos_id, banned_ids)[0]
        if config.no_repeat_ngram:
            step = block_repeat_ngrams(hyp.generated, step, config.no_repeat_ngram)
        token = int(np.argmax(step))
        if not np.isfinite(step[token]):
            break
        hyp = hyp.extend(token, float(step[token]), eos_id)
        if hyp.finished:
            break
    return hyp


def summarize(summarizer: Summarizer, tokenizer: Tokenizer, article: str, config: BeamConfig,
              truncate_len: int = 500, greedy: bool = False) -> str:
    """Encode, search and detokenize one article; copied OOV words come back through the oov map."""
    source = tokenizer.encode_source(article, truncate_len)
    scorer = ModelScorer(summarizer, source)
    hyp = greedy_decode(scorer, config) if greedy else beam_search(scorer, config)
    return tokenizer.decode_ids(hyp.generated, source.oov_map)


def summarize_ids(summarizer: Summarizer, source: SourceEncoding, config: BeamConfig,
                  greedy: bool = False) -> List[int]:
    scorer = ModelScorer(summarizer, source)
    hyp = greedy_decode(scorer, config) if greedy else beam_search(scorer, config)
    return hyp.generated
