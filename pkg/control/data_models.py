from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from control.errors import ContractError, CorpusFormatError


@dataclass(frozen=True)
class CorpusRecord:
    """One article/summary pair of a line-delimited JSON corpus."""
    article: str
    summary: str
    line: Optional[int] = None

    def __post_init__(self):
        for key in ('article', 'summary'):
            value = getattr(self, key)
            if not isinstance(value, str) or not value.strip():
                raise CorpusFormatError(f'field "{key}" is missing or empty', line=self.line)


@dataclass(frozen=True)
class EncodedPair:
    """
    Source/target id sequences for one example.

    source_ext_ids equals source_ids except where source_ids holds UNK: there it
    holds an extended id >= vocabulary size, resolved through oov_map.
    target_ext_ids is the loss target in pointer mode (target OOV words seen in
    the source take their extended id).
    """
    source_ids: Tuple[int, ...]
    target_ids: Tuple[int, ...]
    source_ext_ids: Tuple[int, ...]
    oov_map: Dict[int, str] = field(default_factory=dict)
    target_ext_ids: Tuple[int, ...] = ()

    def __post_init__(self):
        if len(self.source_ids) != len(self.source_ext_ids):
            raise ContractError(f'source_ids ({len(self.source_ids)}) and source_ext_ids '
                                f'({len(self.source_ext_ids)}) differ in length')

    @property
    def oov_count(self) -> int:
        return len(self.oov_map)

    def loss_targets(self, use_pointer: bool) -> Tuple[int, ...]:
        if use_pointer and self.target_ext_ids:
            return self.target_ext_ids
        return self.target_ids


@dataclass
class Hypothesis:
    """A partial decoded sequence; tokens start with BOS."""
    tokens: List[int]
    log_prob: float = 0.0
    finished: bool = False

    @property
    def generated(self) -> List[int]:
        body = self.tokens[1:]
        if self.finished and body:
            body = body[:-1]
        return body

    def extend(self, token: int, token_log_prob: float, eos_id: int) -> 'Hypothesis':
        if self.finished:
            raise ContractError('finished hypotheses are never extended')
        return Hypothesis(self.tokens + [token], self.log_prob + token_log_prob, token == eos_id)


@dataclass(frozen=True)
class RougeScore:
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0

    @classmethod
    def from_counts(cls, overlap: float, candidate_total: float, reference_total: float) -> 'RougeScore':
        p = overlap / candidate_total if candidate_total > 0 else 0.0
        r = overlap / reference_total if reference_total > 0 else 0.0
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return cls(p, r, f1)

    def to_dict(self) -> Dict[str, float]:
        return {'p': self.precision, 'r': self.recall, 'f1': self.f1}


@dataclass(frozen=True)
class NoveltyReport:
    ngram_ratios: Dict[int, float]
    sentence_ratio: float

    def to_dict(self) -> Dict[str, float]:
        out = {f'novel_{n}gram': ratio for n, ratio in sorted(self.ngram_ratios.items())}
        out['novel_sentence'] = self.sentence_ratio
        return out


@dataclass(frozen=True)
class CorpusReport:
    rouge1: RougeScore
    rouge2: RougeScore
    rougeL: RougeScore
    pairs: int
    novelty: Optional[NoveltyReport] = None

    def to_dict(self) -> Dict[str, object]:
        out = {
            'rouge1': self.rouge1.to_dict(),
            'rouge2': self.rouge2.to_dict(),
            'rougeL': self.rougeL.to_dict(),
            'pairs': self.pairs,
        }
        if self.novelty is not None:
            out['novelty'] = self.novelty.to_dict()
        return out


@dataclass(frozen=True)
class DatasetStats:
    pairs: int
    avg_source_tokens: float
    avg_summary_tokens: float
    avg_source_sentences: float
    avg_summary_sentences: float
    reference_novelty: NoveltyReport

    def to_dict(self) -> Dict[str, object]:
        return {
            'pairs': self.pairs,
            'avg_source_tokens': self.avg_source_tokens,
            'avg_summary_tokens': self.avg_summary_tokens,
            'avg_source_sentences': self.avg_source_sentences,
            'avg_summary_sentences': self.avg_summary_sentences,
            'reference_novelty': self.reference_novelty.to_dict(),
        }
