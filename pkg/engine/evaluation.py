"""
ROUGE-1/2/L and novelty statistics over generated summaries.

Scores are computed on lowercased tokens from tools.word_tokens. ROUGE-L is
summary-level: one LCS over the whole token sequences.
"""

import json
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Union

from control.data_models import CorpusRecord, CorpusReport, DatasetStats, NoveltyReport, RougeScore
from control.errors import DataError, EmptyInputError
from tools.tools import SENTENCE_DELIMITERS, contains_subsequence, ngram_counts, ngrams, split_sentences, word_tokens


Tokens = Sequence[str]
TextOrTokens = Union[str, Sequence[str]]


def _tokens(value: TextOrTokens, tokenize: Callable[[str], List[str]] = word_tokens) -> List[str]:
    return tokenize(value) if isinstance(value, str) else list(value)


def rouge_n(candidate: Tokens, reference: Tokens, n: int) -> RougeScore:
    """Clipped n-gram overlap: each candidate n-gram matches at most its reference count."""
    if n < 1:
        raise DataError(f'rouge_n needs n >= 1, got {n}')
    cand = ngram_counts(candidate, n)
    ref = ngram_counts(reference, n)
    overlap = sum(min(count, ref[gram]) for gram, count in cand.items())
    return RougeScore.from_counts(overlap, sum(cand.values()), sum(ref.values()))


def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    previous = [0] * (len(b) + 1)
    for x in a:
        current = [0]
        for j, y in enumerate(b):
            current.append(previous[j] + 1 if x == y else max(previous[j + 1], current[j]))
        previous = current
    return previous[-1]


def rouge_l(candidate: Tokens, reference: Tokens) -> RougeScore:
    return RougeScore.from_counts(lcs_length(candidate, reference), len(candidate), len(reference))


def novelty_stats(summaries: Sequence[Tokens], sources: Sequence[Tokens], n_values: Iterable[int] = (1, 2, 3, 4),
                  sentence_delimiters: Iterable[str] = SENTENCE_DELIMITERS) -> NoveltyReport:
    """
    Share of summary n-grams that never occur in the paired source, and share
    of summary sentences that do not appear contiguously in it; both pooled
    over the corpus by total counts.
    """
    if len(summaries) != len(sources):
        raise DataError(f'{len(summaries)} summaries but {len(sources)} sources')
    n_values = list(n_values)
    delimiters = tuple(sentence_delimiters)
    novel = {n: 0 for n in n_values}
    total = {n: 0 for n in n_values}
    novel_sentences, total_sentences = 0, 0
    for summary, source in zip(summaries, sources):
        summary, source = list(summary), list(source)
        for n in n_values:
            source_grams = set(ngrams(source, n))
            grams = ngrams(summary, n)
            total[n] += len(grams)
            novel[n] += sum(1 for gram in grams if gram not in source_grams)
        for sentence in split_sentences(summary, delimiters):
            total_sentences += 1
            if not contains_subsequence(source, sentence):
                novel_sentences += 1
    ratios = {n: (novel[n] / total[n] if total[n] else 0.0) for n in n_values}
    sentence_ratio = novel_sentences / total_sentences if total_sentences else 0.0
    return NoveltyReport(ratios, sentence_ratio)


def _mean(scores: List[RougeScore]) -> RougeScore:
    count = len(scores)
    return RougeScore(sum(s.precision for s in scores) / count,
                      sum(s.recall for s in scores) / count,
                      sum(s.f1 for s in scores) / count)


def evaluate_corpus(candidates: Sequence[TextOrTokens], references: Sequence[TextOrTokens],
                    sources: Optional[Sequence[TextOrTokens]] = None,
                    tokenize: Callable[[str], List[str]] = word_tokens) -> CorpusReport:
    """Arithmetic mean of per-pair ROUGE-1/2/L; novelty is added when sources are given."""
    if len(candidates) != len(references):
        raise DataError(f'{len(candidates)} candidates but {len(references)} references')
    if not candidates:
        raise EmptyInputError('nothing to evaluate')
    cand_tokens = [_tokens(c, tokenize) for c in candidates]
    ref_tokens = [_tokens(r, tokenize) for r in references]
    report = CorpusReport(
        rouge1=_mean([rouge_n(c, r, 1) for c, r in zip(cand_tokens, ref_tokens)]),
        rouge2=_mean([rouge_n(c, r, 2) for c, r in zip(cand_tokens, ref_tokens)]),
        rougeL=_mean([rouge_l(c, r) for c, r in zip(cand_tokens, ref_tokens)]),
        pairs=len(cand_tokens),
    )
    if sources is not None:
        novelty = novelty_stats(cand_tokens, [_tokens(s, tokenize) for s in sources])
        report = CorpusReport(report.rouge1, report.rouge2, report.rougeL, report.pairs, novelty)
    return report


def _flatten(prefix: str, value, out: Dict[str, object]):
    if isinstance(value, dict):
        for key, inner in value.items():
            _flatten(f'{prefix}_{key}' if prefix else str(key), inner, out)
    else:
        out[prefix] = value


def report_text(report: Union[CorpusReport, NoveltyReport, DatasetStats]) -> str:
    """One `key<TAB>value` line per metric."""
    flat: Dict[str, object] = {}
    _flatten('', report.to_dict(), flat)
    lines = []
    for key, value in flat.items():
        lines.append(f'{key}\t{value:.6f}' if isinstance(value, float) else f'{key}\t{value}')
    return '\n'.join(lines) + '\n'


def report_json(report: Union[CorpusReport, NoveltyReport, DatasetStats]) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + '\n'


def lead_baseline(article: str, n: int = 3, tokenize: Callable[[str], List[str]] = word_tokens) -> str:
    """The first n sentences of the article."""
    if n < 1:
        raise DataError(f'lead baseline needs n >= 1, got {n}')
    sentences = split_sentences(tokenize(article))
    return ' '.join(' '.join(sentence) for sentence in sentences[:n])


def dataset_statistics(records: Sequence[CorpusRecord],
                       tokenize: Callable[[str], List[str]] = word_tokens) -> DatasetStats:
    """Pair count, mean lengths in tokens and sentences, and novelty of the references."""
    if not records:
        raise EmptyInputError('corpus has no records')
    sources = [tokenize(r.article) for r in records]
    summaries = [tokenize(r.summary) for r in records]
    count = len(records)
    return DatasetStats(
        pairs=count,
        avg_source_tokens=sum(map(len, sources)) / count,
        avg_summary_tokens=sum(map(len, summaries)) / count,
        avg_source_sentences=sum(len(split_sentences(s)) for s in sources) / count,
        avg_summary_sentences=sum(len(split_sentences(s)) for s in summaries) / count,
        reference_novelty=novelty_stats(summaries, sources),
    )
