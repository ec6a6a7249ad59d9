import hashlib
import time
from collections import Counter
from typing import Iterable, List, Sequence, Tuple

SENTENCE_DELIMITERS = ('.', '!', '?', '。', '！', '？')


def get_time_string():
    current_time = time.time()
    time_struct = time.localtime(current_time)
    milliseconds = int((current_time - int(current_time)) * 1000)
    return time.strftime("%Y%m%d_%H%M%S", time_struct) + f"_{milliseconds:03d}"


def word_tokens(text: str) -> List[str]:
    """
    Lowercased whitespace split. Punctuation is expected to be separated
    already (CNN/DailyMail-style preprocessed text).
    """
    return text.lower().split()


def char_tokens(text: str) -> List[str]:
    # character-based corpora: every non-space character is a token
    return [ch for ch in text.lower() if not ch.isspace()]


def ngrams(tokens: Sequence[str], n: int) -> List[Tuple]:
    if n < 1 or len(tokens) < n:
        return []
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(ngrams(tokens, n))


def split_sentences(tokens: Sequence[str], delimiters: Iterable[str] = SENTENCE_DELIMITERS) -> List[List[str]]:
    """Cut a token stream after every delimiter token; a trailing fragment counts as a sentence."""
    delimiters = set(delimiters)
    sentences, current = [], []
    for token in tokens:
        current.append(token)
        if token in delimiters:
            sentences.append(current)
            current = []
    if current:
        sentences.append(current)
    return sentences


def contains_subsequence(haystack: Sequence[str], needle: Sequence[str]) -> bool:
    """True when needle occurs contiguously in haystack."""
    n = len(needle)
    if n == 0:
        return True
    first = needle[0]
    needle = list(needle)
    for i in range(len(haystack) - n + 1):
        if haystack[i] == first and list(haystack[i:i + n]) == needle:
            return True
    return False


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode('utf-8')).hexdigest()

