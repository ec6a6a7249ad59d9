"""
Word, character and BPE subword tokenization, vocabularies, and the
per-example extended vocabulary the pointer copies out-of-vocabulary words
through.
"""

from collections import Counter
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

from control.data_models import EncodedPair
from control.errors import ConfigError, CorpusFormatError, EmptyInputError, MappingError
from systems.logger import LoggerSingleton
from tools.tools import char_tokens, sha256_text, word_tokens


PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIAL_TOKENS = ('<pad>', '<unk>', '<s>', '</s>')
END_OF_WORD = '</w>'

_logger = LoggerSingleton.new_instance()


class Vocabulary:
    """Dense token<->id mapping; the four specials hold ids 0..3."""

    def __init__(self, tokens: Sequence[str], max_size: int = 50000):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIAL_TOKENS:
            raise ConfigError(f'vocabulary must start with {SPECIAL_TOKENS}, got {tokens[:4]}')
        if len(tokens) > max_size:
            raise ConfigError(f'{len(tokens)} tokens exceed max_size={max_size}', 'vocab_size')
        self.max_size = max_size
        self._id_to_token = tokens
        self._token_to_id: Dict[str, int] = {}
        for i, token in enumerate(tokens):
            if token in self._token_to_id:
                raise ConfigError(f'duplicate vocabulary token {token!r} at id {i}')
            if not token or '\n' in token:
                raise ConfigError(f'vocabulary token at id {i} is empty or holds a newline')
            self._token_to_id[token] = i

    def __len__(self):
        return len(self._id_to_token)

    def __contains__(self, token):
        return token in self._token_to_id

    def token_to_id(self, token: str) -> int:
        return self._token_to_id.get(token, UNK)

    def word_id(self, token: str) -> int:
        """Id of a token read from text; a literal special string is an unknown word, never a reserved id."""
        if token in SPECIAL_TOKENS:
            return UNK
        return self._token_to_id.get(token, UNK)

    def id_to_token(self, token_id: int) -> str:
        return self._id_to_token[token_id]

    def tokens(self) -> List[str]:
        return list(self._id_to_token)

    def to_text(self) -> str:
        return ''.join(token + '\n' for token in self._id_to_token)

    def content_hash(self) -> str:
        return sha256_text(self.to_text())

    def save(self, path: str):
        with open(path, 'w', encoding='utf-8', newline='\n') as file:
            file.write(self.to_text())

    @classmethod
    def load(cls, path: str, max_size: Optional[int] = None) -> 'Vocabulary':
        try:
            with open(path, 'r', encoding='utf-8', newline='\n') as file:
                tokens = file.read().split('\n')
        except OSError as e:
            raise CorpusFormatError(f'cannot read vocabulary: {e}', path=path)
        if tokens and tokens[-1] == '':
            tokens.pop()
        return cls(tokens, max_size=max_size or max(len(tokens), 5))


def build_vocab(token_streams: Iterable[Sequence[str]], max_size: int) -> Vocabulary:
    """The max_size-4 most frequent tokens, ties broken lexicographically, after the specials."""
    if max_size < 5:
        raise ConfigError(f'max_size must be >= 5, got {max_size}', 'vocab_size')
    counts = Counter()
    streams = 0
    for tokens in token_streams:
        streams += 1
        counts.update(t for t in tokens if t not in SPECIAL_TOKENS)
    if streams == 0:
        raise EmptyInputError('cannot build a vocabulary from an empty corpus')
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    kept = [token for token, _ in ranked[:max_size - len(SPECIAL_TOKENS)]]
    return Vocabulary(list(SPECIAL_TOKENS) + kept, max_size=max_size)


def build_word_vocab(corpus: Sequence[str], max_size: int) -> Vocabulary:
    if not corpus:
        raise EmptyInputError('cannot build a vocabulary from an empty corpus')
    return build_vocab((word_tokens(text) for text in corpus), max_size)


def oov_rate(token_streams: Iterable[Sequence[str]], vocab: Vocabulary) -> float:
    total = missing = 0
    for tokens in token_streams:
        for token in tokens:
            total += 1
            if vocab.word_id(token) == UNK:
                missing += 1
    return missing / total if total else 0.0


# ------------------------------- BPE -------------------------------

@dataclass(frozen=True)
class BpeModel:
    merges: Tuple[Tuple[str, str], ...] = ()
    end_marker: str = END_OF_WORD

    @cached_property
    def ranks(self) -> Dict[Tuple[str, str], int]:
        return {pair: rank for rank, pair in enumerate(self.merges)}

    def save(self, path: str):
        with open(path, 'w', encoding='utf-8', newline='\n') as file:
            for left, right in self.merges:
                file.write(f'{left} {right}\n')

    @classmethod
    def load(cls, path: str) -> 'BpeModel':
        merges = []
        try:
            with open(path, 'r', encoding='utf-8') as file:
                for number, line in enumerate(file, start=1):
                    line = line.rstrip('\n')
                    if not line:
                        continue
                    parts = line.split(' ')
                    if len(parts) != 2:
                        raise CorpusFormatError('expected "left right"', path=path, line=number)
                    merges.append((parts[0], parts[1]))
        except OSError as e:
            raise CorpusFormatError(f'cannot read merges: {e}', path=path)
        return cls(tuple(merges))


def _word_symbols(word: str, end_marker: str) -> Tuple[str, ...]:
    if not word:
        return ()
    return tuple(word[:-1]) + (word[-1] + end_marker,)


def _merge_symbols(symbols: Tuple[str, ...], pair: Tuple[str, str]) -> Tuple[str, ...]:
    merged = []
    i = 0
    while i < len(symbols):
        if i < len(symbols) - 1 and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
            merged.append(symbols[i] + symbols[i + 1])
            i += 2
        else:
            merged.append(symbols[i])
            i += 1
    return tuple(merged)


def bpe_learn(corpus: Sequence[str], num_merges: int, end_marker: str = END_OF_WORD,
              segment: Callable[[str], List[str]] = word_tokens) -> BpeModel:
    """
    Greedy pair merging over the corpus word-frequency table. Each round
    merges the most frequent adjacent pair (lexicographically smallest on
    ties); learning stops after num_merges rounds or when no pair occurs
    at least twice.
    """
    if num_merges < 0:
        raise ConfigError(f'num_merges must be >= 0, got {num_merges}', 'bpe_merges')
    frequencies = Counter()
    for text in corpus:
        frequencies.update(segment(text))
    words = {_word_symbols(word, end_marker): freq for word, freq in frequencies.items() if word}

    merges = []
    while len(merges) < num_merges:
        pairs = Counter()
        for symbols, freq in words.items():
            for pair in zip(symbols, symbols[1:]):
                pairs[pair] += freq
        if not pairs:
            break
        best, count = min(pairs.items(), key=lambda item: (-item[1], item[0]))
        if count < 2:
            break
        merges.append(best)
        updated = Counter()
        for symbols, freq in words.items():
            updated[_merge_symbols(symbols, best)] += freq
        words = updated
        if len(merges) % 1000 == 0:
            _logger.add_debug(f'bpe_learn: {len(merges)} merges, last {best} x{count}')
    return BpeModel(tuple(merges), end_marker)


def bpe_encode(model: BpeModel, word: str) -> List[str]:
    """Apply merges by learned rank, lowest rank first; unknown characters stay single symbols."""
    symbols = _word_symbols(word, model.end_marker)
    ranks = model.ranks
    while len(symbols) > 1:
        candidates = [(ranks[pair], pair) for pair in zip(symbols, symbols[1:]) if pair in ranks]
        if not candidates:
            break
        _, pair = min(candidates)
        symbols = _merge_symbols(symbols, pair)
    return list(symbols)


def bpe_decode(tokens: Sequence[str], end_marker: str = END_OF_WORD) -> str:
    # the marker only ends a word when it closes a token
    parts = []
    for token in tokens:
        if token.endswith(end_marker):
            parts.append(token[:-len(end_marker)] + ' ')
        else:
            parts.append(token)
    return ''.join(parts).strip()


# ------------------------------ encoding ------------------------------

class SourceEncoding(NamedTuple):
    source_ids: Tuple[int, ...]
    source_ext_ids: Tuple[int, ...]
    oov_map: Dict[int, str]


def encode_source(text: str, vocab: Vocabulary, truncate_len: int = 500,
                  segment: Callable[[str], List[str]] = word_tokens) -> SourceEncoding:
    tokens = segment(text)[:truncate_len]
    if not tokens:
        raise EmptyInputError('source text is empty after tokenization')
    source_ids, ext_ids = [], []
    oov_slots: Dict[str, int] = {}
    for token in tokens:
        token_id = vocab.word_id(token)
        source_ids.append(token_id)
        if token_id == UNK:
            if token not in oov_slots:
                oov_slots[token] = len(vocab) + len(oov_slots)
            ext_ids.append(oov_slots[token])
        else:
            ext_ids.append(token_id)
    oov_map = {ext_id: token for token, ext_id in oov_slots.items()}
    return SourceEncoding(tuple(source_ids), tuple(ext_ids), oov_map)


def decode_ids(ids: Iterable[int], vocab: Vocabulary, oov_map: Optional[Dict[int, str]] = None,
               join: Callable[[List[str]], str] = ' '.join) -> str:
    oov_map = oov_map or {}
    size = len(vocab)
    tokens = []
    for token_id in ids:
        token_id = int(token_id)
        if 0 <= token_id < len(SPECIAL_TOKENS):
            continue
        if 0 <= token_id < size:
            tokens.append(vocab.id_to_token(token_id))
        elif token_id in oov_map:
            tokens.append(oov_map[token_id])
        else:
            raise MappingError(f'id {token_id} is neither in the vocabulary ({size}) nor in the oov map')
    return join(tokens)


class Tokenizer:
    """Segmentation mode (word, bpe or char) bound to a vocabulary."""

    def __init__(self, vocab: Vocabulary, mode: str = 'word', bpe: Optional[BpeModel] = None):
        if mode not in ('word', 'bpe', 'char'):
            raise ConfigError(f'unknown tokenizer mode {mode!r}', 'tokenizer')
        if mode == 'bpe' and bpe is None:
            raise ConfigError('bpe mode needs a merges model', 'merges_path')
        self.vocab = vocab
        self.mode = mode
        self.bpe = bpe
        self._word_cache: Dict[str, List[str]] = {}

    def segment(self, text: str) -> List[str]:
        if self.mode == 'word':
            return word_tokens(text)
        if self.mode == 'char':
            return char_tokens(text)
        out = []
        for word in word_tokens(text):
            pieces = self._word_cache.get(word)
            if pieces is None:
                pieces = bpe_encode(self.bpe, word)
                self._word_cache[word] = pieces
            out.extend(pieces)
        return out

    def join(self, tokens: List[str]) -> str:
        if self.mode == 'word':
            return ' '.join(tokens)
        if self.mode == 'char':
            return ''.join(tokens)
        return bpe_decode(tokens, self.bpe.end_marker)

    def encode_source(self, text: str, truncate_len: int = 500) -> SourceEncoding:
        return encode_source(text, self.vocab, truncate_len, self.segment)

    def encode_pair(self, article: str, summary: str, truncate_len: int = 500,
                    max_target_len: int = 120) -> EncodedPair:
        source = self.encode_source(article, truncate_len)
        tokens = self.segment(summary)[:max_target_len]
        if not tokens:
            raise EmptyInputError('summary is empty after tokenization')
        ext_by_word = {word: ext_id for ext_id, word in source.oov_map.items()}
        target_ids = [BOS]
        target_ext_ids = [BOS]
        for token in tokens:
            token_id = self.vocab.word_id(token)
            target_ids.append(token_id)
            if token_id == UNK and token in ext_by_word:
                target_ext_ids.append(ext_by_word[token])
            else:
                target_ext_ids.append(token_id)
        target_ids.append(EOS)
        target_ext_ids.append(EOS)
        return EncodedPair(source_ids=source.source_ids, target_ids=tuple(target_ids),
                           source_ext_ids=source.source_ext_ids, oov_map=source.oov_map,
                           target_ext_ids=tuple(target_ext_ids))

    def decode_ids(self, ids: Iterable[int], oov_map: Optional[Dict[int, str]] = None) -> str:
        return decode_ids(ids, self.vocab, oov_map, self.join)


def load_tokenizer(mode: str, vocab_path: str, merges_path: Optional[str] = None) -> Tokenizer:
    vocab = Vocabulary.load(vocab_path)
    bpe = BpeModel.load(merges_path) if mode == 'bpe' else None
    return Tokenizer(vocab, mode, bpe)
