import json
from typing import Iterator, List, Sequence

from control.data_models import CorpusRecord
from control.errors import CorpusFormatError, DataError, EmptyInputError


def iter_corpus(path: str) -> Iterator[CorpusRecord]:
    """
    Records of a UTF-8 line-delimited JSON corpus: one object per line with
    "article" and "summary". Blank lines are skipped; errors carry path and line.
    """
    try:
        file = open(path, encoding='utf-8')
    except OSError as e:
        raise DataError(f'cannot read corpus {path}: {e.strerror}')
    with file:
        for number, line in enumerate(file, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(f'invalid JSON ({e.msg})', path, number)
            if not isinstance(obj, dict):
                raise CorpusFormatError('record is not a JSON object', path, number)
            try:
                yield CorpusRecord(obj.get('article'), obj.get('summary'), number)
            except CorpusFormatError as e:
                raise CorpusFormatError(str(e).split(': ', 1)[-1], path, number)


def read_corpus(path: str) -> List[CorpusRecord]:
    records = list(iter_corpus(path))
    if not records:
        raise EmptyInputError(f'corpus {path} has no records')
    return records


def write_corpus(path: str, records: Sequence[CorpusRecord]):
    with open(path, 'w', encoding='utf-8') as file:
        for record in records:
            file.write(json.dumps({'article': record.article, 'summary': record.summary}, ensure_ascii=False))
            file.write('\n')


def read_lines(path: str) -> List[str]:
    """One text per line (candidate or reference summaries)."""
    try:
        with open(path, encoding='utf-8') as file:
            return [line.rstrip('\n') for line in file]
    except OSError as e:
        raise DataError(f'cannot read {path}: {e.strerror}')


def write_lines(path: str, lines: Sequence[str]):
    with open(path, 'w', encoding='utf-8') as file:
        for line in lines:
            file.write(line.replace('\n', ' ') + '\n')


def read_articles(path: str) -> List[str]:
    """Articles to summarize: JSONL records whose "summary" may be absent."""
    articles = []
    try:
        file = open(path, encoding='utf-8')
    except OSError as e:
        raise DataError(f'cannot read {path}: {e.strerror}')
    with file:
        for number, line in enumerate(file, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(f'invalid JSON ({e.msg})', path, number)
            article = obj.get('article') if isinstance(obj, dict) else None
            if not isinstance(article, str) or not article.strip():
                raise CorpusFormatError('field "article" is missing or empty', path, number)
            articles.append(article)
    return articles


def read_texts(path: str, field: str = 'summary') -> List[str]:
    """Field values of a .jsonl corpus, or the lines of any other text file."""
    if path.endswith('.jsonl'):
        return [getattr(record, field) for record in iter_corpus(path)]
    return read_lines(path)
