EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3


class AggSumError(Exception):
    exit_code = EXIT_RUNTIME


# ---- configuration (exit 1) ----

class ConfigError(AggSumError, ValueError):
    exit_code = EXIT_CONFIG

    def __init__(self, message: str, key: str = None):
        self.key = key
        if key:
            message = f'[{key}] {message}'
        super().__init__(message)


# ---- data (exit 2) ----

class DataError(AggSumError, ValueError):
    exit_code = EXIT_DATA


class CorpusFormatError(DataError):
    def __init__(self, message: str, path: str = None, line: int = None):
        self.path = path
        self.line = line
        where = ''
        if path is not None:
            where += f'{path}'
        if line is not None:
            where += f':{line}'
        super().__init__(f'{where}: {message}' if where else message)


class EmptyInputError(DataError):
    pass


class MappingError(DataError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ''


class VocabularyMismatchError(DataError):
    def __init__(self, expected: str, found: str):
        self.expected = expected
        self.found = found
        super().__init__(f'vocabulary hash mismatch: checkpoint {expected}, vocabulary file {found}')


class CheckpointError(DataError):
    def __init__(self, message: str, field: str = None):
        self.field = field
        super().__init__(f'checkpoint {field}: {message}' if field else f'checkpoint: {message}')


# ---- runtime (exit 3) ----

class ShapeError(AggSumError, ValueError):
    pass


class ContractError(AggSumError, RuntimeError):
    pass


class LengthError(AggSumError, ValueError):
    pass


class EmbeddingIndexError(AggSumError, IndexError):
    def __init__(self, token_id: int, size: int):
        self.token_id = token_id
        self.size = size
        super().__init__(f'embedding id {token_id} outside table of {size} rows')


class TrainingError(AggSumError, RuntimeError):
    def __init__(self, message: str, parameter: str = None):
        self.parameter = parameter
        super().__init__(f'{parameter}: {message}' if parameter else message)
