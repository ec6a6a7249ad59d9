import configparser
import os
from typing import Any, Dict, Mapping, Optional

from control.configs import RunConfig
from control.errors import ConfigError


SECTION = 'run'


class Settings:
    """
    The validated RunConfig of one command: file values, then command-line
    overrides, then one whole-config validation before any side effect.
    """

    def __init__(self, config_path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None):
        values: Dict[str, Any] = {}
        if config_path:
            values.update(self.read_config_file(config_path))
        if overrides:
            values.update({_normalize(k): v for k, v in overrides.items()})
        self.config_path = config_path
        self.run = RunConfig.from_flat(values)

    @staticmethod
    def read_config_file(path: str) -> Dict[str, str]:
        """Flat `key = value` lines, `#` comments; unknown keys are rejected."""
        if not os.path.isfile(path):
            raise ConfigError(f'configuration file {path} does not exist', 'config')
        parser = configparser.ConfigParser(interpolation=None, comment_prefixes=('#',),
                                           inline_comment_prefixes=('#',))
        parser.optionxform = str
        try:
            with open(path, encoding='utf-8') as file:
                parser.read_string(f'[{SECTION}]\n' + file.read(), source=path)
        except configparser.Error as e:
            raise ConfigError(f'{path}: {e.message if hasattr(e, "message") else e}', 'config')
        values = {}
        known = set(RunConfig.keys())
        for key, value in parser.items(SECTION):
            key = _normalize(key)
            if key not in known:
                raise ConfigError(f'unknown configuration key in {path}', key)
            values[key] = value
        return values

    @staticmethod
    def write_config_file(path: str, run: RunConfig):
        with open(path, 'w', encoding='utf-8') as file:
            for key, value in run.to_dict().items():
                if isinstance(value, bool):
                    value = 'on' if value else 'off'
                file.write(f'{key} = {value}\n')

    def prepare_folders(self):
        for folder in (os.path.dirname(self.run.log_file), self.run.output_dir):
            if folder and not self.folder_exist(folder):
                self.folder_create(folder)

    def file_exist(self, file_path):
        return os.path.exists(file_path)

    def folder_exist(self, folder_path):
        return os.path.exists(folder_path) and os.path.isdir(folder_path)

    def folder_create(self, folder_path):
        os.makedirs(folder_path, exist_ok=True)

    def checkpoint_path(self, kind: str = 'last') -> str:
        return os.path.join(self.run.output_dir, f'{kind}.agtf')

    def metrics_path(self) -> str:
        return os.path.join(self.run.output_dir, 'metrics.jsonl')


def _normalize(key: str) -> str:
    return key.strip().replace('-', '_')
