import logging
import os
import sys

GREEN = '\033[92m'
RED = '\033[91m'
YELLOW = '\033[93m'
RESET = '\033[0m'

DEFAULT_LOG_FILE = 'logs/log_agg_summarizer.log'


class LoggerSingleton(object):
    instance = None

    @classmethod
    def new_instance(cls, *args, **kwargs):
        if not cls.instance:
            cls.instance = cls(*args, **kwargs)
        return cls.instance

    def __init__(self, log_file=DEFAULT_LOG_FILE, quiet=False):
        self.log_file = log_file
        self.quiet = quiet

        log_dir = os.path.dirname(log_file)
        if log_dir and not os.path.exists(log_dir):
            os.makedirs(log_dir)

        self.logger = logging.getLogger(log_file)
        self.logger.setLevel(logging.DEBUG)

        if not self.logger.handlers:
            file_handler = logging.FileHandler(log_file, encoding='utf-8')
            file_handler.setLevel(logging.DEBUG)

            formatter = logging.Formatter('%(asctime)s - %(levelname)s - %(message)s')
            file_handler.setFormatter(formatter)
            self.logger.addHandler(file_handler)

    def set_log_file(self, log_file):
        if log_file == self.log_file:
            return
        log_dir = os.path.dirname(log_file)
        if log_dir and not os.path.exists(log_dir):
            os.makedirs(log_dir)
        for handler in list(self.logger.handlers):
            self.logger.removeHandler(handler)
            handler.close()
        self.log_file = log_file
        self.logger = logging.getLogger(log_file)
        self.logger.setLevel(logging.DEBUG)
        if not self.logger.handlers:
            file_handler = logging.FileHandler(log_file, encoding='utf-8')
            file_handler.setFormatter(logging.Formatter('%(asctime)s - %(levelname)s - %(message)s'))
            self.logger.addHandler(file_handler)

    def set_quiet(self, quiet: bool):
        self.quiet = quiet

    def _echo(self, color, mes):
        # stdout may carry command output, so the echo goes to stderr
        if not self.quiet:
            print(color + mes + RESET, file=sys.stderr)

    def add_debug(self, mes):
        self.logger.debug(mes)
        self._echo(GREEN, mes)

    def add_info(self, mes):
        self.logger.info(mes)
        self._echo(GREEN, mes)

    def add_warning(self, mes):
        self.logger.warning(mes)
        self._echo(YELLOW, mes)

    def add_error(self, mes):
        self.logger.error(mes)
        self._echo(RED, mes)

    def add_critical(self, mes):
        self.logger.critical(mes)
        self._echo(RED, mes)

    def count_lines(self, chunk_size=1 << 13):
        with open(self.log_file, encoding='utf-8') as file:
            return sum(chunk.count('\n')
                       for chunk in iter(lambda: file.read(chunk_size), ''))
