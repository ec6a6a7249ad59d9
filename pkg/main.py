import argparse
import os
import sys
from dataclasses import fields, replace
from typing import Dict, List, Optional

import numpy as np

from control.configs import AGG_METHODS, PRECISIONS, TOKENIZER_MODES, RunConfig
from control.corpus import read_articles, read_corpus, read_texts, write_lines
from control.errors import EXIT_OK, EXIT_RUNTIME, AggSumError, ConfigError, DataError
from engine.decoding import summarize
from engine.evaluation import (dataset_statistics, evaluate_corpus, lead_baseline, novelty_stats,
                               report_json, report_text)
from engine.model import Summarizer
from engine.tokenizer import SPECIAL_TOKENS, Tokenizer, Vocabulary, bpe_learn, build_vocab, load_tokenizer, oov_rate
from engine.training import Trainer, encode_records
from systems.checkpoint import (checkpoint_from_trainer, load_checkpoint, restore_trainer, save_checkpoint,
                                summarizer_from_checkpoint)
from systems.configure import Settings
from systems.logger import LoggerSingleton
from systems.metrics import MetricsLog, plot_losses, read_metrics
from systems.workers import ordered_map
from tools.tools import get_time_string, word_tokens


_logger = LoggerSingleton.new_instance()

CHOICES = {
    'tokenizer': TOKENIZER_MODES,
    'agg_method': AGG_METHODS,
    'pointer': ('on', 'off'),
    'precision': PRECISIONS,
}


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors become ConfigError so they share exit code 1."""

    def error(self, message):
        raise ConfigError(message, 'usage')


def _dtype(run: RunConfig):
    return np.float64 if run.precision == 'float64' else np.float32


def _ensure_parent(path: str):
    folder = os.path.dirname(path)
    if folder and not os.path.exists(folder):
        os.makedirs(folder)


def _emit(text: str, path: Optional[str] = None):
    if path:
        with open(path, 'w', encoding='utf-8') as file:
            file.write(text)
    else:
        sys.stdout.write(text)


# ------------------------------ commands ------------------------------

def cmd_build_vocab(settings: Settings, args) -> int:
    run = settings.run
    corpus_path = args.corpus or run.train_path
    records = read_corpus(corpus_path)
    texts = [text for record in records for text in (record.article, record.summary)]
    bpe = None
    if run.tokenizer == 'bpe':
        bpe = bpe_learn(texts, run.bpe_merges)
        _ensure_parent(run.merges_path)
        bpe.save(run.merges_path)
        _logger.add_info(f'{len(bpe.merges)} BPE merges written to {run.merges_path}')
    segmenter = Tokenizer(Vocabulary(SPECIAL_TOKENS), run.tokenizer, bpe)
    streams = [segmenter.segment(text) for text in texts]
    vocab = build_vocab(streams, run.vocab_size)
    _ensure_parent(run.vocab_path)
    vocab.save(run.vocab_path)
    rate = oov_rate(streams, vocab)
    distinct = len({token for stream in streams for token in stream})
    _logger.add_info(f'vocabulary of {len(vocab)} entries written to {run.vocab_path}')
    sys.stdout.write(f'records\t{len(records)}\n'
                     f'distinct_tokens\t{distinct}\n'
                     f'vocab_size\t{len(vocab)}\n'
                     f'oov_rate\t{rate:.6f}\n'
                     f'vocab_hash\t{vocab.content_hash()}\n')
    return EXIT_OK


def cmd_train(settings: Settings, args) -> int:
    run = settings.run
    tokenizer = load_tokenizer(run.tokenizer, run.vocab_path, run.merges_path)
    vocab_hash = tokenizer.vocab.content_hash()
    train_pairs = encode_records(read_corpus(run.train_path), tokenizer, run.truncate_len, run.max_target_len)
    valid_pairs = []
    if os.path.exists(run.valid_path):
        valid_pairs = encode_records(read_corpus(run.valid_path), tokenizer, run.truncate_len, run.max_target_len)
    else:
        _logger.add_warning(f'no validation corpus at {run.valid_path}; the schedule follows training loss')

    model_config = run.model_config(len(tokenizer.vocab))
    summarizer = Summarizer.create(model_config, seed=run.seed, dtype=_dtype(run))
    _logger.add_info(f'model: {summarizer.params.count()} parameters, aggregation {model_config.agg_method} '
                     f'(L={model_config.agg_layers}), pointer {"on" if model_config.use_pointer else "off"}')

    metrics = MetricsLog(settings.metrics_path())
    last_path = settings.checkpoint_path('last')

    def on_checkpoint(kind: str, trainer: Trainer):
        save_checkpoint(settings.checkpoint_path(kind), checkpoint_from_trainer(trainer, run.tokenizer))

    trainer = Trainer(summarizer, run.train_config(), train_pairs, valid_pairs, vocab_hash,
                      on_epoch=metrics.append, on_checkpoint=on_checkpoint)
    if args.resume:
        checkpoint = load_checkpoint(last_path)
        checkpoint.check_vocab(vocab_hash)
        if checkpoint.model_config != model_config:
            raise ConfigError(f'{last_path} was trained with a different model configuration', 'config')
        restore_trainer(trainer, checkpoint)
    elif os.path.exists(metrics.path):
        os.remove(metrics.path)
    Settings.write_config_file(os.path.join(run.output_dir, 'run.conf'), run)

    history = trainer.fit()
    if history:
        last = history[-1]
        sys.stdout.write(f'epochs\t{trainer.epoch}\nsteps\t{trainer.step}\n'
                         f'train_loss\t{last["train_loss"]:.6f}\nval_loss\t{last["val_loss"]:.6f}\n'
                         f'best_val_loss\t{trainer.best_val_loss:.6f}\nlr\t{trainer.lr:g}\n')
    return EXIT_OK


def _checkpoint_for(settings: Settings, explicit: Optional[str]) -> str:
    if explicit:
        return explicit
    best = settings.checkpoint_path('best')
    return best if os.path.exists(best) else settings.checkpoint_path('last')


def cmd_summarize(settings: Settings, args) -> int:
    run = settings.run
    checkpoint = load_checkpoint(_checkpoint_for(settings, args.checkpoint))
    tokenizer = load_tokenizer(checkpoint.tokenizer, run.vocab_path, run.merges_path)
    checkpoint.check_vocab(tokenizer.vocab.content_hash())
    summarizer = summarizer_from_checkpoint(checkpoint, _dtype(run))
    beam = run.beam_config()
    if args.greedy:
        beam = replace(beam, beam_size=1)
    if beam.max_len + 1 > checkpoint.model_config.max_positions:
        raise ConfigError(f'{beam.max_len} does not fit the model\'s {checkpoint.model_config.max_positions} '
                          f'positions', 'max_len')
    articles = read_articles(args.input)
    _logger.add_info(f'summarizing {len(articles)} articles, beam {beam.beam_size}, {run.workers} worker(s)')
    outputs = ordered_map(lambda article: summarize(summarizer, tokenizer, article, beam, run.truncate_len,
                                                    greedy=args.greedy),
                          articles, run.workers, progress_every=50, label='summarized')
    if args.output:
        write_lines(args.output, outputs)
    else:
        sys.stdout.write(''.join(line.replace('\n', ' ') + '\n' for line in outputs))
    return EXIT_OK


def cmd_evaluate(settings: Settings, args) -> int:
    candidates = read_texts(args.candidates, 'summary')
    references = read_texts(args.references, 'summary')
    if len(candidates) != len(references):
        raise DataError(f'{args.candidates} has {len(candidates)} records, {args.references} has {len(references)}')
    sources = read_texts(args.sources, 'article') if args.sources else None
    if sources is not None and len(sources) != len(candidates):
        raise DataError(f'{args.sources} has {len(sources)} records, {args.candidates} has {len(candidates)}')
    report = evaluate_corpus(candidates, references, sources)
    _emit(report_text(report))
    if args.json:
        _emit(report_json(report), args.json)
    return EXIT_OK


def cmd_stats(settings: Settings, args) -> int:
    if args.describe:
        report = dataset_statistics(read_corpus(args.describe))
    else:
        if not args.summaries or not args.sources:
            raise ConfigError('stats needs --summaries and --sources, or --describe CORPUS', 'usage')
        summaries = read_texts(args.summaries, 'summary')
        sources = read_texts(args.sources, 'article')
        if len(summaries) != len(sources):
            raise DataError(f'{args.summaries} has {len(summaries)} records, {args.sources} has {len(sources)}')
        report = novelty_stats([word_tokens(s) for s in summaries], [word_tokens(s) for s in sources])
    _emit(report_text(report))
    if args.json:
        _emit(report_json(report), args.json)
    return EXIT_OK


def cmd_lead(settings: Settings, args) -> int:
    articles = read_articles(args.input)
    outputs = [lead_baseline(article, args.sentences) for article in articles]
    if args.output:
        write_lines(args.output, outputs)
    else:
        sys.stdout.write(''.join(line + '\n' for line in outputs))
    return EXIT_OK


def cmd_plot(settings: Settings, args) -> int:
    path = args.metrics or settings.metrics_path()
    out = args.out or os.path.join(settings.run.output_dir, 'loss.png')
    plot_losses(read_metrics(path), out, title=os.path.basename(os.path.dirname(os.path.abspath(path))))
    sys.stdout.write(out + '\n')
    return EXIT_OK


COMMANDS = {
    'build-vocab': cmd_build_vocab,
    'train': cmd_train,
    'summarize': cmd_summarize,
    'evaluate': cmd_evaluate,
    'stats': cmd_stats,
    'lead': cmd_lead,
    'plot': cmd_plot,
}


# ------------------------------ parser ------------------------------

def _config_flags() -> argparse.ArgumentParser:
    parent = ArgumentParser(add_help=False)
    parent.add_argument('--config', help='flat key = value configuration file')
    parent.add_argument('--quiet', action='store_true', help='no log echo on the console')
    group = parent.add_argument_group('configuration keys (override the file)')
    for f in fields(RunConfig):
        group.add_argument('--' + f.name.replace('_', '-'), dest=f.name, default=None,
                           choices=CHOICES.get(f.name), metavar=None if f.name in CHOICES else f.name.upper())
    return parent


def build_parser() -> argparse.ArgumentParser:
    parent = _config_flags()
    parser = ArgumentParser(prog='aggsum', description='Aggregation Transformer summarization toolkit')
    sub = parser.add_subparsers(dest='command', required=True, parser_class=ArgumentParser)

    p = sub.add_parser('build-vocab', parents=[parent], help='build the vocabulary (and BPE merges)')
    p.add_argument('--corpus', help='JSONL corpus (default: train_path)')

    p = sub.add_parser('train', parents=[parent], help='train a model')
    p.add_argument('--resume', action='store_true', help='continue from <output_dir>/last.agtf')

    p = sub.add_parser('summarize', parents=[parent], help='summarize JSONL articles')
    p.add_argument('--checkpoint', help='checkpoint file (default: best, else last, in output_dir)')
    p.add_argument('--input', required=True, help='JSONL file with an "article" per line')
    p.add_argument('--output', help='output file (default: stdout)')
    p.add_argument('--greedy', action='store_true', help='greedy decoding (beam size 1)')

    p = sub.add_parser('evaluate', parents=[parent], help='ROUGE-1/2/L report')
    p.add_argument('--candidates', required=True)
    p.add_argument('--references', required=True)
    p.add_argument('--sources', help='adds novelty ratios of the candidates')
    p.add_argument('--json', help='also write the JSON report here')

    p = sub.add_parser('stats', parents=[parent], help='novelty report or dataset statistics')
    p.add_argument('--summaries')
    p.add_argument('--sources')
    p.add_argument('--describe', metavar='CORPUS', help='dataset statistics of a JSONL corpus')
    p.add_argument('--json', help='also write the JSON report here')

    p = sub.add_parser('lead', parents=[parent], help='Lead-N extractive baseline')
    p.add_argument('--input', required=True)
    p.add_argument('--output')
    p.add_argument('--sentences', type=int, default=3)

    p = sub.add_parser('plot', parents=[parent], help='render the metrics log as a loss curve')
    p.add_argument('--metrics', help='metrics log (default: <output_dir>/metrics.jsonl)')
    p.add_argument('--out', help='PNG path (default: <output_dir>/loss.png)')
    return parser


def _overrides(args) -> Dict[str, str]:
    return {key: getattr(args, key) for key in RunConfig.keys() if getattr(args, key, None) is not None}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _logger.set_quiet(args.quiet)
        settings = Settings(args.config, _overrides(args))
        _logger.set_log_file(settings.run.log_file)
        settings.prepare_folders()
        _logger.add_debug(f'{args.command} started {get_time_string()}')
        code = COMMANDS[args.command](settings, args)
        _logger.add_debug(f'{args.command} finished {get_time_string()}')
        return code
    except AggSumError as e:
        _logger.add_error(f'{type(e).__name__}: {e}')
        return e.exit_code
    except KeyboardInterrupt:
        _logger.add_warning('interrupted')
        return EXIT_RUNTIME
    except Exception as e:
        _logger.add_critical(f'unexpected {type(e).__name__}: {e}')
        return EXIT_RUNTIME


if __name__ == '__main__':
    sys.stdout.reconfigure(encoding='utf-8')
    sys.exit(main())
