from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, TypeVar

from systems.logger import LoggerSingleton


In = TypeVar('In')
Out = TypeVar('Out')

_logger = LoggerSingleton.new_instance()


def ordered_map(func: Callable[[In], Out], items: Iterable[In], workers: int = 1,
                progress_every: int = 0, label: str = 'items') -> List[Out]:
    """
    func over items on `workers` threads; results keep input order. The first
    exception raised by func propagates after the pool shuts down.
    """
    items = list(items)
    total = len(items)

    def report(done: int):
        if progress_every and (done % progress_every == 0 or done == total):
            _logger.add_info(f'{label}: {done}/{total}')

    results = []
    if workers <= 1 or total <= 1:
        for item in items:
            results.append(func(item))
            report(len(results))
        return results

    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix='agg-worker') as pool:
        for result in pool.map(func, items):
            results.append(result)
            report(len(results))
    return results
