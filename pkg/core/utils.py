import os
from multiprocessing import Pool, cpu_count
from typing import Callable, List, Optional, Sequence

import numpy as np
import sentry_sdk
from rich.console import Console

import core.config

console = Console()


class RarException(Exception):
    def __init__(self, msg: str, return_code: int = 1):
        self.msg = msg
        self.return_code: int = return_code
        super().__init__(msg)


class ConfigurationError(RarException):
    def __init__(self, msg: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            msg = f'line {line}: {msg}'
        super().__init__(msg, return_code=2)


class GittinsTableError(RarException):
    pass


class ModelMismatchError(RarException):
    pass


def warn(msg: str):
    console.print(f'[[bold yellow]WARNING[/bold yellow]] {msg}')


def debug(*args):
    if core.config.DEBUG:
        console.print('[Debug]', *args)


def init_sentry() -> bool:
    dsn = os.environ.get('SENTRY_DSN')
    if not dsn:
        return False
    environment = 'development' if core.config.DEBUG else 'production'
    sentry_sdk.init(
        dsn=dsn,
        traces_sample_rate=float(os.environ.get('SENTRY_SAMPLE_RATE', 0.0)),
        environment=environment
    )
    return True


def replicate_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    # counter-based split: the same (seed, index, stream) always yields the same stream
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index, stream)))


def resolve_threads(threads: Optional[int]) -> int:
    if threads is None or threads <= 0:
        return cpu_count()
    return threads


def ordered_map(func: Callable, items: Sequence, threads: int = 1,
                initializer: Callable = None, initargs: tuple = (),
                on_progress: Callable[[int, int], None] = None, chunksize: int = 8) -> List:
    """
    Map ``func`` over ``items`` and return the results in input order.

    With ``threads > 1`` the work runs on a process pool; the ordering of the
    returned list never depends on the worker count. Falls back to a sequential
    loop if the pool cannot be started.
    """
    total = len(items)
    results = []

    def _report(i):
        if on_progress is not None and (i % max(1, total // 20) == 0 or i == total - 1):
            on_progress(i + 1, total)

    if threads > 1 and total > 1:
        try:
            with Pool(processes=min(threads, total), initializer=initializer, initargs=initargs) as pool:
                for i, res in enumerate(pool.imap(func, items, chunksize=chunksize)):
                    results.append(res)
                    _report(i)
            return results
        except (OSError, RuntimeError) as e:
            warn(f'Parallel execution unavailable ({e}). Falling back to sequential mode.')
            results = []

    if initializer is not None:
        initializer(*initargs)
    for i, item in enumerate(items):
        results.append(func(item))
        _report(i)
    return results



def derive_seed(seed: int, *salt: int) -> int:
    return int(np.random.SeedSequence([seed, *salt]).generate_state(1)[0])
