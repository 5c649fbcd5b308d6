"""
Gittins indices for Bernoulli arms with Beta posteriors.

States are stored in posterior-count coordinates (a, b): an arm with s
successes and f failures under a Beta(1, 1) prior sits at (1 + s, 1 + f).
The index of a state is the per-step retirement reward lambda at which playing
the arm (and continuing optimally) is exactly as good as retiring forever on
lambda / (1 - d). It is found by bisection on lambda, each evaluation being a
finite-horizon backward induction over the reachable posterior states.
"""
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.optimize import bisect

import core.config
from core.utils import GittinsTableError, debug, ordered_map

TABLE_VERSION = 'rar-gittins-table v1'
MAX_BISECTION_ITER = 100


def as_counts(a, b) -> Tuple[np.ndarray, np.ndarray]:
    """Cast posterior parameters to integer table coordinates; 2.0 is accepted, 2.5 is not."""
    a = np.asarray(a)
    b = np.asarray(b)
    if not (np.all(a == np.round(a)) and np.all(b == np.round(b))):
        raise GittinsTableError('Gittins-based rules need integer Beta prior parameters')
    return a.astype(np.int64), b.astype(np.int64)


@dataclass(frozen=True)
class GittinsTable:
    discount: float
    max_n: int
    tol: float
    horizon: int
    values: np.ndarray

    @property
    def max_total(self) -> int:
        # largest a + b stored
        return self.max_n + 2

    def lookup(self, a: float, b: float) -> float:
        a, b = (int(x) for x in as_counts(a, b))
        if a < 1 or b < 1 or a + b > self.max_total:
            raise GittinsTableError(
                f'Gittins state (a={a}, b={b}) is outside the table (a + b <= {self.max_total}); '
                f'rebuild it with a larger --max-n')
        return float(self.values[a, b])

    def indices(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a, b = as_counts(a, b)
        if a.size and (int(np.max(a + b)) > self.max_total or int(np.min(a)) < 1 or int(np.min(b)) < 1):
            raise GittinsTableError(
                f'Gittins states up to a + b = {int(np.max(a + b))} requested but the table stops at '
                f'{self.max_total}; rebuild it with a larger --max-n')
        return self.values[a, b]

    def covers(self, max_total: int) -> bool:
        return max_total <= self.max_total


def horizon_for(discount: float, tol: float) -> int:
    # smallest H with d^H / (1 - d) < tol
    return max(1, math.ceil(math.log(tol * (1.0 - discount)) / math.log(discount)))


@dataclass(frozen=True)
class _Lattice:
    # posterior success probability of every reachable state, by depth, and the same scaled by d
    p: List[np.ndarray]
    dp: List[np.ndarray]
    discount: float

    @property
    def horizon(self) -> int:
        return len(self.p) - 1


def _lattice(a: int, b: int, discount: float, horizon: int) -> _Lattice:
    n = np.arange(horizon + 1, dtype=float)
    p = [(a + n[:depth + 1]) / (a + b + depth) for depth in range(horizon + 1)]
    return _Lattice(p=p, dp=[discount * x for x in p], discount=discount)


def _play_advantage(lam: float, lattice: _Lattice) -> float:
    d = lattice.discount
    retire = lam / (1.0 - d)
    value = np.maximum(retire, lattice.p[-1] / (1.0 - d))
    play_buf = np.empty_like(value)
    stay_buf = np.empty_like(value)
    for depth in range(lattice.horizon - 1, -1, -1):
        low = value[:depth + 1]
        play = play_buf[:depth + 1]
        stay = stay_buf[:depth + 1]
        # p + d * (p * V[n + 1] + (1 - p) * V[n])
        np.subtract(value[1:depth + 2], low, out=play)
        play *= lattice.dp[depth]
        play += lattice.p[depth]
        np.multiply(low, d, out=stay)
        play += stay
        if depth == 0:
            return float(play[0] - retire)
        np.maximum(play, retire, out=low)
    raise AssertionError('unreachable')


def calibrate_state(a: int, b: int, discount: float, horizon: int, tol: float) -> float:
    mean = a / (a + b)
    lattice = _lattice(a, b, discount, horizon)
    if _play_advantage(mean, lattice) <= 0.0:
        return mean
    try:
        root, result = bisect(_play_advantage, mean, 1.0, args=(lattice,),
                              xtol=tol, maxiter=MAX_BISECTION_ITER, full_output=True, disp=False)
    except ValueError as e:
        raise GittinsTableError(f'bisection failed for state (a={a}, b={b}): {e}')
    if not result.converged:
        raise GittinsTableError(
            f'bisection did not converge for state (a={a}, b={b}) after {result.iterations} iterations '
            f'(discount={discount}, horizon={horizon}, tol={tol}); loosen --tol')
    return float(root)


def _calibrate_worker(args: Tuple[int, int, float, int, float]) -> float:
    return calibrate_state(*args)


def compute_gittins_table(discount: float = core.config.DEFAULT_DISCOUNT, max_n: int = 100,
                          tol: float = core.config.DEFAULT_TOL, threads: int = 1,
                          on_progress: Optional[Callable[[int, int], None]] = None) -> GittinsTable:
    if not 0.0 < discount < 1.0:
        raise ValueError(f'discount must lie in (0, 1), got {discount}')
    if max_n < 0:
        raise ValueError(f'max_n must be >= 0, got {max_n}')
    if tol <= 0.0:
        raise ValueError(f'tol must be positive, got {tol}')

    horizon = horizon_for(discount, tol)
    debug(f'Gittins horizon {horizon} for discount={discount}, tol={tol}')
    total = max_n + 2
    states = [(a, b) for a in range(1, total) for b in range(1, total + 1 - a)]
    jobs = [(a, b, discount, horizon, tol) for a, b in states]
    results = ordered_map(_calibrate_worker, jobs, threads=threads, on_progress=on_progress, chunksize=16)

    values = np.full((total + 1, total + 1), np.nan)
    for (a, b), nu in zip(states, results):
        values[a, b] = nu
    return GittinsTable(discount=discount, max_n=max_n, tol=tol, horizon=horizon, values=values)


def save_table(table: GittinsTable, path: str):
    with open(path, 'w') as fd:
        fd.write(f'# {TABLE_VERSION}\n')
        fd.write(f'discount={table.discount!r}\n')
        fd.write(f'max_n={table.max_n}\n')
        fd.write(f'tol={table.tol!r}\n')
        fd.write(f'horizon={table.horizon}\n')
        # row a holds b = 1 .. max_total - a
        for a in range(1, table.max_total):
            row = [float(table.values[a, b]).hex() for b in range(1, table.max_total + 1 - a)]
            fd.write(' '.join(row) + '\n')


def load_table(path: str) -> GittinsTable:
    try:
        with open(path, 'r') as fd:
            lines = fd.read().splitlines()
    except FileNotFoundError:
        raise GittinsTableError(f"Gittins table '{path}' not found; build it first with "
                                f"'rar-sim gittins-table --discount 0.99 --max-n <T> --out {path}'")

    if not lines or lines[0] != f'# {TABLE_VERSION}':
        raise GittinsTableError(f"'{path}' is not a {TABLE_VERSION} file")
    header = {}
    for line in lines[1:5]:
        key, _, value = line.partition('=')
        header[key] = value
    try:
        discount = float(header['discount'])
        max_n = int(header['max_n'])
        tol = float(header['tol'])
        horizon = int(header['horizon'])
    except (KeyError, ValueError) as e:
        raise GittinsTableError(f"malformed header in '{path}': {e}")

    total = max_n + 2
    rows = lines[5:]
    if len(rows) != total - 1:
        raise GittinsTableError(f"'{path}' holds {len(rows)} rows, expected {total - 1}")
    values = np.full((total + 1, total + 1), np.nan)
    for a, row in enumerate(rows, start=1):
        cells = row.split()
        if len(cells) != total - a:
            raise GittinsTableError(f"row a={a} of '{path}' holds {len(cells)} values, expected {total - a}")
        values[a, 1:total + 1 - a] = [float.fromhex(cell) for cell in cells]
    return GittinsTable(discount=discount, max_n=max_n, tol=tol, horizon=horizon, values=values)
