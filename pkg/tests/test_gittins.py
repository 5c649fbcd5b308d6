from functools import lru_cache

import numpy as np
import pytest

from core.gittins import (GittinsTable, calibrate_state, compute_gittins_table, horizon_for, load_table,
                          save_table)
from core.utils import GittinsTableError


@pytest.fixture(scope='module')
def table():
    return compute_gittins_table(discount=0.9, max_n=10, tol=1e-7)


def _brute_force_index(a, b, discount, horizon=60, tol=1e-7):
    """Calibrate by plain recursion over posterior states and a hand-written bisection."""

    def advantage(lam):
        retire = lam / (1 - discount)

        @lru_cache(maxsize=None)
        def value(x, y, depth):
            p = x / (x + y)
            if depth == horizon:
                return max(retire, p / (1 - discount))
            play = p + discount * (p * value(x + 1, y, depth + 1) + (1 - p) * value(x, y + 1, depth + 1))
            return max(retire, play)

        p = a / (a + b)
        return p + discount * (p * value(a + 1, b, 1) + (1 - p) * value(a, b + 1, 1)) - retire

    lo, hi = a / (a + b), 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if advantage(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def test_horizon_for():
    H = horizon_for(0.99, 1e-6)
    assert 0.99 ** H / (1 - 0.99) < 1e-6
    assert 0.99 ** (H - 1) / (1 - 0.99) >= 1e-6


def test_myopic_limit():
    assert calibrate_state(1, 1, 0.01, horizon_for(0.01, 1e-8), 1e-8) == pytest.approx(0.5, abs=0.01)
    assert calibrate_state(3, 1, 0.01, horizon_for(0.01, 1e-8), 1e-8) == pytest.approx(0.75, abs=0.01)


@pytest.mark.parametrize('a, b', [(1, 1), (2, 1), (1, 2), (3, 2), (2, 4)])
def test_matches_brute_force_calibration(a, b):
    discount = 0.5
    table = compute_gittins_table(discount=discount, max_n=6, tol=1e-8)
    assert table.lookup(a, b) == pytest.approx(_brute_force_index(a, b, discount), abs=1e-4)


def test_index_bounds_and_monotonicity(table):
    total = table.max_total
    for a in range(1, total):
        for b in range(1, total + 1 - a):
            nu = table.lookup(a, b)
            assert 0.0 < nu < 1.0
            assert nu >= a / (a + b) - 1e-12
            if a + b + 1 <= total:
                assert table.lookup(a + 1, b) >= nu - 1e-6
                assert table.lookup(a, b + 1) <= nu + 1e-6


def test_exploration_bonus_shrinks_along_diagonal(table):
    gaps = [table.lookup(k, k) - 0.5 for k in range(1, table.max_total // 2 + 1)]
    assert all(later <= earlier + 1e-6 for earlier, later in zip(gaps, gaps[1:]))


def test_symmetric_states(table):
    assert table.lookup(2, 1) > table.lookup(1, 2)


def test_tighter_tolerance_changes_little():
    coarse = compute_gittins_table(discount=0.8, max_n=4, tol=1e-5)
    fine = compute_gittins_table(discount=0.8, max_n=4, tol=1e-7)
    mask = ~np.isnan(coarse.values)
    assert np.max(np.abs(coarse.values[mask] - fine.values[mask])) <= 2e-5


def test_integral_float_states(table):
    assert table.lookup(2.0, 1.0) == table.lookup(2, 1)
    a = np.array([[1.0, 3.0]])
    b = np.array([[2.0, 1.0]])
    assert np.array_equal(table.indices(a, b), [[table.lookup(1, 2), table.lookup(3, 1)]])
    with pytest.raises(GittinsTableError, match='integer'):
        table.lookup(1.5, 1)
    with pytest.raises(GittinsTableError):
        table.indices(np.array([[1.5]]), np.array([[1.0]]))


@pytest.mark.parametrize('a, b, expected', [(1, 1, 0.8699), (2, 1, 0.9102)])
def test_known_indices_at_099(a, b, expected):
    tol = 1e-6
    assert calibrate_state(a, b, 0.99, horizon_for(0.99, tol), tol) == pytest.approx(expected, abs=1e-4)


def _retirement_oracle(a, b, discount, horizon=400, tol=1e-8):
    """Index with forced retirement after a long horizon, one vector per depth of success counts."""

    def advantage(lam):
        retire = lam / (1 - discount)
        value = np.full(horizon + 1, retire)
        for depth in reversed(range(1, horizon)):
            k = np.arange(depth + 1)
            p = (a + k) / (a + b + depth)
            value = np.maximum(retire, p + discount * (p * value[1:depth + 2] + (1 - p) * value[:depth + 1]))
        p = a / (a + b)
        return p + discount * (p * value[1] + (1 - p) * value[0]) - retire

    lo, hi = a / (a + b), 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if advantage(mid) > 0 else (lo, mid)
    return 0.5 * (lo + hi)


@pytest.mark.slow
def test_grid_matches_retirement_oracle():
    grid = compute_gittins_table(discount=0.9, max_n=18, tol=1e-6)
    worst = max(abs(grid.lookup(a, b) - _retirement_oracle(a, b, 0.9)) for a in range(1, 11) for b in range(1, 11))
    assert worst <= 1e-4


def test_out_of_bounds_lookup(table):
    with pytest.raises(GittinsTableError):
        table.lookup(table.max_total, 1)
    with pytest.raises(GittinsTableError):
        table.lookup(0, 1)
    with pytest.raises(GittinsTableError):
        table.indices(np.array([[table.max_total]]), np.array([[1]]))


def test_round_trip_is_bit_exact(table, tmp_path):
    path = str(tmp_path / 'gi.txt')
    save_table(table, path)
    loaded = load_table(path)
    assert isinstance(loaded, GittinsTable)
    assert (loaded.discount, loaded.max_n, loaded.tol, loaded.horizon) == \
           (table.discount, table.max_n, table.tol, table.horizon)
    mask = ~np.isnan(table.values)
    assert np.array_equal(loaded.values[mask], table.values[mask])
    assert loaded.lookup(1, 1) == table.lookup(1, 1)


def test_load_errors(tmp_path):
    with pytest.raises(GittinsTableError, match='gittins-table'):
        load_table(str(tmp_path / 'missing.txt'))
    bad = tmp_path / 'bad.txt'
    bad.write_text('not a table\n')
    with pytest.raises(GittinsTableError):
        load_table(str(bad))


@pytest.mark.parametrize('kwargs', [dict(discount=1.0), dict(discount=0.0), dict(max_n=-1), dict(tol=0.0)])
def test_invalid_parameters(kwargs):
    with pytest.raises(ValueError):
        compute_gittins_table(**kwargs)
