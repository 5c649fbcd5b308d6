"""
Monte Carlo randomization test for response-adaptive designs.

The observed outcome sequence is held fixed, block by block, while the
allocations are re-drawn under the same adaptive rule, each block's
probabilities being computed from the re-drawn allocations and the observed
outcomes so far. The null distribution of the test statistic is read off these
re-simulated trials.
"""
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

import core.config
from core.allocation import AllocationRuleSpec, ArmState, block_probabilities, draw_assignments
from core.gittins import GittinsTable
from core.hypothesis import TestResult, z_statistic
from core.records import TrialResult

# slack when counting resampled statistics at least as extreme as the observed one
_TIE_SLACK = 1e-9


class Alternative(Enum):
    TWO_SIDED = 'two-sided'
    GREATER = 'greater'


def trial_statistic(successes: Sequence[int], totals: Sequence[int],
                    alternative: Alternative = Alternative.TWO_SIDED) -> float:
    """
    Largest per-arm z statistic against the control.

    Two-sided uses |z|; 'greater' uses the signed statistic oriented so that
    large values favour the experimental arm. With one experimental arm this is
    the ordinary pooled z-test statistic.
    """
    stats = []
    for k in range(1, len(totals)):
        if totals[0] == 0 or totals[k] == 0:
            z = 0.0
        else:
            z = z_statistic(successes[0], totals[0], successes[k], totals[k])
        stats.append(abs(z) if alternative == Alternative.TWO_SIDED else -z)
    return max(stats)


def resample_allocation(outcomes: np.ndarray, arms: int, rule: AllocationRuleSpec, rng: np.random.Generator,
                        table: Optional[GittinsTable] = None) -> Tuple[np.ndarray, np.ndarray]:
    J, b = outcomes.shape
    T = J * b
    successes = np.zeros(arms, dtype=int)
    totals = np.zeros(arms, dtype=int)
    states = [ArmState() for _ in range(arms)]
    for j in range(1, J + 1):
        probabilities = block_probabilities(rule, states, j, b, T, rng, table)
        assigned = draw_assignments(probabilities, b, rng)
        successes += np.bincount(assigned, weights=outcomes[j - 1], minlength=arms).astype(int)
        totals += np.bincount(assigned, minlength=arms)
        states = [ArmState(int(s), int(n - s)) for s, n in zip(successes, totals)]
    return successes, totals


def randomization_test(observed: TrialResult, rule: AllocationRuleSpec, M: int, rng: np.random.Generator,
                       table: Optional[GittinsTable] = None, alpha: float = core.config.DEFAULT_ALPHA,
                       alternative: Alternative = Alternative.TWO_SIDED) -> TestResult:
    if M < 1:
        raise ValueError(f'M must be >= 1, got {M}')
    alternative = Alternative(alternative)
    outcomes = observed.block_outcomes()
    if outcomes.min() == outcomes.max():
        return TestResult(statistic=0.0, p_value=1.0, reject=False)

    statistic = trial_statistic(observed.successes, observed.totals, alternative)
    extreme = 0
    for _ in range(M):
        successes, totals = resample_allocation(outcomes, observed.arms, rule, rng, table)
        if trial_statistic(successes, totals, alternative) >= statistic - _TIE_SLACK:
            extreme += 1
    return TestResult.at(statistic, (1 + extreme) / (M + 1), alpha)
