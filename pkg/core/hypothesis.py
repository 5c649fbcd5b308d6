import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence

import numpy as np
from scipy.stats import hypergeom, norm

import core.config

# relative tolerance when comparing hypergeometric probabilities to the observed table
_FISHER_RTOL = 1 + 1e-7


class TestKind(Enum):
    __test__ = False

    Z = 'z'
    FISHER = 'fisher'


@dataclass(frozen=True)
class TestResult:
    __test__ = False

    statistic: float
    p_value: float
    reject: bool

    @staticmethod
    def at(statistic: float, p_value: float, threshold: float) -> 'TestResult':
        p_value = min(1.0, max(0.0, p_value))
        return TestResult(statistic=statistic, p_value=p_value, reject=p_value <= threshold)


@dataclass(frozen=True)
class TestSpec:
    __test__ = False

    kind: TestKind = TestKind.Z
    alpha: float = core.config.DEFAULT_ALPHA
    # calibrated rejection threshold on the smallest per-arm p-value
    threshold: Optional[float] = None

    def __post_init__(self):
        if not isinstance(self.kind, TestKind):
            object.__setattr__(self, 'kind', TestKind(self.kind))
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f'alpha must lie in (0, 1], got {self.alpha}')

    def per_test_level(self, K: int) -> float:
        if self.threshold is not None:
            return self.threshold
        return bonferroni_level(self.alpha, K)


def _check_counts(s: int, n: int, label: str):
    if n < 0 or s < 0 or s > n:
        raise ValueError(f'invalid counts for {label}: s={s}, n={n}')


def z_statistic(s0: int, n0: int, s1: int, n1: int) -> float:
    pooled = (s0 + s1) / (n0 + n1)
    if pooled <= 0.0 or pooled >= 1.0:
        return 0.0
    se = math.sqrt(pooled * (1 - pooled) * (1 / n0 + 1 / n1))
    return (s0 / n0 - s1 / n1) / se


def z_test(s0: int, n0: int, s1: int, n1: int, threshold: float = core.config.DEFAULT_ALPHA) -> TestResult:
    _check_counts(s0, n0, 'control')
    _check_counts(s1, n1, 'experimental arm')
    if n0 < 1 or n1 < 1:
        raise ValueError(f'z-test needs at least one patient per arm (n0={n0}, n1={n1})')
    z = z_statistic(s0, n0, s1, n1)
    return TestResult.at(z, float(2 * norm.sf(abs(z))), threshold)


def fisher_exact(s0: int, n0: int, s1: int, n1: int, threshold: float = core.config.DEFAULT_ALPHA) -> TestResult:
    """
    Two-sided Fisher exact test on the 2x2 table [[s0, n0 - s0], [s1, n1 - s1]].

    The p-value sums the hypergeometric probabilities of all tables with the
    observed margins whose probability does not exceed the observed one. The
    reported statistic is the difference in observed rates (control minus arm).
    """
    _check_counts(s0, n0, 'control')
    _check_counts(s1, n1, 'experimental arm')
    if n0 + n1 == 0:
        raise ValueError('Fisher exact test needs at least one patient')
    diff = (s0 / n0 if n0 else 0.0) - (s1 / n1 if n1 else 0.0)
    successes = s0 + s1
    support = np.arange(max(0, successes - n1), min(n0, successes) + 1)
    pmf = hypergeom.pmf(support, n0 + n1, successes, n0)
    observed = hypergeom.pmf(s0, n0 + n1, successes, n0)
    p_value = float(pmf[pmf <= observed * _FISHER_RTOL].sum())
    return TestResult.at(diff, p_value, threshold)


def bonferroni_level(alpha: float, K: int) -> float:
    if K < 1:
        raise ValueError(f'K must be >= 1, got {K}')
    return alpha / K


def compare_to_control(successes: Sequence[int], totals: Sequence[int], spec: TestSpec) -> List[TestResult]:
    """One test per experimental arm against the control; arms without patients never reject."""
    K = len(totals) - 1
    level = spec.per_test_level(K)
    results = []
    for k in range(1, K + 1):
        if totals[0] == 0 or totals[k] == 0:
            results.append(TestResult(statistic=0.0, p_value=1.0, reject=False))
        elif spec.kind == TestKind.FISHER:
            results.append(fisher_exact(successes[0], totals[0], successes[k], totals[k], level))
        else:
            results.append(z_test(successes[0], totals[0], successes[k], totals[k], level))
    return results
