"""
Data-generating process for binary-outcome trials with time trends.

Outcomes follow a logistic model in the stage index t_j = j - 1, a binary
patient covariate Z ~ Bernoulli(q_j) and a per-arm treatment effect. Arm 0 is
the control and always has a zero treatment coefficient.
"""
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit as _expit
from scipy.special import logit


def expit(u: float) -> float:
    return float(_expit(u))


@dataclass(frozen=True)
class OutcomeModel:
    beta0: float
    beta_arm: Tuple[float, ...]
    q_schedule: Tuple[float, ...]
    b: int
    beta_t: float = 0.0
    beta_z: float = 0.0
    z_observed: bool = False
    # overall trend the model was built from, kept for reporting only
    D: Optional[float] = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, 'beta_arm', tuple(float(x) for x in self.beta_arm))
        object.__setattr__(self, 'q_schedule', tuple(float(x) for x in self.q_schedule))
        if len(self.q_schedule) < 1:
            raise ValueError('q_schedule must hold at least one stage')
        if any(not 0.0 <= q <= 1.0 for q in self.q_schedule):
            raise ValueError(f'q_schedule entries must lie in [0, 1]: {self.q_schedule}')
        if len(self.beta_arm) < 2:
            raise ValueError('beta_arm must hold the control and at least one experimental arm')
        if self.beta_arm[0] != 0.0:
            raise ValueError(f'beta_arm[0] is the control effect and must be 0, got {self.beta_arm[0]}')
        if self.b < 1:
            raise ValueError(f'block size b must be >= 1, got {self.b}')

    @property
    def J(self) -> int:
        return len(self.q_schedule)

    @property
    def K(self) -> int:
        return len(self.beta_arm) - 1

    @property
    def T(self) -> int:
        return self.b * self.J

    @property
    def arms(self) -> int:
        return self.K + 1

    @property
    def is_null(self) -> bool:
        return all(beta == 0.0 for beta in self.beta_arm)

    def check_index(self, k: int, j: int):
        if not 0 <= k <= self.K:
            raise ValueError(f'arm index {k} out of range 0..{self.K}')
        if not 1 <= j <= self.J:
            raise ValueError(f'stage index {j} out of range 1..{self.J}')

    def linear_predictor(self, k: int, j: int, z: int) -> float:
        return self.beta0 + self.beta_t * (j - 1) + self.beta_z * z + self.beta_arm[k]


@dataclass(frozen=True)
class PatientRecord:
    stage: int
    z: int
    arm: int
    outcome: int


def success_probability(m: OutcomeModel, k: int, j: int, z: int) -> float:
    m.check_index(k, j)
    if z not in (0, 1):
        raise ValueError(f'covariate z must be 0 or 1, got {z}')
    return expit(m.linear_predictor(k, j, z))


def marginal_success_probability(m: OutcomeModel, k: int, j: int) -> float:
    m.check_index(k, j)
    q = m.q_schedule[j - 1]
    return (1 - q) * expit(m.linear_predictor(k, j, 0)) + q * expit(m.linear_predictor(k, j, 1))


def mean_response_rate(m: OutcomeModel, k: int) -> float:
    return sum(marginal_success_probability(m, k, j) for j in range(1, m.J + 1)) / m.J


def stage_rates(m: OutcomeModel, k: int) -> np.ndarray:
    return np.array([marginal_success_probability(m, k, j) for j in range(1, m.J + 1)])


def treatment_effect(m: OutcomeModel, k: int) -> float:
    return mean_response_rate(m, k) - mean_response_rate(m, 0)


def best_arm(m: OutcomeModel) -> int:
    # under the global null every arm is best; the last label is used by convention
    rates = [mean_response_rate(m, k) for k in range(m.arms)]
    top = max(rates)
    if all(math.isclose(r, top, rel_tol=0.0, abs_tol=1e-12) for r in rates):
        return m.K
    return int(np.argmax(rates))


def effect_to_beta(p0: float, p1: float) -> float:
    if not (0 < p0 < 1 and 0 < p1 < 1):
        raise ValueError(f'rates must lie in (0, 1): p0={p0}, p1={p1}')
    return float(logit(p1) - logit(p0))


def solve_trend_coefficient(D: float, beta0: float, J: int) -> float:
    if J < 2:
        raise ValueError(f'a trend needs at least two stages, got J={J}')
    start = expit(beta0)
    end = start + D
    if not 0.0 < end < 1.0:
        raise ValueError(f'overall trend D={D} drives the rate {start:.4f} outside (0, 1)')
    return float((logit(end) - logit(start)) / (J - 1))


def linear_schedule(start: float, step: float, J: int) -> Tuple[float, ...]:
    return tuple(round(start + (j - 1) * step, 12) for j in range(1, J + 1))


def piecewise_schedule(start: float, step: float, restart: float, J: int, switch: int = 6) -> Tuple[float, ...]:
    """q_j = start + (j-1)*step for j < switch, then restart - (j-switch)*step."""
    schedule = []
    for j in range(1, J + 1):
        if j < switch:
            schedule.append(start + (j - 1) * step)
        else:
            schedule.append(restart - (j - switch) * step)
    return tuple(round(q, 12) for q in schedule)


def build_scenario_i(D: float, beta0: float, beta_arm: Sequence[float], J: int, b: int, K: int,
                     q: float = 0.0) -> OutcomeModel:
    if len(beta_arm) != K + 1:
        raise ValueError(f'beta_arm must have K+1={K + 1} entries, got {len(beta_arm)}')
    beta_t = 0.0 if D == 0 else solve_trend_coefficient(D, beta0, J)
    return OutcomeModel(beta0=beta0, beta_t=beta_t, beta_z=0.0, beta_arm=tuple(beta_arm),
                        q_schedule=(q,) * J, b=b, D=D)


def build_scenario_ii(q_schedule: Sequence[float], beta_z: float, beta0: float, beta_arm: Sequence[float],
                      J: int, b: int, K: int, z_observed: bool = False) -> OutcomeModel:
    if len(q_schedule) != J:
        raise ValueError(f'q_schedule has {len(q_schedule)} entries but J={J}')
    if len(beta_arm) != K + 1:
        raise ValueError(f'beta_arm must have K+1={K + 1} entries, got {len(beta_arm)}')
    return OutcomeModel(beta0=beta0, beta_t=0.0, beta_z=beta_z, beta_arm=tuple(beta_arm),
                        q_schedule=tuple(q_schedule), b=b, z_observed=z_observed)
