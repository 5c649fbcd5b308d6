from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

import core.config
from core.gittins import GittinsTable, as_counts
from core.utils import GittinsTableError, debug


class RuleKind(Enum):
    CR = 'CR'
    TS = 'TS'
    RSIHR = 'RSIHR'
    FLGI = 'FLGI'
    CFLGI = 'CFLGI'


@dataclass(frozen=True)
class ArmState:
    s: int = 0
    f: int = 0
    prior_a: float = 1.0
    prior_b: float = 1.0

    def __post_init__(self):
        if self.s < 0 or self.f < 0:
            raise ValueError(f'success/failure counts must be >= 0, got s={self.s}, f={self.f}')
        if self.prior_a <= 0 or self.prior_b <= 0:
            raise ValueError(f'Beta prior parameters must be positive, got ({self.prior_a}, {self.prior_b})')

    @property
    def a(self) -> float:
        return self.prior_a + self.s

    @property
    def b(self) -> float:
        return self.prior_b + self.f

    @property
    def n(self) -> int:
        return self.s + self.f

    @property
    def posterior_mean(self) -> float:
        return self.a / (self.a + self.b)

    def update(self, successes: int, failures: int) -> 'ArmState':
        return ArmState(self.s + successes, self.f + failures, self.prior_a, self.prior_b)


@dataclass(frozen=True)
class AllocationProbabilities:
    pi: Tuple[float, ...]

    def __post_init__(self):
        pi = tuple(float(x) for x in self.pi)
        if any(x < -1e-12 or x > 1 + 1e-12 for x in pi) or abs(sum(pi) - 1.0) > 1e-9:
            raise ValueError(f'allocation probabilities off the simplex: {pi}')
        object.__setattr__(self, 'pi', pi)

    @staticmethod
    def normalized(weights: Sequence[float]) -> 'AllocationProbabilities':
        w = np.clip(np.asarray(weights, dtype=float), 0.0, None)
        return AllocationProbabilities(tuple(w / w.sum()))

    def as_array(self) -> np.ndarray:
        return np.array(self.pi)

    def __len__(self):
        return len(self.pi)

    def __getitem__(self, k: int) -> float:
        return self.pi[k]


@dataclass(frozen=True)
class AllocationRuleSpec:
    kind: RuleKind
    m_ts: int = core.config.DEFAULT_M_TS
    m_flgi: int = core.config.DEFAULT_M_FLGI
    control_floor: Optional[float] = None

    def __post_init__(self):
        if not isinstance(self.kind, RuleKind):
            object.__setattr__(self, 'kind', RuleKind(self.kind))
        if self.m_ts < 1 or self.m_flgi < 1:
            raise ValueError(f'Monte Carlo draw counts must be >= 1 (m_ts={self.m_ts}, m_flgi={self.m_flgi})')
        if self.control_floor is not None and not 0.0 <= self.control_floor <= 1.0:
            raise ValueError(f'control_floor must lie in [0, 1], got {self.control_floor}')

    @property
    def name(self) -> str:
        return self.kind.value

    @property
    def requires_gittins(self) -> bool:
        return self.kind in (RuleKind.FLGI, RuleKind.CFLGI)

    def floor_for(self, K: int) -> float:
        return 1.0 / (K + 1) if self.control_floor is None else self.control_floor

    def notes(self, K: int) -> str:
        if self.kind == RuleKind.RSIHR and K > 1:
            return 'multi-arm RSIHR uses pi proportional to sqrt(p)'
        return ''


def _argmax_random_ties(values: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    top = values.max(axis=1, keepdims=True)
    ties = values == top
    noise = rng.random(values.shape)
    noise[~ties] = -1.0
    return noise.argmax(axis=1), ties


def cr_probabilities(K: int) -> AllocationProbabilities:
    if K < 1:
        raise ValueError(f'K must be >= 1, got {K}')
    return AllocationProbabilities((1.0 / (K + 1),) * (K + 1))


def ts_probabilities(states: Sequence[ArmState], c: float, M_ts: int,
                     rng: np.random.Generator) -> AllocationProbabilities:
    if c < 0:
        raise ValueError(f'TS tuning parameter c must be >= 0, got {c}')
    if M_ts < 1:
        raise ValueError(f'M_ts must be >= 1, got {M_ts}')
    a = np.array([st.a for st in states])
    b = np.array([st.b for st in states])
    draws = rng.beta(a, b, size=(M_ts, len(states)))
    winners, _ = _argmax_random_ties(draws, rng)
    w = np.bincount(winners, minlength=len(states)) / M_ts
    return AllocationProbabilities.normalized(np.power(w, c))


def rsihr_probabilities(estimates: Sequence[float], counts: Optional[Sequence[int]] = None) -> AllocationProbabilities:
    p = np.asarray(estimates, dtype=float)
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError(f'rate estimates must lie in [0, 1], got {list(p)}')
    n = np.zeros_like(p) if counts is None else np.asarray(counts, dtype=float)
    eps = 1.0 / (2.0 * n + 2.0)
    boundary = (p <= 0.0) | (p >= 1.0)
    if boundary.any():
        debug(f'RSIHR clamps boundary estimates {list(p[boundary])} (n={list(n[boundary])})')
        p = np.where(p <= 0.0, eps, np.where(p >= 1.0, 1.0 - eps, p))
    return AllocationProbabilities.normalized(np.sqrt(p))


def _posterior_counts(states: Sequence[ArmState]) -> Tuple[np.ndarray, np.ndarray]:
    return as_counts([st.a for st in states], [st.b for st in states])


def flgi_probabilities(states: Sequence[ArmState], b: int, table: GittinsTable, M_flgi: int,
                       rng: np.random.Generator) -> AllocationProbabilities:
    if b < 1:
        raise ValueError(f'block size must be >= 1, got {b}')
    if table is None:
        raise GittinsTableError('the FLGI rule needs a Gittins table')
    a0, b0 = _posterior_counts(states)
    reach = int(np.max(a0 + b0)) + b - 1
    if not table.covers(reach):
        raise GittinsTableError(
            f'Gittins table stops at a + b = {table.max_total} but the next block reaches {reach}; '
            f'rebuild it with --max-n {reach - 2} or more')

    arms = len(states)
    alpha = np.tile(a0, (M_flgi, 1))
    beta = np.tile(b0, (M_flgi, 1))
    rows = np.arange(M_flgi)
    expected = np.zeros(arms)
    for step in range(b):
        nu = table.indices(alpha, beta)
        choice, ties = _argmax_random_ties(nu, rng)
        # credit each tied arm its share, then follow one of them
        expected += (ties / ties.sum(axis=1, keepdims=True)).sum(axis=0)
        if step == b - 1:
            break
        pa = alpha[rows, choice]
        success = rng.random(M_flgi) < pa / (pa + beta[rows, choice])
        alpha[rows, choice] += success
        beta[rows, choice] += ~success
    return AllocationProbabilities.normalized(expected / (M_flgi * b))


def apply_control_floor(probabilities: AllocationProbabilities, floor: float) -> AllocationProbabilities:
    pi = probabilities.as_array()
    if pi[0] >= floor:
        return probabilities
    experimental = pi[1:]
    scaled = experimental * (1.0 - floor) / experimental.sum()
    return AllocationProbabilities((floor, *scaled))


def cflgi_probabilities(states: Sequence[ArmState], b: int, table: GittinsTable, M_flgi: int, floor: float,
                        rng: np.random.Generator) -> AllocationProbabilities:
    if not 0.0 <= floor <= 1.0:
        raise ValueError(f'control floor must lie in [0, 1], got {floor}')
    return apply_control_floor(flgi_probabilities(states, b, table, M_flgi, rng), floor)


def rate_estimates(states: Sequence[ArmState]) -> Tuple[np.ndarray, np.ndarray]:
    # MLE where the arm has data, prior mean otherwise
    n = np.array([st.n for st in states])
    mle = np.array([st.s / st.n if st.n else st.posterior_mean for st in states])
    return mle, n


def block_probabilities(rule: AllocationRuleSpec, states: Sequence[ArmState], j: int, b: int, T: int,
                        rng: np.random.Generator, table: Optional[GittinsTable] = None) -> AllocationProbabilities:
    K = len(states) - 1
    if j == 1 or rule.kind == RuleKind.CR:
        return cr_probabilities(K)
    if rule.kind == RuleKind.TS:
        return ts_probabilities(states, (j - 1) * b / (2.0 * T), rule.m_ts, rng)
    if rule.kind == RuleKind.RSIHR:
        estimates, n = rate_estimates(states)
        return rsihr_probabilities(estimates, n)
    if rule.kind == RuleKind.FLGI:
        return flgi_probabilities(states, b, table, rule.m_flgi, rng)
    if rule.kind == RuleKind.CFLGI:
        return cflgi_probabilities(states, b, table, rule.m_flgi, rule.floor_for(K), rng)
    raise ValueError(f'Unknown allocation rule: {rule.kind}')


def draw_assignments(probabilities: AllocationProbabilities, b: int, rng: np.random.Generator) -> np.ndarray:
    # independent draws per patient, not an exact split of the block
    return rng.choice(len(probabilities), size=b, p=probabilities.as_array())
