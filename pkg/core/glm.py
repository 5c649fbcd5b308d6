"""
Logistic regression of trial outcomes on stage, covariate and arm indicators.

Two fitters share one Newton-Raphson loop: plain maximum likelihood and Firth's
penalized likelihood (log-likelihood + 0.5 * log det of the Fisher
information), the latter staying finite under complete or quasi-complete
separation. Inference is Wald-based in both cases.
"""
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.linalg import qr
from scipy.special import expit, log_expit
from scipy.stats import norm

import core.config
from core.model import PatientRecord

RECORD_COLUMNS = ['stage', 'z', 'arm', 'outcome']

Records = Union[pd.DataFrame, Sequence[PatientRecord]]


@dataclass(frozen=True)
class DesignSpec:
    intercept: bool = True
    time: bool = True
    z: bool = False
    arms: bool = True
    # number of experimental arms; inferred from the records when None
    K: Optional[int] = None

    def __post_init__(self):
        if not self.intercept:
            raise ValueError('the design must include an intercept')

    def names(self, K: int) -> List[str]:
        names = ['intercept']
        if self.time:
            names.append('time')
        if self.z:
            names.append('z')
        if self.arms:
            names += [f'arm{k}' for k in range(1, K + 1)]
        return names


@dataclass(frozen=True, eq=False)
class GlmFit:
    names: Tuple[str, ...]
    coefficients: np.ndarray
    standard_errors: np.ndarray
    p_values: np.ndarray
    converged: bool
    separation_detected: bool
    penalized: bool
    n_iter: int
    loglik: float

    def index(self, name: str) -> int:
        return self.names.index(name)

    def coefficient(self, name: str) -> float:
        return float(self.coefficients[self.index(name)])

    def p_value(self, name: str) -> float:
        return float(self.p_values[self.index(name)])

    @property
    def finite(self) -> bool:
        active = ~np.isnan(self.coefficients)
        return bool(np.all(np.isfinite(self.coefficients[active])))

    def as_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'term': list(self.names),
            'estimate': self.coefficients,
            'std_error': self.standard_errors,
            'p_value': self.p_values,
            'converged': self.converged,
            'separation': self.separation_detected,
            'penalized': self.penalized,
        })


def as_frame(records: Records) -> pd.DataFrame:
    if isinstance(records, pd.DataFrame):
        frame = records
    else:
        frame = pd.DataFrame([asdict(r) for r in records], columns=RECORD_COLUMNS)
    missing = [c for c in RECORD_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f'patient records lack columns {missing}')
    if len(frame) < 1:
        raise ValueError('at least one patient record is required')
    return frame


def design_matrix(records: Records, spec: DesignSpec) -> Tuple[np.ndarray, np.ndarray, List[str]]:
    frame = as_frame(records)
    arm = frame['arm'].to_numpy(dtype=int)
    K = spec.K if spec.K is not None else max(1, int(arm.max()))
    columns = [np.ones(len(frame))]
    if spec.time:
        columns.append(frame['stage'].to_numpy(dtype=float) - 1.0)
    if spec.z:
        columns.append(frame['z'].to_numpy(dtype=float))
    if spec.arms:
        columns += [(arm == k).astype(float) for k in range(1, K + 1)]
    return np.column_stack(columns), frame['outcome'].to_numpy(dtype=float), spec.names(K)


def _hat_diagonal(X: np.ndarray, w: np.ndarray) -> np.ndarray:
    q, _ = qr(X * np.sqrt(w)[:, np.newaxis], mode='economic')
    return np.einsum('ij,ij->i', q, q)


def _information(X: np.ndarray, w: np.ndarray) -> np.ndarray:
    return X.T @ (X * w[:, np.newaxis])


def _loglik(X: np.ndarray, y: np.ndarray, beta: np.ndarray, firth: bool) -> float:
    eta = X @ beta
    ll = float(np.sum(y * log_expit(eta) + (1 - y) * log_expit(-eta)))
    if firth:
        pi = expit(eta)
        sign, logdet = np.linalg.slogdet(_information(X, pi * (1 - pi)))
        if sign <= 0:
            return -np.inf
        ll += 0.5 * logdet
    return ll


def _score(X: np.ndarray, y: np.ndarray, beta: np.ndarray, firth: bool) -> Tuple[np.ndarray, np.ndarray]:
    pi = expit(X @ beta)
    w = pi * (1 - pi)
    residual = y - pi
    if firth:
        residual = residual + _hat_diagonal(X, w) * (0.5 - pi)
    return X.T @ residual, _information(X, w)


def _newton_raphson(X: np.ndarray, y: np.ndarray, firth: bool, max_iter: int, gtol: float = 1e-8,
                    max_stepsize: float = 5.0, max_halfstep: int = 25) -> Tuple[np.ndarray, bool, int]:
    beta = np.zeros(X.shape[1])
    for iteration in range(max_iter):
        score, info = _score(X, y, beta, firth)
        if np.max(np.abs(score)) < gtol:
            return beta, True, iteration
        step = np.linalg.lstsq(info, score, rcond=None)[0]
        largest = np.max(np.abs(step)) / max_stepsize
        if largest > 1:
            step = step / largest
        current = _loglik(X, y, beta, firth)
        candidate = beta + step
        halvings = 0
        while _loglik(X, y, candidate, firth) < current and halvings < max_halfstep:
            step = step * 0.5
            candidate = beta + step
            halvings += 1
        beta = candidate
    score, _ = _score(X, y, beta, firth)
    return beta, bool(np.max(np.abs(score)) < gtol), max_iter


def _diverging(X: np.ndarray, y: np.ndarray, beta: np.ndarray) -> bool:
    # a finite optimum has a vanishing score and Newton step; along a separating direction the step stays O(1)
    score, info = _score(X, y, beta, False)
    pi = expit(X @ beta)
    if np.any(pi * (1 - pi) < core.config.SEPARATION_BOUNDARY):
        return True
    step = np.linalg.lstsq(info, score, rcond=None)[0]
    return bool(np.linalg.norm(score) > core.config.SEPARATION_GTOL or
                np.linalg.norm(step) > core.config.SEPARATION_STEP)


def perfect_prediction_scan(records: Records) -> bool:
    """True when some arm that received patients saw only successes or only failures."""
    frame = as_frame(records)
    for _, outcomes in frame.groupby('arm')['outcome']:
        if len(outcomes) and outcomes.nunique() == 1:
            return True
    return False


def fit_logistic(records: Records, spec: DesignSpec, firth: bool, max_iter: Optional[int] = None) -> GlmFit:
    X, y, names = design_matrix(records, spec)
    # arms without patients carry no information; their terms are reported as NaN
    active = np.any(X != 0, axis=0)
    Xa = X[:, active]
    if max_iter is None:
        max_iter = 100 if firth else core.config.SEPARATION_MAX_ITER
    beta, converged, n_iter = _newton_raphson(Xa, y, firth, max_iter)

    separated = False
    if not firth:
        scan = spec.arms and perfect_prediction_scan(records)
        large = np.linalg.norm(beta) > core.config.SEPARATION_NORM
        separated = bool(scan or (large and _diverging(Xa, y, beta)))
        converged = converged and not separated

    pi = expit(Xa @ beta)
    covariance = np.linalg.pinv(_information(Xa, pi * (1 - pi)))
    se = np.sqrt(np.clip(np.diag(covariance), 0.0, None))
    with np.errstate(divide='ignore', invalid='ignore'):
        p = np.where(se > 0, 2 * norm.sf(np.abs(beta / se)), np.nan)

    coefficients = np.full(X.shape[1], np.nan)
    standard_errors = np.full(X.shape[1], np.nan)
    p_values = np.full(X.shape[1], np.nan)
    coefficients[active], standard_errors[active], p_values[active] = beta, se, p
    return GlmFit(names=tuple(names), coefficients=coefficients, standard_errors=standard_errors,
                  p_values=p_values, converged=converged, separation_detected=separated, penalized=firth,
                  n_iter=n_iter, loglik=_loglik(Xa, y, beta, firth))


def fit_logistic_mle(records: Records, spec: DesignSpec) -> GlmFit:
    return fit_logistic(records, spec, firth=False)


def fit_logistic_firth(records: Records, spec: DesignSpec) -> GlmFit:
    return fit_logistic(records, spec, firth=True)


def detect_separation(records: Records, spec: DesignSpec) -> bool:
    return fit_logistic_mle(records, spec).separation_detected
