"""
Trial runner and Monte Carlo studies.

A trial is filled block by block: the allocation probabilities of block j are
computed from the outcomes of blocks 1..j-1 only, patients are assigned by
independent draws from that vector, and their covariates and outcomes come from
the outcome model. Studies repeat trials over independent replicate streams and
summarize the operating characteristics.
"""
import math
import time
from abc import ABCMeta, abstractmethod
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit

import core.config
from core.allocation import AllocationRuleSpec, ArmState, block_probabilities, draw_assignments
from core.gittins import GittinsTable
from core.glm import DesignSpec, fit_logistic
from core.hypothesis import TestKind, TestSpec, compare_to_control
from core.model import OutcomeModel, best_arm
from core.randomization import Alternative, randomization_test
from core.records import TrialResult
from core.utils import (GittinsTableError, ModelMismatchError, RarException, console, debug, ordered_map,
                        replicate_rng, warn)

TRIAL_STREAM = 0
RESAMPLE_STREAM = 1


class StudyEventHandler(metaclass=ABCMeta):
    """Receives the lifecycle of every Monte Carlo study: start, replicate progress, end and failure."""

    @abstractmethod
    def handle_study_start(self, label: str, total: int):
        raise NotImplementedError

    @abstractmethod
    def handle_study_progress(self, label: str, done: int, total: int):
        raise NotImplementedError

    @abstractmethod
    def handle_study_end(self, label: str, runtime_s: float):
        raise NotImplementedError

    @abstractmethod
    def handle_study_error(self, label: str, error):
        raise NotImplementedError


class DefaultEventHandler(StudyEventHandler):
    def __init__(self, unit: str = 'replicates'):
        self.unit = unit

    def handle_study_start(self, label: str, total: int):
        console.rule(f'{label} - {total} {self.unit}')

    def handle_study_progress(self, label: str, done: int, total: int):
        console.print(f'[dim]{label}: {done}/{total} {self.unit} ({100 * done // total}%)[/dim]')

    def handle_study_end(self, label: str, runtime_s: float):
        console.rule(f'{label} - completed in {runtime_s:.1f}s')

    def handle_study_error(self, label: str, error):
        console.rule(f'{label} - {error}', style='bold red')


class SuiteDecoratedEventHandler(StudyEventHandler):

    def __init__(self, handler: StudyEventHandler, jobs: List[str]):
        self.handler = handler
        self.jobs = jobs
        self.current_job: Optional[str] = None

    def start_job(self, job: str):
        self.current_job = job

    def _decorate(self, label: str) -> str:
        if self.current_job in self.jobs:
            current = 1 + self.jobs.index(self.current_job)
            return f'[{current}/{len(self.jobs)}] {self.current_job}: {label}'
        return label

    def handle_study_start(self, label: str, total: int):
        self.handler.handle_study_start(self._decorate(label), total)

    def handle_study_progress(self, label: str, done: int, total: int):
        self.handler.handle_study_progress(self._decorate(label), done, total)

    def handle_study_end(self, label: str, runtime_s: float):
        self.handler.handle_study_end(self._decorate(label), runtime_s)

    def handle_study_error(self, label: str, error):
        self.handler.handle_study_error(self._decorate(label), error)


@dataclass(frozen=True)
class TrialConfig:
    model: OutcomeModel
    rule: AllocationRuleSpec
    test: TestSpec = field(default_factory=TestSpec)
    seed: int = 0

    @property
    def T(self) -> int:
        return self.model.T

    @property
    def K(self) -> int:
        return self.model.K


@dataclass(frozen=True)
class OperatingCharacteristics:
    rule: str
    model: OutcomeModel
    nr: int
    seed: int
    # alpha under the global null, power for the best arm otherwise
    rejection_rate: float
    rejection_se: float
    arm_rejection_rates: Tuple[float, ...]
    p_star: float
    p_star_se: float
    p_star_sd: float
    ens: float
    ens_se: float
    wrong_direction: float
    threshold: float
    runtime_s: float
    # rejection rate of the nominal per-arm tests in a randomization study
    standard_rejection_rate: Optional[float] = None
    notes: str = ''

    @property
    def K(self) -> int:
        return self.model.K

    @property
    def T(self) -> int:
        return self.model.T

    @property
    def b(self) -> int:
        return self.model.b

    @property
    def J(self) -> int:
        return self.model.J


@dataclass(frozen=True)
class PatientBenefit:
    delta_ens: float
    se: float
    # ENS gain over complete randomisation, in percent of the CR value
    percent: float


@dataclass(frozen=True, eq=False)
class GlmStudySummary:
    rule: str
    model: OutcomeModel
    nr: int
    seed: int
    penalized: bool
    # one row per term: truth, mean_estimate, mse, rejection_rate, finite_fits
    terms: pd.DataFrame
    separation_rate: float
    finite_rate: float
    converged_rate: float
    runtime_s: float


def check_table(rule: AllocationRuleSpec, model: OutcomeModel, table: Optional[GittinsTable]):
    if not rule.requires_gittins:
        return
    if table is None:
        raise GittinsTableError(
            f'rule {rule.name} needs a Gittins table; build one with '
            f'`rar-sim gittins-table --max-n {model.T} --out FILE` and pass it with --gittins-table FILE')
    if not table.covers(model.T + 1):
        raise GittinsTableError(
            f'Gittins table (max_n={table.max_n}) is too small for a trial of T={model.T}; '
            f'rebuild it with --max-n {model.T} or more')


def run_trial(cfg: TrialConfig, rng: np.random.Generator, table: Optional[GittinsTable] = None) -> TrialResult:
    m = cfg.model
    check_table(cfg.rule, m, table)
    arms, b = m.arms, m.b
    beta_arm = np.array(m.beta_arm)
    successes = np.zeros(arms, dtype=int)
    totals = np.zeros(arms, dtype=int)
    states = [ArmState() for _ in range(arms)]
    stage, z, arm, outcome, probabilities = [], [], [], [], []

    for j in range(1, m.J + 1):
        pi = block_probabilities(cfg.rule, states, j, b, m.T, rng, table)
        debug(f'block {j}: pi = {np.round(pi.as_array(), 4)}')
        assigned = draw_assignments(pi, b, rng)
        covariate = (rng.random(b) < m.q_schedule[j - 1]).astype(int)
        eta = m.beta0 + m.beta_t * (j - 1) + m.beta_z * covariate + beta_arm[assigned]
        y = (rng.random(b) < expit(eta)).astype(int)

        successes += np.bincount(assigned, weights=y, minlength=arms).astype(int)
        totals += np.bincount(assigned, minlength=arms)
        states = [ArmState(int(s), int(n - s)) for s, n in zip(successes, totals)]
        stage.append(np.full(b, j))
        z.append(covariate)
        arm.append(assigned)
        outcome.append(y)
        probabilities.append(pi.as_array())

    tests = compare_to_control(successes, totals, cfg.test)
    return TrialResult(stage=np.concatenate(stage), z=np.concatenate(z), arm=np.concatenate(arm),
                       outcome=np.concatenate(outcome), probabilities=np.vstack(probabilities), tests=tuple(tests))


# state shared with pool workers, set once per process by _init_worker
_WORKER: Dict = {}


def _init_worker(cfg: TrialConfig, table: Optional[GittinsTable], options: Dict):
    _WORKER.clear()
    _WORKER.update(cfg=cfg, table=table, **options)


def _replicate(index: int) -> Dict:
    cfg: TrialConfig = _WORKER['cfg']
    table = _WORKER['table']
    m = cfg.model
    trial = run_trial(cfg, replicate_rng(cfg.seed, index, TRIAL_STREAM), table)
    best = best_arm(m)
    totals, successes = trial.totals, trial.successes
    arm_rejects = [t.reject for t in trial.tests]
    if m.is_null or best == 0:
        standard = any(arm_rejects)
    else:
        standard = arm_rejects[best - 1]
    others = np.delete(totals, best)
    row = {
        'reject': standard,
        'standard_reject': standard,
        'best_share': totals[best] / m.T,
        'ens': int(successes.sum()),
        'wrong_direction': bool(others.max() > totals[best]),
        'min_p': min(t.p_value for t in trial.tests),
    }
    for k, rejected in enumerate(arm_rejects, start=1):
        row[f'reject_{k}'] = rejected

    if _WORKER.get('mode') == 'randomization':
        result = randomization_test(trial, cfg.rule, _WORKER['M'], replicate_rng(cfg.seed, index, RESAMPLE_STREAM),
                                    table, alpha=cfg.test.alpha, alternative=_WORKER['alternative'])
        row['reject'] = result.reject
        row['randomization_p'] = result.p_value
    return row


def _replicate_fit(index: int) -> Tuple[np.ndarray, bool, bool, bool]:
    cfg: TrialConfig = _WORKER['cfg']
    trial = run_trial(cfg, replicate_rng(cfg.seed, index, TRIAL_STREAM), _WORKER['table'])
    fit = fit_logistic(trial.frame(), _WORKER['design'], firth=_WORKER['firth'])
    return np.vstack([fit.coefficients, fit.p_values]), fit.separation_detected, fit.finite, fit.converged


def _run_replicates(func: Callable, Nr: int, threads: int, initargs: tuple,
                    event_handler: Optional[StudyEventHandler], label: str) -> List:
    if event_handler is None:
        return ordered_map(func, range(Nr), threads=threads, initializer=_init_worker, initargs=initargs)
    event_handler.handle_study_start(label, Nr)
    started = time.perf_counter()
    try:
        results = ordered_map(func, range(Nr), threads=threads, initializer=_init_worker, initargs=initargs,
                              on_progress=lambda done, total: event_handler.handle_study_progress(label, done, total))
    except RarException as e:
        event_handler.handle_study_error(label, e.msg)
        raise
    event_handler.handle_study_end(label, time.perf_counter() - started)
    return results


def _binomial_se(rate: float, nr: int) -> float:
    return math.sqrt(rate * (1.0 - rate) / nr)


def _sample_sd(values: pd.Series) -> float:
    return float(values.std(ddof=1)) if len(values) > 1 else 0.0


def _notes(cfg: TrialConfig) -> str:
    notes = [cfg.rule.notes(cfg.K)]
    if cfg.model.D is not None and cfg.model.D != 0:
        notes.append(f'beta_t={cfg.model.beta_t:.4f} derived from D={cfg.model.D}')
    return '; '.join(n for n in notes if n)


def _collect(cfg: TrialConfig, Nr: int, threads: int, table: Optional[GittinsTable], options: Dict,
             event_handler: Optional[StudyEventHandler], label: str) -> pd.DataFrame:
    if Nr < 1:
        raise ValueError(f'Nr must be >= 1, got {Nr}')
    check_table(cfg.rule, cfg.model, table)
    rows = _run_replicates(_replicate, Nr, threads, (cfg, table, options), event_handler, label)
    return pd.DataFrame(rows)


def _summarize(cfg: TrialConfig, frame: pd.DataFrame, started: float,
               standard_rejection_rate: Optional[float] = None) -> OperatingCharacteristics:
    nr = len(frame)
    rate = float(frame['reject'].mean())
    p_star_sd = _sample_sd(frame['best_share'])
    return OperatingCharacteristics(
        rule=cfg.rule.name,
        model=cfg.model,
        nr=nr,
        seed=cfg.seed,
        rejection_rate=rate,
        rejection_se=_binomial_se(rate, nr),
        arm_rejection_rates=tuple(float(frame[f'reject_{k}'].mean()) for k in range(1, cfg.K + 1)),
        p_star=float(frame['best_share'].mean()),
        p_star_se=p_star_sd / math.sqrt(nr),
        p_star_sd=p_star_sd,
        ens=float(frame['ens'].mean()),
        ens_se=_sample_sd(frame['ens']) / math.sqrt(nr),
        wrong_direction=float('nan') if cfg.model.is_null else float(frame['wrong_direction'].mean()),
        threshold=cfg.test.per_test_level(cfg.K),
        runtime_s=time.perf_counter() - started,
        standard_rejection_rate=standard_rejection_rate,
        notes=_notes(cfg),
    )


def run_study(cfg: TrialConfig, Nr: int = core.config.DEFAULT_NR, threads: int = 1,
              table: Optional[GittinsTable] = None,
              event_handler: Optional[StudyEventHandler] = None) -> OperatingCharacteristics:
    started = time.perf_counter()
    frame = _collect(cfg, Nr, threads, table, {'mode': 'standard'}, event_handler, cfg.rule.name)
    return _summarize(cfg, frame, started)


def run_randomization_study(cfg: TrialConfig, Nr: int = core.config.DEFAULT_NR,
                            M: int = core.config.DEFAULT_M_RANDOMIZATION,
                            alternative: Alternative = Alternative.TWO_SIDED, threads: int = 1,
                            table: Optional[GittinsTable] = None,
                            event_handler: Optional[StudyEventHandler] = None) -> OperatingCharacteristics:
    if M < 1:
        raise ValueError(f'M must be >= 1, got {M}')
    started = time.perf_counter()
    options = {'mode': 'randomization', 'M': M, 'alternative': Alternative(alternative)}
    frame = _collect(cfg, Nr, threads, table, options, event_handler, f'{cfg.rule.name} randomization test')
    study = _summarize(cfg, frame, started, standard_rejection_rate=float(frame['standard_reject'].mean()))
    # the randomization test controls the family-wise level directly
    return replace(study, threshold=cfg.test.alpha)


def compare_to_cr(study: OperatingCharacteristics, cr_study: OperatingCharacteristics) -> PatientBenefit:
    if study.model != cr_study.model:
        raise ModelMismatchError(
            f'cannot compare {study.rule} with {cr_study.rule}: the studies were run under different outcome models')
    if cr_study.rule != 'CR':
        warn(f'reference study uses rule {cr_study.rule}, not CR')
    delta = study.ens - cr_study.ens
    se = math.sqrt(study.ens_se ** 2 + cr_study.ens_se ** 2)
    percent = 100.0 * delta / cr_study.ens if cr_study.ens > 0 else float('nan')
    return PatientBenefit(delta_ens=delta, se=se, percent=percent)


def calibrate_cutoff(rule: AllocationRuleSpec, null_model: OutcomeModel, Nr: int,
                     alpha_target: float = core.config.DEFAULT_ALPHA, test: TestKind = TestKind.Z,
                     seed: int = 0, threads: int = 1, table: Optional[GittinsTable] = None,
                     event_handler: Optional[StudyEventHandler] = None) -> float:
    """
    Empirical alpha_target-quantile of the smallest per-arm p-value under the null.

    Rejecting when the smallest p-value is at or below the returned threshold
    keeps the family-wise type I error near alpha_target for this rule and
    design, so the threshold replaces the Bonferroni level.
    """
    if not null_model.is_null:
        raise ValueError('calibrate_cutoff needs a null model (all arm effects 0)')
    if alpha_target <= 0:
        raise ValueError(f'alpha_target must be > 0, got {alpha_target}')
    if alpha_target >= 1:
        return 1.0
    if Nr * alpha_target < 10:
        warn(f'Nr={Nr} leaves fewer than 10 null replicates below the {alpha_target} quantile; '
             f'the calibrated threshold will be noisy')
    cfg = TrialConfig(model=null_model, rule=rule, test=TestSpec(kind=test, alpha=alpha_target), seed=seed)
    frame = _collect(cfg, Nr, threads, table, {'mode': 'standard'}, event_handler, f'{rule.name} calibration')
    threshold = float(np.quantile(frame['min_p'].to_numpy(), alpha_target, method='inverted_cdf'))
    debug(f'{rule.name}: calibrated threshold {threshold:.6g} from {Nr} null replicates')
    return threshold


def true_coefficients(model: OutcomeModel, names: Tuple[str, ...]) -> np.ndarray:
    truth = {'intercept': model.beta0, 'time': model.beta_t, 'z': model.beta_z}
    truth.update({f'arm{k}': model.beta_arm[k] for k in range(1, model.arms)})
    return np.array([truth[name] for name in names])


def run_glm_study(cfg: TrialConfig, Nr: int = core.config.DEFAULT_NR, design: Optional[DesignSpec] = None,
                  firth: bool = True, threads: int = 1, table: Optional[GittinsTable] = None,
                  event_handler: Optional[StudyEventHandler] = None) -> GlmStudySummary:
    if Nr < 1:
        raise ValueError(f'Nr must be >= 1, got {Nr}')
    check_table(cfg.rule, cfg.model, table)
    design = design or DesignSpec(z=cfg.model.z_observed)
    design = DesignSpec(intercept=True, time=design.time, z=design.z, arms=design.arms, K=cfg.K)
    started = time.perf_counter()
    label = f'{cfg.rule.name} {"Firth" if firth else "MLE"} fits'
    fits = _run_replicates(_replicate_fit, Nr, threads, (cfg, table, {'design': design, 'firth': firth}),
                           event_handler, label)

    names = tuple(design.names(cfg.K))
    estimates = np.array([f[0][0] for f in fits])
    p_values = np.array([f[0][1] for f in fits])
    truth = true_coefficients(cfg.model, names)
    usable = np.isfinite(estimates)
    with np.errstate(invalid='ignore'):
        squared = np.where(usable, (estimates - truth) ** 2, np.nan)
        rejected = np.where(np.isfinite(p_values), p_values < 0.05, np.nan)
    terms = pd.DataFrame({
        'term': names,
        'truth': truth,
        'mean_estimate': np.nanmean(np.where(usable, estimates, np.nan), axis=0),
        'mse': np.nanmean(squared, axis=0),
        'rejection_rate': np.nanmean(rejected, axis=0),
        'finite_fits': usable.sum(axis=0),
    })
    return GlmStudySummary(
        rule=cfg.rule.name,
        model=cfg.model,
        nr=Nr,
        seed=cfg.seed,
        penalized=firth,
        terms=terms,
        separation_rate=float(np.mean([f[1] for f in fits])),
        finite_rate=float(np.mean([f[2] for f in fits])),
        converged_rate=float(np.mean([f[3] for f in fits])),
        runtime_s=time.perf_counter() - started,
    )
