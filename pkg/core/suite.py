"""
Study suites: YAML configuration, job orchestration and CSV output.

A suite file declares outcome-model scenarios and the studies to run on them:

    seed: 20231
    output: results/flgi_trend.csv
    gittins_table: tables/gi-0.99.txt
    scenarios:
      - {id: D0, beta0: -0.8473, D: 0.0, beta_arm: [0, 0], J: 5, b: 20}
    studies:
      - {rule: FLGI, scenarios: [D0], analysis: randomization, m: 500, nr: 5000}
"""
import os
import time
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import pandas as pd
from ruamel.yaml import YAML
from ruamel.yaml.error import MarkedYAMLError, YAMLError

import core.config
from core.allocation import AllocationRuleSpec, RuleKind
from core.engine import (OperatingCharacteristics, PatientBenefit, StudyEventHandler, SuiteDecoratedEventHandler,
                         TrialConfig, calibrate_cutoff, compare_to_cr, run_glm_study, run_randomization_study,
                         run_study)
from core.gittins import GittinsTable
from core.glm import DesignSpec
from core.hypothesis import TestKind, TestSpec
from core.model import (OutcomeModel, build_scenario_i, build_scenario_ii, linear_schedule, piecewise_schedule,
                        solve_trend_coefficient, stage_rates)
from core.randomization import Alternative
from core.utils import ConfigurationError, RarException, console, debug, derive_seed

SUITE_KEYS = {'seed', 'output', 'glm_output', 'threads', 'gittins_table', 'defaults', 'scenarios', 'studies'}
SCENARIO_KEYS = {'id', 'beta0', 'beta_t', 'D', 'beta_z', 'beta_arm', 'q_schedule', 'J', 'b', 'K', 'z_observed'}
STUDY_KEYS = {'rule', 'scenarios', 'test', 'alpha', 'calibrate', 'analysis', 'nr', 'm', 'm_ts', 'm_flgi',
              'control_floor', 'alternative', 'firth', 'design', 'compare_to_cr'}
DESIGN_KEYS = {'time', 'z'}
ANALYSES = ('standard', 'randomization', 'glm')

RESULT_COLUMNS = ['rule', 'K', 'T', 'b', 'J', 'scenario', 'test', 'alpha_or_power', 'alpha_or_power_se',
                  'p_star', 'p_star_se', 'ens', 'ens_se', 'delta_ens', 'delta_ens_se', 'p_star_sd',
                  'wrong_direction', 'standard_alpha_or_power', 'threshold', 'notes', 'runtime_s', 'seed']
GLM_COLUMNS = ['rule', 'scenario', 'penalized', 'term', 'truth', 'mean_estimate', 'mse', 'rejection_rate',
               'finite_fits', 'separation_rate', 'finite_rate', 'converged_rate', 'nr', 'runtime_s', 'seed']
SCHEDULE_COLUMNS = ['scenario', 'arm', 'stage', 'q', 'rate']

# salt separating calibration replicates from the study replicates of the same suite seed
CALIBRATION_SALT = 7
# CR references draw from their own streams; compare_to_cr treats the two ENS estimates as independent
CR_REFERENCE_SALT = 11


@dataclass(frozen=True)
class ScenarioSpec:
    id: str
    model: OutcomeModel

    def null_model(self) -> OutcomeModel:
        return replace(self.model, beta_arm=(0.0,) * self.model.arms)


@dataclass(frozen=True)
class StudyJob:
    scenario: ScenarioSpec
    rule: AllocationRuleSpec
    test: TestSpec
    analysis: str = 'standard'
    nr: int = core.config.DEFAULT_NR
    m: int = core.config.DEFAULT_M_RANDOMIZATION
    # True to calibrate on the scenario's null model, a number for a fixed threshold
    calibrate: Any = False
    alternative: Alternative = Alternative.TWO_SIDED
    firth: bool = True
    design: DesignSpec = field(default_factory=DesignSpec)
    compare_to_cr: bool = False

    @property
    def name(self) -> str:
        return f'{self.rule.name}/{self.scenario.id}/{self.analysis}'

    @property
    def test_label(self) -> str:
        if self.analysis == 'randomization':
            return 'randomization'
        return self.test.kind.value + ('-calibrated' if self.calibrate is not False else '')


@dataclass(frozen=True)
class StudySuite:
    scenarios: Tuple[ScenarioSpec, ...]
    jobs: Tuple[StudyJob, ...]
    output: str = 'results.csv'
    glm_output: Optional[str] = None
    seed: int = 0
    threads: Optional[int] = None
    gittins_table: Optional[str] = None

    @property
    def requires_gittins(self) -> bool:
        return any(job.rule.requires_gittins for job in self.jobs)

    @property
    def max_trial_size(self) -> int:
        return max((job.scenario.model.T for job in self.jobs), default=0)


def _line(node, key=None) -> Optional[int]:
    try:
        if key is not None:
            return node.lc.key(key)[0] + 1
        return node.lc.line + 1
    except (AttributeError, KeyError, TypeError):
        return None


def _check_keys(node, allowed, where: str):
    if not isinstance(node, dict):
        raise ConfigurationError(f'{where} must be a mapping', _line(node))
    unknown = [k for k in node if k not in allowed]
    if unknown:
        raise ConfigurationError(f'unknown key "{unknown[0]}" in {where} (allowed: {", ".join(sorted(allowed))})',
                                 _line(node, unknown[0]))


def _get(node, key, kind, where: str, default=None, required: bool = False):
    if key not in node:
        if required:
            raise ConfigurationError(f'{where} lacks the required key "{key}"', _line(node))
        return default
    value = node[key]
    line = _line(node, key)
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f'"{key}" in {where} must be true or false, got {value!r}', line)
        return value
    if kind in (int, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or (kind is int and value != int(value)):
            raise ConfigurationError(f'"{key}" in {where} must be {"an integer" if kind is int else "a number"}, '
                                     f'got {value!r}', line)
        return kind(value)
    if not isinstance(value, kind):
        raise ConfigurationError(f'"{key}" in {where} has the wrong type: {value!r}', line)
    return value


def _positive(value: int, key: str, where: str, node):
    if value is not None and value < 1:
        raise ConfigurationError(f'"{key}" in {where} must be >= 1, got {value}', _line(node, key))
    return value


def _parse_schedule(node, J: int, where: str) -> Tuple[float, ...]:
    value = node.get('q_schedule', 0.0)
    line = _line(node, 'q_schedule')
    if isinstance(value, bool):
        raise ConfigurationError(f'q_schedule in {where} must be a number, a list or a mapping', line)
    if isinstance(value, (int, float)):
        return (float(value),) * J
    if isinstance(value, list):
        if not all(isinstance(q, (int, float)) and not isinstance(q, bool) for q in value):
            raise ConfigurationError(f'q_schedule in {where} must hold numbers only', line)
        return tuple(float(q) for q in value)
    if isinstance(value, dict) and len(value) == 1:
        (shape, params), = value.items()
        if shape == 'linear':
            _check_keys(params, {'start', 'step'}, f'the linear q_schedule of {where}')
            return linear_schedule(_get(params, 'start', float, where, required=True),
                                   _get(params, 'step', float, where, required=True), J)
        if shape == 'piecewise':
            _check_keys(params, {'start', 'step', 'restart', 'switch'}, f'the piecewise q_schedule of {where}')
            return piecewise_schedule(_get(params, 'start', float, where, required=True),
                                      _get(params, 'step', float, where, required=True),
                                      _get(params, 'restart', float, where, required=True), J,
                                      switch=_get(params, 'switch', int, where, default=6))
    raise ConfigurationError(f'q_schedule in {where} must be a number, a list, {{linear: ...}} or '
                             f'{{piecewise: ...}}', line)


def parse_scenario(node) -> ScenarioSpec:
    _check_keys(node, SCENARIO_KEYS, 'a scenario')
    scenario_id = str(_get(node, 'id', object, 'a scenario', required=True))
    where = f'scenario "{scenario_id}"'
    J = _positive(_get(node, 'J', int, where, required=True), 'J', where, node)
    b = _positive(_get(node, 'b', int, where, required=True), 'b', where, node)
    beta0 = _get(node, 'beta0', float, where, required=True)
    beta_z = _get(node, 'beta_z', float, where, default=0.0)
    z_observed = _get(node, 'z_observed', bool, where, default=False)
    beta_arm = _get(node, 'beta_arm', list, where, required=True)
    if not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in beta_arm):
        raise ConfigurationError(f'beta_arm in {where} must hold numbers only', _line(node, 'beta_arm'))
    K = _positive(_get(node, 'K', int, where, default=len(beta_arm) - 1), 'K', where, node)
    if 'D' in node and 'beta_t' in node:
        raise ConfigurationError(f'{where} sets both D and beta_t; give one of them', _line(node, 'D'))
    schedule = _parse_schedule(node, J, where)

    try:
        if 'D' in node:
            D = _get(node, 'D', float, where)
            if beta_z == 0.0 and len(set(schedule)) == 1 and len(schedule) == J:
                model = build_scenario_i(D, beta0, beta_arm, J, b, K, q=schedule[0])
            else:
                beta_t = 0.0 if D == 0 else solve_trend_coefficient(D, beta0, J)
                if len(schedule) != J:
                    raise ValueError(f'q_schedule has {len(schedule)} entries but J={J}')
                if len(beta_arm) != K + 1:
                    raise ValueError(f'beta_arm must have K+1={K + 1} entries, got {len(beta_arm)}')
                model = OutcomeModel(beta0=beta0, beta_t=beta_t, beta_z=beta_z, beta_arm=tuple(beta_arm),
                                     q_schedule=schedule, b=b, z_observed=z_observed, D=D)
            console.print(f'Scenario {scenario_id}: D={D} gives beta_t={model.beta_t:.4f}')
        else:
            model = build_scenario_ii(schedule, beta_z, beta0, beta_arm, J, b, K, z_observed=z_observed)
            beta_t = _get(node, 'beta_t', float, where, default=0.0)
            if beta_t:
                model = replace(model, beta_t=beta_t)
    except ValueError as e:
        raise ConfigurationError(f'{where}: {e}', _line(node))
    if z_observed != model.z_observed:
        model = replace(model, z_observed=z_observed)
    debug(f'{where}: {model}')
    return ScenarioSpec(id=scenario_id, model=model)


def _parse_design(node, where: str) -> DesignSpec:
    if 'design' not in node:
        return DesignSpec()
    design = node['design']
    _check_keys(design, DESIGN_KEYS, f'the design of {where}')
    return DesignSpec(time=_get(design, 'time', bool, where, default=True),
                      z=_get(design, 'z', bool, where, default=False))


def parse_study(node, defaults, scenarios: Dict[str, ScenarioSpec]) -> List[StudyJob]:
    _check_keys(node, STUDY_KEYS, 'a study')
    merged = dict(defaults)
    merged.update(node)
    # line numbers come from the study itself when it sets the key
    source = node
    where = f'study "{merged.get("rule", "?")}"'

    rule_name = _get(merged, 'rule', str, where, required=True)
    if rule_name not in RuleKind.__members__:
        raise ConfigurationError(f'unknown rule "{rule_name}" (choose from {", ".join(RuleKind.__members__)})',
                                 _line(source, 'rule'))
    analysis = _get(merged, 'analysis', str, where, default='standard')
    if analysis not in ANALYSES:
        raise ConfigurationError(f'unknown analysis "{analysis}" (choose from {", ".join(ANALYSES)})',
                                 _line(source, 'analysis'))
    test_name = _get(merged, 'test', str, where, default='z')
    alternative = _get(merged, 'alternative', str, where, default='two-sided')
    calibrate = merged.get('calibrate', False)
    if not isinstance(calibrate, (bool, int, float)):
        raise ConfigurationError(f'"calibrate" in {where} must be true, false or a threshold',
                                 _line(source, 'calibrate'))
    if not isinstance(calibrate, bool):
        calibrate = float(calibrate)

    try:
        rule = AllocationRuleSpec(RuleKind[rule_name],
                                  m_ts=_get(merged, 'm_ts', int, where, default=core.config.DEFAULT_M_TS),
                                  m_flgi=_get(merged, 'm_flgi', int, where, default=core.config.DEFAULT_M_FLGI),
                                  control_floor=_get(merged, 'control_floor', float, where))
        test = TestSpec(kind=TestKind(test_name), alpha=_get(merged, 'alpha', float, where,
                                                             default=core.config.DEFAULT_ALPHA))
        alternative = Alternative(alternative)
    except ValueError as e:
        raise ConfigurationError(f'{where}: {e}', _line(source))

    nr = _positive(_get(merged, 'nr', int, where, default=core.config.DEFAULT_NR), 'nr', where, source)
    m = _positive(_get(merged, 'm', int, where, default=core.config.DEFAULT_M_RANDOMIZATION), 'm', where, source)
    ids = merged.get('scenarios', list(scenarios))
    if not isinstance(ids, list):
        raise ConfigurationError(f'"scenarios" in {where} must be a list of scenario ids', _line(source, 'scenarios'))

    jobs = []
    for scenario_id in ids:
        if str(scenario_id) not in scenarios:
            raise ConfigurationError(f'{where} refers to the unknown scenario "{scenario_id}"',
                                     _line(source, 'scenarios'))
        jobs.append(StudyJob(scenario=scenarios[str(scenario_id)], rule=rule, test=test, analysis=analysis,
                             nr=nr, m=m, calibrate=calibrate, alternative=alternative,
                             firth=_get(merged, 'firth', bool, where, default=True),
                             design=_parse_design(merged, where),
                             compare_to_cr=_get(merged, 'compare_to_cr', bool, where, default=False)))
    return jobs


def load_config(path: str):
    yaml = YAML(typ='rt')
    try:
        with open(path, 'r') as f:
            return yaml.load(f)
    except FileNotFoundError:
        raise ConfigurationError(f"configuration file '{path}' not found")
    except MarkedYAMLError as e:
        line = e.problem_mark.line + 1 if e.problem_mark is not None else None
        raise ConfigurationError(f'invalid YAML: {e.problem}', line)
    except YAMLError as e:
        raise ConfigurationError(f'invalid YAML: {e}')


def parse_config(path: str) -> StudySuite:
    root = load_config(path)
    if root is None:
        raise ConfigurationError(f"configuration file '{path}' is empty")
    _check_keys(root, SUITE_KEYS, 'the suite')

    scenario_nodes = _get(root, 'scenarios', list, 'the suite', required=True)
    scenarios: Dict[str, ScenarioSpec] = {}
    for node in scenario_nodes:
        scenario = parse_scenario(node)
        if scenario.id in scenarios:
            raise ConfigurationError(f'duplicate scenario id "{scenario.id}"', _line(node, 'id'))
        scenarios[scenario.id] = scenario

    defaults = root.get('defaults') or {}
    _check_keys(defaults, STUDY_KEYS, 'defaults')
    jobs = []
    for node in _get(root, 'studies', list, 'the suite', required=True):
        jobs += parse_study(node, defaults, scenarios)
    if not jobs:
        raise ConfigurationError('the suite declares no studies', _line(root, 'studies'))

    threads = _get(root, 'threads', int, 'the suite')
    return StudySuite(scenarios=tuple(scenarios.values()), jobs=tuple(jobs),
                      output=str(_get(root, 'output', str, 'the suite', default='results.csv')),
                      glm_output=_get(root, 'glm_output', str, 'the suite'),
                      seed=_get(root, 'seed', int, 'the suite', default=0),
                      threads=threads,
                      gittins_table=_get(root, 'gittins_table', str, 'the suite'))


def append_rows(path: str, rows: List[Dict], columns: List[str]):
    """Append rows under a fixed header, writing the header only for a new file."""
    frame = pd.DataFrame(rows, columns=columns)
    exists = os.path.exists(path) and os.path.getsize(path) > 0
    if exists:
        header = pd.read_csv(path, nrows=0).columns.tolist()
        if header != columns:
            raise RarException(f"'{path}' has a different header; write to a new file")
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    frame.to_csv(path, mode='a' if exists else 'w', header=not exists, index=False)


def result_row(job: StudyJob, study: OperatingCharacteristics, benefit: Optional[PatientBenefit]) -> Dict:
    return {
        'rule': study.rule,
        'K': study.K,
        'T': study.T,
        'b': study.b,
        'J': study.J,
        'scenario': job.scenario.id,
        'test': job.test_label,
        'alpha_or_power': study.rejection_rate,
        'alpha_or_power_se': study.rejection_se,
        'p_star': study.p_star,
        'p_star_se': study.p_star_se,
        'ens': study.ens,
        'ens_se': study.ens_se,
        'delta_ens': benefit.delta_ens if benefit else None,
        'delta_ens_se': benefit.se if benefit else None,
        'p_star_sd': study.p_star_sd,
        'wrong_direction': study.wrong_direction,
        'standard_alpha_or_power': study.standard_rejection_rate,
        'threshold': study.threshold,
        'notes': study.notes,
        'runtime_s': round(study.runtime_s, 3),
        'seed': study.seed,
    }


def stage_rate_frame(scenarios: Tuple[ScenarioSpec, ...]) -> pd.DataFrame:
    rows = []
    for scenario in scenarios:
        m = scenario.model
        for k in range(m.arms):
            for j, rate in enumerate(stage_rates(m, k), start=1):
                rows.append({'scenario': scenario.id, 'arm': k, 'stage': j, 'q': m.q_schedule[j - 1], 'rate': rate})
    return pd.DataFrame(rows, columns=SCHEDULE_COLUMNS)


class SuiteRunner(object):
    def __init__(self, suite: StudySuite, table: Optional[GittinsTable] = None, threads: int = 1,
                 event_handler: Optional[StudyEventHandler] = None):
        self.suite = suite
        self.table = table
        self.threads = threads
        self.event_handler = event_handler
        self._cr_studies: Dict[Tuple, OperatingCharacteristics] = {}

    def _threshold(self, job: StudyJob) -> Optional[float]:
        if job.calibrate is False:
            return None
        if job.calibrate is not True:
            return float(job.calibrate)
        threshold = calibrate_cutoff(job.rule, job.scenario.null_model(), job.nr, alpha_target=job.test.alpha,
                                     test=job.test.kind, seed=derive_seed(self.suite.seed, CALIBRATION_SALT),
                                     threads=self.threads, table=self.table, event_handler=self.event_handler)
        console.print(f'{job.name}: calibrated threshold {threshold:.6g}')
        return threshold

    def _cr_reference(self, job: StudyJob) -> OperatingCharacteristics:
        key = (job.scenario.id, job.nr, job.test)
        if key not in self._cr_studies:
            cfg = TrialConfig(model=job.scenario.model, rule=AllocationRuleSpec(RuleKind.CR), test=job.test,
                              seed=derive_seed(self.suite.seed, CR_REFERENCE_SALT))
            self._cr_studies[key] = run_study(cfg, job.nr, self.threads, event_handler=self.event_handler)
        return self._cr_studies[key]

    def run_job(self, job: StudyJob) -> Tuple[List[Dict], List[Dict]]:
        test = replace(job.test, threshold=self._threshold(job))
        cfg = TrialConfig(model=job.scenario.model, rule=job.rule, test=test, seed=self.suite.seed)

        if job.analysis == 'glm':
            summary = run_glm_study(cfg, job.nr, design=job.design, firth=job.firth, threads=self.threads,
                                    table=self.table, event_handler=self.event_handler)
            rows = []
            for term in summary.terms.to_dict('records'):
                rows.append({'rule': summary.rule, 'scenario': job.scenario.id, 'penalized': summary.penalized,
                             **term, 'separation_rate': summary.separation_rate,
                             'finite_rate': summary.finite_rate, 'converged_rate': summary.converged_rate,
                             'nr': summary.nr, 'runtime_s': round(summary.runtime_s, 3), 'seed': summary.seed})
            return [], rows

        if job.analysis == 'randomization':
            study = run_randomization_study(cfg, job.nr, job.m, job.alternative, self.threads, self.table,
                                            self.event_handler)
        else:
            study = run_study(cfg, job.nr, self.threads, self.table, self.event_handler)
        benefit = compare_to_cr(study, self._cr_reference(job)) if job.compare_to_cr else None
        return [result_row(job, study, benefit)], []

    def run(self) -> Tuple[pd.DataFrame, pd.DataFrame]:
        results, fits = [], []
        for job in self.suite.jobs:
            if isinstance(self.event_handler, SuiteDecoratedEventHandler):
                self.event_handler.start_job(job.name)
            started = time.perf_counter()
            rows, glm_rows = self.run_job(job)
            debug(f'{job.name} finished in {time.perf_counter() - started:.1f}s')
            results += rows
            fits += glm_rows
        return pd.DataFrame(results, columns=RESULT_COLUMNS), pd.DataFrame(fits, columns=GLM_COLUMNS)
