import pandas as pd
import pytest

from core.allocation import RuleKind
from core.engine import DefaultEventHandler, SuiteDecoratedEventHandler
from core.randomization import Alternative
from core.suite import (RESULT_COLUMNS, SuiteRunner, append_rows, parse_config, stage_rate_frame)
from core.utils import ConfigurationError, RarException

MINIMAL = '''\
seed: 11
output: out.csv
scenarios:
  - id: flat
    beta0: -0.8473
    beta_arm: [0, 0]
    J: 2
    b: 5
studies:
  - rule: CR
    nr: 10
'''

FLGI_TREND = '''\
seed: 2023
output: results/flgi_trend.csv
gittins_table: gi.txt
defaults:
  analysis: randomization
  m: 500
  nr: 5000
scenarios:
  - {id: D0, beta0: -0.8473, D: 0.0, beta_arm: [0, 0], J: 5, b: 20}
  - {id: D08, beta0: -0.8473, D: 0.08, beta_arm: [0, 0], J: 5, b: 20}
  - {id: D16, beta0: -0.8473, D: 0.16, beta_arm: [0, 0], J: 5, b: 20}
  - {id: D24, beta0: -0.8473, D: 0.24, beta_arm: [0, 0], J: 5, b: 20}
studies:
  - rule: FLGI
    scenarios: [D0, D08, D16, D24]
'''

DRIFT = '''\
scenarios:
  - id: linear
    beta0: -0.8473
    beta_z: 1.2528
    beta_arm: [0, 0, 0]
    J: 10
    b: 20
    q_schedule: {linear: {start: 0.5, step: 0.05}}
  - id: updown
    beta0: -0.8473
    beta_z: 1.2528
    beta_arm: [0, 0, 0]
    J: 10
    b: 20
    q_schedule: {piecewise: {start: 0.2, step: 0.05, restart: 0.35}}
studies:
  - {rule: TS, test: fisher, alternative: greater, m_ts: 100, calibrate: 0.01}
'''


def _write(tmp_path, content, name='suite.yaml'):
    path = tmp_path / name
    path.write_text(content)
    return str(path)


def test_minimal_config(tmp_path):
    suite = parse_config(_write(tmp_path, MINIMAL))
    assert suite.seed == 11 and suite.output == 'out.csv'
    assert len(suite.jobs) == 1
    job = suite.jobs[0]
    assert job.rule.kind == RuleKind.CR and job.nr == 10
    assert job.scenario.model.T == 10
    assert not suite.requires_gittins


def test_flgi_trend_grid_config(tmp_path):
    suite = parse_config(_write(tmp_path, FLGI_TREND))
    assert len(suite.jobs) == 4
    assert suite.requires_gittins and suite.gittins_table == 'gi.txt'
    for job in suite.jobs:
        assert (job.scenario.model.T, job.scenario.model.b, job.m, job.nr) == (100, 20, 500, 5000)
        assert job.analysis == 'randomization'
    betas = [job.scenario.model.beta_t for job in suite.jobs]
    assert betas[0] == 0.0
    assert betas[-1] == pytest.approx(0.2519, abs=1e-4)
    assert suite.max_trial_size == 100


def test_schedules_and_study_options(tmp_path):
    suite = parse_config(_write(tmp_path, DRIFT))
    linear, updown = suite.scenarios
    assert linear.model.q_schedule[-1] == pytest.approx(0.95)
    assert updown.model.q_schedule[5] == pytest.approx(0.35)
    job = suite.jobs[0]
    assert job.test.kind.value == 'fisher' and job.alternative == Alternative.GREATER
    assert job.calibrate == 0.01 and job.test_label == 'fisher-calibrated'
    rates = stage_rate_frame(suite.scenarios)
    assert len(rates) == 2 * 3 * 10
    assert rates.columns.tolist() == ['scenario', 'arm', 'stage', 'q', 'rate']


@pytest.mark.parametrize('content, message, line', [
    (MINIMAL.replace('b: 5', 'b: -5'), '"b"', 8),
    (MINIMAL.replace('    J: 2', '    J: 2\n    colour: red'), 'unknown key "colour"', 8),
    (MINIMAL.replace('rule: CR', 'rule: DBCD'), 'unknown rule', 10),
    (MINIMAL.replace('beta0: -0.8473', 'beta0: -0.8473\n    D: 0.1\n    beta_t: 0.2'), 'both D and beta_t', 6),
    (MINIMAL.replace('    nr: 10', '    nr: 10\n    scenarios: [other]'), 'unknown scenario', 12),
])
def test_schema_errors_carry_line_numbers(tmp_path, content, message, line):
    with pytest.raises(ConfigurationError, match=message) as e:
        parse_config(_write(tmp_path, content))
    assert e.value.line == line
    assert e.value.return_code == 2


def test_invalid_model_parameters(tmp_path):
    with pytest.raises(ConfigurationError, match='beta_arm'):
        parse_config(_write(tmp_path, MINIMAL.replace('beta_arm: [0, 0]', 'beta_arm: [0.5, 0]')))
    with pytest.raises(ConfigurationError):
        parse_config(_write(tmp_path, MINIMAL.replace('b: 5', 'b: 5\n    D: 0.9')))
    with pytest.raises(ConfigurationError):
        parse_config(str(tmp_path / 'missing.yaml'))
    with pytest.raises(ConfigurationError):
        parse_config(_write(tmp_path, 'scenarios: [\n'))


def test_append_rows_keeps_a_fixed_header(tmp_path):
    path = str(tmp_path / 'results' / 'out.csv')
    row = {column: 1 for column in RESULT_COLUMNS}
    append_rows(path, [row], RESULT_COLUMNS)
    append_rows(path, [row, row], RESULT_COLUMNS)
    frame = pd.read_csv(path)
    assert frame.columns.tolist() == RESULT_COLUMNS
    assert len(frame) == 3
    with pytest.raises(RarException):
        append_rows(path, [{'a': 1}], ['a'])


def test_runner_produces_one_row_per_job(tmp_path):
    content = MINIMAL.replace('    nr: 10', '    nr: 10\n    compare_to_cr: true\n  - rule: RSIHR\n    nr: 10\n'
                                             '    calibrate: true\n  - rule: CR\n    nr: 5\n    analysis: glm')
    suite = parse_config(_write(tmp_path, content))
    runner = SuiteRunner(suite)
    results, fits = runner.run()
    assert results.columns.tolist() == RESULT_COLUMNS
    assert results['rule'].tolist() == ['CR', 'RSIHR']
    # the CR reference runs on its own streams
    reference, = runner._cr_studies.values()
    assert reference.seed != suite.seed
    assert results['delta_ens_se'].iloc[0] > 0
    assert results['test'].tolist() == ['z', 'z-calibrated']
    assert fits['term'].tolist() == ['intercept', 'time', 'arm1']


def test_rerun_is_reproducible(tmp_path):
    suite = parse_config(_write(tmp_path, MINIMAL))
    first, _ = SuiteRunner(suite).run()
    second, _ = SuiteRunner(suite).run()
    columns = [c for c in RESULT_COLUMNS if c != 'runtime_s']
    pd.testing.assert_frame_equal(first[columns], second[columns])


def test_runner_reports_each_job(tmp_path, capsys):
    suite = parse_config(_write(tmp_path, MINIMAL + '  - rule: RSIHR\n    nr: 4\n'))
    handler = SuiteDecoratedEventHandler(DefaultEventHandler(), [job.name for job in suite.jobs])
    SuiteRunner(suite, event_handler=handler).run()
    out = capsys.readouterr().out
    assert '[1/2]' in out and '[2/2]' in out
    assert 'completed in' in out
