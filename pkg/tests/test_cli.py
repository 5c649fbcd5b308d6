import pandas as pd
import pytest
from click.testing import CliRunner

from core.allocation import AllocationRuleSpec, RuleKind
from core.cli import cli, main
from core.engine import TrialConfig, run_trial
from core.gittins import load_table
from core.model import build_scenario_i
from core.records import save_trial
from core.suite import RESULT_COLUMNS
from core.utils import replicate_rng

SUITE = '''\
seed: 3
scenarios:
  - {id: flat, beta0: -0.8473, beta_arm: [0, 0], J: 2, b: 5}
studies:
  - {rule: %s, nr: 6}
'''


@pytest.fixture
def runner():
    return CliRunner()


def _suite(tmp_path, rule='CR', extra=''):
    path = tmp_path / 'suite.yaml'
    path.write_text(SUITE % rule + extra)
    return str(path)


def test_simulate_writes_results(runner, tmp_path):
    out = tmp_path / 'results.csv'
    result = runner.invoke(cli, ['simulate', '--config', _suite(tmp_path), '--out', str(out), '--threads', '1'])
    assert result.exit_code == 0, result.output
    frame = pd.read_csv(out)
    assert frame.columns.tolist() == RESULT_COLUMNS
    assert frame['rule'].tolist() == ['CR']
    assert 'Study Summary' in result.output

    # a second run appends under the same header
    result = runner.invoke(cli, ['simulate', '--config', _suite(tmp_path), '--out', str(out), '--threads', '1',
                                 '--seed', '4'])
    assert result.exit_code == 0, result.output
    assert pd.read_csv(out)['seed'].tolist() == [3, 4]


def test_simulate_without_gittins_table(runner, tmp_path):
    result = runner.invoke(cli, ['simulate', '--config', _suite(tmp_path, 'FLGI'), '--threads', '1'])
    assert result.exit_code == 1
    assert 'gittins-table' in result.output
    assert 'Failed to run the suite' in result.output


def test_bad_config_exits_with_two(runner, tmp_path):
    path = tmp_path / 'bad.yaml'
    path.write_text((SUITE % 'CR').replace('b: 5', 'b: -1'))
    result = runner.invoke(cli, ['simulate', '--config', str(path)])
    assert result.exit_code == 2
    assert 'line 3' in result.output


def test_gittins_table_then_randtest(runner, tmp_path):
    table = tmp_path / 'gi.txt'
    result = runner.invoke(cli, ['gittins-table', '--discount', '0.9', '--max-n', '12', '--tol', '1e-5',
                                 '--out', str(table), '--threads', '1'])
    assert result.exit_code == 0, result.output
    assert table.exists()

    out = tmp_path / 'flgi.csv'
    result = runner.invoke(cli, ['simulate', '--config', _suite(tmp_path, 'FLGI, m_flgi: 20'), '--gittins-table',
                                 str(table), '--out', str(out), '--threads', '1'])
    assert result.exit_code == 0, result.output
    assert pd.read_csv(out)['rule'].tolist() == ['FLGI']

    model = build_scenario_i(0.0, -0.8473, (0.0, 0.0), J=2, b=3, K=1)
    cfg = TrialConfig(model=model, rule=AllocationRuleSpec(RuleKind.FLGI, m_flgi=20))
    trial_path = str(tmp_path / 'trial.csv')
    save_trial(run_trial(cfg, replicate_rng(0, 0), load_table(str(table))), trial_path)

    out = tmp_path / 'randtest.csv'
    result = runner.invoke(cli, ['randtest', trial_path, '--rule', 'FLGI', '--m', '49', '--m-flgi', '20',
                                 '--gittins-table', str(table), '--out', str(out)])
    assert result.exit_code == 0, result.output
    row = pd.read_csv(out).iloc[0]
    assert 0.0 < row['p_value'] <= 1.0
    assert row['M'] == 49

    result = runner.invoke(cli, ['randtest', trial_path, '--rule', 'FLGI'])
    assert result.exit_code == 1
    assert '--gittins-table' in result.output


def test_calibrate(runner, tmp_path):
    out = tmp_path / 'thresholds.csv'
    result = runner.invoke(cli, ['calibrate', '--config', _suite(tmp_path), '--out', str(out), '--threads', '1'])
    assert result.exit_code == 0, result.output
    frame = pd.read_csv(out)
    assert frame.columns.tolist() == ['rule', 'scenario', 'test', 'alpha_target', 'threshold', 'nr', 'seed']
    assert 0.0 <= frame['threshold'].iloc[0] <= 1.0


def test_fit(runner, tmp_path):
    records = tmp_path / 'records.csv'
    pd.DataFrame({'stage': [1, 1, 1, 1, 2, 2, 2, 2], 'z': [0] * 8, 'arm': [0, 1, 0, 1, 0, 1, 0, 1],
                  'outcome': [0, 1, 1, 0, 0, 1, 1, 1]}).to_csv(records, index=False)
    out = tmp_path / 'fit.csv'
    result = runner.invoke(cli, ['fit', str(records), '--out', str(out)])
    assert result.exit_code == 0, result.output
    assert pd.read_csv(out)['term'].tolist() == ['intercept', 'time', 'arm1']

    result = runner.invoke(cli, ['fit', str(records), '--no-firth', '--no-time'])
    assert result.exit_code == 0, result.output
    assert 'arm1' in result.output


def test_schedule(runner, tmp_path):
    out = tmp_path / 'rates.csv'
    result = runner.invoke(cli, ['schedule', '--config', _suite(tmp_path), '--out', str(out)])
    assert result.exit_code == 0, result.output
    frame = pd.read_csv(out)
    assert len(frame) == 2 * 2
    assert frame['rate'].iloc[0] == pytest.approx(0.3, abs=1e-4)


def test_main_returns_exit_codes(tmp_path):
    assert main(['--help']) == 0
    assert main(['simulate']) == 2
    assert main(['schedule', '--config', _suite(tmp_path), '--out', str(tmp_path / 'rates.csv')]) == 0
