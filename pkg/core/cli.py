import functools
import os
import sys
import time
from dataclasses import replace
from typing import List, Optional

import click
import numpy as np
import pandas as pd
import sentry_sdk
from rich.markdown import Markdown
from rich.panel import Panel

import core.config
from core.allocation import AllocationRuleSpec, RuleKind
from core.engine import DefaultEventHandler, SuiteDecoratedEventHandler, calibrate_cutoff
from core.gittins import GittinsTable, compute_gittins_table, load_table, save_table
from core.glm import DesignSpec, detect_separation, fit_logistic
from core.randomization import Alternative, randomization_test
from core.records import load_trial, read_records
from core.suite import (CALIBRATION_SALT, StudySuite, SuiteRunner, append_rows, parse_config, stage_rate_frame,
                        GLM_COLUMNS, RESULT_COLUMNS)
from core.utils import GittinsTableError, RarException, console, derive_seed, init_sentry, resolve_threads, warn

RULES = list(RuleKind.__members__)


def _command(action: str):
    """Report library failures the same way for every subcommand."""

    def decorator(func):
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            try:
                return func(*args, **kwargs)
            except RarException as e:
                sentry_sdk.capture_exception(e)
                click.echo(f'Failed to {action}: {e.msg}')
                sys.exit(e.return_code)
            except ValueError as e:
                sentry_sdk.capture_exception(e)
                click.echo(f'Failed to {action}: {e}')
                sys.exit(1)

        return wrapper

    return decorator


def _load_suite(config: str, seed: Optional[int], threads: Optional[int], gittins_table: Optional[str]) -> StudySuite:
    suite = parse_config(config)
    overrides = {}
    if seed is not None:
        overrides['seed'] = seed
    if threads is not None:
        overrides['threads'] = threads
    if gittins_table is not None:
        overrides['gittins_table'] = gittins_table
    return replace(suite, **overrides)


def _suite_table(suite: StudySuite) -> Optional[GittinsTable]:
    if not suite.requires_gittins:
        return None
    if suite.gittins_table is None:
        raise GittinsTableError(
            f'the suite uses a Gittins-based rule but names no table; build one with '
            f'`rar-sim gittins-table --max-n {suite.max_trial_size} --out FILE` and pass --gittins-table FILE')
    table = load_table(suite.gittins_table)
    console.print(f'Gittins table {suite.gittins_table}: discount={table.discount}, max_n={table.max_n}')
    return table


def _rule_spec(rule: str, m_ts: int, m_flgi: int, control_floor: Optional[float]) -> AllocationRuleSpec:
    return AllocationRuleSpec(RuleKind[rule], m_ts=m_ts, m_flgi=m_flgi, control_floor=control_floor)


def _write(frame: pd.DataFrame, out: Optional[str]):
    if out:
        directory = os.path.dirname(out)
        if directory:
            os.makedirs(directory, exist_ok=True)
        frame.to_csv(out, index=False)
        console.print(f'Wrote {out}')
    else:
        click.echo(frame.to_csv(index=False), nl=False)


def _summary(results: pd.DataFrame) -> str:
    lines = ['# Study Summary', '', '| rule | scenario | test | alpha/power | p* | ENS | delta ENS |',
             '|---|---|---|---|---|---|---|']
    for row in results.to_dict('records'):
        delta = '' if pd.isna(row['delta_ens']) else f"{row['delta_ens']:.2f}"
        lines.append(f"| {row['rule']} | {row['scenario']} | {row['test']} | "
                     f"{row['alpha_or_power']:.4f} ({row['alpha_or_power_se']:.4f}) | {row['p_star']:.3f} | "
                     f"{row['ens']:.2f} | {delta} |")
    return '\n'.join(lines)


@click.group(name='rar-sim', help='Simulate and analyse response-adaptive randomised trials with binary outcomes')
@click.option('--debug/--no-debug', default=False, help='Enable debug mode', required=False)
def cli(**kwargs):
    core.config.DEBUG = kwargs.get('debug', False)
    init_sentry()


@cli.command(name='gittins-table', help='Compute a Gittins index table for Bernoulli arms')
@click.option('--discount', default=core.config.DEFAULT_DISCOUNT, type=float, show_default=True,
              help='Discount factor d in (0, 1)')
@click.option('--max-n', default=100, type=int, show_default=True,
              help='Largest number of observations per arm covered by the table')
@click.option('--tol', default=core.config.DEFAULT_TOL, type=float, show_default=True, help='Bisection tolerance')
@click.option('--out', required=True, type=click.Path(dir_okay=False), help='Table file to write')
@click.option('--threads', default=None, type=int, help='Worker processes (default: all cores)')
@_command('compute the Gittins table')
def gittins_table(discount: float, max_n: int, tol: float, out: str, threads: Optional[int]):
    handler = DefaultEventHandler(unit='states')
    label = f'Gittins table d={discount}'
    started = time.perf_counter()
    handler.handle_study_start(label, (max_n + 1) * (max_n + 2) // 2)
    table = compute_gittins_table(discount, max_n, tol, threads=resolve_threads(threads),
                                  on_progress=lambda done, total: handler.handle_study_progress(label, done, total))
    save_table(table, out)
    handler.handle_study_end(label, time.perf_counter() - started)
    console.print(f'Wrote {out} (discount={discount}, max_n={max_n}, horizon={table.horizon})')


@cli.command(name='simulate', help='Run every study of a suite configuration')
@click.option('--config', 'config', required=True, type=click.Path(exists=True, dir_okay=False),
              help='Suite configuration (YAML)')
@click.option('--out', default=None, type=click.Path(dir_okay=False), help='Results CSV (overrides the config)')
@click.option('--glm-out', default=None, type=click.Path(dir_okay=False), help='GLM study CSV')
@click.option('--seed', default=None, type=int, help='Master seed (overrides the config)')
@click.option('--threads', default=None, type=int, help='Worker processes (default: all cores)')
@click.option('--gittins-table', default=None, type=click.Path(dir_okay=False), help='Gittins table file')
@_command('run the suite')
def simulate(config: str, out: Optional[str], glm_out: Optional[str], seed: Optional[int], threads: Optional[int],
             gittins_table: Optional[str]):
    suite = _load_suite(config, seed, threads, gittins_table)
    table = _suite_table(suite)
    handler = DefaultEventHandler()
    if len(suite.jobs) > 1:
        handler = SuiteDecoratedEventHandler(handler, [job.name for job in suite.jobs])
    runner = SuiteRunner(suite, table=table, threads=resolve_threads(suite.threads), event_handler=handler)
    results, fits = runner.run()

    out = out or suite.output
    if len(results):
        append_rows(out, results.to_dict('records'), RESULT_COLUMNS)
        console.print(f'Wrote {len(results)} rows to {out}')
        console.print(Panel(Markdown(_summary(results)), expand=False))
    if len(fits):
        glm_out = glm_out or suite.glm_output or os.path.splitext(out)[0] + '.glm.csv'
        append_rows(glm_out, fits.to_dict('records'), GLM_COLUMNS)
        console.print(f'Wrote {len(fits)} rows to {glm_out}')


@cli.command(name='calibrate', help='Calibrate rejection thresholds on the null version of each study')
@click.option('--config', 'config', required=True, type=click.Path(exists=True, dir_okay=False),
              help='Suite configuration (YAML)')
@click.option('--out', default=None, type=click.Path(dir_okay=False), help='Thresholds CSV (default: stdout)')
@click.option('--seed', default=None, type=int, help='Master seed (overrides the config)')
@click.option('--threads', default=None, type=int, help='Worker processes (default: all cores)')
@click.option('--gittins-table', default=None, type=click.Path(dir_okay=False), help='Gittins table file')
@_command('calibrate the thresholds')
def calibrate(config: str, out: Optional[str], seed: Optional[int], threads: Optional[int],
              gittins_table: Optional[str]):
    suite = _load_suite(config, seed, threads, gittins_table)
    table = _suite_table(suite)
    handler = DefaultEventHandler()
    rows, done = [], set()
    for job in suite.jobs:
        key = (job.rule, job.scenario.id, job.test.kind, job.test.alpha, job.nr)
        if key in done:
            continue
        done.add(key)
        threshold = calibrate_cutoff(job.rule, job.scenario.null_model(), job.nr, alpha_target=job.test.alpha,
                                     test=job.test.kind, seed=derive_seed(suite.seed, CALIBRATION_SALT),
                                     threads=resolve_threads(suite.threads), table=table, event_handler=handler)
        rows.append({'rule': job.rule.name, 'scenario': job.scenario.id, 'test': job.test.kind.value,
                     'alpha_target': job.test.alpha, 'threshold': threshold, 'nr': job.nr, 'seed': suite.seed})
    _write(pd.DataFrame(rows), out)


@cli.command(name='randtest', help='Randomization test of a recorded trial')
@click.argument('trial_csv', type=click.Path(exists=True, dir_okay=False))
@click.option('--rule', required=True, type=click.Choice(RULES), help='Allocation rule the trial used')
@click.option('--m', 'M', default=core.config.DEFAULT_M_RANDOMIZATION, type=int, show_default=True,
              help='Number of re-randomized trials')
@click.option('--alpha', default=core.config.DEFAULT_ALPHA, type=float, show_default=True)
@click.option('--alternative', default='two-sided', type=click.Choice([a.value for a in Alternative]),
              show_default=True)
@click.option('--m-ts', default=core.config.DEFAULT_M_TS, type=int, show_default=True)
@click.option('--m-flgi', default=core.config.DEFAULT_M_FLGI, type=int, show_default=True)
@click.option('--control-floor', default=None, type=float, help='CFLGI control floor (default 1/(K+1))')
@click.option('--seed', default=0, type=int, show_default=True)
@click.option('--gittins-table', default=None, type=click.Path(dir_okay=False), help='Gittins table file')
@click.option('--out', default=None, type=click.Path(dir_okay=False), help='Result CSV (default: stdout)')
@_command('run the randomization test')
def randtest(trial_csv: str, rule: str, M: int, alpha: float, alternative: str, m_ts: int, m_flgi: int,
             control_floor: Optional[float], seed: int, gittins_table: Optional[str], out: Optional[str]):
    spec = _rule_spec(rule, m_ts, m_flgi, control_floor)
    table = None
    if spec.requires_gittins:
        if gittins_table is None:
            raise GittinsTableError(f'rule {rule} needs --gittins-table FILE (build one with `rar-sim gittins-table`)')
        table = load_table(gittins_table)
    trial = load_trial(trial_csv)
    result = randomization_test(trial, spec, M, np.random.default_rng(seed), table=table, alpha=alpha,
                                alternative=Alternative(alternative))
    _write(pd.DataFrame([{'rule': rule, 'statistic': result.statistic, 'p_value': result.p_value,
                          'reject': result.reject, 'M': M, 'alpha': alpha, 'alternative': alternative,
                          'seed': seed}]), out)


@cli.command(name='fit', help='Fit the logistic outcome model to patient records')
@click.argument('records_csv', type=click.Path(exists=True, dir_okay=False))
@click.option('--firth/--no-firth', default=True, help='Use the Firth penalized likelihood', show_default=True)
@click.option('--time/--no-time', default=True, help='Include the stage trend term', show_default=True)
@click.option('--z/--no-z', default=False, help='Include the patient covariate', show_default=True)
@click.option('--out', default=None, type=click.Path(dir_okay=False), help='Coefficient CSV (default: stdout)')
@_command('fit the model')
def fit(records_csv: str, firth: bool, time: bool, z: bool, out: Optional[str]):
    records = read_records(records_csv)
    design = DesignSpec(time=time, z=z)
    result = fit_logistic(records, design, firth=firth)
    if result.separation_detected:
        warn('separation detected; maximum likelihood estimates diverge, consider --firth')
    elif firth and detect_separation(records, design):
        warn('separation detected; reporting the Firth penalized estimates')
    _write(result.as_frame(), out)


@cli.command(name='schedule', help='Per-stage success rates of every scenario in a suite')
@click.option('--config', 'config', required=True, type=click.Path(exists=True, dir_okay=False),
              help='Suite configuration (YAML)')
@click.option('--out', default=None, type=click.Path(dir_okay=False), help='Rates CSV (default: stdout)')
@_command('compute the stage rates')
def schedule(config: str, out: Optional[str]):
    suite = parse_config(config)
    _write(stage_rate_frame(suite.scenarios), out)


def main(argv: Optional[List[str]] = None) -> int:
    try:
        cli.main(args=argv, prog_name='rar-sim')
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 1 if e.code else 0
    return 0


if __name__ == '__main__':
    sys.exit(main())
