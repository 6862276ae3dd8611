"""CLI interface for stratfit."""

import functools
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, Optional

import click
import pandas as pd

from .config import Config, parse_inline
from .data import read_dataset, write_table
from .errors import GraphError, StratFitError
from .graph import graph_from_spec, is_connected, save_graph
from .logger import setup_logger
from .model import build_model, cross_validate, holdout_validate
from .store import compute_file_hash, load_model, save_model, write_json

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_CONVERGED = 2


def handle_errors(func):
    """Report expected failures on stderr and exit with status 1."""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except StratFitError as e:
            click.echo(f"Error: {e}", err=True)
            sys.exit(EXIT_ERROR)
    return wrapper


def solver_options(func):
    """Flags overriding the 'solver' config section."""
    options = [
        click.option('--lambda0', type=float, default=None, help='Initial ADMM penalty'),
        click.option('--eps-abs', type=float, default=None, help='Absolute tolerance'),
        click.option('--eps-rel', type=float, default=None, help='Relative tolerance'),
        click.option('--max-iter', type=int, default=None, help='ADMM iteration cap'),
        click.option('--threads', '-t', type=int, default=None,
                     help='Worker threads (default: number of cores; 1 = serial)'),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def model_options(func):
    """Flags describing the model to build."""
    options = [
        click.option('--graph', '-g', default=None,
                     help='Graph spec: inline JSON or a .json file'),
        click.option('--loss', '-l', default=None,
                     help='Loss kind, or inline JSON such as {"kind": "poisson-dist"}'),
        click.option('--reg', '-r', default=None,
                     help='Regularizer kind, or inline JSON such as {"kind": "sum-squares", "gamma": 0.1}'),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _apply_overrides(config: Config, graph=None, loss=None, reg=None, lambda0=None,
                     eps_abs=None, eps_rel=None, max_iter=None, threads=None, seed=None) -> None:
    config.override('graph', parse_inline(graph))
    config.override('loss', parse_inline(loss))
    config.override('reg', parse_inline(reg))
    config.override('solver.lambda0', lambda0)
    config.override('solver.eps_abs', eps_abs)
    config.override('solver.eps_rel', eps_rel)
    config.override('solver.max_iter', max_iter)
    config.override('solver.threads', threads)
    config.override('solver.seed', seed)
    for key, value in (('solver.lambda0', lambda0), ('solver.eps_abs', eps_abs),
                       ('solver.eps_rel', eps_rel), ('solver.max_iter', max_iter),
                       ('solver.threads', threads)):
        if value is not None and value <= 0:
            raise StratFitError(f"--{key.split('.')[1].replace('_', '-')} must be positive, got {value}")


def _graph_spec(config: Config) -> Dict[str, Any]:
    spec = config.graph_spec()
    if isinstance(spec, str):
        path = Path(spec)
        if not path.is_file():
            raise GraphError(f"graph file not found: {path}")
        try:
            with open(path, 'r', encoding='utf-8') as f:
                spec = json.load(f)
        except json.JSONDecodeError as e:
            raise GraphError(f"graph file {path} is not valid JSON: {e}")
    if not isinstance(spec, dict):
        raise GraphError("graph spec must be a JSON object")
    return spec


def _build(config: Config):
    return build_model(config.loss_spec(), config.reg_spec(), _graph_spec(config), config.model_options())


def _data_path(config: Config, data: Optional[str]) -> str:
    path = data or config.get('data')
    if path is None:
        raise StratFitError("no data file given (use --data)")
    return path


def _emit_table(frame: pd.DataFrame, out: Optional[str]) -> None:
    if out is None:
        click.echo(frame.to_csv(index=False), nl=False)
    else:
        write_table(frame, out)


@click.group()
@click.option('--config', '-c', 'config_path', default=None,
              help='JSON run configuration (flags override its values)')
@click.option('--verbose', '-v', is_flag=True, default=False, help='Log debug output')
@click.option('--log-file', default=None, help='Also write the log to this file')
@click.pass_context
def cli(ctx, config_path, verbose, log_file):
    """stratfit - Laplacian-regularized stratified models.

    \b
    Quick Start:
      stratfit graph --spec '{"type": "cycle", "K": 7}' --out week.json
      stratfit fit --data train.csv --graph week.json --loss poisson-dist --model-out m.json
      stratfit score --model-in m.json --data test.csv --metric anll
      stratfit predict --model-in m.json --data test.csv --out pred.csv

    \b
    Hyper-parameter search:
      stratfit cv --data train.csv --graph week.json --loss poisson-dist \\
                  --grid '{"graph.scale": [0.1, 1, 10]}' --folds 5

    \b
    Data files:
      z:<name> columns form the node key, x:<name> columns the features,
      y (or y:<name>) the outcome.
    """
    setup_logger(level=logging.DEBUG if verbose else logging.INFO, log_file=log_file)
    ctx.ensure_object(dict)
    try:
        ctx.obj['config'] = Config(config_path)
    except StratFitError as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(EXIT_ERROR)
    ctx.obj['verbose'] = verbose


@cli.command()
@click.option('--data', '-d', default=None, help='Training data file')
@model_options
@solver_options
@click.option('--seed', type=int, default=None, help='Seed of randomized solver steps')
@click.option('--model-out', '-o', required=True, help='Where to write the fitted model')
@click.option('--report', default=None, help='Write the fit report (JSON) to this file')
@click.pass_context
@handle_errors
def fit(ctx, data, graph, loss, reg, lambda0, eps_abs, eps_rel, max_iter, threads, seed,
        model_out, report):
    """Fit a stratified model to a data file.

    \b
    Examples:
      stratfit fit -d train.csv -g '{"type": "path", "K": 2}' -l square-regression -o m.json
      stratfit -c run.json fit -d train.csv -o m.json --max-iter 1000

    \b
    Exit status:
      0 converged, 1 configuration or data error, 2 stopped at the
      iteration cap (the model is still written)
    """
    config = ctx.obj['config']
    _apply_overrides(config, graph, loss, reg, lambda0, eps_abs, eps_rel, max_iter, threads, seed)
    path = _data_path(config, data)
    dataset = read_dataset(path)
    model = _build(config)
    cfg = config.solver_config()
    if ctx.obj.get('verbose'):
        cfg = cfg.with_params(verbose=True)

    fitted, fit_report = model.fit(dataset, cfg)
    save_model(fitted, model_out)

    summary = fit_report.to_dict()
    summary['data_sha256'] = compute_file_hash(path)
    summary['model'] = str(model_out)
    if report is not None:
        write_json(summary, report)
    click.echo(f"iterations={summary['iterations']} r={summary['r_norm']:.3e} "
               f"s={summary['s_norm']:.3e} objective={summary['objective']:.6e} "
               f"converged={str(summary['converged']).lower()} wall_time={summary['wall_time']:.3f}s")
    if not fit_report.converged:
        click.echo(f"Warning: no convergence within the iteration cap; model written to {model_out}",
                   err=True)
        sys.exit(EXIT_NOT_CONVERGED)


@cli.command()
@click.option('--model-in', '-m', required=True, help='Fitted model file')
@click.option('--data', '-d', default=None, help='Records to predict')
@click.option('--out', '-o', default=None, help='Output table (default: stdout)')
@click.option('--proba', is_flag=True, default=False,
              help='Class probabilities instead of point predictions (logistic, multinomial-logistic)')
@click.pass_context
@handle_errors
def predict(ctx, model_in, data, out, proba):
    """Predict every record of a data file.

    \b
    Examples:
      stratfit predict -m m.json -d test.csv -o predictions.csv
      stratfit predict -m classifier.json -d test.csv --proba
    """
    model = load_model(model_in)
    dataset = read_dataset(_data_path(ctx.obj['config'], data), require_outcome=False)
    columns: Dict[str, Any] = {}
    for i, name in enumerate(dataset.key_names):
        columns[f"z:{name}"] = [k[i] for k in dataset.keys]
    frame = pd.DataFrame(columns, index=pd.RangeIndex(len(dataset)))
    if proba:
        frame = pd.concat([frame, model.predict_proba(dataset)], axis=1)
    else:
        frame['prediction'] = model.predict_dataset(dataset)
    _emit_table(frame, out)


@cli.command()
@click.option('--model-in', '-m', required=True, help='Fitted model file')
@click.option('--data', '-d', default=None, help='Records to score')
@click.option('--metric', default=None, type=click.Choice(['anll', 'rmse', 'error']),
              help="Metric (default: the loss's first metric)")
@click.pass_context
@handle_errors
def score(ctx, model_in, data, metric):
    """Score a fitted model on a data file.

    \b
    Example:
      stratfit score -m m.json -d test.csv --metric anll
    """
    model = load_model(model_in)
    dataset = read_dataset(_data_path(ctx.obj['config'], data))
    metric = metric or model.loss.metrics[0]
    click.echo(f"{metric}={model.score(dataset, metric)!r}")


@cli.command()
@click.option('--data', '-d', default=None, help='Data file')
@model_options
@solver_options
@click.option('--grid', default=None,
              help='Grid: inline JSON or .json file, a list of cells or {key: [values]}')
@click.option('--folds', '-k', type=int, default=None, help='Number of folds (default 5)')
@click.option('--seed', type=int, default=None, help='Seed of the fold assignment')
@click.option('--metric', default=None, type=click.Choice(['anll', 'rmse', 'error']))
@click.option('--stratify-folds', is_flag=True, default=False,
              help="Deal each node's records evenly over the folds")
@click.option('--holdout', type=float, default=None,
              help='Validate on one held-out fraction instead of k folds')
@click.option('--out', '-o', default=None, help='Results table (default: stdout)')
@click.pass_context
@handle_errors
def cv(ctx, data, graph, loss, reg, lambda0, eps_abs, eps_rel, max_iter, threads,
       grid, folds, seed, metric, stratify_folds, holdout, out):
    """Cross-validate a model over a hyper-parameter grid.

    \b
    Grid keys:
      reg.<field>       regularizer field, e.g. reg.gamma, reg.l2
      graph.scale       multiply every edge weight
      graph.<path>      field of the graph spec, e.g. graph.product.0.w
      solver.<field>    solver setting for that cell

    \b
    Example:
      stratfit cv -d train.csv -g week.json -l poisson-dist \\
                  --grid '{"graph.scale": [0, 0.1, 1, 10]}' -k 5 --seed 0
    """
    config = ctx.obj['config']
    _apply_overrides(config, graph, loss, reg, lambda0, eps_abs, eps_rel, max_iter, threads)
    config.override('cv.grid', parse_inline(grid))
    config.override('cv.folds', folds)
    config.override('cv.seed', seed)
    config.override('cv.metric', metric)
    cells = config.grid()
    if not cells:
        raise StratFitError("cross-validation grid is empty (use --grid or the 'cv.grid' config entry)")

    dataset = read_dataset(_data_path(config, data))
    model = _build(config)
    cfg = config.solver_config()
    seed_value = int(config.get('cv.seed', 0))
    if holdout is not None:
        result = holdout_validate(model, dataset, cells, holdout, seed_value,
                                  config.get('cv.metric'), cfg)
    else:
        result = cross_validate(model, dataset, cells, int(config.get('cv.folds', 5)), seed_value,
                                config.get('cv.metric'), cfg,
                                stratify_folds or bool(config.get('cv.stratify', False)))
    _emit_table(result.to_frame(), out)
    best = result.rows[result.best]
    click.echo(f"best cell {json.dumps(best.cell, sort_keys=True)}: {result.metric}={best.mean!r}", err=True)


@cli.command()
@click.option('--model-in', '-m', required=True, help='Fitted model file')
@click.option('--out', '-o', default=None, help='Output table (default: stdout)')
@handle_errors
def export(model_in, out):
    """Export fitted parameters, one row per node.

    \b
    Example:
      stratfit export -m m.json -o params.csv

    \b
    Notes:
      - Key columns z:0, z:1, ... carry the node key tuple
      - theta0, theta1, ... hold the flattened parameter
    """
    model = load_model(model_in)
    if model.params is None:
        raise StratFitError(f"model {model_in} is not fitted")
    columns: Dict[str, Any] = {}
    for i in range(model.graph.key_width):
        columns[f"z:{i}"] = [k[i] for k in model.graph.nodes]
    for j in range(model.params.shape[1]):
        columns[f"theta{j}"] = model.params[:, j]
    _emit_table(pd.DataFrame(columns), out)


@cli.command('graph')
@click.option('--spec', '-s', required=True, help='Graph spec: inline JSON or a .json file')
@click.option('--out', '-o', required=True, help='Where to write the materialized graph')
@handle_errors
def graph_cmd(spec, out):
    """Materialize a factory or product spec to a graph file.

    \b
    Examples:
      stratfit graph -s '{"type": "grid", "dims": [10, 10]}' -o grid.json
      stratfit graph -s '{"product": [{"type": "cycle", "K": 7}, {"type": "path", "K": 24}]}' -o wh.json
    """
    parsed = parse_inline(spec)
    if not isinstance(parsed, dict):
        raise GraphError(f"cannot read graph spec {spec!r}")
    g = graph_from_spec(parsed)
    save_graph(g, out)
    click.echo(f"K={g.K} edges={len(g.edges)} connected={str(is_connected(g)).lower()}")


def main():
    """Main entry point."""
    try:
        code = cli.main(standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("Aborted.", err=True)
        sys.exit(EXIT_ERROR)
    except click.ClickException as e:
        e.show()
        sys.exit(EXIT_ERROR)
    sys.exit(code or EXIT_OK)


if __name__ == '__main__':
    main()
