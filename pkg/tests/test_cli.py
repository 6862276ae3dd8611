import json
import re

import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

from stratfit.cli import cli
from stratfit.data import read_dataset
from stratfit.store import load_model

PATH2 = '{"type": "path", "K": 2}'
PATH3 = '{"type": "path", "K": 3}'
TIGHT = ['--eps-abs', '1e-8', '--eps-rel', '1e-8', '--max-iter', '5000']


@pytest.fixture
def runner():
    return CliRunner()


def write(path, text):
    path.write_text(text)
    return str(path)


@pytest.fixture
def two_node_csv(tmp_path):
    return write(tmp_path / 'two.csv', 'z:node,x:a,y\n0,1,1\n1,1,0\n')


@pytest.fixture
def poisson_csv(tmp_path):
    rows = ['z:node,y'] + [f'0,{v}' for v in (1, 0, 2, 1)] + [f'2,{v}' for v in (6, 4, 5, 7)]
    return write(tmp_path / 'counts.csv', '\n'.join(rows) + '\n')


def fit_args(data, model, graph=PATH2, loss='square-regression'):
    return ['fit', '--data', data, '--graph', graph, '--loss', loss, '--model-out', model]


def test_fit_two_node_example(runner, tmp_path, two_node_csv):
    model_path = str(tmp_path / 'm.json')
    result = runner.invoke(cli, fit_args(two_node_csv, model_path) + TIGHT)
    assert result.exit_code == 0, result.output
    assert re.search(r'iterations=\d+ r=\S+ s=\S+ objective=\S+ converged=true', result.output)
    params = load_model(model_path).params
    np.testing.assert_allclose(params[:, 0], [2 / 3, 1 / 3], atol=1e-5)


def test_fit_writes_report(runner, tmp_path, two_node_csv):
    report = tmp_path / 'report.json'
    result = runner.invoke(cli, fit_args(two_node_csv, str(tmp_path / 'm.json')) + ['--report', str(report)])
    assert result.exit_code == 0, result.output
    with open(report) as f:
        summary = json.load(f)
    assert summary['records'] == 2
    assert len(summary['data_sha256']) == 64


def test_iteration_cap_exits_with_two(runner, tmp_path, two_node_csv):
    model_path = tmp_path / 'm.json'
    result = runner.invoke(cli, fit_args(two_node_csv, str(model_path)) + ['--max-iter', '1'])
    assert result.exit_code == 2
    assert 'converged=false' in result.output
    assert model_path.is_file()


def test_missing_data_file(runner, tmp_path):
    missing = str(tmp_path / 'nowhere.csv')
    result = runner.invoke(cli, fit_args(missing, str(tmp_path / 'm.json')))
    assert result.exit_code == 1
    assert 'nowhere.csv' in result.output


def test_bad_solver_flag(runner, tmp_path, two_node_csv):
    result = runner.invoke(cli, fit_args(two_node_csv, str(tmp_path / 'm.json')) + ['--eps-abs', '-1'])
    assert result.exit_code == 1


def test_unknown_key_names_nearest_nodes(runner, tmp_path):
    data = write(tmp_path / 'd.csv', 'z:day,y\nmon,1\nwedd,2\n')
    graph = '{"type": "cycle", "K": 3, "keys": ["mon", "tue", "wed"]}'
    result = runner.invoke(cli, fit_args(data, str(tmp_path / 'm.json'), graph, 'poisson-dist'))
    assert result.exit_code == 1
    assert "'wed'" in result.output


def test_score_matches_model(runner, tmp_path, poisson_csv):
    model_path = str(tmp_path / 'm.json')
    assert runner.invoke(cli, fit_args(poisson_csv, model_path, PATH3, 'poisson-dist')).exit_code == 0
    result = runner.invoke(cli, ['score', '--model-in', model_path, '--data', poisson_csv, '--metric', 'anll'])
    assert result.exit_code == 0, result.output
    value = float(re.search(r'anll=(\S+)', result.output).group(1))
    assert value == load_model(model_path).score(read_dataset(poisson_csv), 'anll')


def test_predict_on_data_free_node(runner, tmp_path, poisson_csv):
    model_path = str(tmp_path / 'm.json')
    runner.invoke(cli, fit_args(poisson_csv, model_path, PATH3, 'poisson-dist') + TIGHT)
    queries = write(tmp_path / 'q.csv', 'z:node\n1\n0\n')
    out = tmp_path / 'pred.csv'
    result = runner.invoke(cli, ['predict', '--model-in', model_path, '--data', queries, '--out', str(out)])
    assert result.exit_code == 0, result.output
    frame = pd.read_csv(out, dtype={'z:node': str})
    assert list(frame.columns) == ['z:node', 'prediction']
    params = load_model(model_path).params[:, 0]
    assert frame['prediction'][0] == pytest.approx(params[1])
    assert frame['prediction'][0] == pytest.approx((params[0] + params[2]) / 2, abs=1e-5)


def test_predict_with_wrong_feature_count(runner, tmp_path, two_node_csv):
    model_path = str(tmp_path / 'm.json')
    runner.invoke(cli, fit_args(two_node_csv, model_path))
    queries = write(tmp_path / 'q.csv', 'z:node,x:a,x:b\n0,1,2\n')
    result = runner.invoke(cli, ['predict', '--model-in', model_path, '--data', queries])
    assert result.exit_code == 1
    assert 'features' in result.output


def test_cv_single_cell(runner, tmp_path, poisson_csv):
    out = tmp_path / 'cv.csv'
    result = runner.invoke(cli, ['cv', '--data', poisson_csv, '--graph', PATH3, '--loss', 'poisson-dist',
                                 '--grid', '{"graph.scale": [1.0]}', '--folds', '2', '--out', str(out)])
    assert result.exit_code == 0, result.output
    frame = pd.read_csv(out)
    assert len(frame) == 1
    assert bool(frame['best'][0])


def test_cv_is_reproducible(runner, tmp_path, poisson_csv):
    outputs = []
    for name in ('a.csv', 'b.csv'):
        out = tmp_path / name
        result = runner.invoke(cli, ['cv', '--data', poisson_csv, '--graph', PATH3, '--loss', 'poisson-dist',
                                     '--grid', '{"graph.scale": [0.1, 1.0, 10.0]}', '-k', '2',
                                     '--seed', '3', '--out', str(out)])
        assert result.exit_code == 0, result.output
        outputs.append(out.read_text())
    assert outputs[0] == outputs[1]
    assert len(pd.read_csv(tmp_path / 'a.csv')) == 3


def test_cv_with_holdout(runner, tmp_path, poisson_csv):
    out = tmp_path / 'cv.csv'
    result = runner.invoke(cli, ['cv', '--data', poisson_csv, '--graph', PATH3, '--loss', 'poisson-dist',
                                 '--grid', '[{"graph.scale": 1.0}]', '--holdout', '0.25', '--out', str(out)])
    assert result.exit_code == 0, result.output
    assert 'fold0' in pd.read_csv(out).columns


def test_cv_empty_grid(runner, tmp_path, poisson_csv):
    result = runner.invoke(cli, ['cv', '--data', poisson_csv, '--graph', PATH3, '--loss', 'poisson-dist',
                                 '--grid', '[]'])
    assert result.exit_code == 1
    assert 'grid is empty' in result.output


def test_export_has_one_row_per_node(runner, tmp_path, poisson_csv):
    model_path = str(tmp_path / 'm.json')
    runner.invoke(cli, fit_args(poisson_csv, model_path, PATH3, 'poisson-dist'))
    out = tmp_path / 'params.csv'
    result = runner.invoke(cli, ['export', '--model-in', model_path, '--out', str(out)])
    assert result.exit_code == 0, result.output
    frame = pd.read_csv(out)
    assert len(frame) == 3
    assert list(frame.columns) == ['z:0', 'theta0']


def test_graph_command(runner, tmp_path):
    out = tmp_path / 'g.json'
    spec = '{"product": [{"type": "cycle", "K": 7}, {"type": "path", "K": 24}]}'
    result = runner.invoke(cli, ['graph', '--spec', spec, '--out', str(out)])
    assert result.exit_code == 0, result.output
    assert 'K=168 edges=329 connected=true' in result.output
    with open(out) as f:
        assert len(json.load(f)['nodes']) == 168


def test_graph_file_and_config(runner, tmp_path, poisson_csv):
    graph_path = tmp_path / 'g.json'
    assert runner.invoke(cli, ['graph', '--spec', PATH3, '--out', str(graph_path)]).exit_code == 0
    config = write(tmp_path / 'run.json', json.dumps({
        'data': poisson_csv,
        'graph': str(graph_path),
        'loss': {'kind': 'poisson-dist'},
        'reg': {'kind': 'sum-squares', 'gamma': 0.01},
        'solver': {'max_iter': 2000},
    }))
    model_path = tmp_path / 'm.json'
    result = runner.invoke(cli, ['--config', config, 'fit', '--model-out', str(model_path)])
    assert result.exit_code == 0, result.output
    assert load_model(model_path).reg.gamma == 0.01


def test_missing_config_file(runner, tmp_path):
    result = runner.invoke(cli, ['--config', str(tmp_path / 'none.json'), 'graph', '--spec', PATH2,
                                 '--out', str(tmp_path / 'g.json')])
    assert result.exit_code == 1


def test_fit_summary_reports_wall_time(runner, tmp_path, two_node_csv):
    result = runner.invoke(cli, fit_args(two_node_csv, str(tmp_path / 'm.json')))
    assert result.exit_code == 0, result.output
    assert re.search(r'wall_time=\d+\.\d{3}s', result.output)


def test_fit_predict_export_are_byte_identical_across_runs(runner, tmp_path, poisson_csv):
    queries = write(tmp_path / 'q.csv', 'z:node\n0\n1\n2\n')
    outputs = []
    for run in ('a', 'b'):
        model_path = tmp_path / f'{run}.json'
        pred, params = tmp_path / f'{run}-pred.csv', tmp_path / f'{run}-params.csv'
        assert runner.invoke(cli, fit_args(poisson_csv, str(model_path), PATH3, 'poisson-dist')).exit_code == 0
        assert runner.invoke(cli, ['predict', '-m', str(model_path), '-d', queries, '-o', str(pred)]).exit_code == 0
        assert runner.invoke(cli, ['export', '-m', str(model_path), '-o', str(params)]).exit_code == 0
        outputs.append([model_path.read_bytes(), pred.read_bytes(), params.read_bytes()])
    assert outputs[0] == outputs[1]


def test_export_reloads_as_dataset(runner, tmp_path, poisson_csv):
    model_path = str(tmp_path / 'm.json')
    runner.invoke(cli, fit_args(poisson_csv, model_path, PATH3, 'poisson-dist'))
    out = tmp_path / 'params.csv'
    assert runner.invoke(cli, ['export', '--model-in', model_path, '--out', str(out)]).exit_code == 0
    exported = read_dataset(out, require_outcome=False)
    assert len(exported) == 3
    assert exported.keys == [('0',), ('1',), ('2',)]


def test_predict_class_probabilities(runner, tmp_path):
    rows = ['z:node,x:a,y'] + [f'{i % 2},{v},{1 if v > 0 else 0}' for i, v in enumerate(np.linspace(-2, 2, 20))]
    data = write(tmp_path / 'labels.csv', '\n'.join(rows) + '\n')
    model_path = str(tmp_path / 'm.json')
    reg = '{"kind": "sum-squares", "gamma": 0.5}'
    result = runner.invoke(cli, fit_args(data, model_path, loss='logistic') + ['--reg', reg, '--max-iter', '5000'])
    assert result.exit_code == 0, result.output
    out = tmp_path / 'proba.csv'
    result = runner.invoke(cli, ['predict', '-m', model_path, '-d', data, '--proba', '-o', str(out)])
    assert result.exit_code == 0, result.output
    frame = pd.read_csv(out, dtype={'z:node': str})
    assert list(frame.columns) == ['z:node', 'p(-1)', 'p(1)']
    np.testing.assert_allclose(frame['p(-1)'] + frame['p(1)'], 1.0)


def test_predict_lists_every_unknown_key(runner, tmp_path, poisson_csv):
    model_path = str(tmp_path / 'm.json')
    runner.invoke(cli, fit_args(poisson_csv, model_path, PATH3, 'poisson-dist'))
    queries = write(tmp_path / 'q.csv', 'z:node\n0\n5\n8\n')
    result = runner.invoke(cli, ['predict', '--model-in', model_path, '--data', queries])
    assert result.exit_code == 1
    assert "'5'" in result.output and "'8'" in result.output
