import math

import numpy as np
import pytest

from tests.conftest import smooth_bernoulli_grid, two_node_data
from stratfit.data import Dataset
from stratfit.errors import DataError, DisconnectedGraphWarning, NotFittedError, StratFitError, UnknownNodeError
from stratfit.graph import StratGraph, make_cycle, make_grid, make_path, make_star, scale
from stratfit.losses import make_loss, score_anll
from stratfit.model import StratifiedModel, bind_and_group, build_model, cross_validate, holdout_validate
from stratfit.regularizers import Regularizer
from stratfit.solver import SolverConfig

TIGHT = SolverConfig(eps_abs=1e-8, eps_rel=1e-8, max_iter=5000, cg_tol=1e-12)


def poisson_records(rates, per_node, seed=0, skip=()):
    g = np.random.default_rng(seed)
    keys, y = [], []
    for k, rate in enumerate(rates):
        if k in skip:
            continue
        keys += [(str(k),)] * per_node
        y += list(g.poisson(rate, size=per_node))
    return Dataset(keys, None, np.array(y, dtype=float), ['node'])


def test_bind_and_group_counts():
    data = Dataset(['0', '2', '0'], None, [1.0, 2.0, 3.0])
    groups = bind_and_group(data, make_path(3))
    assert [d.count for d in groups] == [2, 0, 1]
    np.testing.assert_array_equal(groups[0].outcomes, [1.0, 3.0])


def test_bind_and_group_rejects_unknown_keys():
    days = ['mon', 'tue', 'wed', 'thu', 'fri', 'sat', 'sun']
    data = Dataset(['mon', 'wedd'], None, [1.0, 2.0])
    with pytest.raises(UnknownNodeError) as info:
        bind_and_group(data, make_cycle(7, keys=days))
    assert info.value.key == ('wedd',)
    assert ('wed',) in info.value.suggestions


def test_bind_and_group_checks_key_width():
    data = Dataset([('0', 'a')], None, [1.0])
    with pytest.raises(DataError):
        bind_and_group(data, make_path(2))


def test_two_node_fit():
    model = StratifiedModel(make_loss('square-regression'), None, make_path(2))
    fitted, report = model.fit(two_node_data(), TIGHT)
    assert report.converged
    assert report.keys_seen == 2 and report.records == 2
    np.testing.assert_allclose(fitted.params[:, 0], [2 / 3, 1 / 3], atol=1e-5)
    assert fitted.predict('0', [1.0]) == pytest.approx(2 / 3, abs=1e-5)
    assert not model.is_fitted


def test_bernoulli_boundary_without_edges():
    with pytest.warns(DisconnectedGraphWarning):
        model = StratifiedModel(make_loss('bernoulli-dist'), None, scale(make_star(2), 0))
    data = Dataset(['0', '0', '0', '1', '1'], None, [1, 1, 1, 0, 0])
    fitted, _ = model.fit(data, TIGHT)
    assert fitted.params[0, 0] == pytest.approx(1 - 1e-5, abs=1e-7)
    assert fitted.params[1, 0] == pytest.approx(1e-5, abs=1e-7)
    assert fitted.score(data, 'anll') == pytest.approx(-math.log(1 - 1e-5), rel=1e-3)


def test_fit_is_invariant_to_record_order():
    data = poisson_records([1.0, 2.0, 4.0, 3.0], per_node=6)
    shuffled = data.subset(np.random.default_rng(5).permutation(len(data)))
    model = StratifiedModel(make_loss('poisson-dist'), None, make_path(4))
    first, _ = model.fit(data, TIGHT)
    second, _ = model.fit(shuffled, TIGHT)
    np.testing.assert_allclose(first.params, second.params, atol=1e-8)


def test_data_free_node_prediction():
    data = poisson_records([1.0, 9.0, 5.0], per_node=20, skip=(1,))
    fitted, _ = StratifiedModel(make_loss('poisson-dist'), None, make_path(3)).fit(data, TIGHT)
    dist = fitted.predict('1')
    assert dist.mean() == pytest.approx((fitted.params[0, 0] + fitted.params[2, 0]) / 2, abs=1e-5)


def test_training_anll_grows_with_edge_weight():
    data = poisson_records([0.5, 1.0, 2.0, 6.0, 3.0, 1.5, 0.8], per_node=8, seed=2)
    model = StratifiedModel(make_loss('poisson-dist'), None, make_cycle(7))
    scores = []
    for w in (0.01, 0.1, 1.0, 10.0, 100.0):
        fitted, _ = model.with_params({'graph.scale': w}).fit(data, TIGHT)
        scores.append(fitted.score(data, 'anll'))
    assert all(b >= a - 1e-6 for a, b in zip(scores, scores[1:]))


def test_stratified_beats_separate_and_common_on_smooth_grid():
    _, train, sample = smooth_bernoulli_grid(n_side=10, per_node=10, seed=0)
    test = sample(50, 1)
    grid = make_grid([10, 10])
    loss = make_loss('bernoulli-dist')

    def test_anll(g):
        fitted, _ = StratifiedModel(loss, None, g).fit(train)
        return fitted.score(test, 'anll')

    with pytest.warns(DisconnectedGraphWarning):
        separate = test_anll(scale(grid, 0))
    common = test_anll(scale(grid, 1e4))
    stratified = test_anll(scale(grid, 2.0))
    assert stratified < separate
    assert stratified < common


def test_perfect_regression_has_zero_rmse():
    x = np.linspace(-1, 1, 8).reshape(-1, 1)
    data = Dataset([str(i % 2) for i in range(8)], x, 2 * x[:, 0] + 1, ['node'], ['x'])
    model = StratifiedModel(make_loss('square-regression'), None, make_path(2), intercept=True)
    fitted, _ = model.fit(data, TIGHT)
    assert fitted.score(data, 'rmse') < 1e-4
    np.testing.assert_allclose(fitted.predict_dataset(data), data.outcomes, atol=1e-4)


def test_standardized_features_round_trip_through_prediction():
    g = np.random.default_rng(3)
    x = g.normal(loc=5.0, scale=3.0, size=(30, 2))
    y = x @ np.array([1.0, -2.0]) + 4.0
    data = Dataset([str(i % 3) for i in range(30)], x, y, ['node'])
    model = StratifiedModel(make_loss('square-regression'), None, make_path(3),
                            standardize=True, intercept=True)
    fitted, _ = model.fit(data, TIGHT)
    assert fitted.standardization.means == pytest.approx(x.mean(axis=0))
    assert fitted.predict('2', x[2]) == pytest.approx(y[2], abs=1e-4)


def test_anll_score_delegates_to_pooled_average():
    data = poisson_records([1.0, 2.0, 3.0], per_node=10)
    fitted, _ = StratifiedModel(make_loss('poisson-dist'), None, make_path(3)).fit(data)
    expected = score_anll(fitted.loss, fitted.params, fitted.node_data(data))
    assert fitted.score(data) == expected


def test_logistic_accepts_zero_one_labels():
    g = np.random.default_rng(4)
    x = g.normal(size=(40, 2))
    y = (x[:, 0] > 0).astype(float)
    data = Dataset([str(i % 2) for i in range(40)], x, y, ['node'])
    model = StratifiedModel(make_loss('logistic'), Regularizer('sum-squares', gamma=0.1), make_path(2))
    fitted, _ = model.fit(data)
    assert fitted.score(data, 'error') < 0.2


def test_unfitted_model_cannot_predict():
    model = StratifiedModel(make_loss('poisson-dist'), None, make_path(2))
    with pytest.raises(NotFittedError):
        model.predict('0')
    with pytest.raises(NotFittedError):
        model.score(poisson_records([1.0, 1.0], 2))


def test_prediction_rejects_unknown_node():
    model = StratifiedModel(make_loss('poisson-dist'), None, make_path(2))
    fitted, _ = model.fit(poisson_records([1.0, 2.0], 3))
    with pytest.raises(UnknownNodeError):
        fitted.predict('5')


def test_with_params_overrides():
    spec = {'type': 'path', 'K': 3, 'w': 1.0}
    model = build_model({'kind': 'poisson-dist'}, {'kind': 'sum-squares', 'gamma': 1.0}, spec)
    changed = model.with_params({'reg.gamma': 0.25, 'graph.w': 4.0, 'solver.max_iter': 10})
    assert changed.reg.gamma == 0.25
    assert {w for _, _, w in changed.graph.edges} == {4.0}
    assert model.reg.gamma == 1.0
    doubled = model.with_params({'graph.scale': 2.0})
    assert {w for _, _, w in doubled.graph.edges} == {2.0}
    assert model.with_params({'loss.eps': 1e-3}).loss.eps == 1e-3
    with pytest.raises(StratFitError):
        model.with_params({'reg.weight': 1.0})
    with pytest.raises(StratFitError):
        model.with_params({'graph.K': 4})
    with pytest.raises(StratFitError):
        model.with_params({'alpha': 1.0})


def test_build_model_rejects_unknown_options():
    with pytest.raises(StratFitError):
        build_model({'kind': 'poisson-dist'}, None, {'type': 'path', 'K': 2}, {'center': True})
    with pytest.raises(StratFitError):
        build_model({'kind': 'hinge'}, None, {'type': 'path', 'K': 2})


def test_cross_validation_is_deterministic():
    data = poisson_records([1.0, 2.0, 4.0, 3.0], per_node=10)
    model = StratifiedModel(make_loss('poisson-dist'), None, make_path(4))
    grid = [{'graph.scale': 0.1}, {'graph.scale': 1.0}, {'graph.scale': 1.0}]
    first = cross_validate(model, data, grid, folds=3, seed=7)
    second = cross_validate(model, data, grid, folds=3, seed=7)
    assert first.to_frame().equals(second.to_frame())
    assert len(first.rows) == 3
    assert all(len(row.scores) == 3 for row in first.rows)
    for a, b in zip(first.rows[1].scores, first.rows[2].scores):
        assert b == pytest.approx(a, abs=1e-9)
    frame = first.to_frame()
    assert frame['best'].sum() == 1
    assert {'cell', 'mean', 'std', 'fold0', 'flagged', 'converged'} <= set(frame.columns)


def test_stratified_folds_spread_every_node():
    data = poisson_records([1.0, 2.0, 4.0], per_node=6)
    model = StratifiedModel(make_loss('poisson-dist'), None, make_path(3))
    result = cross_validate(model, data, [{'graph.scale': 1.0}], folds=3, seed=0, stratify=True)
    assert not result.rows[0].flagged
    assert all(math.isfinite(s) for s in result.rows[0].scores)


def test_cross_validation_needs_a_grid():
    model = StratifiedModel(make_loss('poisson-dist'), None, make_path(2))
    with pytest.raises(StratFitError):
        cross_validate(model, poisson_records([1.0, 1.0], 4), [])


def test_holdout_validation():
    data = poisson_records([1.0, 2.0, 4.0], per_node=10)
    model = StratifiedModel(make_loss('poisson-dist'), None, make_path(3))
    result = holdout_validate(model, data, [{'graph.scale': 0.5}, {'graph.scale': 5.0}], fraction=0.3, seed=1)
    assert result.folds == 1
    assert [len(r.scores) for r in result.rows] == [1, 1]
    assert 0 <= result.best < 2


def test_repeated_cell_reuses_its_score_under_holdout():
    data = poisson_records([1.0, 2.0, 4.0, 3.0], per_node=10)
    model = StratifiedModel(make_loss('poisson-dist'), None, make_path(4))
    grid = [{'graph.scale': 1.0}, {'graph.scale': 0.1}, {'graph.scale': 1.0}]
    result = holdout_validate(model, data, grid, fraction=0.3, seed=2)
    assert result.rows[2].scores[0] == pytest.approx(result.rows[0].scores[0], abs=1e-9)


def test_cross_validation_fixes_category_count_from_all_records():
    data = Dataset([str(i % 2) for i in range(10)], None, [1, 2, 1, 2, 1, 2, 1, 2, 1, 3], ['node'])
    model = StratifiedModel(make_loss('discrete-dist'), None, make_path(2))
    result = cross_validate(model, data, [{'graph.scale': 1.0}], folds=2, seed=0)
    assert len(result.rows[0].scores) == 2
    held = holdout_validate(model, data, [{'graph.scale': 1.0}], fraction=0.5, seed=0)
    assert len(held.rows[0].scores) == 1
    assert model.with_categories(data).loss.classes == 3
    assert model.loss.classes is None


def test_multinomial_intercepts_are_not_shrunk():
    g = np.random.default_rng(8)
    counts = (27, 92, 281)
    y = np.repeat([1.0, 2.0, 3.0], counts)
    x = g.normal(size=(len(y), 1))
    data = Dataset(['0'] * len(y), x, y, ['node'])
    reg = Regularizer('sum-squares', gamma=1e4, skip_intercept=True)
    model = StratifiedModel(make_loss('multinomial-logistic'), reg, make_path(1), intercept=True)
    fitted, _ = model.fit(data, SolverConfig(max_iter=2000))
    query = Dataset(['0'], np.zeros((1, 1)), [1.0], ['node'])
    proba = fitted.predict_proba(query)
    assert list(proba.columns) == ['p(1)', 'p(2)', 'p(3)']
    np.testing.assert_allclose(proba.to_numpy()[0], np.array(counts) / len(y), atol=5e-3)
    # slopes are shrunk to zero
    assert np.all(np.abs(fitted.node_params('0')[0]) < 1e-2)
    assert fitted.reg.intercept == (-1,)


def test_logistic_class_probabilities():
    g = np.random.default_rng(9)
    x = g.normal(size=(60, 1))
    y = np.where(x[:, 0] + 0.3 * g.normal(size=60) > 0, 1.0, -1.0)
    data = Dataset([str(i % 2) for i in range(60)], x, y, ['node'])
    model = StratifiedModel(make_loss('logistic'), Regularizer('sum-squares', gamma=0.1), make_path(2))
    fitted, _ = model.fit(data)
    proba = fitted.predict_proba(data)
    assert list(proba.columns) == ['p(-1)', 'p(1)']
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    predicted = np.where(proba['p(1)'] >= 0.5, 1.0, -1.0)
    np.testing.assert_array_equal(predicted, fitted.predict_dataset(data))


def test_class_probabilities_need_a_classifier():
    fitted, _ = StratifiedModel(make_loss('poisson-dist'), None, make_path(2)).fit(poisson_records([1.0, 2.0], 3))
    with pytest.raises(DataError):
        fitted.predict_proba(poisson_records([1.0, 2.0], 1))


def test_exponential_prediction_is_a_distribution():
    g = np.random.default_rng(10)
    x = g.normal(size=(50, 1))
    y = g.exponential(scale=np.exp(-0.5 * x[:, 0]))
    data = Dataset(['0'] * 50, x, y, ['node'])
    model = StratifiedModel(make_loss('exponential-regression'), None, make_path(1), intercept=True)
    fitted, _ = model.fit(data)
    dist = fitted.predict('0', [0.4])
    point = fitted.predict_dataset(Dataset(['0'], np.array([[0.4]]), [0.0], ['node']))[0]
    assert dist.mean() == pytest.approx(point)
    assert dist.pdf(-1.0) == 0.0


def test_validate_fits_and_scores():
    train = poisson_records([1.0, 3.0], per_node=10, seed=0)
    test = poisson_records([1.0, 3.0], per_node=5, seed=1)
    model = StratifiedModel(make_loss('poisson-dist'), None, make_path(2))
    fitted, report, value = model.validate(train, test, 'anll', TIGHT)
    assert report.converged
    assert value == fitted.score(test, 'anll')


def test_every_unknown_key_is_reported():
    fitted, _ = StratifiedModel(make_loss('poisson-dist'), None, make_path(2)).fit(poisson_records([1.0, 2.0], 3))
    queries = Dataset(['0', '7', '1', '9', '7'], None, [1.0] * 5, ['node'])
    with pytest.raises(UnknownNodeError) as info:
        fitted.predict_dataset(queries)
    assert info.value.keys == [('7',), ('9',)]
    assert "'9'" in str(info.value)
    with pytest.raises(UnknownNodeError) as info:
        fitted.score(queries)
    assert info.value.keys == [('7',), ('9',)]


def test_relabeling_nodes_permutes_parameters():
    data = poisson_records([1.0, 5.0, 2.0, 8.0, 3.0], per_node=6, seed=4)
    graph = StratGraph(tuple(str(k) for k in range(5)), ((0, 1, 1.0), (1, 2, 2.0), (2, 3, 0.5), (3, 4, 1.5)))
    order = [3, 0, 4, 1, 2]
    position = {old: new for new, old in enumerate(order)}
    relabeled = StratGraph(tuple(str(k) for k in order),
                           tuple((position[i], position[j], w) for i, j, w in graph.edges))
    loss = make_loss('poisson-dist')
    first, _ = StratifiedModel(loss, None, graph).fit(data, TIGHT)
    second, _ = StratifiedModel(loss, None, relabeled).fit(data, TIGHT)
    for k in range(5):
        np.testing.assert_allclose(second.params[position[k]], first.params[k], atol=1e-6)
