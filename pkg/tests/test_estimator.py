import numpy as np
import pytest
from sklearn.base import clone

from pointclimb.data import generate_synthetic_classes
from pointclimb.estimator import IncrementalPointCloudClassifier, check_point_clouds
from pointclimb.exceptions import InvalidArgumentError


@pytest.fixture(scope="module")
def data():
    return generate_synthetic_classes(4, 10, 32, seed=2)


def _small(**kw):
    return IncrementalPointCloudClassifier(epochs=2, n_points=24, widths=[8, 16], **kw)


def test_params_roundtrip():
    est = _small(loss="lwf", tau=3.0)
    params = est.get_params()
    assert params["loss"] == "lwf" and params["tau"] == 3.0
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(lr=0.01)
    assert est.lr == 0.01


def test_fit_then_partial_fit(data):
    train, test = data
    first, second = train.select_classes([0, 1]), train.select_classes([2, 3])
    est = _small().fit(first.points, first.labels)
    assert list(est.classes_) == [0, 1] and est.n_tasks_ == 1
    est.partial_fit(second.points, second.labels)
    assert list(est.classes_) == [0, 1, 2, 3] and est.task_sizes_ == [2, 2]
    proba = est.predict_proba(test.points)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert set(est.predict(test.points)) <= {0, 1, 2, 3}
    assert est.decision_function(test.points).shape == (len(test), 4)
    assert est.transform(test.points).shape == (len(test), 16)
    assert 0.0 <= est.score(test.points, test.labels) <= 1.0


def test_partial_fit_rejects_seen_classes(data):
    train, _ = data
    est = _small().fit(train.points, train.labels)
    with pytest.raises(InvalidArgumentError):
        est.partial_fit(train.points[:2], train.labels[:2])


def test_fit_restarts(data):
    train, _ = data
    a = train.select_classes([0, 1])
    est = _small().fit(a.points, a.labels)
    b = train.select_classes([2, 3])
    est.fit(b.points, b.labels)
    assert list(est.classes_) == [2, 3]


def test_deterministic(data):
    train, test = data
    a = _small().fit(train.points, train.labels).decision_function(test.points)
    b = _small().fit(train.points, train.labels).decision_function(test.points)
    assert np.array_equal(a, b)


def test_unfitted_raises(data):
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        _small().predict(data[1].points)


def test_joint_is_not_incremental(data):
    with pytest.raises(InvalidArgumentError):
        _small(loss="joint").fit(data[0].points, data[0].labels)


def test_check_point_clouds():
    assert check_point_clouds([[[0, 0, 0], [1, 1, 1]]]).dtype == np.float64
    with pytest.raises(InvalidArgumentError):
        check_point_clouds(np.zeros((2, 5, 2)))
    with pytest.raises(ValueError):
        check_point_clouds(np.full((1, 3, 3), np.nan))


def test_label_count_mismatch(data):
    with pytest.raises(InvalidArgumentError):
        _small().fit(data[0].points, data[0].labels[:-1])
