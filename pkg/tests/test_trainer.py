import numpy as np
import pytest

from pointclimb.backbones import build_model
from pointclimb.data import DataProvider, PointSet, TaskDataset, generate_synthetic_classes
from pointclimb.exceptions import InvalidArgumentError
from pointclimb.harness import evaluate_union, run_scenario
from pointclimb.losses import DistillConfig
from pointclimb.sampler import fixed_scenario
from pointclimb.trainer import (
    TrainConfig,
    advance_task,
    desk_config,
    predict_logits,
    start_run,
    train_base,
    train_joint,
)


@pytest.fixture(scope="module")
def four_classes():
    return generate_synthetic_classes(4, 20, 64, seed=0)


def _task(data, index, classes):
    train, test = data
    return TaskDataset(index, list(classes), train.select_classes(classes),
                       test.select_classes(classes))


def _cfg(**kw):
    kw.setdefault("epochs", 3)
    kw.setdefault("n_points", 48)
    kw.setdefault("widths", [16, 32])
    return desk_config(**kw)


def _accuracy(model, split):
    pred = np.argmax(predict_logits(model, split.points), axis=1)
    slots = np.array(model.head.class_slots)
    return float(np.mean(slots[pred] == split.labels))


def test_separable_pair_fits_training_data():
    train, _ = generate_synthetic_classes(6, 20, 64, seed=1)
    pair = train.select_classes([0, 5])  # sphere and plane
    model = train_base(TaskDataset(0, [0, 5], pair, None), desk_config(epochs=40))
    assert _accuracy(model, pair) >= 0.99


def test_zero_epochs_returns_initialisation(four_classes):
    cfg = _cfg(epochs=0, seed=4)
    model = train_base(_task(four_classes, 0, [0, 1]), cfg)
    fresh = build_model(cfg.backbone, [0, 1], cfg.layer_widths, cfg.aggregation,
                        cfg.k_neighbors, cfg.seed)
    assert model.checksum() == fresh.checksum()


@pytest.mark.parametrize("backbone", ["pointnet_lite", "edgeconv_lite"])
def test_training_is_deterministic(four_classes, backbone):
    cfg = _cfg(backbone=backbone, widths=[8, 8], epochs=2, n_points=24)
    a = train_base(_task(four_classes, 0, [2, 3]), cfg)
    b = train_base(_task(four_classes, 0, [2, 3]), cfg)
    assert a.checksum() == b.checksum()
    assert a.loss_history == b.loss_history


def test_loss_decreases(four_classes):
    model = train_base(_task(four_classes, 0, [0, 1, 2, 3]), _cfg(epochs=8))
    assert model.loss_history[-1] < model.loss_history[0]


def test_advance_with_zero_epochs_copies_teacher(four_classes):
    state = start_run(_task(four_classes, 0, [0, 1]), _cfg())
    nxt = advance_task(state, _task(four_classes, 1, [2, 3]), _cfg(epochs=0))
    pts = four_classes[1].points
    assert np.array_equal(predict_logits(nxt.student, pts)[:, :2],
                          predict_logits(nxt.teacher, pts))
    assert nxt.student.head.class_slots == [0, 1, 2, 3]


@pytest.mark.parametrize("loss", ["ft", "lwf", "census"])
def test_teacher_stays_frozen(four_classes, loss):
    cfg = _cfg(loss=DistillConfig(loss_kind=loss))
    state = start_run(_task(four_classes, 0, [0, 1]), cfg)
    before = state.student.checksum()
    nxt = advance_task(state, _task(four_classes, 1, [2, 3]), cfg)
    assert nxt.teacher.checksum() == before
    assert nxt.student.checksum() != before
    assert nxt.teacher.frozen and not nxt.student.frozen


def test_advance_rejects_overlap_and_joint(four_classes):
    state = start_run(_task(four_classes, 0, [0, 1]), _cfg())
    with pytest.raises(InvalidArgumentError):
        advance_task(state, _task(four_classes, 1, [1, 2]), _cfg())
    with pytest.raises(InvalidArgumentError):
        advance_task(state, _task(four_classes, 1, [2, 3]), _cfg(loss=DistillConfig(loss_kind="joint")))


def test_empty_training_set():
    empty = PointSet(np.zeros((0, 8, 3)), np.zeros(0, dtype=np.int64), [])
    with pytest.raises(InvalidArgumentError):
        train_base(TaskDataset(0, [0], empty, None), _cfg())
    with pytest.raises(InvalidArgumentError):
        train_joint([], _cfg())


def test_census_matches_lwf_at_equal_weight(four_classes):
    # first incremental task of [2, 2]: eta * T = 2 * 1
    runs = []
    for loss in (DistillConfig(loss_kind="lwf", lambda_lwf=2.0), DistillConfig(loss_kind="census")):
        cfg = _cfg(loss=loss)
        state = start_run(_task(four_classes, 0, [0, 1]), cfg)
        runs.append(advance_task(state, _task(four_classes, 1, [2, 3]), cfg).student)
    lwf, census = runs
    np.testing.assert_allclose(lwf.loss_history, census.loss_history, rtol=0, atol=1e-12)
    for p, q in zip(lwf.parameters(), census.parameters()):
        np.testing.assert_allclose(p.data, q.data, rtol=0, atol=1e-10)


def test_joint_on_one_task_equals_base(four_classes):
    cfg = _cfg()
    task = _task(four_classes, 0, [1, 3])
    assert train_joint([task], cfg).checksum() == train_base(task, cfg).checksum()


def test_joint_on_pooled_classes_is_accurate():
    train, test = generate_synthetic_classes(4, 40, 128, seed=0)
    sc = fixed_scenario([2, 2], seed=0, num_classes=4)
    tasks = [TaskDataset(t, c, train.select_classes(c), None) for t, c in enumerate(sc.tasks)]
    model = train_joint(tasks, desk_config(epochs=20))
    acc, _, _ = evaluate_union(model, [test])
    assert acc >= 0.90


def _two_task_breakdown(loss, seed):
    train, test = generate_synthetic_classes(4, 40, 128, seed=0)
    provider = DataProvider.from_scenario(train, test, fixed_scenario([2, 2], seed, num_classes=4))
    _, matrix = run_scenario(provider, desk_config(seed=seed, loss=DistillConfig(loss_kind=loss)))
    return matrix.breakdown[-1][0]


def test_fine_tuning_forgets_the_first_task():
    assert np.mean([_two_task_breakdown("ft", s) for s in range(3)]) <= 0.1


def test_census_retains_more_of_the_first_task_than_fine_tuning():
    census = np.mean([_two_task_breakdown("census", s) for s in range(3)])
    ft = np.mean([_two_task_breakdown("ft", s) for s in range(3)])
    assert census > ft


def test_config_roundtrip():
    cfg = desk_config(backbone="edgeconv_lite", seed=3, loss=DistillConfig(tau=4.0, loss_kind="lwf"))
    back = TrainConfig.from_dict(cfg.to_dict())
    assert back.to_dict() == cfg.to_dict()
    with pytest.raises(InvalidArgumentError):
        desk_config(lr=0).validate()
