"""Forward/backward math, optimizers, early stopping, model files."""

import math
from dataclasses import replace

import numpy as np
import numpy.testing as npt
import pytest

from thermoseg import features, nn, tsr
from thermoseg.errors import ComputeError, ValidationError


def _zero_model(sizes=(4, 4), activations=None):
    activations = activations or ("softmax",) * (len(sizes) - 1)
    weights = tuple(np.zeros((a, b)) for a, b in zip(sizes, sizes[1:]))
    biases = tuple(np.zeros(b) for b in sizes[1:])
    return nn.MlpModel(tuple(sizes), tuple(activations), weights, biases)


def _blob_dataset(n_per_class, centers, sigma, seed, classes=None):
    rng = np.random.default_rng(seed)
    chunks = []
    labels = []
    for i, center in enumerate(centers):
        chunks.append(rng.normal(center, sigma, size=(n_per_class,
                                                      len(center))))
        labels.append(np.full(n_per_class, i))
    vectors = np.concatenate(chunks)
    labels = np.concatenate(labels)
    order = rng.permutation(vectors.shape[0])
    classes = classes or len(centers)
    return features.Dataset(vectors[order], labels[order], classes,
                            np.full((vectors.shape[0], 2), -1))


# ---------------------------------------------------------------------------
# forward pass and loss
# ---------------------------------------------------------------------------

def test_zero_model_is_uniform():
    model = _zero_model((3, 4))
    probs = nn.forward(model, np.array([0.3, -2.0, 5.0]))
    npt.assert_allclose(probs, 0.25)


def test_forward_rows_are_probability_vectors():
    model = nn.init_model((5, 10, 20, 4), ("tanh", "tanh", "softmax"), 3)
    rng = np.random.default_rng(0)
    probs = nn.forward(model, rng.normal(scale=3.0, size=(1000, 5)))
    assert probs.shape == (1000, 4)
    assert probs.min() >= 0.0
    npt.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def test_forward_single_matches_batch():
    model = nn.init_model((6, 8, 3), ("relu", "softmax"), 1)
    rng = np.random.default_rng(2)
    batch = rng.normal(size=(7, 6))
    stacked = nn.forward(model, batch)
    for i in range(7):
        # single-row and batched matmuls may differ in the last ulp
        npt.assert_allclose(nn.forward(model, batch[i]), stacked[i],
                            rtol=1e-13, atol=1e-16)


def test_forward_validation():
    model = _zero_model((3, 2))
    with pytest.raises(ValidationError):
        nn.forward(model, np.zeros(4))
    broken = replace(model, weights=(np.full((3, 2), np.nan),))
    with pytest.raises(ComputeError):
        nn.forward(broken, np.zeros(3))


def test_loss_reference_values():
    uniform = np.full((6, 4), 0.25)
    labels = np.array([0, 1, 2, 3, 0, 1])
    npt.assert_allclose(nn.loss(uniform, labels), math.log(4.0), rtol=1e-15)

    perfect = np.eye(3)[np.array([2, 0, 1])]
    assert nn.loss(perfect, np.array([2, 0, 1])) == 0.0

    # a confident miss is clipped at the probability floor
    wrong = np.array([[1.0, 0.0, 0.0]])
    npt.assert_allclose(nn.loss(wrong, np.array([1])),
                        -math.log(nn.PROB_FLOOR), rtol=1e-15)


def test_loss_accepts_one_hot():
    rng = np.random.default_rng(8)
    probs = rng.dirichlet(np.ones(5), size=20)
    labels = rng.integers(0, 5, 20)
    one_hot = np.eye(5)[labels]
    npt.assert_allclose(nn.loss(probs, one_hot), nn.loss(probs, labels),
                        rtol=1e-15)
    single = nn.loss(probs[0], one_hot[0])
    npt.assert_allclose(single, nn.loss(probs[:1], labels[:1]), rtol=1e-15)


def test_accuracy():
    probs = np.array([[0.7, 0.3], [0.2, 0.8], [0.6, 0.4], [0.1, 0.9]])
    assert nn.accuracy(probs, np.array([0, 1, 1, 1])) == 0.75


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def _loss_with_bump(model, x, y, layer, kind, index, bump):
    params = list(getattr(model, kind))
    bumped = params[layer].copy()
    bumped[index] += bump
    params[layer] = bumped
    model = replace(model, **{kind: tuple(params)})
    return nn.loss(nn.forward(model, x), y)


def _check_gradients(model, x, y, n_checks, seed, h=1e-5, atol=1e-6):
    grads_w, grads_b = nn.backward(model, x, y)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_checks):
        layer = int(rng.integers(0, len(model.weights)))
        if rng.uniform() < 0.8:
            kind, grads = "weights", grads_w
            index = (int(rng.integers(0, model.weights[layer].shape[0])),
                     int(rng.integers(0, model.weights[layer].shape[1])))
        else:
            kind, grads = "biases", grads_b
            index = (int(rng.integers(0, model.biases[layer].shape[0])),)
        up = _loss_with_bump(model, x, y, layer, kind, index, h)
        down = _loss_with_bump(model, x, y, layer, kind, index, -h)
        numeric = (up - down) / (2.0 * h)
        worst = max(worst, abs(numeric - grads[layer][index]))
    assert worst < atol


def test_gradients_match_finite_differences_tanh():
    model = nn.init_model((15, 10, 20, 4), ("tanh", "tanh", "softmax"), 11)
    rng = np.random.default_rng(12)
    x = rng.normal(size=(8, 15))
    y = rng.integers(0, 4, 8)
    _check_gradients(model, x, y, n_checks=60, seed=13)


def test_gradients_match_finite_differences_relu():
    model = nn.init_model((9, 16, 32, 16, 2), ("relu", "relu", "relu",
                                               "softmax"), 21)
    rng = np.random.default_rng(22)
    x = rng.normal(size=(8, 9))
    y = rng.integers(0, 2, 8)
    _check_gradients(model, x, y, n_checks=60, seed=23)


def test_softmax_bias_gradient_closed_form():
    # with no hidden layer the output bias gradient is mean(P - Y)
    model = nn.init_model((5, 3), ("softmax",), 4)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(32, 5))
    y = rng.integers(0, 3, 32)
    probs = nn.forward(model, x)
    expect = probs.copy()
    expect[np.arange(32), y] -= 1.0
    _, grads_b = nn.backward(model, x, y)
    npt.assert_allclose(grads_b[0], expect.mean(axis=0), rtol=1e-12)


def test_gradient_batch_duplication_invariance():
    # the mean-loss gradient must not change when the batch is doubled
    model = nn.init_model((6, 8, 3), ("tanh", "softmax"), 9)
    rng = np.random.default_rng(10)
    x = rng.normal(size=(10, 6))
    y = rng.integers(0, 3, 10)
    gw1, gb1 = nn.backward(model, x, y)
    gw2, gb2 = nn.backward(model, np.concatenate([x, x]),
                           np.concatenate([y, y]))
    for a, b in zip(gw1 + gb1, gw2 + gb2):
        npt.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_backward_validation():
    model = _zero_model((3, 2))
    with pytest.raises(ValidationError):
        nn.backward(model, np.zeros((0, 3)), np.zeros(0, dtype=int))
    with pytest.raises(ValidationError):
        nn.backward(model, np.zeros(3), np.zeros(1, dtype=int))


# ---------------------------------------------------------------------------
# schedules and early stopping
# ---------------------------------------------------------------------------

def test_lr_staircase():
    config = nn.TrainConfig(optimizer="sgd-decay", learning_rate=1e-7,
                            decay_step=1000, decay_rate=0.9, epochs=1)
    assert nn.lr_at(config, 0) == 1e-7
    assert nn.lr_at(config, 999) == 1e-7
    npt.assert_allclose(nn.lr_at(config, 1000), 9e-8, rtol=1e-15)
    npt.assert_allclose(nn.lr_at(config, 2500), 8.1e-8, rtol=1e-15)
    with pytest.raises(ValidationError):
        nn.lr_at(config, -1)


def test_lr_constant_for_adam():
    config = nn.TrainConfig(optimizer="adam", learning_rate=1e-5, epochs=1)
    assert nn.lr_at(config, 0) == nn.lr_at(config, 10 ** 6) == 1e-5


def test_adam_first_step_magnitude():
    # bias-corrected adam moves every parameter by ~lr on the first step
    ds = _blob_dataset(16, [(-2.0, 0.0), (2.0, 0.5)], 0.5, seed=1)
    model = nn.init_model((2, 4, 2), ("tanh", "softmax"), 2)
    config = nn.TrainConfig(optimizer="adam", learning_rate=1e-3,
                            batch_size=32, epochs=1, max_steps=1)
    trained, _ = nn.train(model, ds, ds, config)
    for before, after in zip(model.weights, trained.weights):
        delta = np.abs(after - before)
        assert delta.max() <= 1e-3 * 1.001
        assert delta.max() >= 1e-3 * 0.9


def test_train_config_validation():
    with pytest.raises(ValidationError):
        nn.TrainConfig(optimizer="momentum")
    with pytest.raises(ValidationError):
        nn.TrainConfig(learning_rate=0.0)
    with pytest.raises(ValidationError):
        nn.TrainConfig(batch_size=0)
    with pytest.raises(ValidationError):
        nn.TrainConfig(optimizer="sgd-decay", decay_rate=0.0)
    with pytest.raises(ValidationError):
        nn.TrainConfig(early_stopping=(0, 3))


def test_early_stopping_consecutive_increases():
    stopper = nn.EarlyStopping(1, 3)
    assert not stopper.update(1, 0.50, "snap-1")
    assert not stopper.update(2, 0.52, "snap-2")
    assert not stopper.update(3, 0.55, "snap-3")
    assert stopper.update(4, 0.58, "snap-4")
    assert stopper.snapshot == "snap-1"
    assert stopper.snapshot_step == 1


def test_early_stopping_reset_on_improvement():
    stopper = nn.EarlyStopping(1, 2)
    seen = [0.50, 0.52, 0.49, 0.52, 0.53]
    halts = [stopper.update(i, v, f"s{i}") for i, v in enumerate(seen)]
    assert halts == [False, False, False, False, True]
    assert stopper.snapshot == "s2"


def test_early_stopping_equal_loss_is_no_increase():
    stopper = nn.EarlyStopping(1, 1)
    assert not stopper.update(0, 0.5, "a")
    assert not stopper.update(1, 0.5, "b")
    assert stopper.snapshot == "b"
    assert stopper.update(2, 0.6, "c")
    assert stopper.snapshot == "b"


# ---------------------------------------------------------------------------
# training runs
# ---------------------------------------------------------------------------

def test_training_separates_blobs():
    train_ds = _blob_dataset(200, [(-1.5, -1.5), (1.5, 1.5)], 0.4, seed=30)
    val_ds = _blob_dataset(50, [(-1.5, -1.5), (1.5, 1.5)], 0.4, seed=31)
    model = nn.init_model((2, 16, 32, 16, 2),
                          ("relu", "relu", "relu", "softmax"), 32)
    config = nn.TrainConfig(optimizer="sgd-decay", learning_rate=0.05,
                            decay_step=1000, decay_rate=0.9, batch_size=64,
                            epochs=120, seed=33)
    trained, trace = nn.train(model, train_ds, val_ds, config)
    _, acc = nn.evaluate(trained, val_ds.vectors, val_ds.labels)
    assert acc >= 0.99
    assert trace.train_loss[-1] < trace.train_loss[0]
    assert trace.stop_reason == "epoch-budget"


def test_tanh_architecture_also_learns():
    train_ds = _blob_dataset(150, [(-1.0, 0.0), (1.0, 0.0), (0.0, 1.5)],
                             0.25, seed=40)
    val_ds = _blob_dataset(40, [(-1.0, 0.0), (1.0, 0.0), (0.0, 1.5)],
                           0.25, seed=41)
    model = nn.init_model((2, 10, 20, 3), ("tanh", "tanh", "softmax"), 42)
    config = nn.TrainConfig(optimizer="adam", learning_rate=3e-3,
                            batch_size=64, epochs=120, seed=43)
    trained, _ = nn.train(model, train_ds, val_ds, config)
    _, acc = nn.evaluate(trained, val_ds.vectors, val_ds.labels)
    assert acc >= 0.99
    preds = nn.forward(trained, val_ds.vectors).argmax(axis=1)
    assert np.unique(preds).size == 3      # no collapsed constant solution


def test_training_is_deterministic():
    ds = _blob_dataset(60, [(-1.0, 0.0), (1.0, 0.0)], 0.6, seed=50)
    model = nn.init_model((2, 8, 2), ("tanh", "softmax"), 51)
    config = nn.TrainConfig(optimizer="adam", learning_rate=1e-3,
                            batch_size=16, epochs=10, seed=52)
    m1, t1 = nn.train(model, ds, ds, config)
    m2, t2 = nn.train(model, ds, ds, config)
    for a, b in zip(m1.weights, m2.weights):
        npt.assert_array_equal(a, b)
    assert t1.val_loss == t2.val_loss


def test_train_does_not_mutate_input_model():
    ds = _blob_dataset(40, [(-1.0, 0.0), (1.0, 0.0)], 0.5, seed=60)
    model = nn.init_model((2, 6, 2), ("relu", "softmax"), 61)
    frozen = [w.copy() for w in model.weights]
    nn.train(model, ds, ds, nn.TrainConfig(optimizer="adam",
                                           learning_rate=1e-3,
                                           batch_size=16, epochs=3))
    for a, b in zip(model.weights, frozen):
        npt.assert_array_equal(a, b)


def test_early_stopping_restores_snapshot():
    # overlapping blobs with a hot learning rate force val-loss churn
    train_ds = _blob_dataset(120, [(-0.3, 0.0), (0.3, 0.0)], 1.0, seed=70)
    val_ds = _blob_dataset(60, [(-0.3, 0.0), (0.3, 0.0)], 1.0, seed=71)
    model = nn.init_model((2, 12, 2), ("tanh", "softmax"), 72)
    config = nn.TrainConfig(optimizer="adam", learning_rate=0.05,
                            batch_size=16, epochs=400,
                            early_stopping=(4, 2), seed=73)
    trained, trace = nn.train(model, train_ds, val_ds, config)
    assert trace.stop_reason == "early-stopping"
    assert trace.restored_step is not None
    assert trace.restored_step < trace.steps[-1]

    final_loss, _ = nn.evaluate(trained, val_ds.vectors, val_ds.labels)
    at_restore = trace.val_loss[trace.steps.index(trace.restored_step)]
    npt.assert_allclose(final_loss, at_restore, rtol=1e-12)
    assert final_loss <= trace.val_loss[-1]


def test_train_budget_validation():
    ds = _blob_dataset(20, [(-1.0, 0.0), (1.0, 0.0)], 0.5, seed=80)
    model = nn.init_model((2, 4, 2), ("tanh", "softmax"), 81)
    with pytest.raises(ValidationError):
        nn.train(model, ds, ds, nn.TrainConfig(epochs=0, max_steps=0))
    wrong = nn.init_model((3, 4, 2), ("tanh", "softmax"), 82)
    with pytest.raises(ValidationError):
        nn.train(wrong, ds, ds, nn.TrainConfig(epochs=1))
    narrow = nn.init_model((2, 4, 1), ("tanh", "softmax"), 83)
    with pytest.raises(ValidationError):
        nn.train(narrow, ds, ds, nn.TrainConfig(epochs=1))


def test_max_steps_cuts_epoch_short():
    ds = _blob_dataset(64, [(-1.0, 0.0), (1.0, 0.0)], 0.5, seed=90)
    model = nn.init_model((2, 4, 2), ("tanh", "softmax"), 91)
    config = nn.TrainConfig(optimizer="adam", learning_rate=1e-3,
                            batch_size=16, epochs=100, max_steps=5)
    _, trace = nn.train(model, ds, ds, config)
    assert trace.stop_reason == "step-budget"
    assert trace.steps[-1] == 5


def test_param_count():
    model = nn.init_model((15, 10, 20, 4), ("tanh", "tanh", "softmax"), 0)
    assert nn.param_count(model) == 464
    small = nn.init_model((2, 3), ("softmax",), 0)
    assert nn.param_count(small) == 9


def test_trace_record_guards_step_order():
    trace = nn.TrainTrace()
    assert trace.record(5, 0, 1.0, 1.0, 0.5, 0.5)
    assert not trace.record(5, 0, 2.0, 2.0, 0.1, 0.1)
    assert not trace.record(4, 0, 2.0, 2.0, 0.1, 0.1)
    assert trace.steps == [5]


# ---------------------------------------------------------------------------
# prediction maps
# ---------------------------------------------------------------------------

def _feature_image(values, valid=None):
    height, width, length = values.shape
    if valid is None:
        valid = np.ones((height, width), dtype=bool)
    degree = length // 3 - 1
    return tsr.FeatureImage(width, height, degree, tsr.PACK_PADDED,
                            values, valid)


def test_predict_map_uniform_model_breaks_ties_low():
    rng = np.random.default_rng(7)
    image = _feature_image(rng.normal(size=(4, 5, 6)))
    model = _zero_model((6, 3))
    stats = features.ScalingStats(np.zeros(6), np.ones(6))
    label_map = nn.predict_map(model, image, stats)
    npt.assert_array_equal(label_map.labels, 0)
    assert label_map.valid.all()


def test_predict_map_propagates_invalid_pixels():
    rng = np.random.default_rng(8)
    valid = np.ones((4, 5), dtype=bool)
    valid[2, 3] = False
    valid[0, 0] = False
    image = _feature_image(rng.normal(size=(4, 5, 6)), valid)
    model = nn.init_model((6, 8, 3), ("tanh", "softmax"), 9)
    stats = features.ScalingStats(np.zeros(6), np.ones(6))
    label_map = nn.predict_map(model, image, stats)
    assert label_map.labels[2, 3] == nn.INVALID_LABEL
    assert label_map.labels[0, 0] == nn.INVALID_LABEL
    assert not label_map.valid[2, 3]
    assert label_map.valid[1, 1]
    assert label_map.labels[label_map.valid].max() < 3


def test_predict_map_scaling_equivariance():
    # doubling features and scaling stats together changes nothing
    rng = np.random.default_rng(10)
    values = rng.normal(size=(6, 7, 6))
    image = _feature_image(values)
    doubled = _feature_image(values * 2.0)
    model = nn.init_model((6, 8, 3), ("tanh", "softmax"), 11)
    stats = features.ScalingStats(np.full(6, 0.5), np.full(6, 2.0))
    stats2 = features.ScalingStats(np.full(6, 1.0), np.full(6, 4.0))
    a = nn.predict_map(model, image, stats)
    b = nn.predict_map(model, doubled, stats2)
    npt.assert_array_equal(a.labels, b.labels)


def test_predict_map_uses_model_stats():
    rng = np.random.default_rng(12)
    image = _feature_image(rng.normal(size=(3, 3, 6)))
    stats = features.ScalingStats(np.zeros(6), np.ones(6))
    bare = nn.init_model((6, 4, 2), ("tanh", "softmax"), 13)
    with pytest.raises(ValidationError):
        nn.predict_map(bare, image)
    carrying = replace(bare, stats=stats)
    a = nn.predict_map(carrying, image)
    b = nn.predict_map(bare, image, stats)
    npt.assert_array_equal(a.labels, b.labels)


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------

def test_model_round_trip(tmp_path):
    stats = features.ScalingStats(np.arange(5.0), np.arange(1.0, 6.0))
    model = nn.init_model((5, 10, 20, 4), ("tanh", "tanh", "softmax"), 14,
                          stats)
    path = tmp_path / "model.txt"
    nn.save_model(model, str(path))
    back = nn.load_model(str(path))
    assert back.layer_sizes == model.layer_sizes
    assert back.activations == model.activations
    npt.assert_array_equal(back.stats.mean, stats.mean)
    npt.assert_array_equal(back.stats.std, stats.std)
    rng = np.random.default_rng(15)
    x = rng.normal(size=(40, 5))
    npt.assert_array_equal(nn.forward(back, x), nn.forward(model, x))


def test_model_round_trip_without_stats(tmp_path):
    model = nn.init_model((3, 4, 2), ("relu", "softmax"), 16)
    path = tmp_path / "model.txt"
    nn.save_model(model, str(path))
    back = nn.load_model(str(path))
    assert back.stats is None
    x = np.random.default_rng(17).normal(size=(5, 3))
    npt.assert_array_equal(nn.forward(back, x), nn.forward(model, x))


def test_load_model_version_error(tmp_path):
    model = nn.init_model((3, 4, 2), ("relu", "softmax"), 18)
    path = tmp_path / "model.txt"
    nn.save_model(model, str(path))
    lines = path.read_text().splitlines(keepends=True)
    future = tmp_path / "future.txt"
    future.write_text("thermoseg-model v99\n" + "".join(lines[1:]))
    with pytest.raises(nn.ModelVersionError):
        nn.load_model(str(future))


def test_load_model_corrupt_files(tmp_path):
    model = nn.init_model((3, 4, 2), ("relu", "softmax"), 19)
    path = tmp_path / "model.txt"
    nn.save_model(model, str(path))
    lines = path.read_text().splitlines(keepends=True)

    truncated = tmp_path / "trunc.txt"
    truncated.write_text("".join(lines[:-3]))
    with pytest.raises(nn.ModelFormatError):
        nn.load_model(str(truncated))

    not_model = tmp_path / "не.txt"
    not_model.write_text("something\n")
    with pytest.raises(nn.ModelFormatError):
        nn.load_model(str(not_model))

    with pytest.raises(nn.ModelFormatError):
        nn.load_model(str(tmp_path / "missing.txt"))


def test_model_validation():
    with pytest.raises(ValidationError):
        _zero_model((3, 4, 2), ("softmax", "softmax"))
    with pytest.raises(ValidationError):
        _zero_model((3, 4, 2), ("relu", "tanh"))
    with pytest.raises(ValidationError):
        nn.MlpModel((3, 2), ("softmax",), (np.zeros((2, 2)),),
                    (np.zeros(2),))


def test_write_trace(tmp_path):
    trace = nn.TrainTrace()
    trace.record(10, 0, 1.5, 1.6, 0.4, 0.35)
    trace.record(20, 1, 1.2, 1.3, 0.6, 0.55)
    trace.stop_reason = "epoch-budget"
    path = tmp_path / "trace.csv"
    nn.write_trace(trace, str(path))
    lines = path.read_text().splitlines()
    assert lines[0] == "step,epoch,train_loss,val_loss,train_acc,val_acc"
    assert lines[1].startswith("10,0,1.5,1.6,")
    assert lines[-1] == "# stop: epoch-budget"
