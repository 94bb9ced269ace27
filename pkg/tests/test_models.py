import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustlab.data import Dataset, SyntheticSpec, make_synthetic
from robustlab.models import (
    Model, ModelError, ModelSpec, PairSet, TrainConfig, TrainingDiverged, build, evaluate_accuracy,
    load_checkpoint, loss, parameter_count, params_hash, predict_labels, save_checkpoint, train,
)
from robustlab.tensor import ComputationRecord, Tensor, grad_check, softmax_cross_entropy


def mlp(widths, activation="relu", seed=0):
    return Model.create(ModelSpec("mlp", widths, activation=activation), seed)


def unet(shape, depth=3, base=4):
    widths = [shape[0]] + [base * 2 ** i for i in range(depth)]
    return Model.create(ModelSpec("unet-generator", widths, input_shape=shape, depth=depth), 0)


def test_mlp_parameter_count():
    assert parameter_count(build(ModelSpec("mlp", [2, 16, 2]), 7)) == 2 * 16 + 16 + 16 * 2 + 2 == 82


def test_same_seed_same_parameters():
    spec = ModelSpec("convnet", [1, 4, 8], input_shape=(1, 28, 28), hidden=16)
    a, b, c = build(spec, 3), build(spec, 3), build(spec, 4)
    assert params_hash(a) == params_hash(b)
    assert params_hash(a) != params_hash(c)


def test_biases_start_at_zero_and_weights_are_bounded():
    p = build(ModelSpec("mlp", [5, 7, 3]), 0)
    assert not p["fc0.b"].any() and not p["fc1.b"].any()
    # He-uniform limit for fan-in 5
    assert np.abs(p["fc0.w"]).max() <= math.sqrt(6 / 5)


@pytest.mark.parametrize("shape", [(1, 28, 28), (3, 32, 32), (1, 17, 23), (1, 8, 8)])
def test_generator_output_shape_equals_input(shape):
    g = unet(shape)
    x = np.random.default_rng(0).random((2,) + shape)
    out = g.predict(x)
    assert out.shape == x.shape
    assert np.abs(out).max() < 1.0


@pytest.mark.parametrize("depth", [1, 2, 4])
def test_generator_depths(depth):
    g = unet((1, 16, 16), depth=depth)
    assert g.predict(np.zeros((1, 1, 16, 16))).shape == (1, 1, 16, 16)


def test_inconsistent_channel_plan_rejected():
    with pytest.raises(ModelError, match="inconsistent channel plan"):
        ModelSpec("convnet", [3, 8], input_shape=(1, 28, 28))
    with pytest.raises(ModelError, match="inconsistent channel plan"):
        ModelSpec("unet-generator", [1, 4, 8], input_shape=(1, 28, 28), depth=3)
    with pytest.raises(ModelError):
        ModelSpec("unet-generator", [1], input_shape=(1, 28, 28), depth=0)


def test_spec_dict_round_trip():
    spec = ModelSpec("convnet", [1, 4], input_shape=(1, 12, 12), hidden=8, activation="tanh")
    assert ModelSpec.from_dict(spec.to_dict()) == spec


def test_untrained_classifier_loss_near_ln10():
    m = Model.create(ModelSpec("convnet", [1, 8, 16], input_shape=(1, 28, 28)), 0)
    x = np.random.default_rng(1).random((64, 1, 28, 28))
    value = loss(m, x, np.arange(64) % 10).item()
    assert abs(value - math.log(10)) <= 0.5


def test_two_class_cross_entropy_by_hand():
    value = softmax_cross_entropy(Tensor([[1.0, -1.0]]), np.array([0])).item()
    assert value == pytest.approx(math.log1p(math.exp(-2.0)), abs=1e-15)
    assert value == pytest.approx(0.126928, abs=1e-6)


def test_generator_l1_loss_zero_at_own_output():
    g = unet((1, 12, 12), depth=2)
    x = np.random.default_rng(2).random((3, 1, 12, 12))
    assert loss(g, x, g.predict(x)).item() == 0.0


def test_label_out_of_range_rejected():
    with pytest.raises(ModelError, match="label out of range"):
        loss(mlp([2, 3]), np.zeros((1, 2)), [3])


def test_input_shape_checked():
    with pytest.raises(ModelError, match="input shape"):
        mlp([2, 3]).forward(np.zeros((1, 4)))


@pytest.mark.parametrize("activation", ["tanh", "sigmoid", "relu", "leaky_relu"])
def test_parameter_gradients_match_finite_differences(activation):
    m = mlp([3, 5, 4], activation=activation, seed=2)
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(6, 3)), rng.integers(0, 4, 6)
    for name in m.params:
        def f(t, name=name):
            p = dict(m.params)
            p[name] = t
            return loss(m, x, y, p)
        rep = grad_check(f, m.params[name])
        assert rep.passed, (name, rep.message)


def test_unet_input_gradient_matches_finite_differences():
    g = Model.create(ModelSpec("unet-generator", [1, 2, 3], input_shape=(1, 6, 6), depth=2,
                               activation="tanh"), 1)
    x = np.random.default_rng(4).random((1, 1, 6, 6))
    target = np.full((1, 1, 6, 6), 5.0)     # far away: L1 stays smooth
    assert grad_check(lambda t: loss(g, t, target), x).passed


def blobs(separation=6.0, noise=0.3, per_class=50, classes=2, seed=0):
    return make_synthetic(SyntheticSpec("gaussian-blobs", 2, per_class, noise, seed, classes, separation))


def test_zero_epochs_leaves_parameters_unchanged():
    m = mlp([2, 8, 2])
    before = params_hash(m.params)
    _, history = train(m, blobs(), TrainConfig(epochs=0))
    assert history == [] and params_hash(m.params) == before


def test_training_is_deterministic():
    runs = []
    for _ in range(2):
        m = mlp([2, 8, 2])
        _, hist = train(m, blobs(), TrainConfig(epochs=3, batch_size=16, seed=5))
        runs.append((params_hash(m.params), [h.loss for h in hist]))
    assert runs[0] == runs[1]


def test_history_length_and_epoch_callback():
    seen = []
    _, hist = train(mlp([2, 8, 2]), blobs(), TrainConfig(epochs=4), on_epoch_end=lambda e, m: seen.append(e))
    assert [h.epoch for h in hist] == seen == [1, 2, 3, 4]


def test_mlp_separates_gaussian_blobs():
    ds = blobs(classes=3)
    m = mlp([2, 16, 3])
    train(m, ds, TrainConfig(epochs=30, batch_size=16, learning_rate=1e-2))
    assert evaluate_accuracy(m, ds) == 1.0


def test_two_moons_needs_a_nonlinear_model():
    ds = make_synthetic(SyntheticSpec("two-moons", 2, 200, 0.1, 0))
    linear = mlp([2, 2])
    train(linear, ds, TrainConfig(epochs=60, batch_size=32, learning_rate=1e-2))
    deep = mlp([2, 32, 32, 2], activation="tanh")
    train(deep, ds, TrainConfig(epochs=60, batch_size=32, learning_rate=1e-2))
    assert evaluate_accuracy(linear, ds) < 1.0
    assert evaluate_accuracy(deep, ds) >= 0.95


def test_training_loss_mostly_decreases():
    ds = make_synthetic(SyntheticSpec("two-moons", 2, 200, 0.1, 1))
    _, hist = train(mlp([2, 16, 2], activation="tanh"), ds,
                    TrainConfig(epochs=20, batch_size=32, learning_rate=5e-3))
    drops = [b.loss <= a.loss for a, b in zip(hist, hist[1:])]
    assert sum(drops) >= 0.8 * len(drops)


def test_generator_regression_training_reduces_l1():
    rng = np.random.default_rng(0)
    x = rng.random((32, 1, 8, 8))
    pairs = PairSet(x, 0.5 * (x - 0.5))
    g = unet((1, 8, 8), depth=2)
    before = loss(g, x, pairs.targets).item()
    _, hist = train(g, pairs, TrainConfig(epochs=15, batch_size=8, loss="l1", learning_rate=3e-3))
    assert hist[-1].loss < 0.5 * before
    assert all(h.accuracy is None for h in hist)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch():
    ds = Dataset(np.array([[np.inf, 1.0], [-np.inf, 1.0]]), np.array([0, 1]), 2)
    with pytest.raises(TrainingDiverged) as err:
        train(mlp([2, 2]), ds, TrainConfig(epochs=2, optimizer="sgd"))
    assert err.value.epoch == 1


class ConstantLogits:
    def __init__(self, logits):
        self.logits = np.asarray(logits, dtype=float)

    def predict(self, x, batch_size=500):
        return np.tile(self.logits, (len(x), 1))


def test_label_zero_predictor_on_balanced_set():
    ds = Dataset(np.zeros((100, 2)), np.arange(100) % 10, 10)
    assert evaluate_accuracy(ConstantLogits(np.eye(10)[0]), ds) == pytest.approx(0.1)


def test_ties_break_toward_lowest_index():
    assert predict_labels(ConstantLogits([0.3, 0.7, 0.7]), np.zeros((2, 1))).tolist() == [1, 1]


@settings(max_examples=25, deadline=None)
@given(st.floats(min_value=1e-3, max_value=1e3))
def test_accuracy_invariant_under_logit_scaling(c):
    m = mlp([2, 6, 3], seed=1)
    ds = blobs(classes=3, noise=1.5)
    scaled = Model(m.spec, dict(m.params))
    scaled.params["fc1.w"] = c * m.params["fc1.w"]
    scaled.params["fc1.b"] = c * m.params["fc1.b"]
    assert evaluate_accuracy(scaled, ds) == evaluate_accuracy(m, ds)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    m = Model.create(ModelSpec("convnet", [1, 2, 3], input_shape=(1, 8, 8), hidden=5), 9)
    digest = save_checkpoint(tmp_path / "ck", m, {"epoch": 3})
    back, meta = load_checkpoint(tmp_path / "ck")
    assert meta == {"epoch": 3} and back.spec == m.spec
    assert params_hash(back.params) == digest
    for k in m.params:
        assert back.params[k].tobytes() == m.params[k].tobytes()


def test_corrupted_checkpoint_rejected(tmp_path):
    save_checkpoint(tmp_path / "ck", mlp([2, 2]))
    raw = bytearray((tmp_path / "ck.bin").read_bytes())
    raw[0] ^= 1
    (tmp_path / "ck.bin").write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="checksum"):
        load_checkpoint(tmp_path / "ck")


def test_forward_tracks_on_active_record():
    m = mlp([2, 3])
    with ComputationRecord() as rec:
        x = rec.leaf(np.ones((1, 2)))
        out = m.forward(x)
        g = rec.backward(softmax_cross_entropy(out, np.array([0])))
    assert g[x].shape == (1, 2)
