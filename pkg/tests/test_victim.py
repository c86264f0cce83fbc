import dataclasses

import numpy as np
import pytest

from cascade_guard.autograd import (
    ConvLayer,
    DenseLayer,
    MaxPoolLayer,
    ReluLayer,
    SoftmaxLayer,
)
from cascade_guard.dataio import Dataset
from cascade_guard.errors import TrainingError, ValidationError
from cascade_guard.tensor import ConvFilterBank, Tensor, conv2d, relu
from cascade_guard.victim import (
    Network,
    NetworkSpec,
    TrainConfig,
    default_victim_spec,
    layer_outputs,
    predict,
    predict_batch,
    prediction_census,
    raw_score_percentile,
    train_victim,
)


def dense_only_spec(features, classes):
    return NetworkSpec((1, features, 1), classes,
                       (DenseLayer(classes), SoftmaxLayer()))


def toy_dataset(images, labels, tag="train"):
    n = len(images)
    return Dataset(np.asarray(images), np.asarray(labels),
                   np.full(n, tag, dtype="<U5"), {"classes": int(np.max(labels)) + 1})


class TestNetworkSpec:
    def test_default_victim_shape_chain(self):
        spec = default_victim_spec()
        assert spec.conv_count == 2
        assert spec.conv_channels() == (8, 16)
        assert spec.shapes()[-1] == (10,)

    def test_softmax_must_be_last_and_unique(self):
        with pytest.raises(ValidationError, match="softmax"):
            NetworkSpec((2, 2, 1), 2, (DenseLayer(2),))
        with pytest.raises(ValidationError, match="softmax"):
            NetworkSpec((2, 2, 1), 2,
                        (SoftmaxLayer(), DenseLayer(2), SoftmaxLayer()))

    def test_head_width_must_match_classes(self):
        with pytest.raises(ValidationError, match="scores"):
            NetworkSpec((2, 2, 1), 3, (DenseLayer(2), SoftmaxLayer()))

    def test_incompatible_adjacent_layers_rejected(self):
        with pytest.raises(ValidationError):
            NetworkSpec((4, 4, 1), 2,
                        (MaxPoolLayer(5, 1), DenseLayer(2), SoftmaxLayer()))


class TestNetwork:
    def test_weight_shape_checked(self):
        spec = dense_only_spec(4, 2)
        with pytest.raises(ValidationError, match="dense layer"):
            Network(spec, [(np.zeros((3, 4)), np.zeros(3)), None])

    def test_bank_stride_must_match_spec(self):
        spec = NetworkSpec((3, 3, 1), 1,
                           (ConvLayer(1, 2), ReluLayer(), DenseLayer(1), SoftmaxLayer()))
        bad = ConvFilterBank(np.ones((1, 2, 2, 1)), stride=2)
        with pytest.raises(ValidationError, match="stride"):
            Network(spec, [bad, None, (np.ones((1, 4)), np.zeros(1)), None])


class TestTrainVictim:
    def test_single_class_dataset_reaches_full_accuracy(self):
        rng = np.random.default_rng(0)
        ds = toy_dataset(rng.random((20, 1, 2, 1)), np.zeros(20, dtype=int))
        net = train_victim(ds, dense_only_spec(2, 1), TrainConfig(epochs=1, seed=0))
        assert net.metadata["train_accuracy"] == 1.0

    def test_linearly_separable_toy_reaches_full_accuracy(self):
        # y = 1 iff first feature clearly exceeds second; a one-layer head
        # separates it with margin
        rng = np.random.default_rng(1)
        x = rng.random((200, 1, 2, 1))
        gap = x[:, 0, 0, 0] - x[:, 0, 1, 0]
        x = x[np.abs(gap) > 0.1][:80]
        y = (x[:, 0, 0, 0] > x[:, 0, 1, 0]).astype(int)
        # perceptron-style oracle: the data is separable by w = (1, -1)
        assert ((x[:, 0, 0, 0] - x[:, 0, 1, 0] > 0) == y.astype(bool)).all()
        ds = toy_dataset(x, y)
        net = train_victim(ds, dense_only_spec(2, 2),
                           TrainConfig(epochs=60, learning_rate=0.5, seed=3))
        assert net.metadata["train_accuracy"] == 1.0

    def test_fixed_seed_is_bit_deterministic(self):
        rng = np.random.default_rng(2)
        x = rng.random((40, 1, 2, 1))
        y = (x[:, 0, 0, 0] > 0.5).astype(int)
        ds = toy_dataset(x, y)
        cfg = TrainConfig(epochs=3, seed=11)
        a = train_victim(ds, dense_only_spec(2, 2), cfg)
        b = train_victim(ds, dense_only_spec(2, 2), cfg)
        wa, ba_ = a.weights[0]
        wb, bb = b.weights[0]
        assert np.array_equal(wa, wb) and np.array_equal(ba_, bb)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_epoch(self):
        rng = np.random.default_rng(3)
        x = rng.random((40, 1, 2, 1))
        y = (x[:, 0, 0, 0] > 0.5).astype(int)
        ds = toy_dataset(x, y)
        # two stacked dense layers so exploding weights overflow the logits
        spec = NetworkSpec((1, 2, 1), 2,
                           (DenseLayer(4), ReluLayer(), DenseLayer(2), SoftmaxLayer()))
        with pytest.raises(TrainingError, match="epoch 1"):
            train_victim(ds, spec, TrainConfig(epochs=2, learning_rate=1e200, seed=0))

    def test_bundled_task_gate(self, victim_bundle):
        assert victim_bundle.network.metadata["test_accuracy"] >= 0.9


class TestPredict:
    def test_zero_weight_network_uniform(self):
        spec = dense_only_spec(3, 4)
        net = Network(spec, [(np.zeros((4, 3)), np.zeros(4)), None])
        rec = predict(net, Tensor(np.random.default_rng(0).random((1, 3, 1))))
        assert np.allclose(rec.probs, 0.25, atol=1e-15)

    def test_pure_function(self, victim_bundle):
        img = victim_bundle.dataset.tensor(0)
        a = predict(victim_bundle.network, img)
        b = predict(victim_bundle.network, img)
        assert np.array_equal(a.raw, b.raw) and a.label == b.label

    def test_argmax_consistent_between_raw_and_softmax(self, victim_bundle):
        images, _ = victim_bundle.dataset.split("test")
        raw, probs, labels = predict_batch(victim_bundle.network, images[:64])
        assert (np.argmax(raw, 1) == np.argmax(probs, 1)).all()
        assert (labels == np.argmax(raw, 1)).all()

    def test_dims_mismatch_rejected(self, victim_bundle):
        with pytest.raises(ValidationError, match="dims"):
            predict(victim_bundle.network, Tensor(np.zeros((5, 5, 1))))

    def test_identity_conv_insertion_preserves_predictions(self, victim_bundle):
        net = victim_bundle.network
        spec = net.spec
        layers = (spec.layers[0], spec.layers[1], spec.layers[2],
                  ConvLayer(filters=8, kernel=1)) + spec.layers[3:]
        ident = np.zeros((8, 1, 1, 8))
        for k in range(8):
            ident[k, 0, 0, k] = 1.0
        weights = list(net.weights[:3]) + [ConvFilterBank(ident)] + list(net.weights[3:])
        bigger = Network(NetworkSpec(spec.input_dims, spec.classes, layers), weights)
        img = victim_bundle.dataset.tensor(3)
        assert np.allclose(predict(net, img).raw, predict(bigger, img).raw,
                           rtol=0, atol=1e-10)


class TestLayerOutputs:
    def test_one_tensor_per_conv_layer_nonnegative(self, victim_bundle):
        outs = layer_outputs(victim_bundle.network, victim_bundle.dataset.tensor(1))
        assert len(outs) == 2
        assert all((o.array >= 0).all() for o in outs)

    def test_first_entry_recomputed_standalone(self, victim_bundle):
        net = victim_bundle.network
        img = victim_bundle.dataset.tensor(2)
        outs = layer_outputs(net, img)
        want = relu(conv2d(img, net.weights[0]))
        assert np.array_equal(outs[0].array, want.array)


class TestCensus:
    def test_threshold_below_min_counts_all_classes(self, victim_bundle):
        images, _ = victim_bundle.dataset.split("test")
        raw, _, _ = predict_batch(victim_bundle.network, images[:32])
        table = prediction_census(victim_bundle.network, images[:32],
                                  [raw.min() - 1.0])
        assert table.raw_mean_counts[0] == victim_bundle.network.spec.classes

    def test_threshold_above_max_counts_zero(self, victim_bundle):
        images, _ = victim_bundle.dataset.split("test")
        raw, _, _ = predict_batch(victim_bundle.network, images[:32])
        table = prediction_census(victim_bundle.network, images[:32],
                                  [raw.max() + 1.0])
        assert table.raw_mean_counts[0] == 0.0
        assert table.softmax_mean_counts[0] == 0.0

    def test_raw_census_monotone_non_increasing(self, victim_bundle):
        images, _ = victim_bundle.dataset.split("test")
        ts = np.linspace(-20, 20, 15)
        table = prediction_census(victim_bundle.network, images[:64], ts)
        assert (np.diff(table.raw_mean_counts) <= 0).all()

    def test_adversarials_count_below_normals_at_high_threshold(
            self, victim_bundle, corpus):
        # analogous direction: adversarial raw scores are regularized downward
        net = victim_bundle.network
        normals = corpus.normal_bank[1500:1800]
        advs = np.stack([r.image.array for r in corpus.successful[:300]])
        t90 = raw_score_percentile(net, normals, 90.0)
        tn = prediction_census(net, normals, [t90])
        ta = prediction_census(net, advs, [t90])
        assert ta.raw_mean_counts[0] < tn.raw_mean_counts[0]
