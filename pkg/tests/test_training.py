import numpy as np
import pytest

from palletrack.cnn import (
    Conv,
    Dense,
    Network,
    Relu,
    Softmax,
    TrainingDiverged,
    forward_batch,
)
from palletrack.modelio import load_network, save_network
from palletrack.training import (
    TrainConfig,
    accuracy,
    fold_partition,
    kfold_cv,
    train_sgd,
)


def toy_separable_set():
    """10 samples on a 2x2 grid split by total intensity."""
    rng = np.random.default_rng(0)
    xs, ys = [], []
    for i in range(10):
        label = i % 2
        base = 0.9 if label else 0.1
        xs.append(np.full((2, 2, 1), base) + rng.normal(0, 0.02, (2, 2, 1)))
        ys.append(label)
    return np.array(xs), np.array(ys)


def perceptron_separable(x, y):
    """Independent check that the toy set is linearly separable."""
    flat = x.reshape(x.shape[0], -1)
    w = np.zeros(flat.shape[1] + 1)
    for _ in range(100):
        mistakes = 0
        for xi, yi in zip(flat, y):
            pred = 1 if w[:-1] @ xi + w[-1] > 0 else 0
            if pred != yi:
                delta = 1 if yi else -1
                w[:-1] += delta * xi
                w[-1] += delta
                mistakes += 1
        if mistakes == 0:
            return True
    return False


def small_net():
    return Network((2, 2, 1), [Dense(4), Relu(), Dense(2), Softmax()])


class TestTrainSgd:
    def test_toy_set_reaches_full_accuracy(self):
        x, y = toy_separable_set()
        assert perceptron_separable(x, y)  # oracle first
        net = small_net().init_parameters(1)
        train_sgd(net, x, y, TrainConfig(learning_rate=0.5, epochs=200,
                                         minibatch=5, seed=1))
        assert accuracy(net, x, y) == 1.0

    def test_loss_trace_length_and_decrease(self):
        x, y = toy_separable_set()
        net = small_net().init_parameters(2)
        trace = train_sgd(net, x, y, TrainConfig(learning_rate=0.2, epochs=20,
                                                 minibatch=4, seed=2))
        assert len(trace) == 20
        assert trace[-1] < trace[0]

    def test_bitwise_deterministic(self):
        x, y = toy_separable_set()
        cfg = TrainConfig(learning_rate=0.3, epochs=15, minibatch=3, seed=9)
        nets = []
        for _ in range(2):
            net = small_net().init_parameters(9)
            train_sgd(net, x, y, cfg)
            nets.append(net)
        for pa, pb in zip(nets[0].params, nets[1].params):
            if pa is not None:
                assert np.array_equal(pa["w"], pb["w"])
                assert np.array_equal(pa["b"], pb["b"])

    def test_divergence_aborts_with_diagnostics(self):
        x, y = toy_separable_set()
        net = small_net().init_parameters(0)
        with pytest.raises(TrainingDiverged, match="epoch"), \
                np.errstate(all="ignore"):
            train_sgd(net, x * 1e4, y, TrainConfig(learning_rate=1e300,
                                                   epochs=5, minibatch=5))

    def test_short_final_minibatch_used(self):
        x, y = toy_separable_set()  # 10 samples, batch 4 -> 4+4+2
        net = small_net().init_parameters(3)
        trace = train_sgd(net, x, y, TrainConfig(learning_rate=0.1, epochs=1,
                                                 minibatch=4, seed=3))
        assert len(trace) == 1

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train_sgd(small_net(), np.zeros((0, 2, 2, 1)), np.zeros(0),
                      TrainConfig())

    def test_label_out_of_range_rejected(self):
        x, _ = toy_separable_set()
        net = small_net().init_parameters(0)
        with pytest.raises(ValueError):
            train_sgd(net, x, np.full(10, 7), TrainConfig(epochs=1))


class TestKfold:
    def test_fold_sizes_for_950(self):
        folds = fold_partition(950, 10, seed=0)
        assert [len(f) for f in folds] == [95] * 10

    def test_partition_is_exact(self):
        folds = fold_partition(53, 7, seed=3)
        joined = np.concatenate(folds)
        assert sorted(joined.tolist()) == list(range(53))

    def test_leave_one_out(self):
        folds = fold_partition(6, 6, seed=1)
        assert all(len(f) == 1 for f in folds)

    def test_k_larger_than_dataset_rejected(self):
        with pytest.raises(ValueError):
            fold_partition(5, 6, seed=0)

    def test_constant_predictor_scores_full_marks_on_constant_labels(self):
        x = np.random.default_rng(0).random((12, 2, 2, 1))
        y = np.zeros(12, dtype=int)

        def factory():
            net = small_net().init_parameters(0)
            net.params[-1 if False else 2]["b"][:] = (5.0, -5.0)
            return net

        cfg = TrainConfig(learning_rate=1e-9, epochs=1, minibatch=4,
                          folds=3, seed=4)
        accs, mean = kfold_cv(x, y, cfg, factory)
        assert accs == [1.0, 1.0, 1.0]
        assert mean == 1.0

    def test_cv_learns_toy_problem(self):
        rng = np.random.default_rng(5)
        n = 30
        y = rng.integers(0, 2, n)
        x = np.where(y[:, None, None, None] == 1, 0.9, 0.1) + \
            rng.normal(0, 0.02, (n, 2, 2, 1))
        cfg = TrainConfig(learning_rate=0.5, epochs=100, minibatch=5,
                          folds=5, seed=6)
        accs, mean = kfold_cv(x, y, cfg, small_net)
        assert len(accs) == 5
        assert mean >= 0.9


class TestModelIo:
    def _trained(self):
        x, y = toy_separable_set()
        net = Network((2, 2, 1), [Conv(3, 2, 1, 0), Relu(), Dense(2),
                                  Softmax()]).init_parameters(5)
        train_sgd(net, x, y, TrainConfig(learning_rate=0.2, epochs=5,
                                         minibatch=5, seed=5))
        return net, x

    def test_roundtrip_bit_exact(self, tmp_path):
        net, x = self._trained()
        path = tmp_path / "model.net"
        save_network(path, net)
        loaded = load_network(path)
        assert loaded.input_shape == net.input_shape
        assert loaded.layers == net.layers
        for pa, pb in zip(net.params, loaded.params):
            if pa is None:
                assert pb is None
            else:
                assert np.array_equal(pa["w"], pb["w"])
                assert np.array_equal(pa["b"], pb["b"])
        assert np.array_equal(forward_batch(net, x), forward_batch(loaded, x))

    def test_serialization_deterministic(self, tmp_path):
        net, _ = self._trained()
        p1, p2 = tmp_path / "a.net", tmp_path / "b.net"
        save_network(p1, net)
        save_network(p2, net)
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "junk.net"
        path.write_bytes(b"not a model")
        with pytest.raises(ValueError, match="not a palletrack model"):
            load_network(path)
