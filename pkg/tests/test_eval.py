"""Tests for the kNN monitor, linear evaluation, and collapse statistic."""

import math

import numpy as np
import pytest

from fedssl.data import Dataset, make_blobs, split_per_class
from fedssl.evaluation import (collapse_stat, collapse_threshold, embed,
                               knn_eval, linear_eval)
from fedssl.nn import MlpSpec, Network


def identity_encoder(dim: int) -> Network:
    spec = MlpSpec((dim, dim), activation="identity")
    net = Network(spec)
    theta = np.zeros(spec.param_count())
    theta[:dim * dim] = np.eye(dim).reshape(-1)
    net.set_flat(theta)
    return net


def random_encoder(dim=8, emb=6, seed=0) -> Network:
    return Network.init(MlpSpec((dim, 16, emb)), "encoder",
                        np.random.default_rng(seed))


class TestKnn:
    def test_self_match(self):
        ds = make_blobs(3, 10, 6, 1.0, seed=0)
        enc = identity_encoder(6)
        assert knn_eval(enc, ds, ds, k=1) == 1.0

    def test_separable_blobs_with_identity_encoder(self):
        full = make_blobs(4, 40, 8, spread=0.2, seed=1)
        train, test = split_per_class(full, 10)
        assert knn_eval(identity_encoder(8), train, test, k=5) == 1.0

    def test_chance_level_under_label_permutation(self):
        full = make_blobs(4, 60, 8, spread=0.2, seed=2)
        train, test = split_per_class(full, 20)
        enc = identity_encoder(8)
        accs = []
        for seed in range(5):
            rng = np.random.default_rng(seed)
            shuffled = Dataset(train.samples, rng.permutation(train.labels),
                               train.num_classes)
            accs.append(knn_eval(enc, shuffled, test, k=5))
        p = 0.25
        sigma = math.sqrt(p * (1 - p) / len(test)) / math.sqrt(5)
        assert abs(np.mean(accs) - p) < 5 * sigma + 0.02

    def test_scale_invariance(self):
        full = make_blobs(3, 30, 6, spread=1.0, seed=3)
        train, test = split_per_class(full, 10)
        enc = identity_encoder(6)
        base = knn_eval(enc, train, test, k=3)
        scaled_train = Dataset(train.samples * 37.0, train.labels, 3)
        scaled_test = Dataset(test.samples * 37.0, test.labels, 3)
        assert knn_eval(enc, scaled_train, scaled_test, k=3) == base

    def test_does_not_mutate_encoder(self):
        full = make_blobs(3, 20, 6, spread=1.0, seed=4)
        train, test = split_per_class(full, 5)
        enc = random_encoder(6, 4, seed=5)
        before = enc.theta.tobytes()
        knn_eval(enc, train, test, k=3)
        assert enc.theta.tobytes() == before

    def test_k_validation(self):
        ds = make_blobs(2, 5, 4, 1.0, seed=6)
        enc = identity_encoder(4)
        with pytest.raises(ValueError):
            knn_eval(enc, ds, ds, k=0)
        with pytest.raises(ValueError):
            knn_eval(enc, ds, ds, k=len(ds) + 1)


class TestLinear:
    def test_separable_embeddings_reach_full_accuracy(self):
        full = make_blobs(3, 50, 6, spread=0.1, seed=7)
        train, test = split_per_class(full, 15)
        acc = linear_eval(identity_encoder(6), train, test,
                          epochs=300, lr=1.0, seed=0)
        assert acc == 1.0

    def test_zero_epochs_is_chance_level(self):
        full = make_blobs(4, 60, 8, spread=0.3, seed=8)
        train, test = split_per_class(full, 20)
        enc = random_encoder(8, 6, seed=9)
        accs = [linear_eval(enc, train, test, epochs=0, lr=0.5, seed=s)
                for s in range(6)]
        p = 0.25
        sigma = math.sqrt(p * (1 - p) / len(test)) / math.sqrt(6)
        assert abs(np.mean(accs) - p) < 5 * sigma + 0.05

    def test_encoder_bitwise_unchanged(self):
        full = make_blobs(3, 20, 6, spread=0.5, seed=10)
        train, test = split_per_class(full, 5)
        enc = random_encoder(6, 4, seed=11)
        before = enc.theta.tobytes()
        linear_eval(enc, train, test, epochs=50, lr=0.5, seed=0)
        assert enc.theta.tobytes() == before

    def test_deterministic_given_seed(self):
        full = make_blobs(3, 20, 6, spread=0.5, seed=12)
        train, test = split_per_class(full, 5)
        enc = random_encoder(6, 4, seed=13)
        a = linear_eval(enc, train, test, epochs=40, lr=0.5, seed=3)
        b = linear_eval(enc, train, test, epochs=40, lr=0.5, seed=3)
        assert a == b


class TestCollapse:
    def test_constant_embedding_gives_zero(self):
        dim = 6
        spec = MlpSpec((dim, 4), activation="identity")
        net = Network(spec)  # zero weights: all outputs equal the bias
        theta = np.zeros(spec.param_count())
        theta[-4:] = [1.0, 2.0, 3.0, 4.0]
        net.set_flat(theta)
        probe = np.random.default_rng(0).standard_normal((50, dim))
        assert collapse_stat(net, probe) == pytest.approx(0.0, abs=1e-12)

    def test_one_hot_embeddings_nonzero(self):
        enc = identity_encoder(5)
        probe = np.eye(5)
        assert collapse_stat(enc, probe) > 0.0

    def test_random_unit_vectors_concentrate_near_inverse_sqrt_d(self):
        d = 32
        rng = np.random.default_rng(14)
        probe = rng.standard_normal((1000, d))
        enc = identity_encoder(d)
        stat = collapse_stat(enc, probe)
        assert 0.7 / math.sqrt(d) < stat < 1.3 / math.sqrt(d)

    def test_threshold_definition(self):
        assert collapse_threshold(32) == pytest.approx(0.1 / math.sqrt(32))

    def test_empty_probe_rejected(self):
        with pytest.raises(ValueError):
            collapse_stat(identity_encoder(4), np.empty((0, 4)))


class TestEmbed:
    def test_no_augmentation_pure_forward(self):
        enc = random_encoder(6, 4, seed=15)
        x = np.random.default_rng(16).standard_normal((10, 6))
        np.testing.assert_array_equal(embed(enc, x), enc.forward_tape(x)[0])
