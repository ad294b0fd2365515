import math

import numpy as np
import pytest

from genesnn.data import encode_spikes, make_blobs
from genesnn.genome import Genotype
from genesnn.snn import LifConfig, NetworkSpec, conv, fc, forward
from genesnn.training import (TrainConfig, TrainingDiverged, backward, cross_entropy, evaluate,
                              grad_check, sgd_step, train)


def lively_setup(net, seed=0, batch=6, G=None):
    rng = np.random.default_rng(seed)
    G = rng.normal(size=(net.g, net.g)) if G is None else G
    genome = net.init_genome(Genotype(1.0, 2.5, G), seed)
    inputs = rng.uniform(0, 1.5, size=(net.T, batch) + net.input_shape)
    labels = rng.integers(0, net.n_classes, size=batch)
    return genome, inputs, labels


# ---------------------------------------------------------------- loss

def test_cross_entropy_uniform_logits():
    value, grad = cross_entropy(np.zeros((3, 5)), np.array([0, 1, 4]))
    assert value == pytest.approx(math.log(5))
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-15)


def test_cross_entropy_known_value():
    value, grad = cross_entropy(np.array([[2.0, 0.0]]), np.array([0]))
    p = 1 / (1 + math.exp(-2))
    assert value == pytest.approx(-math.log(p))
    np.testing.assert_allclose(grad, [[p - 1, 1 - p]])


def test_cross_entropy_is_stable_for_huge_logits():
    value, _ = cross_entropy(np.array([[1e4, 0.0]]), np.array([1]))
    assert value == pytest.approx(1e4)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


# ---------------------------------------------------------------- gradients

@pytest.mark.parametrize("net", [
    NetworkSpec((6,), (fc(8), fc(3)), g=2, T=4),
    NetworkSpec((5,), (fc(6), fc(6), fc(3)), g=3, T=3),
    NetworkSpec((1, 5, 5), (conv(2), conv(2, stride=2), fc(3)), g=2, T=2),
])
def test_gradient_check_passes(net):
    genome, inputs, labels = lively_setup(net)
    rep = grad_check(net, genome, inputs, labels, n_coords=None)
    assert rep.passed, rep.summary()
    assert rep.n_checked + rep.n_skipped == genome.n_params()
    assert rep.n_checked > rep.n_skipped


@pytest.mark.parametrize("fault", ["transpose", "surrogate"])
def test_gradient_check_catches_planted_faults(fault):
    net = NetworkSpec((6,), (fc(8), fc(3)), g=3, T=4)
    genome, inputs, labels = lively_setup(net, seed=1)
    rep = grad_check(net, genome, inputs, labels, n_coords=None, fault=fault)
    assert not rep.passed
    assert "FAIL" in rep.summary()


def test_gradient_check_refuses_large_nets():
    net = NetworkSpec((3000,), (fc(10), fc(2)), g=4)
    genome, inputs, labels = lively_setup(net, batch=1)
    with pytest.raises(ValueError):
        grad_check(net, genome, inputs, labels)


def test_unknown_fault_name():
    net = NetworkSpec((3,), (fc(2), fc(2)), g=1)
    genome, inputs, labels = lively_setup(net)
    with pytest.raises(ValueError):
        backward(net, genome, forward(net, genome, inputs), labels, fault="typo")


def test_small_step_does_not_increase_loss():
    net = NetworkSpec((6,), (fc(8), fc(3)), g=2, T=4)
    genome, inputs, labels = lively_setup(net, seed=3)
    res = forward(net, genome, inputs, spike_mode="ramp")
    before = cross_entropy(res.logits, labels)[0]
    stepped = sgd_step(genome, backward(net, genome, res, labels), 1e-4)
    after = cross_entropy(forward(net, stepped, inputs, spike_mode="ramp").logits, labels)[0]
    assert after <= before


def test_readout_only_gradient_on_g1_single_layer():
    # one fc readout with g=1. Logits average the accumulated readout, so step t
    # carries weight (T - t) / T: logits = sum_t w_t (x_t . E_in) G E_out
    net = NetworkSpec((3,), (fc(2),), g=1, T=2)
    genome, inputs, labels = lively_setup(net, seed=5)
    res = forward(net, genome, inputs)
    _, dlogits = cross_entropy(res.logits, labels)
    w = np.array([1.0, 0.5])
    a = np.einsum("t,tbi,i->b", w, inputs, genome.encodings[0][:, 0, 0, 0])
    expect = np.sum(dlogits * np.outer(a, genome.encodings[1][:, 0, 0, 0]))
    grads = backward(net, genome, res, labels)
    assert grads.dG[0, 0] == pytest.approx(expect, rel=1e-12)


# ---------------------------------------------------------------- training loop

@pytest.fixture(scope="module")
def blobs():
    return make_blobs(3, 40, 16, 5.0, seed=2)


@pytest.fixture(scope="module")
def small_net():
    return NetworkSpec((16,), (fc(16), fc(3)), g=2, T=4)


def test_training_reduces_loss(blobs, small_net):
    genome = small_net.init_genome(Genotype(0.4, 1.2, np.eye(2)), 0)
    res = train(small_net, genome, *blobs.split("train"), TrainConfig(lr=0.01), epochs=30)
    assert res.loss_history[-1] < 0.8 * res.loss_history[0]
    assert res.accuracy_history[-1] > 0.6


def test_training_is_deterministic(blobs, small_net):
    genome = small_net.init_genome(Genotype(0.4, 1.2, np.eye(2)), 0)
    cfg = TrainConfig(lr=0.01, input_noise=0.1)
    a = train(small_net, genome, *blobs.split("train"), cfg, epochs=3)
    b = train(small_net, genome, *blobs.split("train"), cfg, epochs=3)
    assert a.loss_history == b.loss_history
    np.testing.assert_array_equal(a.genome.G, b.genome.G)


@pytest.mark.parametrize("optimizer", ["sgd", "momentum", "adam"])
def test_resume_replays_uninterrupted_run(blobs, small_net, optimizer):
    genome = small_net.init_genome(Genotype(0.4, 1.2, np.eye(2)), 0)
    cfg = TrainConfig(lr=0.01, optimizer=optimizer)
    x, y = blobs.split("train")
    full = train(small_net, genome, x, y, cfg, epochs=4)
    first = train(small_net, genome, x, y, cfg, epochs=2)
    rest = train(small_net, first.genome, x, y, cfg, epochs=2, start_epoch=2,
                 optimizer_state=first.optimizer_state)
    assert first.loss_history + rest.loss_history == full.loss_history
    np.testing.assert_array_equal(rest.genome.G, full.genome.G)


def test_training_leaves_input_genome_untouched(blobs, small_net):
    genome = small_net.init_genome(Genotype(0.4, 1.2, np.eye(2)), 0)
    G0 = genome.G.copy()
    train(small_net, genome, *blobs.split("train"), TrainConfig(lr=0.01), epochs=1)
    np.testing.assert_array_equal(genome.G, G0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(blobs, small_net):
    genome = small_net.init_genome(Genotype(0.4, 1.2, np.eye(2)), 0)
    with pytest.raises(TrainingDiverged, match="epoch"):
        train(small_net, genome, *blobs.split("train"), TrainConfig(lr=1e200), epochs=3)


def test_callback_sees_every_epoch(blobs, small_net):
    genome = small_net.init_genome(Genotype(0.4, 1.2, np.eye(2)), 0)
    seen = []
    train(small_net, genome, *blobs.split("train"), TrainConfig(lr=0.01), epochs=3,
          callback=lambda e, g, loss, acc, opt: seen.append(e))
    assert seen == [0, 1, 2]


def test_evaluate_is_batch_size_invariant(blobs, small_net):
    genome = small_net.init_genome(Genotype(0.4, 1.2, np.eye(2)), 0)
    x, y = blobs.split("val")
    a = evaluate(small_net, genome, x, y, batch_size=5)
    b = evaluate(small_net, genome, x, y, batch_size=1000)
    assert a.loss == pytest.approx(b.loss, rel=1e-12)
    assert a.r1 == pytest.approx(b.r1, rel=1e-12)
    assert a.accuracy == b.accuracy
    assert a.spike_counts == pytest.approx(b.spike_counts)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
