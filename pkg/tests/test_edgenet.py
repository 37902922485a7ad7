import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import enumerate_extreme_output, forward_loops, sobel_double_sum, sobel_scipy
from tomomip.edgenet import (EdgeNet, TrainConfig, TrainingDiverged, binary_windows,
                             build_training_set, corpus_training_set, extract_windows, forward,
                             max_output, random_net, sobel, sobel_batch, synthetic_corpus,
                             train_edge_net)

windows = arrays(np.float64, (3, 3), elements=st.floats(0, 255, allow_nan=False))


# --- Sobel -----------------------------------------------------------------

@pytest.mark.parametrize("value", [0.0, 1.0, 97.25, 255.0])
def test_sobel_constant_window(value):
    assert sobel(np.full((3, 3), value)) == 0.0


def test_sobel_vertical_step():
    w = np.array([[0, 0, 255], [0, 0, 255], [0, 0, 255]], float)
    assert sobel(w) == 4 * 255


def test_sobel_matches_brute_force_convolution():
    rng = np.random.default_rng(11)
    W = rng.random((10_000, 9))
    batch = sobel_batch(W)
    for w, b in zip(W, batch):
        ref = sobel_double_sum(w)
        assert abs(sobel(w) - ref) <= 1e-12
        assert abs(b - ref) <= 1e-12
    # second, library-based oracle on a few windows at full intensity scale
    for w in W[:200] * 255:
        assert sobel(w) == pytest.approx(sobel_scipy(w), rel=1e-12, abs=1e-12)


@given(windows)
def test_sobel_transpose_invariant(w):
    assert sobel(w.T) == pytest.approx(sobel(w), rel=1e-12, abs=1e-9)


@given(windows, st.floats(-500, 500))
def test_sobel_shift_invariant(w, c):
    assert sobel(w + c) == pytest.approx(sobel(w), rel=1e-9, abs=1e-7)


# --- training data ---------------------------------------------------------

def test_training_set_sizes():
    rng = np.random.default_rng(0)
    assert len(build_training_set(rng.random((3, 3)))) == 1
    ts = build_training_set(rng.random((7, 11)))
    assert len(ts) == 5 * 9
    assert ts.inputs.min() >= 0 and ts.inputs.max() == pytest.approx(255.0)
    assert ts.targets.max() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        build_training_set(np.ones((2, 5)))


def test_training_set_constant_image():
    ts = build_training_set(np.full((6, 6), 4.0))
    assert not ts.targets.any()


def test_training_set_raw_targets_match_windows(rng):
    img = rng.random((6, 8))
    ts = build_training_set(img, normalize=False)
    scaled = img * (255 / img.max())
    assert np.array_equal(ts.inputs[0], scaled[:3, :3].ravel())
    assert ts.targets[0] == pytest.approx(sobel(scaled[:3, :3]), rel=1e-12)
    assert np.array_equal(extract_windows(scaled)[-1], scaled[-3:, -3:].ravel())


def test_corpus_contains_every_binary_window():
    B = binary_windows(255.0)
    assert B.shape == (512, 9) and len({tuple(r) for r in B}) == 512
    ts = corpus_training_set(synthetic_corpus(5, side=12), binary_repeats=1, extra_random=10)
    assert ts.targets.max() == 1.0 and ts.target_scale == pytest.approx(sobel_batch(ts.inputs).max())


# --- training --------------------------------------------------------------

SMALL = TrainConfig(hidden=(9, 9), epochs=3, batch_size=32)


def test_training_is_deterministic():
    ts = corpus_training_set(synthetic_corpus(3, side=10), extra_random=200, binary_repeats=1)
    a, _ = train_edge_net(ts, SMALL)
    b, _ = train_edge_net(ts, SMALL)
    for Wa, Wb in zip(a.weights + a.biases, b.weights + b.biases):
        assert np.array_equal(Wa, Wb)


def test_training_on_constant_images_gives_zero():
    ts = build_training_set(np.full((20, 20), 9.0))
    net, report = train_edge_net(ts, TrainConfig(epochs=20))
    out = net.forward(np.full((5, 9), 255.0))
    assert np.all(np.abs(out) <= 1e-2 * net.omega)
    assert np.abs(net.forward(np.zeros(9))) <= 1e-2 * net.omega
    assert len(report.epoch_loss) == 20


@pytest.mark.parametrize("lr", [10.0, 1e6])
def test_training_divergence_is_reported(lr):
    ts = corpus_training_set(synthetic_corpus(2, side=10), extra_random=100, binary_repeats=1)
    with pytest.raises(TrainingDiverged):
        train_edge_net(ts, TrainConfig(lr=lr, epochs=5))


def test_trained_net_holdout_error(trained_net):
    assert trained_net.layer_sizes == (9, 9, 9, 1)
    # targets are normalised to a maximum of 1
    assert trained_net.meta["holdout_rmse"] <= 0.05 * trained_net.meta.get("max_target", 1.0)


# --- forward ---------------------------------------------------------------

def test_zero_net_outputs_zero():
    net = EdgeNet([np.zeros((9, 9)), np.zeros((9, 9)), np.zeros((1, 9))],
                  [np.zeros(9), np.zeros(9), np.zeros(1)])
    assert np.all(net.forward(np.random.default_rng(0).random((50, 9))) == 0)


@pytest.mark.parametrize("x", [-3.5, 0.0, 2.25])
def test_identity_chain_is_relu(x):
    net = EdgeNet([np.ones((1, 1))] * 3, [np.zeros(1)] * 3)
    assert forward(net, [x]) == max(0.0, x)


def test_forward_matches_loop_evaluator(trained_net):
    X = np.random.default_rng(3).uniform(0, 255, (1000, 9))
    batch = trained_net.forward(X)
    for x, v in zip(X, batch):
        ref = forward_loops(trained_net.weights, trained_net.biases, x)
        assert abs(v - ref) <= 1e-12
        assert abs(forward(trained_net, x) - ref) <= 1e-12


@given(arrays(np.float64, (2, 9), elements=st.floats(0, 255, allow_nan=False)))
def test_forward_lipschitz(pair):
    net = random_net(seed=5, omega=255.0)
    L = np.prod([np.linalg.norm(W, 2) for W in net.weights])
    diff = abs(forward(net, pair[0]) - forward(net, pair[1]))
    assert diff <= L * np.linalg.norm(pair[0] - pair[1]) * (1 + 1e-9) + 1e-9


def test_preactivations_agree_with_forward(rng):
    net = random_net(seed=2)
    x = rng.random(9)
    pre = net.preactivations(x)
    assert max(pre[-1][0], 0.0) == pytest.approx(forward(net, x), abs=1e-14)


# --- serialisation ---------------------------------------------------------

def test_save_load_round_trip(tmp_path, trained_net):
    path = trained_net.save(tmp_path / "n.edgenet.json")
    back = EdgeNet.load(path)
    X = np.random.default_rng(0).uniform(0, 255, (100, 9))
    assert np.max(np.abs(back.forward(X) - trained_net.forward(X))) <= 1e-12
    assert back.u_bar == trained_net.u_bar and back.target_scale == trained_net.target_scale


def test_invalid_parameters_rejected():
    with pytest.raises(ValueError):
        EdgeNet([np.zeros((3, 9)), np.zeros((1, 4))], [np.zeros(3), np.zeros(1)])
    with pytest.raises(ValueError):
        EdgeNet([np.full((1, 9), np.nan)], [np.zeros(1)])
    with pytest.raises(ValueError):
        EdgeNet([np.zeros((2, 9))], [np.zeros(3)])


# --- max_output ------------------------------------------------------------

def test_max_output_zero_net():
    net = EdgeNet([np.zeros((4, 9)), np.zeros((1, 4))], [np.zeros(4), np.zeros(1)])
    assert max_output(net) == 0.0 and net.u_bar == 0.0


def test_max_output_monotone_net():
    rng = np.random.default_rng(1)
    net = EdgeNet([rng.random((4, 9)), rng.random((1, 4))], [rng.random(4), rng.random(1)],
                  omega=255.0)
    assert max_output(net) == pytest.approx(forward(net, np.full(9, 255.0)), rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_max_output_small_net_matches_enumeration(seed):
    net = random_net((9, 4, 1), seed=seed, omega=1.0)
    ref = enumerate_extreme_output(net)
    assert max_output(net, store=False) == pytest.approx(ref, abs=1e-8)


def test_u_bar_dominates_random_inputs(trained_net):
    X = np.random.default_rng(9).uniform(0, 255, (100_000, 9))
    assert trained_net.forward(X).max() <= trained_net.u_bar + 1e-9
    B = binary_windows(255.0)
    assert trained_net.forward(B).max() <= trained_net.u_bar + 1e-9
