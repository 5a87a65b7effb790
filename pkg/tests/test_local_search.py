import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from g2lsearch.errors import ConfigError, DegenerateWeightsError, DivergenceError, ShapeError
from g2lsearch.local_search import (LocalSearchConfig, LocalWindow, MultiDilatedLayerState,
                                    build_local_window, dilated_conv, expected_dilation,
                                    multi_dilated_backward, multi_dilated_forward, pmf_backward,
                                    pmf_from_weights, run_local_search)
from g2lsearch.search_space import DilationStructure


# --- window ---------------------------------------------------------------

def test_window_default_example():
    w = build_local_window(100, 0.1, 3)
    assert w.raw.tolist() == [90.0, 100.0, 110.0]
    assert w.dilations == (90, 100, 110)


def test_window_clamps_at_one():
    w = build_local_window(1, 0.1, 3)
    assert np.allclose(w.raw, [0.9, 1.0, 1.1])
    assert w.dilations == (1, 1, 1)


def test_window_two_samples_rounds_half_even():
    w = build_local_window(16, 0.1, 2)
    assert np.allclose(w.raw, [14.4, 17.6])
    assert w.dilations == (14, 18)
    # 2.5 and 3.5 sit exactly on .5 and go to the even neighbour
    assert LocalWindow(3, 0.5, 2).dilations == (2, 4)
    assert LocalWindow(5, 1.5, 2).dilations == (4, 6)


@pytest.mark.parametrize("center,fraction,samples", [(10, 0.1, 1), (10, 0.0, 3), (10, 1.0, 3), (0, 0.1, 3)])
def test_window_rejects(center, fraction, samples):
    with pytest.raises(ConfigError):
        build_local_window(center, fraction, samples)


@given(st.integers(1, 10**6), st.floats(0.01, 0.99), st.integers(2, 9))
def test_window_invariants(center, fraction, samples):
    w = build_local_window(center, fraction, samples)
    raw = w.raw
    assert np.all(np.diff(raw) > 0)
    assert min(w.dilations) >= 1
    assert len(w.dilations) == samples
    if samples % 2 == 1:
        assert raw[samples // 2] == pytest.approx(center, rel=1e-12)
        assert w.dilations[samples // 2] == center


# --- PMF ------------------------------------------------------------------

def test_pmf_examples():
    assert pmf_from_weights([-1, 2, 1]).tolist() == [0.25, 0.5, 0.25]
    assert pmf_from_weights([5]).tolist() == [1.0]
    assert pmf_from_weights([3, -3]).tolist() == [0.5, 0.5]


def test_pmf_degenerate():
    with pytest.raises(DegenerateWeightsError):
        pmf_from_weights([0.0, 0.0, 0.0])


def test_pmf_unknown_kind():
    with pytest.raises(ConfigError):
        pmf_from_weights([1.0], "relu")


weights = st.lists(st.floats(-10, 10), min_size=1, max_size=8).filter(lambda w: any(w))


@given(weights, st.floats(1e-3, 1e3))
def test_pmf_valid_and_scale_free(w, c):
    a = pmf_from_weights(w)
    assert np.all(a >= 0)
    assert abs(a.sum() - 1) <= 1e-12
    assert np.allclose(pmf_from_weights(np.asarray(w) * c), a, rtol=0, atol=1e-12)


@pytest.mark.parametrize("kind", ["sigmoid", "softmax"])
@given(w=st.lists(st.floats(-10, 10), min_size=1, max_size=8))
def test_alternative_pmfs_valid(kind, w):
    a = pmf_from_weights(w, kind)
    assert np.all(a > 0)
    assert abs(a.sum() - 1) <= 1e-12


@pytest.mark.parametrize("kind", ["abs", "sigmoid", "softmax"])
def test_pmf_backward_matches_finite_differences(kind):
    rng = np.random.default_rng(1)
    for _ in range(10):
        w = rng.normal(size=4)
        g = rng.normal(size=4)
        numeric = oracles.central_difference(lambda: float(g @ pmf_from_weights(w, kind)), w)
        assert oracles.rel_error(pmf_backward(g, w, kind), numeric) < 1e-6


def test_pmf_backward_zero_weight_subgradient():
    assert pmf_backward([1.0, 2.0, 3.0], [0.0, 1.0, 1.0])[0] == 0.0


# --- forward --------------------------------------------------------------

def random_layer(rng, c_in=2, c_out=2, kw=3, S=3, T=16, center=None, bias=True):
    center = center or int(rng.integers(1, 12))
    window = build_local_window(center, 0.1 if center < 10 else 0.3, S)
    theta = rng.normal(size=(c_out, c_in, kw))
    b = rng.normal(size=c_out) if bias else None
    state = MultiDilatedLayerState(theta, rng.normal(size=S), window.dilations, b)
    return state, rng.normal(size=(c_in, T))


def test_dilated_conv_matches_loop_reference():
    rng = np.random.default_rng(0)
    for _ in range(30):
        c_in, c_out, kw = (int(v) for v in rng.integers(1, 4, size=3))
        kw = 2 * kw - 1
        T, d = int(rng.integers(1, 20)), int(rng.integers(1, 9))
        theta, x, b = rng.normal(size=(c_out, c_in, kw)), rng.normal(size=(c_in, T)), rng.normal(size=c_out)
        assert np.allclose(dilated_conv(x, theta, d, b), oracles.dilated_conv(x, theta, d, b), atol=1e-12)


def test_single_branch_is_plain_conv():
    rng = np.random.default_rng(2)
    theta, x = rng.normal(size=(3, 2, 3)), rng.normal(size=(2, 25))
    state = MultiDilatedLayerState(theta, [0.7], (4,))
    assert np.array_equal(multi_dilated_forward(x, state), dilated_conv(x, theta, 4))


def test_near_one_hot_matches_first_branch():
    rng = np.random.default_rng(3)
    theta, x = rng.normal(size=(2, 2, 3)), rng.normal(size=(2, 30))
    state = MultiDilatedLayerState(theta, [1e9, 1, 1], (3, 5, 7))
    ref = oracles.dilated_conv(x, theta, 3)
    assert oracles.rel_error(multi_dilated_forward(x, state), ref) < 1e-5


def test_forward_is_the_alpha_mixture():
    rng = np.random.default_rng(4)
    state, x = random_layer(rng, S=3, center=20, bias=False)
    alpha = state.alpha
    ref = sum(a * oracles.dilated_conv(x, state.theta, d) for a, d in zip(alpha, state.dilations))
    assert np.allclose(multi_dilated_forward(x, state), ref, atol=1e-12)


def test_zero_input():
    rng = np.random.default_rng(5)
    state, x = random_layer(rng, bias=False)
    assert np.array_equal(multi_dilated_forward(np.zeros_like(x), state), np.zeros((2, 16)))
    state.bias = np.array([1.5, -2.0])
    y = multi_dilated_forward(np.zeros_like(x), state)
    assert np.array_equal(y, np.repeat([[1.5], [-2.0]], 16, axis=1))


def test_forward_channel_mismatch():
    state, _ = random_layer(np.random.default_rng(6), c_in=2)
    with pytest.raises(ShapeError):
        multi_dilated_forward(np.zeros((3, 10)), state)


def test_dilation_longer_than_sequence():
    theta, x = np.ones((1, 1, 3)), np.arange(5.0)[None]
    assert np.array_equal(dilated_conv(x, theta, 50), x)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_superposition(seed):
    rng = np.random.default_rng(seed)
    state, x1 = random_layer(rng, bias=False)
    x2 = rng.normal(size=x1.shape)
    a, b = rng.normal(size=2)
    lhs = multi_dilated_forward(a * x1 + b * x2, state)
    rhs = a * multi_dilated_forward(x1, state) + b * multi_dilated_forward(x2, state)
    assert np.allclose(lhs, rhs, atol=1e-10)
    theta2 = rng.normal(size=state.theta.shape)
    s2 = MultiDilatedLayerState(theta2, state.weights, state.dilations)
    s12 = MultiDilatedLayerState(a * state.theta + b * theta2, state.weights, state.dilations)
    lhs = multi_dilated_forward(x1, s12)
    rhs = a * multi_dilated_forward(x1, state) + b * multi_dilated_forward(x1, s2)
    assert np.allclose(lhs, rhs, atol=1e-10)


# --- backward -------------------------------------------------------------

def check_layer_gradients(state, x, rng, step=1e-4):
    y0 = multi_dilated_forward(x, state)
    g = rng.normal(size=y0.shape)

    def loss():
        return float(np.sum(g * multi_dilated_forward(x, state)))

    grads = multi_dilated_backward(g, x, state)
    errors = {
        "x": oracles.rel_error(grads.x, oracles.central_difference(loss, x, step)),
        "theta": oracles.rel_error(grads.theta, oracles.central_difference(loss, state.theta, step)),
        "weights": oracles.rel_error(grads.weights, oracles.central_difference(loss, state.weights, step)),
    }
    if state.bias is not None:
        errors["bias"] = oracles.rel_error(grads.bias, oracles.central_difference(loss, state.bias, step))
    return errors


def test_layer_gradients_tiny():
    rng = np.random.default_rng(7)
    state, x = random_layer(rng, c_in=2, c_out=2, kw=3, S=3, T=16, center=5)
    assert len(set(state.dilations)) == 3
    errors = check_layer_gradients(state, x, rng)
    assert max(errors.values()) < 1e-4, errors


@pytest.mark.parametrize("kind", ["sigmoid", "softmax"])
def test_layer_gradients_alternative_pmf(kind):
    rng = np.random.default_rng(8)
    state, x = random_layer(rng, S=3, center=5)
    state.pmf = kind
    assert max(check_layer_gradients(state, x, rng).values()) < 1e-4


def test_zero_upstream_gradient():
    rng = np.random.default_rng(9)
    state, x = random_layer(rng)
    grads = multi_dilated_backward(np.zeros((2, 16)), x, state)
    for g in (grads.x, grads.theta, grads.weights, grads.bias):
        assert not np.any(g)


def test_weight_gradient_orthogonal_to_weights():
    # pmf(cW) == pmf(W), so the loss is flat along W itself
    rng = np.random.default_rng(10)
    for _ in range(20):
        state, x = random_layer(rng, S=4, center=int(rng.integers(10, 40)))
        g = rng.normal(size=(2, 16))
        gw = multi_dilated_backward(g, x, state).weights
        assert abs(float(gw @ state.weights)) < 1e-8 * max(1.0, np.abs(gw).max())


def test_backward_shape_mismatch():
    state, x = random_layer(np.random.default_rng(11))
    with pytest.raises(ShapeError):
        multi_dilated_backward(np.zeros((2, 15)), x, state)


def test_layer_state_validation():
    with pytest.raises(ShapeError):
        MultiDilatedLayerState(np.zeros((1, 1, 3)), [1.0, 1.0], (1,))
    with pytest.raises(ShapeError):
        MultiDilatedLayerState(np.zeros((1, 1, 3)), [np.nan], (1,))


def test_from_window_starts_uniform():
    state = MultiDilatedLayerState.from_window(np.zeros((1, 1, 3)), build_local_window(50))
    assert state.weights.tolist() == [1 / 3] * 3
    assert state.dilations == (45, 50, 55)


# --- expectation collapse -------------------------------------------------

def test_expected_dilation_examples():
    w = build_local_window(100)
    assert expected_dilation(w, [0, 1, 0]) == 100
    assert expected_dilation(w, [1 / 3, 1 / 3, 1 / 3]) == 100
    assert expected_dilation(w, [0.6, 0.3, 0.1]) == 95


def test_expected_dilation_uses_raw_values():
    w = build_local_window(16, 0.1, 2)  # raw 14.4, 17.6; materialized 14, 18
    assert expected_dilation(w, [0.5, 0.5]) == 16
    assert expected_dilation(w, [1.0, 0.0]) == 14
    assert expected_dilation(build_local_window(1), [1, 0, 0]) == 1  # floor(0.9) clamps


def test_expected_dilation_length_mismatch():
    with pytest.raises(ShapeError):
        expected_dilation(build_local_window(10), [0.5, 0.5])


def test_expected_dilation_against_recomputation():
    rng = np.random.default_rng(12)
    for _ in range(1000):
        center, S = int(rng.integers(1, 2000)), int(rng.integers(2, 8))
        fraction = float(rng.uniform(0.01, 0.5))
        alpha = rng.dirichlet(np.ones(S))
        w = build_local_window(center, fraction, S)
        assert expected_dilation(w, alpha) == oracles.expected_dilation(center, fraction, S, alpha)


@given(st.integers(1, 5000), st.integers(2, 7), st.data())
def test_expected_dilation_bounds(center, S, data):
    alpha = np.asarray(data.draw(st.lists(st.floats(0, 1), min_size=S, max_size=S).filter(lambda a: sum(a) > 0)))
    alpha = alpha / alpha.sum()
    w = build_local_window(center, 0.1, S)
    d = expected_dilation(w, alpha)
    assert d >= 1
    assert w.raw.min() - 1 <= d <= w.raw.max() or d == 1


# --- EGI loop -------------------------------------------------------------

class FakeModel:
    """Branch PMFs are dictated by ``prefer``: 'up' puts all mass on the largest dilation."""

    def __init__(self, structure, prefer):
        self.structure = structure
        self.prefer = prefer
        self.windows = {}
        self.weights = {}
        self.window_log = []

    def set_windows(self, windows, pmf):
        self.windows = dict(windows)
        self.weights = {i: np.full(w.samples, 1.0 / w.samples) for i, w in windows.items()}
        self.window_log.append({i: w.center for i, w in windows.items()})

    def branch_pmf(self, layer):
        return pmf_from_weights(self.weights[layer])

    def clear_windows(self, structure):
        self.windows = {}
        self.weights = {}
        self.structure = structure


class FakeTrainer:
    def __init__(self, prefer="up", diverge_at=None):
        self.prefer = prefer
        self.diverge_at = diverge_at
        self.calls = 0
        self.initial_weights = []

    def build_model(self, structure, seed):
        return FakeModel(structure, self.prefer)

    def train(self, model, epochs, rng):
        self.calls += 1
        self.initial_weights.append({i: w.copy() for i, w in model.weights.items()})
        if self.calls == self.diverge_at:
            raise DivergenceError("loss is nan")
        for i, w in model.weights.items():
            w[:] = 0.0
            w[-1 if self.prefer == "up" else 0] = 1.0
            if self.prefer == "flat":
                w[:] = 1.0
        return [0.0] * epochs


def test_zero_iterations_returns_initial():
    initial = DilationStructure(((1, 2, 4), (8,)))
    result = run_local_search(initial, LocalSearchConfig(iterations=0), FakeTrainer())
    assert result.structure == initial
    assert result.trajectory == [initial]


def test_trajectory_and_recentering():
    initial = DilationStructure(((100, 20),))
    trainer = FakeTrainer("up")
    result = run_local_search(initial, LocalSearchConfig(iterations=3), trainer)
    assert len(result.trajectory) == 4
    assert [s.flat for s in result.trajectory] == [(100, 20), (110, 22), (121, 24), (133, 26)]
    model = result.model
    assert model.window_log == [{0: 100, 1: 20}, {0: 110, 1: 22}, {0: 121, 1: 24}]
    rows = list(result.trajectory_rows())
    assert len(rows) == 2 * 4
    assert rows[:2] == [(0, 0, 100), (0, 1, 20)]


def test_branch_weights_reset_every_iteration():
    trainer = FakeTrainer("down")
    run_local_search(DilationStructure(((50,),)), LocalSearchConfig(iterations=3), trainer)
    for w in trainer.initial_weights:
        assert w[0].tolist() == [1 / 3] * 3


def test_flat_pmf_keeps_structure():
    initial = DilationStructure(((1, 2, 4, 8, 16, 32),))
    result = run_local_search(initial, LocalSearchConfig(iterations=4), FakeTrainer("flat"))
    assert result.structure == initial


def test_divergence_names_iteration():
    with pytest.raises(DivergenceError, match="iteration 2"):
        run_local_search(DilationStructure(((10,),)), LocalSearchConfig(iterations=3),
                         FakeTrainer(diverge_at=2))


def test_config_totals_and_validation():
    assert LocalSearchConfig().total_epochs == 30
    for bad in (dict(iterations=-1), dict(fraction=0), dict(samples=1), dict(epochs_per_update=0),
                dict(pmf="relu")):
        with pytest.raises(ConfigError):
            LocalSearchConfig(**bad)


def test_resume_matches_uninterrupted():
    initial = DilationStructure(((100, 40),))
    cfg = LocalSearchConfig(iterations=4)
    full = run_local_search(initial, cfg, FakeTrainer())
    states = []
    run_local_search(initial, LocalSearchConfig(iterations=2), FakeTrainer(), checkpoint=states.append)
    resumed = run_local_search(initial, cfg, FakeTrainer(), resume=states[-1])
    assert resumed.trajectory == full.trajectory
    assert resumed.pmfs == full.pmfs


def test_egi_recovers_from_halved_dilations():
    # start from the exponential pattern with every dilation halved
    from g2lsearch.data import SynthTaskConfig, generate_synthetic, make_folds, split_sequences
    from g2lsearch.tcn import TrainingConfig, TrainingContext, evaluate_structure

    halved = DilationStructure(((1, 1, 2, 4, 8, 16, 32, 64, 128, 256),))
    before, after = [], []
    for seed in range(5):
        videos = generate_synthetic(SynthTaskConfig(num_videos=20, length_range=(250, 350), seed=seed))
        train_set, val_set = split_sequences(videos, make_folds([v.id for v in videos], 4, seed)[0])
        trainer = TrainingContext(train_set, TrainingConfig(seed=seed), 6, 16)
        cfg = LocalSearchConfig(iterations=4, epochs_per_update=2, seed=seed)
        final = run_local_search(halved, cfg, trainer).structure
        before.append(evaluate_structure(halved, train_set, val_set, 8, num_classes=6, seed=seed))
        after.append(evaluate_structure(final, train_set, val_set, 8, num_classes=6, seed=seed))
    assert np.median(after) >= np.median(before)
