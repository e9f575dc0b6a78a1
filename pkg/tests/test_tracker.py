import csv
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neq.layers import NeuronId, build_model, tracked_neurons
from neq.tracker import (
    EquilibriumState, EquilibriumTracker, NeuronSignature, TrackerConfig, TrackerError,
    closed_form_velocity, extract_signatures, normalize, phi, recurrence_velocities,
    select_nonequilibrium, tracker_step, update_velocity,
)

N0 = NeuronId("fc1", 0)


def sig(values, epoch, neuron=N0):
    v, zero = normalize(np.asarray(values, dtype=np.float64))
    return NeuronSignature(neuron, epoch, v, zero)


# ---------------------------------------------------------------------------
# signatures and phi
# ---------------------------------------------------------------------------


def test_normalize_known_norm():
    v, zero = normalize(np.array([3.0, 4.0]))
    assert v.tolist() == [0.6, 0.8] and not zero


def test_dead_neuron_gets_zero_flag():
    v, zero = normalize(np.zeros(5))
    assert zero and not v.any()


def test_signature_scale_invariance_example():
    raw = np.random.default_rng(0).random(40)
    a, _ = normalize(raw)
    b, _ = normalize(3.7 * raw)
    assert np.max(np.abs(a - b)) <= 1e-12


def test_phi_examples():
    assert phi(sig([0.3, 0.4], 2), sig([0.3, 0.4], 1)) == pytest.approx(1.0, abs=1e-15)
    assert phi(sig([1.0, 0.0], 2), sig([0.0, 1.0], 1)) == 0.0
    assert phi(sig([0.0, 0.0], 2), sig([0.0, 0.0], 1)) == 1.0
    assert phi(sig([0.0, 0.0], 2), sig([1.0, 0.0], 1)) == 0.0
    assert phi(sig([1.0, 2.0], 2), sig([0.0, 0.0], 1)) == 0.0


def test_phi_errors():
    with pytest.raises(TrackerError, match="lengths"):
        phi(sig([1.0, 2.0], 2), sig([1.0, 2.0, 3.0], 1))
    with pytest.raises(TrackerError, match="consecutive"):
        phi(sig([1.0, 2.0], 3), sig([1.0, 2.0], 1))
    with pytest.raises(TrackerError, match="different neurons"):
        phi(sig([1.0], 2), sig([1.0], 1, NeuronId("fc1", 1)))


# ---------------------------------------------------------------------------
# velocity
# ---------------------------------------------------------------------------


def _state(prev_phi, velocity=None):
    return EquilibriumState(N0, prev_phi=prev_phi, velocity=velocity)


def test_velocity_without_momentum_is_phi_difference():
    st = _state(0.9)
    assert update_velocity(st, 0.95, 0.0) == pytest.approx(0.05, abs=1e-15)
    assert closed_form_velocity([0.9, 0.95], 0.0, 1) == pytest.approx(0.05, abs=1e-15)


def test_velocity_fixed_point():
    st = _state(0.7, 0.0)
    assert update_velocity(st, 0.7, 0.5) == 0.0
    assert st.prev_phi == 0.7


def test_update_velocity_needs_previous_phi():
    with pytest.raises(TrackerError):
        update_velocity(_state(None), 0.5, 0.5)


def test_recurrence_matches_hand_closed_form_for_short_sequence():
    h = [1.0, 0.9, 0.95]
    mu = 0.5
    # written out by hand: phi2 - (1 + mu) phi1 + (mu + mu^2) phi0
    hand = 0.95 - 1.5 * 0.9 + 0.75 * 1.0
    assert closed_form_velocity(h, mu, 2) == pytest.approx(hand, abs=1e-15)
    assert recurrence_velocities(h, mu)[2] == pytest.approx(hand, abs=1e-15)


@pytest.mark.parametrize("mu", [0.0, 0.3, 0.5, 0.9])
def test_closed_form_at_t1(mu):
    p0, p1 = 0.8, 0.6
    expect = p1 - p0 if mu == 0 else p1 - (1 + mu) * p0
    assert closed_form_velocity([p0, p1], mu, 1) == pytest.approx(expect, abs=1e-15)
    assert recurrence_velocities([p0, p1], mu)[1] == pytest.approx(expect, abs=1e-15)


@pytest.mark.parametrize("mu", [0.3, 0.5, 0.9])
def test_tracker_convention_differs_by_first_phi_term(mu):
    # the tracker seeds only the previous phi with the first value, so it
    # lacks the (-mu)^t phi0 tail of the from-rest sum
    h = np.random.default_rng(1).random(12)
    seeded = recurrence_velocities(h, mu, from_rest=False)
    for t in range(1, len(h)):
        assert seeded[t] == pytest.approx(closed_form_velocity(h, mu, t) - (-mu) ** t * h[0], abs=1e-12)


@pytest.mark.parametrize("mu", [0.0, 0.3, 0.5, 0.9])
def test_recurrence_equals_closed_form_on_random_histories(mu):
    rng = np.random.default_rng(int(mu * 10))
    for _ in range(20):
        h = rng.random(50)
        rec = recurrence_velocities(h, mu)
        start = 1 if mu == 0 else 0
        for t in range(max(start, 1), 50):
            assert abs(rec[t] - closed_form_velocity(h, mu, t)) < 1e-9


def test_closed_form_needs_history():
    with pytest.raises(TrackerError):
        closed_form_velocity([0.5], 0.5, 1)
    with pytest.raises(TrackerError):
        closed_form_velocity([0.5, 0.6], 0.5, 0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=60), st.floats(0.0, 0.5))
def test_velocity_bounded_for_stable_momentum(history, mu):
    for from_rest in (True, False):
        v = recurrence_velocities(history, mu, from_rest=from_rest)
        assert np.nanmax(np.abs(v)) <= 2.0


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 30), st.floats(1e-3, 1e3), st.integers(0, 2 ** 31))
def test_scale_invariance_property(n, lam, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random(n) + 0.01, rng.random(n) + 0.01
    base = phi(sig(b, 2), sig(a, 1))
    scaled = phi(sig(lam * b, 2), sig(a, 1))
    assert abs(base - scaled) <= 1e-12


# ---------------------------------------------------------------------------
# selection rule
# ---------------------------------------------------------------------------


def test_selection_is_strict():
    states = [_state(1.0, 0.0005), _state(1.0, 0.001), _state(1.0, -0.0005), _state(1.0, None)]
    for i, s in enumerate(states):
        s.neuron = NeuronId("a", i)
    mask = select_nonequilibrium(states, 0.001)
    assert [mask[s.neuron] for s in states] == [True, False, True, False]


def test_zero_epsilon_freezes_exact_zeros_only():
    states = [_state(1.0, 0.0), _state(1.0, 1e-300)]
    for i, s in enumerate(states):
        s.neuron = NeuronId("a", i)
    mask = select_nonequilibrium(states, 0.0)
    assert [mask[s.neuron] for s in states] == [False, False]
    # strict inequality: not even exact zeros pass |v| < 0


def test_unfreezing_is_memoryless():
    s = _state(1.0, 0.0)
    select_nonequilibrium([s], 0.001)
    assert s.frozen
    s.velocity = 0.01
    select_nonequilibrium([s], 0.001)
    assert not s.frozen


def test_config_validation_and_warning():
    with pytest.raises(TrackerError):
        TrackerConfig(mu_eq=1.0)
    with pytest.raises(TrackerError):
        TrackerConfig(epsilon=-1)
    with pytest.raises(TrackerError):
        TrackerConfig(probe_size=0)
    with pytest.warns(UserWarning, match="0.5"):
        TrackerConfig(mu_eq=0.9)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        TrackerConfig(mu_eq=0.5)


# ---------------------------------------------------------------------------
# whole-model tracker
# ---------------------------------------------------------------------------


def _cnn(dtype=np.float64, seed=0):
    return build_model("smallcnn", (1, 6, 6), 3, [3, 4], seed=seed, dtype=dtype)


def _probe(n=5, seed=0):
    return np.random.default_rng(seed).standard_normal((n, 1, 6, 6))


def test_stationary_model_freezes_everything_from_epoch_three():
    model = _cnn()
    probe = _probe()
    tr = EquilibriumTracker(TrackerConfig())
    for epoch in (1, 2):
        mask, _ = tracker_step(tr, model, probe, epoch)
        assert not any(m.any() for m in mask.values())
    for epoch in (3, 4, 5):
        mask, diag = tr.step(model, probe, epoch)
        assert all(m.all() for m in mask.values())
        for d in diag.layers.values():
            assert np.allclose(d["phi"], 1.0, rtol=0, atol=1e-12)
            assert np.all(d["velocity"] == 0.0)


def test_tracker_epoch_errors():
    model = _cnn()
    tr = EquilibriumTracker(TrackerConfig())
    with pytest.raises(TrackerError):
        tr.step(model, _probe(), 0)
    tr.step(model, _probe(), 1)
    with pytest.raises(TrackerError):
        tr.step(model, _probe(), 3)
    with pytest.raises(TrackerError):
        tr.step(model, _probe(0), 2)
    with pytest.raises(TrackerError):
        tr.step(model, np.zeros((2, 1, 5, 5)), 2)


def test_storage_counter():
    model = _cnn()
    probe = _probe(7)
    tr = EquilibriumTracker(TrackerConfig(probe_size=7))
    tr.step(model, probe, 1)
    # conv1/bn1 maps are 6x6, conv2/bn2 maps are 3x3 (after one 2x2 pool)
    per_sample = 3 * 36 * 2 + 4 * 9 * 2
    neurons = len(tracked_neurons(model))
    assert tr.storage_values() == 7 * per_sample + 4 * neurons


def _perturb(model, rng, scale):
    for k in model.params:
        model.params[k] += scale * rng.standard_normal(model.params[k].shape)


def test_vectorized_tracker_matches_per_neuron_recomputation(tmp_path):
    model = _cnn()
    probe = _probe(6)
    rng = np.random.default_rng(3)
    tr = EquilibriumTracker(TrackerConfig(mu_eq=0.5, epsilon=0.01))
    states = {n: EquilibriumState(n) for n in tracked_neurons(model)}
    prev = None
    scales = [0.0, 0.05, 0.01, 0.001, 0.0, 0.02]
    for epoch, scale in enumerate(scales, 1):
        _perturb(model, rng, scale)
        mask, diag = tr.step(model, probe, epoch)
        sigs = extract_signatures(model, probe, epoch)
        for n, s in states.items():
            if prev is not None:
                p = phi(sigs[n], prev[n])
                if s.prev_phi is not None:
                    update_velocity(s, p, 0.5)
                else:
                    s.prev_phi = p
        select_nonequilibrium(list(states.values()), 0.01)
        prev = sigs
        for n, s in states.items():
            assert mask[n.layer_id][n.index] == s.frozen
        path = tmp_path / f"e{epoch}.csv"
        diag.write_csv(path)
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == len(states)
        for row in rows:
            s = states[NeuronId(row["layer_id"], int(row["neuron_index"]))]
            if s.velocity is None:
                assert row["velocity"] == ""
            else:
                assert abs(float(row["velocity"]) - s.velocity) < 1e-12
            if s.prev_phi is not None and epoch > 1:
                assert abs(float(row["phi"]) - s.prev_phi) < 1e-12
    snap = {s.neuron: s for s in tr.states()}
    for n, s in states.items():
        assert snap[n].frozen == s.frozen
        assert snap[n].velocity == pytest.approx(s.velocity, abs=1e-12)


def test_whole_model_scale_invariance():
    # scaling a conv channel's weight and bias scales its post-ReLU outputs
    # (no batch-norm here, so the scale reaches the observation point intact)
    model = build_model("smallcnn", (1, 6, 6), 3, [3], batchnorm=False, dtype=np.float64)
    probe = _probe()
    a = extract_signatures(model, probe, 1)
    model.params[("conv1", "weight")][1] *= 1000.0
    model.params[("conv1", "bias")][1] *= 1000.0
    b = extract_signatures(model, probe, 1)
    n = NeuronId("conv1", 1)
    assert np.max(np.abs(a[n].values - b[n].values)) <= 1e-12
