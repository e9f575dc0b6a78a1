"""Neuron-equilibrium tracking.

Each tracked neuron's outputs over the probe set are flattened, concatenated
and L2-normalized into a signature.  Between consecutive epochs the cosine
similarity ``phi`` of the signatures is taken, its variation is filtered by a
momentum term into a velocity ``v``, and the neuron is frozen while ``|v|`` is
below ``epsilon``.

Epoch numbering: ``t`` counts completed training epochs.  Signatures exist
from ``t = 1``, ``phi`` from ``t = 2`` and velocities from ``t = 3`` (the
first variation needs two ``phi`` values).
"""

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from neq.layers import NeuronId, layer_outputs

logger = logging.getLogger(__name__)


class TrackerError(ValueError):
    pass


@dataclass
class TrackerConfig:
    mu_eq: float = 0.5
    epsilon: float = 0.001
    probe_size: int = 50

    def __post_init__(self):
        if not 0.0 <= self.mu_eq < 1.0:
            raise TrackerError(f"mu_eq must lie in [0, 1), got {self.mu_eq}")
        if self.epsilon < 0:
            raise TrackerError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.probe_size < 1:
            raise TrackerError(f"probe_size must be >= 1, got {self.probe_size}")
        if self.mu_eq > 0.5:
            warnings.warn(
                f"mu_eq={self.mu_eq} exceeds 0.5: velocities are no longer bounded "
                "for phi in [0, 1]", stacklevel=2)


@dataclass
class NeuronSignature:
    neuron: NeuronId
    epoch: int
    values: np.ndarray
    zero: bool = False


@dataclass
class EquilibriumState:
    neuron: NeuronId
    prev_signature: NeuronSignature = None
    prev_phi: float = None
    velocity: float = None
    frozen: bool = False


# ---------------------------------------------------------------------------
# per-neuron operations
# ---------------------------------------------------------------------------


def normalize(raw, dtype=None):
    """Return (unit vector, zero flag) for a raw output vector."""
    raw = np.asarray(raw)
    dtype = raw.dtype if dtype is None else np.dtype(dtype)
    r64 = raw.astype(np.float64)
    norm = np.sqrt(np.sum(r64 * r64))
    if norm == 0.0:
        return np.zeros(raw.shape, dtype=dtype), True
    return (r64 / norm).astype(dtype), False


def phi(sig_t, sig_prev):
    """Cosine similarity of two signatures of the same neuron.

    Both zero -> 1 (a dead neuron keeps its input-output map); exactly one
    zero -> 0.  The inner product is accumulated in float64.
    """
    if sig_t.neuron != sig_prev.neuron:
        raise TrackerError(f"signatures of different neurons: {sig_t.neuron} vs {sig_prev.neuron}")
    if sig_t.epoch != sig_prev.epoch + 1:
        raise TrackerError(f"epochs {sig_prev.epoch} and {sig_t.epoch} are not consecutive")
    if sig_t.values.shape != sig_prev.values.shape:
        raise TrackerError(f"signature lengths differ: {sig_t.values.size} vs {sig_prev.values.size}")
    if sig_t.zero and sig_prev.zero:
        return 1.0
    if sig_t.zero or sig_prev.zero:
        return 0.0
    a = sig_t.values.astype(np.float64)
    b = sig_prev.values.astype(np.float64)
    return float(np.sum(a * b))


def update_velocity(state, phi_t, mu_eq):
    """Advance ``state`` with a new similarity; returns the new velocity.

    ``v_t = (phi_t - phi_{t-1}) - mu_eq * v_{t-1}`` with an absent previous
    velocity read as 0.
    """
    if state.prev_phi is None:
        raise TrackerError("update_velocity needs a previous phi")
    prev_v = 0.0 if state.velocity is None else state.velocity
    v = (phi_t - state.prev_phi) - mu_eq * prev_v
    state.velocity = v
    state.prev_phi = phi_t
    return v


def closed_form_velocity(phi_history, mu_eq, t):
    """Velocity at step ``t`` written directly in terms of the similarities.

    For ``mu_eq != 0``:
    ``phi[t] + sum_{m=1..t} (-1)^m (mu^(m-1) + mu^m) phi[t-m]``;
    for ``mu_eq == 0``: ``phi[t] - phi[t-1]``.

    ``phi_history[0]`` is the first similarity.  The sum equals the momentum
    recurrence started from rest before ``phi_history[0]`` (previous
    similarity and velocity both 0).
    """
    if t < 1 or t >= len(phi_history):
        raise TrackerError(f"history of length {len(phi_history)} does not cover t={t}")
    h = np.asarray(phi_history, dtype=np.float64)
    if mu_eq == 0:
        return float(h[t] - h[t - 1])
    total = h[t]
    for m in range(1, t + 1):
        total += (-1) ** m * (mu_eq ** (m - 1) + mu_eq ** m) * h[t - m]
    return float(total)


def recurrence_velocities(phi_history, mu_eq, from_rest=True):
    """Iterate :func:`update_velocity` over a history; returns v for every index.

    With ``from_rest`` the state starts at phi = 0 before ``phi_history[0]``,
    matching :func:`closed_form_velocity`.  Otherwise ``phi_history[0]`` only
    seeds the previous similarity (the tracker's convention) and index 0 has
    no velocity (NaN).
    """
    state = EquilibriumState(NeuronId("", 0))
    out = np.full(len(phi_history), np.nan)
    start = 0
    if from_rest:
        state.prev_phi = 0.0
    else:
        state.prev_phi = float(phi_history[0])
        start = 1
    for i in range(start, len(phi_history)):
        out[i] = update_velocity(state, float(phi_history[i]), mu_eq)
    return out


def select_nonequilibrium(states, epsilon):
    """Set ``frozen`` on each state: True iff a velocity exists and ``|v| < epsilon``."""
    mask = {}
    for st in states:
        st.frozen = st.velocity is not None and abs(st.velocity) < epsilon
        mask[st.neuron] = st.frozen
    return mask


# ---------------------------------------------------------------------------
# whole-model tracking
# ---------------------------------------------------------------------------


def probe_outputs(model, probe_x):
    """Eval-mode forward on the probe set; layer id -> (neurons, values) matrix."""
    if len(probe_x) == 0:
        raise TrackerError("probe set is empty")
    if tuple(probe_x.shape[1:]) != model.input_shape:
        raise TrackerError(f"probe shape {probe_x.shape[1:]} does not match model {model.input_shape}")
    rec = model.forward(probe_x, training=False)
    return {l.layer_id: layer_outputs(rec, model, l.layer_id) for l in model.tracked_layers()}


def normalize_rows(raw, dtype):
    """Row-wise version of :func:`normalize`; returns (unit rows, zero flags)."""
    r64 = raw.astype(np.float64)
    norms = np.sqrt(np.sum(r64 * r64, axis=1))
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    return (r64 / safe[:, None]).astype(dtype), zero


def row_phi(cur, cur_zero, prev, prev_zero):
    """Row-wise version of :func:`phi` for matched signature matrices."""
    out = np.sum(cur.astype(np.float64) * prev.astype(np.float64), axis=1)
    out = np.where(cur_zero | prev_zero, 0.0, out)
    return np.where(cur_zero & prev_zero, 1.0, out)


def extract_signatures(model, probe_x, epoch):
    """NeuronId -> NeuronSignature for every tracked neuron."""
    out = {}
    for lid, raw in probe_outputs(model, probe_x).items():
        sig, zero = normalize_rows(raw, model.dtype)
        for i in range(raw.shape[0]):
            nid = NeuronId(lid, i)
            out[nid] = NeuronSignature(nid, epoch, sig[i], bool(zero[i]))
    return out


@dataclass
class LayerState:
    signatures: np.ndarray
    zero: np.ndarray
    prev_phi: np.ndarray
    velocity: np.ndarray
    frozen: np.ndarray
    has_phi: bool = False
    has_velocity: bool = False


@dataclass
class StepDiagnostics:
    epoch: int
    layers: dict = field(default_factory=dict)

    def rows(self):
        for lid, d in self.layers.items():
            for i in range(len(d["phi"])):
                yield (lid, i, d["phi"][i], d["delta_phi"][i], d["velocity"][i], bool(d["frozen"][i]))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer_id", "neuron_index", "phi", "delta_phi", "velocity", "frozen"])
            for lid, i, p, dp, v, fr in self.rows():
                w.writerow([lid, i, _fmt(p), _fmt(dp), _fmt(v), int(fr)])


def _fmt(x):
    return "" if np.isnan(x) else repr(float(x))


class EquilibriumTracker:
    """Per-layer vectorized equilibrium state for a whole model."""

    def __init__(self, config):
        self.config = config
        self.layers = {}
        self.last_epoch = None

    def step(self, model, probe_x, epoch):
        """Observe the model after ``epoch`` completed epochs; returns (mask, diagnostics).

        ``mask`` maps tracked layer id -> bool array (True = frozen).
        """
        return self.observe(probe_outputs(model, probe_x), epoch, model.dtype)

    def observe(self, raw_outputs, epoch, dtype=np.float64):
        """Advance on raw outputs (layer id -> (neurons, values) matrix); see :meth:`step`."""
        if epoch < 1:
            raise TrackerError("tracker_step needs at least one completed epoch")
        if self.last_epoch is not None and epoch != self.last_epoch + 1:
            raise TrackerError(f"epoch {epoch} does not follow {self.last_epoch}")
        mu, eps = self.config.mu_eq, self.config.epsilon
        diag = StepDiagnostics(epoch)
        mask = {}
        for lid, raw in raw_outputs.items():
            sig, zero = normalize_rows(raw, dtype)
            n = sig.shape[0]
            st = self.layers.get(lid)
            nan = np.full(n, np.nan)
            if st is None:
                st = LayerState(sig, zero, np.zeros(n), np.zeros(n), np.zeros(n, dtype=bool))
                self.layers[lid] = st
                diag.layers[lid] = {"phi": nan, "delta_phi": nan, "velocity": nan,
                                    "frozen": st.frozen.copy()}
                mask[lid] = st.frozen.copy()
                continue
            if sig.shape != st.signatures.shape:
                raise TrackerError(f"{lid}: signature length changed between epochs")
            p = row_phi(sig, zero, st.signatures, st.zero)
            if st.has_phi:
                dphi = p - st.prev_phi
                prev_v = st.velocity if st.has_velocity else np.zeros(n)
                v = dphi - mu * prev_v
                st.velocity = v
                st.has_velocity = True
                st.frozen = np.abs(v) < eps
            else:
                dphi = nan
                v = nan
            st.prev_phi = p
            st.has_phi = True
            st.signatures, st.zero = sig, zero
            diag.layers[lid] = {"phi": p, "delta_phi": dphi, "velocity": v if st.has_velocity else nan,
                                "frozen": st.frozen.copy()}
            mask[lid] = st.frozen.copy()
        self.last_epoch = epoch
        return mask, diag

    def storage_values(self):
        """Number of stored numeric values: signatures plus four scalars per neuron."""
        return sum(st.signatures.size + 4 * st.signatures.shape[0] for st in self.layers.values())

    def states(self):
        """Per-neuron :class:`EquilibriumState` snapshots."""
        out = []
        for lid, st in self.layers.items():
            for i in range(st.signatures.shape[0]):
                nid = NeuronId(lid, i)
                sig = NeuronSignature(nid, self.last_epoch, st.signatures[i], bool(st.zero[i]))
                out.append(EquilibriumState(
                    nid, sig,
                    float(st.prev_phi[i]) if st.has_phi else None,
                    float(st.velocity[i]) if st.has_velocity else None,
                    bool(st.frozen[i])))
        return out


def tracker_step(tracker, model, probe_x, epoch):
    """Functional alias for :meth:`EquilibriumTracker.step`."""
    return tracker.step(model, probe_x, epoch)
