"""Tape-based reverse-mode differentiation with per-neuron gradient gating.

A :class:`Record` is built by running a forward pass through its op methods;
each call executes the primitive immediately and appends a node holding the
intermediates its backward rule needs.  :func:`backward` then sweeps the nodes
in reverse.

Gating works per output neuron of a parameterized layer (a row of a linear
weight, an output channel of a convolution or batch-norm).  A frozen neuron
gets no weight gradient at all: its entry is absent from the returned mapping
rather than zero.  Input gradients are only propagated down to the first
parameterized node that still has a non-frozen neuron (the gradient horizon);
nodes before it are never visited.
"""

from dataclasses import dataclass

import numpy as np

from neq import kernels


class EngineError(ValueError):
    """Invalid use of the engine (shape mismatch, bad gate, bad arguments)."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


@dataclass
class NeuronGrad:
    """Gradient rows for the non-frozen neurons of one parameter tensor."""

    rows: np.ndarray
    values: np.ndarray

    def dense(self, shape):
        """Scatter into a zero-filled array of ``shape`` (for inspection only)."""
        out = np.zeros(shape, dtype=self.values.dtype)
        out[self.rows] = self.values
        return out


def _active_rows(frozen, n):
    if frozen is None:
        return np.arange(n)
    return np.flatnonzero(~frozen)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


class Op:
    name = "op"
    layer_id = None
    parameterized = False
    neuron_count = 0

    def backward(self, g, frozen, need):
        """Return (input grads, {role: NeuronGrad}); input grads are None where not needed."""
        raise NotImplementedError


class MatMul(Op):
    """``y = x @ weight.T`` with ``weight`` of shape (out, in); neuron = output unit."""

    name = "matmul"
    parameterized = True

    def __init__(self, weight, layer_id):
        self.weight = weight
        self.layer_id = layer_id
        self.neuron_count = weight.shape[0]

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.weight.shape[1]:
            raise EngineError(
                f"{self.layer_id}: matmul expects (B, {self.weight.shape[1]}), got {x.shape}"
            )
        self.x = x
        return kernels.matmul_nt(x, self.weight)

    def backward(self, g, frozen, need):
        active = _active_rows(frozen, self.neuron_count)
        pgrads = {}
        if active.size:
            pgrads["weight"] = NeuronGrad(active, kernels.matmul_tn(g[:, active], self.x))
        dx = kernels.matmul_nn(g, self.weight) if need[0] else None
        return (dx,), pgrads


class BiasAdd(Op):
    """Add a per-neuron bias along axis 1 (features or channels)."""

    name = "bias_add"
    parameterized = True

    def __init__(self, bias, layer_id):
        self.bias = bias
        self.layer_id = layer_id
        self.neuron_count = bias.shape[0]

    def forward(self, x):
        if x.ndim < 2 or x.shape[1] != self.bias.shape[0]:
            raise EngineError(f"{self.layer_id}: bias of {self.bias.shape[0]} vs input {x.shape}")
        self.ndim = x.ndim
        shape = (1, -1) + (1,) * (x.ndim - 2)
        return x + self.bias.reshape(shape)

    def backward(self, g, frozen, need):
        active = _active_rows(frozen, self.neuron_count)
        pgrads = {}
        if active.size:
            g2 = _channels_last(g)
            pgrads["bias"] = NeuronGrad(active, kernels.column_sums(g2[:, active]))
        return (g if need[0] else None,), pgrads


def _channels_last(a):
    """(B, C, ...) -> (B*..., C) with rows ordered sample-major, spatial row-major."""
    if a.ndim == 2:
        return a
    C = a.shape[1]
    return np.ascontiguousarray(np.moveaxis(a, 1, -1)).reshape(-1, C)


def _channels_first(a2, shape):
    B, C = shape[0], shape[1]
    return np.ascontiguousarray(np.moveaxis(a2.reshape((B,) + tuple(shape[2:]) + (C,)), -1, 1))


class Conv2d(Op):
    """Cross-correlation of NCHW input with a (Cout, Cin, kh, kw) kernel; no bias."""

    name = "conv2d"
    parameterized = True

    def __init__(self, weight, stride, padding, layer_id):
        if stride < 1:
            raise EngineError(f"{layer_id}: stride must be >= 1, got {stride}")
        if padding < 0:
            raise EngineError(f"{layer_id}: padding must be >= 0, got {padding}")
        self.weight = weight
        self.stride = stride
        self.padding = padding
        self.layer_id = layer_id
        self.neuron_count = weight.shape[0]

    def forward(self, x):
        cout, cin, kh, kw = self.weight.shape
        if x.ndim != 4 or x.shape[1] != cin:
            raise EngineError(f"{self.layer_id}: conv2d expects (B, {cin}, H, W), got {x.shape}")
        H, W = x.shape[2] + 2 * self.padding, x.shape[3] + 2 * self.padding
        if H < kh or W < kw:
            raise EngineError(f"{self.layer_id}: kernel {kh}x{kw} larger than padded input {H}x{W}")
        self.x_shape = x.shape
        self.cols, Ho, Wo = kernels.im2col(x, kh, kw, self.stride, self.padding)
        y2 = kernels.matmul_nt(self.cols, self.weight.reshape(cout, -1))
        return _channels_first(y2, (x.shape[0], cout, Ho, Wo))

    def backward(self, g, frozen, need):
        cout, cin, kh, kw = self.weight.shape
        g2 = _channels_last(g)
        active = _active_rows(frozen, cout)
        pgrads = {}
        if active.size:
            dw = kernels.matmul_tn(g2[:, active], self.cols)
            pgrads["weight"] = NeuronGrad(active, dw.reshape(active.size, cin, kh, kw))
        dx = None
        if need[0]:
            dcols = kernels.matmul_nn(g2, self.weight.reshape(cout, -1))
            dx = kernels.col2im(dcols, self.x_shape, kh, kw, self.stride, self.padding)
        return (dx,), pgrads


class ReLU(Op):
    name = "relu"

    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, np.zeros((), dtype=x.dtype))

    def backward(self, g, frozen, need):
        return (np.where(self.mask, g, np.zeros((), dtype=g.dtype)) if need[0] else None,), {}


def _pool_windows(x, k, s):
    B, C, H, W = x.shape
    if k < 1 or s < 1:
        raise EngineError(f"pool kernel and stride must be >= 1, got {k}, {s}")
    if H < k or W < k:
        raise EngineError(f"pool kernel {k} larger than input {H}x{W}")
    Ho, Wo = (H - k) // s + 1, (W - k) // s + 1
    sb, sc, sh, sw = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, shape=(B, C, Ho, Wo, k, k), strides=(sb, sc, sh * s, sw * s, sh, sw), writeable=False
    )
    return win.reshape(B, C, Ho, Wo, k * k), Ho, Wo


class MaxPool2d(Op):
    name = "max_pool2d"

    def __init__(self, kernel, stride=None):
        self.k = kernel
        self.s = stride or kernel

    def forward(self, x):
        x = np.ascontiguousarray(x)
        win, self.Ho, self.Wo = _pool_windows(x, self.k, self.s)
        self.x_shape = x.shape
        # first maximal element wins ties
        self.arg = np.argmax(win, axis=-1)
        return np.take_along_axis(win, self.arg[..., None], axis=-1)[..., 0]

    def backward(self, g, frozen, need):
        if not need[0]:
            return (None,), {}
        k, s, Ho, Wo = self.k, self.s, self.Ho, self.Wo
        dx = np.zeros(self.x_shape, dtype=g.dtype)
        zero = np.zeros((), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                contrib = np.where(self.arg == i * k + j, g, zero)
                dx[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += contrib
        return (dx,), {}


class AvgPool2d(Op):
    name = "avg_pool2d"

    def __init__(self, kernel, stride=None):
        self.k = kernel
        self.s = stride or kernel

    def forward(self, x):
        x = np.ascontiguousarray(x)
        win, self.Ho, self.Wo = _pool_windows(x, self.k, self.s)
        self.x_shape = x.shape
        return win.sum(axis=-1) / x.dtype.type(self.k * self.k)

    def backward(self, g, frozen, need):
        if not need[0]:
            return (None,), {}
        k, s, Ho, Wo = self.k, self.s, self.Ho, self.Wo
        share = g / g.dtype.type(k * k)
        dx = np.zeros(self.x_shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += share
        return (dx,), {}


class BatchNorm2d(Op):
    """Per-channel normalization of NCHW input with affine ``weight``/``bias``.

    In training mode batch statistics are used and the running estimates of
    non-frozen channels are updated in place; frozen channels keep theirs.
    """

    name = "batchnorm2d"
    parameterized = True

    def __init__(self, weight, bias, running_mean, running_var, layer_id,
                 training=True, momentum=0.1, eps=1e-5, frozen=None):
        self.weight = weight
        self.bias = bias
        self.running_mean = running_mean
        self.running_var = running_var
        self.layer_id = layer_id
        self.training = training
        self.momentum = momentum
        self.eps = eps
        self.frozen = frozen
        self.neuron_count = weight.shape[0]

    def forward(self, x):
        C = self.neuron_count
        if x.ndim != 4 or x.shape[1] != C:
            raise EngineError(f"{self.layer_id}: batchnorm2d expects (B, {C}, H, W), got {x.shape}")
        dt = x.dtype.type
        self.x_shape = x.shape
        x2 = _channels_last(x)
        n = x2.shape[0]
        if self.training:
            mean = kernels.column_sums(x2) / dt(n)
            xc = x2 - mean
            var = kernels.column_sums(xc * xc) / dt(n)
            self.inv_std = dt(1) / np.sqrt(var + dt(self.eps))
            self.xhat = xc * self.inv_std
            self._update_running(mean, var, n)
        else:
            self.inv_std = dt(1) / np.sqrt(self.running_var + dt(self.eps))
            self.xhat = (x2 - self.running_mean) * self.inv_std
        y2 = self.xhat * self.weight + self.bias
        return _channels_first(y2, x.shape)

    def _update_running(self, mean, var, n):
        upd = slice(None) if self.frozen is None else ~self.frozen
        m = self.running_mean.dtype.type(self.momentum)
        unbiased = var * (n / (n - 1)) if n > 1 else var
        self.running_mean[upd] = (1 - m) * self.running_mean[upd] + m * mean[upd]
        self.running_var[upd] = (1 - m) * self.running_var[upd] + m * unbiased[upd]

    def backward(self, g, frozen, need):
        C = self.neuron_count
        g2 = _channels_last(g)
        gx = g2 * self.xhat
        active = _active_rows(frozen, C)
        pgrads = {}
        if active.size:
            pgrads["weight"] = NeuronGrad(active, kernels.column_sums(gx[:, active]))
            pgrads["bias"] = NeuronGrad(active, kernels.column_sums(g2[:, active]))
        dx = None
        if need[0]:
            dxhat = g2 * self.weight
            if self.training:
                n = g2.shape[0]
                dt = g2.dtype.type
                sum_d = kernels.column_sums(dxhat)
                sum_dx = kernels.column_sums(dxhat * self.xhat)
                dx2 = (self.inv_std / dt(n)) * (dt(n) * dxhat - sum_d - self.xhat * sum_dx)
            else:
                dx2 = dxhat * self.inv_std
            dx = _channels_first(dx2, self.x_shape)
        return (dx,), pgrads


class Flatten(Op):
    name = "flatten"

    def forward(self, x):
        self.x_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g, frozen, need):
        return (g.reshape(self.x_shape) if need[0] else None,), {}


class Add(Op):
    name = "add"

    def forward(self, a, b):
        if a.shape != b.shape:
            raise EngineError(f"add: shapes differ {a.shape} vs {b.shape}")
        return a + b

    def backward(self, g, frozen, need):
        return tuple(g if n else None for n in need), {}


class SoftmaxCrossEntropy(Op):
    """Mean softmax cross-entropy over the batch; returns a 0-d array."""

    name = "softmax_cross_entropy"

    def __init__(self, labels):
        self.labels = np.asarray(labels, dtype=np.int64)

    def forward(self, logits):
        B, C = logits.shape
        if self.labels.shape != (B,):
            raise EngineError(f"labels shape {self.labels.shape} does not match batch {B}")
        if B and (self.labels.min() < 0 or self.labels.max() >= C):
            raise EngineError(f"label index out of range for {C} classes")
        shift = logits - logits.max(axis=1, keepdims=True)
        ex = np.exp(shift)
        total = ex.sum(axis=1, keepdims=True)
        self.probs = ex / total
        picked = shift[np.arange(B), self.labels]
        losses = np.log(total[:, 0]) - picked
        return np.asarray(losses.mean(), dtype=logits.dtype)

    def backward(self, g, frozen, need):
        if not need[0]:
            return (None,), {}
        B = self.probs.shape[0]
        d = self.probs.copy()
        d[np.arange(B), self.labels] -= 1
        return ((d * (g / d.dtype.type(B))).astype(self.probs.dtype),), {}


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


@dataclass
class Node:
    op: Op
    inputs: tuple
    output: int


class Record:
    """Forward tape: slot values, the node producing each slot, and layer outputs."""

    def __init__(self, dtype=np.float32, check_finite=True):
        self.dtype = np.dtype(dtype)
        self.check_finite = check_finite
        self.values = []
        self.producer = []
        self.nodes = []
        self.layer_slots = {}

    # slots ---------------------------------------------------------------
    def input(self, x):
        x = np.ascontiguousarray(x, dtype=self.dtype)
        if self.check_finite and not np.isfinite(x).all():
            raise NonFiniteError("non-finite model input")
        return self._new_slot(x, -1)

    def _new_slot(self, value, producer):
        self.values.append(value)
        self.producer.append(producer)
        return len(self.values) - 1

    def apply(self, op, *inputs):
        value = op.forward(*(self.values[s] for s in inputs))
        if self.check_finite and not np.isfinite(value).all():
            where = f" in layer {op.layer_id}" if op.layer_id else ""
            raise NonFiniteError(f"non-finite output from {op.name}{where}")
        self.nodes.append(Node(op, tuple(inputs), len(self.values)))
        return self._new_slot(value, len(self.nodes) - 1)

    def mark(self, layer_id, slot):
        self.layer_slots[layer_id] = slot
        return slot

    @property
    def output(self):
        if not self.values:
            raise EngineError("record is empty: run a forward pass first")
        return self.values[-1]

    def __getitem__(self, slot):
        return self.values[slot]

    # primitives ------------------------------------------------------------
    def matmul(self, x, weight, layer_id):
        return self.apply(MatMul(weight, layer_id), x)

    def bias_add(self, x, bias, layer_id):
        return self.apply(BiasAdd(bias, layer_id), x)

    def conv2d(self, x, weight, layer_id, stride=1, padding=0):
        return self.apply(Conv2d(weight, stride, padding, layer_id), x)

    def relu(self, x):
        return self.apply(ReLU(), x)

    def max_pool2d(self, x, kernel, stride=None):
        return self.apply(MaxPool2d(kernel, stride), x)

    def avg_pool2d(self, x, kernel, stride=None):
        return self.apply(AvgPool2d(kernel, stride), x)

    def batchnorm2d(self, x, weight, bias, running_mean, running_var, layer_id, **kw):
        return self.apply(BatchNorm2d(weight, bias, running_mean, running_var, layer_id, **kw), x)

    def flatten(self, x):
        return self.apply(Flatten(), x)

    def add(self, a, b):
        return self.apply(Add(), a, b)

    def softmax_cross_entropy(self, logits, labels):
        return self.apply(SoftmaxCrossEntropy(labels), logits)

    # introspection -----------------------------------------------------------
    def parameterized_layers(self):
        """Layer id -> neuron count, in forward order."""
        out = {}
        for node in self.nodes:
            if node.op.parameterized:
                out.setdefault(node.op.layer_id, node.op.neuron_count)
        return out


def gradient_horizon(record, gates=None):
    """Index of the first parameterized node with a non-frozen neuron, or None."""
    for i, node in enumerate(record.nodes):
        op = node.op
        if not op.parameterized:
            continue
        frozen = None if gates is None else gates[op.layer_id]
        if frozen is None or not frozen.all():
            return i
    return None


def _check_gates(record, gates):
    if gates is None:
        return {}
    checked = {}
    for layer_id, count in record.parameterized_layers().items():
        if layer_id not in gates:
            raise EngineError(f"no gate vector for parameterized layer {layer_id!r}")
        gate = np.asarray(gates[layer_id], dtype=bool)
        if gate.shape != (count,):
            raise EngineError(
                f"gate for {layer_id!r} has length {gate.size}, layer has {count} neurons"
            )
        checked[layer_id] = gate
    return checked


def backward(record, loss_gradient, gates=None):
    """Reverse sweep over ``record``.

    ``gates`` maps every parameterized layer id to a boolean vector (True =
    frozen); ``None`` means nothing is frozen.  Returns
    ``{(layer_id, role): NeuronGrad}`` holding entries only for parameters
    with at least one non-frozen neuron.
    """
    if not record.values:
        raise EngineError("backward called before forward")
    checked = _check_gates(record, gates)
    gates = checked if gates is not None else None
    horizon = gradient_horizon(record, gates)
    if horizon is None:
        return {}

    out_slot = len(record.values) - 1
    out_value = record.values[out_slot]
    seed = np.asarray(loss_gradient, dtype=record.dtype)
    if seed.shape != out_value.shape:
        try:
            seed = np.broadcast_to(seed, out_value.shape).copy()
        except ValueError:
            raise EngineError(
                f"loss gradient shape {seed.shape} does not match output {out_value.shape}"
            ) from None

    pending = {out_slot: seed}
    grads = {}
    for i in range(len(record.nodes) - 1, horizon - 1, -1):
        node = record.nodes[i]
        g = pending.pop(node.output, None)
        if g is None:
            continue
        op = node.op
        need = tuple(record.producer[s] >= horizon for s in node.inputs)
        frozen = gates[op.layer_id] if (gates is not None and op.parameterized) else None
        in_grads, pgrads = op.backward(g, frozen, need)
        for role, ng in pgrads.items():
            grads[(op.layer_id, role)] = ng
        for s, gi, n in zip(node.inputs, in_grads, need):
            if not n:
                continue
            if s in pending:
                pending[s] = pending[s] + gi
            else:
                pending[s] = gi
    return grads
