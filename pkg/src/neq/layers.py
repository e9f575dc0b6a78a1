"""Layer specifications, models, and the small reference architectures.

A model is an ordered list of :class:`LayerSpec`; each layer reads the output
of the previous one unless ``inputs`` names other layers (residual adds).
Neurons are output units of linear layers and output channels of conv and
batch-norm layers.  The classifier is never tracked.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from neq.engine import EngineError, Record

PARAMETERIZED = ("linear", "conv2d", "batchnorm2d")
KINDS = PARAMETERIZED + ("relu", "pool", "flatten", "add")
ARCHITECTURES = ("mlp", "smallcnn", "smallresnet")

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    layer_id: str
    size: dict = field(default_factory=dict)
    neq_tracked: bool = False
    inputs: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError(f"unknown layer kind {self.kind!r}")
        if self.neq_tracked and self.kind not in PARAMETERIZED:
            raise ModelError(f"{self.layer_id}: only parameterized layers can be tracked")

    @property
    def parameterized(self):
        return self.kind in PARAMETERIZED

    @property
    def neuron_count(self):
        if self.kind == "linear":
            return self.size["out_features"]
        if self.kind == "conv2d":
            return self.size["out_channels"]
        if self.kind == "batchnorm2d":
            return self.size["channels"]
        return 0


@dataclass(frozen=True, order=True)
class NeuronId:
    layer_id: str
    index: int


class Model:
    """Parameters keyed by ``(layer_id, role)`` plus batch-norm running buffers."""

    def __init__(self, layers, input_shape, num_classes, seed=0, dtype=np.float32, build=None):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.build = dict(build or {})
        self.params = {}
        self.buffers = {}
        ids = [l.layer_id for l in self.layers]
        if len(set(ids)) != len(ids):
            raise ModelError("duplicate layer ids")
        self._by_id = {l.layer_id: l for l in self.layers}
        self.shapes = self._infer_shapes()
        self._init_params(np.random.default_rng(seed))

    # structure -------------------------------------------------------------
    def layer(self, layer_id):
        return self._by_id[layer_id]

    def layer_inputs(self, index):
        layer = self.layers[index]
        if layer.inputs:
            return tuple(layer.inputs)
        return (self.layers[index - 1].layer_id,) if index else ("input",)

    def parameterized_layers(self):
        return [l for l in self.layers if l.parameterized]

    def tracked_layers(self):
        return [l for l in self.layers if l.neq_tracked]

    def observation_layer(self, layer_id):
        """Id of the layer whose output represents ``layer_id``'s neurons.

        That is the ReLU immediately following the layer when there is one,
        otherwise the layer itself.
        """
        idx = next(i for i, l in enumerate(self.layers) if l.layer_id == layer_id)
        if idx + 1 < len(self.layers):
            nxt = self.layers[idx + 1]
            if nxt.kind == "relu" and self.layer_inputs(idx + 1) == (layer_id,):
                return nxt.layer_id
        return layer_id

    def _infer_shapes(self):
        shapes = {"input": self.input_shape}
        for i, layer in enumerate(self.layers):
            ins = [shapes[s] for s in self.layer_inputs(i)]
            shapes[layer.layer_id] = _output_shape(layer, ins)
        return shapes

    def _init_params(self, rng):
        for layer in self.layers:
            sz, lid = layer.size, layer.layer_id
            if layer.kind == "linear":
                fan_in = sz["in_features"]
                w = rng.standard_normal((sz["out_features"], fan_in)) * math.sqrt(2.0 / fan_in)
                self.params[(lid, "weight")] = w.astype(self.dtype)
                self.params[(lid, "bias")] = np.zeros(sz["out_features"], self.dtype)
            elif layer.kind == "conv2d":
                k = sz["kernel"]
                fan_in = sz["in_channels"] * k * k
                shape = (sz["out_channels"], sz["in_channels"], k, k)
                w = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
                self.params[(lid, "weight")] = w.astype(self.dtype)
                self.params[(lid, "bias")] = np.zeros(sz["out_channels"], self.dtype)
            elif layer.kind == "batchnorm2d":
                c = sz["channels"]
                self.params[(lid, "weight")] = np.ones(c, self.dtype)
                self.params[(lid, "bias")] = np.zeros(c, self.dtype)
                self.buffers[(lid, "running_mean")] = np.zeros(c, self.dtype)
                self.buffers[(lid, "running_var")] = np.ones(c, self.dtype)

    # execution ---------------------------------------------------------------
    def forward(self, x, training=False, frozen=None, check_finite=True):
        """Run the model, returning the :class:`Record` (logits in ``record.output``)."""
        x = np.asarray(x)
        if x.shape[1:] != self.input_shape:
            raise EngineError(f"input shape {x.shape[1:]} does not match model {self.input_shape}")
        rec = Record(self.dtype, check_finite=check_finite)
        slots = {"input": rec.input(x)}
        p = self.params
        for i, layer in enumerate(self.layers):
            ins = [slots[s] for s in self.layer_inputs(i)]
            lid, sz = layer.layer_id, layer.size
            if layer.kind == "linear":
                h = rec.matmul(ins[0], p[(lid, "weight")], lid)
                h = rec.bias_add(h, p[(lid, "bias")], lid)
            elif layer.kind == "conv2d":
                h = rec.conv2d(ins[0], p[(lid, "weight")], lid,
                               stride=sz.get("stride", 1), padding=sz.get("padding", 0))
                h = rec.bias_add(h, p[(lid, "bias")], lid)
            elif layer.kind == "batchnorm2d":
                h = rec.batchnorm2d(
                    ins[0], p[(lid, "weight")], p[(lid, "bias")],
                    self.buffers[(lid, "running_mean")], self.buffers[(lid, "running_var")], lid,
                    training=training, momentum=BN_MOMENTUM, eps=BN_EPS,
                    frozen=None if frozen is None else frozen.get(lid),
                )
            elif layer.kind == "relu":
                h = rec.relu(ins[0])
            elif layer.kind == "pool":
                if sz["mode"] == "max":
                    h = rec.max_pool2d(ins[0], sz["kernel"], sz.get("stride"))
                else:
                    h = rec.avg_pool2d(ins[0], sz["kernel"], sz.get("stride"))
            elif layer.kind == "flatten":
                h = rec.flatten(ins[0])
            elif layer.kind == "add":
                h = rec.add(ins[0], ins[1])
            slots[lid] = rec.mark(lid, h)
        return rec

    def loss(self, x, labels, training=True, frozen=None):
        """Forward plus mean cross-entropy; returns the record (loss in ``record.output``)."""
        rec = self.forward(x, training=training, frozen=frozen)
        rec.softmax_cross_entropy(len(rec.values) - 1, labels)
        return rec

    def predict(self, x, batch_size=1000):
        out = []
        for start in range(0, len(x), batch_size):
            out.append(np.argmax(self.forward(x[start:start + batch_size]).output, axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def copy(self):
        other = object.__new__(Model)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return other


def _output_shape(layer, ins):
    sz = layer.size
    shape = ins[0]
    if layer.kind == "linear":
        if shape != (sz["in_features"],):
            raise ModelError(f"{layer.layer_id}: expects ({sz['in_features']},), got {shape}")
        return (sz["out_features"],)
    if layer.kind == "conv2d":
        c, h, w = shape
        if c != sz["in_channels"]:
            raise ModelError(f"{layer.layer_id}: expects {sz['in_channels']} channels, got {c}")
        k, s, p = sz["kernel"], sz.get("stride", 1), sz.get("padding", 0)
        if s < 1 or p < 0 or h + 2 * p < k or w + 2 * p < k:
            raise ModelError(f"{layer.layer_id}: invalid kernel/stride/padding for input {shape}")
        return (sz["out_channels"], (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
    if layer.kind == "batchnorm2d":
        if shape[0] != sz["channels"]:
            raise ModelError(f"{layer.layer_id}: expects {sz['channels']} channels, got {shape[0]}")
        return shape
    if layer.kind == "pool":
        c, h, w = shape
        k = sz["kernel"]
        s = sz.get("stride") or k
        if h < k or w < k:
            raise ModelError(f"{layer.layer_id}: pool kernel larger than input")
        return (c, (h - k) // s + 1, (w - k) // s + 1)
    if layer.kind == "flatten":
        return (int(np.prod(shape)),)
    if layer.kind == "add":
        if ins[0] != ins[1]:
            raise ModelError(f"{layer.layer_id}: add of mismatched shapes {ins}")
        return shape
    return shape


# ---------------------------------------------------------------------------
# reference architectures
# ---------------------------------------------------------------------------


def build_model(arch, input_shape, num_classes, widths=(), seed=0, dtype=np.float32, **options):
    """Build one of the desk-scale architectures.

    ``mlp``: hidden linear layers of ``widths`` (input flattened if needed).
    ``smallcnn``: per width a 3x3 conv, batch-norm (``batchnorm=True``), ReLU
    and 2x2 max-pool, then a linear classifier.
    ``smallresnet``: a 3x3 stem at ``widths[0]`` followed by one stage per
    width of ``blocks`` residual blocks (stride 2 from the second stage on),
    global average pooling and a linear classifier.  Blocks whose shape is
    preserved get identity shortcuts; the others are plain.
    """
    input_shape = tuple(int(d) for d in input_shape)
    widths = tuple(int(w) for w in widths)
    if num_classes < 1 or any(d < 1 for d in input_shape) or any(w < 1 for w in widths):
        raise ModelError("dimensions must be positive")
    build = {"arch": arch, "input_shape": list(input_shape), "num_classes": num_classes,
             "widths": list(widths), **options}
    if arch == "mlp":
        layers = _mlp(input_shape, num_classes, widths)
    elif arch == "smallcnn":
        layers = _smallcnn(input_shape, num_classes, widths, options.get("batchnorm", True))
    elif arch == "smallresnet":
        layers = _smallresnet(input_shape, num_classes, widths, options.get("blocks", 1))
    else:
        raise ModelError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
    return Model(layers, input_shape, num_classes, seed=seed, dtype=dtype, build=build)


def _mlp(input_shape, num_classes, widths):
    layers = []
    if len(input_shape) != 1:
        layers.append(LayerSpec("flatten", "flatten"))
    n_in = int(np.prod(input_shape))
    for i, w in enumerate(widths, 1):
        layers.append(LayerSpec("linear", f"fc{i}", {"in_features": n_in, "out_features": w}, True))
        layers.append(LayerSpec("relu", f"relu{i}"))
        n_in = w
    layers.append(LayerSpec("linear", "classifier", {"in_features": n_in, "out_features": num_classes}))
    return layers


def _smallcnn(input_shape, num_classes, widths, batchnorm):
    if len(input_shape) != 3:
        raise ModelError(f"smallcnn needs (C, H, W) input, got {input_shape}")
    c, h, w = input_shape
    if not widths:
        raise ModelError("smallcnn needs at least one width")
    layers = []
    for i, width in enumerate(widths, 1):
        if h < 2 or w < 2:
            raise ModelError(f"input {input_shape} too small for {len(widths)} pooling stages")
        layers.append(LayerSpec("conv2d", f"conv{i}", {
            "in_channels": c, "out_channels": width, "kernel": 3, "stride": 1, "padding": 1}, True))
        if batchnorm:
            layers.append(LayerSpec("batchnorm2d", f"bn{i}", {"channels": width}, True))
        layers.append(LayerSpec("relu", f"relu{i}"))
        layers.append(LayerSpec("pool", f"pool{i}", {"mode": "max", "kernel": 2, "stride": 2}))
        c, h, w = width, h // 2, w // 2
    layers.append(LayerSpec("flatten", "flatten"))
    layers.append(LayerSpec("linear", "classifier", {"in_features": c * h * w, "out_features": num_classes}))
    return layers


def _smallresnet(input_shape, num_classes, widths, blocks):
    if len(input_shape) != 3:
        raise ModelError(f"smallresnet needs (C, H, W) input, got {input_shape}")
    if not widths or blocks < 1:
        raise ModelError("smallresnet needs at least one stage and one block per stage")
    c, h, w = input_shape
    layers = [
        LayerSpec("conv2d", "stem.conv", {"in_channels": c, "out_channels": widths[0],
                                          "kernel": 3, "stride": 1, "padding": 1}, True),
        LayerSpec("batchnorm2d", "stem.bn", {"channels": widths[0]}, True),
        LayerSpec("relu", "stem.relu"),
    ]
    c = widths[0]
    prev = "stem.relu"
    for s, width in enumerate(widths, 1):
        for b in range(1, blocks + 1):
            stride = 2 if (s > 1 and b == 1) else 1
            if h < 2 and stride == 2:
                raise ModelError(f"input {input_shape} too small for {len(widths)} stages")
            p = f"s{s}b{b}"
            layers += [
                LayerSpec("conv2d", f"{p}.conv1", {"in_channels": c, "out_channels": width,
                                                   "kernel": 3, "stride": stride, "padding": 1}, True),
                LayerSpec("batchnorm2d", f"{p}.bn1", {"channels": width}, True),
                LayerSpec("relu", f"{p}.relu1"),
                LayerSpec("conv2d", f"{p}.conv2", {"in_channels": width, "out_channels": width,
                                                   "kernel": 3, "stride": 1, "padding": 1}, True),
                LayerSpec("batchnorm2d", f"{p}.bn2", {"channels": width}, True),
            ]
            if stride == 1 and c == width:
                layers.append(LayerSpec("add", f"{p}.add", inputs=(f"{p}.bn2", prev)))
            layers.append(LayerSpec("relu", f"{p}.relu2"))
            prev = f"{p}.relu2"
            if stride == 2:
                h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
            c = width
    layers += [
        LayerSpec("pool", "gap", {"mode": "avg", "kernel": h, "stride": h}),
        LayerSpec("flatten", "flatten"),
        LayerSpec("linear", "classifier", {"in_features": c, "out_features": num_classes}),
    ]
    if h != w:
        raise ModelError("smallresnet expects square inputs")
    return layers


# ---------------------------------------------------------------------------
# neurons
# ---------------------------------------------------------------------------


def tracked_neurons(model):
    """All tracked neurons in forward order."""
    return [NeuronId(l.layer_id, i) for l in model.tracked_layers() for i in range(l.neuron_count)]


def layer_outputs(record, model, layer_id):
    """(neurons, values) matrix of ``layer_id``'s observed outputs over the batch."""
    if not model.layer(layer_id).neq_tracked:
        raise ModelError(f"layer {layer_id!r} is not tracked")
    out = record.values[record.layer_slots[model.observation_layer(layer_id)]]
    return np.moveaxis(out, 1, 0).reshape(out.shape[1], -1)


def neuron_output_view(record, model, neuron):
    """Observed outputs of one neuron over the batch, flattened sample-major."""
    layer = model.layer(neuron.layer_id)
    if not layer.neq_tracked:
        raise ModelError(f"layer {neuron.layer_id!r} is not tracked")
    if not 0 <= neuron.index < layer.neuron_count:
        raise ModelError(f"neuron index {neuron.index} out of range for {neuron.layer_id}")
    out = record.values[record.layer_slots[model.observation_layer(neuron.layer_id)]]
    return np.ascontiguousarray(out[:, neuron.index]).reshape(-1)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = "neq-checkpoint 1"


def save_checkpoint(model, path):
    """Write ``<path>.bin`` (raw little-endian tensors) and ``<path>.manifest``.

    Manifest lines after the magic line: ``build <json>``, ``seed <int>``,
    ``dtype <name>``, then one ``tensor <layer_id> <role> <shape> <offset> <nbytes>``
    line per tensor, where shape is comma-separated and offsets index the
    binary file.
    """
    path = Path(path)
    entries = sorted(model.params.items()) + sorted(model.buffers.items())
    lines = [CHECKPOINT_MAGIC, "build " + json.dumps(model.build, sort_keys=True),
             f"seed {model.seed}", f"dtype {model.dtype.name}"]
    offset = 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for (lid, role), arr in entries:
            data = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
            fh.write(data)
            shape = ",".join(str(d) for d in arr.shape)
            lines.append(f"tensor {lid} {role} {shape} {offset} {len(data)}")
            offset += len(data)
    path.with_suffix(".manifest").write_text("\n".join(lines) + "\n")


def load_checkpoint(path):
    path = Path(path)
    lines = path.with_suffix(".manifest").read_text().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ModelError(f"{path}: not a checkpoint manifest")
    header = {}
    tensors = []
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        if key == "tensor":
            lid, role, shape, off, nbytes = rest.split(" ")
            dims = tuple(int(d) for d in shape.split(",")) if shape else ()
            tensors.append((lid, role, dims, int(off), int(nbytes)))
        else:
            header[key] = rest
    build = json.loads(header["build"])
    dtype = np.dtype(header["dtype"])
    arch = build.pop("arch")
    model = build_model(arch, seed=int(header["seed"]), dtype=dtype, **build)
    blob = path.with_suffix(".bin").read_bytes()
    for lid, role, dims, off, nbytes in tensors:
        arr = np.frombuffer(blob[off:off + nbytes], dtype=dtype.newbyteorder("<")).astype(dtype)
        arr = arr.reshape(dims)
        store = model.buffers if role.startswith("running_") else model.params
        if (lid, role) not in store or store[(lid, role)].shape != dims:
            raise ModelError(f"{path}: tensor {lid}/{role} does not fit the architecture")
        store[(lid, role)] = arr.copy()
    return model
