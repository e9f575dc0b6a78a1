"""Analytic FLOPs accounting.

Conventions: one multiply-accumulate is 2 FLOPs.  Per sample, a conv layer
costs ``2*kh*kw*Cin*Cout*Ho*Wo`` forward and a linear layer ``2*in*out``; the
weight-gradient and input-gradient passes of both are costed like the forward
pass.  Batch-norm, ReLU, pooling and residual adds are costed at their element
counts.  The optimizer is costed per updated parameter per step.

Backward cost of one iteration under a freeze mask::

    sum_l  B * wgrad_l * u_l  +  B * igrad_l * [l past horizon]  +  opt * active_params_l

where ``u_l`` is the non-frozen fraction of layer ``l``.  The horizon follows
the engine: a layer's input gradient is computed only if one of its inputs is
produced at or after the first parameterized layer with a non-frozen neuron.
"""

from dataclasses import dataclass

import numpy as np

# FLOPs per updated parameter per step
OPTIMIZER_FLOPS = {"sgd": 6, "adam": 16}


class FlopsError(ValueError):
    pass


@dataclass
class LayerCost:
    layer_id: str
    kind: str
    forward: int
    weight_grad: int
    input_grad: int
    optimizer_per_param: int
    params_per_neuron: int
    neuron_count: int


def layer_costs(model, optimizer="sgd"):
    """Per-sample costs for every layer of ``model`` in forward order."""
    if optimizer not in OPTIMIZER_FLOPS:
        raise FlopsError(f"unknown optimizer {optimizer!r}")
    opt = OPTIMIZER_FLOPS[optimizer]
    costs = []
    for i, layer in enumerate(model.layers):
        sz = layer.size
        in_shape = model.shapes[model.layer_inputs(i)[0]]
        out_shape = model.shapes[layer.layer_id]
        out_elems = int(np.prod(out_shape))
        in_elems = int(np.prod(in_shape))
        if layer.kind == "conv2d":
            k = sz["kernel"]
            fwd = 2 * k * k * sz["in_channels"] * sz["out_channels"] * out_shape[1] * out_shape[2]
            costs.append(LayerCost(layer.layer_id, layer.kind, fwd, fwd, fwd, opt,
                                   sz["in_channels"] * k * k + 1, sz["out_channels"]))
        elif layer.kind == "linear":
            fwd = 2 * sz["in_features"] * sz["out_features"]
            costs.append(LayerCost(layer.layer_id, layer.kind, fwd, fwd, fwd, opt,
                                   sz["in_features"] + 1, sz["out_features"]))
        elif layer.kind == "batchnorm2d":
            costs.append(LayerCost(layer.layer_id, layer.kind, out_elems, out_elems, out_elems,
                                   opt, 2, sz["channels"]))
        elif layer.kind in ("relu", "add"):
            costs.append(LayerCost(layer.layer_id, layer.kind, out_elems, 0, out_elems, 0, 0, 0))
        elif layer.kind == "pool":
            costs.append(LayerCost(layer.layer_id, layer.kind, in_elems, 0, in_elems, 0, 0, 0))
        elif layer.kind == "flatten":
            costs.append(LayerCost(layer.layer_id, layer.kind, 0, 0, 0, 0, 0, 0))
        else:
            raise FlopsError(f"unknown layer kind {layer.kind!r}")
    return costs


def forward_flops(costs, batch_size=1):
    return batch_size * sum(c.forward for c in costs)


def _horizon_flags(model, costs, mask):
    """True for layers whose input gradient is computed under ``mask``."""
    index = {c.layer_id: i for i, c in enumerate(costs)}
    horizon = None
    for i, c in enumerate(costs):
        if c.neuron_count and not np.asarray(mask[c.layer_id]).all():
            horizon = i
            break
    if horizon is None:
        return [False] * len(costs)
    flags = []
    for i, c in enumerate(costs):
        producers = [index.get(s, -1) for s in model.layer_inputs(i)]
        flags.append(i >= horizon and any(p >= horizon for p in producers))
    return flags


def bprop_flops(model, costs, mask, batch_size, include_optimizer=True):
    """Backward FLOPs of one iteration under ``mask`` (layer id -> bool frozen array)."""
    for c in costs:
        if c.neuron_count:
            if c.layer_id not in mask:
                raise FlopsError(f"mask does not cover layer {c.layer_id!r}")
            if np.asarray(mask[c.layer_id]).shape != (c.neuron_count,):
                raise FlopsError(f"mask for {c.layer_id!r} has the wrong length")
    flags = _horizon_flags(model, costs, mask)
    total = 0.0
    for c, past_horizon in zip(costs, flags):
        if c.neuron_count:
            active = int(np.count_nonzero(~np.asarray(mask[c.layer_id])))
            total += batch_size * c.weight_grad * active / c.neuron_count
            if include_optimizer:
                total += c.optimizer_per_param * c.params_per_neuron * active
        if past_horizon:
            total += batch_size * c.input_grad
    return total


def epoch_summary(per_iteration):
    """(mean, population stddev) of per-iteration FLOPs."""
    values = np.asarray(per_iteration, dtype=np.float64)
    if values.size == 0:
        raise FlopsError("epoch_summary needs at least one iteration")
    return float(values.mean()), float(values.std())


def full_mask(model, frozen=False):
    """Mask with every parameterized layer all-frozen or all-updated."""
    return {l.layer_id: np.full(l.neuron_count, frozen) for l in model.parameterized_layers()}
