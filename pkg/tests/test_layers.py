import numpy as np
import pytest

from neq.engine import EngineError
from neq.layers import (
    LayerSpec, Model, ModelError, NeuronId, build_model, layer_outputs, load_checkpoint,
    neuron_output_view, save_checkpoint, tracked_neurons,
)


def test_mlp_tracks_hidden_units_only():
    model = build_model("mlp", (784,), 10, [128])
    ids = tracked_neurons(model)
    assert len(ids) == 128
    assert {n.layer_id for n in ids} == {"fc1"}


def test_mlp_without_hidden_layers_tracks_nothing():
    assert tracked_neurons(build_model("mlp", (4,), 3, [])) == []


@pytest.mark.parametrize("batchnorm,count", [(True, 8 + 8 + 16 + 16), (False, 8 + 16)])
def test_smallcnn_tracked_count(batchnorm, count):
    model = build_model("smallcnn", (1, 8, 8), 10, [8, 16], batchnorm=batchnorm)
    ids = tracked_neurons(model)
    assert len(ids) == count
    order = ["conv1", "bn1", "conv2", "bn2"] if batchnorm else ["conv1", "conv2"]
    assert list(dict.fromkeys(n.layer_id for n in ids)) == order


def test_enumeration_is_stable():
    a = tracked_neurons(build_model("smallresnet", (1, 8, 8), 4, [4, 8], seed=1))
    b = tracked_neurons(build_model("smallresnet", (1, 8, 8), 4, [4, 8], seed=2))
    assert a == b


def test_smallresnet_structure():
    model = build_model("smallresnet", (1, 8, 8), 4, [4, 8], blocks=2)
    kinds = [l.kind for l in model.layers]
    # identity shortcut for every shape-preserving block, none for the transition block
    adds = [l.layer_id for l in model.layers if l.kind == "add"]
    assert adds == ["s1b1.add", "s1b2.add", "s2b2.add"]
    assert kinds[-3:] == ["pool", "flatten", "linear"]
    assert model.shapes["classifier"] == (4,)
    assert model.shapes["s2b1.conv1"] == (8, 4, 4)


def test_init_is_seeded_and_kaiming_scaled():
    a = build_model("mlp", (400,), 3, [300], seed=5)
    b = build_model("mlp", (400,), 3, [300], seed=5)
    c = build_model("mlp", (400,), 3, [300], seed=6)
    assert np.array_equal(a.params[("fc1", "weight")], b.params[("fc1", "weight")])
    assert not np.array_equal(a.params[("fc1", "weight")], c.params[("fc1", "weight")])
    w = a.params[("fc1", "weight")].astype(np.float64)
    assert abs(w.std() - np.sqrt(2 / 400)) < 0.01 * np.sqrt(2 / 400) * 10
    assert not a.params[("fc1", "bias")].any()


def test_batchnorm_init():
    model = build_model("smallcnn", (1, 4, 4), 2, [3])
    assert np.array_equal(model.params[("bn1", "weight")], np.ones(3, np.float32))
    assert not model.params[("bn1", "bias")].any()
    assert not model.buffers[("bn1", "running_mean")].any()
    assert np.array_equal(model.buffers[("bn1", "running_var")], np.ones(3, np.float32))


def test_linear_neuron_view_single_sample_is_scalar():
    model = build_model("mlp", (3,), 2, [4], dtype=np.float64)
    rec = model.forward(np.ones((1, 3)))
    v = neuron_output_view(rec, model, NeuronId("fc1", 2))
    assert v.shape == (1,)


def test_conv_channel_view_is_sample_major_row_major():
    layers = [LayerSpec("conv2d", "c", {"in_channels": 1, "out_channels": 2, "kernel": 1}, True),
              LayerSpec("flatten", "f"),
              LayerSpec("linear", "out", {"in_features": 32, "out_features": 2})]
    model = Model(layers, (1, 4, 4), 2, dtype=np.float64)
    model.params[("c", "weight")][:] = np.array([1.0, -1.0]).reshape(2, 1, 1, 1)
    x = np.arange(32.0).reshape(2, 1, 4, 4)
    rec = model.forward(x)
    v = neuron_output_view(rec, model, NeuronId("c", 1))
    assert v.shape == (32,)
    assert np.array_equal(v, -np.arange(32.0))
    assert np.array_equal(layer_outputs(rec, model, "c")[1], v)


def test_observation_point_is_after_relu():
    model = build_model("mlp", (2,), 2, [2], dtype=np.float64)
    model.params[("fc1", "weight")][:] = np.array([[1.0, 0.0], [-1.0, 0.0]])
    rec = model.forward(np.array([[2.0, 0.0]]))
    # pre-activations are (2, -2); the observed values are post-ReLU
    assert layer_outputs(rec, model, "fc1").tolist() == [[2.0], [0.0]]
    assert model.observation_layer("fc1") == "relu1"


def test_tiny_net_hand_evaluated_intermediates():
    layers = [LayerSpec("linear", "fc", {"in_features": 2, "out_features": 2}, True),
              LayerSpec("relu", "r"),
              LayerSpec("linear", "out", {"in_features": 2, "out_features": 1})]
    model = Model(layers, (2,), 1, dtype=np.float64)
    model.params[("fc", "weight")][:] = [[1.0, 2.0], [3.0, -4.0]]
    model.params[("fc", "bias")][:] = [0.5, 0.0]
    model.params[("out", "weight")][:] = [[2.0, 1.0]]
    rec = model.forward(np.array([[1.0, 1.0], [2.0, 0.0]]))
    # sample 1: (3.5, -1) -> relu (3.5, 0); sample 2: (2.5, 6) -> (2.5, 6)
    assert layer_outputs(rec, model, "fc").tolist() == [[3.5, 2.5], [0.0, 6.0]]
    assert rec.output.ravel().tolist() == [7.0, 11.0]


def test_view_errors():
    model = build_model("mlp", (3,), 2, [4])
    rec = model.forward(np.ones((1, 3), np.float32))
    with pytest.raises(ModelError):
        neuron_output_view(rec, model, NeuronId("classifier", 0))
    with pytest.raises(ModelError):
        neuron_output_view(rec, model, NeuronId("fc1", 4))


def test_construction_errors():
    with pytest.raises(ModelError):
        build_model("vgg", (1, 8, 8), 2, [4])
    with pytest.raises(ModelError):
        LayerSpec("softmax", "s")
    with pytest.raises(ModelError):
        LayerSpec("relu", "r", neq_tracked=True)
    with pytest.raises(ModelError):
        build_model("smallcnn", (1, 2, 2), 2, [4, 4])
    with pytest.raises(ModelError):
        Model([LayerSpec("linear", "a", {"in_features": 3, "out_features": 2})], (4,), 2)
    with pytest.raises(EngineError):
        build_model("mlp", (3,), 2, [4]).forward(np.ones((1, 4), np.float32))


@pytest.mark.parametrize("arch,widths,opts", [
    ("mlp", [5], {}), ("smallcnn", [3, 4], {}), ("smallresnet", [2, 4], {"blocks": 1}),
])
def test_checkpoint_round_trip(tmp_path, arch, widths, opts):
    shape = (6,) if arch == "mlp" else (1, 8, 8)
    model = build_model(arch, shape, 3, widths, seed=3, **opts)
    rng = np.random.default_rng(0)
    for arr in model.params.values():
        arr += rng.standard_normal(arr.shape).astype(arr.dtype)
    for arr in model.buffers.values():
        arr += rng.random(arr.shape).astype(arr.dtype)
    save_checkpoint(model, tmp_path / "m")
    manifest = (tmp_path / "m.manifest").read_text().splitlines()
    assert manifest[0] == "neq-checkpoint 1"
    back = load_checkpoint(tmp_path / "m")
    assert back.params.keys() == model.params.keys()
    for store in ("params", "buffers"):
        for k, v in getattr(model, store).items():
            got = getattr(back, store)[k]
            assert got.dtype == v.dtype and np.array_equal(got, v)
    x = rng.standard_normal((2, *shape)).astype(np.float32)
    assert np.array_equal(back.forward(x).output, model.forward(x).output)


def test_checkpoint_rejects_foreign_manifest(tmp_path):
    (tmp_path / "m.manifest").write_text("something else\n")
    (tmp_path / "m.bin").write_bytes(b"")
    with pytest.raises(ModelError):
        load_checkpoint(tmp_path / "m")
