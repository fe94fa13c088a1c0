import json

import numpy as np
import pytest

from hwgq.layers import HWGQ, Conv2d, Dropout, Linear, batch_norm_forward
from hwgq.network import NetworkSpec, SpecError, build_network
from hwgq.quantizer import design
from hwgq.tensor import Rng, conv2d, matmul, max_pool2d

TOY = {
    "input_shape": [1, 8, 8],
    "num_classes": 3,
    "weights": "binary",
    "activations": "hwgq",
    "backward": "clipped",
    "layers": [
        {"type": "conv", "out": 4, "padding": 1},
        {"type": "conv", "out": 6, "padding": 1, "pool": 2},
        {"type": "conv", "out": 6, "padding": 1, "pool": 2},
        {"type": "fc", "out": 3},
    ],
}


@pytest.fixture(scope="module")
def u3():
    return design(3, uniform=True, n=100_000)


def kinds(net):
    return [type(l).__name__ for l in net.layers]


def test_toy_precision_layout(u3):
    net = build_network(NetworkSpec.from_dict(TOY), u3)
    convs = [l for l in net.layers if isinstance(l, (Conv2d, Linear))]
    assert [l.binary for l in convs] == [False, True, True, False]
    assert sum(isinstance(l, HWGQ) for l in net.layers) == 3
    # the classifier is last, with a bias and nothing after it
    assert isinstance(net.layers[-1], Linear) and net.layers[-1].bias is not None
    # binarized layers carry no bias
    assert all(l.bias is None for l in convs if l.binary)


def test_pool_before_batchnorm_in_quantized_block(u3):
    net = build_network(NetworkSpec.from_dict(TOY), u3)
    k = kinds(net)
    i = k.index("MaxPool2d")
    assert k[i - 1] == "Conv2d" and k[i + 1] == "BatchNorm" and k[i + 2] == "HWGQ"


def test_full_precision_block_order_and_reference_composition():
    spec = NetworkSpec.from_dict(
        {
            "input_shape": [2, 6, 6],
            "num_classes": 4,
            "layers": [{"type": "conv", "out": 3, "padding": 1, "pool": 2}, {"type": "fc", "out": 4}],
        }
    )
    net = build_network(spec, None, seed=3)
    assert kinds(net) == ["Conv2d", "BatchNorm", "ReLU", "MaxPool2d", "Flatten", "Linear"]
    x = Rng(1).normal(5 * 2 * 6 * 6).reshape(5, 2, 6, 6).astype(np.float32)
    conv, bn, _, _, _, fc = net.layers
    h = conv2d(x, conv.weight.value, 1, 1)
    h = batch_norm_forward(h, bn.bn, False)
    h = max_pool2d(np.maximum(h, 0), 2)
    want = matmul(h.reshape(5, -1), fc.weight.value.T) + fc.bias.value
    assert np.allclose(net.forward(x), want, rtol=1e-5, atol=1e-6)


def test_inference_deterministic(u3):
    net = build_network(NetworkSpec.from_dict(TOY), u3)
    x = Rng(2).normal(3 * 64).reshape(3, 1, 8, 8).astype(np.float32)
    assert net.forward(x).tobytes() == net.forward(x).tobytes()


def test_packed_inference_matches_float(u3):
    net = build_network(NetworkSpec.from_dict(TOY), u3)
    x = Rng(3).normal(4 * 64).reshape(4, 1, 8, 8).astype(np.float32)
    net.forward(x, training=True)  # move BN statistics off their defaults
    a = net.forward(x, packed=False)
    b = net.forward(x, packed=True)
    assert np.abs(a - b).max() <= 1e-4 * max(1.0, np.abs(a).max())


def test_backward_shapes_and_param_grads(u3):
    net = build_network(NetworkSpec.from_dict(TOY), u3)
    x = Rng(4).normal(5 * 64).reshape(5, 1, 8, 8).astype(np.float32)
    out = net.forward(x, training=True)
    gx = net.backward(np.ones_like(out))
    assert gx.shape == x.shape
    for p in net.params():
        assert p.grad is not None and p.grad.shape == p.value.shape


def test_spec_errors_name_the_layer():
    bad = json.loads(json.dumps(TOY))
    bad["layers"][0]["weights"] = "binary"
    with pytest.raises(SpecError, match=r"layers\[0\]"):
        NetworkSpec.from_dict(bad)
    bad = json.loads(json.dumps(TOY))
    bad["layers"][1]["kernal"] = 3
    with pytest.raises(SpecError, match=r"layers\[1\]\.kernal"):
        NetworkSpec.from_dict(bad)
    bad = json.loads(json.dumps(TOY))
    bad["layers"][-1] = {"type": "conv", "out": 3}
    with pytest.raises(SpecError, match="fc"):
        NetworkSpec.from_dict(bad)
    bad = json.loads(json.dumps(TOY))
    bad["layers"][2]["kernel"] = 9
    with pytest.raises(SpecError, match=r"layers\[2\]"):
        build_network(NetworkSpec.from_dict(bad), design(3, uniform=True, n=20_000))
    with pytest.raises(SpecError, match="quantizer"):
        build_network(NetworkSpec.from_dict(TOY), None)
    with pytest.raises(SpecError, match="backward"):
        NetworkSpec.from_dict({**TOY, "backward": "smooth"})


def test_spec_round_trip():
    spec = NetworkSpec.from_dict(TOY)
    assert NetworkSpec.from_dict(spec.to_dict()) == spec


def test_dropout_only_in_full_activation_nets(u3):
    full = {**TOY, "activations": "full", "dropout": 0.1}
    net = build_network(NetworkSpec.from_dict(full), u3)
    assert any(isinstance(l, Dropout) for l in net.layers)
    quant = {**TOY, "dropout": 0.1}
    net = build_network(NetworkSpec.from_dict(quant), u3)
    assert not any(isinstance(l, Dropout) for l in net.layers)


def test_reorder_override(u3):
    d = {**TOY, "reorder": False}
    k = kinds(build_network(NetworkSpec.from_dict(d), u3))
    i = k.index("MaxPool2d")
    assert k[i - 1] == "HWGQ"


def test_state_dict_round_trip(u3):
    a = build_network(NetworkSpec.from_dict(TOY), u3, seed=1)
    b = build_network(NetworkSpec.from_dict(TOY), u3, seed=2)
    x = Rng(5).normal(2 * 64).reshape(2, 1, 8, 8).astype(np.float32)
    a.forward(x, training=True)
    b.load_state_dict(a.state_dict())
    assert np.array_equal(a.forward(x), b.forward(x))
    with pytest.raises(KeyError):
        b.load_state_dict({})


def test_hard_tanh_rejected_for_hwgq_blocks():
    with pytest.raises(SpecError, match=r"layers\[0\]\.backward: hard_tanh"):
        NetworkSpec.from_dict({**TOY, "backward": "hard_tanh"})
    sign = {**TOY, "activations": "sign", "backward": "hard_tanh"}
    assert NetworkSpec.from_dict(sign).backward == "hard_tanh"
