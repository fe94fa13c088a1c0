"""Declarative network descriptions and the network container.

A :class:`NetworkSpec` is an ordered list of learnable layers (``conv`` or
``fc``). Each non-final layer expands into a block:

* quantized activations (``hwgq``/``sign``), or ``reorder: true``::

      conv -> max-pool -> batch-norm -> activation

* full activations::

      conv -> batch-norm -> ReLU -> max-pool

The first and last learnable layers always keep full-precision weights, and
the last layer emits raw logits (bias, no batch-norm, no activation).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .layers import (
    HWGQ,
    BackwardMode,
    BatchNorm,
    Conv2d,
    Dropout,
    Flatten,
    Layer,
    Linear,
    MaxPool2d,
    Param,
    ReLU,
    Sign,
    packable,
)
from .quantizer import QuantizerSpec
from .tensor import Rng, Tensor, conv_output_size

WEIGHTS = ("full", "binary")
ACTIVATIONS = ("full", "sign", "hwgq")


class SpecError(ValueError):
    """Invalid network or config document; the message starts with a field path."""


@dataclass
class LayerSpec:
    type: str
    out: int
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    pool: int = 0
    pool_stride: int | None = None
    weights: str | None = None
    activations: str | None = None
    backward: str | None = None
    reorder: bool | None = None


@dataclass
class NetworkSpec:
    input_shape: tuple[int, int, int]
    num_classes: int
    layers: list[LayerSpec]
    weights: str = "full"
    activations: str = "full"
    backward: str = "clipped"
    dropout: float = 0.0
    reorder: bool | None = None
    name: str = "net"

    @classmethod
    def from_dict(cls, d: dict, path: str = "network") -> "NetworkSpec":
        def req(obj, key, where):
            if key not in obj:
                raise SpecError(f"{where}.{key}: required field missing")
            return obj[key]

        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise SpecError(f"{path}.{key}: unknown field")
        layers = []
        for i, ld in enumerate(req(d, "layers", path)):
            where = f"{path}.layers[{i}]"
            if not isinstance(ld, dict):
                raise SpecError(f"{where}: expected an object")
            lknown = {f.name for f in fields(LayerSpec)} | {"out_channels", "out_features"}
            for key in ld:
                if key not in lknown:
                    raise SpecError(f"{where}.{key}: unknown field")
            kind = req(ld, "type", where)
            if kind not in ("conv", "fc"):
                raise SpecError(f"{where}.type: expected 'conv' or 'fc', got {kind!r}")
            out = ld.get("out", ld.get("out_channels", ld.get("out_features")))
            if out is None and i == len(d["layers"]) - 1:
                out = req(d, "num_classes", path)
            if not isinstance(out, int) or out < 1:
                raise SpecError(f"{where}.out: expected a positive integer, got {out!r}")
            opts = {k: v for k, v in ld.items() if k not in ("type", "out", "out_channels", "out_features")}
            layers.append(LayerSpec(type=kind, out=out, **opts))
        spec = cls(
            input_shape=tuple(req(d, "input_shape", path)),
            num_classes=req(d, "num_classes", path),
            layers=layers,
            **{k: v for k, v in d.items() if k not in ("input_shape", "num_classes", "layers")},
        )
        spec.validate(path)
        return spec

    @classmethod
    def load(cls, path) -> "NetworkSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "weights": self.weights,
            "activations": self.activations,
            "backward": self.backward,
            "dropout": self.dropout,
            "reorder": self.reorder,
            "layers": [],
        }
        for ls in self.layers:
            entry = {"type": ls.type, "out": ls.out}
            for f in fields(LayerSpec):
                v = getattr(ls, f.name)
                if f.name not in ("type", "out") and v is not None and v != f.default:
                    entry[f.name] = v
            out["layers"].append(entry)
        return out

    def validate(self, path: str = "network") -> None:
        if len(self.input_shape) != 3 or any(not isinstance(v, int) or v < 1 for v in self.input_shape):
            raise SpecError(f"{path}.input_shape: expected [C, H, W] of positive ints")
        if not self.layers:
            raise SpecError(f"{path}.layers: at least one layer is required")
        if self.weights not in WEIGHTS:
            raise SpecError(f"{path}.weights: expected one of {WEIGHTS}")
        if self.activations not in ACTIVATIONS:
            raise SpecError(f"{path}.activations: expected one of {ACTIVATIONS}")
        _mode(self.backward, f"{path}.backward")
        if not 0.0 <= self.dropout < 1.0:
            raise SpecError(f"{path}.dropout: must lie in [0, 1)")
        last = len(self.layers) - 1
        for i, ls in enumerate(self.layers):
            where = f"{path}.layers[{i}]"
            if ls.weights is not None and ls.weights not in WEIGHTS:
                raise SpecError(f"{where}.weights: expected one of {WEIGHTS}")
            if ls.activations is not None and ls.activations not in ACTIVATIONS:
                raise SpecError(f"{where}.activations: expected one of {ACTIVATIONS}")
            if ls.backward is not None:
                _mode(ls.backward, f"{where}.backward")
            if i in (0, last) and ls.weights == "binary":
                raise SpecError(f"{where} ({ls.type}): first and last layers must keep full-precision weights")
            for key in ("kernel", "stride"):
                if getattr(ls, key) < 1:
                    raise SpecError(f"{where}.{key}: must be >= 1")
            if ls.padding < 0 or ls.pool < 0:
                raise SpecError(f"{where}: padding and pool must be >= 0")
        for i in range(last):
            blk = self.block(i)
            if blk["activations"] == "hwgq" and blk["backward"] == BackwardMode.HARD_TANH.value:
                raise SpecError(
                    f"{path}.layers[{i}].backward: hard_tanh is the backward of sign activations; "
                    "hwgq needs vanilla, clipped or log_tailed"
                )
        if self.layers[last].type != "fc":
            raise SpecError(f"{path}.layers[{last}].type: the classifier must be an 'fc' layer")
        if self.layers[last].out != self.num_classes:
            raise SpecError(f"{path}.layers[{last}].out: must equal num_classes={self.num_classes}")

    def block(self, i: int) -> dict:
        """Resolved precision settings of layer ``i``."""
        ls = self.layers[i]
        last = len(self.layers) - 1
        binary = i not in (0, last) and (ls.weights or self.weights) == "binary"
        act = None if i == last else (ls.activations or self.activations)
        backward = ls.backward or self.backward
        reorder = ls.reorder if ls.reorder is not None else self.reorder
        if reorder is None:
            reorder = act in ("hwgq", "sign")
        return {"binary": binary, "activations": act, "backward": backward, "reorder": reorder}


def _mode(value, where) -> BackwardMode:
    try:
        return BackwardMode(value)
    except ValueError:
        raise SpecError(f"{where}: unknown backward mode {value!r}") from None


class Network:
    def __init__(self, layers: list[Layer], spec: NetworkSpec | None = None, quantizer=None):
        self.layers = layers
        self.spec = spec
        self.quantizer = quantizer

    def forward(self, x: Tensor, training: bool = False, packed: bool = False) -> Tensor:
        for layer in self.layers:
            x = layer.forward(x, training, packed)
        return x

    __call__ = forward

    def backward(self, grad: Tensor) -> Tensor:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params()]

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            out.update(layer.buffers())
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {p.name: p.value for p in self.params()}
        out.update(self.buffers())
        return out

    def load_state_dict(self, values: dict[str, np.ndarray]) -> None:
        for p in self.params():
            if p.name not in values:
                raise KeyError(f"missing tensor {p.name}")
            if values[p.name].shape != p.value.shape:
                raise ValueError(f"{p.name}: shape {values[p.name].shape} != {p.value.shape}")
            p.value[...] = values[p.name]
        for layer in self.layers:
            layer.load_buffers(values)

    def set_rng(self, rng: Rng) -> None:
        for layer in self.layers:
            if isinstance(layer, Dropout):
                layer.rng = rng

    def binary_layers(self):
        return [l for l in self.layers if isinstance(l, (Conv2d, Linear)) and l.binary]

    def describe(self) -> list[str]:
        out = []
        for layer in self.layers:
            tag = type(layer).__name__
            if isinstance(layer, (Conv2d, Linear)):
                tag += "[binary]" if layer.binary else "[full]"
            if isinstance(layer, HWGQ):
                tag += f"[{layer.mode.value}]"
            out.append(tag)
        return out


def build_network(spec: NetworkSpec, quantizer: QuantizerSpec | None = None, seed: int = 0) -> Network:
    """Expand ``spec`` into layers with shapes checked along the chain."""
    spec.validate()
    rng = Rng(seed)
    c, h, w = spec.input_shape
    flat = None
    layers: list[Layer] = []
    last = len(spec.layers) - 1
    # input alphabet of the next layer, when it is a packable quantizer's output
    alphabet: QuantizerSpec | None = None
    for i, ls in enumerate(spec.layers):
        name = f"l{i}"
        where = f"layers[{i}] ({ls.type})"
        blk = spec.block(i)
        if blk["activations"] in ("hwgq",) and quantizer is None:
            raise SpecError(f"{where}: hwgq activations need a quantizer table")
        if ls.type == "conv":
            if flat is not None:
                raise SpecError(f"{where}: conv layer cannot follow a fully connected layer")
            if ls.kernel > h + 2 * ls.padding or ls.kernel > w + 2 * ls.padding:
                raise SpecError(f"{where}: kernel {ls.kernel} exceeds input {h}x{w} (padding {ls.padding})")
            conv = Conv2d(name, c, ls.out, ls.kernel, ls.stride, ls.padding, blk["binary"], i == last, rng)
            if conv.binary and alphabet is not None:
                conv.input_spec = alphabet
            layers.append(conv)
            c = ls.out
            h = conv_output_size(h, ls.kernel, ls.stride, ls.padding)
            w = conv_output_size(w, ls.kernel, ls.stride, ls.padding)
        else:
            if flat is None:
                layers.append(Flatten(f"{name}.flatten"))
                flat = c * h * w
            layers.append(Linear(name, flat, ls.out, blk["binary"], i == last, rng))
            flat = ls.out
        alphabet = None
        if i == last:
            break

        def pool():
            nonlocal h, w
            if not ls.pool:
                return
            if flat is not None:
                raise SpecError(f"{where}: pooling needs a spatial input")
            stride = ls.pool_stride or ls.pool
            if ls.pool > h or ls.pool > w:
                raise SpecError(f"{where}: pooling window {ls.pool} larger than {h}x{w}")
            layers.append(MaxPool2d(f"{name}.pool", ls.pool, stride))
            h = (h - ls.pool) // stride + 1
            w = (w - ls.pool) // stride + 1

        channels = ls.out
        act = blk["activations"]
        if blk["reorder"]:
            pool()
        layers.append(BatchNorm(f"{name}.bn", channels))
        if act == "hwgq":
            layers.append(HWGQ(f"{name}.hwgq", quantizer, _mode(blk["backward"], where)))
            if packable(quantizer):
                alphabet = quantizer
        elif act == "sign":
            layers.append(Sign(f"{name}.sign"))
        else:
            layers.append(ReLU(f"{name}.relu"))
        if not blk["reorder"]:
            pool()
        if act == "full" and spec.dropout > 0 and (ls.type == "fc" or i + 1 == last):
            layers.append(Dropout(f"{name}.dropout", spec.dropout))
            alphabet = None
        if h < 1 or w < 1:
            raise SpecError(f"{where}: output collapses to {h}x{w}")
    return Network(layers, spec, quantizer)
