"""Reference architectures built from a JSON-able layer list.

A model is an ordered list of layer specs plus the parameters of its
compute layers.  The same spec drives the float forward, the fake-quant
forward, integer conversion and the checkpoint topology section.
"""
from __future__ import annotations

import copy
import math

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor

COMPUTE = ("conv", "linear")


def smallconv_layers(in_shape, num_classes: int) -> list[dict]:
    c, h, w = in_shape
    return [
        {"type": "conv", "name": "conv1", "in": c, "out": 16, "k": 3, "stride": 1, "pad": 1},
        {"type": "relu"},
        {"type": "maxpool", "k": 2},
        {"type": "conv", "name": "conv2", "in": 16, "out": 32, "k": 3, "stride": 1, "pad": 1},
        {"type": "relu"},
        {"type": "maxpool", "k": 2},
        {"type": "flatten"},
        {"type": "linear", "name": "fc", "in": 32 * (h // 4) * (w // 4), "out": num_classes},
    ]


def mlp_layers(in_shape, num_classes: int, hidden: int = 128) -> list[dict]:
    n_in = int(np.prod(in_shape))
    return [
        {"type": "flatten"},
        {"type": "linear", "name": "fc1", "in": n_in, "out": hidden},
        {"type": "relu"},
        {"type": "linear", "name": "fc2", "in": hidden, "out": num_classes},
    ]


ARCHS = {"smallconv": smallconv_layers, "mlp": mlp_layers}


def activation_sites(layers: list[dict]) -> list[tuple[str, int]]:
    """Quantization sites as (name, layer index after which the site sits).

    ``input`` sits before layer 0.  Each compute layer gets one site placed
    after its trailing ReLU when there is one.
    """
    sites = [("input", -1)]
    for i, spec in enumerate(layers):
        if spec["type"] in COMPUTE:
            j = i + 1 if i + 1 < len(layers) and layers[i + 1]["type"] == "relu" else i
            sites.append((spec["name"] + ".out", j))
    return sites


class Model:
    """Feed-forward classifier over a fixed layer list."""

    def __init__(self, arch: str, in_shape, num_classes: int, layers: list[dict] | None = None):
        self.arch = arch
        self.in_shape = tuple(int(v) for v in in_shape)
        self.num_classes = int(num_classes)
        self.layers = layers if layers is not None else ARCHS[arch](self.in_shape, num_classes)
        self.params: dict[str, Parameter] = {}
        for spec in self.layers:
            if spec["type"] == "conv":
                self.params[spec["name"] + ".weight"] = Parameter(
                    np.zeros((spec["out"], spec["in"], spec["k"], spec["k"]), np.float32))
                self.params[spec["name"] + ".bias"] = Parameter(np.zeros(spec["out"], np.float32))
            elif spec["type"] == "linear":
                self.params[spec["name"] + ".weight"] = Parameter(
                    np.zeros((spec["out"], spec["in"]), np.float32))
                self.params[spec["name"] + ".bias"] = Parameter(np.zeros(spec["out"], np.float32))
        self.sites = activation_sites(self.layers)

    @classmethod
    def create(cls, arch: str, in_shape, num_classes: int, rng: np.random.Generator) -> "Model":
        model = cls(arch, in_shape, num_classes)
        model.init_weights(rng)
        return model

    def init_weights(self, rng: np.random.Generator):
        # Kaiming-uniform over fan-in, zero bias.
        for name, p in self.params.items():
            if name.endswith(".weight"):
                fan_in = int(np.prod(p.shape[1:]))
                bound = math.sqrt(6.0 / fan_in)
                p.data = rng.uniform(-bound, bound, size=p.shape).astype(np.float32)
            else:
                p.data = np.zeros(p.shape, np.float32)
            p.zero_grad()

    def topology(self) -> dict:
        return {"arch": self.arch, "in_shape": list(self.in_shape),
                "num_classes": self.num_classes, "layers": copy.deepcopy(self.layers)}

    @classmethod
    def from_topology(cls, topo: dict) -> "Model":
        return cls(topo["arch"], topo["in_shape"], topo["num_classes"], copy.deepcopy(topo["layers"]))

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def maskable(self) -> dict[str, Parameter]:
        """Conv and linear weight matrices; biases are never masked."""
        return {k: p for k, p in self.params.items() if k.endswith(".weight")}

    def num_weights(self) -> int:
        return sum(p.size for p in self.maskable().values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def clone(self) -> "Model":
        other = Model(self.arch, self.in_shape, self.num_classes, copy.deepcopy(self.layers))
        for k, p in self.params.items():
            other.params[k].data = p.data.copy()
        return other

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for k, p in self.params.items():
            if arrays[k].shape != p.shape:
                raise ag.ShapeError(f"{k}: expected {p.shape}, got {arrays[k].shape}")
            p.data = np.array(arrays[k], dtype=np.float32)

    def forward(self, x, quant=None) -> Tensor:
        """Float forward.  ``quant`` (optional) supplies ``weight(name, p)`` and
        ``activation(site, t)`` hooks used for fake quantization."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, np.float32))
        site_after = {idx: name for name, idx in self.sites}
        if quant is not None:
            x = quant.activation("input", x)
        for i, spec in enumerate(self.layers):
            t = spec["type"]
            if t in COMPUTE:
                w = self.params[spec["name"] + ".weight"]
                b = self.params[spec["name"] + ".bias"]
                if quant is not None:
                    w = quant.weight(spec["name"] + ".weight", w)
                if t == "conv":
                    x = ag.conv2d(x, w, b, stride=spec["stride"], pad=spec["pad"])
                else:
                    x = ag.linear(x, w, b)
            elif t == "relu":
                x = ag.relu(x)
            elif t == "maxpool":
                x = ag.maxpool2d(x, spec["k"])
            elif t == "flatten":
                x = ag.flatten(x)
            else:
                raise ValueError(f"unknown layer type {t!r}")
            if quant is not None and i in site_after:
                x = quant.activation(site_after[i], x)
        return x

    __call__ = forward

    def predict_logits(self, x: np.ndarray, quant=None) -> np.ndarray:
        with ag.no_grad():
            return self.forward(x, quant).data
