"""Target architectures as pure parameter specifications.

A target network owns no state: :func:`forward` consumes a list of parameter
tensors laid out exactly as :func:`build_spec` describes.  Fully connected
weights are stored ``(in, out)`` so a layer computes ``x @ W + b``; a
low-rank layer stores ``U (in, r)`` and ``V (out, r)`` and computes
``(x @ U) @ V.T + b`` without materialising ``U V^T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError

ROLES = (
    "conv_kernel",
    "conv_bias",
    "fc_weight",
    "fc_bias",
    "lstm_gate_weight",
    "lstm_gate_bias",
    "lrd_U",
    "lrd_V",
)

KINDS = ("mlp", "cnn_small", "cnn_large", "lstm")

_DEFAULTS = {
    "mlp": {"sizes": [784, 128, 10]},
    # ~108K parameters with the defaults (stand-in for the 108,618-parameter CNN)
    "cnn_small": {"in_channels": 1, "image_size": 28, "channels": [8, 16], "kernel": 5, "hidden": 132, "classes": 10},
    # ~538K parameters with the defaults
    "cnn_large": {"in_channels": 1, "image_size": 28, "channels": [32, 64], "kernel": 5, "hidden": 154, "classes": 10},
    "lstm": {"input_size": 1, "hidden_size": 32, "output_size": 1},
}


@dataclass(frozen=True)
class LayerSpec:
    name: str
    role: str
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class ParameterSpec:
    """Ordered layer shapes and the flat layout they induce."""

    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ContractError(f"duplicate layer names in spec: {names}")
        for layer in self.layers:
            if layer.role not in ROLES:
                raise ContractError(f"unknown role {layer.role!r} for layer {layer.name}")

    @property
    def sizes(self) -> list[int]:
        return [layer.size for layer in self.layers]

    @property
    def offsets(self) -> list[int]:
        return [int(o) for o in np.concatenate([[0], np.cumsum(self.sizes)[:-1]])] if self.layers else []

    @property
    def flat_size(self) -> int:
        return int(sum(self.sizes))

    @property
    def names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(name) from None

    def subset(self, names: Sequence[str]) -> "ParameterSpec":
        keep = set(names)
        return ParameterSpec(tuple(layer for layer in self.layers if layer.name in keep))

    def groups(self) -> list[list[str]]:
        """Layer names grouped by logical layer (``conv1.weight`` + ``conv1.bias``)."""
        out: dict[str, list[str]] = {}
        for layer in self.layers:
            out.setdefault(layer.name.rsplit(".", 1)[0], []).append(layer.name)
        return list(out.values())


@dataclass(frozen=True)
class TargetArchitecture:
    """Kind, hyperparameters and optional low-rank table for fc layers.

    ``lrd`` maps an fc layer prefix (``"fc1"``) to its rank.
    """

    kind: str
    hyper: dict = field(default_factory=dict)
    lrd: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown architecture kind {self.kind!r}", [("arch.kind", f"must be one of {KINDS}")])
        merged = dict(_DEFAULTS[self.kind])
        merged.update(self.hyper)
        object.__setattr__(self, "hyper", merged)
        object.__setattr__(self, "lrd", {str(k): int(v) for k, v in dict(self.lrd).items()})

    @property
    def spec(self) -> ParameterSpec:
        return build_spec(self)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "hyper": dict(self.hyper), "lrd": dict(self.lrd)}

    @classmethod
    def from_dict(cls, d: dict) -> "TargetArchitecture":
        return cls(d["kind"], dict(d.get("hyper", {})), dict(d.get("lrd", {})))


def mlp(sizes=(784, 128, 10), lrd=None) -> TargetArchitecture:
    return TargetArchitecture("mlp", {"sizes": list(sizes)}, lrd or {})


def cnn_small(**hyper) -> TargetArchitecture:
    lrd = hyper.pop("lrd", None) or {}
    return TargetArchitecture("cnn_small", hyper, lrd)


def cnn_large(**hyper) -> TargetArchitecture:
    lrd = hyper.pop("lrd", None) or {}
    return TargetArchitecture("cnn_large", hyper, lrd)


def lstm(input_size=1, hidden_size=32, output_size=1) -> TargetArchitecture:
    return TargetArchitecture("lstm", {"input_size": input_size, "hidden_size": hidden_size, "output_size": output_size})


def _positive(arch: TargetArchitecture, key: str, value) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value <= 0:
        raise ConfigError(f"{arch.kind}: {key} must be a positive integer, got {value!r}", [(f"arch.hyper.{key}", "must be > 0")])
    return int(value)


def _fc_layers(arch: TargetArchitecture, name: str, n_in: int, n_out: int) -> list[LayerSpec]:
    rank = arch.lrd.get(name)
    if rank is None:
        return [LayerSpec(f"{name}.weight", "fc_weight", (n_in, n_out)), LayerSpec(f"{name}.bias", "fc_bias", (n_out,))]
    if rank <= 0:
        raise ConfigError(f"low-rank factor for {name} must be positive, got {rank}", [(f"arch.lrd.{name}", "rank must be >= 1")])
    return [
        LayerSpec(f"{name}.U", "lrd_U", (n_in, rank)),
        LayerSpec(f"{name}.V", "lrd_V", (n_out, rank)),
        LayerSpec(f"{name}.bias", "fc_bias", (n_out,)),
    ]


def _cnn_geometry(arch: TargetArchitecture) -> tuple[list[int], int, int]:
    h = arch.hyper
    size = _positive(arch, "image_size", h["image_size"])
    k = _positive(arch, "kernel", h["kernel"])
    chans = [_positive(arch, "in_channels", h["in_channels"])]
    for c in h["channels"]:
        chans.append(_positive(arch, "channels", c))
    for _ in h["channels"]:
        size //= 2  # same-padding conv followed by 2x2 pooling
        if size <= 0:
            raise ConfigError("image too small for the number of pooling stages", [("arch.hyper.image_size", "too small")])
    return chans, k, chans[-1] * size * size


def build_spec(arch: TargetArchitecture) -> ParameterSpec:
    """Per-layer shapes in forward order, weights before biases."""
    h = arch.hyper
    layers: list[LayerSpec] = []
    if arch.kind == "mlp":
        sizes = [_positive(arch, "sizes", s) for s in h["sizes"]]
        if len(sizes) < 2:
            raise ConfigError("mlp needs at least input and output sizes", [("arch.hyper.sizes", "need >= 2 entries")])
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
            layers += _fc_layers(arch, f"fc{i}", a, b)
    elif arch.kind in ("cnn_small", "cnn_large"):
        chans, k, flat = _cnn_geometry(arch)
        for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:]), start=1):
            layers.append(LayerSpec(f"conv{i}.weight", "conv_kernel", (cout, cin, k, k)))
            layers.append(LayerSpec(f"conv{i}.bias", "conv_bias", (cout,)))
        hidden = _positive(arch, "hidden", h["hidden"])
        classes = _positive(arch, "classes", h["classes"])
        layers += _fc_layers(arch, "fc1", flat, hidden)
        layers += _fc_layers(arch, "fc2", hidden, classes)
    elif arch.kind == "lstm":
        f = _positive(arch, "input_size", h["input_size"])
        hid = _positive(arch, "hidden_size", h["hidden_size"])
        for gate in ("i", "f", "g", "o"):
            layers.append(LayerSpec(f"lstm.W_{gate}", "lstm_gate_weight", (hid, f + hid)))
        for gate in ("i", "f", "g", "o"):
            layers.append(LayerSpec(f"lstm.b_{gate}", "lstm_gate_bias", (hid,)))
        if h.get("output_size"):
            layers += _fc_layers(arch, "fc", hid, _positive(arch, "output_size", h["output_size"]))
    for name in arch.lrd:
        if not any(layer.name.startswith(name + ".") for layer in layers):
            raise ConfigError(f"low-rank table names unknown fc layer {name!r}", [(f"arch.lrd.{name}", "no such fc layer")])
    return ParameterSpec(tuple(layers))


def init_params(arch: TargetArchitecture, rng: np.random.Generator, dtype=None) -> list[np.ndarray]:
    """Conventional baseline initialisation: Kaiming-uniform weights, zero biases."""
    dtype = dtype or T.get_default_dtype()
    out = []
    for layer in build_spec(arch):
        if layer.role in ("conv_bias", "fc_bias", "lstm_gate_bias"):
            out.append(np.zeros(layer.shape, dtype=dtype))
            continue
        if layer.role == "conv_kernel":
            fan_in = int(np.prod(layer.shape[1:]))
        elif layer.role == "lstm_gate_weight":
            fan_in = layer.shape[1]
        elif layer.role == "lrd_V":
            fan_in = layer.shape[1]
        else:
            fan_in = layer.shape[0]
        bound = math.sqrt(6.0 / fan_in)
        out.append(rng.uniform(-bound, bound, size=layer.shape).astype(dtype))
    return out


def check_params(spec: ParameterSpec, params: Sequence) -> list[T.Tensor]:
    if len(params) != len(spec):
        raise ContractError(f"expected {len(spec)} parameter tensors, got {len(params)}")
    out = []
    for layer, p in zip(spec, params):
        p = p if isinstance(p, T.Tensor) else T.Tensor(p)
        if tuple(p.shape) != layer.shape:
            raise ContractError(f"layer {layer.name}: expected shape {layer.shape}, got {tuple(p.shape)}")
        out.append(p)
    return out


def _linear(named: dict, name: str, h: T.Tensor) -> T.Tensor:
    if f"{name}.weight" in named:
        return T.bias_add(T.matmul(h, named[f"{name}.weight"]), named[f"{name}.bias"])
    u, v = named[f"{name}.U"], named[f"{name}.V"]
    if u.shape[1] != v.shape[1]:
        raise ContractError(f"layer {name}: rank mismatch U {u.shape} vs V {v.shape}")
    return T.bias_add(T.matmul(T.matmul(h, u), T.transpose(v)), named[f"{name}.bias"])


def forward(arch: TargetArchitecture, params: Sequence, x) -> T.Tensor:
    """Run the target network on ``x`` with externally supplied parameters.

    ``x`` is ``[N, features]`` for mlp, ``[N, C, H, W]`` (or ``[N, H*W]``) for
    the CNNs and ``[N, steps, features]`` for lstm.  Returns logits or
    regression outputs.
    """
    spec = build_spec(arch)
    named = dict(zip(spec.names, check_params(spec, params)))
    x = x if isinstance(x, T.Tensor) else T.Tensor(x)
    h = arch.hyper
    if arch.kind == "mlp":
        out = x if x.ndim == 2 else T.flatten(x)
        n_layers = len(h["sizes"]) - 1
        for i in range(1, n_layers + 1):
            out = _linear(named, f"fc{i}", out)
            if i < n_layers:
                out = T.relu(out)
        return out
    if arch.kind in ("cnn_small", "cnn_large"):
        if x.ndim == 2:
            side = h["image_size"]
            x = T.reshape(x, (x.shape[0], h["in_channels"], side, side))
        pad = h["kernel"] // 2
        out = x
        for i in range(1, len(h["channels"]) + 1):
            out = T.conv2d(out, named[f"conv{i}.weight"], named[f"conv{i}.bias"], stride=1, pad=pad)
            out = T.max_pool2d(T.relu(out), 2)
        out = T.relu(_linear(named, "fc1", T.flatten(out)))
        return _linear(named, "fc2", out)
    return _lstm_forward(arch, named, x)


def forward_lrd(arch: TargetArchitecture, params: Sequence, x) -> T.Tensor:
    """Forward pass for an architecture whose fc layers use (U, V) factors."""
    if not arch.lrd:
        raise ContractError("forward_lrd requires an architecture with a low-rank table")
    spec = build_spec(arch)
    named = dict(zip(spec.names, check_params(spec, params)))
    for name in arch.lrd:
        u, v = named[f"{name}.U"], named[f"{name}.V"]
        if u.shape[1] != v.shape[1]:
            raise ContractError(f"layer {name}: rank mismatch U {u.shape} vs V {v.shape}")
    return forward(arch, params, x)


def _lstm_forward(arch: TargetArchitecture, named: dict, x: T.Tensor) -> T.Tensor:
    if x.ndim == 2:
        x = T.reshape(x, (x.shape[0], x.shape[1], 1))
    n, steps, _ = x.shape
    hid = arch.hyper["hidden_size"]
    hstate = T.Tensor(np.zeros((n, hid)), dtype=x.dtype)
    cstate = hstate
    wt = {g: T.transpose(named[f"lstm.W_{g}"]) for g in "ifgo"}
    for t in range(steps):
        inp = T.concat([x[:, t, :], hstate], axis=1)
        i = T.sigmoid(T.bias_add(T.matmul(inp, wt["i"]), named["lstm.b_i"]))
        f = T.sigmoid(T.bias_add(T.matmul(inp, wt["f"]), named["lstm.b_f"]))
        g = T.tanh(T.bias_add(T.matmul(inp, wt["g"]), named["lstm.b_g"]))
        o = T.sigmoid(T.bias_add(T.matmul(inp, wt["o"]), named["lstm.b_o"]))
        cstate = f * cstate + i * g
        hstate = o * T.tanh(cstate)
    if arch.hyper.get("output_size"):
        return _linear(named, "fc", hstate)
    return hstate
