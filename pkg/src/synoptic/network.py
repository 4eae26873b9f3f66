"""Declarative feed-forward networks shared by the analog trainer and the SNN simulator.

A network is a chain of layers. Activation layers split the chain into
*groups*; each group holds exactly one weighted layer (conv or linear) plus
any pooling/dropout around it. Every group output is a spiking layer in the
converted network; the final group is the output layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .errors import ConfigError

LAYER_KINDS = ("conv", "avgpool", "linear", "act", "dropout")
WEIGHTED = ("conv", "linear")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    size: int = 0  # output channels (conv) or output features (linear)
    kernel: tuple = (1, 1)
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    p: float = 0.0
    bias: bool = False

    @classmethod
    def conv(cls, channels, kernel=3, stride=1, padding=0, bias=False):
        return cls("conv", channels, ad._pair(kernel), ad._pair(stride), ad._pair(padding), bias=bias)

    @classmethod
    def avgpool(cls, kernel=2, stride=None):
        stride = kernel if stride is None else stride
        return cls("avgpool", 0, ad._pair(kernel), ad._pair(stride))

    @classmethod
    def linear(cls, features, bias=False):
        return cls("linear", features, bias=bias)

    @classmethod
    def act(cls):
        return cls("act")

    @classmethod
    def dropout(cls, p):
        return cls("dropout", p=float(p))

    def to_dict(self):
        d = {"kind": self.kind}
        if self.kind in ("conv", "linear"):
            d["size"] = self.size
        if self.kind in ("conv", "avgpool"):
            d["kernel"] = list(self.kernel)
            d["stride"] = list(self.stride)
        if self.kind == "conv":
            d["padding"] = list(self.padding)
        if self.kind == "dropout":
            d["p"] = self.p
        if self.bias:
            d["bias"] = True
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kind = d.pop("kind")
        for key in ("kernel", "stride", "padding"):
            if key in d:
                d[key] = ad._pair(d[key])
        if kind == "avgpool" and "stride" not in d and "kernel" in d:
            d["stride"] = d["kernel"]
        return cls(kind, **d)


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple
    layers: tuple
    # apply the activation after the final weighted layer in the analog net
    output_activation: bool = False

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.validate()

    def validate(self):
        if not self.layers:
            raise ConfigError("network has no layers")
        for i, layer in enumerate(self.layers):
            if layer.kind not in LAYER_KINDS:
                raise ConfigError(f"layer {i}: unsupported layer kind {layer.kind!r}")
            if layer.bias:
                raise ConfigError(f"layer {i}: bias terms are not supported")
            if layer.kind == "dropout" and not 0 <= layer.p < 1:
                raise ConfigError(f"layer {i}: dropout p must lie in [0, 1)")
        for g, group in enumerate(self.groups()):
            kinds = [self.layers[i].kind for i in group]
            if sum(k in WEIGHTED for k in kinds) != 1:
                raise ConfigError(f"layer group {g} must contain exactly one weighted layer, has {kinds}")
        if self.layers[-1].kind == "act":
            raise ConfigError("use output_activation instead of a trailing act layer")
        self.layer_shapes()

    def groups(self):
        """Layer indices per group, split at activation layers."""
        groups, cur = [], []
        for i, layer in enumerate(self.layers):
            if layer.kind == "act":
                groups.append(cur)
                cur = []
            else:
                cur.append(i)
        groups.append(cur)
        return groups

    def layer_shapes(self):
        """Per-sample output shape of every layer."""
        shape = self.input_shape
        shapes = []
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv":
                if len(shape) != 3:
                    raise ConfigError(f"layer {i}: conv needs a [C,H,W] input, got {shape}")
                c, h, w = shape
                (kh, kw), (sh, sw), (ph, pw) = layer.kernel, layer.stride, layer.padding
                oh, ow = ad._out_size(h, kh, sh, ph), ad._out_size(w, kw, sw, pw)
                if oh < 1 or ow < 1:
                    raise ConfigError(f"layer {i}: kernel larger than padded input {shape}")
                shape = (layer.size, oh, ow)
            elif layer.kind == "avgpool":
                if len(shape) != 3:
                    raise ConfigError(f"layer {i}: avgpool needs a [C,H,W] input, got {shape}")
                c, h, w = shape
                (kh, kw), (sh, sw) = layer.kernel, layer.stride
                oh, ow = ad._out_size(h, kh, sh, 0), ad._out_size(w, kw, sw, 0)
                if oh < 1 or ow < 1:
                    raise ConfigError(f"layer {i}: pool window larger than input {shape}")
                shape = (c, oh, ow)
            elif layer.kind == "linear":
                shape = (layer.size,)
            shapes.append(shape)
        return shapes

    def weight_shapes(self):
        shape = self.input_shape
        out = []
        for layer, next_shape in zip(self.layers, self.layer_shapes()):
            if layer.kind == "conv":
                out.append((layer.size, shape[0]) + tuple(layer.kernel))
            elif layer.kind == "linear":
                out.append((layer.size, int(np.prod(shape))))
            shape = next_shape
        return out

    def weighted_layers(self):
        return [i for i, layer in enumerate(self.layers) if layer.kind in WEIGHTED]

    def spiking_shapes(self):
        """Neuron-grid shape of every spiking layer (one per group)."""
        shapes = self.layer_shapes()
        return [shapes[g[-1]] for g in self.groups()]

    @property
    def num_classes(self):
        return int(np.prod(self.spiking_shapes()[-1]))

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "layers": [layer.to_dict() for layer in self.layers],
            "output_activation": self.output_activation,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            tuple(d["input_shape"]),
            tuple(LayerSpec.from_dict(x) for x in d["layers"]),
            bool(d.get("output_activation", False)),
        )


def toy_network(input_shape=(1, 16, 16), num_classes=4, channels=(4, 8), dropout=0.0, padding=1):
    """Two 3x3 convs, 2x2 average pooling, linear readout."""
    layers = [LayerSpec.conv(channels[0], 3, padding=padding), LayerSpec.act()]
    for c in channels[1:]:
        layers += [LayerSpec.conv(c, 3, padding=padding), LayerSpec.act()]
    layers.append(LayerSpec.avgpool(2))
    if dropout:
        layers.append(LayerSpec.dropout(dropout))
    layers.append(LayerSpec.linear(num_classes))
    return NetworkSpec(input_shape, tuple(layers))


def init_weights(spec, seed):
    """He-uniform weights, drawn deterministically from ``seed``."""
    rng = np.random.default_rng(seed)
    weights = []
    for shape in spec.weight_shapes():
        fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=shape).astype(np.float32))
    return weights


def dropout_rng(seed, epoch, batch, layer):
    """Counter-based stream keyed by (seed, epoch, batch, layer)."""
    ss = np.random.SeedSequence([int(seed), int(epoch), int(batch), int(layer)])
    return np.random.Generator(np.random.Philox(ss))


def apply_layer(layer, weight, x):
    """Evaluate a non-activation layer in inference mode (dropout is identity)."""
    if layer.kind == "conv":
        return ad.conv2d(x, weight, layer.stride, layer.padding)
    if layer.kind == "avgpool":
        return ad.avgpool2d(x, layer.kernel, layer.stride)
    if layer.kind == "linear":
        return ad.linear(x, weight)
    if layer.kind == "dropout":
        return x
    raise ConfigError(f"cannot apply layer kind {layer.kind!r}")


def group_weights(spec, weights):
    """Map layer index -> weight tensor."""
    return dict(zip(spec.weighted_layers(), weights))


def apply_group(spec, weights_by_layer, group, x):
    for i in group:
        x = apply_layer(spec.layers[i], weights_by_layer.get(i), x)
    return x


def forward(spec, weights, x, quantize=False, output_activation=None):
    """Inference-mode forward pass.

    Returns ``(output, activations)`` where ``activations[g]`` is the
    (Q)ReLU output of group ``g`` for every hidden group, and the final entry
    is the network output (activated iff ``output_activation``).
    """
    if output_activation is None:
        output_activation = spec.output_activation
    act = ad.qrelu if quantize else ad.relu
    wmap = group_weights(spec, weights)
    groups = spec.groups()
    acts = []
    for g, group in enumerate(groups):
        x = apply_group(spec, wmap, group, x)
        if g < len(groups) - 1 or output_activation:
            x = act(x)
        acts.append(x)
    return x, acts


def forward_graph(spec, weight_nodes, x, quantize=False, train=True, rng_for=None):
    """Differentiable forward pass. Returns ``(output_node, activation_nodes)``.

    ``rng_for(layer_index)`` supplies the dropout generator for a layer.
    """
    act = ad.qrelu_node if quantize else ad.relu_node
    wmap = group_weights(spec, weight_nodes)
    groups = spec.groups()
    node = ad.leaf(x)
    acts = []
    for g, group in enumerate(groups):
        for i in group:
            layer = spec.layers[i]
            if layer.kind == "conv":
                node = ad.conv2d_node(node, wmap[i], layer.stride, layer.padding)
            elif layer.kind == "avgpool":
                node = ad.avgpool2d_node(node, layer.kernel, layer.stride)
            elif layer.kind == "linear":
                node = ad.linear_node(node, wmap[i])
            elif layer.kind == "dropout":
                rng = rng_for(i) if (train and layer.p > 0) else None
                node = ad.dropout_node(node, layer.p, train, rng)
        if g < len(groups) - 1 or spec.output_activation:
            node = act(node)
        acts.append(node)
    return node, acts


def predict(output):
    """Argmax over classes; ties go to the lowest index."""
    return np.argmax(output.reshape(output.shape[0], -1), axis=1)
