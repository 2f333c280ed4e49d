"""Residual VGG-style encoder-decoder graph: config, parameters, forward and backward.

The network is a flat, ordered list of :class:`Layer` records. ``forward`` and
``backward`` are small interpreters over that list, so residual placement is
inspectable (and testable) from the listing alone.

Residual wiring uses two parameter-free layer kinds: ``tap`` remembers the
current activation under a key, ``add`` sums the remembered activation onto
the current one. Backward routes the gradient seen at ``add`` back to the
matching ``tap``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels as K
from .data import Rng
from .errors import ConfigError, NumericError, ShapeError, UsageError

RRC_INDICES = "indices"
RRC_INDICES_PLUS_ADD = "indices_plus_add"
RRC_MODES = (RRC_INDICES, RRC_INDICES_PLUS_ADD)


@dataclass(frozen=True)
class NetworkConfig:
    """Declarative architecture; the defaults are the full-size network."""

    in_channels: int = 1
    input_size: tuple = (224, 224)
    widths: tuple = (64, 128, 256, 512, 512)
    conv_counts: tuple = (2, 2, 4, 4, 4)
    nrc_enabled: bool = True
    rrc_mode: str = RRC_INDICES
    num_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        object.__setattr__(self, "conv_counts", tuple(int(v) for v in self.conv_counts))
        self.validate()

    def validate(self):
        if len(self.widths) < 1 or len(self.widths) != len(self.conv_counts):
            raise ConfigError("widths and conv_counts must be non-empty and of equal length")
        if any(c < 1 for c in self.conv_counts):
            raise ConfigError("every block needs at least one conv unit")
        if any(w < 1 for w in self.widths) or self.in_channels < 1:
            raise ConfigError("channel counts must be positive")
        if len(self.input_size) != 2:
            raise ConfigError("input_size must be (H, W)")
        factor = 2 ** len(self.widths)
        if any(s < factor or s % factor for s in self.input_size):
            raise ConfigError(
                f"input size {self.input_size} must be divisible by 2^{len(self.widths)}")
        if self.rrc_mode not in RRC_MODES:
            raise ConfigError(f"rrc_mode must be one of {RRC_MODES}, got {self.rrc_mode!r}")
        if self.num_classes != 2:
            raise ConfigError("only binary segmentation (num_classes=2) is supported")

    @property
    def num_blocks(self):
        return len(self.widths)

    def replace(self, **changes):
        values = asdict(self)
        values.update(changes)
        return NetworkConfig(**values)

    def to_dict(self):
        d = asdict(self)
        for key in ("input_size", "widths", "conv_counts"):
            d[key] = list(d[key])
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config fields: {sorted(unknown)}")
        values = dict(d)
        if values.get("rrc_mode") == "indices-add":
            values["rrc_mode"] = RRC_INDICES_PLUS_ADD
        return cls(**values)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class Layer:
    kind: str
    name: str = ""
    c_in: int = 0
    c_out: int = 0
    key: str = ""
    block: int = -1
    bias: bool = False

    def describe(self):
        if self.kind == "conv":
            return f"conv {self.name} {self.c_in}->{self.c_out}" + (" +bias" if self.bias else "")
        if self.kind == "bn":
            return f"bn {self.name} {self.c_in}"
        if self.kind in ("tap", "add"):
            return f"{self.kind} {self.key}"
        if self.kind in ("pool", "unpool"):
            return f"{self.kind} b{self.block}"
        return self.kind


@dataclass(frozen=True)
class Network:
    config: NetworkConfig
    layers: tuple

    def listing(self):
        return [layer.describe() for layer in self.layers]

    def count(self, kind, prefix=""):
        return sum(1 for l in self.layers if l.kind == kind and l.name.startswith(prefix))


def _decoder_out_width(config, i):
    return config.widths[i - 1] if i > 0 else config.widths[0]


def _conv_plan(config):
    """(name, c_in, c_out) for every conv in graph order, head last."""
    plan = []
    prev = config.in_channels
    for i, (width, count) in enumerate(zip(config.widths, config.conv_counts)):
        for j in range(count):
            plan.append((f"enc.b{i}.c{j}", prev if j == 0 else width, width))
        prev = width
    for i in reversed(range(config.num_blocks)):
        width, count = config.widths[i], config.conv_counts[i]
        for j in range(count):
            plan.append((f"dec.b{i}.c{j}", width,
                         _decoder_out_width(config, i) if j == count - 1 else width))
    plan.append(("head", config.widths[0], config.num_classes))
    return plan


def _decoder_landing(config, i):
    count = config.conv_counts[i]
    if _decoder_out_width(config, i) == config.widths[i]:
        return count - 1
    if count < 2:
        raise ConfigError(
            f"decoder block {i}: NRC needs a conv unit that keeps width {config.widths[i]}, "
            "but the only unit changes it")
    return count - 2


def build_network(config):
    config.validate()
    plus_add = config.rrc_mode == RRC_INDICES_PLUS_ADD
    layers = []

    def conv_unit(name, c_in, c_out, add_key=None, tap_key=None):
        layers.append(Layer("conv", name, c_in, c_out))
        layers.append(Layer("bn", f"{name}.bn", c_out, c_out))
        if add_key:
            layers.append(Layer("add", key=add_key))
        layers.append(Layer("relu", name))
        if tap_key:
            layers.append(Layer("tap", key=tap_key))

    plan = iter(_conv_plan(config))
    for i, count in enumerate(config.conv_counts):
        key = f"nrc.enc{i}"
        if config.nrc_enabled and count < 2:
            raise ConfigError(f"encoder block {i}: NRC needs at least 2 conv units, got {count}")
        for j in range(count):
            name, c_in, c_out = next(plan)
            nrc = config.nrc_enabled
            conv_unit(name, c_in, c_out,
                      add_key=key if nrc and j == count - 1 else None,
                      tap_key=key if nrc and j == 0 else None)
        if plus_add:
            layers.append(Layer("tap", key=f"rrc{i}"))
        layers.append(Layer("pool", block=i))

    for i in reversed(range(config.num_blocks)):
        key = f"nrc.dec{i}"
        layers.append(Layer("unpool", block=i))
        if plus_add:
            layers.append(Layer("add", key=f"rrc{i}"))
        landing = None
        if config.nrc_enabled:
            landing = _decoder_landing(config, i)
            layers.append(Layer("tap", key=key))
        for j in range(config.conv_counts[i]):
            name, c_in, c_out = next(plan)
            conv_unit(name, c_in, c_out, add_key=key if j == landing else None)

    name, c_in, c_out = next(plan)
    layers.append(Layer("conv", name, c_in, c_out, bias=True))
    layers.append(Layer("softmax"))
    return Network(config=config, layers=tuple(layers))


class ParamStore:
    """Named parameters with parallel gradient and velocity buffers.

    ``buffers`` holds non-trained state (BN running statistics). Insertion
    order is the canonical order for iteration and serialization.
    """

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.velocity = {}
        self.buffers = {}
        self.grads_ready = False

    def add(self, name, value):
        value = np.ascontiguousarray(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.velocity[name] = np.zeros_like(value)

    def add_buffer(self, name, value):
        self.buffers[name] = np.ascontiguousarray(value, dtype=np.float64)

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def num_scalars(self):
        return sum(p.size for p in self.params.values())

    def bn_state(self, prefix):
        return K.BnState(
            gamma=self.params[f"{prefix}.gamma"],
            beta=self.params[f"{prefix}.beta"],
            running_mean=self.buffers[f"{prefix}.running_mean"],
            running_var=self.buffers[f"{prefix}.running_var"],
        )

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)
        self.grads_ready = False

    def copy(self):
        out = ParamStore()
        for name, value in self.params.items():
            out.params[name] = value.copy()
            out.grads[name] = self.grads[name].copy()
            out.velocity[name] = self.velocity[name].copy()
        out.buffers = {k: v.copy() for k, v in self.buffers.items()}
        out.grads_ready = self.grads_ready
        return out

    def identical(self, other):
        """Bit-for-bit equality of parameters, velocities and buffers."""
        def same(a, b):
            return list(a) == list(b) and all(
                a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes() for k in a)
        return (same(self.params, other.params) and same(self.velocity, other.velocity)
                and same(self.buffers, other.buffers))


def init_params(config, seed):
    """He-normal conv weights, zero head bias, identity BN."""
    rng = Rng(seed)
    store = ParamStore()
    for layer in build_network(config).layers:
        if layer.kind == "conv":
            std = np.sqrt(2.0 / (9.0 * layer.c_in))
            shape = (layer.c_out, layer.c_in, 3, 3)
            store.add(f"{layer.name}.w", rng.normal_array(int(np.prod(shape))).reshape(shape) * std)
            if layer.bias:
                store.add(f"{layer.name}.b", np.zeros(layer.c_out))
        elif layer.kind == "bn":
            store.add(f"{layer.name}.gamma", np.ones(layer.c_out))
            store.add(f"{layer.name}.beta", np.zeros(layer.c_out))
            store.add_buffer(f"{layer.name}.running_mean", np.zeros(layer.c_out))
            store.add_buffer(f"{layer.name}.running_var", np.ones(layer.c_out))
    return store


def param_count(config):
    """Trainable scalars: conv weights, head bias, BN gamma and beta."""
    total = 0
    plan = _conv_plan(config)
    for name, c_in, c_out in plan[:-1]:
        total += 9 * c_in * c_out + 2 * c_out
    _, c_in, c_out = plan[-1]
    return total + 9 * c_in * c_out + c_out


@dataclass
class ForwardTrace:
    """Per-layer cached inputs (or pooling indices) from one forward pass."""

    training: bool
    records: list = field(default_factory=list)


def forward(network, params, x, training=False):
    config = network.config
    x = K.as_tensor4(x)
    expected = (config.in_channels, *config.input_size)
    if x.shape[1:] != expected:
        raise ShapeError(f"network expects input (N, {', '.join(map(str, expected))}), got {x.shape}")

    trace = ForwardTrace(training=training)
    taps = {}
    pool_indices = {}
    h = x
    for layer in network.layers:
        rec = None
        kind = layer.kind
        if kind == "conv":
            rec = h
            bias = params[f"{layer.name}.b"] if layer.bias else None
            h = K.conv2d_forward(h, params[f"{layer.name}.w"], bias)
        elif kind == "bn":
            rec = h
            h = K.batchnorm_forward(h, params.bn_state(layer.name), training)
        elif kind == "relu":
            rec = h
            h = K.relu(h)
        elif kind == "tap":
            taps[layer.key] = h
        elif kind == "add":
            h = K.residual_add(h, taps[layer.key])
        elif kind == "pool":
            in_shape = h.shape
            h, idx = K.maxpool2d(h)
            pool_indices[layer.block] = idx
            rec = (in_shape, idx)
        elif kind == "unpool":
            idx = pool_indices[layer.block]
            rec = idx
            h = K.maxunpool2d(h, idx, 2 * h.shape[2], 2 * h.shape[3])
        elif kind == "softmax":
            h = K.softmax_pixelwise(h)
            rec = h
        else:
            raise ConfigError(f"unknown layer kind {kind!r}")
        if not np.isfinite(h).all():
            raise NumericError(f"non-finite activation after layer {layer.describe()!r}")
        trace.records.append(rec)
    return h, trace


def backward(network, params, trace, grad_probs):
    """Fill ``params.grads`` from the gradient w.r.t. the output probabilities.

    Returns the gradient w.r.t. the network input.
    """
    if trace is None:
        raise UsageError("backward needs the trace of a forward pass")
    if not trace.training:
        raise UsageError("backward needs a training-mode trace")
    if len(trace.records) != len(network.layers):
        raise UsageError("trace does not belong to this network")

    g = K.as_tensor4(grad_probs, "grad_probs")
    pending = {}
    for layer, rec in zip(reversed(network.layers), reversed(trace.records)):
        kind = layer.kind
        if kind == "softmax":
            g = K.softmax_backward(rec, g)
        elif kind == "conv":
            g, gw, gb = K.conv2d_backward(rec, params[f"{layer.name}.w"], g)
            params.grads[f"{layer.name}.w"][...] = gw
            if layer.bias:
                params.grads[f"{layer.name}.b"][...] = gb
        elif kind == "bn":
            g, gg, gb = K.batchnorm_backward(rec, params.bn_state(layer.name), g)
            params.grads[f"{layer.name}.gamma"][...] = gg
            params.grads[f"{layer.name}.beta"][...] = gb
        elif kind == "relu":
            g = K.relu_backward(rec, g)
        elif kind == "add":
            pending[layer.key] = g
        elif kind == "tap":
            g = g + pending.pop(layer.key)
        elif kind == "pool":
            in_shape, idx = rec
            g = K.maxpool2d_backward(g, idx, in_shape[2], in_shape[3])
        elif kind == "unpool":
            g = K.maxunpool2d_backward(g, rec)
    params.grads_ready = True
    return g
