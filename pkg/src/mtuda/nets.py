"""Segmenter (feature extractor + classifier heads) and fully-convolutional discriminator."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from mtuda import tensor as tc
from mtuda.errors import ConfigurationError, DimensionError
from mtuda.tensor import Tensor

NUM_CLASSES = 7

DEFAULT_SEGMENTER = {
    "kind": "segmenter",
    "in_channels": 3,
    "widths": [16, 32, 32, 64],
    "strides": [2, 1, 2, 1],
    "kernel": 3,
    "slope": 0.1,
    "num_classes": NUM_CLASSES,
    "heads": ["main"],
}

DEFAULT_DISCRIMINATOR = {
    "kind": "discriminator",
    "in_channels": NUM_CLASSES,
    "widths": [16, 32, 64, 1],
    "stride": 2,
    "kernel": 3,
    "slope": 0.2,
}


def segmenter_arch(num_classes=NUM_CLASSES, heads=("main",), **overrides):
    arch = copy.deepcopy(DEFAULT_SEGMENTER)
    arch.update(num_classes=num_classes, heads=list(heads), **overrides)
    return arch


def mtkt_heads(T: int) -> list[str]:
    return [f"spec_{n}" for n in range(1, T + 1)] + ["agn"]


def discriminator_arch(num_classes=NUM_CLASSES, **overrides):
    arch = copy.deepcopy(DEFAULT_DISCRIMINATOR)
    arch.update(in_channels=num_classes, **overrides)
    return arch


Conv = tuple  # (weight, bias)


@dataclass
class SegmenterParams:
    arch: dict
    feat: list
    heads: dict

    def named_parameters(self):
        for i, (w, b) in enumerate(self.feat):
            yield f"feat.{i}.weight", w
            yield f"feat.{i}.bias", b
        for hid, (w, b) in self.heads.items():
            yield f"head.{hid}.weight", w
            yield f"head.{hid}.bias", b

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def head_parameters(self, head_id):
        return list(self.heads[head_id])

    def feature_parameters(self):
        return [t for wb in self.feat for t in wb]


@dataclass
class DiscriminatorParams:
    arch: dict
    layers: list

    def named_parameters(self):
        for i, (w, b) in enumerate(self.layers):
            yield f"layers.{i}.weight", w
            yield f"layers.{i}.bias", b

    def parameters(self):
        return [t for _, t in self.named_parameters()]


@dataclass
class DiscriminatorBank:
    source_target: dict = field(default_factory=dict)
    target_target: dict = field(default_factory=dict)

    def items(self):
        for n, d in sorted(self.source_target.items()):
            yield f"st.{n}", d
        for n, d in sorted(self.target_target.items()):
            yield f"tt.{n}", d

    def parameters(self):
        return [t for _, d in self.items() for t in d.parameters()]

    def __len__(self):
        return len(self.source_target) + len(self.target_target)


class SoftMaps(NamedTuple):
    probs: Tensor
    logits: Tensor


# --------------------------------------------------------------------------
# initialization


def _rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(key)))


def init_conv(rng, cout, cin, k):
    """He-uniform: U(-b, b) with b = sqrt(6 / fan_in), so std = sqrt(2 / fan_in)."""
    fan_in = cin * k * k
    bound = np.sqrt(6.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(cout, cin, k, k))
    return tc.parameter(w), tc.parameter(np.zeros(cout))


def _check_arch(arch):
    widths = arch.get("widths", [])
    if not widths or any(int(w) < 1 for w in widths):
        raise ConfigurationError(f"invalid layer widths {widths!r}")
    if arch.get("kernel", 3) % 2 == 0:
        raise ConfigurationError("kernel size must be odd")
    if arch["kind"] == "segmenter":
        if len(arch["strides"]) != len(widths):
            raise ConfigurationError("segmenter needs one stride per width")
        if arch["num_classes"] < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if not arch["heads"] or len(set(arch["heads"])) != len(arch["heads"]):
            raise ConfigurationError(f"invalid head list {arch['heads']!r}")
    elif arch["kind"] == "discriminator":
        if widths[-1] != 1:
            raise ConfigurationError("discriminator must end in a 1-channel logit map")
    else:
        raise ConfigurationError(f"unknown architecture kind {arch.get('kind')!r}")


def init_params(arch: dict, seed: int):
    """Deterministic parameters for a segmenter or discriminator architecture."""
    _check_arch(arch)
    k = arch.get("kernel", 3)
    if arch["kind"] == "segmenter":
        rng = _rng(seed, 0)
        feat, cin = [], arch["in_channels"]
        for width in arch["widths"]:
            feat.append(init_conv(rng, width, cin, k))
            cin = width
        heads = {}
        for i, hid in enumerate(arch["heads"]):
            heads[hid] = init_conv(_rng(seed, 1, i), arch["num_classes"], cin, 1)
        return SegmenterParams(copy.deepcopy(arch), feat, heads)
    rng = _rng(seed, 2)
    layers, cin = [], arch["in_channels"]
    for width in arch["widths"]:
        layers.append(init_conv(rng, width, cin, k))
        cin = width
    return DiscriminatorParams(copy.deepcopy(arch), layers)


# --------------------------------------------------------------------------
# forward passes


def features(params: SegmenterParams, batch) -> Tensor:
    arch = params.arch
    if batch.shape[1] != arch["in_channels"]:
        raise DimensionError(f"segmenter expects {arch['in_channels']} input channels, got {batch.shape[1]}")
    pad = arch.get("kernel", 3) // 2
    x = batch
    for (w, b), stride in zip(params.feat, arch["strides"]):
        x = tc.leaky_relu(tc.conv2d(x, w, b, stride=stride, padding=pad), arch["slope"])
    return x


def head_forward(params: SegmenterParams, feats: Tensor, head_id: str, out_hw) -> SoftMaps:
    if head_id not in params.heads:
        raise ConfigurationError(f"unknown head {head_id!r}; have {list(params.heads)}")
    w, b = params.heads[head_id]
    logits = tc.bilinear_upsample(tc.conv2d(feats, w, b), *out_hw)
    return SoftMaps(tc.softmax_channel(logits), logits)


def segmenter_forward(params: SegmenterParams, batch, head_id: str = "main") -> SoftMaps:
    batch = tc.as_tensor(batch)
    if head_id not in params.heads:
        raise ConfigurationError(f"unknown head {head_id!r}; have {list(params.heads)}")
    return head_forward(params, features(params, batch), head_id, batch.shape[2:])


def discriminator_forward(params: DiscriminatorParams, q) -> Tensor:
    arch = params.arch
    if q.shape[1] != arch["in_channels"]:
        raise DimensionError(f"discriminator expects {arch['in_channels']} channels, got {q.shape[1]}")
    k, stride = arch.get("kernel", 3), arch["stride"]
    x = q
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        x = tc.conv2d(x, w, b, stride=stride, padding=k // 2)
        if i < last:
            x = tc.leaky_relu(x, arch["slope"])
    return x


def predict_labels(probs) -> np.ndarray:
    """Argmax over channels; ties resolve to the lowest class index."""
    data = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return np.argmax(data, axis=1).astype(np.int64)


def clone_params(p):
    """Deep copy with fresh tensors (grads dropped)."""
    if isinstance(p, SegmenterParams):
        return SegmenterParams(
            copy.deepcopy(p.arch),
            [(tc.parameter(w.data), tc.parameter(b.data)) for w, b in p.feat],
            {h: (tc.parameter(w.data), tc.parameter(b.data)) for h, (w, b) in p.heads.items()},
        )
    return DiscriminatorParams(copy.deepcopy(p.arch), [(tc.parameter(w.data), tc.parameter(b.data)) for w, b in p.layers])
