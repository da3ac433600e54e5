"""Segmenter (small U-Net) and discriminators at image, patch and pixel granularity."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np

from . import numcore as nc
from .errors import ConfigurationError
from .numcore import RngStream, Tensor

GRANULARITIES = ("image", "patch", "pixel")
CHECKPOINT_MAGIC = "PCASEG-CHECKPOINT v1"


class ConvLayer(NamedTuple):
    out_channels: int
    kernel: int
    stride: int
    pad: int


def parse_layers(text: str) -> Tuple[ConvLayer, ...]:
    """Parse ``"32:4:2:1,64:4:2:1,1:4:2:1"`` into conv layers."""
    layers = []
    for chunk in text.split(","):
        parts = chunk.strip().split(":")
        if len(parts) != 4:
            raise ConfigurationError(f"layer {chunk!r} is not out:kernel:stride:pad")
        try:
            layers.append(ConvLayer(*(int(p) for p in parts)))
        except ValueError:
            raise ConfigurationError(f"layer {chunk!r} has non-integer fields") from None
    return tuple(layers)


PAPER_PATCH_LAYERS = (ConvLayer(32, 4, 2, 1), ConvLayer(64, 4, 2, 1), ConvLayer(1, 4, 2, 1))
# two halving layers then a 1x1 head: 32x32 inputs give an 8x8 confidence map
DESK_PATCH_LAYERS = (ConvLayer(32, 4, 2, 1), ConvLayer(64, 4, 2, 1), ConvLayer(1, 1, 1, 0))
DESK_PIXEL_LAYERS = (ConvLayer(32, 1, 1, 0), ConvLayer(64, 1, 1, 0), ConvLayer(1, 1, 1, 0))


@dataclass(frozen=True)
class SegmenterSpec:
    in_channels: int = 1
    num_classes: int = 4
    depth: int = 2
    base_channels: int = 8
    activation_alpha: float = 0.1

    def validate(self, hw: Optional[Tuple[int, int]] = None) -> None:
        if self.depth < 2:
            raise ConfigurationError(f"segmenter depth must be >= 2, got {self.depth}")
        if self.base_channels < 4:
            raise ConfigurationError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.num_classes < 2 or self.in_channels < 1:
            raise ConfigurationError("need in_channels >= 1 and num_classes >= 2")
        if not 0.0 <= self.activation_alpha < 1.0:
            raise ConfigurationError(f"activation_alpha must be in [0,1), got {self.activation_alpha}")
        if hw is not None:
            step = 2 ** self.depth
            if hw[0] % step or hw[1] % step:
                raise ConfigurationError(f"input {hw[0]}x{hw[1]} not divisible by 2^depth={step}")

    def stage_channels(self) -> List[int]:
        return [self.base_channels * 2 ** i for i in range(self.depth + 1)]


@dataclass(frozen=True)
class DiscriminatorSpec:
    granularity: str = "patch"
    layers: Tuple[ConvLayer, ...] = DESK_PATCH_LAYERS
    activation_alpha: float = 0.2
    in_channels: int = 4

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(ConvLayer(*l) for l in self.layers))

    @classmethod
    def paper(cls, in_channels: int = 4) -> "DiscriminatorSpec":
        return cls("patch", PAPER_PATCH_LAYERS, 0.2, in_channels)

    @classmethod
    def desk(cls, granularity: str, in_channels: int = 4) -> "DiscriminatorSpec":
        """Default discriminator for 32x32 inputs; granularities differ only at the head."""
        if granularity == "pixel":
            return cls("pixel", DESK_PIXEL_LAYERS, 0.2, in_channels)
        if granularity in ("patch", "image"):
            return cls(granularity, DESK_PATCH_LAYERS, 0.2, in_channels)
        raise ConfigurationError(f"unknown granularity {granularity!r}")

    def validate(self) -> None:
        if self.granularity not in GRANULARITIES:
            raise ConfigurationError(f"unknown granularity {self.granularity!r}")
        if not self.layers:
            raise ConfigurationError("discriminator needs at least one layer")
        if self.layers[-1].out_channels != 1:
            raise ConfigurationError("last discriminator layer must have 1 output channel")
        for l in self.layers:
            if l.out_channels < 1 or l.kernel < 1 or l.stride < 1 or l.pad < 0:
                raise ConfigurationError(f"invalid layer {l}")
        if self.granularity == "pixel" and any((l.kernel, l.stride, l.pad) != (1, 1, 0) for l in self.layers):
            raise ConfigurationError("pixel granularity requires 1x1 stride-1 unpadded layers")
        if not 0.0 <= self.activation_alpha < 1.0:
            raise ConfigurationError(f"activation_alpha must be in [0,1), got {self.activation_alpha}")


def receptive_field(spec: DiscriminatorSpec) -> int:
    """Side of the input window seen by one cell of the conv stack's output."""
    rf, jump = 1, 1
    for layer in spec.layers:
        rf += (layer.kernel - 1) * jump
        jump *= layer.stride
    return rf


def output_geometry(spec: DiscriminatorSpec, input_hw: Tuple[int, int]) -> Tuple[int, int]:
    h, w = input_hw
    for layer in spec.layers:
        if h + 2 * layer.pad < layer.kernel or w + 2 * layer.pad < layer.kernel:
            raise ConfigurationError(
                f"intermediate size {h}x{w} too small for kernel {layer.kernel} (pad {layer.pad})")
        h = nc.conv_output_size(h, layer.kernel, layer.stride, layer.pad)
        w = nc.conv_output_size(w, layer.kernel, layer.stride, layer.pad)
    if spec.granularity == "image":
        return 1, 1
    return h, w


@dataclass
class DiscOutput:
    confidence: Tensor
    features: Tensor
    logits: Tensor


def _conv_params(rng: RngStream, cout: int, cin: int, k: int) -> Tuple[Tensor, Tensor]:
    bound = float(np.sqrt(6.0 / (cin * k * k)))
    w = Tensor(rng.uniform(-bound, bound, (cout, cin, k, k)), requires_grad=True)
    b = Tensor(rng.uniform(-bound, bound, (cout,)), requires_grad=True)
    return w, b


def _segmenter_layout(spec: SegmenterSpec) -> List[Tuple[str, int, int, int]]:
    """(name, cout, cin, kernel) for every conv of the U-Net, in parameter order."""
    ch = spec.stage_channels()
    layout = []
    cin = spec.in_channels
    for i in range(spec.depth):
        layout += [(f"enc{i}.0", ch[i], cin, 3), (f"enc{i}.1", ch[i], ch[i], 3)]
        cin = ch[i]
    layout += [("mid.0", ch[-1], cin, 3), ("mid.1", ch[-1], ch[-1], 3)]
    for i in reversed(range(spec.depth)):
        layout += [(f"dec{i}.0", ch[i], ch[i + 1] + ch[i], 3), (f"dec{i}.1", ch[i], ch[i], 3)]
    layout.append(("head", spec.num_classes, ch[0], 1))
    return layout


def _disc_layout(spec: DiscriminatorSpec) -> List[Tuple[str, int, int, int]]:
    layout, cin = [], spec.in_channels
    for i, l in enumerate(spec.layers):
        layout.append((f"conv{i}", l.out_channels, cin, l.kernel))
        cin = l.out_channels
    return layout


Spec = Union[SegmenterSpec, DiscriminatorSpec]


@dataclass
class NetworkState:
    spec: Spec
    params: Dict[str, Tensor] = field(default_factory=dict)

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.params.values()]))

    def requires_grad_(self, flag: bool) -> "NetworkState":
        for p in self.params.values():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def clone(self) -> "NetworkState":
        return NetworkState(self.spec, {k: Tensor(v.data, requires_grad=v.requires_grad, name=k)
                                        for k, v in self.params.items()})

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def __call__(self, x: Tensor):
        if isinstance(self.spec, SegmenterSpec):
            return segment(self, x)
        return discriminate(self, x)


def _init(spec: Spec, layout, rng: RngStream) -> NetworkState:
    params: Dict[str, Tensor] = {}
    for name, cout, cin, k in layout:
        w, b = _conv_params(rng, cout, cin, k)
        w.name, b.name = f"{name}.w", f"{name}.b"
        params[w.name], params[b.name] = w, b
    return NetworkState(spec, params)


def build_segmenter(spec: SegmenterSpec, rng: RngStream) -> NetworkState:
    spec.validate()
    return _init(spec, _segmenter_layout(spec), rng)


def build_discriminator(spec: DiscriminatorSpec, rng: RngStream) -> NetworkState:
    spec.validate()
    return _init(spec, _disc_layout(spec), rng)


def _conv(state: NetworkState, name: str, x: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
    return nc.conv2d(x, state.params[f"{name}.w"], state.params[f"{name}.b"], stride=stride, pad=pad)


def segment_logits(state: NetworkState, x: Tensor) -> Tensor:
    spec: SegmenterSpec = state.spec
    spec.validate(x.shape[2:])
    if x.shape[1] != spec.in_channels:
        raise ConfigurationError(f"segmenter expects {spec.in_channels} input channels, got {x.shape[1]}")

    def block(name: str, h: Tensor) -> Tensor:
        h = nc.leaky_relu(_conv(state, f"{name}.0", h), spec.activation_alpha)
        return nc.leaky_relu(_conv(state, f"{name}.1", h), spec.activation_alpha)

    skips = []
    h = x
    for i in range(spec.depth):
        h = block(f"enc{i}", h)
        skips.append(h)
        h = nc.max_pool2d(h, 2)
    h = block("mid", h)
    for i in reversed(range(spec.depth)):
        h = block(f"dec{i}", nc.concat([nc.bilinear_upsample(h, 2), skips[i]], axis=1))
    return _conv(state, "head", h, pad=0)


def segment(state: NetworkState, x: Tensor) -> Tensor:
    """Per-pixel class probabilities ``[B, C, H, W]``."""
    return nc.softmax_channels(segment_logits(state, x))


def discriminate(state: NetworkState, z: Tensor) -> DiscOutput:
    spec: DiscriminatorSpec = state.spec
    if z.shape[1] != spec.in_channels:
        raise ConfigurationError(f"discriminator expects {spec.in_channels} input channels, got {z.shape[1]}")
    output_geometry(spec, z.shape[2:])
    h = z
    feats = z
    last = len(spec.layers) - 1
    for i, layer in enumerate(spec.layers):
        if i == last:
            feats = h
        h = _conv(state, f"conv{i}", h, stride=layer.stride, pad=layer.pad)
        if i < last:
            h = nc.leaky_relu(h, spec.activation_alpha)
    if spec.granularity == "image":
        h = nc.mean(h, axis=(2, 3), keepdims=True)
    return DiscOutput(confidence=nc.sigmoid(h), features=feats, logits=h)


# checkpoints

def spec_to_dict(spec: Spec) -> dict:
    if isinstance(spec, SegmenterSpec):
        return {"kind": "segmenter", **asdict(spec)}
    d = asdict(spec)
    d["layers"] = [list(l) for l in spec.layers]
    return {"kind": "discriminator", **d}


def spec_from_dict(d: dict) -> Spec:
    d = dict(d)
    kind = d.pop("kind", None)
    if kind == "segmenter":
        return SegmenterSpec(**d)
    if kind == "discriminator":
        d["layers"] = tuple(ConvLayer(*l) for l in d["layers"])
        return DiscriminatorSpec(**d)
    raise ConfigurationError(f"unknown network kind {kind!r}")


def save_checkpoint(state: NetworkState, path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(CHECKPOINT_MAGIC + "\n")
        fh.write(json.dumps(spec_to_dict(state.spec), sort_keys=True) + "\n")
        for p in state.params.values():
            nc.write_tensor(fh, p)


def load_checkpoint(path) -> NetworkState:
    with open(path, "r", encoding="ascii") as fh:
        if fh.readline().rstrip("\n") != CHECKPOINT_MAGIC:
            raise ConfigurationError(f"{path}: not a checkpoint file")
        spec = spec_from_dict(json.loads(fh.readline()))
        layout = _segmenter_layout(spec) if isinstance(spec, SegmenterSpec) else _disc_layout(spec)
        params: Dict[str, Tensor] = {}
        for name, cout, cin, k in layout:
            for suffix, shape in ((".w", (cout, cin, k, k)), (".b", (cout,))):
                t = nc.read_tensor(fh)
                if t.shape != shape:
                    raise ConfigurationError(f"{path}: {name}{suffix} has shape {t.shape}, expected {shape}")
                params[name + suffix] = Tensor(t.data, requires_grad=True, name=name + suffix)
    return NetworkState(spec, params)


def checkpoint_path(directory, tag) -> Path:
    return Path(directory) / (f"ckpt_{tag}.bin" if isinstance(tag, int) else f"{tag}.bin")
