"""Network topology descriptions and the residual-network generator.

Layer ``j`` owns a synthesis dictionary ``B_j`` mapping its codes (shape
``out_shape``) back into the space of its input (shape ``in_shape``). Layer 0
is the input signal. Besides the chain edge ``j-1 -> j`` a layer can receive
skip edges ``n -> m`` whose contribution is added to the input of layer ``m``
(so the source code must live in, or embed into, layer ``m``'s input space).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from math import prod

from .exceptions import DimensionError, TopologyError
from .tensor import conv_output_hw

LAYER_KINDS = ("dense", "conv")
SKIP_KINDS = ("identity", "projection", "dense")


@dataclass(frozen=True)
class LayerSpec:
    index: int
    kind: str
    in_shape: tuple
    out_shape: tuple
    stride: int = 1
    kernel: int = 3

    @property
    def in_size(self) -> int:
        return prod(self.in_shape)

    @property
    def out_size(self) -> int:
        return prod(self.out_shape)

    @property
    def channels(self) -> int:
        return self.out_shape[0]

    @property
    def dictionary_shape(self) -> tuple:
        if self.kind == "dense":
            return (self.in_shape[0], self.out_shape[0])
        return (self.out_shape[0], self.in_shape[0], self.kernel, self.kernel)


@dataclass(frozen=True)
class SkipSpec:
    source: int
    target: int
    kind: str = "identity"


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple
    layers: tuple
    skips: tuple = ()
    n_classes: int = 10
    width: int | None = None
    depth: int | None = None

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def is_conv(self) -> bool:
        return any(layer.kind == "conv" for layer in self.layers)

    @property
    def n_features(self) -> int:
        return self.layers[-1].channels

    def layer(self, j: int) -> LayerSpec:
        return self.layers[j - 1]

    def shape_of(self, j: int) -> tuple:
        """Shape of the codes of layer ``j`` (``j = 0`` is the input)."""
        return tuple(self.input_shape) if j == 0 else tuple(self.layers[j - 1].out_shape)

    def skip(self, source: int, target: int) -> SkipSpec:
        for s in self.skips:
            if (s.source, s.target) == (source, target):
                return s
        raise KeyError((source, target))

    def incoming(self, m: int) -> list[tuple[int, str]]:
        """Edges feeding layer ``m``'s reconstruction target, chain edge first."""
        edges = [(m - 1, "chain")]
        edges += [(s.source, s.kind) for s in sorted(self.skips, key=lambda s: s.source) if s.target == m]
        return edges

    def outgoing(self, n: int) -> list[tuple[int, str]]:
        """Edges leaving layer ``n``'s codes, chain edge first."""
        edges = [(n + 1, "chain")] if n < self.n_layers else []
        edges += [(s.target, s.kind) for s in sorted(self.skips, key=lambda s: s.target) if s.source == n]
        return edges

    def without_skips(self) -> "NetworkSpec":
        return NetworkSpec(self.input_shape, self.layers, (), self.n_classes, self.width, self.depth)

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [
                {"index": l.index, "kind": l.kind, "in_shape": list(l.in_shape),
                 "out_shape": list(l.out_shape), "stride": l.stride, "kernel": l.kernel}
                for l in self.layers
            ],
            "skips": [{"source": s.source, "target": s.target, "kind": s.kind}
                      for s in sorted(self.skips, key=lambda s: (s.target, s.source))],
            "n_classes": self.n_classes,
        }

    def hash(self) -> bytes:
        """32-byte digest of the canonical topology (metadata fields excluded)."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).digest()


def embed_stride(src: tuple, dst: tuple) -> int | None:
    """Stride taking ``src`` to ``dst`` by subsampling and channel padding, if any."""
    if len(src) != len(dst) or src[0] > dst[0]:
        return None
    if len(src) == 1:
        return 1
    for stride in (1, 2):
        if all(-(-a // stride) == b for a, b in zip(src[1:], dst[1:])):
            return stride
    return None


def validate_spec(spec: NetworkSpec) -> NetworkSpec:
    if not spec.layers:
        raise TopologyError("network has no layers")
    if spec.n_classes < 1:
        raise TopologyError("n_classes must be positive")
    prev = tuple(spec.input_shape)
    for j, layer in enumerate(spec.layers, start=1):
        if layer.index != j:
            raise TopologyError(f"layer at position {j} carries index {layer.index}")
        if layer.kind not in LAYER_KINDS:
            raise TopologyError(f"layer {j}: unknown kind {layer.kind!r}")
        if tuple(layer.in_shape) != prev:
            raise DimensionError(f"layer {j}: input shape {tuple(layer.in_shape)} does not match "
                                 f"preceding output {prev}")
        if any(d < 1 for d in layer.out_shape):
            raise DimensionError(f"layer {j}: output dimensions must be >= 1")
        if layer.kind == "dense":
            if len(layer.in_shape) != 1 or len(layer.out_shape) != 1:
                raise DimensionError(f"layer {j}: dense layers map vectors to vectors")
        else:
            if len(layer.in_shape) != 3 or len(layer.out_shape) != 3:
                raise DimensionError(f"layer {j}: conv layers map (C, H, W) arrays")
            if layer.stride not in (1, 2):
                raise TopologyError(f"layer {j}: conv stride must be 1 or 2")
            if layer.kernel not in (1, 3):
                raise TopologyError(f"layer {j}: only 3x3 and 1x1 kernels are supported")
            hw = conv_output_hw(layer.in_shape[1], layer.in_shape[2], layer.kernel, layer.stride)
            if tuple(layer.out_shape[1:]) != hw:
                raise DimensionError(f"layer {j}: output extent {layer.out_shape[1:]} should be {hw}")
        prev = tuple(layer.out_shape)

    seen = set()
    for s in spec.skips:
        key = (s.source, s.target)
        if key in seen:
            raise TopologyError(f"duplicate skip {s.source}->{s.target}")
        seen.add(key)
        if s.kind not in SKIP_KINDS:
            raise TopologyError(f"skip {s.source}->{s.target}: unknown kind {s.kind!r}")
        if not (0 <= s.source < s.target - 1 and s.target <= spec.n_layers):
            raise TopologyError(f"skip {s.source}->{s.target}: target must exceed source by at "
                                f"least 2 and lie within 1..{spec.n_layers}")
        src = spec.shape_of(s.source)
        dst = tuple(spec.layer(s.target).in_shape)
        if s.kind == "identity" and src != dst:
            raise DimensionError(f"identity skip {s.source}->{s.target}: source shape {src} "
                                 f"differs from target input shape {dst}")
        if s.kind == "projection" and embed_stride(src, dst) is None:
            raise DimensionError(f"projection skip {s.source}->{s.target}: cannot embed {src} into {dst}")
        if s.kind == "dense" and (len(src) != 1 or len(dst) != 1):
            raise DimensionError(f"dense skip {s.source}->{s.target}: learned skips join vector layers only")
    return spec


def dense_spec(dims, skips=(), n_classes: int = 2) -> NetworkSpec:
    """Chain of dense layers with widths ``dims = (d_0, d_1, ..., d_l)``.

    ``skips`` holds ``(source, target)`` or ``(source, target, kind)`` tuples.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise TopologyError("network has no layers")
    layers = tuple(LayerSpec(j, "dense", (dims[j - 1],), (dims[j],)) for j in range(1, len(dims)))
    skip_specs = tuple(SkipSpec(s[0], s[1], s[2] if len(s) > 2 else "identity") for s in skips)
    return validate_spec(NetworkSpec((dims[0],), layers, skip_specs, n_classes))


def conv_pyramid_spec(width: int = 4, depth: int = 1, residual: bool = False,
                  input_shape=(3, 32, 32), n_classes: int = 10) -> NetworkSpec:
    """Three blocks of ``depth`` two-conv units with ``width``, ``2 width``, ``4 width`` filters.

    Blocks 2 and 3 open with a stride-2 convolution. With ``residual`` every
    unit's input feeds its second convolution; when the shapes differ the edge
    is a parameter-free projection (subsample and zero-pad channels), so chain
    and residual variants carry the same learned parameters.
    """
    if width < 1 or depth < 1:
        raise TopologyError("width and depth must be positive")
    layers = []
    skips = []
    shape = tuple(input_shape)
    for block in range(3):
        channels = width * 2 ** block
        for unit in range(depth):
            unit_input = len(layers)
            for conv in range(2):
                stride = 2 if (block > 0 and unit == 0 and conv == 0) else 1
                hw = conv_output_hw(shape[1], shape[2], 3, stride)
                out = (channels,) + hw
                layers.append(LayerSpec(len(layers) + 1, "conv", shape, out, stride, 3))
                shape = out
            if residual:
                target = len(layers)
                src = tuple(input_shape) if unit_input == 0 else layers[unit_input - 1].out_shape
                kind = "identity" if tuple(src) == tuple(layers[target - 1].in_shape) else "projection"
                skips.append(SkipSpec(unit_input, target, kind))
    spec = NetworkSpec(tuple(input_shape), tuple(layers), tuple(skips), n_classes, width, depth)
    return validate_spec(spec)
