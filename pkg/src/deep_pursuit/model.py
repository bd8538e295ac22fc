"""Learned quantities of a pursuit network and their initialization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import NetworkSpec, validate_spec
from .tensor import Tensor

LAMBDA_INIT = 0.01
BETA_MIN = 1e-3
NORM_MODES = ("pure", "bn")


@dataclass
class ModelParams:
    """Named parameter arrays in declaration order.

    Per layer ``j``: ``B{j}`` dictionary, ``lam{j}`` per-channel threshold,
    ``beta{j}`` step multiplier and, in ``bn`` mode, ``scale{j}``, ``offset{j}``
    and the non-trainable ``running_mean{j}`` / ``running_var{j}``. Learned dense skips are ``S{n}_{m}`` and
    the classifier is ``A`` with shape ``(features, classes)``.
    """

    spec: NetworkSpec
    arrays: dict = field(default_factory=dict)
    seed: int = 0
    norm: str = "pure"

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    @property
    def names(self) -> list[str]:
        return list(self.arrays)

    @property
    def trainable(self) -> list[str]:
        return [n for n in self.arrays if not n.startswith("running_")]

    @property
    def decayed(self) -> list[str]:
        return [n for n in self.arrays if n[0] in "BSA"]

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, {k: v.copy() for k, v in self.arrays.items()}, self.seed, self.norm)

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad and k in self.trainable)
                for k, v in self.arrays.items()}

    def equal(self, other: "ModelParams") -> bool:
        if self.names != other.names:
            return False
        return all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays)


def init_model(spec: NetworkSpec, seed: int = 0, norm: str = "pure") -> ModelParams:
    """Fan-in scaled uniform dictionaries, thresholds 0.01, unit step multipliers."""
    validate_spec(spec)
    if norm not in NORM_MODES:
        raise ValueError(f"norm must be one of {NORM_MODES}")
    rng = np.random.default_rng(seed)
    arrays = {}
    for layer in spec.layers:
        j = layer.index
        shape = layer.dictionary_shape
        fan_in = shape[0] if layer.kind == "dense" else int(np.prod(shape[1:]))
        bound = 1.0 / np.sqrt(3.0 * fan_in)
        arrays[f"B{j}"] = rng.uniform(-bound, bound, size=shape)
        arrays[f"lam{j}"] = np.full(layer.channels, LAMBDA_INIT)
        arrays[f"beta{j}"] = np.asarray(1.0)
        if norm == "bn":
            arrays[f"scale{j}"] = np.ones(layer.channels)
            arrays[f"offset{j}"] = np.zeros(layer.channels)
            arrays[f"running_mean{j}"] = np.zeros(layer.channels)
            arrays[f"running_var{j}"] = np.ones(layer.channels)
    for s in sorted(spec.skips, key=lambda s: (s.target, s.source)):
        if s.kind == "dense":
            d_src = spec.shape_of(s.source)[0]
            d_dst = spec.layer(s.target).in_shape[0]
            bound = 1.0 / np.sqrt(3.0 * d_src)
            arrays[f"S{s.source}_{s.target}"] = rng.uniform(-bound, bound, size=(d_src, d_dst))
    features = spec.n_features
    bound = 1.0 / np.sqrt(features)
    arrays["A"] = rng.uniform(-bound, bound, size=(features, spec.n_classes))
    return ModelParams(spec, arrays, seed, norm)
