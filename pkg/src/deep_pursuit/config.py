"""Experiment configuration files.

INI-style ``key = value`` lines grouped into ``[network]``, ``[pursuit]``,
``[train]``, ``[attack]`` and ``[output]``. Lists are comma separated and
numbers may be written as fractions (``2/255``). Unknown keys, duplicate keys
and malformed values are errors that name the offending line.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .exceptions import ConfigError
from .network import NetworkSpec, conv_pyramid_spec, dense_spec
from .pursuit import normalize_mode

REQUIRED_SECTIONS = ("network", "pursuit")
MODE_LABELS = {"ltp": "L-TP", "lbp": "L-BP", "dp": "DP", "dp-res": "DP-res"}


@dataclass
class NetworkSection:
    arch: str = "dense"
    dims: tuple = (16, 16)
    skips: tuple = ()
    width: int = 4
    depth: int = 1
    input_shape: tuple = (3, 8, 8)
    classes: int = 10
    residual: bool = False


@dataclass
class PursuitSection:
    modes: tuple = ("L-TP", "DP")
    T: tuple = (0,)
    alpha: float = 0.0
    norm: str = "bn"


@dataclass
class TrainSection:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    seeds: tuple = (0,)
    dataset: str = "synthetic"
    fallback: str = ""
    data_dir: str = ""
    train_samples: int = 2000
    test_samples: int = 1000
    downsample: int = 1
    synth_margin: float = 3.0
    synth_noise: float = 1.0
    data_seed: int = 0
    eval_samples: int = 0


@dataclass
class AttackSection:
    epsilons: tuple = (1 / 255, 2 / 255, 4 / 255, 8 / 255)
    train_epsilon: float = 2 / 255
    trace_samples: int = 200


@dataclass
class OutputSection:
    dir: str = "runs"
    timestamp: bool = True
    plots: bool = True
    checkpoints: bool = True


@dataclass
class ExperimentConfig:
    network: NetworkSection = field(default_factory=NetworkSection)
    pursuit: PursuitSection = field(default_factory=PursuitSection)
    train: TrainSection = field(default_factory=TrainSection)
    attack: AttackSection = field(default_factory=AttackSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self, include_output: bool = True) -> dict:
        d = dataclasses.asdict(self)
        if not include_output:
            d.pop("output")
        return d

    def hash(self) -> str:
        """Digest of the resolved experiment (output location excluded); key order never matters."""
        blob = json.dumps(self.to_dict(include_output=False), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def network_spec(self, mode: str) -> NetworkSpec:
        """Topology used by ``mode``; residual deep pursuit always gets the skip connections."""
        net = self.network
        residual = net.residual or mode_label(mode) == "DP-res"
        if net.arch == "conv":
            return conv_pyramid_spec(net.width, net.depth, residual=residual,
                                 input_shape=tuple(net.input_shape), n_classes=net.classes)
        skips = (list(net.skips) or default_residual_skips(net.dims)) if residual else []
        return dense_spec(list(net.dims), skips=skips, n_classes=net.classes)

    def resolved_text(self) -> str:
        lines = [f"# config_hash = {self.hash()}"]
        for section, values in self.to_dict().items():
            lines.append(f"[{section}]")
            for key, value in values.items():
                lines.append(f"{key} = {_render(key, value)}")
            lines.append("")
        return "\n".join(lines)


def default_residual_skips(dims) -> list:
    """Skip every other layer: identity where widths agree, a learned map otherwise."""
    return [(j, j + 2, "identity" if dims[j] == dims[j + 1] else "dense") for j in range(len(dims) - 2)]


def mode_label(mode: str) -> str:
    """Canonical display name; ``DP-res`` stays distinct from ``DP``."""
    low = mode.strip().lower()
    if low in ("dp-res", "dp-skip"):
        return "DP-res"
    return MODE_LABELS[normalize_mode(low)]


def _render(key: str, value) -> str:
    if key == "skips":
        return ", ".join(f"{s[0]}-{s[1]}" + (f":{s[2]}" if len(s) > 2 else "") for s in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_render("", v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ----------------------------------------------------------------------------
# parsing
# ----------------------------------------------------------------------------


def _key_lines(text: str) -> dict:
    """Map ``(section, key)`` to the 1-based line where it is defined."""
    where, section = {}, None
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip().lower()
        elif "=" in s and section is not None:
            where.setdefault((section, s.split("=", 1)[0].strip().lower()), lineno)
    return where


def _number(text: str, kind):
    text = text.strip()
    if kind is int:
        return int(text)
    return float(Fraction(text)) if "/" in text else float(text)


def parse_number_list(raw: str) -> tuple:
    """Comma separated floats; fractions such as ``2/255`` are accepted."""
    return tuple(_number(s, float) for s in raw.split(",") if s.strip())


def _parse_skip(item: str) -> tuple:
    edge, _, kind = item.partition(":")
    src, _, dst = edge.partition("-")
    skip = (int(src), int(dst))
    return skip + (kind.strip(),) if kind.strip() else skip


def _convert(key: str, raw: str, default):
    raw = raw.strip()
    if key == "skips":
        return tuple(_parse_skip(s) for s in raw.split(",") if s.strip())
    if key == "modes":
        return tuple(mode_label(m) for m in raw.split(",") if m.strip())
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        kind = type(default[0]) if default else int
        items = [s for s in raw.split(",") if s.strip()]
        return tuple(_number(s, kind) if kind in (int, float) else s.strip() for s in items)
    if isinstance(default, (int, float)):
        return _number(raw, type(default))
    return raw


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    lines = _key_lines(text)
    cfg = ExperimentConfig()
    sections = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}
    for name in parser.sections():
        if name.lower() not in sections:
            raise ConfigError(f"{source}: unknown section [{name}]")
    for name in REQUIRED_SECTIONS:
        if not parser.has_section(name):
            raise ConfigError(f"{source}: missing required section [{name}]")
    for name, target in sections.items():
        if not parser.has_section(name):
            continue
        defaults = {f.name: getattr(target, f.name) for f in dataclasses.fields(target)}
        aliases = {k.lower(): k for k in defaults}
        if name == "pursuit":
            aliases["mode"] = "modes"
        for key, raw in parser.items(name):
            line = lines.get((name, key), "?")
            attr = aliases.get(key)
            if attr is None:
                raise ConfigError(f"{source}:{line}: unknown key '{key}' in [{name}]")
            try:
                setattr(target, attr, _convert(attr, raw, defaults[attr]))
            except (ValueError, KeyError, ZeroDivisionError) as exc:
                raise ConfigError(f"{source}:{line}: bad value for '{key}': {exc}") from exc
    _check(cfg, source)
    return cfg


def _check(cfg: ExperimentConfig, source: str) -> None:
    net, pur, tr = cfg.network, cfg.pursuit, cfg.train
    if net.arch not in ("dense", "conv"):
        raise ConfigError(f"{source}: network arch must be 'dense' or 'conv'")
    if not pur.modes:
        raise ConfigError(f"{source}: no pursuit modes given")
    if pur.norm not in ("pure", "bn"):
        raise ConfigError(f"{source}: norm must be 'pure' or 'bn'")
    if any(t < 0 for t in pur.T) or not pur.T:
        raise ConfigError(f"{source}: T values must be non-negative integers")
    if tr.dataset not in ("synthetic", "textures", "cifar10"):
        raise ConfigError(f"{source}: dataset must be 'synthetic', 'textures' or 'cifar10'")
    if tr.fallback not in ("", "synthetic", "textures"):
        raise ConfigError(f"{source}: fallback must be empty, 'synthetic' or 'textures'")
    if tr.batch_size < 1 or tr.epochs < 0 or not tr.seeds:
        raise ConfigError(f"{source}: batch_size >= 1, epochs >= 0 and at least one seed required")
    eps = cfg.attack.epsilons
    if any(e < 0 for e in eps) or list(eps) != sorted(eps):
        raise ConfigError(f"{source}: epsilons must be non-negative and sorted")
    try:
        for mode in pur.modes:
            cfg.network_spec(mode)
    except ValueError as exc:
        raise ConfigError(f"{source}: invalid network: {exc}") from exc


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, str(path))
