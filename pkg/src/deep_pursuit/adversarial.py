"""Fast gradient sign attacks through the full unrolled pursuit."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .model import ModelParams
from .operators import NetworkOperators
from .pursuit import PursuitConfig
from .records import RunRecord
from .tensor import Tensor, backward, cross_entropy, graph_fingerprint
from .training import forward_logits


@dataclass
class AttackConfig:
    epsilon: float = 2 / 255
    low: float = 0.0
    high: float = 1.0
    method: str = "fgsm"

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.method != "fgsm":
            raise ValueError(f"unsupported attack {self.method!r}")


def input_gradient(x, label, params: ModelParams, config: PursuitConfig,
                   ops: NetworkOperators | None = None, fingerprint: bool = False):
    """Gradient of the summed cross-entropy with respect to the input batch."""
    ops = ops if ops is not None else NetworkOperators(params)
    xt = Tensor(x, requires_grad=True)
    logits = forward_logits(xt, params, config, ops)
    label = np.atleast_1d(label)
    loss = cross_entropy(logits, label) * float(len(label))
    g = backward(loss).get(xt, np.zeros_like(xt.data))
    if fingerprint:
        return g, graph_fingerprint(loss)
    return g


def fgsm(x, label, params: ModelParams, config: PursuitConfig, attack: AttackConfig,
         ops: NetworkOperators | None = None) -> np.ndarray:
    """``clip(x + eps * sign(grad_x J), low, high)`` with ``sign(0) = 0``."""
    x = np.asarray(x, dtype=float)
    if attack.epsilon == 0:
        return x.copy()
    g = input_gradient(x, label, params, config, ops)
    return perturb(x, g, attack)


def perturb(x: np.ndarray, grad: np.ndarray, attack: AttackConfig) -> np.ndarray:
    """Signed step of size epsilon, then clipping to the pixel range.

    Entries whose computed distance from ``x`` rounds above epsilon are moved
    back one ulp at a time, so ``max|adv - x| <= epsilon`` holds exactly in
    floating point.
    """
    x = np.asarray(x, dtype=float)
    adv = x + attack.epsilon * np.sign(grad)
    over = np.abs(adv - x) > attack.epsilon
    while over.any():
        adv[over] = np.nextafter(adv[over], x[over])
        over = np.abs(adv - x) > attack.epsilon
    return np.clip(adv, attack.low, attack.high)


def robust_accuracy(dataset, params: ModelParams, config: PursuitConfig, attack: AttackConfig,
                    batch_size: int = 250) -> float:
    """Fraction of samples still classified correctly after the attack."""
    X, y = dataset if isinstance(dataset, tuple) else (dataset.images, dataset.labels)
    if len(X) == 0:
        raise ValueError("dataset is empty")
    ops = NetworkOperators(params)
    correct = 0
    for i in range(0, len(X), batch_size):
        xb, yb = X[i:i + batch_size], np.asarray(y[i:i + batch_size])
        xa = fgsm(xb, yb, params, config, attack, ops)
        logits = forward_logits(xa, params, config, ops).data
        correct += int(np.sum(logits.argmax(axis=1) == yb))
    return correct / len(X)


def epsilon_sweep(dataset, params: ModelParams, config: PursuitConfig, epsilons, mode_label: str = "",
                  seed: int = 0, config_hash: str = "", epoch: int = 0) -> list[RunRecord]:
    """One record per epsilon; ``clean_acc`` is the epsilon = 0 accuracy."""
    epsilons = [float(e) for e in epsilons]
    if any(e < 0 for e in epsilons):
        raise ValueError("epsilon values must be non-negative")
    if epsilons != sorted(epsilons):
        raise ValueError("epsilon values must be sorted")
    clean = robust_accuracy(dataset, params, config, AttackConfig(0.0))
    rows = []
    for eps in epsilons:
        start = time.perf_counter()
        acc = clean if eps == 0 else robust_accuracy(dataset, params, config, AttackConfig(eps))
        rows.append(RunRecord(config_hash=config_hash, seed=seed, mode=mode_label or config.mode,
                              T=config.T, epsilon=eps, epoch=epoch, clean_acc=clean, robust_acc=acc,
                              wall_s=time.perf_counter() - start))
    return rows


def monotone_violations(records: list[RunRecord]) -> list[tuple[float, float]]:
    """Consecutive epsilon pairs where robust accuracy went up (reported, not an error)."""
    rows = sorted(records, key=lambda r: r.epsilon)
    return [(a.epsilon, b.epsilon) for a, b in zip(rows, rows[1:]) if b.robust_acc > a.robust_acc]
