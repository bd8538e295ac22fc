"""Supervised training of unrolled pursuit networks.

Backpropagation runs through every unrolled iteration. After each momentum
SGD step the thresholds are projected onto ``[0, inf)`` and the step
multipliers onto ``[BETA_MIN, 1]``; weight decay touches dictionaries, learned
skips and the classifier only.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionError, NumericIncident
from .model import BETA_MIN, ModelParams, init_model
from .network import NetworkSpec, validate_spec
from .operators import NetworkOperators
from .pursuit import PursuitConfig, run_pursuit
from .records import RunRecord
from .tensor import Tensor, adjoint_map, backward, cross_entropy, reduce_global_average_pool

log = logging.getLogger(__name__)

SCALE_MIN = 1e-3
CONVERGENCE_WINDOW = 3
CONVERGENCE_TOL = 1e-3


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    mode: str = "dp"
    T: int = 0
    alpha: float = 0.0
    norm: str = "bn"
    schedule: str = "cosine"
    attack_epsilon: float | None = 2 / 255
    eval_samples: int | None = None
    max_incidents: int = 10
    label: str = ""

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError("schedule must be 'cosine' or 'constant'")

    @property
    def pursuit(self) -> PursuitConfig:
        return PursuitConfig(T=self.T, mode=self.mode, alpha=self.alpha)


@dataclass
class SGDState:
    velocity: dict = field(default_factory=dict)
    steps: int = 0
    incidents: int = 0


def _features(out: Tensor, spec: NetworkSpec) -> Tensor:
    return reduce_global_average_pool(out) if spec.is_conv else out


def forward_logits(x, params: ModelParams, config: PursuitConfig, ops: NetworkOperators | None = None,
                   return_state: bool = False):
    """Pursuit inference followed by pooling and the linear classifier ``A^T f(x)``."""
    ops = ops if ops is not None else NetworkOperators(params)
    state = run_pursuit(x, params, config, ops)
    logits = adjoint_map(ops.t["A"], _features(state.output, params.spec))
    return (logits, state) if return_state else logits


def loss_cross_entropy(logits: Tensor, label) -> Tensor:
    """Softmax cross-entropy (batch mean), stabilized by max subtraction."""
    return cross_entropy(logits, label)


def predict_logits(X, params: ModelParams, config: PursuitConfig, batch_size: int = 250) -> np.ndarray:
    ops = NetworkOperators(params)
    out = [forward_logits(X[i:i + batch_size], params, config, ops).data
           for i in range(0, len(X), batch_size)]
    return np.concatenate(out, axis=0)


def accuracy(X, y, params: ModelParams, config: PursuitConfig, batch_size: int = 250) -> float:
    return float(np.mean(predict_logits(X, params, config, batch_size).argmax(axis=1) == np.asarray(y)))


def learning_rate(config: TrainConfig, step: int, total: int) -> float:
    if config.schedule == "constant" or total <= 0:
        return config.lr
    return 0.5 * config.lr * (1.0 + math.cos(math.pi * step / total))


def sgd_step(params: ModelParams, grads: dict, state: SGDState, config: TrainConfig,
             lr: float | None = None) -> bool:
    """Momentum SGD update followed by constraint projection.

    Returns ``False`` (leaving parameters untouched and counting an incident)
    when any gradient is non-finite.
    """
    lr = config.lr if lr is None else lr
    if any(not np.all(np.isfinite(g)) for g in grads.values()):
        state.incidents += 1
        log.warning("non-finite gradient; step %d rejected", state.steps)
        return False
    decayed = set(params.decayed)
    for name in params.trainable:
        g = grads.get(name)
        if g is None:
            continue
        if name in decayed and config.weight_decay:
            g = g + config.weight_decay * params.arrays[name]
        v = state.velocity.get(name)
        v = g if v is None else config.momentum * v + g
        state.velocity[name] = v
        params.arrays[name] = params.arrays[name] - lr * v
    for name in params.names:
        if name.startswith("lam"):
            params.arrays[name] = np.maximum(params.arrays[name], 0.0)
        elif name.startswith("beta"):
            params.arrays[name] = np.asarray(np.clip(params.arrays[name], BETA_MIN, 1.0))
        elif name.startswith("scale"):
            params.arrays[name] = np.maximum(params.arrays[name], SCALE_MIN)
    state.steps += 1
    return True


def _unpack(dataset):
    if isinstance(dataset, tuple):
        return np.asarray(dataset[0], dtype=float), np.asarray(dataset[1], dtype=np.int64)
    return dataset.images, dataset.labels


def _converged(history: list) -> bool:
    if len(history) <= CONVERGENCE_WINDOW:
        return False
    window = history[-(CONVERGENCE_WINDOW + 1):]
    return max(window) - min(window) < CONVERGENCE_TOL


def train(dataset, spec: NetworkSpec, config: TrainConfig, validation=None,
          params: ModelParams | None = None, config_hash: str = "") -> tuple[ModelParams, list]:
    """Minibatch training; returns final parameters and one :class:`RunRecord` per epoch.

    Each record carries train loss/accuracy, clean validation accuracy and
    FGSM accuracy at ``config.attack_epsilon``. The first epoch whose train
    accuracy varied by less than 0.1% over the preceding three epochs is
    flagged ``converged``.
    """
    from .adversarial import AttackConfig, robust_accuracy

    validate_spec(spec)
    X, y = _unpack(dataset)
    if len(X) == 0:
        raise ValueError("training set is empty")
    if X.shape[1:] != tuple(spec.input_shape):
        raise DimensionError(f"dataset samples {X.shape[1:]} do not match network input {spec.input_shape}")
    if y.max() >= spec.n_classes:
        raise DimensionError(f"labels exceed the {spec.n_classes} network classes")
    params = params if params is not None else init_model(spec, config.seed, config.norm)
    pursuit = config.pursuit
    rng = np.random.default_rng(config.seed)
    state = SGDState()
    n_batches = -(-len(X) // config.batch_size)
    total_steps = n_batches * config.epochs
    records = []
    acc_history = []
    marked = False
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(len(X))
        loss_sum, correct = 0.0, 0
        for b in range(n_batches):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            tensors = params.tensors(requires_grad=True)
            ops = NetworkOperators(params, tensors, training=True)
            logits = forward_logits(X[idx], params, pursuit, ops)
            loss = cross_entropy(logits, y[idx])
            if not np.isfinite(loss.data):
                state.incidents += 1
                if state.incidents > config.max_incidents:
                    raise NumericIncident("training diverged: too many non-finite losses")
                continue
            leaves = backward(loss)
            grads = {name: leaves[t] for name, t in tensors.items() if t in leaves}
            if not sgd_step(params, grads, state, config, learning_rate(config, state.steps, total_steps)):
                if state.incidents > config.max_incidents:
                    raise NumericIncident("training diverged: too many non-finite gradients")
            loss_sum += float(loss.data) * len(idx)
            correct += int(np.sum(logits.data.argmax(axis=1) == y[idx]))
        rec = RunRecord(config_hash=config_hash, seed=config.seed, mode=config.label or config.mode,
                        T=config.T, epoch=epoch, train_loss=loss_sum / len(X), train_acc=correct / len(X))
        acc_history.append(rec.train_acc)
        if not marked and _converged(acc_history):
            rec.converged = marked = True
        if validation is not None:
            Xv, yv = _unpack(validation)
            if config.eval_samples:
                Xv, yv = Xv[:config.eval_samples], yv[:config.eval_samples]
            rec.clean_acc = accuracy(Xv, yv, params, pursuit)
            if config.attack_epsilon is not None:
                rec.epsilon = config.attack_epsilon
                rec.robust_acc = robust_accuracy((Xv, yv), params, pursuit, AttackConfig(config.attack_epsilon))
        rec.wall_s = time.perf_counter() - start
        log.info("epoch %d loss %.4f train %.3f val %.3f adv %.3f", epoch, rec.train_loss,
                 rec.train_acc, rec.clean_acc, rec.robust_acc)
        records.append(rec)
    return params, records
