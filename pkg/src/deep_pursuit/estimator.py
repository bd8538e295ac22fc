"""scikit-learn compatible classifier wrapping pursuit-network training."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .adversarial import AttackConfig, robust_accuracy
from .config import default_residual_skips
from .network import conv_pyramid_spec, dense_spec
from .pursuit import PursuitConfig, run_pursuit
from .training import TrainConfig, predict_logits, train


class DeepPursuitClassifier(ClassifierMixin, BaseEstimator):
    """Unrolled pursuit network trained end to end with a linear classifier head.

    With ``input_shape=None`` the rows of ``X`` feed a dense network whose code
    widths are ``hidden``; otherwise rows are reshaped to ``input_shape`` and
    the convolutional pyramid architecture (``width``, ``depth``) is used.
    ``residual`` adds the skip topology. Pixel-style inputs in [0, 1] are
    expected when using :meth:`robust_score`.
    """

    def __init__(self, hidden=(32,), input_shape=None, width=4, depth=1, residual=False, mode="dp",
                 T=5, alpha=0.0, norm="bn", epochs=20, batch_size=64, lr=0.05, momentum=0.9,
                 weight_decay=5e-4, random_state=0):
        self.hidden = hidden
        self.input_shape = input_shape
        self.width = width
        self.depth = depth
        self.residual = residual
        self.mode = mode
        self.T = T
        self.alpha = alpha
        self.norm = norm
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.random_state = random_state

    def _build_spec(self, n_features: int, n_classes: int):
        if self.input_shape is None:
            dims = [n_features, *self.hidden]
            skips = default_residual_skips(dims) if self.residual else []
            return dense_spec(dims, skips=skips, n_classes=n_classes)
        if int(np.prod(self.input_shape)) != n_features:
            raise ValueError(f"input_shape {self.input_shape} does not hold {n_features} features")
        return conv_pyramid_spec(self.width, self.depth, residual=self.residual,
                             input_shape=tuple(self.input_shape), n_classes=n_classes)

    def _reshape(self, X):
        return X if self.input_shape is None else X.reshape((len(X),) + tuple(self.input_shape))

    @property
    def _pursuit(self) -> PursuitConfig:
        return PursuitConfig(T=self.T, mode=self.mode, alpha=self.alpha)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need samples of at least two classes")
        self.n_features_in_ = X.shape[1]
        self.spec_ = self._build_spec(X.shape[1], len(self.classes_))
        config = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                             momentum=self.momentum, weight_decay=self.weight_decay,
                             seed=int(self.random_state or 0), mode=self.mode, T=self.T,
                             alpha=self.alpha, norm=self.norm, attack_epsilon=None)
        self.params_, self.history_ = train((self._reshape(X), encoded), self.spec_, config)
        return self

    def _validated(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features; the model was fitted with {self.n_features_in_}")
        return self._reshape(X)

    def decision_function(self, X) -> np.ndarray:
        return predict_logits(self._validated(X), self.params_, self._pursuit)

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    def transform(self, X) -> np.ndarray:
        """Final-layer codes, flattened per sample."""
        codes = run_pursuit(self._validated(X), self.params_, self._pursuit).output.data
        return codes.reshape(len(codes), -1)

    def robust_score(self, X, y, epsilon: float = 2 / 255) -> float:
        """Accuracy under an FGSM attack of radius ``epsilon``."""
        Xr = self._validated(X)
        index = {c: i for i, c in enumerate(self.classes_)}
        try:
            encoded = np.array([index[v] for v in np.asarray(y)])
        except KeyError as exc:
            raise ValueError(f"label {exc.args[0]!r} was not seen during fit") from None
        return robust_accuracy((Xr, encoded), self.params_, self._pursuit, AttackConfig(epsilon))
