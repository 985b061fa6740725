"""Base classifier (ERM softmax MLP) and confidence scores."""
from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import ConfigError, ShapeError, TrainingError
from .nn import AdamState, Mlp, adam_step, read_network, rng_stream, write_network


class ConfidenceKind(str, enum.Enum):
    MAX_PROB = "max_prob"
    MAX_LOGIT = "max_logit"
    KL_UNIFORM = "kl_uniform"

    @property
    def natural_range(self):
        """Threshold range to sweep; ``None`` marks an unbounded side."""
        return {"max_prob": (0.0, 1.0), "max_logit": (None, None), "kl_uniform": (0.0, None)}[self.value]


@dataclass(frozen=True)
class LogitsRecord:
    """Logits for a batch of samples, shape ``(n, class_count)``."""

    logits: np.ndarray

    def __post_init__(self):
        lg = np.asarray(self.logits, dtype=np.float64)
        if lg.ndim == 1:
            lg = lg[None, :]
        if lg.ndim != 2 or lg.shape[1] < 2:
            raise ShapeError("logits need shape (n, class_count) with class_count >= 2")
        object.__setattr__(self, "logits", lg)

    @property
    def class_count(self):
        return self.logits.shape[1]

    @property
    def probabilities(self):
        return softmax(self.logits, axis=1)

    @property
    def predicted_class(self):
        # np.argmax resolves ties to the lowest index
        return np.argmax(self.logits, axis=1)

    def __len__(self):
        return self.logits.shape[0]

    def __getitem__(self, idx):
        return LogitsRecord(self.logits[np.atleast_1d(idx) if np.isscalar(idx) else idx])


def confidence(record, kind=ConfidenceKind.MAX_PROB):
    kind = ConfidenceKind(kind)
    if kind is ConfidenceKind.MAX_PROB:
        return record.probabilities.max(axis=1)
    if kind is ConfidenceKind.MAX_LOGIT:
        return record.logits.max(axis=1)
    logp = log_softmax(record.logits, axis=1)
    p = np.exp(logp)
    kl = np.sum(p * (logp + np.log(record.class_count)), axis=1)
    return np.maximum(kl, 0.0)


class Predictor(ClassifierMixin, BaseEstimator):
    """Softmax MLP classifier trained by plain ERM (cross-entropy, Adam)."""

    def __init__(self, hidden=(64,), activation="tanh", n_steps=1000, batch_size=128,
                 learning_rate=1e-2, weight_decay=0.0, random_state=0):
        self.hidden = hidden
        self.activation = activation
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = np.unique(y)
        if self.classes_.size < 2:
            raise ConfigError("need at least two classes to train a predictor")
        # labels are class indices; keep the full 0..max range as outputs
        C = int(max(self.classes_.max() + 1, 2))
        self.classes_ = np.arange(C)
        y = y.astype(np.int64)
        rng = rng_stream(self.random_state, 0)
        self.net_ = Mlp.init([X.shape[1], *self.hidden, C], rng, self.activation)
        self.n_features_in_ = X.shape[1]
        opt = AdamState.for_params(self.net_.params, learning_rate=self.learning_rate,
                                   weight_decay=self.weight_decay)
        onehot = np.eye(C)
        for step in range(1, self.n_steps + 1):
            idx = rng.integers(0, X.shape[0], size=min(self.batch_size, X.shape[0]))
            logits, cache = self.net_.forward(X[idx], return_cache=True)
            p = softmax(logits, axis=1)
            loss = -np.mean(log_softmax(logits, axis=1)[np.arange(len(idx)), y[idx]])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite predictor loss at step {step}", step=step)
            grads = self.net_.backward(X[idx], (p - onehot[y[idx]]) / len(idx), cache=cache)
            adam_step(opt, self.net_.params, grads)
        self.train_accuracy_ = float(np.mean(self.predict(X) == y))
        return self

    @property
    def class_count(self):
        return self.classes_.size

    def decision_function(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"X has {X.shape[1]} features, predictor expects {self.n_features_in_}")
        return self.net_.forward(X)

    def logits_record(self, X):
        return LogitsRecord(self.decision_function(X))

    def predict_proba(self, X):
        return softmax(self.decision_function(X), axis=1)

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)

    def to_bytes(self):
        check_is_fitted(self, "net_")
        buf = io.BytesIO()
        buf.write(struct.pack("<I", self.class_count))
        write_network(buf, self.net_)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data):
        buf = io.BytesIO(data)
        (C,) = struct.unpack("<I", buf.read(4))
        net = read_network(buf)
        if net.output_dim != C:
            raise ValueError("class count header does not match network output")
        model = cls(hidden=tuple(w.shape[1] for w in net.weights[:-1]), activation=net.activation)
        model.net_ = net
        model.classes_ = np.arange(C)
        model.n_features_in_ = net.input_dim
        return model

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def predict(f, X):
    return f.logits_record(X)


def train_predictor(X, y, random_state=0, **hyperparams):
    return Predictor(random_state=random_state, **hyperparams).fit(X, y)
