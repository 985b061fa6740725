"""Discrete-time DDPM: noise schedule, forward noising, ε-prediction training
and ancestral sampling from an arbitrary starting step.

The network predicts the injected noise; the score of the step-``s``
marginal is recovered as ``-eps_net(x, s) / sqrt(1 - alpha_bar_s)``.
"""
from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ConfigError, ShapeError, TrainingError
from .nn import AdamState, Mlp, adam_step, as_matrix, read_network, rng_stream, write_network

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise variances ``sigmas[l-1] = σ_l`` and ``alpha_bar[s] = ∏_{l≤s}(1-σ_l)``."""

    sigmas: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=np.float64)
        if s.ndim != 1 or s.size == 0:
            raise ConfigError("schedule needs at least one step")
        if np.any(s <= 0) or np.any(s >= 1):
            raise ConfigError("noise variances must lie in (0, 1)")
        if np.any(np.diff(s) < 0):
            raise ConfigError("noise variances must be non-decreasing")
        object.__setattr__(self, "sigmas", s)
        object.__setattr__(self, "alpha_bar", np.concatenate([[1.0], np.cumprod(1.0 - s)]))

    @classmethod
    def linear(cls, T=1000, start=1e-4, end=0.02):
        return cls(np.linspace(start, end, T))

    @property
    def T(self):
        return self.sigmas.size

    def check_step(self, s):
        if not 0 <= s <= self.T or int(s) != s:
            raise ConfigError(f"step {s} outside 0..{self.T}")
        return int(s)


def alpha_beta(schedule, s):
    """Noise and signal coefficients at step ``s``: ``(sqrt(1-ᾱ_s), sqrt(ᾱ_s))``."""
    s = schedule.check_step(s)
    ab = schedule.alpha_bar[s]
    return float(np.sqrt(1.0 - ab)), float(np.sqrt(ab))


def forward_noise(x0, s, eps, schedule):
    """``β·x0 + α·eps`` for step ``s``."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {x0.shape} and eps {eps.shape} differ")
    a, b = alpha_beta(schedule, s)
    return b * x0 + a * eps


class StrideSampler:
    """Linear subsampling of the step indices 1..T down to K steps."""

    def __init__(self, T, K=None):
        K = T if K is None else int(K)
        if not 1 <= K <= T:
            raise ConfigError(f"stride K={K} must be in 1..{T}")
        self.T, self.K = int(T), K
        self.timesteps = (np.arange(1, K + 1) * T) // K

    def chain(self, s):
        """Descending base steps visited when sampling from step ``s`` to 0."""
        if s <= 0:
            return np.zeros(0, dtype=np.int64)
        below = self.timesteps[self.timesteps < s]
        return np.concatenate([[s], below[::-1]]).astype(np.int64)

    def n_steps(self, s):
        return len(self.chain(s))

    def __repr__(self):
        return f"StrideSampler(T={self.T}, K={self.K})"


def _ancestral_step(model, x, t, t_prev, noise):
    sched = model.schedule
    ab_t, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t_prev]
    sig = 1.0 - ab_t / ab_prev
    eps = model.predict_eps(x, t)
    mean = (x - sig / np.sqrt(1.0 - ab_t) * eps) / np.sqrt(1.0 - sig)
    if t_prev == 0:
        return mean
    var = sig * (1.0 - ab_prev) / (1.0 - ab_t)
    return mean + np.sqrt(var) * noise


def reverse_sample_from(model, x_s, s, stride=None, rng=None, noise=None):
    """Ancestral sampling from step ``s`` down to 0, in the model's internal space.

    ``model`` needs ``schedule`` and ``predict_eps(x, t)``.  Noise for the
    intermediate steps comes from ``noise`` (shape ``(n_steps, *x_s.shape)``)
    when given, otherwise from ``rng``.  The last step adds no noise.
    """
    x = np.array(x_s, dtype=np.float64)
    s = model.schedule.check_step(s)
    stride = stride or StrideSampler(model.schedule.T)
    chain = stride.chain(s)
    if noise is not None and noise.shape[0] < len(chain):
        raise ShapeError("not enough pre-drawn noise for the sampling chain")
    for i, t in enumerate(chain):
        t_prev = chain[i + 1] if i + 1 < len(chain) else 0
        if t_prev == 0:
            z = None
        elif noise is not None:
            z = noise[i]
        else:
            z = rng.standard_normal(x.shape)
        x = _ancestral_step(model, x, int(t), int(t_prev), z)
    return x


class DiffusionModel(TransformerMixin, BaseEstimator):
    """Unconditional ε-prediction diffusion model for one source domain.

    ``fit`` trains on the rows of ``X``.  ``transform`` runs the
    noise-then-denoise map used at test time: mix each row with Gaussian
    noise at ``start_step`` and sample back to step 0.

    Data are mapped to internal coordinates by ``(x - data_shift) / data_scale``
    before noising and mapped back after sampling.

    ``max_train_step`` restricts training to steps ``1..max_train_step``.
    Such a model is only valid for ``transform`` with a start step at or
    below that cap; ``sample`` needs the full range and refuses to run.

    With ``gaussian_skip`` the network only learns a residual on top of
    ``E[eps | x_t]`` for a per-dimension Gaussian fitted to the training
    data.  Pixels that never vary are then denoised exactly from the first
    step, which matters for sparse high-dimensional inputs.
    """

    def __init__(self, T=1000, sigma_start=1e-4, sigma_end=0.02, hidden=(128, 128, 128),
                 activation="relu", time_dim=16, n_steps=5000, batch_size=256,
                 learning_rate=1e-3, lr_decay=True, weight_decay=0.0, data_shift=0.0,
                 data_scale=1.0, domain_id="", random_state=0, start_step=100, stride=None,
                 max_train_step=None, gaussian_skip=False):
        self.T = T
        self.sigma_start = sigma_start
        self.sigma_end = sigma_end
        self.hidden = hidden
        self.activation = activation
        self.time_dim = time_dim
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.weight_decay = weight_decay
        self.data_shift = data_shift
        self.data_scale = data_scale
        self.domain_id = domain_id
        self.random_state = random_state
        self.start_step = start_step
        self.stride = stride
        self.max_train_step = max_train_step
        self.gaussian_skip = gaussian_skip

    # -- training ----------------------------------------------------------

    def _init_model(self, d, rng):
        self.schedule_ = NoiseSchedule.linear(self.T, self.sigma_start, self.sigma_end)
        dims = [d, *self.hidden, d]
        self.net_ = Mlp.init(dims, rng, self.activation, self.time_dim)
        self.n_features_in_ = d

    def fit(self, X, y=None, checkpoints=None, callback=None):
        """Train the ε-network.

        ``checkpoints`` is an optional collection of step counts at which
        ``callback(step, self)`` is invoked (used to probe training progress).
        """
        X = check_array(X, dtype=np.float64)
        if X.shape[0] == 0:
            raise ConfigError("empty training set")
        if self.max_train_step is not None and not 1 <= self.max_train_step <= self.T:
            raise ConfigError(f"max_train_step must lie in 1..{self.T}")
        rng = rng_stream(self.random_state, 0) if not isinstance(self.random_state, np.random.Generator) \
            else self.random_state
        self._init_model(X.shape[1], rng)
        Xi = self.to_internal(X)
        if self.gaussian_skip:
            self.skip_mean_ = Xi.mean(axis=0)
            self.skip_var_ = Xi.var(axis=0)
        else:
            self.skip_mean_ = self.skip_var_ = None
        opt = AdamState.for_params(self.net_.params, learning_rate=self.learning_rate,
                                   weight_decay=self.weight_decay)
        checkpoints = set(checkpoints or ())
        history = []
        running = None
        for step in range(1, self.n_steps + 1):
            if self.lr_decay:
                frac = (step - 1) / max(self.n_steps, 1)
                opt.learning_rate = self.learning_rate * (0.1 + 0.9 * 0.5 * (1 + np.cos(np.pi * frac)))
            idx = rng.integers(0, Xi.shape[0], size=min(self.batch_size, Xi.shape[0]))
            loss, grads = training_loss(self, Xi[idx], rng)
            try:
                adam_step(opt, self.net_.params, grads)
            except TrainingError as exc:
                raise TrainingError(f"diffusion training diverged at step {step}: {exc}",
                                    layer=exc.layer, step=step) from exc
            running = loss if running is None else 0.99 * running + 0.01 * loss
            if step % 100 == 0 or step == self.n_steps:
                history.append((step, running))
                log.debug("diffusion %s step %d loss %.5f", self.domain_id, step, running)
            if step in checkpoints and callback is not None:
                callback(step, self)
        self.loss_history_ = history
        self.final_loss_ = running
        return self

    # -- inference ----------------------------------------------------------

    @property
    def schedule(self):
        check_is_fitted(self, "net_")
        return self.schedule_

    @property
    def trained_up_to(self):
        return self.T if self.max_train_step is None else int(self.max_train_step)

    @property
    def data_dim(self):
        return self.n_features_in_

    def to_internal(self, X):
        return (np.asarray(X, dtype=np.float64) - self.data_shift) / self.data_scale

    def from_internal(self, X):
        return np.asarray(X, dtype=np.float64) * self.data_scale + self.data_shift

    def skip_eps(self, x, t):
        """Closed-form ε posterior mean under the fitted Gaussian, or 0."""
        if getattr(self, "skip_mean_", None) is None:
            return 0.0
        ab = self.schedule_.alpha_bar[np.asarray(t)]
        ab = np.broadcast_to(ab, (np.shape(x)[0],))[:, None]
        a, b = np.sqrt(1.0 - ab), np.sqrt(ab)
        return a * (x - b * self.skip_mean_) / (ab * self.skip_var_ + a * a)

    def predict_eps(self, x, t):
        return self.net_.forward(x, t) + self.skip_eps(x, t)

    def score(self, x, t):
        """Estimated score of the step-``t`` marginal (internal coordinates)."""
        ab = self.schedule.alpha_bar[t]
        return -self.predict_eps(x, t) / np.sqrt(1.0 - ab)

    def sample(self, n, rng=None, stride=None):
        """Unconditional samples: start from N(0, I) at step T."""
        check_is_fitted(self, "net_")
        if self.trained_up_to < self.T:
            raise ConfigError(f"model was trained on steps up to {self.trained_up_to} only")
        rng = rng if rng is not None else rng_stream(self.random_state, 1)
        x_T = rng.standard_normal((n, self.n_features_in_))
        return self.from_internal(reverse_sample_from(self, x_T, self.T, stride, rng))

    def transform(self, X, start_step=None, rng=None):
        """Forward-noise rows of ``X`` to ``start_step`` then sample back to step 0."""
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"X has {X.shape[1]} features, model expects {self.n_features_in_}")
        s = self.start_step if start_step is None else start_step
        rng = rng if rng is not None else rng_stream(self.random_state, 2)
        stride = self.stride if isinstance(self.stride, StrideSampler) else \
            StrideSampler(self.T, self.stride)
        x_hat = forward_noise(self.to_internal(X), s, rng.standard_normal(X.shape), self.schedule_)
        return self.from_internal(reverse_sample_from(self, x_hat, s, stride, rng))

    # -- persistence ----------------------------------------------------------

    def to_bytes(self):
        check_is_fitted(self, "net_")
        buf = io.BytesIO()
        buf.write(struct.pack("<I", self.schedule_.T))
        buf.write(self.schedule_.sigmas.astype("<f8").tobytes())
        name = str(self.domain_id).encode("utf-8")
        buf.write(struct.pack("<I", len(name)))
        buf.write(name)
        buf.write(struct.pack("<ddI", self.data_shift, self.data_scale, self.trained_up_to))
        has_skip = getattr(self, "skip_mean_", None) is not None
        buf.write(struct.pack("<B", int(has_skip)))
        if has_skip:
            buf.write(struct.pack("<I", self.skip_mean_.size))
            buf.write(self.skip_mean_.astype("<f8").tobytes())
            buf.write(self.skip_var_.astype("<f8").tobytes())
        write_network(buf, self.net_)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data):
        buf = io.BytesIO(data)
        (T,) = struct.unpack("<I", buf.read(4))
        sigmas = np.frombuffer(buf.read(8 * T), dtype="<f8").astype(np.float64)
        (n,) = struct.unpack("<I", buf.read(4))
        domain_id = buf.read(n).decode("utf-8")
        shift, scale, trained = struct.unpack("<ddI", buf.read(20))
        (has_skip,) = struct.unpack("<B", buf.read(1))
        skip = None
        if has_skip:
            (d,) = struct.unpack("<I", buf.read(4))
            skip = [np.frombuffer(buf.read(8 * d), dtype="<f8").astype(np.float64) for _ in range(2)]
        net = read_network(buf)
        model = cls(T=T, sigma_start=float(sigmas[0]), sigma_end=float(sigmas[-1]),
                    hidden=tuple(w.shape[1] for w in net.weights[:-1]), activation=net.activation,
                    time_dim=net.time_dim, data_shift=shift, data_scale=scale, domain_id=domain_id,
                    max_train_step=None if trained == T else trained,
                    gaussian_skip=bool(has_skip))
        model.schedule_ = NoiseSchedule(sigmas)
        model.net_ = net
        model.n_features_in_ = net.input_dim
        model.skip_mean_, model.skip_var_ = skip if skip else (None, None)
        return model

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def training_loss(model, x0, rng):
    """Noise-prediction loss on a batch and its parameter gradients.

    Loss is ``mean_i ||eps_i - eps_net(x_s_i, s_i)||²`` with ``s_i`` uniform
    on 1..T (or 1..max_train_step), which is the score-matching objective with weight
    ``1 - ᾱ_s`` up to a constant.
    """
    x0 = as_matrix(x0, model.net_.input_dim, "x0")
    if x0.shape[0] == 0:
        raise ConfigError("empty batch")
    sched = model.schedule_
    n = x0.shape[0]
    t_max = getattr(model, "trained_up_to", sched.T)
    t = rng.integers(1, t_max + 1, size=n)
    eps = rng.standard_normal(x0.shape)
    ab = sched.alpha_bar[t][:, None]
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    pred, cache = model.net_.forward(x_t, t, return_cache=True)
    skip = model.skip_eps(x_t, t) if hasattr(model, "skip_eps") else 0.0
    pred = pred + skip
    resid = pred - eps
    loss = float(np.sum(resid * resid) / n)
    if not np.isfinite(loss):
        raise TrainingError("non-finite diffusion loss")
    grads = model.net_.backward(x_t, 2.0 * resid / n, t, cache)
    return loss, grads


def train_diffusion(X, domain_id="", random_state=0, **hyperparams):
    return DiffusionModel(domain_id=domain_id, random_state=random_state, **hyperparams).fit(X)
