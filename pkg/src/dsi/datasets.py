"""Synthetic out-of-distribution benchmarks and the ``DSD1`` dataset file format."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

from .exceptions import ConfigError, ShapeError
from .nn import rng_stream

DATASET_MAGIC = b"DSD1"


@dataclass(frozen=True)
class GaussianMixtureSpec:
    """Diagonal-covariance Gaussian mixture.

    ``means`` and ``variances`` have shape ``(k, d)``; ``weights`` shape ``(k,)``.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        m = np.asarray(self.means, dtype=np.float64)
        v = np.asarray(self.variances, dtype=np.float64)
        if m.ndim == 1:
            m = m[:, None]
        if v.ndim == 1:
            v = v[:, None]
        v = np.broadcast_to(v, m.shape).copy()
        if w.shape[0] != m.shape[0]:
            raise ConfigError("one weight per component")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ConfigError("mixture weights must be positive and sum to 1")
        if np.any(~np.isfinite(v)) or np.any(v <= 0):
            raise ConfigError("component variances must be strictly positive")
        if np.any(~np.isfinite(m)):
            raise ConfigError("component means must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)

    @classmethod
    def gaussian(cls, mean, var):
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        var = np.broadcast_to(np.asarray(var, dtype=np.float64), mean.shape)
        return cls(np.ones(1), mean[None, :], var[None, :])

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def n_components(self):
        return self.weights.size

    def mean(self):
        return self.weights @ self.means

    def var(self):
        second = self.weights @ (self.variances + self.means**2)
        return second - self.mean() ** 2

    def sample(self, n, rng):
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        x = self.means[comp] + np.sqrt(self.variances[comp]) * rng.standard_normal((n, self.dim))
        return x, comp

    def component_logpdf(self, X):
        X = np.asarray(X, dtype=np.float64).reshape(-1, self.dim)
        diff = X[:, None, :] - self.means[None]
        return -0.5 * np.sum(diff**2 / self.variances + np.log(2 * np.pi * self.variances), axis=2)

    def logpdf(self, X):
        return logsumexp(self.component_logpdf(X) + np.log(self.weights), axis=1)

    def pdf(self, X):
        return np.exp(self.logpdf(X))

    def responsibilities(self, X):
        lp = self.component_logpdf(X) + np.log(self.weights)
        return np.exp(lp - logsumexp(lp, axis=1, keepdims=True))

    def score(self, X):
        """Exact gradient of the log density, shape ``(n, d)``."""
        X = np.asarray(X, dtype=np.float64).reshape(-1, self.dim)
        r = self.responsibilities(X)
        comp_score = -(X[:, None, :] - self.means[None]) / self.variances[None]
        return np.einsum("nk,nkd->nd", r, comp_score)

    def cdf(self, x):
        """1-D mixture CDF."""
        if self.dim != 1:
            raise ShapeError("cdf is only defined for 1-D mixtures")
        x = np.asarray(x, dtype=np.float64)
        sd = np.sqrt(self.variances[:, 0])
        return np.sum(self.weights * norm.cdf((x[..., None] - self.means[:, 0]) / sd), axis=-1)

    def affine(self, scale, noise_var):
        """Law of ``scale·X + sqrt(noise_var)·ε`` for X from this mixture."""
        return GaussianMixtureSpec(self.weights, scale * self.means,
                                   scale**2 * self.variances + noise_var)


@dataclass
class LabeledDataset:
    X: np.ndarray
    y: np.ndarray
    domains: np.ndarray
    class_count: int

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        self.y = np.asarray(self.y, dtype=np.int64)
        self.domains = np.broadcast_to(np.asarray(self.domains, dtype=np.int64), self.y.shape).copy()
        if not (len(self.X) == len(self.y) == len(self.domains)):
            raise ShapeError("samples, labels and domain ids differ in length")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.class_count):
            raise ShapeError("labels outside 0..class_count-1")

    def __len__(self):
        return len(self.y)

    @property
    def domain_count(self):
        return int(self.domains.max()) + 1 if len(self.domains) else 0

    def subset(self, mask):
        return LabeledDataset(self.X[mask], self.y[mask], self.domains[mask], self.class_count)

    def by_domain(self):
        return {int(d): self.subset(self.domains == d) for d in np.unique(self.domains)}

    @classmethod
    def concat(cls, parts):
        parts = list(parts)
        return cls(np.concatenate([p.X for p in parts]), np.concatenate([p.y for p in parts]),
                   np.concatenate([p.domains for p in parts]), max(p.class_count for p in parts))


def save_dataset(ds, path):
    n, d = ds.X.shape
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<IIII", n, d, ds.class_count, ds.domain_count))
        fh.write(ds.X.astype("<f8").tobytes())
        fh.write(ds.y.astype("<u4").tobytes())
        fh.write(ds.domains.astype("<u4").tobytes())


def load_dataset(path):
    with open(path, "rb") as fh:
        if fh.read(4) != DATASET_MAGIC:
            raise ValueError(f"{path}: not a DSD1 dataset")
        n, d, c, _ = struct.unpack("<IIII", fh.read(16))
        X = np.frombuffer(fh.read(8 * n * d), dtype="<f8").reshape(n, d)
        y = np.frombuffer(fh.read(4 * n), dtype="<u4")
        dom = np.frombuffer(fh.read(4 * n), dtype="<u4")
    return LabeledDataset(X.astype(np.float64), y.astype(np.int64), dom.astype(np.int64), c)


def save_dataset_csv(ds, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(ds.X.shape[1])] + ["label", "domain"])
        for x, y, d in zip(ds.X, ds.y, ds.domains):
            w.writerow([repr(float(v)) for v in x] + [int(y), int(d)])


# -- 1-D illustrative example -------------------------------------------------

@dataclass(frozen=True)
class Fig2Spec:
    """Class-conditional Gaussians for the 1-D example.

    The defaults are symmetric, with the target clusters in the sparse gap
    between the source modes.  :data:`FIG2_SHIFTED` is the geometry the
    ``fig2`` preset uses: a wide class 0 next to a narrow class 1.  There a
    classifier trained on the source puts its margin close to the narrow
    mode, away from the point where the noised source density hands over
    from one class to the other.
    """

    source_means: tuple = (-2.0, 2.0)
    source_stds: tuple = (0.4, 0.4)
    target_means: tuple = (-0.9, 0.9)
    target_stds: tuple = (0.3, 0.3)
    class_weights: tuple = (0.5, 0.5)
    target_weights: tuple = (0.5, 0.5)
    n_train: int = 2000
    n_test: int = 1000
    n_source_test: int = 1000


FIG2_SHIFTED = dict(source_stds=(1.2, 0.15), target_means=(-0.3, 1.1), target_stds=(0.3, 0.1))


def _class_mixture(means, stds, weights):
    return GaussianMixtureSpec(np.asarray(weights, dtype=np.float64), np.asarray(means)[:, None],
                               np.asarray(stds, dtype=np.float64)[:, None] ** 2)


def gen_fig2_1d(seed=0, spec=None, **overrides):
    """Binary 1-D source/target pair.

    Returns ``(train, test, source, target, source_test)``; ``test`` is drawn
    from the target, ``source_test`` is a held-out source sample.  Mixture
    component ``k`` of ``source``/``target`` is the class-``k`` conditional.
    """
    spec = replace(spec or Fig2Spec(), **overrides)
    if min(spec.source_stds) <= 0 or min(spec.target_stds) <= 0:
        raise ConfigError("class-conditional standard deviations must be positive")
    source = _class_mixture(spec.source_means, spec.source_stds, spec.class_weights)
    target = _class_mixture(spec.target_means, spec.target_stds, spec.target_weights)
    rng = rng_stream(seed, 0)
    Xs, ys = source.sample(spec.n_train, rng)
    Xt, yt = target.sample(spec.n_test, rng)
    Xv, yv = source.sample(spec.n_source_test, rng)
    train = LabeledDataset(Xs, ys, 0, 2)
    test = LabeledDataset(Xt, yt, 1, 2)
    source_test = LabeledDataset(Xv, yv, 0, 2)
    return train, test, source, target, source_test


# -- 2-D multi-domain shifts -------------------------------------------------

@dataclass(frozen=True)
class ShiftSpec:
    """Per-domain rotation/translation of a shared class layout (degrees, units)."""

    rotation_step: float = 15.0
    translation_step: tuple = (0.0, 0.0)
    held_out_rotation: float = 60.0
    held_out_translation: tuple = (0.0, 0.0)


def _rotation(deg):
    th = np.deg2rad(deg)
    return np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])


def class_layout_2d(class_count, radius=2.0, std=0.5):
    """Class means evenly spaced on a circle; class 0 on the positive x-axis."""
    ang = 2 * np.pi * np.arange(class_count) / class_count
    means = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return GaussianMixtureSpec(np.full(class_count, 1.0 / class_count), means,
                               np.full((class_count, 2), std**2))


def domain_mixture_2d(base, rotation, translation):
    R = _rotation(rotation)
    return GaussianMixtureSpec(base.weights, base.means @ R.T + np.asarray(translation), base.variances)


def gen_multidomain_2d(M=3, class_count=2, shift=None, seed=0, n_per_domain=1000, n_test=1000,
                       radius=2.0, std=0.5):
    """``M`` rotated/translated copies of one class layout plus a held-out domain.

    Domain ``m`` is rotated by ``m·rotation_step`` and translated by
    ``m·translation_step``.  Returns ``(domains, held_out, specs)`` where
    ``specs[-1]`` is the held-out mixture.  Isotropic components keep the
    rotation exact for the class structure.
    """
    if M < 2:
        raise ConfigError("need at least two training domains")
    shift = shift or ShiftSpec()
    base = class_layout_2d(class_count, radius, std)
    rng = rng_stream(seed, 0)
    specs, domains = [], []
    for m in range(M):
        spec = domain_mixture_2d(base, m * shift.rotation_step, m * np.asarray(shift.translation_step))
        X, y = spec.sample(n_per_domain, rng)
        specs.append(spec)
        domains.append(LabeledDataset(X, y, m, class_count))
    held = domain_mixture_2d(base, shift.held_out_rotation, shift.held_out_translation)
    X, y = held.sample(n_test, rng)
    specs.append(held)
    return domains, LabeledDataset(X, y, M, class_count), specs


# -- miniature CdSprites ------------------------------------------------------

# Ten hues in RGB; training domain d colours shape 0 with colour 2d and
# shape 1 with colour 2d + 1.
HUES = np.array([
    [0.90, 0.10, 0.10],  # red
    [0.10, 0.35, 0.90],  # blue
    [0.95, 0.85, 0.10],  # yellow
    [0.55, 0.10, 0.75],  # purple
    [0.95, 0.50, 0.05],  # orange
    [0.10, 0.70, 0.80],  # cyan
    [0.90, 0.35, 0.60],  # pink
    [0.15, 0.60, 0.15],  # green
    [0.70, 0.65, 0.45],  # khaki
    [0.35, 0.35, 0.65],  # slate
])

# Rendered colours are the hues blended a quarter of the way to white.  With
# saturated hues the colour difference between two sprites outweighs their
# shape difference in pixel distance, and a denoiser then keeps the colour
# and swaps the shape.  The blend keeps colour the easier cue for a
# classifier while making shape the dominant term in pixel distance.
WHITE_BLEND = 0.25
PALETTE = WHITE_BLEND + (1.0 - WHITE_BLEND) * HUES


def shape_templates(box=5):
    """Binary ``box×box`` masks: filled square (0) and plus-shaped cross (1)."""
    square = np.zeros((box, box))
    square[1:box - 1, 1:box - 1] = 1.0
    cross = np.zeros((box, box))
    cross[box // 2, :] = 1.0
    cross[:, box // 2] = 1.0
    return np.stack([square, cross])


def render_sprites(shapes, colors, positions, g, box=5):
    """Render ``(n, g*g*3)`` flattened RGB images with black background."""
    tmpl = shape_templates(box)
    n = len(shapes)
    img = np.zeros((n, g, g, 3))
    for i in range(n):
        r, c = positions[i]
        img[i, r:r + box, c:c + box, :] = tmpl[shapes[i]][:, :, None] * PALETTE[colors[i]]
    return img.reshape(n, g * g * 3)


@dataclass
class CdSpritesData:
    domains: list
    test: LabeledDataset
    test_colors: np.ndarray
    train_colors: list
    grid: int


def gen_mini_cdsprites(g=9, n_domains=5, rho=1.0, seed=0, n_per_domain=400, n_test=1000, box=5):
    """Shape/colour sprites with colour spuriously tied to shape in training.

    Label is the shape.  In training domain ``d`` the shape-``k`` sprite gets
    colour ``2d + k`` with probability ``rho`` and the other colour of the
    pair otherwise.  The test domain draws shape and colour (any of the
    ``2·n_domains`` colours) independently.
    """
    if g < 8:
        raise ConfigError("grid must be at least 8")
    if not 0.5 < rho <= 1.0:
        raise ConfigError("rho must be in (0.5, 1]")
    if 2 * n_domains > len(PALETTE):
        raise ConfigError(f"at most {len(PALETTE) // 2} domains")
    rng = rng_stream(seed, 0)
    span = g - box + 1
    domains, train_colors = [], []
    for d in range(n_domains):
        shapes = rng.integers(0, 2, size=n_per_domain)
        keep = rng.random(n_per_domain) < rho
        colors = 2 * d + np.where(keep, shapes, 1 - shapes)
        pos = rng.integers(0, span, size=(n_per_domain, 2))
        X = render_sprites(shapes, colors, pos, g, box)
        domains.append(LabeledDataset(X, shapes, d, 2))
        train_colors.append(colors)
    shapes = rng.integers(0, 2, size=n_test)
    colors = rng.integers(0, 2 * n_domains, size=n_test)
    pos = rng.integers(0, span, size=(n_test, 2))
    test = LabeledDataset(render_sprites(shapes, colors, pos, g, box), shapes, n_domains, 2)
    return CdSpritesData(domains, test, colors, train_colors, g)


def empirical_mutual_information(a, b):
    """Plug-in mutual information (nats) between two discrete label arrays."""
    a = np.asarray(a)
    b = np.asarray(b)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1.0)
    joint /= joint.sum()
    pa = joint.sum(1, keepdims=True)
    pb = joint.sum(0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])))
