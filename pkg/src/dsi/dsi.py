"""Distribution Shift Inversion: confidence-filtered, multi-domain test-time transfer.

For each test sample the procedure tries increasing starting steps.  At
each stage the sample is mixed with Gaussian noise, pulled back to step 0
by every source-domain diffusion model, and classified; the logits are
averaged (together with the logits of the untouched sample, by default)
and the stage is accepted once the confidence of the average exceeds the
threshold.  The last stage is accepted unconditionally.

Randomness is drawn from one stream per sample, keyed by
``(random_state, sample_id)``: draws are identical whatever the batch
size, chunking or worker count.  Outputs can still differ in the last bit
between chunk sizes, since batched matrix products round differently.
"""
from __future__ import annotations

import csv
import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, clone
from sklearn.utils.validation import check_array, check_is_fitted

from .diffusion import DiffusionModel, StrideSampler, alpha_beta, reverse_sample_from
from .exceptions import ConfigError, ShapeError
from .nn import derive_seed, rng_stream
from .predictor import ConfidenceKind, LogitsRecord, Predictor, confidence

ORIGINAL = "original"


class EnsembleFn(str, enum.Enum):
    LOGIT_MEAN = "logit_mean"


def ensemble(records, fn=EnsembleFn.LOGIT_MEAN):
    """Elementwise mean of the members' logits."""
    records = list(records)
    if not records:
        raise ConfigError("cannot ensemble an empty list of predictions")
    EnsembleFn(fn)
    shapes = {r.logits.shape for r in records}
    if len(shapes) != 1:
        raise ShapeError(f"ensemble members disagree in shape: {sorted(shapes)}")
    return LogitsRecord(np.mean(np.stack([r.logits for r in records]), axis=0))


@dataclass(frozen=True)
class DsiConfig:
    """Starting steps are indices of the diffusion models' base schedule.

    ``ensemble_set`` lists the members averaged at each stage: the string
    ``"original"`` and/or domain indices.  ``None`` means the original
    prediction plus every domain model.
    """

    starting_times: tuple = (200, 400, 600, 800, 1000)
    threshold: float = 0.8
    confidence_kind: ConfidenceKind = ConfidenceKind.MAX_PROB
    ensemble_set: tuple | None = None
    include_base_precheck: bool = True
    fixed_noise: bool = False

    def __post_init__(self):
        st = tuple(int(s) for s in self.starting_times)
        if not st:
            raise ConfigError("need at least one starting step")
        if st[0] <= 0 or any(b <= a for a, b in zip(st, st[1:])):
            raise ConfigError("starting steps must be positive and strictly increasing")
        object.__setattr__(self, "starting_times", st)
        object.__setattr__(self, "confidence_kind", ConfidenceKind(self.confidence_kind))
        if self.ensemble_set is not None:
            members = tuple(m if m == ORIGINAL else int(m) for m in self.ensemble_set)
            if not members:
                raise ConfigError("ensemble set must not be empty")
            object.__setattr__(self, "ensemble_set", members)

    def members(self, n_models):
        members = self.ensemble_set if self.ensemble_set is not None else \
            (ORIGINAL, *range(n_models))
        domains = [m for m in members if m != ORIGINAL]
        if any(not 0 <= m < n_models for m in domains):
            raise ConfigError(f"ensemble set {members} refers to a missing domain model")
        if not domains and ORIGINAL not in members:
            raise ConfigError("ensemble set is empty")
        if not domains and n_models == 0 and ORIGINAL not in members:
            raise ConfigError("no diffusion models and the original prediction is excluded")
        return ORIGINAL in members, domains


@dataclass
class StageRecord:
    stage: int
    start_step: int
    domain_logits: dict
    logits: np.ndarray
    confidence: float
    accepted: bool


@dataclass
class DsiTrace:
    """One sample's pass through the stages; ``accepted_stage`` 0 is the base pre-check."""

    base_logits: np.ndarray
    stages: list = field(default_factory=list)
    accepted_stage: int = 0
    steps_consumed: int = 0

    @property
    def accepted(self):
        if self.accepted_stage == 0:
            return LogitsRecord(self.base_logits)
        return LogitsRecord(self.stages[-1].logits)


@dataclass
class DsiResult:
    """Batched outcome of :func:`dsi_predict`."""

    base_logits: np.ndarray
    logits: np.ndarray
    accepted_stage: np.ndarray
    confidence: np.ndarray
    steps_consumed: np.ndarray
    traces: list | None = None

    @property
    def base_pred(self):
        return np.argmax(self.base_logits, axis=1)

    @property
    def pred(self):
        return np.argmax(self.logits, axis=1)


def _check_models(f, models, d):
    if f.n_features_in_ != d:
        raise ShapeError(f"samples have {d} features, predictor expects {f.n_features_in_}")
    for m in models:
        if m.data_dim != d:
            raise ShapeError(f"diffusion model {getattr(m, 'domain_id', '?')} expects "
                             f"{m.data_dim} features, samples have {d}")


def _run_chunk(X, ids, f, models, cfg, stride, seed, keep_traces):
    n, d = X.shape
    use_orig, domains = cfg.members(len(models))
    gens = [rng_stream(seed, i) for i in ids]
    h0 = f.decision_function(X)
    out_logits = h0.copy()
    stage_of = np.zeros(n, dtype=np.int64)
    steps = np.zeros(n, dtype=np.int64)
    conf = confidence(LogitsRecord(h0), cfg.confidence_kind)
    active = np.ones(n, dtype=bool)
    if cfg.include_base_precheck:
        active = ~(conf > cfg.threshold)
    traces = [DsiTrace(h0[i].copy()) for i in range(n)] if keep_traces else None
    fixed_eps = np.stack([g.standard_normal(d) for g in gens]) if cfg.fixed_noise else None
    L = len(cfg.starting_times)
    for l, s in enumerate(cfg.starting_times, start=1):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        eps = fixed_eps[idx] if cfg.fixed_noise else \
            np.stack([gens[i].standard_normal(d) for i in idx])
        members = [h0[idx]] if use_orig else []
        dom_logits = {}
        for m in domains:
            g = models[m]
            if s > g.schedule.T:
                raise ConfigError(f"starting step {s} beyond schedule length {g.schedule.T}")
            chain_len = stride.n_steps(s)
            noise = np.stack([gens[i].standard_normal((chain_len, d)) for i in idx], axis=1)
            a, b = alpha_beta(g.schedule, s)
            x_hat = b * g.to_internal(X[idx]) + a * eps
            x_tilde = g.from_internal(reverse_sample_from(g, x_hat, s, stride, noise=noise))
            hm = f.decision_function(x_tilde)
            dom_logits[m] = hm
            members.append(hm)
            steps[idx] += chain_len
        h = np.mean(np.stack(members), axis=0)
        c = confidence(LogitsRecord(h), cfg.confidence_kind)
        accept = (c > cfg.threshold) | (l == L)
        out_logits[idx] = h
        conf[idx] = c
        stage_of[idx] = l
        if keep_traces:
            for j, i in enumerate(idx):
                traces[i].stages.append(StageRecord(
                    l, s, {m: v[j].copy() for m, v in dom_logits.items()}, h[j].copy(),
                    float(c[j]), bool(accept[j])))
                traces[i].accepted_stage = l
        active[idx[accept]] = False
    if keep_traces:
        for i in range(n):
            traces[i].steps_consumed = int(steps[i])
    return h0, out_logits, stage_of, conf, steps, traces


def dsi_predict(X, f, models, cfg=None, stride=None, seed=0, sample_ids=None, chunk_size=256,
                workers=1, keep_traces=False):
    """Run the staged transfer on every row of ``X``.

    ``models`` are fitted diffusion models (one per source domain), ``f`` a
    fitted :class:`Predictor`.  ``sample_ids`` key the per-sample random
    streams and default to row indices.
    """
    cfg = cfg or DsiConfig()
    X = check_array(X, dtype=np.float64)
    models = list(models)
    _check_models(f, models, X.shape[1])
    cfg.members(len(models))
    if stride is None:
        stride = StrideSampler(models[0].schedule.T) if models else None
    ids = np.arange(X.shape[0]) if sample_ids is None else np.asarray(sample_ids)
    if len(ids) != X.shape[0]:
        raise ShapeError("one sample id per row required")
    bounds = [(i, min(i + chunk_size, X.shape[0])) for i in range(0, X.shape[0], chunk_size)]

    def job(b):
        lo, hi = b
        return _run_chunk(X[lo:hi], ids[lo:hi], f, models, cfg, stride, seed, keep_traces)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(job, bounds))
    else:
        parts = [job(b) for b in bounds]
    cat = [np.concatenate([p[k] for p in parts]) for k in range(5)]
    traces = [t for p in parts for t in p[5]] if keep_traces else None
    return DsiResult(*cat, traces=traces)


# -- evaluation ---------------------------------------------------------------

@dataclass
class EvalReport:
    """Counts over N test samples; the four joint counts partition N."""

    n: int
    both_correct: int
    only_ours_correct: int
    only_base_correct: int
    both_wrong: int
    per_class: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)

    @classmethod
    def from_counts(cls, n, base_correct, both_correct, only_ours_correct):
        only_base = base_correct - both_correct
        return cls(n, both_correct, only_ours_correct, only_base,
                   n - both_correct - only_ours_correct - only_base)

    @classmethod
    def from_predictions(cls, y, base_pred, dsi_pred, class_count=None, rows=None):
        y, bp, dp = (np.asarray(a) for a in (y, base_pred, dsi_pred))
        if len(y) == 0:
            raise ConfigError("empty test set")
        bc, dc = bp == y, dp == y
        per_class = {}
        for c in range(class_count or int(max(y.max(), bp.max(), dp.max())) + 1):
            m = y == c
            if m.any():
                per_class[c] = {"n": int(m.sum()), "base_accuracy": float(bc[m].mean()),
                                "dsi_accuracy": float(dc[m].mean())}
        return cls(len(y), int(np.sum(bc & dc)), int(np.sum(~bc & dc)), int(np.sum(bc & ~dc)),
                   int(np.sum(~bc & ~dc)), per_class, rows or [])

    @property
    def base_correct(self):
        return self.both_correct + self.only_base_correct

    @property
    def base_wrong(self):
        return self.n - self.base_correct

    @property
    def dsi_correct(self):
        return self.both_correct + self.only_ours_correct

    @property
    def base_accuracy(self):
        return self.base_correct / self.n

    @property
    def dsi_accuracy(self):
        return self.dsi_correct / self.n

    @property
    def preservation_ratio(self):
        return self.both_correct / self.base_correct if self.base_correct else float("nan")

    @property
    def correction_ratio(self):
        return self.only_ours_correct / self.base_wrong if self.base_wrong else float("nan")

    def partition_ok(self):
        return (self.both_correct + self.only_ours_correct + self.only_base_correct
                + self.both_wrong == self.n) and self.base_correct + self.base_wrong == self.n

    def summary(self):
        return {
            "n": self.n, "base_accuracy": self.base_accuracy, "dsi_accuracy": self.dsi_accuracy,
            "preservation_ratio": self.preservation_ratio, "correction_ratio": self.correction_ratio,
            "both_correct": self.both_correct, "only_ours_correct": self.only_ours_correct,
            "only_base_correct": self.only_base_correct, "both_wrong": self.both_wrong,
        }

    def write_csv(self, path):
        """Per-sample rows, a blank line, then ``metric,value`` summary rows."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "true_label", "base_pred", "dsi_pred", "accepted_stage",
                        "confidence", "steps_consumed"])
            for r in self.rows:
                w.writerow([r[0], r[1], r[2], r[3], r[4], f"{r[5]:.12g}", r[6]])
            w.writerow([])
            w.writerow(["metric", "value"])
            for k, v in self.summary().items():
                w.writerow([k, f"{v:.12g}" if isinstance(v, float) else v])
            for c, stats in sorted(self.per_class.items()):
                for k, v in stats.items():
                    w.writerow([f"class{c}_{k}", f"{v:.12g}" if isinstance(v, float) else v])


def evaluate_dsi(test, f, models, cfg=None, stride=None, seed=0, workers=1, sample_ids=None):
    if len(test) == 0:
        raise ConfigError("empty test set")
    res = dsi_predict(test.X, f, models, cfg, stride, seed, sample_ids, workers=workers)
    ids = np.arange(len(test)) if sample_ids is None else np.asarray(sample_ids)
    rows = [(int(i), int(y), int(b), int(p), int(s), float(c), int(n)) for i, y, b, p, s, c, n in
            zip(ids, test.y, res.base_pred, res.pred, res.accepted_stage, res.confidence,
                res.steps_consumed)]
    return EvalReport.from_predictions(test.y, res.base_pred, res.pred, test.class_count, rows), res


# -- estimator -----------------------------------------------------------------

class DistributionShiftInversion(ClassifierMixin, BaseEstimator):
    """Classifier that transfers test samples toward the training domains first.

    ``fit(X, y, domains)`` trains ``predictor`` on all rows and one clone of
    ``diffusion`` per domain.  Use :meth:`from_fitted` to wrap models that
    are already trained.
    """

    def __init__(self, predictor=None, diffusion=None, starting_times=(200, 400, 600, 800, 1000),
                 threshold=0.8, confidence_kind="max_prob", ensemble_set=None,
                 include_base_precheck=True, fixed_noise=False, stride=250, random_state=0,
                 workers=1):
        self.predictor = predictor
        self.diffusion = diffusion
        self.starting_times = starting_times
        self.threshold = threshold
        self.confidence_kind = confidence_kind
        self.ensemble_set = ensemble_set
        self.include_base_precheck = include_base_precheck
        self.fixed_noise = fixed_noise
        self.stride = stride
        self.random_state = random_state
        self.workers = workers

    @property
    def config(self):
        return DsiConfig(tuple(self.starting_times), self.threshold, self.confidence_kind,
                         None if self.ensemble_set is None else tuple(self.ensemble_set),
                         self.include_base_precheck, self.fixed_noise)

    def fit(self, X, y, domains=None):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y)
        domains = np.zeros(len(y), dtype=np.int64) if domains is None else np.asarray(domains)
        pred = clone(self.predictor) if self.predictor is not None else Predictor()
        self.predictor_ = pred.set_params(random_state=self.random_state).fit(X, y)
        template = self.diffusion if self.diffusion is not None else DiffusionModel()
        self.diffusion_models_ = []
        for k, dom in enumerate(np.unique(domains)):
            g = clone(template).set_params(domain_id=str(dom), random_state=derive_seed(self.random_state, k))
            self.diffusion_models_.append(g.fit(X[domains == dom]))
        self.classes_ = self.predictor_.classes_
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_fitted(cls, predictor, models, **params):
        est = cls(**params)
        est.predictor_ = predictor
        est.diffusion_models_ = list(models)
        est.classes_ = predictor.classes_
        est.n_features_in_ = predictor.n_features_in_
        return est

    def _stride(self):
        if isinstance(self.stride, StrideSampler):
            return self.stride
        T = self.diffusion_models_[0].schedule.T if self.diffusion_models_ else 1
        return StrideSampler(T, None if self.stride is None else min(self.stride, T))

    def transform_predict(self, X, sample_ids=None, keep_traces=False):
        check_is_fitted(self, "predictor_")
        return dsi_predict(X, self.predictor_, self.diffusion_models_, self.config, self._stride(),
                           self.random_state, sample_ids, workers=self.workers,
                           keep_traces=keep_traces)

    def decision_function(self, X):
        return self.transform_predict(X).logits

    def predict_proba(self, X):
        return LogitsRecord(self.decision_function(X)).probabilities

    def predict(self, X):
        return self.transform_predict(X).pred

    def evaluate(self, test, sample_ids=None):
        check_is_fitted(self, "predictor_")
        return evaluate_dsi(test, self.predictor_, self.diffusion_models_, self.config,
                            self._stride(), self.random_state, self.workers, sample_ids)[0]
