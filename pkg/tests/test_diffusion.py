import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsi.datasets import GaussianMixtureSpec
from dsi.diffusion import (DiffusionModel, NoiseSchedule, StrideSampler, alpha_beta, forward_noise,
                           reverse_sample_from, training_loss)
from dsi.exceptions import ConfigError, ShapeError
from dsi.nn import rng_stream
from dsi.theory import AnalyticDiffusion, estimate_kl

STD_NORMAL = GaussianMixtureSpec.gaussian([0.0], [1.0])


def const_schedule(T=10, sigma=0.1):
    return NoiseSchedule(np.full(T, sigma))


# -- schedule & coefficients -----------------------------------------------------

def test_default_schedule_invariants():
    sched = NoiseSchedule.linear()
    assert sched.T == 1000
    assert sched.sigmas[0] == pytest.approx(1e-4) and sched.sigmas[-1] == pytest.approx(0.02)
    assert sched.alpha_bar[0] == 1.0
    assert np.all(np.diff(sched.alpha_bar) < 0)


def test_alpha_squared_plus_beta_squared_is_one():
    sched = NoiseSchedule.linear()
    worst = max(abs(a * a + b * b - 1.0) for a, b in (alpha_beta(sched, s) for s in range(sched.T + 1)))
    assert worst < 1e-12


def test_alpha_beta_examples():
    sched = const_schedule()
    assert alpha_beta(sched, 0) == (0.0, 1.0)
    a, b = alpha_beta(sched, 1)
    assert (a, b) == pytest.approx((np.sqrt(0.1), np.sqrt(0.9)), abs=1e-12)
    assert (a, b) == pytest.approx((0.316228, 0.948683), abs=1e-6)
    a, b = alpha_beta(sched, 2)
    assert (a, b) == pytest.approx((0.435890, 0.9), abs=1e-6)


@pytest.mark.parametrize("s", [-1, 11, 2.5])
def test_alpha_beta_rejects_bad_step(s):
    with pytest.raises(ConfigError):
        alpha_beta(const_schedule(), s)


@pytest.mark.parametrize("sigmas", [[0.0, 0.1], [0.1, 1.0], [0.2, 0.1], []])
def test_schedule_validation(sigmas):
    with pytest.raises(ConfigError):
        NoiseSchedule(np.array(sigmas))


def test_forward_noise_examples(rng):
    sched = const_schedule()
    eps = rng.standard_normal((4, 2))
    a, _ = alpha_beta(sched, 3)
    assert np.allclose(forward_noise(np.zeros((4, 2)), 3, eps, sched), a * eps)
    x0 = rng.standard_normal((4, 2))
    assert np.array_equal(forward_noise(x0, 0, eps, sched), x0)
    out = forward_noise(np.array([[1.0]]), 1, np.array([[-0.5]]), sched)
    assert out[0, 0] == pytest.approx(0.790569, abs=1e-6)
    with pytest.raises(ShapeError):
        forward_noise(np.zeros((2, 1)), 1, np.zeros((3, 1)), sched)


def test_forward_noise_variance_law():
    sched = NoiseSchedule.linear()
    r = rng_stream(3, 0)
    n, s = 20000, 300
    x0 = 2.0 + 1.5 * r.standard_normal(n)
    xs = forward_noise(x0, s, r.standard_normal(n), sched)
    a, b = alpha_beta(sched, s)
    var = b * b * 1.5**2 + a * a
    se = var * np.sqrt(2.0 / (n - 1))
    assert abs(xs.var(ddof=1) - var) < 3 * se


def test_one_shot_noising_matches_stepwise():
    sched = NoiseSchedule.linear(T=200)
    r = rng_stream(4, 0)
    n, s = 10000, 150
    x0 = 1.0 + 0.5 * r.standard_normal(n)
    step = x0.copy()
    for l in range(1, s + 1):
        sig = sched.sigmas[l - 1]
        step = np.sqrt(1 - sig) * step + np.sqrt(sig) * r.standard_normal(n)
    shot = forward_noise(x0, s, r.standard_normal(n), sched)
    se_mean = np.sqrt(step.var() / n + shot.var() / n)
    assert abs(step.mean() - shot.mean()) < 3 * se_mean
    se_var = np.sqrt(2.0 / n) * (step.var() + shot.var()) / np.sqrt(2)
    assert abs(step.var() - shot.var()) < 3 * se_var


# -- stride sampler ----------------------------------------------------------

@given(st.integers(1, 2000), st.data())
@settings(max_examples=60, deadline=None)
def test_stride_indices(T, data):
    K = data.draw(st.integers(1, T))
    sampler = StrideSampler(T, K)
    idx = sampler.timesteps
    assert len(idx) == K
    assert np.all(np.diff(idx) > 0)
    assert idx[0] >= 1 and idx[-1] == T
    s = data.draw(st.integers(0, T))
    chain = sampler.chain(s)
    if s == 0:
        assert len(chain) == 0
    else:
        assert chain[0] == s and np.all(np.diff(chain) < 0) and chain[-1] >= 1


def test_stride_rejects_k_above_t():
    with pytest.raises(ConfigError):
        StrideSampler(10, 11)


# -- reverse sampling with the analytic predictor -------------------------------------

def test_reverse_from_zero_is_identity(rng):
    oracle = AnalyticDiffusion(STD_NORMAL, NoiseSchedule.linear())
    x = rng.standard_normal((7, 1))
    assert np.array_equal(reverse_sample_from(oracle, x, 0, rng=rng), x)


def test_oracle_reverse_sampling_recovers_standard_normal():
    sched = NoiseSchedule.linear()
    oracle = AnalyticDiffusion(STD_NORMAL, sched)
    r = rng_stream(11, 0)
    out = reverse_sample_from(oracle, r.standard_normal((10000, 1)), sched.T, StrideSampler(sched.T), r)
    kl, _ = estimate_kl(out[:, 0], STD_NORMAL, value_range=(-4, 4), n_boot=0)
    assert kl < 0.02


def test_full_and_strided_sampling_agree():
    source = GaussianMixtureSpec([0.5, 0.5], [[-2.0], [2.0]], [[0.16], [0.16]])
    sched = NoiseSchedule.linear()
    oracle = AnalyticDiffusion(source, sched)
    r = rng_stream(12, 0)
    full = reverse_sample_from(oracle, r.standard_normal((5000, 1)), 1000, StrideSampler(1000), r)
    quarter = reverse_sample_from(oracle, r.standard_normal((5000, 1)), 1000, StrideSampler(1000, 250), r)
    kl, _ = estimate_kl(full[:, 0], quarter[:, 0], n_boot=0)
    assert kl < 0.05


def test_pre_drawn_noise_replays_sampling(rng):
    sched = NoiseSchedule.linear(T=50)
    oracle = AnalyticDiffusion(STD_NORMAL, sched)
    x = rng.standard_normal((3, 1))
    noise = rng.standard_normal((50, 3, 1))
    a = reverse_sample_from(oracle, x, 40, noise=noise)
    b = reverse_sample_from(oracle, x, 40, noise=noise)
    assert np.array_equal(a, b)
    with pytest.raises(ShapeError):
        reverse_sample_from(oracle, x, 40, noise=noise[:5])


# -- training loss ------------------------------------------------------------

def _tiny_model(d=1, **kw):
    m = DiffusionModel(T=100, hidden=(8,), **kw)
    m._init_model(d, rng_stream(0, 0))
    m.skip_mean_ = m.skip_var_ = None
    return m


def test_zero_predictor_loss_is_data_dim():
    m = _tiny_model(d=3)
    for w in m.net_.weights:
        w[...] = 0.0
    r = rng_stream(5, 0)
    losses = [training_loss(m, r.standard_normal((512, 3)), r)[0] for _ in range(20)]
    assert np.mean(losses) == pytest.approx(3.0, rel=0.05)


def test_oracle_predictor_has_zero_loss():
    m = _tiny_model()
    r = rng_stream(6, 0)
    x0 = r.standard_normal((64, 1))
    # replay the draws training_loss will make, then make the net output exactly that ε
    probe = rng_stream(6, 1)
    t = probe.integers(1, 101, size=64)
    eps = probe.standard_normal((64, 1))

    class Oracle:
        input_dim = 1

        def forward(self, x, tt, return_cache=False):
            return (eps, None) if return_cache else eps

        def backward(self, *a, **k):
            return []

    m.net_ = Oracle()
    loss, _ = training_loss(m, x0, rng_stream(6, 1))
    assert loss == 0.0
    assert t.min() >= 1


def test_gaussian_source_training_approaches_optimum():
    """After 2000 steps the loss is near the Monte-Carlo loss of ε*(x,s)=α_s·x."""
    r = rng_stream(21, 0)
    X = r.standard_normal((4000, 1))
    model = DiffusionModel(hidden=(64, 64), n_steps=2000, learning_rate=2e-3, random_state=1).fit(X)
    sched = model.schedule
    mc = rng_stream(22, 0)
    n = 200000
    t = mc.integers(1, sched.T + 1, size=n)
    x0 = mc.standard_normal(n)
    eps = mc.standard_normal(n)
    ab = sched.alpha_bar[t]
    xt = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
    optimum = np.mean((eps - np.sqrt(1 - ab) * xt) ** 2)
    trained = np.mean([training_loss(model, mc.standard_normal((4096, 1)), mc)[0] for _ in range(20)])
    assert trained <= 1.15 * optimum


# -- estimator ------------------------------------------------------------------

@pytest.fixture(scope="module")
def fitted():
    X = 1.5 + 0.3 * rng_stream(8, 0).standard_normal((500, 2))
    return DiffusionModel(T=200, hidden=(32,), n_steps=300, data_shift=1.0, data_scale=2.0,
                          random_state=2).fit(X)


def test_fit_is_deterministic(fitted):
    X = 1.5 + 0.3 * rng_stream(8, 0).standard_normal((500, 2))
    again = DiffusionModel(T=200, hidden=(32,), n_steps=300, data_shift=1.0, data_scale=2.0,
                           random_state=2).fit(X)
    assert again.to_bytes() == fitted.to_bytes()


def test_checkpoint_roundtrip(fitted, tmp_path):
    path = tmp_path / "g.bin"
    fitted.save(path)
    back = DiffusionModel.load(path)
    x = np.linspace(-1, 1, 10).reshape(5, 2)
    assert np.array_equal(back.predict_eps(x, 17), fitted.predict_eps(x, 17))
    assert back.data_shift == 1.0 and back.data_scale == 2.0
    raw = path.read_bytes()
    assert int.from_bytes(raw[:4], "little") == 200
    assert np.array_equal(np.frombuffer(raw[4:4 + 8 * 200], "<f8"), fitted.schedule.sigmas)


def test_checkpoint_roundtrip_with_skip_and_cap(tmp_path):
    X = rng_stream(9, 0).random((200, 6))
    g = DiffusionModel(T=100, hidden=(16,), n_steps=50, max_train_step=30, gaussian_skip=True,
                       domain_id="dom-é").fit(X)
    back = DiffusionModel.from_bytes(g.to_bytes())
    assert back.max_train_step == 30 and back.gaussian_skip and back.domain_id == "dom-é"
    assert np.array_equal(back.skip_mean_, g.skip_mean_)
    x = rng_stream(9, 1).random((4, 6))
    assert np.array_equal(back.predict_eps(x, 12), g.predict_eps(x, 12))
    assert back.to_bytes() == g.to_bytes()


def test_capped_model_refuses_unconditional_sampling():
    g = DiffusionModel(T=100, hidden=(8,), n_steps=5, max_train_step=20).fit(np.zeros((10, 1)))
    with pytest.raises(ConfigError):
        g.sample(5)
    with pytest.raises(ConfigError):
        DiffusionModel(T=100, max_train_step=101).fit(np.zeros((10, 1)))


def test_gaussian_skip_is_exact_for_gaussian_data(rng):
    """With the skip, an untrained (zero) network is already the optimal predictor."""
    X = 0.5 + 2.0 * rng.standard_normal((50000, 1))
    g = DiffusionModel(T=100, hidden=(4,), n_steps=1, gaussian_skip=True).fit(X)
    for w in g.net_.weights:
        w[...] = 0.0
    for b in g.net_.biases:
        b[...] = 0.0
    source = GaussianMixtureSpec.gaussian([g.skip_mean_[0]], [g.skip_var_[0]])
    oracle = AnalyticDiffusion(source, g.schedule)
    x = np.linspace(-3, 3, 7)[:, None]
    for t in (1, 50, 100):
        assert np.allclose(g.predict_eps(x, t), oracle.predict_eps(x, t), rtol=1e-10, atol=1e-12)


def test_transform_shape_and_validation(fitted):
    X = np.ones((4, 2))
    out = fitted.transform(X, start_step=20, rng=rng_stream(1, 1))
    assert out.shape == (4, 2) and np.all(np.isfinite(out))
    with pytest.raises(ShapeError):
        fitted.transform(np.ones((4, 3)))


def test_repeated_point_source_collapses():
    X = np.full((256, 1), 0.7)
    g = DiffusionModel(hidden=(64, 64), n_steps=1500, learning_rate=2e-3, random_state=3).fit(X)
    samples = g.sample(2000, rng=rng_stream(3, 3), stride=StrideSampler(1000, 250))
    assert samples.std() < 0.2
    assert abs(np.median(samples) - 0.7) < 0.2
