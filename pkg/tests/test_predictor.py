import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dsi.datasets import gen_mini_cdsprites
from dsi.exceptions import ConfigError, ShapeError
from dsi.predictor import ConfidenceKind, LogitsRecord, Predictor, confidence, predict
from dsi.nn import rng_stream

logit_rows = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 6)),
                    elements=st.floats(-30, 30, allow_nan=False))


def test_hand_softmax():
    rec = LogitsRecord(np.array([np.log(3.0), 0.0]))
    assert np.allclose(rec.probabilities, [[0.75, 0.25]], atol=1e-15)
    assert confidence(rec, "max_prob")[0] == pytest.approx(0.75)
    assert confidence(rec, "kl_uniform")[0] == pytest.approx(0.130812, abs=1e-6)
    assert confidence(rec, "kl_uniform")[0] == pytest.approx(0.75 * np.log(1.5) + 0.25 * np.log(0.5))
    assert confidence(rec, "max_logit")[0] == pytest.approx(np.log(3.0))


def test_uniform_record_confidences():
    rec = LogitsRecord(np.zeros((2, 4)))
    assert np.allclose(confidence(rec, ConfidenceKind.MAX_PROB), 0.25)
    assert np.allclose(confidence(rec, ConfidenceKind.KL_UNIFORM), 0.0, atol=1e-12)


def test_zero_weight_predictor_is_uniform():
    f = Predictor(hidden=(4,), n_steps=1).fit(np.array([[0.0], [1.0], [2.0]]), [0, 1, 2])
    for w in f.net_.weights:
        w[...] = 0.0
    for b in f.net_.biases:
        b[...] = 0.0
    assert np.allclose(predict(f, np.ones((3, 1))).probabilities, 1 / 3)


@given(logit_rows, st.floats(-50, 50))
@settings(max_examples=100, deadline=None)
def test_softmax_shift_invariance(logits, c):
    shifted = logits + c
    # the argmax claim needs the shift to keep the order representable in floats
    assume(np.array_equal(np.argsort(logits, axis=1, kind="stable"),
                          np.argsort(shifted, axis=1, kind="stable")))
    assume(all(len(set(r)) == len(set(s_)) for r, s_ in zip(logits, shifted)))
    a, b = LogitsRecord(logits), LogitsRecord(shifted)
    assert np.all(np.abs(a.probabilities - b.probabilities) < 1e-12)
    assert np.array_equal(a.predicted_class, b.predicted_class)


@given(logit_rows)
@settings(max_examples=100, deadline=None)
def test_record_invariants(logits):
    rec = LogitsRecord(logits)
    p = rec.probabilities
    assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-9)
    assert np.all((p >= 0) & (p <= 1))
    C = logits.shape[1]
    mp = confidence(rec, "max_prob")
    assert np.all(mp >= 1 / C - 1e-12) and np.all(mp <= 1)
    kl = confidence(rec, "kl_uniform")
    assert np.all(kl >= 0)


@given(logit_rows, st.floats(1.0, 10.0))
@settings(max_examples=100, deadline=None)
def test_sharpening_never_lowers_max_prob(logits, lam):
    base = confidence(LogitsRecord(logits), "max_prob")
    sharp = confidence(LogitsRecord(lam * logits), "max_prob")
    assert np.all(sharp >= base - 1e-12)


@given(arrays(np.float64, st.integers(2, 6), elements=st.floats(-5, 5, allow_nan=False)))
@settings(max_examples=100, deadline=None)
def test_kl_to_uniform_zero_iff_uniform(row):
    kl = confidence(LogitsRecord(row), "kl_uniform")[0]
    p = LogitsRecord(row).probabilities[0]
    if np.ptp(p) < 1e-9:
        assert kl < 1e-9
    else:
        assert kl > 0


def test_tie_breaks_to_lowest_index():
    rec = LogitsRecord(np.array([[1.0, 2.0, 2.0], [5.0, 5.0, 5.0]]))
    assert list(rec.predicted_class) == [1, 0]


def test_separable_training_accuracy():
    r = rng_stream(1, 0)
    X = np.concatenate([r.uniform(-3, -0.5, 300), r.uniform(0.5, 3, 300)])[:, None]
    y = np.repeat([0, 1], 300)
    f = Predictor(hidden=(16,), n_steps=1000).fit(X, y)
    assert f.train_accuracy_ >= 0.99


def test_shuffled_labels_give_chance_accuracy():
    r = rng_stream(2, 0)
    X = r.standard_normal((1000, 2))
    y = r.integers(0, 2, 1000)
    f = Predictor(hidden=(16,), n_steps=500).fit(X, y)
    Xt = r.standard_normal((2000, 2))
    yt = r.integers(0, 2, 2000)
    assert abs(np.mean(f.predict(Xt) == yt) - 0.5) < 0.1


def test_cdsprites_erm_latches_onto_colour():
    data = gen_mini_cdsprites(seed=0)
    train_X = np.concatenate([d.X for d in data.domains])
    train_y = np.concatenate([d.y for d in data.domains])
    f = Predictor(hidden=(16,), n_steps=300, learning_rate=1e-2, random_state=1).fit(train_X, train_y)
    assert f.train_accuracy_ >= 0.95
    assert np.mean(f.predict(data.test.X) == data.test.y) <= 0.60


def test_single_class_is_rejected():
    with pytest.raises(ConfigError):
        Predictor().fit(np.zeros((5, 1)), np.zeros(5, dtype=int))


def test_predict_checks_width():
    f = Predictor(hidden=(4,), n_steps=2).fit(np.zeros((4, 2)), [0, 1, 0, 1])
    with pytest.raises(ShapeError):
        f.predict(np.zeros((2, 3)))


def test_checkpoint_roundtrip(tmp_path):
    f = Predictor(hidden=(5,), n_steps=20).fit(rng_stream(3, 0).standard_normal((50, 3)),
                                                np.arange(50) % 3)
    f.save(tmp_path / "f.bin")
    raw = (tmp_path / "f.bin").read_bytes()
    assert int.from_bytes(raw[:4], "little") == 3
    assert raw[4:8] == b"DSI1"
    back = Predictor.load(tmp_path / "f.bin")
    X = rng_stream(3, 1).standard_normal((7, 3))
    assert np.array_equal(back.decision_function(X), f.decision_function(X))
