import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from difftpt.augmentation import AugmentConfig, ViewBatch
from difftpt.checks import brute_marginal_entropy
from difftpt.encoder import ClassVocabulary, EncoderWeights, ImageSample, PromptContext, encode_text
from difftpt.errors import NonFiniteGradient
from difftpt.tuner import (OptimizerState, PredictionRule, TuningConfig, adapt, marginal_entropy_grad,
                           marginal_entropy_loss, tune_step, zero_shot_predict)


def batch(E):
    E = np.asarray(E, float)
    return ViewBatch(E, np.r_[0, np.ones(len(E) - 1, int)], np.zeros(len(E), bool))


def adam_oracle(grads, lr=0.005, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar recursion written out per step; returns the list of step sizes."""
    m = v = 0.0
    deltas = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        deltas.append(-lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps))
    return deltas


def test_zero_gradient_leaves_prompt():
    x = np.arange(6.0).reshape(2, 3)
    y, state = tune_step(x, OptimizerState.zeros_like(x), np.zeros_like(x), TuningConfig())
    np.testing.assert_array_equal(x, y)
    assert state.t == 1


def test_first_step_is_sign_times_lr():
    cfg = TuningConfig()
    x = np.zeros(3)
    g = np.array([0.3, -2.0, 1e-3])
    y, _ = tune_step(x, OptimizerState.zeros_like(x), g, cfg)
    # lr * g / (|g| + eps), frozen from a 30-digit evaluation for g=0.3
    assert y[0] == pytest.approx(-0.004999999833333339, abs=1e-18)
    np.testing.assert_allclose(y, -0.005 * np.sign(g), rtol=1e-4)


@pytest.mark.parametrize("grads", [[0.3, 0.3], [0.3, 0.3, 0.3, 0.3], [0.3, -1.0, 0.05, 2.0]])
def test_steps_follow_scalar_recursion(grads):
    cfg = TuningConfig()
    x, state = np.zeros(1), OptimizerState.zeros_like(np.zeros(1))
    got = []
    for g in grads:
        new, state = tune_step(x, state, np.array([g]), cfg)
        got.append(float(new[0] - x[0]))
        x = new
    np.testing.assert_allclose(got, adam_oracle(grads), rtol=1e-12, atol=0)


def test_varying_gradient_changes_step_size():
    d = adam_oracle([0.3, 0.03])
    assert abs(abs(d[1]) - abs(d[0])) > 1e-4


def test_non_finite_gradient_rejected():
    x = np.zeros(2)
    with pytest.raises(NonFiniteGradient):
        tune_step(x, OptimizerState.zeros_like(x), np.array([np.nan, 0.0]), TuningConfig())


def test_invalid_tuning_config():
    for bad in (dict(rho_H=2.0), dict(rho_C=0.0), dict(steps=-1), dict(learning_rate=0.0)):
        with pytest.raises(ValueError):
            TuningConfig(**bad)


def test_loss_zero_entropy_limit():
    W = EncoderWeights(np.eye(3), np.eye(3), temperature=1e-3)
    vocab = ClassVocabulary(np.eye(3))
    prompt = PromptContext(np.zeros((1, 3)))
    loss, p, _, _ = marginal_entropy_loss(prompt, vocab, W, batch(np.tile([0, 1.0, 0], (5, 1))),
                                          TuningConfig())
    assert loss < 1e-6 and int(np.argmax(p)) == 1


def test_loss_symmetric_two_class_is_ln2():
    W = EncoderWeights(np.eye(2), np.eye(2))
    vocab = ClassVocabulary(np.eye(2))
    prompt = PromptContext(np.zeros((1, 2)))
    E = np.array([[1.0, 1.0]]) / np.sqrt(2)
    loss, p, _, _ = marginal_entropy_loss(prompt, vocab, W, batch(E), TuningConfig())
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_loss_matches_brute_force(small_setup):
    prompt, vocab, weights, _, views = small_setup
    loss, _, masks, _ = marginal_entropy_loss(prompt, vocab, weights, views, TuningConfig())
    ref = brute_marginal_entropy(prompt.tokens.tolist(), vocab.class_tokens.tolist(),
                                 weights.W_txt.tolist(), weights.temperature,
                                 views.embeddings.tolist(), masks.combined.keep.tolist())
    assert abs(loss - ref) <= 1e-10


def test_steps_zero_equals_zero_shot(small_setup):
    prompt, vocab, weights, sample, views = small_setup
    rep = adapt(sample, prompt, vocab, weights, AugmentConfig(), TuningConfig(steps=0))
    assert rep.predicted == rep.zero_shot == zero_shot_predict(sample, prompt, vocab, weights)
    assert rep.step_losses == []


def test_adapt_deterministic_and_episodic(small_setup):
    prompt, vocab, weights, sample, _ = small_setup
    before = prompt.tokens.copy()
    cfg = AugmentConfig(n_standard=16, n_diffusion=15, seed=3)
    a = adapt(sample, prompt, vocab, weights, cfg, TuningConfig(), sample_index=2)
    b = adapt(sample, prompt, vocab, weights, cfg, TuningConfig(), sample_index=2)
    np.testing.assert_array_equal(prompt.tokens, before)
    assert a.to_dict(timing=False) == b.to_dict(timing=False)
    assert len(a.step_losses) == 4
    assert all(0 <= x <= math.log(vocab.K) + 1e-12 for x in a.step_losses + [a.entropy_after])
    assert abs(sum(a.p_tilde) - 1) <= 1e-9


def test_tuning_lowers_marginal_entropy_mostly():
    from difftpt.bench import make_synthetic_task
    task = make_synthetic_task(seed=0, n_test=200)
    aug = AugmentConfig(seed=0)
    drops = []
    for i in range(task.n_test):
        rep = adapt(task.sample(i), task.prompt_init, task.vocab, task.weights, aug, TuningConfig(),
                    sample_index=i)
        drops.append(rep.entropy_after <= rep.entropy_before)
    assert np.mean(drops) >= 0.9


def test_marginal_prediction_rule(small_setup):
    prompt, vocab, weights, sample, _ = small_setup
    rep = adapt(sample, prompt, vocab, weights, AugmentConfig(n_standard=8, n_diffusion=7),
                TuningConfig(prediction_rule=PredictionRule.MARGINAL))
    assert rep.predicted == int(np.argmax(rep.p_tilde))


def test_zero_shot_examples():
    W = EncoderWeights(np.eye(3), np.eye(3))
    vocab = ClassVocabulary(np.eye(3))
    prompt = PromptContext(np.zeros((1, 3)))
    assert zero_shot_predict(ImageSample([0, 0, 1.0]), prompt, vocab, W) == 2
    assert zero_shot_predict(ImageSample([1.0, 1.0, 1.0]), prompt, vocab, W) == 0
    text = encode_text(prompt, vocab, W)
    assert text.shape == (3, 3)


def test_zero_shot_agrees_with_untuned_adapt():
    rng = np.random.default_rng(21)
    W = EncoderWeights.random(6)
    vocab = ClassVocabulary(rng.standard_normal((7, 16)))
    prompt = PromptContext(0.1 * rng.standard_normal((4, 16)))
    cfg = AugmentConfig(n_standard=2, n_diffusion=2)
    for i in range(100):
        s = ImageSample(rng.standard_normal(32))
        rep = adapt(s, prompt, vocab, W, cfg, TuningConfig(steps=0), sample_index=i)
        assert rep.predicted == zero_shot_predict(s, prompt, vocab, W)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([2, 5, 10]))
def test_plain_gradient_step_does_not_increase_loss(seed, K):
    rng = np.random.default_rng(seed)
    W = EncoderWeights.random(seed % 1000)
    vocab = ClassVocabulary(rng.standard_normal((K, 16)))
    prompt = PromptContext(rng.standard_normal((4, 16)))
    E = rng.standard_normal((9, 16))
    views = batch(E / np.linalg.norm(E, axis=1, keepdims=True))
    cfg = TuningConfig()
    loss, p, masks, _ = marginal_entropy_loss(prompt, vocab, W, views, cfg)
    g = marginal_entropy_grad(prompt, vocab, W, views, p, masks.combined)
    assume(np.linalg.norm(g) > 1e-6)
    lr = 1e-3
    for _ in range(4):
        moved = PromptContext(prompt.tokens - lr * g)
        new, *_ = marginal_entropy_loss(moved, vocab, W, views, cfg, masks)
        if new <= loss + 1e-6:
            break
        lr /= 2
    assert new <= loss + 1e-6
