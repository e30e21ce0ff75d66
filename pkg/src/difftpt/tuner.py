"""Episodic test-time prompt tuning by marginal-entropy minimization."""

from __future__ import annotations

import enum
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .augmentation import AugmentConfig, ViewBatch, assemble_view_batch
from .encoder import (ClassVocabulary, EncoderWeights, ImageSample, PromptContext,
                      class_probabilities, encode_image, encode_text, prompt_gradient_of_loss)
from .errors import NonFiniteGradient
from .numerics import shannon_entropy
from .selection import SelectionDiagnostics, SelectionMask, marginal_probability, select_views

_LOG_FLOOR = 1e-300


class PredictionRule(enum.Enum):
    ORIGINAL_VIEW = "original_view"
    MARGINAL = "marginal"


@dataclass
class TuningConfig:
    steps: int = 4
    learning_rate: float = 0.005
    rho_H: float = 0.3
    rho_C: float = 0.8
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    prediction_rule: PredictionRule = PredictionRule.ORIGINAL_VIEW
    recompute_masks: bool = True
    per_family_filtering: bool = False
    cosine_filter: bool = True

    def __post_init__(self):
        self.prediction_rule = PredictionRule(self.prediction_rule)
        self.validate()

    def validate(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        for name in ("rho_H", "rho_C"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, tokens: np.ndarray) -> "OptimizerState":
        return cls(np.zeros_like(tokens), np.zeros_like(tokens), 0)


@dataclass
class Masks:
    entropy: SelectionMask
    cosine: SelectionMask
    combined: SelectionMask


@dataclass
class AdaptationReport:
    sample_index: int
    predicted: int
    zero_shot: int
    entropy_before: float
    entropy_after: float
    step_losses: list
    p_tilde: list
    selected_count: int
    diagnostics: SelectionDiagnostics | None = None
    label: int | None = None
    wall_time: float = field(default=0.0, compare=False)

    def to_dict(self, timing: bool = True) -> dict:
        d = {
            "sample_index": self.sample_index,
            "label": self.label,
            "predicted": self.predicted,
            "zero_shot": self.zero_shot,
            "entropy_before": self.entropy_before,
            "entropy_after": self.entropy_after,
            "step_losses": list(self.step_losses),
            "p_tilde": list(self.p_tilde),
            "selected_count": self.selected_count,
        }
        if self.diagnostics is not None:
            d["filtration"] = self.diagnostics.counts()
            d["spurious_views"] = self.diagnostics.n_spurious
        if timing:
            d["wall_time"] = self.wall_time
        return d


def view_probabilities(prompt, vocab, weights, views) -> np.ndarray:
    E = views.embeddings if isinstance(views, ViewBatch) else np.asarray(views)
    text = encode_text(prompt, vocab, weights)
    return class_probabilities(E, text, weights.temperature)


def compute_masks(view_probs, views: ViewBatch, config: TuningConfig) -> Masks:
    ent, cos, comb = select_views(view_probs, views, config.rho_H, config.rho_C,
                                  per_family=config.per_family_filtering,
                                  use_cosine=config.cosine_filter)
    return Masks(ent, cos, comb)


def marginal_entropy_loss(prompt, vocab, weights, views: ViewBatch, config: TuningConfig,
                          masks: Masks | None = None):
    """Entropy of the filtered marginal distribution.

    Returns ``(loss, p_tilde, masks, view_probs)``. Passing ``masks`` freezes
    the selection instead of recomputing it from the current prompt.
    """
    probs = view_probabilities(prompt, vocab, weights, views)
    if masks is None:
        masks = compute_masks(probs, views, config)
    p_tilde = marginal_probability(probs, masks.combined)
    return float(shannon_entropy(p_tilde)), p_tilde, masks, probs


def marginal_entropy_grad(prompt, vocab, weights, views: ViewBatch, p_tilde, mask: SelectionMask):
    """Gradient of the marginal entropy w.r.t. the prompt tokens, selection held fixed."""
    dL_dp = -(np.log(np.maximum(p_tilde, _LOG_FLOOR)) + 1.0)
    upstream = np.zeros((len(views), vocab.K))
    upstream[mask.keep] = dL_dp / mask.selected_count
    return prompt_gradient_of_loss(prompt, vocab, weights, upstream, views)


def tune_step(tokens: np.ndarray, state: OptimizerState, grad: np.ndarray, config: TuningConfig):
    """One adaptive-moment update; returns ``(new_tokens, new_state)``."""
    g = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient("gradient contains NaN or Inf")
    t = state.t + 1
    m = config.beta1 * state.m + (1.0 - config.beta1) * g
    v = config.beta2 * state.v + (1.0 - config.beta2) * (g * g)
    m_hat = m / (1.0 - config.beta1 ** t)
    v_hat = v / (1.0 - config.beta2 ** t)
    new_tokens = tokens - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
    return new_tokens, OptimizerState(m, v, t)


def _argmax_cosine(e, prompt, vocab, weights) -> int:
    # argmax over cosines; same as over any positive-temperature softmax
    return int(np.argmax(e @ encode_text(prompt, vocab, weights).T))


def zero_shot_predict(sample, prompt_init: PromptContext, vocab: ClassVocabulary,
                      weights: EncoderWeights) -> int:
    return _argmax_cosine(encode_image(sample, weights), prompt_init, vocab, weights)


def adapt(sample: ImageSample, prompt_init: PromptContext, vocab: ClassVocabulary,
          weights: EncoderWeights, aug_config: AugmentConfig, tuning_config: TuningConfig,
          sample_index: int = 0, mix_ratio: float | None = None,
          views: ViewBatch | None = None) -> AdaptationReport:
    """Tune a private copy of the prompt on one test sample and predict its class."""
    start = time.perf_counter()
    cfg = tuning_config
    prompt = prompt_init.copy()
    state = OptimizerState.zeros_like(prompt.tokens)
    if views is None:
        views = assemble_view_batch(sample, aug_config, weights, mix_ratio, sample_index)

    loss, p_tilde, masks, probs = marginal_entropy_loss(prompt, vocab, weights, views, cfg)
    diagnostics = SelectionDiagnostics.build(probs, views, masks.entropy, masks.cosine, masks.combined)
    zero_shot = _argmax_cosine(views.original, prompt, vocab, weights)
    entropy_before = loss
    frozen = masks

    step_losses = []
    for step in range(cfg.steps):
        if step > 0:
            loss, p_tilde, masks, probs = marginal_entropy_loss(
                prompt, vocab, weights, views, cfg, None if cfg.recompute_masks else frozen)
        step_losses.append(loss)
        grad = marginal_entropy_grad(prompt, vocab, weights, views, p_tilde, masks.combined)
        prompt.tokens, state = tune_step(prompt.tokens, state, grad, cfg)

    if cfg.steps > 0:
        loss, p_tilde, masks, probs = marginal_entropy_loss(
            prompt, vocab, weights, views, cfg, None if cfg.recompute_masks else frozen)

    if cfg.prediction_rule is PredictionRule.ORIGINAL_VIEW:
        predicted = _argmax_cosine(views.original, prompt, vocab, weights)
    else:
        predicted = int(np.argmax(p_tilde))

    return AdaptationReport(
        sample_index=sample_index,
        predicted=predicted,
        zero_shot=zero_shot,
        entropy_before=entropy_before,
        entropy_after=loss,
        step_losses=step_losses,
        p_tilde=[float(x) for x in p_tilde],
        selected_count=masks.combined.selected_count,
        diagnostics=diagnostics,
        label=sample.label,
        wall_time=time.perf_counter() - start,
    )


def config_dict(cfg) -> dict:
    d = asdict(cfg)
    for k, v in d.items():
        if isinstance(v, enum.Enum):
            d[k] = v.value
        elif isinstance(v, tuple):
            d[k] = list(v)
    return d


def loss_bound(K: int) -> float:
    return math.log(K)
