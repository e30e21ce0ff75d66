"""Toy dual encoder: fixed linear image/text maps over learnable prompt tokens.

The text side mean-pools ``[prompt tokens..., class token]``, projects with a
fixed matrix and normalizes. Because every prompt token enters only through
the pooled mean, the gradient with respect to each token is the same vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, ZeroNorm
from .numerics import NORM_FLOOR, cosine_softmax, l2_normalize

DEFAULT_TEMPERATURE = 0.07
DEFAULT_D_IN = 32
DEFAULT_D_FEAT = 16
DEFAULT_D_TOK = 16
DEFAULT_PROMPT_TOKENS = 4


@dataclass(frozen=True)
class ImageSample:
    raw: np.ndarray
    label: int | None = None

    def __post_init__(self):
        raw = np.asarray(self.raw, dtype=np.float64)
        if raw.ndim != 1 or not np.all(np.isfinite(raw)):
            raise ValueError("ImageSample.raw must be a finite 1-D vector")
        object.__setattr__(self, "raw", raw)


@dataclass(frozen=True)
class EncoderWeights:
    W_img: np.ndarray
    W_txt: np.ndarray
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        for name in ("W_img", "W_txt"):
            w = np.asarray(getattr(self, name), dtype=np.float64)
            if w.ndim != 2 or not np.all(np.isfinite(w)):
                raise ValueError(f"{name} must be a finite matrix")
            w.setflags(write=False)
            object.__setattr__(self, name, w)
        if self.W_img.shape[0] != self.W_txt.shape[0]:
            raise DimensionMismatch("image and text maps must share the feature dimension")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    @property
    def d_in(self) -> int:
        return self.W_img.shape[1]

    @property
    def d_feat(self) -> int:
        return self.W_img.shape[0]

    @property
    def d_tok(self) -> int:
        return self.W_txt.shape[1]

    @classmethod
    def random(cls, seed: int, d_in: int = DEFAULT_D_IN, d_feat: int = DEFAULT_D_FEAT,
               d_tok: int = DEFAULT_D_TOK, temperature: float = DEFAULT_TEMPERATURE):
        """Standard-normal weights scaled by 1/sqrt(input dim)."""
        rng = np.random.default_rng([seed, 0xE7C0DE])
        W_img = rng.standard_normal((d_feat, d_in)) / np.sqrt(d_in)
        W_txt = rng.standard_normal((d_feat, d_tok)) / np.sqrt(d_tok)
        return cls(W_img, W_txt, temperature)


@dataclass
class PromptContext:
    tokens: np.ndarray

    def __post_init__(self):
        t = np.array(self.tokens, dtype=np.float64)
        if t.ndim != 2 or t.shape[0] < 1:
            raise ValueError("prompt tokens must be an (M, D_tok) array with M >= 1")
        if not np.all(np.isfinite(t)):
            raise ValueError("prompt tokens must be finite")
        self.tokens = t

    @property
    def M(self) -> int:
        return self.tokens.shape[0]

    def copy(self) -> "PromptContext":
        return PromptContext(self.tokens.copy())

    @classmethod
    def initial(cls, seed: int, d_tok: int = DEFAULT_D_TOK, M: int = DEFAULT_PROMPT_TOKENS,
                scale: float = 0.1):
        """Fixed seeded draw used as the shared starting prompt of every episode."""
        rng = np.random.default_rng([seed, 0x9A0705])
        return cls(scale * rng.standard_normal((M, d_tok)) / np.sqrt(d_tok))


@dataclass(frozen=True)
class ClassVocabulary:
    class_tokens: np.ndarray
    names: tuple = field(default=())

    def __post_init__(self):
        c = np.asarray(self.class_tokens, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 1 or not np.all(np.isfinite(c)):
            raise ValueError("class tokens must be a finite (K, D_tok) array")
        c = c.copy()
        c.setflags(write=False)
        object.__setattr__(self, "class_tokens", c)
        names = tuple(self.names) if self.names else tuple(f"class_{i}" for i in range(c.shape[0]))
        if len(names) != c.shape[0]:
            raise ValueError("one name per class token required")
        object.__setattr__(self, "names", names)

    @property
    def K(self) -> int:
        return self.class_tokens.shape[0]


def _check_tokens(prompt: PromptContext, vocab: ClassVocabulary, weights: EncoderWeights):
    if prompt.tokens.shape[1] != weights.d_tok or vocab.class_tokens.shape[1] != weights.d_tok:
        raise DimensionMismatch(
            f"token dim mismatch: prompt {prompt.tokens.shape[1]}, "
            f"vocab {vocab.class_tokens.shape[1]}, encoder {weights.d_tok}")


def encode_image(sample, weights: EncoderWeights) -> np.ndarray:
    raw = sample.raw if isinstance(sample, ImageSample) else np.asarray(sample, dtype=np.float64)
    if raw.shape != (weights.d_in,):
        raise DimensionMismatch(f"raw dim {raw.shape} does not match encoder input {weights.d_in}")
    return l2_normalize(weights.W_img @ raw)


def encode_images(raws: np.ndarray, weights: EncoderWeights) -> np.ndarray:
    """Encode an (N, D_in) stack of raw vectors into (N, D_feat) unit rows."""
    raws = np.asarray(raws, dtype=np.float64)
    if raws.ndim != 2 or raws.shape[1] != weights.d_in:
        raise DimensionMismatch(f"expected (N, {weights.d_in}) raw stack, got {raws.shape}")
    proj = raws @ weights.W_img.T
    norms = np.linalg.norm(proj, axis=1, keepdims=True)
    if np.any(norms <= NORM_FLOOR):
        raise ZeroNorm("image projection is numerically zero")
    return proj / norms


def _text_projections(prompt, vocab, weights):
    _check_tokens(prompt, vocab, weights)
    M = prompt.M
    pooled = (prompt.tokens.sum(axis=0)[None, :] + vocab.class_tokens) / (M + 1)
    u = pooled @ weights.W_txt.T
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    if np.any(norms <= NORM_FLOOR):
        raise ZeroNorm("text projection is numerically zero for some class")
    return u, norms


def encode_text(prompt: PromptContext, vocab: ClassVocabulary, weights: EncoderWeights) -> np.ndarray:
    """Return the (K, D_feat) unit text embeddings, one row per class."""
    u, norms = _text_projections(prompt, vocab, weights)
    return u / norms


def class_probabilities(e, text: np.ndarray, temperature: float) -> np.ndarray:
    """Cosine-softmax class distribution(s) for unit image embedding(s) ``e``.

    ``e`` may be a single (D,) embedding or an (N, D) stack; the result has
    matching leading shape.
    """
    e = np.asarray(e, dtype=np.float64)
    cos = np.clip(e @ np.asarray(text).T, -1.0, 1.0)
    return cosine_softmax(cos, temperature)


def zero_shot_logits(e, text, temperature):
    return np.asarray(e) @ np.asarray(text).T / temperature


def prompt_gradient_of_loss(prompt: PromptContext, vocab: ClassVocabulary, weights: EncoderWeights,
                            loss_grad_wrt_probs, views) -> np.ndarray:
    """Exact gradient of a scalar loss with respect to every prompt token.

    ``loss_grad_wrt_probs`` holds dL/dp for each view, shape (N, K); ``views``
    is a ViewBatch or an (N, D_feat) array of unit embeddings. The chain runs
    softmax -> cosine -> normalization -> linear map -> mean pooling.
    """
    E = views.embeddings if hasattr(views, "embeddings") else np.asarray(views, dtype=np.float64)
    G = np.asarray(loss_grad_wrt_probs, dtype=np.float64)
    if E.ndim == 1:
        E = E[None, :]
    if G.ndim == 1:
        G = G[None, :]
    if E.shape[1] != weights.d_feat:
        raise DimensionMismatch(f"view dim {E.shape[1]} != feature dim {weights.d_feat}")
    if G.shape != (E.shape[0], vocab.K):
        raise DimensionMismatch(f"upstream gradient shape {G.shape} != {(E.shape[0], vocab.K)}")
    if not np.all(np.isfinite(G)):
        raise DimensionMismatch("upstream gradient must be finite")

    u, norms = _text_projections(prompt, vocab, weights)
    w = u / norms
    tau = weights.temperature
    P = cosine_softmax(np.clip(E @ w.T, -1.0, 1.0), tau)          # (N, K)
    # softmax Jacobian-vector product, row by row
    dlogits = P * (G - np.sum(P * G, axis=1, keepdims=True))      # (N, K)
    dw = dlogits.T @ E / tau                                       # (K, D_feat)
    # through w = u / |u|
    du = (dw - np.sum(dw * w, axis=1, keepdims=True) * w) / norms  # (K, D_feat)
    dpooled = du @ weights.W_txt                                   # (K, D_tok)
    dsum = dpooled.sum(axis=0) / (prompt.M + 1)
    return np.tile(dsum, (prompt.M, 1))
