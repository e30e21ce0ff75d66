"""Brute-force oracles, the finite-difference gradient audit, and the self-test suite.

The oracles here deliberately avoid the package kernels: plain Python loops
over floats, so that agreement means something.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .augmentation import AugmentConfig, assemble_view_batch
from .encoder import ClassVocabulary, EncoderWeights, ImageSample, PromptContext
from .numerics import Direction, cosine_softmax, fraction_threshold, l2_normalize, shannon_entropy
from .selection import (SelectionMask, combine_masks, cosine_fidelity_mask,
                        entropy_confidence_mask, marginal_probability)
from .tuner import TuningConfig, marginal_entropy_grad, marginal_entropy_loss

GRAD_REL_TOL = 1e-4
GRAD_ABS_TOL = 1e-7
FD_STEP = 1e-5


# oracles ---------------------------------------------------------------------

def brute_fraction_threshold(values, fraction, direction) -> list[bool]:
    n = len(values)
    k = max(1, min(n, math.ceil(round(fraction * n, 9))))
    sign = 1.0 if Direction(direction) is Direction.KEEP_LOWEST else -1.0
    ranked = sorted(range(n), key=lambda i: (sign * float(values[i]), i))
    chosen = set(ranked[:k])
    return [i in chosen for i in range(n)]


def brute_entropy(p) -> float:
    return -sum(float(x) * math.log(float(x)) for x in p if x > 0)


def brute_masked_mean(probs, keep) -> list[float]:
    K = len(probs[0])
    acc = [0.0] * K
    count = 0
    for row, k in zip(probs, keep):
        if k:
            count += 1
            for j in range(K):
                acc[j] += float(row[j])
    return [a / count for a in acc]


def brute_marginal_entropy(prompt_tokens, class_tokens, W_txt, tau, views, keep) -> float:
    """Marginal entropy with explicit loops and no shared kernels."""
    M = len(prompt_tokens)
    K = len(class_tokens)
    D_tok = len(class_tokens[0])
    D_feat = len(W_txt)
    text = []
    for i in range(K):
        pooled = [(sum(prompt_tokens[m][d] for m in range(M)) + class_tokens[i][d]) / (M + 1)
                  for d in range(D_tok)]
        u = [sum(W_txt[r][d] * pooled[d] for d in range(D_tok)) for r in range(D_feat)]
        nu = math.sqrt(sum(x * x for x in u))
        text.append([x / nu for x in u])
    probs = []
    for e in views:
        logits = [sum(text[i][r] * e[r] for r in range(D_feat)) / tau for i in range(K)]
        top = max(logits)
        ex = [math.exp(l - top) for l in logits]
        z = sum(ex)
        probs.append([x / z for x in ex])
    return brute_entropy(brute_masked_mean(probs, keep))


# gradient audit --------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    max_abs_error: float
    instances: int
    seconds: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= GRAD_REL_TOL


def random_instance(seed: int, K: int, M: int = 4, d_feat: int = 16, d_tok: int = 16,
                    d_in: int = 32, n_standard: int = 12, n_diffusion: int = 12):
    rng = np.random.default_rng([seed, 0x6C])
    weights = EncoderWeights.random(seed, d_in=d_in, d_feat=d_feat, d_tok=d_tok)
    vocab = ClassVocabulary(rng.standard_normal((K, d_tok)))
    prompt = PromptContext(0.5 * rng.standard_normal((M, d_tok)))
    sample = ImageSample(rng.standard_normal(d_in))
    views = assemble_view_batch(sample, AugmentConfig(n_standard=n_standard, n_diffusion=n_diffusion,
                                                      seed=seed), weights, sample_index=seed)
    return prompt, vocab, weights, views


def _scaled_error(a, f):
    # |a - f| <= max(rel * max(|a|, |f|), abs)  <=>  this ratio <= rel
    floor = GRAD_ABS_TOL / GRAD_REL_TOL
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)


def gradcheck(n_instances: int = 100, seed: int = 0, Ks=(2, 5, 10), h: float = FD_STEP,
              config: TuningConfig | None = None) -> GradCheckResult:
    """Analytic prompt gradient of the marginal entropy vs central differences.

    Selection masks are computed once at the base prompt and held fixed, so the
    finite differences see the same smooth function the analytic path does.
    """
    start = time.perf_counter()
    config = config or TuningConfig()
    worst_rel = worst_abs = 0.0
    for n in range(n_instances):
        K = Ks[n % len(Ks)]
        prompt, vocab, weights, views = random_instance(seed * 100_003 + n, K)
        _, p_tilde, masks, _ = marginal_entropy_loss(prompt, vocab, weights, views, config)
        g = marginal_entropy_grad(prompt, vocab, weights, views, p_tilde, masks.combined)
        fd = np.zeros_like(g)
        for idx in np.ndindex(*g.shape):
            plus, minus = prompt.copy(), prompt.copy()
            plus.tokens[idx] += h
            minus.tokens[idx] -= h
            lp = marginal_entropy_loss(plus, vocab, weights, views, config, masks)[0]
            lm = marginal_entropy_loss(minus, vocab, weights, views, config, masks)[0]
            fd[idx] = (lp - lm) / (2 * h)
        worst_rel = max(worst_rel, float(_scaled_error(g, fd).max()))
        worst_abs = max(worst_abs, float(np.abs(g - fd).max()))
    return GradCheckResult(worst_rel, worst_abs, n_instances, time.perf_counter() - start)


# self-test -------------------------------------------------------------------

@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""


def _random_values(rng, n):
    # a share of instances carries deliberate ties
    if rng.random() < 0.3:
        return rng.integers(0, 4, n).astype(float)
    return rng.standard_normal(n)


def check_fraction_threshold(n_instances=1000, seed=0) -> Check:
    rng = np.random.default_rng(seed)
    for _ in range(n_instances):
        n = int(rng.integers(1, 257))
        vals = _random_values(rng, n)
        frac = float(rng.choice([rng.uniform(0.001, 1.0), 1.0, 0.3, 0.8]))
        for direction in Direction:
            got = fraction_threshold(vals, frac, direction).tolist()
            if got != brute_fraction_threshold(vals, frac, direction):
                return Check("fraction_threshold oracle", False, f"n={n} frac={frac} {direction}")
    return Check("fraction_threshold oracle", True, f"{n_instances} instances")


def _random_probs(rng, n, K):
    logits = rng.standard_normal((n, K)) * rng.uniform(0.1, 5.0)
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    return p / p.sum(axis=1, keepdims=True)


def check_masks_and_marginal(n_instances=1000, seed=1) -> list[Check]:
    rng = np.random.default_rng(seed)
    ent_ok = cos_ok = comb_ok = True
    worst_mean = 0.0
    for _ in range(n_instances):
        n = int(rng.integers(1, 257))
        K = int(rng.integers(2, 12))
        probs = _random_probs(rng, n, K)
        rho_H = float(rng.uniform(0.01, 1.0))
        rho_C = float(rng.uniform(0.01, 1.0))
        ent = entropy_confidence_mask(probs, rho_H)
        H = [brute_entropy(row) for row in probs]
        ent_ok &= ent.keep.tolist() == brute_fraction_threshold(H, rho_H, Direction.KEEP_LOWEST)

        E = rng.standard_normal((n, 8))
        E /= np.linalg.norm(E, axis=1, keepdims=True)
        cos = cosine_fidelity_mask(E, rho_C)
        sims = [1.0] + [sum(float(a) * float(b) for a, b in zip(E[i], E[0])) for i in range(1, n)]
        sims = [min(1.0, max(-1.0, s)) for s in sims]
        expect = brute_fraction_threshold(sims, rho_C, Direction.KEEP_HIGHEST)
        expect[0] = True
        cos_ok &= cos.keep.tolist() == expect

        comb = combine_masks(ent, cos)
        both = [a and b for a, b in zip(ent.keep, cos.keep)]
        if not any(both):
            both[0] = True
        comb_ok &= comb.keep.tolist() == both and comb.selected_count == sum(both)

        got = marginal_probability(probs, comb)
        ref = brute_masked_mean(probs.tolist(), both)
        worst_mean = max(worst_mean, float(np.max(np.abs(got - np.array(ref)))))
    return [
        Check("entropy mask oracle", bool(ent_ok), f"{n_instances} instances"),
        Check("cosine mask oracle", bool(cos_ok), f"{n_instances} instances"),
        Check("combined mask oracle", bool(comb_ok), f"{n_instances} instances"),
        Check("marginal mean oracle", worst_mean <= 1e-12, f"max deviation {worst_mean:.2e}"),
    ]


def check_kernel_properties(seed=2) -> list[Check]:
    rng = np.random.default_rng(seed)
    idem = shift = entmax = True
    for _ in range(200):
        v = rng.standard_normal(int(rng.integers(1, 40))) * rng.uniform(0.01, 100)
        n1 = l2_normalize(v)
        idem &= bool(np.max(np.abs(l2_normalize(n1) - n1)) <= 1e-12)
        s = rng.standard_normal(int(rng.integers(2, 20)))
        tau = float(rng.uniform(0.01, 2.0))
        shift &= bool(np.max(np.abs(cosine_softmax(s, tau) - cosine_softmax(s + rng.uniform(-50, 50), tau))) <= 1e-9)
        K = int(rng.integers(2, 20))
        q = np.full(K, 1.0 / K) + 0.01 * rng.standard_normal(K) / K
        q = np.abs(q) / np.abs(q).sum()
        entmax &= shannon_entropy(q) <= math.log(K) + 1e-12
    return [
        Check("l2_normalize idempotent", bool(idem)),
        Check("softmax shift invariance", bool(shift)),
        Check("entropy maximized by uniform", bool(entmax)),
    ]


def check_loss_oracle(n_instances=20, seed=3) -> Check:
    worst = 0.0
    cfg = TuningConfig()
    for n in range(n_instances):
        prompt, vocab, weights, views = random_instance(seed * 1000 + n, K=[2, 5, 10][n % 3])
        loss, _, masks, _ = marginal_entropy_loss(prompt, vocab, weights, views, cfg)
        ref = brute_marginal_entropy(prompt.tokens.tolist(), vocab.class_tokens.tolist(),
                                     weights.W_txt.tolist(), weights.temperature,
                                     views.embeddings.tolist(), masks.combined.keep.tolist())
        worst = max(worst, abs(loss - ref))
    return Check("marginal entropy loss oracle", worst <= 1e-10, f"max deviation {worst:.2e}")


def check_run_invariants(n_seeds=2, n_test=20) -> list[Check]:
    """p-tilde normalization and loss bounds over a small benchmark run."""
    from .bench import Method, run_benchmark

    _, per_seed = run_benchmark([Method.TPT_STANDARD, Method.DIFFTPT], range(n_seeds),
                                {"n_test": n_test})
    sums_ok = bounds_ok = True
    worst_sum = 0.0
    for results in per_seed.values():
        for res in results:
            lnK = math.log(res.config["task"]["K"])
            for r in res.reports:
                dev = abs(sum(r["p_tilde"]) - 1.0)
                worst_sum = max(worst_sum, dev)
                sums_ok &= dev <= 1e-9
                losses = list(r["step_losses"]) + [r["entropy_before"], r["entropy_after"]]
                bounds_ok &= all(0.0 <= l <= lnK + 1e-12 for l in losses)
    return [
        Check("p_tilde sums to one", bool(sums_ok), f"max deviation {worst_sum:.2e}"),
        Check("losses within [0, ln K]", bool(bounds_ok)),
    ]


def selftest(quick: bool = False) -> list[Check]:
    n = 200 if quick else 1000
    checks = [check_fraction_threshold(n)]
    checks += check_masks_and_marginal(n)
    checks += check_kernel_properties()
    checks.append(check_loss_oracle(5 if quick else 20))
    checks += check_run_invariants()
    g = gradcheck(10 if quick else 20)
    checks.append(Check("prompt gradient vs finite differences", g.ok,
                        f"max rel error {g.max_rel_error:.2e} over {g.instances} instances"))
    return checks
