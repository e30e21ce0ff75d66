"""Synthetic distribution-shift benchmark and ablation sweeps.

A task is K well-separated class prototypes in raw input space. In-domain
samples are a prototype plus localized clutter: a unit-norm patch on a random
contiguous window of coordinates, plus a little isotropic jitter. Crop-style
augmentation can mask the clutter window, which is what gives the standard
views their value. The test set is then shifted by a rotation of angle
``shift_angle`` (acting in adjacent coordinate planes, so clutter stays local)
and a constant bias vector.

Class tokens are a fixed rotation plus noise of the prototypes, mapped into
token space, so zero-shot prediction is informative but imperfect.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .augmentation import AugmentConfig
from .encoder import (ClassVocabulary, EncoderWeights, ImageSample, PromptContext,
                      class_probabilities, encode_image, encode_text)
from .errors import InvalidAxisValue, SeparationFailure
from .numerics import shannon_entropy
from .tuner import TuningConfig, adapt, config_dict, zero_shot_predict

MAX_REJECTIONS = 1000
MAX_PROTOTYPE_COSINE = 0.8
SYNTHETIC_NOTE = "synthetic stand-in benchmark; not comparable to image datasets"


class Method(enum.Enum):
    ZERO_SHOT = "ZERO_SHOT"
    TPT_STANDARD = "TPT_STANDARD"
    DIFFTPT = "DIFFTPT"


class Axis(enum.Enum):
    RHO_H = "RHO_H"
    RHO_C = "RHO_C"
    NUM_VIEWS = "NUM_VIEWS"
    STEPS = "STEPS"
    MIX_RATIO = "MIX_RATIO"


@dataclass
class TaskParams:
    K: int = 10
    D_in: int = 32
    shift_angle: float = 0.5
    bias_scale: float = 0.25
    noise_scale: float = 1.5
    n_test: int = 200
    clutter_width: int = 4
    jitter: float = 0.05
    vocab_angle: float = 0.25
    vocab_noise: float = 0.05
    token_scale: float = 3.0
    prompt_scale: float = 0.1


@dataclass
class SyntheticTask:
    prototypes: np.ndarray
    X: np.ndarray
    labels: np.ndarray
    weights: EncoderWeights
    vocab: ClassVocabulary
    prompt_init: PromptContext
    seed: int
    params: TaskParams = field(default_factory=TaskParams)

    @property
    def K(self) -> int:
        return self.prototypes.shape[0]

    @property
    def n_test(self) -> int:
        return self.X.shape[0]

    def sample(self, i: int) -> ImageSample:
        return ImageSample(self.X[i], int(self.labels[i]))


def plane_rotation(d: int, angle: float) -> np.ndarray:
    """Rotate every coordinate pair (2k, 2k+1) by ``angle``.

    Every vector in an even dimension is turned by exactly ``angle``; with odd
    ``d`` the last coordinate is left fixed.
    """
    R = np.eye(d)
    c, s = math.cos(angle), math.sin(angle)
    for k in range(0, d - 1, 2):
        R[k, k] = R[k + 1, k + 1] = c
        R[k, k + 1] = -s
        R[k + 1, k] = s
    return R


def random_rotation(d: int, angle: float, rng: np.random.Generator) -> np.ndarray:
    """Rotation by ``angle`` in randomly oriented orthogonal planes."""
    Q, r = np.linalg.qr(rng.standard_normal((d, d)))
    Q = Q * np.sign(np.diag(r))
    return Q @ plane_rotation(d, angle) @ Q.T


def derive_vocabulary(prototypes: np.ndarray, weights: EncoderWeights, seed: int,
                      params: TaskParams) -> ClassVocabulary:
    """Class tokens whose text embeddings point at corrupted prototype embeddings."""
    K, d = prototypes.shape
    rng = np.random.default_rng([seed, 0x70C])
    corrupt = prototypes @ random_rotation(d, params.vocab_angle, rng).T
    corrupt = corrupt + params.vocab_noise * rng.standard_normal((K, d)) / math.sqrt(d)
    feat = corrupt @ weights.W_img.T
    feat /= np.linalg.norm(feat, axis=1, keepdims=True)
    tokens = np.linalg.lstsq(weights.W_txt, feat.T, rcond=None)[0].T
    tokens *= params.token_scale / np.linalg.norm(tokens, axis=1).mean()
    return ClassVocabulary(tokens, tuple(f"class_{i}" for i in range(K)))


def _clean_zero_shot_ok(prototypes, weights, vocab, prompt) -> bool:
    text = encode_text(prompt, vocab, weights)
    E = prototypes @ weights.W_img.T
    return bool(np.all(np.argmax(E @ text.T, axis=1) == np.arange(len(prototypes))))


def _draw_prototypes(rng, K, d):
    P = rng.standard_normal((K, d))
    P /= np.linalg.norm(P, axis=1, keepdims=True)
    return P


def _separated(P) -> bool:
    C = P @ P.T
    np.fill_diagonal(C, -1.0)
    return bool(C.max() < MAX_PROTOTYPE_COSINE)


def in_domain_noise(rng, n: int, params: TaskParams) -> np.ndarray:
    d = params.D_in
    width = min(params.clutter_width, d)
    noise = params.jitter * rng.standard_normal((n, d)) / math.sqrt(d)
    for i in range(n):
        start = int(rng.integers(0, d - width + 1))
        patch = rng.standard_normal(width)
        noise[i, start:start + width] += patch / np.linalg.norm(patch)
    return params.noise_scale * noise


def shift_transform(params: TaskParams, seed: int):
    """(R, b) such that shifted = raw @ R.T + b."""
    rng = np.random.default_rng([seed, 0xB1A5])
    b = rng.standard_normal(params.D_in)
    b *= params.bias_scale / np.linalg.norm(b)
    return plane_rotation(params.D_in, params.shift_angle), b


def _build(prototypes, weights, seed, params):
    vocab = derive_vocabulary(prototypes, weights, seed, params)
    prompt = PromptContext.initial(seed, d_tok=weights.d_tok, scale=params.prompt_scale)
    return vocab, prompt


def make_synthetic_task(K: int = 10, D_in: int = 32, shift_angle: float = 0.5,
                        bias_scale: float = 0.25, noise_scale: float = 1.5, n_test: int = 200,
                        seed: int = 0, weights: EncoderWeights | None = None,
                        **extra) -> SyntheticTask:
    """Draw a task; pass shared ``weights`` to build cross-domain task families."""
    if K < 2:
        raise ValueError("need K >= 2")
    if n_test < 1:
        raise ValueError("need n_test >= 1")
    params = TaskParams(K=K, D_in=D_in, shift_angle=shift_angle, bias_scale=bias_scale,
                        noise_scale=noise_scale, n_test=n_test, **extra)
    if weights is None:
        weights = EncoderWeights.random(seed, d_in=D_in)
    elif weights.d_in != D_in:
        raise ValueError("shared weights do not match D_in")
    rng = np.random.default_rng([seed, 0x7A5C])
    for _ in range(MAX_REJECTIONS):
        P = _draw_prototypes(rng, K, D_in)
        if not _separated(P):
            continue
        vocab, prompt = _build(P, weights, seed, params)
        if _clean_zero_shot_ok(P, weights, vocab, prompt):
            break
    else:
        raise SeparationFailure(f"no acceptable prototype set after {MAX_REJECTIONS} draws")
    labels = rng.integers(0, K, n_test)
    raw = P[labels] + in_domain_noise(rng, n_test, params)
    R, b = shift_transform(params, seed)
    X = raw @ R.T + b
    return SyntheticTask(P, X, labels, weights, vocab, prompt, seed, params)


def make_task_family(n_tasks: int, seed: int = 0, **kwargs) -> list[SyntheticTask]:
    """Tasks with independent prototype sets sharing one encoder (cross-dataset analog)."""
    D_in = kwargs.get("D_in", 32)
    weights = EncoderWeights.random(seed, d_in=D_in)
    return [make_synthetic_task(seed=seed * 1000 + i + 1, weights=weights, **kwargs)
            for i in range(n_tasks)]


# task file I/O ---------------------------------------------------------------

def write_task(task: SyntheticTask, fh) -> None:
    K, d = task.prototypes.shape
    fh.write(f"{K} {d} {task.n_test} {task.seed}\n")
    for row in task.prototypes:
        fh.write(" ".join(repr(float(v)) for v in row) + "\n")
    for label, row in zip(task.labels, task.X):
        fh.write(f"{int(label)} " + " ".join(repr(float(v)) for v in row) + "\n")


def read_task(fh, **param_overrides) -> SyntheticTask:
    """Rebuild a task from its text form; encoder and vocabulary are re-derived from the seed."""
    lines = [ln for ln in (l.strip() for l in fh) if ln]
    K, d, n_test, seed = (int(x) for x in lines[0].split())
    if len(lines) != 1 + K + n_test:
        raise ValueError(f"expected {1 + K + n_test} lines, found {len(lines)}")
    P = np.array([[float(x) for x in ln.split()] for ln in lines[1:1 + K]])
    rows = [ln.split() for ln in lines[1 + K:]]
    labels = np.array([int(r[0]) for r in rows])
    X = np.array([[float(x) for x in r[1:]] for r in rows])
    if P.shape != (K, d) or X.shape != (n_test, d):
        raise ValueError("task file dimensions disagree with its header")
    params = TaskParams(K=K, D_in=d, n_test=n_test, **param_overrides)
    weights = EncoderWeights.random(seed, d_in=d)
    vocab, prompt = _build(P, weights, seed, params)
    return SyntheticTask(P, X, labels, weights, vocab, prompt, seed, params)


# methods ---------------------------------------------------------------------

def method_configs(method: Method, aug: AugmentConfig, tuning: TuningConfig):
    """Augmentation/tuning configs realizing each method."""
    method = Method(method)
    if method is Method.TPT_STANDARD:
        return replace(aug, n_diffusion=0), replace(tuning, cosine_filter=False)
    return aug, tuning


def _episode(task: SyntheticTask, method: Method, aug, tuning, i: int, mix_ratio=None):
    sample = task.sample(i)
    if method is Method.ZERO_SHOT:
        e = encode_image(sample, task.weights)
        p = class_probabilities(e, encode_text(task.prompt_init, task.vocab, task.weights),
                                task.weights.temperature)
        pred = zero_shot_predict(sample, task.prompt_init, task.vocab, task.weights)
        return {"sample_index": i, "label": sample.label, "predicted": pred,
                "entropy": float(shannon_entropy(p))}
    report = adapt(sample, task.prompt_init, task.vocab, task.weights, aug, tuning,
                   sample_index=i, mix_ratio=mix_ratio)
    d = report.to_dict(timing=False)
    d["entropy"] = report.entropy_after
    # None rather than nan when the episode drew no spurious views, so reports compare and serialize
    for key in ("spurious_recall", "cosine_spurious_recall"):
        v = getattr(report.diagnostics, key)
        d[key] = None if math.isnan(v) else v
    return d


def _run_chunk(args):
    task, method, aug, tuning, indices, mix_ratio = args
    return [_episode(task, method, aug, tuning, i, mix_ratio) for i in indices]


def run_episodes(task, method, aug, tuning, workers: int = 1, mix_ratio=None) -> list[dict]:
    """Per-sample results in sample order, independent of ``workers``."""
    method = Method(method)
    aug, tuning = method_configs(method, aug, tuning)
    idx = list(range(task.n_test))
    if workers <= 1 or task.n_test < 2:
        return _run_chunk((task, method, aug, tuning, idx, mix_ratio))
    chunks = [idx[k::workers] for k in range(workers)]
    out = []
    with ProcessPoolExecutor(max_workers=workers) as ex:
        for part in ex.map(_run_chunk, [(task, method, aug, tuning, c, mix_ratio) for c in chunks]):
            out.extend(part)
    return sorted(out, key=lambda r: r["sample_index"])


@dataclass
class BenchmarkResult:
    method: str
    accuracy: float
    mean_entropy: float
    n_samples: int
    seeds: list
    config: dict
    reports: list = field(default_factory=list, repr=False)

    def summary_row(self) -> dict:
        return {"method": self.method, "accuracy": self.accuracy,
                "mean_entropy": self.mean_entropy, "n_samples": self.n_samples,
                "seeds": " ".join(str(s) for s in self.seeds)}


def _config_snapshot(task, aug, tuning, mix_ratio=None):
    return {"task": dict(vars(task.params)), "augment": config_dict(aug),
            "tuning": config_dict(tuning), "mix_ratio": mix_ratio, "note": SYNTHETIC_NOTE}


def run_method(method, task: SyntheticTask, aug: AugmentConfig | None = None,
               tuning: TuningConfig | None = None, workers: int = 1,
               mix_ratio: float | None = None) -> BenchmarkResult:
    method = Method(method)
    aug = aug or AugmentConfig(seed=task.seed)
    tuning = tuning or TuningConfig()
    reports = run_episodes(task, method, aug, tuning, workers, mix_ratio)
    correct = [r["predicted"] == r["label"] for r in reports]
    return BenchmarkResult(
        method=method.value,
        accuracy=float(np.mean(correct)),
        mean_entropy=float(np.mean([r["entropy"] for r in reports])),
        n_samples=len(reports),
        seeds=[task.seed],
        config=_config_snapshot(task, aug, tuning, mix_ratio),
        reports=reports,
    )


@dataclass
class SeedSummary:
    method: str
    accuracies: list
    entropies: list
    seeds: list

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def se(self) -> float:
        n = len(self.accuracies)
        return float(np.std(self.accuracies, ddof=1) / math.sqrt(n)) if n > 1 else 0.0

    def row(self) -> dict:
        return {"method": self.method, "accuracy": self.mean, "accuracy_se": self.se,
                "mean_entropy": float(np.mean(self.entropies)),
                "seeds": " ".join(str(s) for s in self.seeds)}


def run_benchmark(methods, seeds, task_kwargs: dict | None = None, aug: AugmentConfig | None = None,
                  tuning: TuningConfig | None = None, workers: int = 1):
    """Run each method on one task per seed; the augmentation seed follows the task seed."""
    task_kwargs = dict(task_kwargs or {})
    aug = aug or AugmentConfig()
    tuning = tuning or TuningConfig()
    per_seed = {Method(m).value: [] for m in methods}
    for seed in seeds:
        task = make_synthetic_task(seed=seed, **task_kwargs)
        for m in methods:
            per_seed[Method(m).value].append(
                run_method(m, task, replace(aug, seed=seed), tuning, workers))
    summaries = {
        m: SeedSummary(m, [r.accuracy for r in rs], [r.mean_entropy for r in rs], list(seeds))
        for m, rs in per_seed.items()
    }
    return summaries, per_seed


def paired_difference(a: SeedSummary, b: SeedSummary):
    """Mean and standard error of the per-seed accuracy difference a - b."""
    d = np.asarray(a.accuracies) - np.asarray(b.accuracies)
    se = float(np.std(d, ddof=1) / math.sqrt(d.size)) if d.size > 1 else 0.0
    return float(d.mean()), se


# sweeps ----------------------------------------------------------------------

@dataclass
class SweepResult:
    axis_names: list
    axis_values: list
    accuracy: np.ndarray

    def to_csv(self, header_comment: str = "") -> str:
        out = io.StringIO()
        if header_comment:
            for line in header_comment.splitlines():
                out.write(f"# {line}\n")
        w = csv.writer(out, lineterminator="\n")
        if len(self.axis_names) == 1:
            w.writerow([self.axis_names[0], "accuracy"])
            for v, a in zip(self.axis_values[0], self.accuracy):
                w.writerow([_fmt(v), repr(float(a))])
        else:
            rows, cols = self.axis_values
            w.writerow([f"{self.axis_names[0]}\\{self.axis_names[1]}"] + [_fmt(c) for c in cols])
            for r, line in zip(rows, self.accuracy):
                w.writerow([_fmt(r)] + [repr(float(a)) for a in line])
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "SweepResult":
        lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
        rows = list(csv.reader(lines))
        head = rows[0]
        if len(head) == 2 and head[1] == "accuracy":
            vals = [_parse(r[0]) for r in rows[1:]]
            acc = np.array([float(r[1]) for r in rows[1:]])
            return cls([head[0]], [vals], acc)
        names = head[0].split("\\")
        cols = [_parse(c) for c in head[1:]]
        vals = [_parse(r[0]) for r in rows[1:]]
        acc = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
        return cls(names, [vals, cols], acc)


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def _parse(s: str):
    try:
        return int(s)
    except ValueError:
        return float(s)


def sweep_mix_ratio(task: SyntheticTask, diffusion_fractions, standard_fractions,
                    aug: AugmentConfig | None = None, tuning: TuningConfig | None = None,
                    workers: int = 1) -> SweepResult:
    """Accuracy matrix over (diffusion share, standard share) of the full view pools.

    Cell (i, j) uses ``round(i * n_diffusion)`` generated and ``round(j * n_standard)``
    standard views of the configured pools, so the reference budget is fixed.
    """
    aug = aug or AugmentConfig(seed=task.seed)
    tuning = tuning or TuningConfig()
    diffusion_fractions = list(diffusion_fractions)
    standard_fractions = list(standard_fractions)
    if not diffusion_fractions or not standard_fractions:
        raise InvalidAxisValue("mix-ratio grid must be nonempty")
    acc = np.zeros((len(diffusion_fractions), len(standard_fractions)))
    for a, fd in enumerate(diffusion_fractions):
        for b, fs in enumerate(standard_fractions):
            if not (0 <= fd <= 1 and 0 <= fs <= 1):
                raise InvalidAxisValue(f"fractions must lie in [0, 1], got {(fd, fs)}")
            cell = replace(aug, n_standard=int(round(fs * aug.n_standard)),
                           n_diffusion=int(round(fd * aug.n_diffusion)))
            acc[a, b] = run_method(Method.DIFFTPT, task, cell, tuning, workers).accuracy
    return SweepResult(["diffusion_fraction", "standard_fraction"],
                       [diffusion_fractions, standard_fractions], acc)


def views_split(n_views: int) -> tuple[int, int]:
    """(n_standard, n_diffusion) for a total batch of ``n_views`` including the original."""
    aug_views = n_views - 1
    n_std = (aug_views + 1) // 2
    return n_std, aug_views - n_std


_RHO_FIELD = {Axis.RHO_H: "rho_H", Axis.RHO_C: "rho_C"}


def sweep_scalar(axis, values, task: SyntheticTask, aug: AugmentConfig | None = None,
                 tuning: TuningConfig | None = None, method=Method.DIFFTPT,
                 workers: int = 1) -> SweepResult:
    axis = Axis(axis)
    values = list(values)
    if not values:
        raise InvalidAxisValue("sweep needs at least one value")
    aug = aug or AugmentConfig(seed=task.seed)
    tuning = tuning or TuningConfig()
    acc = []
    for v in values:
        a, t, mix = aug, tuning, None
        if axis in (Axis.RHO_H, Axis.RHO_C):
            if not 0 < v <= 1:
                raise InvalidAxisValue(f"{axis.value} must lie in (0, 1], got {v}")
            t = replace(tuning, **{_RHO_FIELD[axis]: float(v)})
        elif axis is Axis.NUM_VIEWS:
            if int(v) != v or v < 1:
                raise InvalidAxisValue(f"NUM_VIEWS must be a positive integer, got {v}")
            n_std, n_diff = views_split(int(v))
            a = replace(aug, n_standard=n_std, n_diffusion=n_diff)
        elif axis is Axis.STEPS:
            if int(v) != v or v < 0:
                raise InvalidAxisValue(f"STEPS must be a non-negative integer, got {v}")
            t = replace(tuning, steps=int(v))
        elif axis is Axis.MIX_RATIO:
            if not 0 <= v <= 1:
                raise InvalidAxisValue(f"MIX_RATIO must lie in [0, 1], got {v}")
            mix = float(v)
        acc.append(run_method(method, task, a, t, workers, mix_ratio=mix).accuracy)
    return SweepResult([axis.value], [values], np.array(acc))
