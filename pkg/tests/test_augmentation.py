import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from difftpt.augmentation import (AugmentConfig, ViewSource, assemble_view_batch, diffusion_augment,
                                  split_budget, standard_augment)
from difftpt.encoder import EncoderWeights, ImageSample, encode_image

W = EncoderWeights.random(0)


def make_sample(seed=0):
    return ImageSample(np.random.default_rng(seed).standard_normal(32), label=0)


def test_standard_noop_augmentation_reproduces_original():
    cfg = AugmentConfig(crop_fraction_range=(1.0, 1.0), noise_sigma=0.0)
    s = make_sample()
    views = standard_augment(s, 5, cfg, W)
    np.testing.assert_allclose(views, np.tile(encode_image(s, W), (5, 1)), atol=1e-12)


def test_empty_requests():
    assert standard_augment(make_sample(), 0, AugmentConfig(), W).shape == (0, W.d_feat)
    v, f = diffusion_augment(np.ones(4), 0, AugmentConfig())
    assert v.shape == (0, 4) and f.shape == (0,)


def test_degenerate_diversity_stays_on_test_embedding():
    a = 1 - 1e-9
    cfg = AugmentConfig(spurious_rate=0.0, diversity_alpha_range=(a, a))
    e = encode_image(make_sample(), W)
    views, flags = diffusion_augment(e, 20, cfg)
    assert not flags.any()
    assert np.all(views @ e >= 1 - 1e-6)


def test_views_are_unit_norm_and_seeded():
    s = make_sample(3)
    a = assemble_view_batch(s, AugmentConfig(seed=9), W, sample_index=4)
    b = assemble_view_batch(s, AugmentConfig(seed=9), W, sample_index=4)
    c = assemble_view_batch(s, AugmentConfig(seed=10), W, sample_index=4)
    np.testing.assert_array_equal(a.embeddings, b.embeddings)
    assert not np.array_equal(a.embeddings, c.embeddings)
    np.testing.assert_allclose(np.linalg.norm(a.embeddings, axis=1), 1.0, atol=1e-9)


def test_default_batch_size_is_128():
    vb = assemble_view_batch(make_sample(), AugmentConfig(), W)
    assert len(vb) == 128
    assert vb.count(ViewSource.ORIGINAL) == 1
    assert vb.count(ViewSource.STANDARD) == 64
    assert vb.count(ViewSource.DIFFUSION) == 63
    np.testing.assert_array_equal(vb.original, encode_image(make_sample(), W))
    assert not vb.spurious_flags[vb.sources != ViewSource.DIFFUSION].any()


@pytest.mark.parametrize("mix, family", [(0.0, ViewSource.STANDARD), (1.0, ViewSource.DIFFUSION)])
def test_mix_ratio_boundaries_give_single_family(mix, family):
    vb = assemble_view_batch(make_sample(), AugmentConfig(), W, mix_ratio=mix)
    assert len(vb) == 128
    assert np.all(vb.sources[1:] == family)


@given(st.floats(0, 1))
def test_split_budget_conserves_total(mix):
    n_std, n_diff = split_budget(AugmentConfig(), mix)
    assert n_std + n_diff == 127 and n_std >= 0 and n_diff >= 0


def test_invalid_configs_rejected():
    with pytest.raises(ValueError):
        AugmentConfig(crop_fraction_range=(0.9, 0.5))
    with pytest.raises(ValueError):
        AugmentConfig(diversity_alpha_range=(0.5, 1.0))
    with pytest.raises(ValueError):
        split_budget(AugmentConfig(), 1.5)


def test_spurious_rate_is_respected_on_average():
    cfg = AugmentConfig(spurious_rate=0.1)
    e = encode_image(make_sample(), W)
    flags = np.concatenate([diffusion_augment(e, 63, cfg, sample_index=i)[1] for i in range(200)])
    assert abs(flags.mean() - 0.1) < 0.015


def test_spurious_views_are_less_faithful():
    cfg = AugmentConfig(spurious_rate=0.5)
    e = encode_image(make_sample(), W)
    views, flags = diffusion_augment(e, 400, cfg)
    cos = views @ e
    assert cos[flags].mean() < cos[~flags].mean()


@pytest.mark.parametrize("seed", range(20))
def test_diversity_ordering_standard_vs_generated(seed):
    # default configs, 16 samples x (64 standard, 63 generated) views per seed
    w = EncoderWeights.random(seed)
    rng = np.random.default_rng(seed)
    std_cos, diff_cos = [], []
    for i in range(16):
        vb = assemble_view_batch(ImageSample(rng.standard_normal(32)), AugmentConfig(seed=seed), w,
                                 sample_index=i)
        cos = vb.embeddings @ vb.original
        std_cos.append(cos[vb.sources == ViewSource.STANDARD])
        diff_cos.append(cos[vb.sources == ViewSource.DIFFUSION])
    std_cos, diff_cos = np.concatenate(std_cos), np.concatenate(diff_cos)
    assert std_cos.size >= 1000
    assert std_cos.mean() > diff_cos.mean()
    assert diff_cos.var() > std_cos.var()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 1000))
def test_view_rng_independent_of_other_samples(seed, idx):
    # a sample's views do not depend on which other samples were generated first
    cfg = AugmentConfig(n_standard=3, n_diffusion=3, seed=seed)
    s = make_sample(idx % 7)
    first = assemble_view_batch(s, cfg, W, sample_index=idx).embeddings
    assemble_view_batch(make_sample(99), cfg, W, sample_index=idx + 1)
    np.testing.assert_array_equal(first, assemble_view_batch(s, cfg, W, sample_index=idx).embeddings)
