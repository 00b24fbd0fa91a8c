from dataclasses import replace

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from mos.augment import (
    AugmentationPolicy,
    apply_policy,
    augment_views,
    hsv_to_rgb,
    identity_policy,
    rgb_to_hsv,
    sample_params,
    t1_policy,
    t2_policy,
    to_chw,
)
from mos.rng import RngStream


def reference_resize(img: np.ndarray, size: int) -> np.ndarray:
    t = to_chw(img)[None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=False)
    return out[0].movedim(0, -1).numpy()


def _img(h=12, w=12, seed=0):
    return np.random.default_rng(seed).uniform(size=(h, w, 3)).astype(np.float32)


@pytest.mark.parametrize("size", [6, 12, 20])
def test_identity_configuration_is_resize(size):
    img = _img()
    out = apply_policy(img, identity_policy(size), RngStream(0))
    np.testing.assert_allclose(out, reference_resize(img, size), atol=1e-6)


def test_forced_flip():
    img = _img(8, 8)
    pol = replace(identity_policy(8), hflip_prob=1.0)
    out = apply_policy(img, pol, RngStream(1))
    np.testing.assert_allclose(out, reference_resize(img, 8)[:, ::-1], atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(value=st.floats(0, 1), seed=st.integers(0, 10_000))
def test_constant_image_stays_constant(value, seed):
    img = np.full((4, 4, 3), value, np.float32)
    pol = replace(identity_policy(2), crop_area_range=(0.1, 1.0), crop_aspect_range=(0.5, 2.0),
                  hflip_prob=0.5)
    out = apply_policy(img, pol, RngStream(seed))
    assert out.shape == (2, 2, 3)
    np.testing.assert_allclose(out, value, atol=1e-6)


def test_output_shape_and_finite():
    img = _img(32, 32)
    pol = t2_policy(16).with_stats((0.5, 0.4, 0.3), (0.2, 0.2, 0.25))
    out = apply_policy(img, pol, RngStream(4))
    assert out.shape == (16, 16, 3)
    assert np.isfinite(out).all()


def test_pure_function():
    img = _img(32, 32)
    a = apply_policy(img, t2_policy(16), RngStream(5, (2, 3)))
    b = apply_policy(img, t2_policy(16), RngStream(5, (2, 3)))
    assert a.tobytes() == b.tobytes()
    c = apply_policy(img, t2_policy(16), RngStream(5, (2, 4)))
    assert a.tobytes() != c.tobytes()


def test_activation_rates():
    pol = AugmentationPolicy(jitter_prob=0.8, grayscale_prob=0.2, blur_prob=0.1, solarize_prob=0.2,
                             hflip_prob=0.5)
    gen = RngStream(42).generator()
    draws = [sample_params(gen, 32, 32, pol) for _ in range(10_000)]
    for flag, p in [("jitter", 0.8), ("gray", 0.2), ("blur", 0.1), ("solarize", 0.2), ("flip", 0.5)]:
        rate = np.mean([getattr(d, flag) for d in draws])
        assert abs(rate - p) <= 0.03, flag


@settings(max_examples=200, deadline=None)
@given(h=st.integers(1, 64), w=st.integers(1, 64), seed=st.integers(0, 2**32 - 1),
       lo=st.floats(0.01, 1.0), aspect_hi=st.floats(1.0, 4.0))
def test_crop_inside_image(h, w, seed, lo, aspect_hi):
    pol = AugmentationPolicy(crop_area_range=(lo, 1.0), crop_aspect_range=(1 / aspect_hi, aspect_hi))
    top, left, ch, cw = sample_params(RngStream(seed).generator(), h, w, pol).crop
    assert 0 <= top and 0 <= left and ch >= 1 and cw >= 1
    assert top + ch <= h and left + cw <= w


def test_degenerate_crop_falls_back_to_full_image():
    # aspect 10 can never fit a 4x4 image at full area
    pol = AugmentationPolicy(crop_area_range=(1.0, 1.0), crop_aspect_range=(10.0, 10.0))
    assert sample_params(RngStream(0).generator(), 4, 4, pol).crop == (0, 0, 4, 4)


def test_hsv_round_trip():
    x = torch.rand(5, 3, 7, 7, dtype=torch.float64)
    torch.testing.assert_close(hsv_to_rgb(rgb_to_hsv(x)), x, atol=1e-12, rtol=0)


def test_batch_independence():
    imgs = to_chw(np.stack([_img(16, 16, k) for k in range(4)]))
    pol = t2_policy(8)
    params = [sample_params(RngStream(1, (k,)).generator(), 16, 16, pol) for k in range(4)]
    together = augment_views(imgs, params, pol)
    for k in range(4):
        alone = augment_views(imgs[k:k + 1], params[k:k + 1], pol)
        torch.testing.assert_close(alone[0], together[k], atol=1e-6, rtol=0)


@pytest.mark.parametrize("field,value", [("jitter_prob", 1.5), ("crop_area_range", (0.0, 1.0)),
                                         ("crop_area_range", (0.6, 0.5)), ("out_size", 0)])
def test_policy_validation(field, value):
    with pytest.raises(ValueError):
        replace(t1_policy(), **{field: value})
