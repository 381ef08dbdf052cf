import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from d2sa.metrics import PSNR_CAP, evaluate, psnr, ssim


def phantom(seed=0):
    from d2sa.mri import make_phantom

    return make_phantom("ellipse-phantom", 32, 32, seed=seed).magnitude()


def test_identical_images():
    ref = phantom()
    assert psnr(ref, ref) == PSNR_CAP == 99.0
    assert ssim(ref, ref) == pytest.approx(1.0, abs=1e-12)


def test_uniform_offset_gives_20db():
    ref = phantom()
    ref = ref / ref.max()
    assert psnr(ref + 0.1, ref) == pytest.approx(20.0, abs=1e-9)


def test_ssim_symmetric():
    a, b = phantom(0), phantom(1)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-14)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 0.5))
def test_ssim_range_and_noise_order(seed, sd):
    ref = phantom()
    rng = np.random.default_rng(seed)
    noisy = ref + sd * rng.standard_normal(ref.shape)
    worse = ref + 2 * sd * rng.standard_normal(ref.shape)
    s = ssim(noisy, ref)
    assert -1 <= s <= 1
    assert psnr(noisy, ref) > psnr(worse, ref) - 1.0


def test_errors():
    with pytest.raises(ValueError, match="shape"):
        psnr(np.zeros((4, 4)), np.ones((4, 5)))
    with pytest.raises(ValueError, match="zero"):
        ssim(np.ones((4, 4)), np.zeros((4, 4)))


def test_evaluate_pair():
    ref = phantom()
    pair = evaluate(ref * 0.9, ref)
    assert pair.psnr == psnr(ref * 0.9, ref) and pair.ssim == ssim(ref * 0.9, ref)
