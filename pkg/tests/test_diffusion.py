import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from d2sa import autodiff as ad
from d2sa.diffusion import (
    KINDS,
    DiffConvBank,
    ad_update,
    diffusion_coefficient,
    merge_kernels,
    merged_gradient,
    transform_kernel,
    transform_matrix,
)
from fixtures import edge_stats, run_pinned
from oracles import central_fd, correlate, difference_conv, rel_err


def test_cdc_constant_image_zero():
    K = np.random.default_rng(0).normal(size=(2, 1, 3, 3))
    out = correlate(np.full((1, 6, 6), 3.0), transform_kernel("CDC", K))
    np.testing.assert_allclose(out[:, 1:-1, 1:-1], 0.0, atol=1e-12)


def test_hdc_vdc_directional_zero():
    rng = np.random.default_rng(1)
    K = rng.normal(size=(1, 1, 3, 3))
    const_rows = np.repeat(rng.normal(size=(6, 1)), 6, axis=1)[None]  # constant along each row
    const_cols = np.repeat(rng.normal(size=(1, 6)), 6, axis=0)[None]
    np.testing.assert_allclose(correlate(const_rows, transform_kernel("HDC", K))[:, :, 1:-1], 0.0, atol=1e-12)
    np.testing.assert_allclose(correlate(const_cols, transform_kernel("VDC", K))[:, 1:-1, :], 0.0, atol=1e-12)


@pytest.mark.parametrize("kind", KINDS)
def test_transform_matches_definition(kind):
    rng = np.random.default_rng(KINDS.index(kind))
    K = rng.normal(size=(1, 1, 3, 3))
    x = rng.normal(size=(1, 8, 8))
    diff = np.abs(difference_conv(x, K, kind) - correlate(x, transform_kernel(kind, K))).max()
    assert diff <= 1e-12


def test_unknown_kind():
    with pytest.raises(ValueError):
        transform_matrix("XDC")


def test_vc_is_identity_and_cdc_centre():
    K = np.arange(9.0).reshape(1, 1, 3, 3)
    np.testing.assert_array_equal(transform_kernel("VC", K), K)
    cdc = transform_kernel("CDC", K)
    assert cdc[0, 0, 1, 1] == K[0, 0, 1, 1] - K.sum()


def test_merged_equals_five_conv_sum():
    bank = DiffConvBank.create(8, seed=3, init_scale=1.0)
    x = ad.Tensor(np.random.default_rng(3).normal(size=(1, 8, 6, 6)))
    merged = merged_gradient(x, bank).data
    parts = sum(ad.conv2d(x, ad.Tensor(transform_kernel(k, bank.kernels[k].data))).data for k in KINDS)
    assert merged.shape == (1, 2, 6, 6)
    assert np.abs(merged - parts).max() <= 1e-12
    np.testing.assert_allclose(bank.merged_kernel().data, merge_kernels({k: v.data for k, v in bank.kernels.items()}), atol=1e-15)


def test_merged_zero_input_and_channel_check():
    bank = DiffConvBank.create(8, seed=0)
    assert not np.any(merged_gradient(ad.Tensor(np.zeros((1, 8, 5, 5))), bank).data)
    with pytest.raises(ValueError, match="channels"):
        merged_gradient(ad.Tensor(np.zeros((1, 4, 5, 5))), bank)


def test_bank_validation():
    with pytest.raises(ValueError, match="divisible"):
        DiffConvBank.create(6)
    with pytest.raises(ValueError):
        DiffConvBank.create(8, k=0.0)
    assert DiffConvBank.create(8).k == pytest.approx(0.1)


def test_coefficient_values():
    assert diffusion_coefficient(0.0, 0.3) == 1.0
    assert diffusion_coefficient(0.3, 0.3) == 0.5
    assert diffusion_coefficient(1e6, 0.1) < 1e-12
    with pytest.raises(ValueError):
        diffusion_coefficient(1.0, 0.0)
    with pytest.raises(ValueError):
        diffusion_coefficient(1.0, -1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1e3), st.lists(st.floats(0, 1e4), min_size=2, max_size=30))
def test_coefficient_range_and_monotone(k, mags):
    mags = np.sort(np.array(mags))
    g = diffusion_coefficient(mags, k)
    assert np.all((g > 0) & (g <= 1))
    assert np.all(np.diff(g) <= 0)


def test_constant_features_unchanged_with_zero_restore():
    bank = DiffConvBank.create(8, seed=0)
    u = ad.Tensor(np.full((1, 8, 6, 6), 0.7))
    assert ad_update(u, bank).data.tobytes() == u.data.tobytes()


def test_zero_restore_is_identity_on_any_input():
    bank = DiffConvBank.create(8, seed=1)
    u = ad.Tensor(np.random.default_rng(1).normal(size=(1, 8, 6, 6)))
    assert ad_update(u, bank, steps=3).data.tobytes() == u.data.tobytes()


def test_bank_gradients_fd():
    rng = np.random.default_rng(4)
    bank = DiffConvBank.create(4, seed=4, init_scale=2.0)
    bank.restore.data = rng.normal(size=bank.restore.shape)
    bank.log_k.data = np.array(np.log(0.5))
    u0 = rng.normal(size=(1, 4, 8, 8))
    w = rng.normal(size=u0.shape)

    def loss(u):
        return ad.sum_(ad.mul(ad_update(u, bank), ad.Tensor(w)))

    u = ad.Tensor(u0.copy(), True)
    params = bank.parameters()
    with ad.Tape():
        ad.backward(loss(u), params + [u])
    for p in params:
        def f(v, p=p):
            old = p.data
            p.data = v
            out = loss(ad.Tensor(u0)).item()
            p.data = old
            return out

        assert rel_err(p.grad, central_fd(f, p.data.copy(), 1e-6)) <= 1e-4, p.name
    assert rel_err(u.grad, central_fd(lambda v: loss(ad.Tensor(v)).item(), u0, 1e-6)) <= 1e-4


def test_pinned_bank_preserves_edge():
    before, after = run_pinned(steps=5)
    v0, c0 = edge_stats(before)
    v1, c1 = edge_stats(after)
    assert v1 <= 0.5 * v0
    assert c1 >= 0.8 * c0


def test_save_load(tmp_path):
    bank = DiffConvBank.create(8, seed=2)
    bank.save(tmp_path)
    back = DiffConvBank.load(tmp_path)
    for a, b in zip(bank.parameters(), back.parameters()):
        assert a.data.tobytes() == b.data.tobytes()
