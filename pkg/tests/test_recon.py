import numpy as np
import pytest

from d2sa import autodiff as ad
from d2sa.inr import AffineMaps
from d2sa.metrics import psnr
from d2sa.mri import make_shift_scenario, simulate_dataset, zero_filled
from d2sa.pipeline import predict
from d2sa.recon import ReconConfig, ReconNet, apply_freeze_policy, pretrain_source, recon_forward
from oracles import central_fd, rel_err


def rand_input(seed, H=8, W=8):
    return ad.Tensor(np.random.default_rng(seed).normal(size=(1, 2, H, W)))


def maps_of(alpha, beta):
    return AffineMaps(ad.Tensor(alpha), ad.Tensor(beta))


def test_shapes_preserved():
    net = ReconNet(ReconConfig(), 0)
    out = recon_forward(rand_input(0, 12, 10), net)
    assert out.shape == (1, 2, 12, 10)
    assert net.features(rand_input(0)).shape == (1, 16, 8, 8)


def test_identity_maps_bitwise_noop():
    net = ReconNet(ReconConfig(), 1)
    x = rand_input(1)
    plain = recon_forward(x, net).data
    ident = recon_forward(x, net, maps_of(np.ones((16, 8, 8)), np.zeros((16, 8, 8)))).data
    assert plain.tobytes() == ident.tobytes()


def test_zero_maps_leave_only_bias():
    net = ReconNet(ReconConfig(), 2)
    net.biases[-1].data = np.array([0.3, -0.2])
    out = recon_forward(rand_input(2), net, maps_of(np.zeros((16, 8, 8)), np.zeros((16, 8, 8)))).data
    np.testing.assert_allclose(out[0, 0], 0.3)
    np.testing.assert_allclose(out[0, 1], -0.2)


def test_map_shape_mismatch():
    net = ReconNet(ReconConfig(), 0)
    with pytest.raises(ValueError, match="affine maps"):
        recon_forward(rand_input(0), net, maps_of(np.ones((8, 8, 8)), np.zeros((8, 8, 8))))


def test_channel_mismatch():
    with pytest.raises(ValueError, match="2 input channels"):
        recon_forward(ad.Tensor(np.zeros((1, 3, 8, 8))), ReconNet(ReconConfig(), 0))


def test_affine_hook_gradient_fd():
    net = ReconNet(ReconConfig(channels=4), 3)
    rng = np.random.default_rng(3)
    x = rand_input(3)
    a0, b0 = 1 + 0.1 * rng.normal(size=(4, 8, 8)), 0.1 * rng.normal(size=(4, 8, 8))
    w = rng.normal(size=(1, 2, 8, 8))

    def loss(a, b):
        return ad.sum_(ad.mul(recon_forward(x, net, AffineMaps(a, b)), ad.Tensor(w)))

    a, b = ad.Tensor(a0.copy(), True), ad.Tensor(b0.copy(), True)
    with ad.Tape():
        ad.backward(loss(a, b), [a, b])
    ga = central_fd(lambda v: loss(ad.Tensor(v), ad.Tensor(b0)).item(), a0)
    gb = central_fd(lambda v: loss(ad.Tensor(a0), ad.Tensor(v)).item(), b0)
    assert rel_err(a.grad, ga) <= 1e-4
    assert rel_err(b.grad, gb) <= 1e-4


def test_freeze_policy():
    net = ReconNet(ReconConfig(), 0)
    flags = apply_freeze_policy(net, "stage2")
    assert [k for k, v in flags.items() if v] == ["conv3.weight", "conv3.bias"]
    flags = apply_freeze_policy(net, "stage1")
    assert all(flags.values())
    with pytest.raises(ValueError):
        apply_freeze_policy(net, "stage3")


def test_stage1_every_param_gets_gradient():
    net = ReconNet(ReconConfig(), 5)
    apply_freeze_policy(net, "stage1")
    with ad.Tape():
        ad.backward(ad.sum_(ad.mul(recon_forward(rand_input(5), net), recon_forward(rand_input(5), net))), net.parameters())
    for p in net.parameters():
        assert np.abs(p.grad).max() > 0, p.name


def test_zero_epochs_no_change_and_empty_rejected():
    net = ReconNet(ReconConfig(), 0)
    before = [p.data.copy() for p in net.parameters()]
    data = simulate_dataset(make_shift_scenario("sampling", 0, height=16, width=16).source, 1, 2, 0)
    assert pretrain_source(net, data, 0) == []
    assert all(np.array_equal(a, p.data) for a, p in zip(before, net.parameters()))
    with pytest.raises(ValueError):
        pretrain_source(net, [], 1)


def test_pretrain_deterministic_and_decreasing():
    data = simulate_dataset(make_shift_scenario("sampling", 0, height=16, width=16).source, 2, 2, 0)
    nets = [ReconNet(ReconConfig(), 1) for _ in range(2)]
    traces = [pretrain_source(n, data, 6, 1e-3, seed=2) for n in nets]
    assert traces[0] == traces[1]
    assert traces[0][-1] < traces[0][0]
    for a, b in zip(*(n.parameters() for n in nets)):
        assert a.data.tobytes() == b.data.tobytes()


def test_pretrained_beats_zero_filled_on_source():
    sc = make_shift_scenario("sampling", 0)
    data = simulate_dataset(sc.source, 4, 6, 0)
    net = ReconNet(ReconConfig(), 0)
    pretrain_source(net, data, 60, 1e-3, 0)
    wins = 0
    for s in data:
        ref = s.image.magnitude()
        wins += psnr(np.abs(predict(s, net)), ref) > psnr(zero_filled(s.kspace)[1], ref)
    assert wins >= 0.9 * len(data)


def test_save_load(tmp_path):
    net = ReconNet(ReconConfig(), 7)
    apply_freeze_policy(net, "stage2")
    net.save(tmp_path)
    back = ReconNet.load(tmp_path)
    assert back.trainable_flags() == net.trainable_flags()
    for a, b in zip(net.parameters(), back.parameters()):
        assert a.data.tobytes() == b.data.tobytes()
