import itertools

import numpy as np
import pytest
import torch

from mdbanet.losses import total_loss
from mdbanet.network import (
    Branch,
    NetworkConfig,
    build_network,
    count_parameters,
    fuse_outputs,
    load_checkpoint,
    predict_case,
    predict_probabilities,
    probabilities_to_labels,
    save_checkpoint,
    sfm,
)
from mdbanet.phantom import PhantomSpec, generate_phantom
from mdbanet.training import branch_targets
from mdbanet.volume_io import SCAR, Volume, normalize_intensity


def small(**kw):
    return NetworkConfig(**{"base_channels": 4, **kw})


# ---------------------------------------------------------------- config / build

@pytest.mark.parametrize(
    "kw",
    [dict(sub_decoders=0), dict(sub_decoders=3, encoder_depth=3), dict(base_channels=0),
     dict(fusion_mode="add"), dict(attention_mode="tanh"), dict(fusion_mode="sobel", la_branch=False)],
)
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        NetworkConfig(**kw).validate()


def test_mdnet_parameter_set_is_single_branch():
    cfg = NetworkConfig(fusion_mode="none", la_branch=False)
    net = build_network(cfg)
    assert net.la is None
    assert count_parameters(net) == count_parameters(Branch(cfg))
    full = build_network(NetworkConfig())
    assert count_parameters(full) == 2 * count_parameters(net)


def test_fusion_modes_same_trainable_count():
    counts = {m: count_parameters(build_network(NetworkConfig(fusion_mode=m))) for m in ("sobel", "multiply", "none")}
    assert len(set(counts.values())) == 1
    sobel_net = build_network(NetworkConfig(fusion_mode="sobel"))
    assert count_parameters(sobel_net, trainable_only=False) == counts["sobel"]


@pytest.mark.parametrize("depth,n", [(3, 2), (4, 3), (4, 2), (5, 4), (3, 1)])
def test_deepest_subdecoder_upsamples_to_full_resolution(depth, n):
    net = build_network(small(encoder_depth=depth, sub_decoders=n))
    ups = [d.n_upsampling for d in net.scar.decoders]
    assert ups[-1] == depth - 1
    assert ups == sorted(ups) and len(set(ups)) == n


def test_method_names():
    assert NetworkConfig(fusion_mode="sobel").method_name == "MDBAnet"
    assert NetworkConfig(fusion_mode="multiply").method_name == "MDBAnet_mul"
    assert NetworkConfig(fusion_mode="none", la_branch=False).method_name == "MDnet"


def test_bias_initialised_to_zero():
    net = build_network(small())
    for m in net.modules():
        if isinstance(m, (torch.nn.Conv3d, torch.nn.ConvTranspose3d)) and m.bias is not None:
            assert torch.all(m.bias == 0)


# ---------------------------------------------------------------- encode

def test_encode_shapes():
    net = build_network(NetworkConfig(encoder_depth=3, base_channels=8))
    levels = net.encode(torch.zeros(1, 1, 32, 32, 32))
    assert [tuple(l.shape[1:]) for l in levels] == [(8, 32, 32, 32), (16, 16, 16, 16), (32, 8, 8, 8)]
    batch = net.encode(torch.zeros(2, 1, 16, 16, 16), "la")
    assert all(l.shape[0] == 2 for l in batch)


def test_encode_indivisible():
    net = build_network(small())
    with pytest.raises(ValueError, match="divisible by 4"):
        net.encode(torch.zeros(1, 1, 30, 30, 30))


def test_shared_encoder():
    net = build_network(small(share_encoder=True))
    assert net.la.encoder is None
    x = torch.randn(1, 1, 8, 8, 8)
    for a, b in zip(net.encode(x, "scar"), net.encode(x, "la")):
        assert torch.equal(a, b)


# ---------------------------------------------------------------- fusion module

def _feats(rng, c=4, n=8):
    return [torch.as_tensor(rng.normal(size=(c, n, n, n)), dtype=torch.float64) for _ in range(2)]


def test_sfm_constant_la_raw_zeroes_gate(rng):
    dec, enc = _feats(rng)
    out = sfm(dec, torch.full_like(dec, 2.0), enc, NetworkConfig(attention_mode="raw"))
    assert out.shape == (8, 8, 8, 8)
    assert torch.all(out[:4] == 0)
    assert torch.equal(out[4:], enc)


def test_sfm_constant_la_sigmoid_halves(rng):
    dec, enc = _feats(rng)
    out = sfm(dec, torch.full_like(dec, -3.0), enc, NetworkConfig(attention_mode="sigmoid"))
    torch.testing.assert_close(out[:4], 0.5 * dec, atol=1e-6, rtol=0)
    assert torch.equal(out[4:], enc)


def test_sfm_multiply_and_none(rng):
    dec, enc = _feats(rng)
    la = torch.as_tensor(rng.normal(size=dec.shape))
    mul = sfm(dec, la, enc, NetworkConfig(fusion_mode="multiply"))
    torch.testing.assert_close(mul[:4], dec * la)
    plain = sfm(dec, None, enc, NetworkConfig(fusion_mode="none", la_branch=False))
    assert torch.equal(plain, torch.cat([dec, enc]))


def test_sfm_sobel_gate_uses_edge_response(rng):
    dec, enc = _feats(rng)
    la = torch.zeros_like(dec)
    la[:, 4:] = 1.0  # a step edge between slices 3 and 4
    out = sfm(dec, la, enc, NetworkConfig(attention_mode="raw"))
    gate = out[:4] / dec
    assert torch.all(gate[:, 3:5] > 0)
    assert torch.all(gate[:, :2] == 0) and torch.all(gate[:, 6:] == 0)


def test_sfm_shape_mismatch(rng):
    dec, enc = _feats(rng)
    with pytest.raises(ValueError):
        sfm(dec, dec[:2], enc, NetworkConfig())
    with pytest.raises(ValueError):
        sfm(dec, dec, enc[:, :4], NetworkConfig())


# ---------------------------------------------------------------- fuse_outputs

def test_fuse_identity_and_half():
    p = torch.rand(1, 1, 5, 5, 5)
    for n in (1, 2, 3, 4):
        assert torch.equal(fuse_outputs([p] * n), p)
    assert torch.all(fuse_outputs([torch.zeros(3, 3), torch.ones(3, 3)]) == 0.5)


def test_fuse_matches_voxel_mean(rng):
    maps = rng.random((3, 4, 4, 4))
    out = fuse_outputs([torch.as_tensor(m) for m in maps]).numpy()
    expected = np.empty((4, 4, 4))
    for idx in np.ndindex(4, 4, 4):
        expected[idx] = sum(m[idx] for m in maps) / 3
    np.testing.assert_allclose(out, expected, atol=1e-7)


def test_fuse_errors():
    with pytest.raises(ValueError):
        fuse_outputs([])
    with pytest.raises(ValueError):
        fuse_outputs([torch.zeros(2), torch.zeros(3)])


# ---------------------------------------------------------------- forward

def test_forward_shapes_range_and_determinism():
    net = build_network(NetworkConfig())
    net.eval()
    x = torch.zeros(1, 1, 32, 32, 32)
    with torch.no_grad():
        scar, la = net(x)
        scar2, la2 = net(x)
    assert len(scar.per_depth) == 2 and len(la.per_depth) == 2
    for p in scar.per_depth + la.per_depth + [scar.fused, la.fused]:
        assert p.shape == (1, 1, 32, 32, 32)
        assert torch.isfinite(p).all() and p.min() >= 0 and p.max() <= 1
    assert torch.equal(scar.fused, scar2.fused) and torch.equal(la.fused, la2.fused)


def test_fused_within_envelope():
    net = build_network(small(encoder_depth=4, sub_decoders=3))
    with torch.no_grad():
        scar, _ = net(torch.randn(1, 1, 16, 16, 16))
    stack = torch.stack(scar.per_depth)
    assert torch.all(scar.fused >= stack.min(0).values) and torch.all(scar.fused <= stack.max(0).values)


def test_mdnet_reduction_independent_of_la_parameters():
    net = build_network(small(fusion_mode="none"))
    x = torch.randn(1, 1, 16, 16, 16)
    with torch.no_grad():
        before, _ = net(x)
        for p in net.la.parameters():
            p.add_(torch.randn_like(p))
        after, _ = net(x)
    assert torch.equal(before.fused, after.fused)


def test_sobel_fusion_depends_on_la_parameters():
    net = build_network(small(fusion_mode="sobel"))
    x = torch.randn(1, 1, 16, 16, 16)
    with torch.no_grad():
        before, _ = net(x)
        for p in net.la.decoders[-1].parameters():
            p.add_(torch.randn_like(p))
        after, _ = net(x)
    assert not torch.equal(before.fused, after.fused)


@pytest.mark.parametrize("fusion", ["sobel", "multiply", "none"])
def test_gradient_reaches_every_parameter(fusion):
    cfg = NetworkConfig(fusion_mode=fusion, la_branch=True)
    net = build_network(cfg)
    v, lm = generate_phantom(PhantomSpec(seed=0))
    x = torch.as_tensor(normalize_intensity(v).voxels)[None, None]
    y = torch.as_tensor(lm.labels.astype(np.int64))[None, None]
    scar_gt, la_gt = branch_targets(y)
    scar, la = net(x)
    total_loss(scar, scar_gt, la, la_gt).total.backward()
    dead = [n for n, p in net.named_parameters() if p.grad is None or not torch.any(p.grad != 0)]
    assert dead == []


# ---------------------------------------------------------------- inference

def test_probabilities_to_labels_rules():
    hi, lo = np.full((2, 2, 2), 0.9), np.full((2, 2, 2), 0.1)
    assert np.all(probabilities_to_labels(hi, hi, 0.5) == SCAR)
    assert np.all(probabilities_to_labels(lo, lo, 0.5) == 0)
    assert np.all(probabilities_to_labels(lo, hi, 0.5) == 1)
    half = np.full((2, 2, 2), 0.5)
    assert np.all(probabilities_to_labels(half, None, 0.5) == SCAR)
    with pytest.raises(ValueError):
        probabilities_to_labels(hi, hi, 1.0)


def test_predict_case_crops_back():
    net = build_network(small())
    v = Volume(np.random.default_rng(0).normal(size=(13, 10, 9)), (1.0, 1.0, 2.0), "c")
    lm = predict_case(v, net)
    assert lm.shape == v.shape and lm.spacing == v.spacing
    scar_p, la_p = predict_probabilities(v, net)
    assert scar_p.shape == la_p.shape == v.shape


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip(tmp_path):
    cfg = small(fusion_mode="multiply")
    net = build_network(cfg)
    save_checkpoint(tmp_path / "c.pt", net, step=17)
    back, step = load_checkpoint(tmp_path / "c.pt", cfg)
    assert step == 17
    for (n1, p1), (n2, p2) in zip(net.state_dict().items(), back.state_dict().items()):
        assert n1 == n2 and torch.equal(p1, p2)


def test_checkpoint_config_mismatch(tmp_path):
    net = build_network(small())
    save_checkpoint(tmp_path / "c.pt", net)
    with pytest.raises(ValueError, match="mismatch"):
        load_checkpoint(tmp_path / "c.pt", small(fusion_mode="multiply"))


def test_seeded_build_is_reproducible():
    a, b = build_network(small(), seed=3), build_network(small(), seed=3)
    c = build_network(small(), seed=4)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    assert not all(torch.equal(p, q) for p, q in zip(a.parameters(), c.parameters()))
