import numpy as np
import pytest
import torch
from torch import nn

import oracles
from gradcheck import check_module
from ramf.errors import ShapeMismatch
from ramf.lgcf import LGCF, LGCFConfig, lgcf_fuse, lgcf_global, lgcf_local, lgcf_param_count, lgcf_project

torch.set_default_dtype(torch.float32)


def _np(t):
    return None if t is None else t.detach().double().numpy()


def _seeded(cfg, seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    return LGCF(cfg).to(dtype)


def test_project_zero_weights():
    mlp = nn.Sequential(nn.Linear(10, 8), nn.ReLU(), nn.Linear(8, 256))
    for p in mlp.parameters():
        nn.init.zeros_(p)
    out = lgcf_project(torch.randn(5, 10), mlp)
    assert out.shape == (5, 256) and not out.any()


def test_project_identity_on_nonnegative_input():
    mlp = nn.Sequential(nn.Linear(6, 6), nn.ReLU(), nn.Linear(6, 6))
    with torch.no_grad():
        for lin in (mlp[0], mlp[2]):
            lin.weight.copy_(torch.eye(6))
            lin.bias.zero_()
    x = torch.rand(4, 6)
    assert torch.equal(lgcf_project(x, mlp), x)


def test_project_matches_rowwise_oracle():
    torch.manual_seed(1)
    m = LGCF(LGCFConfig(in_dim=12, hidden_dim=9, unified_dim=8)).double()
    x = torch.randn(7, 12, dtype=torch.float64)
    W1, b1, W2, b2 = (_np(p) for p in (m.mlp[0].weight, m.mlp[0].bias, m.mlp[2].weight, m.mlp[2].bias))
    expect = np.stack([oracles.relu(W1 @ row + b1) @ W2.T + b2 for row in x.numpy()])
    got = lgcf_project(x, m.mlp).detach().numpy()
    assert np.allclose(got, expect, rtol=1e-5, atol=0)


def test_local_single_step_identity_kernel():
    h = torch.randn(1, 5)
    w = torch.zeros(5, 1, 3)
    w[:, 0, 1] = 1.0
    assert torch.equal(lgcf_local(h, w, None, groups=5), h[0])


def test_local_delta_kernel_recovers_spike_heights():
    L, D = 9, 4
    h = torch.zeros(L, D)
    heights = torch.tensor([1.5, 2.0, 0.5, 3.0])
    for d, t in enumerate([0, 3, 8, 5]):
        h[t, d] = heights[d]
    w = torch.zeros(D, 1, 3)
    w[:, 0, 1] = 1.0
    assert torch.equal(lgcf_local(h, w, torch.zeros(D), groups=D), heights)


@pytest.mark.parametrize("depthwise", [True, False])
def test_local_matches_loop_conv_oracle(depthwise):
    rng = np.random.default_rng(2)
    L, D, k = 11, 6, 5
    h = rng.standard_normal((L, D))
    groups = D if depthwise else 1
    w = rng.standard_normal((D, D // groups, k))
    b = rng.standard_normal(D)
    conv = oracles.conv1d_same(h, w, b, groups)
    expect = conv.max(axis=0)
    got = lgcf_local(torch.from_numpy(h), torch.from_numpy(w), torch.from_numpy(b), groups).numpy()
    assert np.abs(got - expect).max() < 1e-5


def test_global_constant_and_two_point():
    c = torch.randn(256)
    assert torch.allclose(lgcf_global(c.expand(6, 256)), c)
    assert torch.equal(lgcf_global(torch.stack([torch.zeros(4), 2 * torch.ones(4)])), torch.ones(4))


def test_global_matches_loop_mean():
    h = torch.randn(7, 256, dtype=torch.float64)
    expect = [sum(h[t, d].item() for t in range(7)) / 7 for d in range(256)]
    assert np.abs(lgcf_global(h).numpy() - np.array(expect)).max() < 1e-6


def test_global_is_time_permutation_invariant():
    h = torch.randn(10, 8, dtype=torch.float64)
    assert torch.allclose(lgcf_global(h[torch.randperm(10)]), lgcf_global(h), atol=1e-12)


def test_fuse_zero_gate_is_midpoint():
    vl, vg = torch.randn(16), torch.randn(16)
    z = lgcf_fuse(vl, vg, torch.zeros(16, 32), torch.zeros(16))
    assert torch.allclose(z, (vl + vg) / 2)


def test_fuse_saturated_gate_returns_local():
    vl, vg = torch.randn(16, dtype=torch.float64), torch.randn(16, dtype=torch.float64)
    z = lgcf_fuse(vl, vg, torch.zeros(16, 32, dtype=torch.float64), torch.full((16,), 50.0, dtype=torch.float64))
    assert (z - vl).abs().max() < 1e-8


def test_fuse_matches_sigmoid_oracle():
    rng = np.random.default_rng(4)
    vl, vg = rng.standard_normal(8), rng.standard_normal(8)
    W, b = rng.standard_normal((8, 16)), rng.standard_normal(8)
    expect = np.zeros(8)
    for i in range(8):
        s = sum(W[i, j] * v for j, v in enumerate(np.concatenate([vl, vg]))) + b[i]
        g = 1 / (1 + np.exp(-s))
        expect[i] = g * vl[i] + (1 - g) * vg[i]
    got = lgcf_fuse(*(torch.from_numpy(a) for a in (vl, vg, W, b))).numpy()
    assert np.abs(got - expect).max() < 1e-6


def test_fused_output_lies_between_channels():
    m = _seeded(LGCFConfig(in_dim=5, hidden_dim=7, unified_dim=6))
    x = torch.randn(3, 12, 5, dtype=torch.float64)
    h = m.mlp(x)
    vl = lgcf_local(h, m.conv.weight, m.conv.bias, m.conv.groups)
    vg = lgcf_global(h)
    z = m(x)
    assert ((z >= torch.minimum(vl, vg) - 1e-12) & (z <= torch.maximum(vl, vg) + 1e-12)).all()


@pytest.mark.parametrize("L", [1, 4, 37])
def test_output_width_is_independent_of_length(L):
    m = _seeded(LGCFConfig(in_dim=5, hidden_dim=7, unified_dim=6), dtype=torch.float32)
    assert m(torch.randn(2, L, 5)).shape == (2, 6)


def test_interior_spike_translation_invariance():
    D = 4
    m = _seeded(LGCFConfig(in_dim=D, hidden_dim=D, unified_dim=D, conv_kernel=3))
    w, b = m.conv.weight, m.conv.bias
    h1 = torch.zeros(20, D, dtype=torch.float64)
    h2 = h1.clone()
    h1[5] = 3.0
    h2[12] = 3.0
    assert torch.allclose(lgcf_local(h1, w, b, D), lgcf_local(h2, w, b, D))


@pytest.mark.parametrize("mode", ["gated", "mean", "local", "global"])
@pytest.mark.parametrize("encoder", ["mlp", "linear"])
@pytest.mark.parametrize("depthwise", [True, False])
def test_module_matches_oracle(mode, encoder, depthwise):
    cfg = LGCFConfig(in_dim=5, hidden_dim=6, unified_dim=4, mode=mode, encoder=encoder, depthwise=depthwise)
    m = _seeded(cfg, seed=3)
    x = torch.randn(9, 5, dtype=torch.float64)
    if encoder == "mlp":
        W1, b1, W2, b2 = (_np(p) for p in (m.mlp[0].weight, m.mlp[0].bias, m.mlp[2].weight, m.mlp[2].bias))
    else:
        W1, b1, W2, b2 = _np(m.mlp.weight), _np(m.mlp.bias), None, None
    conv_w = _np(m.conv.weight) if m.conv is not None else None
    conv_b = _np(m.conv.bias) if m.conv is not None else None
    groups = m.conv.groups if m.conv is not None else 1
    gw = _np(m.gate.weight) if m.gate is not None else None
    gb = _np(m.gate.bias) if m.gate is not None else None
    expect = oracles.lgcf(x.numpy(), W1, b1, W2, b2, conv_w, conv_b, groups, gw, gb, mode)
    assert np.abs(m(x).detach().numpy() - expect).max() < 1e-10
    assert sum(p.numel() for p in m.parameters()) == lgcf_param_count(cfg)


def test_config_invariants():
    with pytest.raises(ValueError):
        LGCFConfig(in_dim=4, conv_kernel=4)
    with pytest.raises(ValueError):
        LGCFConfig(in_dim=4, conv_kernel=3, conv_padding=0)
    assert LGCFConfig(in_dim=4, conv_kernel=5).conv_padding == 2


def test_wrong_input_width():
    m = _seeded(LGCFConfig(in_dim=5, hidden_dim=6, unified_dim=4))
    with pytest.raises(ShapeMismatch):
        m(torch.randn(3, 6, dtype=torch.float64))


@pytest.mark.parametrize("mode", ["gated", "mean", "local", "global"])
def test_gradients_match_finite_differences(mode):
    m = _seeded(LGCFConfig(in_dim=5, hidden_dim=6, unified_dim=4, mode=mode), seed=7)
    x = torch.randn(2, 6, 5, dtype=torch.float64)
    target = torch.randn(2, 4, dtype=torch.float64)
    failures = check_module(m, lambda: ((m(x) - target) ** 2).sum(), per_tensor=8)
    assert not failures, failures
