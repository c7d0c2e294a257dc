import numpy as np
import pytest
import torch

import oracles
from cases import attention_invariant_violations, identity_reduction_error, reduced_sca
from gradcheck import check_module
from ramf.errors import IndexOutOfRange, NonFiniteLogit, OddHeadCount, ShapeMismatch
from ramf.sca import (
    SCA,
    AttentionTrace,
    ConcatFusion,
    CrossAttentionFusion,
    MultiHeadSelfAttention,
    SCAConfig,
    chc_apply,
    extract_contribution,
    sca_param_count,
    smc_mix,
    std_attn_param_count,
)


def _n_params(m):
    return sum(p.numel() for p in m.parameters())


# -- CHC ------------------------------------------------------------------------


def test_chc_delta_kernel_is_identity():
    logits = torch.randn(2, 4, 5, 5)
    k = torch.zeros(3, 3)
    k[1, 1] = 1
    assert torch.equal(chc_apply(logits, k, torch.zeros(1)), logits)


def test_chc_all_ones_hand_count():
    out = chc_apply(torch.ones(1, 3, 3), torch.ones(3, 3), torch.zeros(1))[0]
    assert out.tolist() == [[4, 6, 4], [6, 9, 6], [4, 6, 4]]


def test_chc_matches_loop_oracle():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((3, 6, 6))
    kernel = rng.standard_normal((3, 3))
    bias = rng.standard_normal()
    got = chc_apply(torch.from_numpy(logits), torch.from_numpy(kernel), torch.tensor([bias], dtype=torch.float64)).numpy()
    for h in range(3):
        assert np.abs(got[h] - oracles.conv2d_same(logits[h], kernel, bias)).max() < 1e-6


def test_chc_per_head_kernels():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((4, 5, 5))
    kernels = rng.standard_normal((4, 3, 3))
    bias = rng.standard_normal(4)
    got = chc_apply(torch.from_numpy(logits), torch.from_numpy(kernels), torch.from_numpy(bias)).numpy()
    for h in range(4):
        assert np.abs(got[h] - oracles.conv2d_same(logits[h], kernels[h], bias[h])).max() < 1e-6


def test_chc_rejects_bad_shapes():
    with pytest.raises(ShapeMismatch):
        chc_apply(torch.ones(2, 3, 4), torch.ones(3, 3), torch.zeros(1))
    with pytest.raises(ShapeMismatch):
        chc_apply(torch.ones(2, 3, 3), torch.ones(3, 2), torch.zeros(1))


# -- SMC ------------------------------------------------------------------------


def test_smc_identity():
    A = torch.rand(4, 3, 3)
    assert torch.equal(smc_mix(A, torch.eye(2).expand(2, 2, 2)), A)


def test_smc_swap():
    A = torch.rand(4, 3, 3)
    swap = torch.tensor([[0.0, 1.0], [1.0, 0.0]]).expand(2, 2, 2)
    assert torch.equal(smc_mix(A, swap), A[[1, 0, 3, 2]])


def test_smc_matches_pair_oracle():
    rng = np.random.default_rng(2)
    A = rng.random((6, 4, 4))
    M = rng.standard_normal((3, 2, 2))
    got = smc_mix(torch.from_numpy(A), torch.from_numpy(M)).numpy()
    assert np.abs(got - oracles.pair_mix(A, M)).max() < 1e-6


def test_smc_odd_heads():
    with pytest.raises(OddHeadCount):
        smc_mix(torch.rand(3, 2, 2), torch.eye(2).expand(1, 2, 2))
    with pytest.raises(OddHeadCount):
        SCAConfig(model_dim=6, num_heads=3)
    SCAConfig(model_dim=6, num_heads=3, smc=False)  # allowed without mixing


# -- forward --------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(25))
def test_identity_reduction_matches_vanilla_attention(seed):
    assert identity_reduction_error(seed) < 1e-5


def test_single_token():
    torch.manual_seed(0)
    sca = SCA(SCAConfig(model_dim=8, num_heads=2)).double()
    with torch.no_grad():
        sca.smc_mixers.copy_(torch.eye(2).expand_as(sca.smc_mixers))
    z = torch.randn(1, 1, 8, dtype=torch.float64)
    y, tr = sca(z)
    assert torch.equal(tr.A_mixed, tr.A)
    assert torch.equal(tr.A, torch.ones(1, 2, 1, 1, dtype=torch.float64))
    expect = sca.gn(sca.out_proj(sca.v_proj(z))[0]).unsqueeze(0)
    assert torch.allclose(y, expect, atol=1e-12)


def test_causal_first_row_attends_to_itself():
    torch.manual_seed(1)
    _, tr = SCA(SCAConfig(model_dim=8, num_heads=2, init_noise=0.3))(torch.randn(3, 4, 8))
    assert torch.equal(tr.A[:, :, 0, 0], torch.ones(3, 2))
    assert torch.equal(tr.A[:, :, 0, 1:], torch.zeros(3, 2, 3))


@pytest.mark.parametrize("seed", range(40))
def test_attention_invariants(seed):
    row_err, leak = attention_invariant_violations(seed)
    assert row_err <= 1e-5 and leak == 0.0


def test_groupnorm_oracle_with_affine():
    torch.manual_seed(3)
    sca = SCA(SCAConfig(model_dim=8, num_heads=4)).double()
    with torch.no_grad():
        sca.gn.weight.uniform_(0.5, 1.5)
        sca.gn.bias.uniform_(-1, 1)
    gamma, beta = sca.gn.weight.detach().numpy().copy(), sca.gn.bias.detach().numpy().copy()
    z = torch.randn(2, 3, 8, dtype=torch.float64)
    y, _ = sca(z)
    gn = sca.gn
    sca.gn = None
    raw, _ = sca(z)
    sca.gn = gn
    expect = oracles.group_norm_rows(raw.detach().reshape(6, 8).numpy(), 4, gamma, beta)
    assert np.abs(y.detach().reshape(6, 8).numpy() - expect).max() < 1e-10


def test_permutation_equivariance_without_mask():
    sca = reduced_sca(8, 2, causal=False, seed=4)
    z = torch.randn(2, 5, 8, dtype=torch.float64)
    perm = torch.randperm(5)
    y, _ = sca(z)
    yp, _ = sca(z[:, perm])
    assert torch.allclose(yp, y[:, perm], atol=1e-12)


def test_nonfinite_logits_raise():
    sca = SCA(SCAConfig(model_dim=4, num_heads=2))
    with pytest.raises(NonFiniteLogit):
        sca(torch.full((1, 2, 4), 1e30))


def test_shape_errors():
    with pytest.raises(ShapeMismatch):
        SCA(SCAConfig(model_dim=8, num_heads=2))(torch.randn(2, 3, 6))
    with pytest.raises(ValueError):
        SCAConfig(model_dim=10, num_heads=4)


# -- contribution ---------------------------------------------------------------


def test_contribution_single_source():
    sca = reduced_sca(4, 2, causal=True, seed=0)
    _, tr = sca(torch.randn(1, 1, 4, dtype=torch.float64))
    assert extract_contribution(AttentionTrace(tr.A[0], tr.A_mixed[0], True), 0) == 1.0


def test_contribution_uniform_attention():
    sca = reduced_sca(4, 2, causal=False, seed=0)
    with torch.no_grad():
        sca.q_proj.weight.zero_()
    _, tr = sca(torch.randn(1, 3, 4, dtype=torch.float64))
    single = AttentionTrace(tr.A[0], tr.A_mixed[0], False)
    for j in range(3):
        assert extract_contribution(single, j) == pytest.approx(1 / 3, abs=1e-12)


@pytest.mark.parametrize("causal", [True, False])
def test_contribution_matches_loop_average(causal):
    rng = np.random.default_rng(5)
    H, N = 4, 5
    A = rng.random((H, N, N))
    Am = rng.random((H, N, N))
    if causal:
        Am = Am * np.tril(np.ones((N, N)))
    tr = AttentionTrace(torch.from_numpy(A), torch.from_numpy(Am), causal)
    for j in range(N):
        vals = [Am[h, i, j] for h in range(H) for i in range(N) if not causal or i >= j]
        assert abs(extract_contribution(tr, j) - sum(vals) / len(vals)) < 1e-9


def test_contribution_batched_and_bounds():
    sca = reduced_sca(4, 2, causal=True, seed=1)
    _, tr = sca(torch.randn(3, 4, 4, dtype=torch.float64))
    assert extract_contribution(tr, 2).shape == (3,)
    with pytest.raises(IndexOutOfRange):
        extract_contribution(tr, 4)
    with pytest.raises(IndexOutOfRange):
        extract_contribution(tr, -1)


def test_trace_json_layout():
    sca = reduced_sca(4, 2, causal=True, seed=1)
    _, tr = sca(torch.randn(1, 3, 4, dtype=torch.float64))
    d = tr.to_json()
    assert d["causal"] is True
    assert np.array(d["A"]).shape == (1, 2, 3, 3) and np.array(d["A_mixed"]).shape == (1, 2, 3, 3)


# -- parameter counts and alternatives -------------------------------------------------


@pytest.mark.parametrize("chc", ["shared", "per_head", "none"])
@pytest.mark.parametrize("smc", [True, False])
def test_param_count_closed_form(chc, smc):
    cfg = SCAConfig(model_dim=16, num_heads=4, chc=chc, smc=smc)
    assert _n_params(SCA(cfg)) == sca_param_count(cfg)


def test_published_layer_formula():
    D, H = 256, 4
    formula = 3 * H * D * (D // H) + D * D + D + 9 + 1 + H * 2 + 2 * D
    assert sca_param_count(SCAConfig()) == formula == _n_params(SCA())


def test_std_attn_matches_reduced_sca():
    sca = reduced_sca(8, 2, causal=True, seed=6)
    std = MultiHeadSelfAttention(SCAConfig(model_dim=8, num_heads=2, groupnorm=False)).double()
    with torch.no_grad():
        for name in ("q_proj", "k_proj", "v_proj", "out_proj"):
            getattr(std, name).weight.copy_(getattr(sca, name).weight)
        for name in ("q_proj", "k_proj", "v_proj"):
            getattr(std, name).bias.zero_()
        std.out_proj.bias.copy_(sca.out_proj.bias)
    z = torch.randn(3, 5, 8, dtype=torch.float64)
    assert torch.allclose(std(z)[0], sca(z)[0], atol=1e-12)
    assert _n_params(std) == std_attn_param_count(std.cfg)


def test_std_attn_has_more_parameters_than_sca():
    assert std_attn_param_count(SCAConfig()) > sca_param_count(SCAConfig())


def test_cross_attention_and_concat_shapes():
    cfg = SCAConfig(model_dim=8, num_heads=2)
    y, tr = CrossAttentionFusion(cfg, 3)(torch.randn(2, 3, 8))
    assert y.shape == (2, 3, 8) and tr is None
    y, tr = ConcatFusion(cfg, 3)(torch.randn(2, 3, 8))
    assert y.shape == (2, 1, 8) and tr is None
    with pytest.raises(ShapeMismatch):
        CrossAttentionFusion(cfg, 1)


@pytest.mark.parametrize("N,H,chc,smc", [(2, 2, "shared", True), (3, 4, "shared", True),
                                          (4, 4, "per_head", True), (3, 2, "none", False)])
def test_gradients_match_finite_differences(N, H, chc, smc):
    torch.manual_seed(N * 10 + H)
    sca = SCA(SCAConfig(model_dim=2 * H, num_heads=H, chc=chc, smc=smc, init_noise=0.3)).double()
    z = torch.randn(2, N, 2 * H, dtype=torch.float64)
    target = torch.randn(2, N, 2 * H, dtype=torch.float64)
    failures = check_module(sca, lambda: ((sca(z)[0] - target) ** 2).sum(), per_tensor=8)
    assert not failures, failures
