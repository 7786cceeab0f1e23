import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from cytosynth.errors import ConfigError, DomainError
from cytosynth.generator import (SGC, Generator, GeneratorSpec, MappingNetwork, UpBlock, adain, count_parameters,
                               sgc_apply, sgc_pool)


def test_mapping_shape_and_determinism():
    m = MappingNetwork(5)
    y = torch.tensor([0, 3])
    c1, c2 = m(y), m(y)
    assert c1.shape == (2, 128)
    assert torch.equal(c1, c2)
    linears = [l for l in m.net if isinstance(l, nn.Linear)]
    assert len(linears) == 4 and all(l.out_features == 128 for l in linears)


def test_mapping_embeddings_distinct():
    torch.manual_seed(7)
    c = MappingNetwork(5)(torch.arange(5))
    for i in range(5):
        for j in range(i + 1, 5):
            assert (c[i] - c[j]).abs().max() > 0


def test_mapping_rejects_bad_label():
    with pytest.raises(DomainError):
        MappingNetwork(5)(torch.tensor([5]))
    with pytest.raises(DomainError):
        MappingNetwork(5)(torch.tensor([-1]))


def test_adain_standardizes():
    x = torch.randn(3, 4, 8, 8) * 5 + 2
    out = adain(x, torch.ones(4), torch.zeros(4))
    assert torch.allclose(out.mean(dim=(2, 3)), torch.zeros(3, 4), atol=1e-4)
    assert torch.allclose(out.var(dim=(2, 3), unbiased=False), torch.ones(3, 4), atol=1e-4)


def test_adain_affine_law():
    x = torch.randn(2, 3, 16, 16)
    s = torch.tensor([2.0, -0.5, 1.5])
    b = torch.tensor([0.3, -1.0, 4.0])
    out = adain(x, s, b)
    assert torch.allclose(out.mean(dim=(2, 3)), b.expand(2, 3), atol=1e-4)
    assert torch.allclose(out.std(dim=(2, 3), unbiased=False), s.abs().expand(2, 3), atol=1e-4)


def test_adain_constant_channel_gives_bias():
    x = torch.full((1, 2, 4, 4), 3.0)
    out = adain(x, torch.tensor([5.0, 5.0]), torch.tensor([0.25, -2.0]))
    assert torch.allclose(out[0, 0], torch.full((4, 4), 0.25))
    assert torch.allclose(out[0, 1], torch.full((4, 4), -2.0))


def test_adain_length_mismatch():
    with pytest.raises(DomainError):
        adain(torch.randn(1, 3, 4, 4), torch.ones(2), torch.zeros(3))


@settings(max_examples=40, deadline=None)
@given(
    std=st.floats(0.032, 20.0),
    shift=st.floats(-10, 10),
    scale=st.floats(-3, 3).filter(lambda v: abs(v) > 1e-3),
    bias=st.floats(-3, 3),
    seed=st.integers(0, 2**16),
)
def test_adain_moment_law_property(std, shift, scale, bias, seed):
    # std shrinks by sqrt(var / (var + eps)); eps must be << 1e-3 * var / |scale| for a 1e-3 bound
    g = torch.Generator().manual_seed(seed)
    x = (torch.randn(1, 1, 16, 16, generator=g, dtype=torch.float64) * std + shift)
    out = adain(x, torch.tensor([scale], dtype=torch.float64), torch.tensor([bias], dtype=torch.float64), eps=1e-7)
    assert abs(out.mean().item() - bias) < 1e-3
    assert abs(out.std(unbiased=False).item() - abs(scale)) < 1e-3


def test_adain_moment_law_small_variance():
    # spatial variance just above 1e-3; eps must be small relative to it for the law to hold to 1e-3
    x = torch.randn(2, 3, 32, 32, dtype=torch.float64)
    x = x / x.std(dim=(2, 3), unbiased=False, keepdim=True) * (1.2e-3) ** 0.5
    out = adain(x, torch.tensor([1.0, 0.5, 2.0], dtype=torch.float64), torch.zeros(3, dtype=torch.float64), eps=1e-7)
    assert torch.allclose(out.std(dim=(2, 3), unbiased=False), torch.tensor([1.0, 0.5, 2.0], dtype=torch.float64).expand(2, 3), atol=1e-3)


def test_up_block_shape_and_conditioning():
    blk = UpBlock(16, 8, 128)
    x = torch.randn(2, 16, 4, 4)
    c1, c2 = torch.randn(2, 128), torch.randn(2, 128)
    out1, out2 = blk(x, c1), blk(x, c2)
    assert out1.shape == (2, 8, 8, 8)
    assert (out1 - out2).abs().max() > 0


def test_up_block_without_mapping_ignores_embedding():
    blk = UpBlock(16, 8, None)
    x = torch.randn(2, 16, 4, 4)
    assert torch.equal(blk(x, torch.randn(2, 128)), blk(x, None))


def test_sgc_pool_uniform_logits_is_average():
    sgc = SGC(8, 4)
    nn.init.zeros_(sgc.attn.weight)
    nn.init.zeros_(sgc.attn.bias)
    low = torch.randn(3, 8, 5, 5)
    assert torch.allclose(sgc.pool(low), low.mean(dim=(2, 3)), atol=1e-6)


def test_sgc_pool_single_position():
    sgc = SGC(8, 4)
    low = torch.randn(2, 8, 1, 1)
    assert torch.allclose(sgc.pool(low), low[:, :, 0, 0], atol=1e-6)


def test_sgc_pool_matches_brute_force():
    torch.manual_seed(3)
    attn = nn.Conv2d(6, 1, 1)
    low = torch.randn(2, 6, 4, 3, dtype=torch.float64)
    attn = attn.double()
    got = sgc_pool(low, attn)
    w = attn.weight.view(-1).tolist()
    b = attn.bias.item()
    import math
    for n in range(2):
        logits = []
        for h in range(4):
            for x in range(3):
                logits.append(sum(w[c] * low[n, c, h, x].item() for c in range(6)) + b)
        m = max(logits)
        ex = [math.exp(v - m) for v in logits]
        Z = sum(ex)
        assert abs(sum(e / Z for e in ex) - 1.0) < 1e-6
        for c in range(6):
            expected = 0.0
            i = 0
            for h in range(4):
                for x in range(3):
                    expected += ex[i] / Z * low[n, c, h, x].item()
                    i += 1
            assert abs(got[n, c].item() - expected) < 1e-6


def test_sgc_gates_range_and_saturation():
    sgc = SGC(8, 4)
    ctx = torch.randn(5, 8)
    g = sgc.gates(ctx)
    assert ((g > 0) & (g < 1)).all()
    nn.init.zeros_(sgc.transform[-1].weight)
    nn.init.constant_(sgc.transform[-1].bias, 100.0)
    high = torch.randn(5, 4, 6, 6)
    assert torch.equal(sgc.merge(high, ctx), high)


def test_sgc_apply_scalar_recompute():
    sgc = SGC(8, 4)
    high = torch.randn(2, 4, 6, 6)
    ctx = torch.randn(2, 8)
    out = sgc.merge(high, ctx)
    gate = sgc.gates(ctx)
    for (b, c, h, w) in [(0, 0, 0, 0), (1, 3, 5, 2), (0, 2, 3, 4), (1, 1, 1, 5)]:
        assert abs(out[b, c, h, w].item() - high[b, c, h, w].item() * gate[b, c].item()) < 1e-6


def test_sgc_context_mismatch():
    sgc = SGC(8, 4)
    with pytest.raises(ConfigError):
        sgc.gates(torch.randn(2, 6))
    with pytest.raises(ConfigError):
        sgc_apply(torch.randn(2, 4, 3, 3), torch.rand(2, 5))


def test_spec_validation():
    with pytest.raises(ConfigError):
        GeneratorSpec(sgc_pairs=[(64, 8)])
    with pytest.raises(ConfigError):
        GeneratorSpec(sgc_pairs=[(8, 512)])
    with pytest.raises(ConfigError):
        GeneratorSpec(channel_schedule={4: 8, 8: 8})
    with pytest.raises(ConfigError):
        GeneratorSpec(resolution=48)


def test_small_generator_contract(small_g):
    z = torch.randn(2, 128)
    y = torch.tensor([0, 2])
    out = small_g(z, y)
    assert out.shape == (2, 3, 64, 64)
    assert out.abs().max() <= 1
    assert torch.equal(out, small_g(z, y))


def test_generator_batch_mismatch(small_g):
    with pytest.raises(DomainError):
        small_g(torch.randn(3, 128), torch.tensor([0, 1]))


def test_generator_label_effect(small_g):
    z = torch.randn(1, 128).expand(3, 128)
    out = small_g(z, torch.arange(3))
    for i in range(3):
        for j in range(i + 1, 3):
            assert (out[i] - out[j]).abs().mean() > 0


def test_generator_without_mapping_is_label_invariant():
    G = Generator(GeneratorSpec(resolution=32, num_classes=3, width=0.125, use_mapping=False))
    z = torch.randn(1, 128).expand(3, 128)
    out = G(z, torch.arange(3))
    assert torch.equal(out[0], out[1]) and torch.equal(out[1], out[2])


def test_ablation_parameter_counts():
    full = Generator(GeneratorSpec(resolution=64, num_classes=3, width=0.25))
    no_map = Generator(GeneratorSpec(resolution=64, num_classes=3, width=0.25, use_mapping=False))
    no_sgc = Generator(GeneratorSpec(resolution=64, num_classes=3, width=0.25, use_sgc=False))
    mapping = count_parameters(full.mapping)
    affine = sum(count_parameters(b.affine) for b in full.blocks)
    learned_norm = sum(2 * b.out_ch for b in full.blocks)
    assert count_parameters(no_map) == count_parameters(full) - mapping - affine + learned_norm
    assert count_parameters(no_sgc) == count_parameters(full) - count_parameters(full.sgc)
    assert count_parameters(full.sgc) > 0
    assert len(no_sgc.sgc) == 0 and no_map.mapping is None


def test_gradient_flow_small(small_g):
    out = small_g(torch.randn(4, 128), torch.tensor([0, 1, 2, 1]))
    (out * torch.randn_like(out)).sum().backward()
    for name, p in small_g.named_parameters():
        assert p.grad is not None and p.grad.abs().max() > 0, name
