import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch import nn

import oracles
from asymcycle.discriminators import (
    DiscriminatorSpec, build_patch_discriminator, forward_discriminate, min_input_size, score_map_size,
)
from asymcycle.generators import (
    DenseFusionBlock, GeneratorSpec, ResidualBlock, build_dense_fusion_generator, build_residual_generator,
    count_parameters, forward_generate,
)
from asymcycle.trainer import init_weights

SMALL = GeneratorSpec(base_channels=8, n_residual_blocks_F=2, n_residual_blocks_G=1, dense_layers=3, dense_growth=4)


def _init(net, seed=0):
    return init_weights(net, 0.02, torch.Generator().manual_seed(seed))


# --- generators -------------------------------------------------------------


def test_residual_generator_preserves_shape():
    net = _init(build_residual_generator())
    with torch.no_grad():
        assert forward_generate(net, torch.rand(3, 256, 256) * 2 - 1).shape == (3, 256, 256)


@pytest.mark.slow
def test_dense_fusion_generator_full_size_shape():
    net = _init(build_dense_fusion_generator())
    with torch.no_grad():
        assert forward_generate(net, torch.rand(3, 512, 512) * 2 - 1).shape == (3, 512, 512)


def test_residual_generator_count_matches_layer_sum():
    assert count_parameters(build_residual_generator()) == oracles.residual_generator_count(64, 6)


def test_dense_fusion_generator_count_matches_layer_sum():
    assert count_parameters(build_dense_fusion_generator()) == oracles.dense_fusion_generator_count(64, 2, 6, 288)


def test_fusion_input_channel_arithmetic():
    block = DenseFusionBlock(256, 4, 64)
    assert block.fusion_in_channels == 256 + 4 * 64 == 512
    assert block.fusion[0].in_channels == 512 and block.fusion[0].out_channels == 256


@pytest.mark.parametrize("field", ["n_residual_blocks_F", "n_residual_blocks_G", "dense_layers", "dense_growth"])
def test_zero_counts_rejected(field):
    with pytest.raises(ValueError):
        GeneratorSpec(**{field: 0})


def test_odd_base_channels_rejected():
    with pytest.raises(ValueError):
        GeneratorSpec(base_channels=7)


def test_indivisible_input_rejected():
    net = build_residual_generator(SMALL)
    with pytest.raises(ValueError, match="divisible by 4"):
        net(torch.zeros(1, 3, 18, 16))


@pytest.mark.parametrize("builder", [build_residual_generator, build_dense_fusion_generator])
def test_zero_output_layer_gives_zero_image(builder):
    net = _init(builder(SMALL))
    nn.init.zeros_(net.output.weight)
    nn.init.zeros_(net.output.bias)
    with torch.no_grad():
        out = forward_generate(net, torch.rand(3, 16, 16) * 2 - 1)
    assert torch.equal(out, torch.zeros_like(out))


@pytest.mark.parametrize("builder", [build_residual_generator, build_dense_fusion_generator])
def test_output_strictly_inside_unit_interval(builder):
    net = _init(builder(SMALL))
    with torch.no_grad():
        out = net(torch.randn(2, 3, 16, 16) * 3)
    assert out.abs().max() < 1


@pytest.mark.parametrize("builder", [build_residual_generator, build_dense_fusion_generator])
def test_weight_gradient_matches_central_difference(builder):
    torch.manual_seed(0)
    net = _init(builder(SMALL)).double()
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64) * 2 - 1
    net.zero_grad()
    net(x).mean().backward()
    for param in (net.encoder[1].weight, net.output.weight):
        for index in (0, 7, param.numel() - 1):
            analytic = param.grad.view(-1)[index].item()
            numeric = oracles.central_difference(lambda: net(x).mean(), param.data, index)
            assert oracles.relative_error(analytic, numeric) < 1e-3


def test_input_gradient_exists():
    net = _init(build_dense_fusion_generator(SMALL)).double()
    x = (torch.rand(1, 3, 8, 8, dtype=torch.float64) * 2 - 1).requires_grad_()
    net(x).sum().backward()
    assert x.grad.abs().sum() > 0


def test_zeroed_residual_block_is_identity():
    block = _init(ResidualBlock(8))
    with torch.no_grad():
        for m in block.modules():
            if isinstance(m, nn.Conv2d):
                m.weight.zero_()
    x = torch.randn(2, 8, 6, 6)
    assert torch.equal(block(x), x)


@pytest.mark.parametrize("layer", [1, 2, 3])
def test_dense_layer_ablation_confined_to_its_channels_onward(layer):
    block = _init(DenseFusionBlock(6, 3, 4))
    x = torch.randn(1, 6, 5, 5)
    with torch.no_grad():
        before = block.dense_features(x)
        block.layers[layer - 1][1].weight.zero_()
        after = block.dense_features(x)
    lo, hi = 6 + (layer - 1) * 4, 6 + layer * 4
    changed = (before - after).abs().amax(dim=(0, 2, 3)) > 0
    assert not changed[:lo].any()
    assert changed[lo:hi].all()
    if layer == 3:
        assert not changed[hi:].any()


@pytest.mark.parametrize("builder", [build_residual_generator, build_dense_fusion_generator])
def test_every_parameter_gets_gradient(builder):
    torch.manual_seed(1)
    net = _init(builder(SMALL), seed=3)
    net(torch.rand(2, 3, 16, 16) * 2 - 1).pow(2).mul(torch.randn(2, 3, 16, 16)).sum().backward()
    dead = [name for name, p in net.named_parameters() if p.grad is None or p.grad.abs().sum() == 0]
    assert dead == []


def test_conv_count_closed_form():
    assert count_parameters(nn.Conv2d(3, 8, 3)) == 3 * 3 * 3 * 8 + 8 == 224


def test_count_is_additive_over_children():
    net = build_dense_fusion_generator(SMALL)
    assert sum(count_parameters(c) for c in net.children()) == count_parameters(net) == net.parameter_count


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 12), st.integers(2, 12))
def test_generator_shape_property(h4, w4):
    net = build_dense_fusion_generator(SMALL)
    with torch.no_grad():
        assert net(torch.zeros(1, 3, 4 * h4, 4 * w4)).shape == (1, 3, 4 * h4, 4 * w4)


# --- discriminators -------------------------------------------------------------


@pytest.mark.parametrize("size,expected", [(512, 31), (256, 15)])
def test_score_map_size(size, expected):
    assert oracles.patch_size_trace(size) == expected
    assert score_map_size(size) == expected
    net = build_patch_discriminator(DiscriminatorSpec(base_channels=8))
    with torch.no_grad():
        assert forward_discriminate(net, torch.zeros(3, size, size)).shape == (1, expected, expected)


def test_discriminator_count_matches_layer_sum():
    assert count_parameters(build_patch_discriminator()) == oracles.patch_discriminator_count()


def test_discriminator_topology():
    net = build_patch_discriminator()
    convs = [m for m in net.modules() if isinstance(m, nn.Conv2d)]
    norms = [m for m in net.modules() if isinstance(m, nn.InstanceNorm2d)]
    assert [c.stride for c in convs] == [(2, 2)] * 4 + [(1, 1)]
    assert [c.out_channels for c in convs] == [64, 128, 256, 512, 1]
    assert all(c.kernel_size == (4, 4) for c in convs)
    assert len(norms) == 3
    assert not any(isinstance(m, nn.Sigmoid) for m in net.modules())


def test_channel_cap_at_eight_times_base():
    net = build_patch_discriminator(DiscriminatorSpec(base_channels=4, n_down_layers=6))
    convs = [m for m in net.modules() if isinstance(m, nn.Conv2d)]
    assert [c.out_channels for c in convs] == [4, 8, 16, 32, 32, 32, 1]


def test_discriminator_zero_head():
    net = _init(build_patch_discriminator(DiscriminatorSpec(base_channels=8)))
    nn.init.zeros_(net.model[-1].weight)
    with torch.no_grad():
        assert torch.equal(net(torch.rand(1, 3, 64, 64)), torch.zeros(1, 1, 3, 3))


def test_discriminator_too_small_input():
    net = build_patch_discriminator(DiscriminatorSpec(base_channels=8))
    assert min_input_size() == 32
    with pytest.raises(ValueError, match="at least 32"):
        net(torch.zeros(1, 3, 16, 16))


def _shifted_maps(net):
    torch.manual_seed(0)
    big = torch.rand(1, 3, 160, 176) * 2 - 1
    with torch.no_grad():
        a = net(big[..., :, :160])
        b = net(big[..., :, 16:176])
    # Shifting by 2**4 input pixels moves the map by one cell; compare away from the borders.
    return a[..., 2:-2, 3:-2], b[..., 2:-2, 2:-3]


def test_discriminator_conv_geometry_is_translation_equivariant():
    net = _init(build_patch_discriminator(DiscriminatorSpec(base_channels=8)))
    for i, m in enumerate(net.model):
        if isinstance(m, nn.InstanceNorm2d):
            net.model[i] = nn.Identity()
    a, b = _shifted_maps(net)
    assert torch.allclose(a, b, atol=1e-5)


def test_discriminator_with_instance_norm_is_nearly_equivariant():
    # Instance-norm statistics are global, so different crops normalize slightly differently.
    a, b = _shifted_maps(_init(build_patch_discriminator(DiscriminatorSpec(base_channels=8))))
    assert (a - b).abs().max() < 0.15
    assert torch.corrcoef(torch.stack([a.flatten(), b.flatten()]))[0, 1] > 0.98


def test_discriminator_gradient_matches_central_difference():
    net = _init(build_patch_discriminator(DiscriminatorSpec(base_channels=4, n_down_layers=2))).double()
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64) * 2 - 1
    net.zero_grad()
    net(x).mean().backward()
    for param in (net.model[0].weight, net.model[-1].weight):
        for index in (0, param.numel() // 2):
            analytic = param.grad.view(-1)[index].item()
            numeric = oracles.central_difference(lambda: net(x).mean(), param.data, index)
            assert oracles.relative_error(analytic, numeric) < 1e-3


@settings(max_examples=25, deadline=None)
@given(st.integers(32, 100), st.integers(32, 100))
def test_score_map_closed_form_property(h, w):
    net = build_patch_discriminator(DiscriminatorSpec(base_channels=4))
    with torch.no_grad():
        out = net(torch.zeros(1, 3, h, w))
    assert out.shape == (1, 1, oracles.patch_size_trace(h), oracles.patch_size_trace(w))


def test_leaky_relu_option():
    net = build_patch_discriminator(DiscriminatorSpec(activation="leaky_relu"))
    assert any(isinstance(m, nn.LeakyReLU) for m in net.modules())
    with pytest.raises(ValueError):
        DiscriminatorSpec(activation="gelu")
    with pytest.raises(ValueError):
        DiscriminatorSpec(n_down_layers=0)
