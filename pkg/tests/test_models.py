import numpy as np
import pytest
import torch

from uwgan.models import (
    Discriminator,
    DiscriminatorSpec,
    Generator,
    GeneratorSpec,
    count_parameters,
    spec_hash,
)

TINY_G = GeneratorSpec(layer_filters=(2, 4, 8, 16, 8, 4, 2, 1))
TINY_D = DiscriminatorSpec(encoder_filters=(2, 4, 8, 16, 32))


def _conv_params(filters, c_in=1, k=27):
    total = 0
    for c_out in filters:
        total += k * c_in * c_out + c_out
        c_in = c_out
    return total


def _disc_params(spec: DiscriminatorSpec) -> int:
    """Closed-form count derived from the level routing rules."""
    enc, dec = spec.encoder_filters, spec.decoder_filters
    n = 0
    prev = 1
    for c in enc:
        n += 64 * prev * c + c  # 4^3 stride-2 conv
        n += 27 * c * c + c  # level conv 0 reads the downsampled map
        n += 27 * (2 * c) * c + c  # level conv 1 reads both earlier maps
        prev = c
    bottleneck = spec.patch_size // 32
    n += prev * bottleneck**3 + 1
    skips = (enc[3], enc[2], enc[1], enc[0], 1)
    for d, s in zip(dec, skips):
        n += 64 * prev * d + d
        n += 27 * (d + s) * d + d
        n += 27 * (d + s + d) * d + d
        prev = d
    n += 27 * prev + 1
    return n


def test_generator_parameter_count_closed_form():
    g = Generator()
    filters = g.spec.layer_filters
    conv_params = sum(p.numel() for name, p in g.named_parameters() if not name.startswith("norms"))
    assert conv_params == _conv_params(filters)
    norm_params = sum(p.numel() for name, p in g.named_parameters() if name.startswith("norms"))
    assert norm_params == 2 * sum(filters[:7])
    assert count_parameters(g) == _conv_params(filters) + 2 * sum(filters[:7])


@pytest.mark.parametrize("spec", [TINY_D, DiscriminatorSpec().scaled(4), DiscriminatorSpec()])
def test_discriminator_parameter_count_closed_form(spec):
    assert count_parameters(Discriminator(spec)) == _disc_params(spec)


def test_generator_preserves_shape():
    g = Generator(GeneratorSpec().scaled(4))
    x = torch.rand(1, 1, 32, 32, 32)
    assert g(x).shape == x.shape
    g.eval()
    x64 = torch.rand(1, 1, 64, 64, 64)
    with torch.no_grad():
        assert g(x64).shape == x64.shape


def test_generator_zero_input_finite():
    g = Generator(TINY_G)
    out = g(torch.zeros(2, 1, 16, 16, 16))
    assert torch.isfinite(out).all()


def test_generator_rejects_bad_channels():
    with pytest.raises(ValueError):
        Generator(TINY_G)(torch.zeros(1, 2, 8, 8, 8))


def test_generator_is_differentiable_in_input():
    g = Generator(TINY_G).double()
    x = torch.rand(2, 1, 8, 8, 8, dtype=torch.float64, requires_grad=True)
    g(x).sum().backward()
    assert x.grad is not None and torch.isfinite(x.grad).all()


@pytest.mark.parametrize("bad", [(8, 32, 32, 32), (1, 32, 32, 32, 1)])
def test_generator_spec_validation(bad):
    with pytest.raises(ValueError):
        GeneratorSpec(layer_filters=bad)


def test_discriminator_heads():
    d = Discriminator(TINY_D)
    enc, dec = d(torch.rand(3, 1, 32, 32, 32))
    assert enc.shape == (3,)
    assert dec.shape == (3, 1, 32, 32, 32)


def test_discriminator_rejects_16_cube():
    with pytest.raises(ValueError, match="divisible"):
        Discriminator(TINY_D.model_copy(update={"patch_size": 16}))
    d = Discriminator(TINY_D)
    with pytest.raises(ValueError):
        d(torch.rand(1, 1, 16, 16, 16))


def test_duplicated_inputs_identical_outputs():
    d = Discriminator(TINY_D)
    x = torch.rand(1, 1, 32, 32, 32).repeat(2, 1, 1, 1, 1)
    enc, dec = d(x)
    assert torch.equal(enc[0], enc[1])
    assert torch.equal(dec[0], dec[1])


def test_bottleneck_is_one_voxel():
    d = Discriminator(TINY_D)
    seen = []
    d.enc_levels[-1].register_forward_hook(lambda m, i, o: seen.append(o.shape))
    d(torch.rand(1, 1, 32, 32, 32))
    assert seen[0][2:] == (1, 1, 1)


def test_dense_routing_structure():
    d = Discriminator(TINY_D)
    for row in d.routing():
        assert row["in_channels"] == sum(row["route_channels"])
        # dense: conv j reads every earlier map of its level
        n_inputs = 1 if row["level"].startswith("enc") else 2
        assert row["route"] == list(range(n_inputs + row["conv"]))


def test_unet_variant_routes_only_previous_map():
    d = Discriminator(TINY_D.model_copy(update={"variant": "unet"}))
    for row in d.routing():
        if row["conv"] > 0:
            assert len(row["route"]) == 1
    assert count_parameters(d) < count_parameters(Discriminator(TINY_D))


def test_classic_variant_has_no_map():
    enc, dec = Discriminator(TINY_D.model_copy(update={"variant": "classic"}))(torch.rand(2, 1, 32, 32, 32))
    assert enc.shape == (2,) and dec is None


def _sn_layers(module):
    for m in module.modules():
        if hasattr(m, "parametrizations") and hasattr(m.parametrizations, "weight"):
            yield m


@pytest.mark.parametrize("seed", range(5))
def test_spectral_norm_bound_after_warmup(seed):
    torch.manual_seed(seed)
    d = Discriminator(TINY_D)
    d.train()
    x = torch.rand(2, 1, 32, 32, 32)
    # one power iteration per training forward; small spectral gaps need a few hundred
    with torch.no_grad():
        for _ in range(300):
            d(x)
    d.eval()
    layers = list(_sn_layers(d))
    assert len(layers) == 5 + 10 + 5 + 10
    for m in layers:
        w = m.weight.detach()
        dim = 1 if isinstance(m, torch.nn.ConvTranspose3d) else 0
        mat = w.transpose(0, dim).reshape(w.shape[dim], -1)
        sigma = torch.linalg.matrix_norm(mat, ord=2).item()
        assert sigma <= 1 + 1e-2
    # the final head is the one un-normalised convolution
    assert not hasattr(d.head, "parametrizations")


def test_seeded_construction_is_deterministic():
    torch.manual_seed(3)
    a = Generator(TINY_G)
    torch.manual_seed(3)
    b = Generator(TINY_G)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_spec_hash_tracks_changes():
    assert spec_hash(TINY_G, TINY_D) == spec_hash(TINY_G, TINY_D)
    assert spec_hash(TINY_G, TINY_D) != spec_hash(GeneratorSpec(), TINY_D)


def test_weight_init_statistics():
    torch.manual_seed(0)
    g = Generator()
    w = g.convs[2].weight.detach().numpy()
    assert abs(w.mean()) < 1e-3
    assert np.std(w) == pytest.approx(0.02, rel=0.05)
    assert torch.count_nonzero(g.convs[2].bias) == 0
