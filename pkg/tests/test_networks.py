import pytest
import torch

from secgan.domain import ContractError
from secgan.losses import adv_loss_g, cls_loss, rec_loss_rgb, rec_loss_seg, sc_loss_seg
from secgan.networks import (build_discriminator, build_generator, count_parameters, load_network,
                             save_network)

SMALL = {"stargan": dict(conv_dim=8, n_res=1), "attgan": dict(conv_dim=8, max_dim=64)}
SMALL_D = {"stargan": dict(conv_dim=8), "attgan": dict(conv_dim=8, max_dim=64, fc_dim=32)}
CH = {"rgb": 3, "seg": 12}


def _input(modality, b, h, gen=None):
    if modality == "rgb":
        return torch.rand(b, 3, h, h, generator=gen) * 2 - 1
    return torch.softmax(torch.randn(b, 12, h, h, generator=gen), 1)


@pytest.mark.parametrize("backbone", ["stargan", "attgan"])
@pytest.mark.parametrize("modality", ["rgb", "seg"])
@pytest.mark.parametrize("h", [32, 64, 128])
def test_shape_round_trip(backbone, modality, h):
    G = build_generator(backbone, modality, 5, h, **SMALL[backbone])
    D = build_discriminator(backbone, modality, 5, h, **SMALL_D[backbone])
    x = _input(modality, 2, h)
    y = torch.tensor([[1.0, 0, -1, 0, 1], [0, 0, 0, 0, 0]])
    out = G(x, y)
    assert out.shape == x.shape
    if modality == "rgb":
        assert out.min() >= -1 and out.max() <= 1
    else:
        assert torch.allclose(out.sum(1), torch.ones(2, h, h), atol=1e-5)
        assert out.min() >= 0
    d = D(out)
    assert d.cls.shape == (2, 5)
    assert ((d.cls > 0) & (d.cls < 1)).all()


def test_discriminator_head_shapes_at_128():
    x = _input("seg", 2, 128)
    d = build_discriminator("stargan", "seg", 13, 128, conv_dim=8)(x)
    assert d.adv.shape == (2, 1, 2, 2) and d.cls.shape == (2, 13)
    d = build_discriminator("stargan", "rgb", 13, 128, conv_dim=8)(_input("rgb", 2, 128))
    assert d.adv.shape == (2, 1, 2, 2) and d.cls.shape == (2, 13)
    d = build_discriminator("attgan", "seg", 13, 128, **SMALL_D["attgan"])(x)
    assert d.adv.shape == (2, 1) and d.cls.shape == (2, 13)


# Full-width parameter counts at 128x128 with 13 attributes, computed layer by layer
# and frozen. The RGB generators must stay near their nominal 8M and 43M (+/-15%).
FROZEN = {
    ("stargan", "rgb", "G"): 8_455_616, ("stargan", "seg", "G"): 8_512_064,
    ("attgan", "rgb", "G"): 43_459_200, ("attgan", "seg", "G"): 43_486_848,
    ("stargan", "rgb", "D"): 44_827_584, ("stargan", "seg", "D"): 44_836_800,
    ("attgan", "rgb", "D"): 44_717_006, ("attgan", "seg", "D"): 44_726_222,
}


def _stargan_g_closed_form(c_in, c_out, n_a=13, d=64, n_res=6):
    conv = lambda ci, co, k: ci * co * k * k
    n = conv(c_in + n_a, d, 7) + 2 * d                               # conv + IN affine
    n += conv(d, 2 * d, 4) + 4 * d + conv(2 * d, 4 * d, 4) + 8 * d
    n += n_res * 2 * (conv(4 * d, 4 * d, 3) + 8 * d)
    n += conv(4 * d, 2 * d, 4) + 4 * d + conv(2 * d, d, 4) + 2 * d
    return n + conv(d, c_out, 7)


@pytest.mark.parametrize("key", sorted(FROZEN))
def test_parameter_counts(key):
    backbone, modality, role = key
    build = build_generator if role == "G" else build_discriminator
    assert count_parameters(build(backbone, modality, 13, 128)) == FROZEN[key]


def test_nominal_sizes_within_tolerance():
    assert abs(FROZEN["stargan", "rgb", "G"] - 8e6) <= 0.15 * 8e6
    assert abs(FROZEN["attgan", "rgb", "G"] - 43e6) <= 0.15 * 43e6
    assert _stargan_g_closed_form(3, 3) == FROZEN["stargan", "rgb", "G"]
    assert _stargan_g_closed_form(12, 12) == FROZEN["stargan", "seg", "G"]


def test_seg_rgb_parity_deltas():
    # only the first conv's input channels and the last layer's output channels differ (9 channels each)
    assert FROZEN["stargan", "seg", "G"] - FROZEN["stargan", "rgb", "G"] == 9 * 64 * 49 * 2
    assert FROZEN["attgan", "seg", "G"] - FROZEN["attgan", "rgb", "G"] == 9 * 64 * 16 + 9 * 128 * 16
    for b in ("stargan", "attgan"):
        assert FROZEN[b, "seg", "D"] - FROZEN[b, "rgb", "D"] == 9 * 64 * 16


def test_attgan_skip_channels():
    G = build_generator("attgan", "rgb", 13, 128)
    assert G.decoder[1][0].in_channels == 1536 + 13
    assert G.decoder[0][0].in_channels == 1024 + 13


def test_errors():
    with pytest.raises(ContractError):
        build_generator("stargan", "rgb", 5, 30)
    with pytest.raises(ContractError):
        build_generator("attgan", "rgb", 5, 48)
    with pytest.raises(ContractError):
        build_generator("cyclegan", "rgb", 5, 32)
    with pytest.raises(ContractError):
        build_discriminator("stargan", "rgb", 5, 32, n_layers=6)
    G = build_generator("stargan", "rgb", 5, 32, **SMALL["stargan"])
    with pytest.raises(ContractError):
        G(_input("seg", 1, 32), torch.zeros(1, 5))
    with pytest.raises(ContractError):
        G(_input("rgb", 1, 32), torch.zeros(1, 4))


@pytest.mark.parametrize("backbone", ["stargan", "attgan"])
def test_determinism_and_checkpoint_rebuild(backbone, tmp_path):
    a = build_generator(backbone, "seg", 5, 32, seed=4, **SMALL[backbone]).eval()
    b = build_generator(backbone, "seg", 5, 32, seed=4, **SMALL[backbone]).eval()
    x, y = _input("seg", 2, 32), torch.zeros(2, 5)
    with torch.no_grad():
        assert torch.equal(a(x, y), b(x, y))
        assert torch.equal(a(x, y), a(x, y))
    save_network(a, tmp_path / "g.pt")
    c = load_network(tmp_path / "g.pt").eval()
    with torch.no_grad():
        assert torch.equal(a(x, y), c(x, y))


def test_stargan_critic_has_no_cross_example_coupling():
    D = build_discriminator("stargan", "rgb", 5, 32, conv_dim=8)
    x = _input("rgb", 3, 32)
    one = D(x[:1])
    both = D(torch.cat([x, x]))
    assert torch.allclose(both.adv[:1], one.adv, atol=1e-6)
    assert torch.allclose(both.adv[3:4], one.adv, atol=1e-6)


@pytest.mark.parametrize("backbone", ["stargan", "attgan"])
def test_gradient_reaches_every_generator_parameter(backbone):
    gen = torch.Generator().manual_seed(0)
    for modality in ("rgb", "seg"):
        G = build_generator(backbone, modality, 5, 32, **SMALL[backbone])
        D = build_discriminator(backbone, modality, 5, 32, **SMALL_D[backbone])
        x = _input(modality, 4, 32, gen)
        y_trg = (torch.rand(4, 5, generator=gen) > 0.5).float()
        y_diff = y_trg - (torch.rand(4, 5, generator=gen) > 0.5).float()
        out = G(x, y_diff)
        rec = G(x, torch.zeros_like(y_diff))
        d = D(out)
        loss = adv_loss_g(d.adv) + cls_loss(d.cls, y_trg)
        if modality == "rgb":
            loss = loss + rec_loss_rgb(x, rec)
        else:
            loss = loss + rec_loss_seg(x, rec) + sc_loss_seg(x, out)
        loss.backward()
        for name, p in G.named_parameters():
            assert p.grad is not None and p.grad.norm() > 0, name
