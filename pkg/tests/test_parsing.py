import pytest
import torch

from secgan.domain import ContractError, validate_soft_mask
from secgan.parsing import ParserNet, load_parser, parse, pixel_accuracy, save_parser, train_parser

import oracles as O


def test_toy_parser_accuracy(toy_parser, toy_ds):
    acc = pixel_accuracy(toy_parser, toy_ds.image_tensor("test"), toy_ds.mask_tensor("test"))
    assert acc >= 0.95


def test_parse_output_is_soft_mask(tiny_parser):
    x = torch.rand(3, 3, 32, 32) * 2 - 1
    m = parse(tiny_parser, x)
    validate_soft_mask(m)
    assert torch.equal(m, parse(tiny_parser, x.clone()))


def test_parse_resolution_mismatch(tiny_parser):
    with pytest.raises(ContractError):
        parse(tiny_parser, torch.zeros(1, 3, 64, 64))


def test_parser_is_frozen_and_stays_in_eval(tiny_parser):
    assert tiny_parser.frozen
    assert not any(p.requires_grad for p in tiny_parser.parameters())
    tiny_parser.train()
    assert not tiny_parser.training


def test_gradient_flows_to_input(tiny_parser):
    gen = torch.Generator().manual_seed(0)
    x = (torch.rand(1, 3, 32, 32, generator=gen, dtype=torch.float64) * 2 - 1)
    p64 = ParserNet(32, tiny_parser.widths).double()
    p64.load_state_dict({k: v.double() if v.is_floating_point() else v for k, v in tiny_parser.state_dict().items()})
    p64.freeze()
    w = torch.randn(1, 12, 32, 32, generator=gen, dtype=torch.float64)
    f = lambda v: (parse(p64, v) * w).sum()
    xg = x.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(xg), xg)
    for i in torch.randperm(x.numel(), generator=gen)[:3].tolist():
        fd = O.finite_difference(f, x.clone(), i, 1e-5)
        assert abs(g.view(-1)[i].item()) > 0
        assert O.rel_err(g.view(-1)[i].item(), fd) <= 1e-2


def test_memorises_single_pair(small_ds):
    x = small_ds.image_tensor("train")[:1].repeat(8, 1, 1, 1)
    m = small_ds.mask_tensor("train")[:1].repeat(8, 1, 1)
    net = train_parser(x, m, epochs=150, batch_size=8, lr=5e-3, widths=(8, 8, 16, 16), seed=0)
    assert net.last_loss < 0.05
    assert pixel_accuracy(net, x[:1], m[:1]) == 1.0


def test_train_parser_errors(small_ds):
    x, m = small_ds.image_tensor("train"), small_ds.mask_tensor("train")
    with pytest.raises(ContractError):
        train_parser(x[:0], m[:0])
    with pytest.raises(ContractError):
        train_parser(x, m[:, :16, :16])


def test_checkpoint_round_trip(tiny_parser, tmp_path):
    save_parser(tiny_parser, tmp_path / "p.pt")
    back = load_parser(tmp_path / "p.pt", 32)
    x = torch.rand(2, 3, 32, 32) * 2 - 1
    assert torch.equal(parse(back, x), parse(tiny_parser, x))
    with pytest.raises(ContractError):
        load_parser(tmp_path / "p.pt", 64)
