import itertools

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from secgan import domain as D

import oracles as O


def test_taxonomy():
    assert D.SEGMENTS == ("skin", "eyebrows", "eyes", "eyeglasses", "ears", "earrings", "nose", "mouth",
                          "lips", "neck", "hair", "others")
    assert D.N_SEGMENTS == 12
    assert len(D.CELEBA_ATTRIBUTES) == 13


@pytest.mark.parametrize("src,trg,diff", [
    ([1, 0, 1], [0, 0, 1], [-1, 0, 0]),
    ([0, 1], [0, 1], [0, 0]),
    ([1, 1, 0, 0], [0, 1, 1, 0], [-1, 0, 1, 0]),
])
def test_label_diff_examples(src, trg, diff):
    assert D.label_diff(src, trg).tolist() == diff
    assert diff == O.label_diff(src, trg)


def test_label_diff_length_mismatch():
    with pytest.raises(D.ContractError):
        D.label_diff([0, 1], [0, 1, 1])


bits = st.lists(st.integers(0, 1), min_size=1, max_size=13)


@given(bits)
def test_label_diff_self_is_zero(y):
    assert not D.label_diff(y, y).any()


@given(st.integers(1, 13).flatmap(lambda n: st.tuples(st.lists(st.integers(0, 1), min_size=n, max_size=n),
                                                       st.lists(st.integers(0, 1), min_size=n, max_size=n))))
def test_label_diff_range(pair):
    d = D.label_diff(*pair)
    assert set(d.tolist()) <= {-1.0, 0.0, 1.0}
    assert bool(d.any()) == (pair[0] != pair[1])


def test_to_one_hot_examples():
    m = torch.zeros(1, 12, 1, 1)
    m[0, :3, 0, 0] = torch.tensor([0.2, 0.5, 0.3])
    assert D.to_one_hot(m)[0, :, 0, 0].argmax() == 1
    tie = torch.zeros(1, 12, 1, 1)
    tie[0, :2, 0, 0] = 0.5
    assert D.to_one_hot(tie)[0, :, 0, 0].tolist() == [1.0] + [0.0] * 11


def test_tie_rule_exhaustive_two_channel_sweep():
    grid = [i / 8 for i in range(9)]
    for a, b in itertools.product(grid, grid):
        m = torch.zeros(1, 12, 1, 1)
        m[0, 0, 0, 0], m[0, 1, 0, 0] = a, b
        expected = 0 if a >= b else 1
        assert int(D.to_one_hot(m)[0, :, 0, 0].argmax()) == expected


def test_to_one_hot_detaches():
    m = torch.softmax(torch.randn(1, 12, 2, 2, requires_grad=True), 1)
    assert not D.to_one_hot(m).requires_grad


soft_masks = st.integers(0, 2**31 - 1).map(
    lambda s: torch.softmax(torch.randn(2, 12, 3, 3, generator=torch.Generator().manual_seed(s)), 1))


@settings(max_examples=50)
@given(soft_masks)
def test_to_one_hot_properties(m):
    oh = D.to_one_hot(m)
    assert oh.shape == m.shape
    assert D.is_one_hot(oh)
    assert torch.equal(D.to_one_hot(oh), oh)
    assert oh.tolist() == O.one_hot(m.tolist())


def test_reverse_attribute_examples():
    names = ["Black_Hair", "Blond_Hair", "Brown_Hair", "Eyeglasses"]
    groups = D.exclusive_groups(names)
    assert groups == [[0, 1, 2]]
    y = D.reverse_attribute([0, 0, 1, 1], 1, groups)
    assert y.tolist() == [0, 1, 0, 1]
    assert D.reverse_attribute([1, 0], 0).tolist() == [0, 0]
    assert D.reverse_attribute([0, 0, 0], 1, [[0, 1, 2]]).tolist() == [0, 1, 0]
    # switching a hair colour off leaves the others alone
    assert D.reverse_attribute([0, 1, 0, 0], 1, groups).tolist() == [0, 0, 0, 0]


def test_reverse_attribute_out_of_range():
    with pytest.raises(IndexError):
        D.reverse_attribute([0, 1], 2)


@given(bits, st.data())
def test_reverse_is_involution_without_groups(y, data):
    k = data.draw(st.integers(0, len(y) - 1))
    assert D.reverse_attribute(D.reverse_attribute(y, k), k).tolist() == [float(v) for v in y]


def test_reverse_attribute_batch():
    y = torch.tensor([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    out = D.reverse_attribute(y, 1, [[0, 1, 2]])
    assert out.tolist() == [[0, 1, 0], [0, 1, 0]]
    assert y.tolist() == [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]      # input untouched


def test_set_expression():
    assert D.set_expression([0, 1, 0], 2).tolist() == [0, 0, 1]


def test_validators():
    D.validate_image(torch.zeros(1, 3, 4, 4), 4)
    with pytest.raises(D.ContractError):
        D.validate_image(torch.full((1, 3, 4, 4), 1.5))
    with pytest.raises(D.ContractError):
        D.validate_image(torch.zeros(1, 3, 4, 4), 8)
    D.validate_soft_mask(torch.full((1, 12, 2, 2), 1 / 12))
    with pytest.raises(D.ContractError):
        D.validate_soft_mask(torch.full((1, 12, 2, 2), 0.1))


def test_mask_png_round_trip(tmp_path):
    idx = torch.randint(0, 12, (9, 7))
    D.save_mask(D.indices_to_one_hot(idx[None])[0], tmp_path / "m.png")
    assert torch.equal(D.load_mask(tmp_path / "m.png"), idx)
    D.save_mask(torch.full((3, 3), 12, dtype=torch.uint8), tmp_path / "bad.png")
    with pytest.raises(D.ContractError):
        D.load_mask(tmp_path / "bad.png")
