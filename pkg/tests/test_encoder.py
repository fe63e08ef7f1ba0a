import pytest
import torch

from jgseg.config import EncConfig
from jgseg.encoder import Encoder, build_encoder
from jgseg.errors import InvalidArgument


def test_default_shape():
    E = build_encoder(64, 1, 5, 128, EncConfig(), seed=0)
    assert E(torch.randn(1, 64, 64)).shape == (10, 128)
    assert E(torch.randn(3, 1, 64, 64)).shape == (3, 10, 128)


def test_routing_coarse_sites_read_deepest_features():
    E = Encoder(64, 1, 5, 16, [4, 4, 4, 4], 4)
    assert E.route[0] == 3 and E.route == sorted(E.route, reverse=True)


def test_deterministic_and_shape_checked(tiny_E):
    x = torch.randn(2, 1, 8, 8)
    assert torch.equal(tiny_E(x), tiny_E(x))
    with pytest.raises(InvalidArgument):
        tiny_E(torch.randn(2, 1, 16, 16))


def test_offsets_from_mean_style(tiny_E):
    with torch.no_grad():
        tiny_E.w_avg.fill_(2.0)
        for h in tiny_E.heads:
            h.fc.weight.zero_()
            h.fc.bias.zero_()
    assert torch.equal(tiny_E(torch.randn(1, 8, 8)), torch.full((4, 8), 2.0))


def test_jacobian_finite_differences(tiny_E):
    E = tiny_E.double()
    x = torch.randn(1, 1, 8, 8, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda t: E(t).pow(2).sum(), (x,), eps=1e-6, atol=1e-6, rtol=1e-4)
