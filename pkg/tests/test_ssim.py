import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_difference, naive_ssim, relative_error
from ppdeid.errors import InvalidConfig, ShapeMismatch
from ppdeid.ssim import SsimConfig, components, sim_loss, ssim

images32 = arrays(np.float64, (32, 32), elements=st.floats(0, 1, allow_nan=False, width=32))


def test_window_normalized():
    w = SsimConfig().window().numpy()
    assert w.shape == (11, 11)
    assert abs(w.sum() - 1) < 1e-12 and (w > 0).all()


@pytest.mark.parametrize("seed", range(5))
def test_matches_per_window_reference(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.random((32, 32)), rng.random((32, 32))
    assert abs(ssim(x, y) - naive_ssim(x, y)) < 1e-6


def test_matches_reference_on_structured_pair():
    rng = np.random.default_rng(9)
    x = rng.random((40, 28))
    y = np.clip(0.6 * x + 0.2 + 0.05 * rng.standard_normal(x.shape), 0, 1)
    assert abs(ssim(x, y) - naive_ssim(x, y)) < 1e-6


@given(images32)
def test_identity_is_one(x):
    assert abs(ssim(x, x) - 1.0) < 1e-9
    assert abs(sim_loss(x, x)) < 1e-9


@given(images32, images32)
def test_symmetric_and_bounded(x, y):
    a, b = ssim(x, y), ssim(y, x)
    assert abs(a - b) < 1e-12
    assert -1.0 < a <= 1.0 + 1e-12
    assert 0.0 <= sim_loss(x, y) + 1e-12 < 1.0


@pytest.mark.parametrize("a,b", [(0.2, 0.7), (0.0, 1.0), (0.5, 0.55)])
def test_constant_images_closed_form(a, b):
    c1 = (0.01 * 1.0) ** 2
    x, y = np.full((20, 20), a), np.full((20, 20), b)
    assert abs(ssim(x, y) - (2 * a * b + c1) / (a * a + b * b + c1)) < 1e-12


def test_shift_leaves_contrast_and_structure():
    rng = np.random.default_rng(4)
    x, y = rng.random((24, 24)) * 0.5, rng.random((24, 24)) * 0.5
    _, c0, s0 = components(x, y)
    _, c1, s1 = components(x + 0.3, y + 0.3)
    torch.testing.assert_close(c0, c1, atol=1e-10, rtol=0)
    torch.testing.assert_close(s0, s1, atol=1e-10, rtol=0)


def test_components_multiply_to_ssim():
    rng = np.random.default_rng(5)
    x, y = rng.random((24, 24)), rng.random((24, 24))
    lum, con, st_ = components(x, y)
    assert abs(float((lum * con * st_).mean()) - ssim(x, y)) < 1e-9


def test_sim_loss_arithmetic():
    x = np.random.default_rng(0).random((16, 16))
    y = 1 - x
    assert abs(sim_loss(x, y) - 0.5 * (1 - ssim(x, y))) < 1e-15


def test_sim_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    x = torch.tensor(rng.random((1, 1, 16, 16)))
    y = torch.tensor(rng.random((1, 1, 16, 16)), requires_grad=True)
    sim_loss(x, y).backward()
    for idx in [(0, 0, i, j) for i, j in rng.integers(0, 16, (12, 2))]:
        fd = central_difference(lambda: sim_loss(x, y), y.data, idx)
        assert relative_error(float(y.grad[idx]), fd) < 1e-4


def test_gradient_finite_on_flat_images():
    x = torch.full((1, 1, 16, 16), 0.3, dtype=torch.float64)
    y = torch.full((1, 1, 16, 16), 0.3, dtype=torch.float64, requires_grad=True)
    sim_loss(x, y).backward()
    assert torch.isfinite(y.grad).all()


def test_errors():
    with pytest.raises(ShapeMismatch):
        ssim(np.zeros((16, 16)), np.zeros((16, 17)))
    with pytest.raises(InvalidConfig):
        SsimConfig(window_size=10)
    with pytest.raises(InvalidConfig):
        SsimConfig(k1=0)


def test_non_unit_exponents_use_components():
    rng = np.random.default_rng(8)
    x, y = rng.random((16, 16)), rng.random((16, 16))
    cfg = SsimConfig(alpha=2.0, beta=1.0, gamma=0.5)
    lum, con, st_ = components(x, y, cfg)
    expected = float((lum**2 * con * torch.sign(st_) * st_.abs() ** 0.5).mean())
    assert abs(ssim(x, y, cfg) - expected) < 1e-12
