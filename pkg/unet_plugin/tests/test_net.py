import numpy as np
import pytest
import torch

from patchmc_unet_plugin.net import UNet3D, UNetConfig, fit, make_net, predict, valid_depth


def separable_patches(n=100, dims=(8, 8, 8), seed=0):
    rng = np.random.default_rng(seed)
    sign = rng.choice([-1.0, 1.0], size=(n, *dims))
    intensities = (sign * rng.uniform(1.0, 2.0, size=(n, *dims))).astype(np.float32)
    labels = (intensities > 0).astype(np.uint8)
    return intensities, labels


@pytest.mark.parametrize("dims", [(16, 16, 16), (32, 32, 32)])
def test_output_shape_equals_input_shape(dims):
    net = make_net(dims, UNetConfig(base_channels=8, depth=2, seed=1))
    x = torch.randn(2, 1, *dims)
    with torch.no_grad():
        y = net(x)
    assert y.shape == (2, 1, *dims)


def test_output_shape_uneven_dims():
    net = make_net((16, 8, 4), UNetConfig(base_channels=4, depth=2, seed=1))
    x = torch.randn(1, 1, 16, 8, 4)
    with torch.no_grad():
        y = net(x)
    assert y.shape == (1, 1, 16, 8, 4)


def test_depth_clamps_to_divisible_dims():
    assert valid_depth((16, 16, 16), 2) == 2
    assert valid_depth((12, 12, 12), 3) == 2
    assert valid_depth((6, 6, 6), 2) == 1
    assert valid_depth((5, 5, 5), 2) == 0


def test_untrained_predictions_in_unit_interval_and_deterministic():
    dims = (8, 8, 8)
    x = np.random.default_rng(3).normal(size=(4, *dims)).astype(np.float32)
    a = predict(make_net(dims, UNetConfig(seed=7)), x)
    b = predict(make_net(dims, UNetConfig(seed=7)), x)
    assert a.shape == x.shape
    assert np.all(a >= 0.0) and np.all(a <= 1.0)
    assert np.array_equal(a, b)


def test_training_deterministic():
    dims = (8, 8, 8)
    intensities, labels = separable_patches(n=30, dims=dims, seed=5)
    cfg = UNetConfig(base_channels=4, depth=2, epochs=2, batch_size=10, seed=11)
    net_a = make_net(dims, cfg)
    loss_a = fit(net_a, intensities, labels, cfg)
    net_b = make_net(dims, cfg)
    loss_b = fit(net_b, intensities, labels, cfg)
    assert loss_a == loss_b
    x = np.random.default_rng(1).normal(size=(2, *dims)).astype(np.float32)
    assert np.array_equal(predict(net_a, x), predict(net_b, x))


def test_loss_halves_within_200_steps():
    dims = (8, 8, 8)
    intensities, labels = separable_patches(n=100, dims=dims, seed=9)
    cfg = UNetConfig(base_channels=8, depth=2, lr=1e-3, epochs=1000, batch_size=25, seed=3)
    net = make_net(dims, cfg)
    with torch.no_grad():
        x = torch.from_numpy(intensities).unsqueeze(1)
        y = torch.from_numpy(labels.astype(np.float32)).unsqueeze(1)
        initial = float(torch.nn.functional.binary_cross_entropy_with_logits(net(x), y))
    final = fit(net, intensities, labels, cfg, max_steps=200)
    assert final <= 0.5 * initial, f"loss only went {initial:.4f} -> {final:.4f}"
