import numpy as np
import pytest

from dpaseg.errors import ConfigurationError
from dpaseg.tensor import Tensor, softmax_channels
from dpaseg.unet import MicroUNet, UNetConfig, predict_classes
from helpers import unet_gradient_error


def random_batch(shape, seed=0):
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=shape)


def test_output_shape():
    model = MicroUNet(UNetConfig(depth=3, base_width=8))
    assert model.forward(random_batch((1, 4, 32, 32))).shape == (1, 24, 32, 32)


def test_forward_is_deterministic():
    model = MicroUNet(UNetConfig(base_width=4))
    x = random_batch((2, 4, 16, 16))
    assert model.forward(x).data.tobytes() == model.forward(x).data.tobytes()


def test_same_seed_same_weights():
    a, b = MicroUNet(UNetConfig(base_width=4, seed=3)), MicroUNet(UNetConfig(base_width=4, seed=3))
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


def test_indivisible_input_names_the_multiple():
    model = MicroUNet(UNetConfig(depth=3, base_width=4))
    with pytest.raises(ConfigurationError, match="multiples of 4"):
        model.forward(random_batch((1, 4, 18, 16)))
    with pytest.raises(ConfigurationError, match="input channels"):
        model.forward(random_batch((1, 3, 16, 16)))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        UNetConfig(depth=1)
    with pytest.raises(ConfigurationError):
        UNetConfig(base_width=0)


@pytest.mark.parametrize("depth", [2, 3, 4, 5])
def test_skip_concatenation_channel_law(depth):
    cfg = UNetConfig(depth=depth, base_width=2, num_classes=5)
    model = MicroUNet(cfg)
    assert model.params["enc0.conv1.weight"].shape[1] == 4
    assert model.params["head.weight"].shape[:2] == (5, cfg.base_width)
    for d in range(depth - 1):
        expected = cfg.base_width * 2 ** (d + 1) + cfg.base_width * 2**d
        assert model.params[f"dec{d}.conv1.weight"].shape[1] == expected
    out = model.forward(random_batch((1, 4, cfg.multiple * 2, cfg.multiple * 2)))
    assert out.shape == (1, 5, cfg.multiple * 2, cfg.multiple * 2)


def test_save_and_load(tmp_path):
    model = MicroUNet(UNetConfig(base_width=4, num_classes=6, seed=2))
    model.save(tmp_path / "m.ckpt")
    loaded = MicroUNet.load(tmp_path / "m.ckpt")
    assert loaded.config == model.config
    x = random_batch((1, 4, 16, 16))
    assert loaded.forward(x).data.tobytes() == model.forward(x).data.tobytes()


def test_load_state_rejects_mismatch():
    model = MicroUNet(UNetConfig(base_width=4))
    state = model.state_dict()
    state.pop("head.bias")
    with pytest.raises(ConfigurationError):
        model.load_state_dict(state)


def test_end_to_end_gradient_on_sampled_parameters():
    model = MicroUNet(UNetConfig(depth=3, base_width=4, num_classes=5, seed=1))
    for p in model.parameters():
        if p.name.endswith("bias"):
            p.data = np.random.default_rng(4).normal(0, 0.1, p.shape)
    err, checked, sampled = unet_gradient_error(model, random_batch((1, 4, 8, 8), seed=5), fraction=0.01, seed=0)
    assert err < 1e-3
    assert checked >= 0.8 * sampled


def test_predict_classes_cases():
    onehot = np.zeros((2, 5, 3, 3))
    onehot[:, 3] = 1.0
    assert (predict_classes(onehot) == 3).all()
    assert (predict_classes(np.zeros((5, 3, 3))) == 0).all()
    logits = np.random.default_rng(0).standard_normal((2, 6, 4, 5))
    brute = np.empty((2, 4, 5), dtype=int)
    for n, r, c in np.ndindex(2, 4, 5):
        vals = list(logits[n, :, r, c])
        brute[n, r, c] = vals.index(max(vals))
    np.testing.assert_array_equal(predict_classes(Tensor(logits)), brute)
    probs = softmax_channels(Tensor(logits)).data
    np.testing.assert_array_equal(predict_classes(probs), brute)
