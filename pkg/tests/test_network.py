from __future__ import annotations

import numpy as np
import pytest

from iron.errors import CacheError, FormatError, ShapeError
from iron.landscape import GridSpec, SimilarityTensor
from iron.network import (
    BatchNormParams,
    backward,
    batchnorm_forward,
    conv3d_valid,
    forward,
    init_model,
    load_model,
    predict_optimum,
    save_model,
    standardize_forward,
)
from iron.trainer import mse_loss

SMALL_CONV = (1, 2, 2, 2, 2)
SMALL_FC = (2, 2, 2, 2, 6)


def _masks(cache):
    return [y > 0 for y in cache.post_bn] + [z > 0 for z in cache.fc_pre[:-1]]


def gated_loss(model, x, target, masks):
    """Training-mode loss with every ReLU replaced by its fixed gate.

    Off a kink this function agrees with the network to first order, and it
    is smooth everywhere, so central differences at the full step stay valid
    even when a pre-activation sits closer to zero than the step.
    """
    h = standardize_forward(np.asarray(x, dtype=np.float64))[0][..., None]
    n_conv = len(model.conv_blocks)
    for n, block in enumerate(model.conv_blocks):
        bn = BatchNormParams(block.bn.scale, block.bn.shift, block.bn.running_mean.copy(),
                             block.bn.running_var.copy(), block.bn.epsilon, block.bn.momentum)
        y, _ = batchnorm_forward(conv3d_valid(h, block.kernels, block.bias), bn, "train")
        h = y * masks[n]
    h = h.reshape(h.shape[0], -1)
    last = len(model.fc_layers) - 1
    for n, layer in enumerate(model.fc_layers):
        h = h @ layer.weights.T + layer.bias
        if n != last:
            h = h * masks[n_conv + n]
    return mse_loss(h, target)[0]


def numeric_gradient(model, x, target, array, index, step=1e-4):
    """Central difference of :func:`gated_loss` for one entry."""
    _, cache = forward(model, x, mode="train")
    masks = _masks(cache)
    orig = array[index]
    try:
        array[index] = orig + step
        fp = gated_loss(model, x, target, masks)
        array[index] = orig - step
        fm = gated_loss(model, x, target, masks)
    finally:
        array[index] = orig
    return (fp - fm) / (2 * step)


def relative_error(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-7)


def gradient_check(seed, batch=4):
    rng = np.random.default_rng(seed)
    model = init_model(seed, SMALL_CONV, SMALL_FC)
    x = rng.normal(size=(batch, 9, 9, 9))
    target = rng.normal(size=(batch, 6))
    out, cache = forward(model, x, mode="train")
    _, grad_out = mse_loss(out, target)
    grads, grad_x = backward(model, cache, grad_out)
    worst, checked = 0.0, 0
    for name, arr in model.parameters().items():
        for index in np.ndindex(arr.shape):
            num = numeric_gradient(model, x, target, arr, index)
            worst = max(worst, relative_error(grads[name][index], num))
            checked += 1
    return worst, checked, (model, x, target, grad_x)


@pytest.mark.parametrize("seed", range(10))
def test_parameter_gradients_match_central_differences(seed):
    worst, checked, _ = gradient_check(seed)
    assert worst < 1e-4
    assert checked == sum(a.size for a in init_model(0, SMALL_CONV, SMALL_FC).parameters().values())


def test_gated_loss_matches_network_at_base_point():
    rng = np.random.default_rng(0)
    model = init_model(0, SMALL_CONV, SMALL_FC)
    x, target = rng.normal(size=(4, 9, 9, 9)), rng.normal(size=(4, 6))
    out, cache = forward(model, x, mode="train")
    assert gated_loss(model, x, target, _masks(cache)) == pytest.approx(mse_loss(out, target)[0], rel=1e-14)


def test_input_gradient_through_standardization():
    _, _, (model, x, target, grad_x) = gradient_check(0)
    rng = np.random.default_rng(1)
    for _ in range(20):
        index = tuple(rng.integers(0, s) for s in x.shape)
        assert relative_error(grad_x[index], numeric_gradient(model, x, target, x, index)) < 1e-4


def test_standardized_input_is_scale_and_shift_invariant():
    model = init_model(0, SMALL_CONV, SMALL_FC)
    x = np.random.default_rng(2).random((3, 9, 9, 9))
    a = model(x)
    b = model(1e-3 * x + 5.0)
    np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-9)


def test_constant_window_is_finite():
    model = init_model(0)
    assert np.all(np.isfinite(model(np.full((1, 9, 9, 9), 0.25))))


def test_full_width_intermediate_shapes():
    model = init_model(0)
    out, cache = forward(model, np.random.default_rng(0).random((2, 9, 9, 9)), mode="train")
    assert cache.shapes == [(7, 7, 7, 64), (5, 5, 5, 128), (3, 3, 3, 256), (1, 1, 1, 512)]
    assert out.shape == (2, 6)
    assert [f.weights.shape for f in model.fc_layers] == [(256, 512), (64, 256), (16, 64), (6, 16)]


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 5, 5, 5, 3))
    k = rng.normal(size=(4, 3, 3, 3, 3))
    bias = rng.normal(size=4)
    got = conv3d_valid(x, k, bias)
    want = np.zeros((2, 3, 3, 3, 4))
    for n in range(2):
        for i in range(3):
            for j in range(3):
                for m in range(3):
                    patch = x[n, i:i + 3, j:j + 3, m:m + 3, :]
                    for o in range(4):
                        want[n, i, j, m, o] = np.sum(patch * np.moveaxis(k[o], 0, -1)) + bias[o]
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_shape_errors():
    model = init_model(0, SMALL_CONV, SMALL_FC)
    with pytest.raises(ShapeError):
        model(np.zeros((1, 8, 8, 8)))
    with pytest.raises(ShapeError):
        conv3d_valid(np.zeros((1, 2, 2, 2, 1)), np.zeros((1, 1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeError):
        forward(model, np.zeros((1, 9, 9, 9)), mode="train")  # one value per channel at 1x1x1
    with pytest.raises(ShapeError):
        init_model(0, (1, 2, 2, 2, 3), SMALL_FC)


def test_infer_mode_leaves_running_stats_alone():
    model = init_model(0, SMALL_CONV, SMALL_FC)
    before = {k: v.copy() for k, v in model.buffers().items()}
    model(np.random.default_rng(0).random((3, 9, 9, 9)))
    for k, v in model.buffers().items():
        np.testing.assert_array_equal(v, before[k])
    forward(model, np.random.default_rng(0).random((3, 9, 9, 9)), mode="train")
    assert not np.array_equal(model.buffers()["conv0.bn_running_mean"], before["conv0.bn_running_mean"])


def test_cache_misuse_is_reported():
    model = init_model(0, SMALL_CONV, SMALL_FC)
    x = np.random.default_rng(0).random((3, 9, 9, 9))
    out, cache = forward(model, x, mode="train")
    backward(model, cache, np.zeros_like(out))
    with pytest.raises(CacheError):
        backward(model, cache, np.zeros_like(out))
    out, cache = forward(model, x, mode="train")
    model.version += 1
    with pytest.raises(CacheError):
        backward(model, cache, np.zeros_like(out))
    with pytest.raises(CacheError):
        backward(model, None, np.zeros_like(out))
    other = init_model(1, SMALL_CONV, SMALL_FC)
    out, cache = forward(model, x, mode="train")
    with pytest.raises(CacheError):
        backward(other, cache, np.zeros_like(out))


def test_save_load_round_trip_is_float32_exact(tmp_path):
    model = init_model(4, SMALL_CONV, SMALL_FC)
    forward(model, np.random.default_rng(0).random((3, 9, 9, 9)), mode="train")
    path = tmp_path / "m.irnw"
    save_model(model, path)
    loaded = load_model(path, SMALL_CONV, SMALL_FC)
    for (k, a), (k2, b) in zip(model.state().items(), loaded.state().items()):
        assert k == k2
        np.testing.assert_array_equal(a.astype(np.float32), b)
    save_model(loaded, tmp_path / "again.irnw")
    assert (tmp_path / "again.irnw").read_bytes() == path.read_bytes()


def test_load_rejects_wrong_plan_and_truncation(tmp_path):
    path = tmp_path / "m.irnw"
    save_model(init_model(0, SMALL_CONV, SMALL_FC), path)
    with pytest.raises(FormatError):
        load_model(path)
    data = path.read_bytes()
    (tmp_path / "short.irnw").write_bytes(data[:-4])
    with pytest.raises(FormatError):
        load_model(tmp_path / "short.irnw", SMALL_CONV, SMALL_FC)
    (tmp_path / "bad.irnw").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        load_model(tmp_path / "bad.irnw", SMALL_CONV, SMALL_FC)


def test_cast_keeps_values_and_changes_dtype():
    model = init_model(0, SMALL_CONV, SMALL_FC)
    x = np.random.default_rng(0).random((2, 9, 9, 9))
    a = model(x)
    model.cast(np.float32)
    assert all(v.dtype == np.float32 for v in model.state().values())
    np.testing.assert_allclose(model(x), a, rtol=1e-4, atol=1e-5)


def test_predict_optimum_single_call_and_denormalization():
    grid = GridSpec((-15, 15), (-75, 75), (-15, 15), 31)
    values = np.random.default_rng(0).random((31, 31, 31))
    tensor = SimilarityTensor(grid, values)
    calls = []

    def stub(batch):
        calls.append(batch.shape)
        return np.tile([1.0, -0.5, 0.0, 9, 9, 9], (len(batch), 1))

    params, normalized, count = predict_optimum(stub, tensor, (10, 12, 14))
    assert calls == [(1, 9, 9, 9)] and count == 1
    np.testing.assert_array_equal(normalized, [1.0, -0.5, 0.0])
    start = grid.node_params((10, 12, 14))
    np.testing.assert_allclose(params, start + np.array([22 * 1.0, -0.5 * 22 * 5.0, 0.0]))
