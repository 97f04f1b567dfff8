"""The IRON regressor: four valid 3x3x3 Conv-BN-ReLU blocks and four FC layers.

Everything is plain numpy at float64. Volumes are kept channels-last,
``(batch, D, D, D, C)``, so that im2col patches reshape straight into the
``(C_in * 27)`` layout of a ``(C_out, C_in, 3, 3, 3)`` kernel.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .binio import Reader, header
from .errors import CacheError, FormatError, ShapeError
from .landscape import LABEL_SCALE, WINDOW, SimilarityTensor, denormalize_offset, extract_subtensor

CONV_PLAN = (1, 64, 128, 256, 512)
FC_PLAN = (512, 256, 64, 16, 6)
INPUT_EDGE = 9
BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1
INPUT_EPSILON = 1e-30  # variance floor for per-window standardization
WEIGHT_MAGIC = b"IRNW"
WEIGHT_VERSION = 1


# -- layer primitives -------------------------------------------------------

def _patches(x: np.ndarray) -> np.ndarray:
    """im2col for channels-last volumes: (B, D, D, D, C) -> (B*(D-2)^3, C*27)."""
    b, d = x.shape[0], x.shape[1]
    win = sliding_window_view(x, (3, 3, 3), axis=(1, 2, 3))  # (B, D', D', D', C, 3, 3, 3)
    return win.reshape(b * (d - 2) ** 3, -1)


def conv3d_valid(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-1, unpadded 3D cross-correlation.

    Parameters
    ----------
    x : ndarray, shape (B, D, D, D, C_in)
    kernels : ndarray, shape (C_out, C_in, 3, 3, 3)
    bias : ndarray, shape (C_out,)

    Returns
    -------
    ndarray, shape (B, D-2, D-2, D-2, C_out)
    """
    if x.ndim != 5 or not (x.shape[1] == x.shape[2] == x.shape[3]):
        raise ShapeError(f"expected a (B, D, D, D, C) cube, got {x.shape}")
    d = x.shape[1]
    if d < 3:
        raise ShapeError(f"valid 3x3x3 convolution needs D >= 3, got D={d}")
    if kernels.shape[1:] != (x.shape[4], 3, 3, 3):
        raise ShapeError(f"kernel shape {kernels.shape} does not fit {x.shape[4]} input channels")
    out, _ = _conv3d_with_cols(x, kernels, bias)
    return out


def _conv3d_with_cols(x, kernels, bias):
    d = x.shape[1]
    cols = _patches(x)
    out = cols @ kernels.reshape(kernels.shape[0], -1).T + bias
    return out.reshape(x.shape[0], d - 2, d - 2, d - 2, kernels.shape[0]), cols


def _conv3d_backward(x, kernels, grad_out, cols=None, need_input_grad=True):
    """Gradients of :func:`conv3d_valid` w.r.t. input, kernels and bias.

    ``cols`` may carry the forward pass's im2col matrix to skip recomputing it.
    """
    b, d, cin = x.shape[0], x.shape[1], x.shape[4]
    cout, e = kernels.shape[0], d - 2
    g = grad_out.reshape(-1, cout)
    if cols is None:
        cols = _patches(x)
    grad_k = (g.T @ cols).reshape(kernels.shape)
    grad_b = g.sum(axis=0)
    if not need_input_grad:
        return None, grad_k, grad_b
    # tap-major kernel layout keeps each tap's channel slice contiguous
    taps = kernels.transpose(0, 2, 3, 4, 1).reshape(cout, -1)
    dcols = (g @ taps).reshape(b, e, e, e, 27, cin)
    grad_x = np.zeros_like(x)
    for t, (a, bb, c) in enumerate(itertools.product(range(3), repeat=3)):
        grad_x[:, a:a + e, bb:bb + e, c:c + e, :] += dcols[:, :, :, :, t, :]
    return grad_x, grad_k, grad_b


@dataclass
class BatchNormParams:
    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = BN_EPSILON
    momentum: float = BN_MOMENTUM


def batchnorm_forward(x: np.ndarray, p: BatchNormParams, mode: str = "train"):
    """Per-channel batch normalization over every axis but the last.

    In train mode the running statistics in ``p`` are updated in place and the
    returned cache holds what the backward pass needs; in infer mode ``p`` is
    left untouched and the cache is None.
    """
    axes = tuple(range(x.ndim - 1))
    if mode == "infer":
        inv_std = 1.0 / np.sqrt(p.running_var + p.epsilon)
        return p.scale * (x - p.running_mean) * inv_std + p.shift, None
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    n = x.size // x.shape[-1]
    if n < 2:
        raise ShapeError("train-mode batch norm needs at least 2 values per channel")
    mean = x.mean(axis=axes)
    centered = x - mean
    var = (centered**2).mean(axis=axes)
    inv_std = 1.0 / np.sqrt(var + p.epsilon)
    x_hat = centered * inv_std
    p.running_mean *= 1.0 - p.momentum
    p.running_mean += p.momentum * mean
    p.running_var *= 1.0 - p.momentum
    p.running_var += p.momentum * var * (n / (n - 1))
    return p.scale * x_hat + p.shift, (x_hat, inv_std)


def batchnorm_backward(grad_y, cache, scale):
    x_hat, inv_std = cache
    axes = tuple(range(grad_y.ndim - 1))
    n = grad_y.size // grad_y.shape[-1]
    grad_scale = (grad_y * x_hat).sum(axis=axes)
    grad_shift = grad_y.sum(axis=axes)
    g_hat = grad_y * scale
    grad_x = (inv_std / n) * (n * g_hat - g_hat.sum(axis=axes) - x_hat * (g_hat * x_hat).sum(axis=axes))
    return grad_x, grad_scale, grad_shift


def standardize_forward(x: np.ndarray, epsilon: float = INPUT_EPSILON):
    """Shift and scale each batch element to zero mean and unit variance.

    Similarity values are tiny (around 1e-3) and their level varies between
    scenes far more than their shape, so each window is standardized on its
    own. Returns ``(y, inv_std)``; a constant window maps to zeros.
    """
    axes = tuple(range(1, x.ndim))
    centered = x - x.mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=axes, keepdims=True) + epsilon)
    return centered * inv_std, inv_std


def standardize_backward(grad_y: np.ndarray, y: np.ndarray, inv_std: np.ndarray) -> np.ndarray:
    axes = tuple(range(1, grad_y.ndim))
    return inv_std * (grad_y - grad_y.mean(axis=axes, keepdims=True)
                      - y * (grad_y * y).mean(axis=axes, keepdims=True))


# -- model --------------------------------------------------------------------

@dataclass
class ConvBlock:
    kernels: np.ndarray
    bias: np.ndarray
    bn: BatchNormParams


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray


@dataclass
class IronModel:
    conv_blocks: list[ConvBlock]
    fc_layers: list[DenseLayer]
    standardize_input: bool = True
    version: int = 0  # bumped on every parameter update; stales old caches

    @property
    def conv_plan(self) -> tuple[int, ...]:
        return (self.conv_blocks[0].kernels.shape[1],) + tuple(b.kernels.shape[0] for b in self.conv_blocks)

    @property
    def fc_plan(self) -> tuple[int, ...]:
        return (self.fc_layers[0].weights.shape[1],) + tuple(f.weights.shape[0] for f in self.fc_layers)

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name, in manifest order (live references)."""
        out = {}
        for i, b in enumerate(self.conv_blocks):
            out[f"conv{i}.kernels"] = b.kernels
            out[f"conv{i}.bias"] = b.bias
            out[f"conv{i}.bn_scale"] = b.bn.scale
            out[f"conv{i}.bn_shift"] = b.bn.shift
        for i, f in enumerate(self.fc_layers):
            out[f"fc{i}.weights"] = f.weights
            out[f"fc{i}.bias"] = f.bias
        return out

    @property
    def dtype(self) -> np.dtype:
        return self.conv_blocks[0].kernels.dtype

    def cast(self, dtype) -> IronModel:
        """Convert every parameter and buffer to ``dtype`` in place."""
        dtype = np.dtype(dtype)
        if dtype == self.dtype:
            return self
        for b in self.conv_blocks:
            b.kernels, b.bias = b.kernels.astype(dtype), b.bias.astype(dtype)
            for key in ("scale", "shift", "running_mean", "running_var"):
                setattr(b.bn, key, getattr(b.bn, key).astype(dtype))
        for f in self.fc_layers:
            f.weights, f.bias = f.weights.astype(dtype), f.bias.astype(dtype)
        self.version += 1
        return self

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, b in enumerate(self.conv_blocks):
            out[f"conv{i}.bn_running_mean"] = b.bn.running_mean
            out[f"conv{i}.bn_running_var"] = b.bn.running_var
        return out

    def state(self) -> dict[str, np.ndarray]:
        """Parameters and buffers interleaved per block, the serialization order."""
        params, bufs = self.parameters(), self.buffers()
        out = {}
        for i in range(len(self.conv_blocks)):
            for key in ("kernels", "bias", "bn_scale", "bn_shift", "bn_running_mean", "bn_running_var"):
                name = f"conv{i}.{key}"
                out[name] = params.get(name, bufs.get(name))
        for i in range(len(self.fc_layers)):
            out[f"fc{i}.weights"] = params[f"fc{i}.weights"]
            out[f"fc{i}.bias"] = params[f"fc{i}.bias"]
        return out

    def copy(self) -> IronModel:
        blocks = [ConvBlock(b.kernels.copy(), b.bias.copy(),
                            BatchNormParams(b.bn.scale.copy(), b.bn.shift.copy(), b.bn.running_mean.copy(),
                                            b.bn.running_var.copy(), b.bn.epsilon, b.bn.momentum))
                  for b in self.conv_blocks]
        fcs = [DenseLayer(f.weights.copy(), f.bias.copy()) for f in self.fc_layers]
        return IronModel(blocks, fcs, self.standardize_input, self.version)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Infer-mode forward pass; the predictor interface used by evaluation."""
        return forward(self, x, mode="infer")[0]


def init_model(seed: int = 0, conv_plan=CONV_PLAN, fc_plan=FC_PLAN,
               bn_epsilon: float = BN_EPSILON, bn_momentum: float = BN_MOMENTUM,
               standardize_input: bool = True) -> IronModel:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases, identity BN."""
    if len(conv_plan) != 5 or len(fc_plan) != 5:
        raise ShapeError("the network has exactly four conv blocks and four FC layers")
    if fc_plan[0] != conv_plan[-1]:
        raise ShapeError(f"first FC width {fc_plan[0]} must equal last conv channels {conv_plan[-1]}")
    rng = np.random.default_rng(seed)
    blocks = []
    for cin, cout in zip(conv_plan[:-1], conv_plan[1:]):
        bound = 1.0 / np.sqrt(cin * 27)
        blocks.append(ConvBlock(
            rng.uniform(-bound, bound, size=(cout, cin, 3, 3, 3)),
            np.zeros(cout),
            BatchNormParams(np.ones(cout), np.zeros(cout), np.zeros(cout), np.ones(cout), bn_epsilon, bn_momentum),
        ))
    fcs = []
    for fin, fout in zip(fc_plan[:-1], fc_plan[1:]):
        bound = 1.0 / np.sqrt(fin)
        fcs.append(DenseLayer(rng.uniform(-bound, bound, size=(fout, fin)), np.zeros(fout)))
    return IronModel(blocks, fcs, standardize_input)


@dataclass
class ForwardCache:
    model_id: int
    model_version: int
    standardize: tuple | None = None  # (standardized input, inv_std)
    inputs: list = field(default_factory=list)  # conv inputs, then FC inputs
    cols: list = field(default_factory=list)
    bn: list = field(default_factory=list)
    post_bn: list = field(default_factory=list)
    fc_pre: list = field(default_factory=list)
    shapes: list = field(default_factory=list)
    consumed: bool = False


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == (INPUT_EDGE,) * 3:
        x = x[None]
    if x.ndim == 5 and x.shape[1] == 1:
        x = x[:, 0]
    if x.ndim != 4 or x.shape[1:] != (INPUT_EDGE,) * 3:
        raise ShapeError(f"input must be 9x9x9 per element, got {x.shape}")
    return x[..., None]


def forward(model: IronModel, x, mode: str = "infer"):
    """Run the network on a batch of 9x9x9 sub-tensors.

    Returns ``(outputs, cache)``; outputs has shape ``(B, 6)`` and cache is
    None in infer mode.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    h = _as_batch(x)
    cache = ForwardCache(id(model), model.version) if mode == "train" else None
    if model.standardize_input:
        h, inv_std = standardize_forward(h)
        if cache is not None:
            cache.standardize = (h, inv_std)
    h = h.astype(model.dtype, copy=False)
    edge = INPUT_EDGE
    for block in model.conv_blocks:
        z, cols = _conv3d_with_cols(h, block.kernels, block.bias)
        edge -= 2
        assert z.shape[1:] == (edge, edge, edge, block.kernels.shape[0]), z.shape
        y, bn_cache = batchnorm_forward(z, block.bn, mode)
        if cache is not None:
            cache.inputs.append(h)
            cache.cols.append(cols)
            cache.bn.append(bn_cache)
            cache.post_bn.append(y)
            cache.shapes.append(z.shape[1:])
        h = np.maximum(y, 0.0)
    assert edge == 1
    h = h.reshape(h.shape[0], -1)
    last = len(model.fc_layers) - 1
    for n, layer in enumerate(model.fc_layers):
        if cache is not None:
            cache.inputs.append(h)
        z = h @ layer.weights.T + layer.bias
        if cache is not None:
            cache.fc_pre.append(z)
        h = z if n == last else np.maximum(z, 0.0)
    return h, cache


def backward(model: IronModel, cache: ForwardCache, output_grad) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Reverse-mode gradients for every parameter and for the input batch.

    Returns ``(param_grads, input_grad)`` with parameter gradients keyed as in
    :meth:`IronModel.parameters`.
    """
    if cache is None or cache.model_id != id(model) or cache.model_version != model.version:
        raise CacheError("forward cache does not belong to this model state (run a train-mode forward first)")
    if cache.consumed:
        raise CacheError("forward cache was already used by a backward pass")
    n_conv = len(model.conv_blocks)
    g = np.asarray(output_grad, dtype=model.dtype)
    batch = cache.inputs[0].shape[0]
    if g.shape != (batch, model.fc_layers[-1].weights.shape[0]):
        raise ShapeError(f"output_grad shape {g.shape} does not match outputs ({batch}, "
                         f"{model.fc_layers[-1].weights.shape[0]})")
    grads = {}
    last = len(model.fc_layers) - 1
    for n in range(last, -1, -1):
        layer = model.fc_layers[n]
        if n != last:
            g = g * (cache.fc_pre[n] > 0)
        x = cache.inputs[n_conv + n]
        grads[f"fc{n}.weights"] = g.T @ x
        grads[f"fc{n}.bias"] = g.sum(axis=0)
        g = g @ layer.weights
    g = g.reshape(batch, 1, 1, 1, -1)
    for n in range(n_conv - 1, -1, -1):
        block = model.conv_blocks[n]
        g = g * (cache.post_bn[n] > 0)
        g, grads[f"conv{n}.bn_scale"], grads[f"conv{n}.bn_shift"] = batchnorm_backward(g, cache.bn[n], block.bn.scale)
        g, grads[f"conv{n}.kernels"], grads[f"conv{n}.bias"] = _conv3d_backward(
            cache.inputs[n], block.kernels, g, cache.cols[n])
    if cache.standardize is not None:
        g = standardize_backward(g, *cache.standardize)
    cache.consumed = True
    names = list(model.parameters())
    return {k: grads[k] for k in names}, g[..., 0]


# -- prediction -----------------------------------------------------------------

def predict_optimum(model, tensor: SimilarityTensor, init_center, scale: float = LABEL_SCALE, b: int = WINDOW):
    """One-shot estimate of the optimal translation from an initialization node.

    ``model`` is anything mapping a ``(B, 9, 9, 9)`` batch to ``(B, 6)``
    outputs, normally an :class:`IronModel`. Exactly one forward pass is made.

    Returns
    -------
    params : ndarray, shape (3,)
        Estimated (theta_x, theta_y, theta_z) in meters.
    normalized : ndarray, shape (3,)
        Raw network offsets (components 1-3).
    evaluation_count : int
        Always 1.
    """
    sub = extract_subtensor(tensor, init_center, b)
    out = np.asarray(model(sub.values[None]), dtype=np.float64)
    normalized = out[0, :3]
    start = tensor.grid.node_params(sub.center_index)
    return start + denormalize_offset(normalized, scale, tensor.grid), normalized, 1


# -- weight file ------------------------------------------------------------------

def _manifest(model: IronModel) -> str:
    bn = model.conv_blocks[0].bn
    lines = [f"conv_plan {' '.join(map(str, model.conv_plan))}",
             f"fc_plan {' '.join(map(str, model.fc_plan))}",
             f"bn_epsilon {bn.epsilon!r}", f"bn_momentum {bn.momentum!r}",
             f"standardize_input {int(model.standardize_input)}"]
    for name, arr in model.state().items():
        lines.append(f"param {name} {' '.join(map(str, arr.shape))}")
    return "\n".join(lines) + "\n"


def save_model(model: IronModel, path) -> None:
    text = _manifest(model).encode("utf-8")
    parts = [header(WEIGHT_MAGIC, WEIGHT_VERSION), struct.pack("<I", len(text)), text]
    parts += [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in model.state().values()]
    Path(path).write_bytes(b"".join(parts))


def load_model(path, conv_plan=CONV_PLAN, fc_plan=FC_PLAN) -> IronModel:
    """Read an IRNW file, checking its layer plan against the expected one."""
    r = Reader(Path(path).read_bytes(), f"weight file {path}")
    r.expect_magic(WEIGHT_MAGIC, WEIGHT_VERSION)
    (n,) = r.unpack("I")
    try:
        lines = r.take(n).decode("utf-8").splitlines()
        meta = {ln.split()[0]: ln.split()[1:] for ln in lines if not ln.startswith("param ")}
        got_conv = tuple(int(v) for v in meta["conv_plan"])
        got_fc = tuple(int(v) for v in meta["fc_plan"])
        eps, mom = float(meta["bn_epsilon"][0]), float(meta["bn_momentum"][0])
        standardize = bool(int(meta["standardize_input"][0]))
        shapes = [(ln.split()[1], tuple(int(v) for v in ln.split()[2:])) for ln in lines if ln.startswith("param ")]
    except (UnicodeDecodeError, KeyError, IndexError, ValueError) as exc:
        raise FormatError(f"weight file {path}: malformed manifest ({exc})") from exc
    if got_conv != tuple(conv_plan) or got_fc != tuple(fc_plan):
        raise FormatError(f"weight file {path}: layer plan {got_conv}/{got_fc} does not match "
                          f"expected {tuple(conv_plan)}/{tuple(fc_plan)}")
    model = init_model(0, got_conv, got_fc, eps, mom, standardize)
    state = model.state()
    if [(k, v.shape) for k, v in state.items()] != shapes:
        raise FormatError(f"weight file {path}: parameter manifest does not match the layer plan")
    for name, arr in state.items():
        arr[...] = np.frombuffer(r.take(4 * arr.size), dtype="<f4").reshape(arr.shape)
    r.finish()
    return model
