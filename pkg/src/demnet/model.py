"""The 12-layer encoder-decoder DEM estimator.

Parameters live in a flat ``dict`` keyed ``"<layer>/<kind>"`` (``weight``,
``bias``, ``slope``). Forward and backward passes work on single maps or
batches; gradients come back in a dict with the same keys.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_ops as ops
from .tensor_ops import SAME, VALID, ConvSpec, ShapeError

CONV = "conv"
TCONV = "tconv"
MAXPOOL = "maxpool"

RELU = "relu"
PRELU = "prelu"
LINEAR = "linear"

TRAIN = "train"
INFER = "infer"

PRELU_INIT = 0.25
DEFAULT_L2 = 0.01
# Metres per unit of ConvOutput. The layers work in kilometres and the
# returned DEM is in metres, so an Adam step of 1e-3 on the output bias is
# one metre rather than one millimetre.
OUTPUT_SCALE_M = 1000.0

# name, kind, kernel, out channels, stride, padding, output_padding, activation
_LAYER_TABLE = (
    ("Conv1", CONV, 3, 64, 1, SAME, 0, RELU),
    ("Conv2", CONV, 5, 64, 1, SAME, 0, RELU),
    ("MaxPool", MAXPOOL, 4, None, 4, None, 0, LINEAR),
    ("Conv3", CONV, 3, 128, 1, VALID, 0, RELU),
    ("Conv4", CONV, 3, 128, 1, VALID, 0, RELU),
    ("Conv5", CONV, 3, 128, 1, VALID, 0, RELU),
    ("Conv6", CONV, 3, 128, 1, VALID, 0, LINEAR),
    ("T-Conv1", TCONV, 3, 128, 1, VALID, 0, PRELU),
    ("T-Conv2", TCONV, 3, 64, 1, VALID, 0, PRELU),
    ("T-Conv3", TCONV, 3, 64, 1, VALID, 0, PRELU),
    ("T-Conv3b", TCONV, 3, 32, 1, VALID, 0, PRELU),
    ("T-Conv4", TCONV, 3, 32, 4, VALID, 1, PRELU),
    ("ConvOutput", CONV, 3, 1, 1, SAME, 0, LINEAR),
)

# output sizes listed for the published network on a 140x140x2 input
EXPECTED_OUTPUT_SHAPES = {
    "Conv1": (140, 140, 64),
    "Conv2": (140, 140, 64),
    "MaxPool": (35, 35, 64),
    "Conv3": (33, 33, 128),
    "Conv4": (31, 31, 128),
    "Conv5": (29, 29, 128),
    "Conv6": (27, 27, 128),
    "T-Conv1": (29, 29, 128),
    "T-Conv2": (31, 31, 64),
    "T-Conv3": (33, 33, 64),
    "T-Conv3b": (35, 35, 32),
    "T-Conv4": (140, 140, 32),
    "ConvOutput": (140, 140, 1),
}


@dataclass(frozen=True)
class LayerDef:
    name: str
    kind: str
    spec: ConvSpec | None
    activation: str = LINEAR
    pool: int = 0

    @property
    def has_weights(self) -> bool:
        return self.kind in (CONV, TCONV)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == CONV:
            return self.spec.conv_weight_shape
        if self.kind == TCONV:
            return self.spec.tconv_weight_shape
        return ()

    def output_shape(self, in_shape: tuple[int, int, int]) -> tuple[int, int, int]:
        h, w, c = in_shape
        if self.kind == MAXPOOL:
            if h % self.pool or w % self.pool:
                raise ShapeError(f"{self.name}: ({h}, {w}) not divisible by {self.pool}")
            return (h // self.pool, w // self.pool, c)
        if c != self.spec.in_channels:
            raise ShapeError(f"{self.name}: input has {c} channels, expected {self.spec.in_channels}")
        if self.kind == CONV:
            return (*self.spec.conv_output_hw(h, w), self.spec.out_channels)
        return (*self.spec.tconv_output_hw(h, w), self.spec.out_channels)


@dataclass(frozen=True)
class Architecture:
    layers: tuple[LayerDef, ...]
    input_shape: tuple[int, int, int]
    output_scale: float = 1.0

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def shapes(self) -> dict[str, tuple[int, int, int]]:
        shape = self.input_shape
        out = {}
        for layer in self.layers:
            shape = layer.output_shape(shape)
            out[layer.name] = shape
        return out

    def describe(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "output_scale": self.output_scale,
            "layers": [
                {
                    "name": l.name,
                    "kind": l.kind,
                    "activation": l.activation,
                    "pool": l.pool,
                    "spec": None if l.spec is None else vars(l.spec),
                }
                for l in self.layers
            ],
        }


def build_demnet(input_size: int = 140, in_channels: int = 2, channel_scale: float = 1.0,
                 output_scale: float = OUTPUT_SCALE_M) -> Architecture:
    """Layer stack of the DEM estimator.

    ``input_size`` and ``channel_scale`` exist to build a shrunken clone with
    the same topology for gradient checks; the defaults give the published
    network. ``input_size`` must be a multiple of 4 and at least 36.
    ``output_scale`` is a fixed, non-trainable factor applied to ConvOutput.
    """
    if not output_scale > 0:
        raise ValueError(f"output_scale must be positive, got {output_scale}")
    layers = []
    channels = in_channels
    for name, kind, k, cout, stride, padding, out_pad, act in _LAYER_TABLE:
        if kind == MAXPOOL:
            layers.append(LayerDef(name, kind, None, act, pool=k))
            continue
        if name != "ConvOutput":
            cout = max(1, round(cout * channel_scale))
        spec = ConvSpec(k, k, channels, cout, stride, stride, padding, out_pad)
        layers.append(LayerDef(name, kind, spec, act))
        channels = cout
    arch = Architecture(tuple(layers), (input_size, input_size, in_channels), float(output_scale))
    arch.shapes()  # validates input_size
    return arch


def param_shapes(arch: Architecture) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for layer in arch:
        if not layer.has_weights:
            continue
        shapes[f"{layer.name}/weight"] = layer.weight_shape
        shapes[f"{layer.name}/bias"] = (layer.spec.out_channels,)
        if layer.activation == PRELU:
            shapes[f"{layer.name}/slope"] = (layer.spec.out_channels,)
    return shapes


def is_weight(key: str) -> bool:
    return key.endswith("/weight")


@dataclass
class ModelParams:
    arrays: dict[str, np.ndarray]
    init_seed: int = 0
    init_scheme: str = "he_normal+glorot_uniform"

    def __getitem__(self, key):
        return self.arrays[key]

    def keys(self):
        return self.arrays.keys()

    def count(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: v.astype(dtype) for k, v in self.arrays.items()}, self.init_seed, self.init_scheme)


def _fans(layer: LayerDef) -> tuple[int, int]:
    s = layer.spec
    area = s.kernel_h * s.kernel_w
    return area * s.in_channels, area * s.out_channels


def init_params(arch: Architecture, seed: int, dtype=np.float64) -> ModelParams:
    """He-normal weights ahead of (P)ReLU, Glorot-uniform ahead of linear outputs.

    Biases start at zero and PReLU slopes at 0.25. Draws come from PCG64 in
    layer order, so the result depends only on ``seed``.
    """
    rng = np.random.default_rng(seed)
    arrays = {}
    for layer in arch:
        if not layer.has_weights:
            continue
        fan_in, fan_out = _fans(layer)
        shape = layer.weight_shape
        if layer.activation in (RELU, PRELU):
            w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, shape)
        arrays[f"{layer.name}/weight"] = w.astype(dtype)
        arrays[f"{layer.name}/bias"] = np.zeros(layer.spec.out_channels, dtype=dtype)
        if layer.activation == PRELU:
            arrays[f"{layer.name}/slope"] = np.full(layer.spec.out_channels, PRELU_INIT, dtype=dtype)
    return ModelParams(arrays, init_seed=seed)


def zeros_like_params(params: ModelParams | dict) -> dict[str, np.ndarray]:
    arrays = params.arrays if isinstance(params, ModelParams) else params
    return {k: np.zeros_like(v) for k, v in arrays.items()}


def _arrays(params) -> dict[str, np.ndarray]:
    return params.arrays if isinstance(params, ModelParams) else params


def forward(params, x: np.ndarray, arch: Architecture | None = None, mode: str = TRAIN):
    """Run the network on ``(H, W, 2)`` or ``(N, H, W, 2)`` input.

    Returns ``(dem, cache)``; ``cache`` is ``None`` in INFER mode.
    """
    arch = arch or build_demnet()
    p = _arrays(params)
    x = np.asarray(x)
    if x.shape[-3:] != arch.input_shape or x.ndim not in (3, 4):
        raise ShapeError(f"input must have shape {arch.input_shape} (optionally batched), got {x.shape}")
    keep = mode == TRAIN
    cache = [] if keep else None
    h = x
    for layer in arch:
        entry = {"input": h}
        if layer.kind == MAXPOOL:
            h, argmax = ops.maxpool_forward(h, layer.pool, layer.pool)
            entry["argmax"] = argmax
            entry["input_shape"] = entry["input"].shape
            del entry["input"]
        else:
            w, b = p[f"{layer.name}/weight"], p[f"{layer.name}/bias"]
            if layer.kind == CONV:
                z = ops.conv2d_forward(h, w, b, layer.spec)
            else:
                z = ops.tconv2d_forward(h, w, b, layer.spec)
            entry["pre"] = z
            if layer.activation == RELU:
                h = ops.relu(z)
            elif layer.activation == PRELU:
                h = ops.prelu(z, p[f"{layer.name}/slope"])
            else:
                h = z
        if keep:
            cache.append(entry)
    if arch.output_scale != 1.0:
        h = h * np.asarray(arch.output_scale, dtype=h.dtype)
    return h, cache


def backward(params, cache, grad_dem: np.ndarray, arch: Architecture | None = None, l2: float = DEFAULT_L2):
    """Gradients of (data term + L2 penalty) for every parameter.

    ``grad_dem`` is the derivative of the data term w.r.t. the network
    output; the L2 contribution ``2 * l2 * w`` is added to each weight.
    """
    arch = arch or build_demnet()
    p = _arrays(params)
    if cache is None or len(cache) != len(arch):
        raise ValueError("cache does not belong to this architecture (was forward run in TRAIN mode?)")
    grads = {}
    g = grad_dem * np.asarray(arch.output_scale, dtype=grad_dem.dtype) if arch.output_scale != 1.0 else grad_dem
    for layer, entry in zip(reversed(arch.layers), reversed(cache)):
        if layer.kind == MAXPOOL:
            g = ops.maxpool_backward(g, entry["argmax"], entry["input_shape"])
            continue
        key = layer.name
        w = p.get(f"{key}/weight")
        if w is None or w.shape != layer.weight_shape:
            raise ValueError(f"parameters for {key} do not match the cached architecture")
        if g.shape != entry["pre"].shape:
            raise ShapeError(f"{key}: gradient shape {g.shape} does not match activation {entry['pre'].shape}")
        if layer.activation == RELU:
            g = ops.relu_backward(g, entry["pre"])
        elif layer.activation == PRELU:
            g, grads[f"{key}/slope"] = ops.prelu_backward(g, entry["pre"], p[f"{key}/slope"])
        if layer.kind == CONV:
            g, gw, gb = ops.conv2d_backward(g, entry["input"], w, layer.spec)
        else:
            g, gw, gb = ops.tconv2d_backward(g, entry["input"], w, layer.spec)
        grads[f"{key}/weight"] = gw + 2.0 * l2 * w if l2 else gw
        grads[f"{key}/bias"] = gb
    return {k: grads[k] for k in p}


def l2_penalty(params, l2: float = DEFAULT_L2) -> float:
    """``l2 * sum(w**2)`` over convolution and transposed-convolution weights."""
    p = _arrays(params)
    return float(l2 * sum(np.sum(np.square(v, dtype=np.float64)) for k, v in p.items() if is_weight(k)))


def l2_grad(params, l2: float = DEFAULT_L2) -> dict[str, np.ndarray]:
    p = _arrays(params)
    return {k: (2.0 * l2 * v if is_weight(k) else np.zeros_like(v)) for k, v in p.items()}
