"""The DeepID2 feature-extraction network.

The network is a stack of valid (unpadded) convolution, locally-shared convolution,
locally-connected, max-pooling and ReLU layers, followed by a fully-connected DeepID2
layer that sees both the input of the last convolution-like layer and the network's final
output. Every layer has an exact, hand-written backward pass.

All layer kernels operate on batches shaped `(N, C, H, W)`.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
from collections.abc import Mapping
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from deepid.errors import ConfigError, ShapeError
from deepid.tensor import Tensor
from deepid.tensorio import load_tensors, save_tensors

logger = logging.getLogger(__name__)

Shape = tuple[int, int, int]


class LayerKind(enum.StrEnum):
    CONV = "conv"
    LOCALLY_SHARED = "conv-locally-shared"
    LOCALLY_CONNECTED = "locally-connected"
    MAXPOOL = "maxpool"
    RELU = "relu"


# Layer kinds that own weights.
WEIGHTED_KINDS = frozenset(
    {LayerKind.CONV, LayerKind.LOCALLY_SHARED, LayerKind.LOCALLY_CONNECTED}
)


@dataclasses.dataclass(frozen=True)
class LayerSpec:
    name: str
    """Unique layer name; parameters are stored as `<name>.weight` and `<name>.bias`."""

    kind: LayerKind
    """The layer type."""

    kernel: tuple[int, int] = (1, 1)
    """Kernel (or pooling window) extents as `(height, width)`."""

    stride: int = 1
    """Step between neighbouring windows."""

    channels: int | None = None
    """Output channel count for weighted layers; pooling and ReLU keep their input's."""

    grid: tuple[int, int] = (1, 1)
    """Sharing grid of a locally-shared layer: one weight set per grid cell."""

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {"name": self.name, "kind": str(self.kind)}
        if self.kind != LayerKind.RELU:
            data["kernel"] = list(self.kernel)
            data["stride"] = self.stride
        if self.channels is not None:
            data["channels"] = self.channels
        if self.kind == LayerKind.LOCALLY_SHARED:
            data["grid"] = list(self.grid)
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> LayerSpec:
        unknown = set(data) - {"name", "kind", "kernel", "stride", "channels", "grid"}
        if unknown:
            raise ConfigError(f"unknown layer keys: {sorted(unknown)}")
        try:
            kind = LayerKind(data["kind"])
            return cls(
                name=str(data["name"]),
                kind=kind,
                kernel=_pair(data.get("kernel", 1)),
                stride=int(data.get("stride", 1)),
                channels=None if data.get("channels") is None else int(data["channels"]),
                grid=_pair(data.get("grid", 1)),
            )
        except KeyError as err:
            raise ConfigError(f"layer is missing key {err}") from None
        except ValueError as err:
            raise ConfigError(f"invalid layer: {err}") from None


def _pair(value: Any) -> tuple[int, int]:
    if isinstance(value, int):
        return value, value
    first, second = value
    return int(first), int(second)


@dataclasses.dataclass(frozen=True)
class NetworkConfig:
    input_shape: Shape
    """Input extents as `(channels, height, width)`."""

    layers: tuple[LayerSpec, ...]
    """The layer stack, in order."""

    feature_dim: int = 160
    """Dimensionality of the DeepID2 vector."""

    multi_scale: bool = True
    """Whether the DeepID2 layer also sees the input of the last weighted layer."""

    def __post_init__(self) -> None:
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ConfigError(f"layer names must be unique: {names}")
        if not any(layer.kind in WEIGHTED_KINDS for layer in self.layers):
            raise ConfigError("network needs at least one convolution-like layer")
        if self.feature_dim < 1:
            raise ConfigError("`feature-dim` must be positive")
        # Validate the shape recurrence eagerly.
        _ = self.shapes

    @cached_property
    def shapes(self) -> tuple[Shape, ...]:
        """Activation shapes: the input followed by every layer's output."""
        shapes: list[Shape] = [tuple(self.input_shape)]  # type: ignore[list-item]
        for layer in self.layers:
            shapes.append(_output_shape(layer, shapes[-1]))
        return tuple(shapes)

    @cached_property
    def tap_indices(self) -> tuple[int, ...]:
        """Indices into `shapes` of the activations feeding the DeepID2 layer."""
        last = len(self.layers)
        if not self.multi_scale:
            return (last,)
        weighted = [i for i, layer in enumerate(self.layers) if layer.kind in WEIGHTED_KINDS]
        # `shapes[i]` is the input of layer `i`.
        return (weighted[-1], last)

    @property
    def deepid_input_dim(self) -> int:
        return sum(int(np.prod(self.shapes[i])) for i in self.tap_indices)

    def with_input(self, input_shape: Shape) -> NetworkConfig:
        """The same layer stack applied to a differently sized input."""
        return dataclasses.replace(self, input_shape=tuple(input_shape))  # type: ignore[arg-type]

    def parameter_shapes(self, n_identities: int = 0) -> dict[str, tuple[int, ...]]:
        """Shape of every parameter tensor, keyed by name."""
        shapes: dict[str, tuple[int, ...]] = {}
        for layer, (c, _, _), (o, oh, ow) in zip(self.layers, self.shapes, self.shapes[1:]):
            kh, kw = layer.kernel
            match layer.kind:
                case LayerKind.CONV:
                    shapes[f"{layer.name}.weight"] = (o, c, kh, kw)
                    shapes[f"{layer.name}.bias"] = (o,)
                case LayerKind.LOCALLY_SHARED:
                    gh, gw = layer.grid
                    shapes[f"{layer.name}.weight"] = (gh, gw, o, c, kh, kw)
                    shapes[f"{layer.name}.bias"] = (gh, gw, o)
                case LayerKind.LOCALLY_CONNECTED:
                    shapes[f"{layer.name}.weight"] = (oh, ow, o, c, kh, kw)
                    shapes[f"{layer.name}.bias"] = (oh, ow, o)
        shapes["deepid.weight"] = (self.feature_dim, self.deepid_input_dim)
        shapes["deepid.bias"] = (self.feature_dim,)
        shapes["softmax.weight"] = (n_identities, self.feature_dim)
        shapes["softmax.bias"] = (n_identities,)
        return shapes

    def to_dict(self) -> dict[str, Any]:
        return {
            "input": list(self.input_shape),
            "feature-dim": self.feature_dim,
            "multi-scale": self.multi_scale,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> NetworkConfig:
        unknown = set(data) - {"input", "feature-dim", "multi-scale", "layers"}
        if unknown:
            raise ConfigError(f"unknown keys in [network]: {sorted(unknown)}")
        try:
            channels, height, width = (int(value) for value in data["input"])
            layers = tuple(LayerSpec.from_dict(layer) for layer in data["layers"])
        except KeyError as err:
            raise ConfigError(f"[network] is missing key {err}") from None
        except (TypeError, ValueError) as err:
            raise ConfigError(f"invalid [network] table: {err}") from None
        return cls(
            input_shape=(channels, height, width),
            layers=layers,
            feature_dim=int(data.get("feature-dim", 160)),
            multi_scale=bool(data.get("multi-scale", True)),
        )


def _output_shape(layer: LayerSpec, shape: Shape) -> Shape:
    c, h, w = shape
    if layer.kind == LayerKind.RELU:
        return c, h, w
    kh, kw = layer.kernel
    if layer.stride < 1 or kh < 1 or kw < 1:
        raise ShapeError(f"layer `{layer.name}`: kernel and stride must be positive")
    oh = (h - kh) // layer.stride + 1
    ow = (w - kw) // layer.stride + 1
    if h < kh or w < kw or oh < 1 or ow < 1:
        raise ShapeError(
            f"layer `{layer.name}`: kernel {layer.kernel} does not fit input {shape}"
        )
    if layer.kind == LayerKind.MAXPOOL:
        return c, oh, ow
    if layer.channels is None or layer.channels < 1:
        raise ShapeError(f"layer `{layer.name}`: `channels` must be positive")
    if layer.kind == LayerKind.LOCALLY_SHARED:
        gh, gw = layer.grid
        if gh < 1 or gw < 1 or oh % gh or ow % gw:
            raise ShapeError(
                f"layer `{layer.name}`: sharing grid {layer.grid} does not divide "
                f"output extents {(oh, ow)}"
            )
    return layer.channels, oh, ow


@dataclasses.dataclass
class NetworkParams:
    """All learnable tensors, keyed by name.

    `θ_c` are the layer tensors plus `deepid.*`; `θ_id` is `softmax.*`; `θ_ve` is
    `verif.margin` (contrastive losses) or `verif.scale` and `verif.shift` (cosine loss).
    """

    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: object) -> bool:
        return name in self.tensors

    @property
    def n_identities(self) -> int:
        return int(self.tensors["softmax.bias"].shape[0])

    @property
    def margin(self) -> float:
        return float(self.tensors["verif.margin"])

    def copy(self) -> NetworkParams:
        return NetworkParams({name: value.copy() for name, value in self.tensors.items()})

    def with_margin(self, margin: float) -> NetworkParams:
        tensors = dict(self.tensors)
        tensors["verif.margin"] = np.asarray(float(margin))
        return NetworkParams(tensors)

    def num_parameters(self) -> int:
        return sum(value.size for value in self.tensors.values())

    def check(self, cfg: NetworkConfig) -> None:
        """Raise `ShapeError` unless every tensor matches the configuration."""
        for name, shape in cfg.parameter_shapes(self.n_identities).items():
            if name not in self.tensors:
                raise ShapeError(f"missing parameter `{name}`")
            if self.tensors[name].shape != shape:
                raise ShapeError(
                    f"parameter `{name}` has shape {self.tensors[name].shape}, "
                    f"expected {shape}"
                )


def init_params(
    cfg: NetworkConfig,
    seed: int,
    *,
    n_identities: int = 0,
    margin: float = 1.0,
) -> NetworkParams:
    """Draw fan-in scaled Gaussian weights and zero biases, deterministically per seed.

    ReLU layers use variance `2 / fan_in`; the linear softmax head uses `1 / fan_in`.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in cfg.parameter_shapes(n_identities).items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
            continue
        # The trailing `(channels, kh, kw)` or `(inputs,)` axes are the fan-in.
        fan_in = int(np.prod(shape[-3:])) if len(shape) >= 4 else int(shape[-1])
        gain = 1.0 if name == "softmax.weight" else 2.0
        tensors[name] = rng.normal(0.0, np.sqrt(gain / max(fan_in, 1)), size=shape)
    tensors["verif.margin"] = np.asarray(float(margin))
    tensors["verif.scale"] = np.asarray(1.0)
    tensors["verif.shift"] = np.asarray(0.0)
    return NetworkParams(tensors)


def save_params(path: str | Path, params: NetworkParams, cfg: NetworkConfig) -> None:
    save_tensors(path, params.tensors, {"kind": "network", "config": cfg.to_dict()})


def load_params(path: str | Path) -> tuple[NetworkParams, NetworkConfig]:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "network":
        raise ConfigError(f"{path} does not contain network parameters")
    cfg = NetworkConfig.from_dict(meta["config"])
    params = NetworkParams(tensors)
    params.check(cfg)
    return params, cfg


# Layer kernels.


def _windows(x: Tensor, kernel: tuple[int, int], stride: int) -> Tensor:
    """View of all `kernel`-sized windows: `(N, C, OH, OW, kh, kw)`."""
    view = sliding_window_view(x, kernel, axis=(2, 3))
    return view[:, :, ::stride, ::stride]


def _scatter_windows(
    dx: Tensor, contributions: Tensor, i: int, j: int, stride: int
) -> None:
    """Add `contributions` (`(N, C, OH, OW)`) at kernel offset `(i, j)` into `dx`."""
    oh, ow = contributions.shape[2:]
    dx[:, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride] += (
        contributions
    )


def conv_forward(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    win = _windows(x, weight.shape[2:], stride)
    out = np.einsum("nchwij,ocij->nohw", win, weight, optimize=True)
    return out + bias[None, :, None, None]


def conv_backward(
    dout: Tensor, x: Tensor, weight: Tensor, stride: int = 1
) -> tuple[Tensor, Tensor, Tensor]:
    """Return `(dx, dweight, dbias)`."""
    kh, kw = weight.shape[2:]
    win = _windows(x, (kh, kw), stride)
    dweight = np.einsum("nohw,nchwij->ocij", dout, win, optimize=True)
    dbias = dout.sum(axis=(0, 2, 3))
    dx = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            contrib = np.einsum("nohw,oc->nchw", dout, weight[:, :, i, j], optimize=True)
            _scatter_windows(dx, contrib, i, j, stride)
    return dx, dweight, dbias


def local_forward(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Locally-connected layer: `weight` is `(OH, OW, O, C, kh, kw)`, `bias` `(OH, OW, O)`."""
    win = _windows(x, weight.shape[4:], stride)
    if win.shape[2:4] != weight.shape[:2]:
        raise ShapeError(
            f"locally-connected weights cover {weight.shape[:2]} locations, "
            f"input yields {win.shape[2:4]}"
        )
    out = np.einsum("nchwij,hwocij->nohw", win, weight, optimize=True)
    return out + bias.transpose(2, 0, 1)[None]


def local_backward(
    dout: Tensor, x: Tensor, weight: Tensor, stride: int = 1
) -> tuple[Tensor, Tensor, Tensor]:
    kh, kw = weight.shape[4:]
    win = _windows(x, (kh, kw), stride)
    dweight = np.einsum("nohw,nchwij->hwocij", dout, win, optimize=True)
    dbias = dout.sum(axis=0).transpose(1, 2, 0)
    dx = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            contrib = np.einsum("nohw,hwoc->nchw", dout, weight[..., i, j], optimize=True)
            _scatter_windows(dx, contrib, i, j, stride)
    return dx, dweight, dbias


def _expand_grid(tensor: Tensor, cell: tuple[int, int]) -> Tensor:
    """Repeat per-cell tensors `(gh, gw, ...)` to per-location `(OH, OW, ...)`."""
    return np.repeat(np.repeat(tensor, cell[0], axis=0), cell[1], axis=1)


def _reduce_grid(tensor: Tensor, grid: tuple[int, int]) -> Tensor:
    """Sum per-location gradients `(OH, OW, ...)` into per-cell `(gh, gw, ...)`."""
    oh, ow = tensor.shape[:2]
    gh, gw = grid
    cells = tensor.reshape(gh, oh // gh, gw, ow // gw, *tensor.shape[2:])
    return cells.sum(axis=(1, 3))


def shared_forward(
    x: Tensor, weight: Tensor, bias: Tensor, out_hw: tuple[int, int], stride: int = 1
) -> Tensor:
    """Locally-shared convolution: `weight` is `(gh, gw, O, C, kh, kw)`.

    Each output location uses the weight set of the grid cell containing it.
    """
    cell = (out_hw[0] // weight.shape[0], out_hw[1] // weight.shape[1])
    return local_forward(x, _expand_grid(weight, cell), _expand_grid(bias, cell), stride)


def shared_backward(
    dout: Tensor, x: Tensor, weight: Tensor, stride: int = 1
) -> tuple[Tensor, Tensor, Tensor]:
    grid = weight.shape[:2]
    cell = (dout.shape[2] // grid[0], dout.shape[3] // grid[1])
    dx, dweight, dbias = local_backward(dout, x, _expand_grid(weight, cell), stride)
    return dx, _reduce_grid(dweight, grid), _reduce_grid(dbias, grid)


def maxpool_forward(
    x: Tensor, kernel: tuple[int, int], stride: int
) -> tuple[Tensor, Tensor]:
    """Return the pooled maps and the flat in-window argmax (first maximum wins)."""
    win = _windows(x, kernel, stride)
    flat = win.reshape(*win.shape[:4], -1)
    argmax = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    return out, argmax


def maxpool_backward(
    dout: Tensor,
    argmax: Tensor,
    x_shape: tuple[int, ...],
    kernel: tuple[int, int],
    stride: int,
) -> Tensor:
    n, c, oh, ow = dout.shape
    di, dj = np.divmod(argmax, kernel[1])
    rows = np.arange(oh)[None, None, :, None] * stride + di
    cols = np.arange(ow)[None, None, None, :] * stride + dj
    batch = np.arange(n)[:, None, None, None]
    channel = np.arange(c)[None, :, None, None]
    dx = np.zeros(x_shape)
    np.add.at(dx, (batch, channel, rows, cols), dout)
    return dx


def relu_forward(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def relu_backward(dout: Tensor, x: Tensor) -> Tensor:
    # The subgradient at zero is zero.
    return dout * (x > 0.0)


def layer_forward(
    layer: LayerSpec, x: Tensor, params: NetworkParams
) -> tuple[Tensor, Any]:
    """Apply one layer to a batch; returns the output and the cache for backward."""
    try:
        match layer.kind:
            case LayerKind.CONV:
                out = conv_forward(
                    x, params[f"{layer.name}.weight"], params[f"{layer.name}.bias"], layer.stride
                )
                return out, None
            case LayerKind.LOCALLY_SHARED:
                kh, kw = layer.kernel
                out_hw = (
                    (x.shape[2] - kh) // layer.stride + 1,
                    (x.shape[3] - kw) // layer.stride + 1,
                )
                out = shared_forward(
                    x,
                    params[f"{layer.name}.weight"],
                    params[f"{layer.name}.bias"],
                    out_hw,
                    layer.stride,
                )
                return out, None
            case LayerKind.LOCALLY_CONNECTED:
                out = local_forward(
                    x, params[f"{layer.name}.weight"], params[f"{layer.name}.bias"], layer.stride
                )
                return out, None
            case LayerKind.MAXPOOL:
                return maxpool_forward(x, layer.kernel, layer.stride)
            case LayerKind.RELU:
                return relu_forward(x), None
            case _:
                raise ValueError(f"Invalid layer kind: {layer.kind}")
    except ValueError as err:
        raise ShapeError(f"layer `{layer.name}`: {err}") from err


def layer_backward(
    layer: LayerSpec, dout: Tensor, x: Tensor, cache: Any, params: NetworkParams
) -> tuple[Tensor, dict[str, Tensor]]:
    """Backpropagate `dout` through one layer; returns `dx` and parameter gradients."""
    weight_name, bias_name = f"{layer.name}.weight", f"{layer.name}.bias"
    match layer.kind:
        case LayerKind.CONV:
            dx, dw, db = conv_backward(dout, x, params[weight_name], layer.stride)
        case LayerKind.LOCALLY_SHARED:
            dx, dw, db = shared_backward(dout, x, params[weight_name], layer.stride)
        case LayerKind.LOCALLY_CONNECTED:
            dx, dw, db = local_backward(dout, x, params[weight_name], layer.stride)
        case LayerKind.MAXPOOL:
            return maxpool_backward(dout, cache, x.shape, layer.kernel, layer.stride), {}
        case LayerKind.RELU:
            return relu_backward(dout, x), {}
        case _:
            raise ValueError(f"Invalid layer kind: {layer.kind}")
    return dx, {weight_name: dw, bias_name: db}


@dataclasses.dataclass
class ForwardTrace:
    """Everything the backward pass needs from one forward pass."""

    activations: list[Tensor]
    """The batched input followed by each layer's output."""

    caches: list[Any]
    """Per-layer backward caches (max-pool argmax positions)."""

    deepid_input: Tensor
    """Concatenated, flattened tap activations: `(N, deepid_input_dim)`."""

    deepid_pre: Tensor
    """DeepID2 pre-activations: `(N, feature_dim)`."""

    batched: bool
    """Whether the caller passed a batch rather than a single image."""


def forward(
    x: Tensor, params: NetworkParams, cfg: NetworkConfig
) -> tuple[Tensor, ForwardTrace]:
    """Compute `f = Conv(x, θ_c)` for one image `(C, H, W)` or a batch `(N, C, H, W)`."""
    batched = x.ndim == 4
    batch = x if batched else x[None]
    if batch.ndim != 4 or batch.shape[1:] != tuple(cfg.input_shape):
        raise ShapeError(
            f"layer `input`: expected images of shape {tuple(cfg.input_shape)}, "
            f"got {x.shape}"
        )

    activations = [batch]
    caches = []
    for layer in cfg.layers:
        out, cache = layer_forward(layer, activations[-1], params)
        activations.append(out)
        caches.append(cache)

    n = batch.shape[0]
    deepid_input = np.concatenate(
        [activations[i].reshape(n, -1) for i in cfg.tap_indices], axis=1
    )
    weight = params["deepid.weight"]
    if weight.shape[1] != deepid_input.shape[1]:
        raise ShapeError(
            f"layer `deepid`: weight expects {weight.shape[1]} inputs, "
            f"got {deepid_input.shape[1]}"
        )
    deepid_pre = deepid_input @ weight.T + params["deepid.bias"]
    f = relu_forward(deepid_pre)

    trace = ForwardTrace(activations, caches, deepid_input, deepid_pre, batched)
    return (f if batched else f[0]), trace


def backward(
    df: Tensor, trace: ForwardTrace, params: NetworkParams, cfg: NetworkConfig
) -> tuple[dict[str, Tensor], Tensor]:
    """Backpropagate `df` through the network.

    Returns gradients for every `θ_c` tensor (summed over the batch) and the input
    gradient, shaped like the input given to `forward`.
    """
    if len(trace.activations) != len(cfg.layers) + 1:
        raise ShapeError(
            f"trace has {len(trace.activations) - 1} layers, config has {len(cfg.layers)}"
        )
    dfb = df if trace.batched else df[None]
    if dfb.shape != trace.deepid_pre.shape:
        raise ShapeError(
            f"gradient shape {df.shape} does not match features {trace.deepid_pre.shape}"
        )
    if params["deepid.weight"].shape[0] != dfb.shape[1]:
        raise ShapeError("trace does not match the DeepID2 layer of these parameters")

    grads: dict[str, Tensor] = {}
    dpre = relu_backward(dfb, trace.deepid_pre)
    grads["deepid.weight"] = dpre.T @ trace.deepid_input
    grads["deepid.bias"] = dpre.sum(axis=0)
    dinput = dpre @ params["deepid.weight"]

    n = dfb.shape[0]
    dacts: list[Tensor | None] = [None] * len(trace.activations)
    offset = 0
    for i in cfg.tap_indices:
        size = int(np.prod(trace.activations[i].shape[1:]))
        dacts[i] = dinput[:, offset : offset + size].reshape(trace.activations[i].shape)
        offset += size

    for k in reversed(range(len(cfg.layers))):
        dout = dacts[k + 1]
        if dout is None:
            dout = np.zeros_like(trace.activations[k + 1])
        dx, layer_grads = layer_backward(
            cfg.layers[k], dout, trace.activations[k], trace.caches[k], params
        )
        grads.update(layer_grads)
        dacts[k] = dx if dacts[k] is None else dacts[k] + dx

    dx = dacts[0]
    assert dx is not None
    return grads, (dx if trace.batched else dx[0])
