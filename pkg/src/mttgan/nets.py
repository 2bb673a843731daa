"""Declarative network specs, weight sets and a functional forward pass.

Shapes in specs are channels-last (``H, W, C`` for images, ``D,`` for
vectors). Forward accepts and returns channels-last batches; internally the
tensors run NCHW through ``torch.nn.functional``. Every conv/deconv/pool uses
"same" padding so only the declared strides change spatial size.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import torch
import torch.nn.functional as F
from safetensors.torch import load_file, save_file

from ._rng import derive_seed

CHECKPOINT_FORMAT = "mttgan-weights"
CHECKPOINT_VERSION = "2"
_HEADER_KEY = "mttgan"
LATENT_DIM = 100

LAYER_KINDS = {
    "dense": {"units"},
    "conv": {"filters", "kernel", "stride"},
    "deconv": {"filters", "kernel", "stride"},
    "batchnorm": {"momentum"},
    "leakyrelu": {"slope"},
    "relu": set(),
    "dropout": {"rate"},
    "sigmoid": set(),
    "softmax": set(),
    "reshape": {"target_shape"},
    "flatten": set(),
    "residual_add": {"skip"},
    "maxpool": {"pool", "stride"},
}
TRAINABLE_KINDS = {"dense", "conv", "deconv", "batchnorm"}
NON_TRAINABLE_PARAMS = {"moving_mean", "moving_var"}


class ShapeError(ValueError):
    """Input, weight or layer shape does not match the network spec."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    params: Mapping = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        missing = LAYER_KINDS[self.kind] - set(self.params)
        if missing:
            raise ValueError(f"layer {self.name or self.kind}: missing params {sorted(missing)}")
        for key in ("kernel", "stride", "pool", "filters", "units"):
            if key in self.params and int(self.params[key]) < 1:
                raise ValueError(f"layer {self.name}: {key} must be positive")

    @property
    def trainable(self) -> bool:
        return self.kind in TRAINABLE_KINDS


def _same_out(size: int, stride: int) -> int:
    return -(-size // stride)


def _layer_shape(layer: LayerSpec, shape: tuple, shapes: Mapping[str, tuple]) -> tuple:
    p, k = layer.params, layer.kind
    if k == "dense":
        if len(shape) != 1:
            raise ShapeError(f"layer {layer.name}: dense expects a vector, got {shape}")
        return (int(p["units"]),)
    if k in ("conv", "maxpool"):
        if len(shape) != 3:
            raise ShapeError(f"layer {layer.name}: {k} expects an image, got {shape}")
        s = int(p["stride"])
        channels = int(p["filters"]) if k == "conv" else shape[2]
        return (_same_out(shape[0], s), _same_out(shape[1], s), channels)
    if k == "deconv":
        if len(shape) != 3:
            raise ShapeError(f"layer {layer.name}: deconv expects an image, got {shape}")
        s = int(p["stride"])
        return (shape[0] * s, shape[1] * s, int(p["filters"]))
    if k == "reshape":
        target = tuple(int(d) for d in p["target_shape"])
        if math.prod(target) != math.prod(shape):
            raise ShapeError(f"layer {layer.name}: cannot reshape {shape} to {target}")
        return target
    if k == "flatten":
        return (math.prod(shape),)
    if k == "residual_add":
        skip = shapes.get(p["skip"])
        if skip is None:
            raise ShapeError(f"layer {layer.name}: unknown skip source {p['skip']!r}")
        if skip != shape:
            raise ShapeError(f"layer {layer.name}: residual inputs differ {skip} vs {shape}")
        return shape
    return shape


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input_shape: tuple
    layers: tuple[LayerSpec, ...]
    output_shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "output_shape", tuple(self.output_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names) or "" in names:
            raise ValueError(f"{self.name}: layer names must be unique and non-empty")
        traced = trace_shapes(self)[-1][1] if self.layers else self.input_shape
        if traced != self.output_shape:
            raise ShapeError(f"{self.name}: traced output {traced} != declared {self.output_shape}")

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    @property
    def trainable_layers(self) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.trainable]


def trace_shapes(spec: NetworkSpec) -> list[tuple[str, tuple]]:
    """Output shape of every layer, in order."""
    shape, shapes, out = spec.input_shape, {}, []
    for layer in spec.layers:
        shape = _layer_shape(layer, shape, shapes)
        shapes[layer.name] = shape
        out.append((layer.name, shape))
    return out


def param_shapes(spec: NetworkSpec) -> dict[str, dict[str, tuple]]:
    """Required array shapes per trainable layer (torch kernel layouts)."""
    result, shape = {}, spec.input_shape
    for name, out_shape in trace_shapes(spec):
        layer = spec.layer(name)
        p = layer.params
        if layer.kind == "dense":
            result[name] = {"kernel": (shape[0], out_shape[0]), "bias": (out_shape[0],)}
        elif layer.kind == "conv":
            kk = int(p["kernel"])
            result[name] = {"kernel": (out_shape[2], shape[2], kk, kk), "bias": (out_shape[2],)}
        elif layer.kind == "deconv":
            kk = int(p["kernel"])
            result[name] = {"kernel": (shape[2], out_shape[2], kk, kk), "bias": (out_shape[2],)}
        elif layer.kind == "batchnorm":
            c = (shape[-1],)
            result[name] = {"gamma": c, "beta": c, "moving_mean": c, "moving_var": c}
        shape = out_shape
    return result


# --------------------------------------------------------------------------- #
# architecture builders


def generator_spec(resolution: int = 128, latent_dim: int = LATENT_DIM, filters: int = 128,
                   blocks: int = 3, residual_blocks: int = 2, slope: float = 0.2,
                   momentum: float = 0.8) -> NetworkSpec:
    """Dense projection, then ``blocks`` upscaling stages of residual deconvolutions."""
    start = resolution // 2 ** blocks
    if start < 1 or start * 2 ** blocks != resolution:
        raise ValueError(f"resolution {resolution} is not divisible by 2**{blocks}")
    layers = [
        LayerSpec("dense", {"units": start * start * filters}, "dense"),
        LayerSpec("reshape", {"target_shape": (start, start, filters)}, "reshape"),
    ]
    for b in range(1, blocks + 1):
        up = f"up{b}"
        layers.append(LayerSpec("deconv", {"filters": filters, "kernel": 4, "stride": 2}, up))
        skip = up
        for r in range(1, residual_blocks + 1):
            pre = f"{up}_res{r}"
            layers += [
                LayerSpec("deconv", {"filters": filters, "kernel": 4, "stride": 1}, f"{pre}_deconv1"),
                LayerSpec("batchnorm", {"momentum": momentum}, f"{pre}_bn"),
                LayerSpec("leakyrelu", {"slope": slope}, f"{pre}_act1"),
                LayerSpec("deconv", {"filters": filters, "kernel": 4, "stride": 1}, f"{pre}_deconv2"),
                LayerSpec("residual_add", {"skip": skip}, f"{pre}_add"),
                LayerSpec("leakyrelu", {"slope": slope}, f"{pre}_act2"),
            ]
            skip = f"{pre}_act2"
    layers += [
        LayerSpec("conv", {"filters": 1, "kernel": 3, "stride": 1}, "out_conv"),
        LayerSpec("sigmoid", {}, "out_sigmoid"),
    ]
    name = f"generator_{resolution}"
    if filters != 128:
        name += f"_f{filters}"
    if (latent_dim, blocks, residual_blocks) != (LATENT_DIM, 3, 2):
        name += f"_z{latent_dim}_b{blocks}r{residual_blocks}"
    return NetworkSpec(name, (latent_dim,), tuple(layers), (resolution, resolution, 1))


def discriminator_spec(resolution: int = 128, base_filters: int = 64, slope: float = 0.2,
                       dropout: float = 0.4) -> NetworkSpec:
    """Nine 3×3 convolutions (base, 2×base, 4×base filters in groups of three).

    The first layer of each group has stride 2.
    """
    filters = [base_filters] * 3 + [2 * base_filters] * 3 + [4 * base_filters] * 3
    layers = []
    for i, nf in enumerate(filters, start=1):
        stride = 2 if i % 3 == 1 else 1
        layers.append(LayerSpec("conv", {"filters": nf, "kernel": 3, "stride": stride}, f"conv{i}"))
        layers.append(LayerSpec("leakyrelu", {"slope": slope}, f"act{i}"))
        if i % 3 == 0:
            layers.append(LayerSpec("dropout", {"rate": dropout}, f"drop{i}"))
    layers += [
        LayerSpec("flatten", {}, "flatten"),
        LayerSpec("dense", {"units": 1}, "fc"),
        LayerSpec("sigmoid", {}, "out_sigmoid"),
    ]
    name = f"discriminator_{resolution}" + (f"_f{base_filters}" if base_filters != 64 else "")
    return NetworkSpec(name, (resolution, resolution, 1), tuple(layers), (1,))


_VGG19_STAGES = ((64, 2), (128, 2), (256, 4), (512, 4), (512, 4))


def _head(layers: list, num_classes: int, width: int = 4096, rate: float = 0.5) -> None:
    layers += [
        LayerSpec("flatten", {}, "flatten"),
        LayerSpec("dense", {"units": width}, "fc1"),
        LayerSpec("relu", {}, "fc1_relu"),
        LayerSpec("dropout", {"rate": rate}, "fc1_drop"),
        LayerSpec("dense", {"units": width}, "fc2"),
        LayerSpec("relu", {}, "fc2_relu"),
        LayerSpec("dropout", {"rate": rate}, "fc2_drop"),
        LayerSpec("dense", {"units": num_classes}, "logits"),
        LayerSpec("softmax", {}, "softmax"),
    ]


def classifier_spec(arch: str, num_classes: int, resolution: int = 128) -> NetworkSpec:
    """VGG-19 or AlexNet on single-channel ``resolution``² input.

    The fully-connected head is sized from the traced feature map, so any
    resolution divisible by 32 works.
    """
    if num_classes not in (2, 4):
        raise ValueError(f"num_classes must be 2 or 4, got {num_classes}")
    if resolution % 32:
        raise ValueError(f"classifier resolution must be divisible by 32, got {resolution}")
    layers: list[LayerSpec] = []
    if arch == "vgg19":
        for s, (nf, reps) in enumerate(_VGG19_STAGES, start=1):
            for r in range(1, reps + 1):
                layers.append(LayerSpec("conv", {"filters": nf, "kernel": 3, "stride": 1}, f"block{s}_conv{r}"))
                layers.append(LayerSpec("relu", {}, f"block{s}_relu{r}"))
            layers.append(LayerSpec("maxpool", {"pool": 2, "stride": 2}, f"block{s}_pool"))
    elif arch == "alexnet":
        convs = [("conv1", 96, 11, 4, True), ("conv2", 256, 5, 1, True), ("conv3", 384, 3, 1, False),
                 ("conv4", 384, 3, 1, False), ("conv5", 256, 3, 1, True)]
        for name, nf, kk, stride, pool in convs:
            layers.append(LayerSpec("conv", {"filters": nf, "kernel": kk, "stride": stride}, name))
            layers.append(LayerSpec("relu", {}, f"{name}_relu"))
            if pool:
                layers.append(LayerSpec("maxpool", {"pool": 3, "stride": 2}, f"{name}_pool"))
    else:
        raise ValueError(f"unsupported classifier architecture {arch!r}")
    _head(layers, num_classes)
    return NetworkSpec(f"{arch}_{num_classes}_{resolution}", (resolution, resolution, 1), tuple(layers), (num_classes,))


_NAME = re.compile(r"^(generator|discriminator)_(\d+)(?:_f(\d+))?(?:_z(\d+)_b(\d+)r(\d+))?$")


def spec_from_name(name: str) -> NetworkSpec:
    """Rebuild a spec from the name stored in a checkpoint."""
    m = _NAME.match(name)
    if m:
        kind, res, f, z, b, r = m.groups()
        if kind == "generator":
            return generator_spec(int(res), int(z or LATENT_DIM), int(f or 128), int(b or 3), int(r or 2))
        if z is None:
            return discriminator_spec(int(res), int(f or 64))
    parts = name.rsplit("_", 2)
    if len(parts) == 3 and parts[0] in ("vgg19", "alexnet"):
        return classifier_spec(parts[0], int(parts[1]), int(parts[2]))
    raise ValueError(f"unrecognized spec name {name!r}")


# --------------------------------------------------------------------------- #
# weights


@dataclass
class WeightSet:
    """Named arrays for one spec: ``entries[layer][param] -> tensor``.

    Trainable parameters are leaf tensors with ``requires_grad``; batchnorm
    moving statistics are plain buffers. Optimizers update the student sets
    in place; snapshots are taken with :meth:`clone`.
    """

    spec_name: str
    entries: dict[str, dict[str, torch.Tensor]]

    def arrays(self) -> Iterator[tuple[str, torch.Tensor]]:
        for layer in self.entries:
            for param, tensor in self.entries[layer].items():
                yield f"{layer}/{param}", tensor

    def trainable(self) -> list[torch.Tensor]:
        return [t for key, t in self.arrays() if key.split("/")[1] not in NON_TRAINABLE_PARAMS]

    def clone(self, requires_grad: bool = False) -> "WeightSet":
        entries = {}
        for layer, params in self.entries.items():
            entries[layer] = {}
            for param, t in params.items():
                c = t.detach().clone()
                if requires_grad and param not in NON_TRAINABLE_PARAMS:
                    c.requires_grad_(True)
                entries[layer][param] = c
        return WeightSet(self.spec_name, entries)

    def equal(self, other: "WeightSet") -> bool:
        """Bit-identical comparison."""
        if self.spec_name != other.spec_name:
            return False
        mine, theirs = dict(self.arrays()), dict(other.arrays())
        if mine.keys() != theirs.keys():
            return False
        return all(mine[k].dtype == theirs[k].dtype and torch.equal(mine[k], theirs[k]) for k in mine)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.arrays())[1].dtype


def validate_weights(weights: WeightSet, spec: NetworkSpec) -> None:
    if weights.spec_name != spec.name:
        raise ShapeError(f"weights are for {weights.spec_name!r}, spec is {spec.name!r}")
    required = param_shapes(spec)
    for layer, params in required.items():
        entry = weights.entries.get(layer)
        if entry is None:
            raise ShapeError(f"{spec.name}: no weights for layer {layer!r}")
        for param, shape in params.items():
            if param not in entry:
                raise ShapeError(f"{spec.name}/{layer}: missing {param}")
            if tuple(entry[param].shape) != shape:
                raise ShapeError(f"{spec.name}/{layer}: {param} has shape {tuple(entry[param].shape)}, needs {shape}")
    extra = set(weights.entries) - set(required)
    if extra:
        raise ShapeError(f"{spec.name}: unexpected weight entries {sorted(extra)}")


def init_weights(spec: NetworkSpec, seed: int, dtype: torch.dtype = torch.float32) -> WeightSet:
    """Fan-in scaled normal kernels (std = sqrt(2 / fan_in)), zero biases."""
    entries = {}
    for layer, shapes in param_shapes(spec).items():
        gen = torch.Generator().manual_seed(derive_seed(seed, spec.name, layer))
        entry = {}
        if "gamma" in shapes:
            c = shapes["gamma"]
            entry = {"gamma": torch.ones(c, dtype=dtype), "beta": torch.zeros(c, dtype=dtype),
                     "moving_mean": torch.zeros(c, dtype=dtype), "moving_var": torch.ones(c, dtype=dtype)}
        else:
            kshape = shapes["kernel"]
            if spec.layer(layer).kind == "dense":
                fan_in = kshape[0]
            elif spec.layer(layer).kind == "conv":
                fan_in = kshape[1] * kshape[2] * kshape[3]
            else:
                fan_in = kshape[0] * kshape[2] * kshape[3]
            std = math.sqrt(2.0 / fan_in)
            entry["kernel"] = (torch.randn(kshape, generator=gen, dtype=torch.float64) * std).to(dtype)
            entry["bias"] = torch.zeros(shapes["bias"], dtype=dtype)
        for param, t in entry.items():
            if param not in NON_TRAINABLE_PARAMS:
                t.requires_grad_(True)
        entries[layer] = entry
    return WeightSet(spec.name, entries)


def save_weights(weights: WeightSet, path: str | Path) -> Path:
    """Write a checkpoint (safetensors container, spec name and shapes in metadata)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {key: t.detach().contiguous() for key, t in weights.arrays()}
    header = {
        "format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "spec_name": weights.spec_name,
        "layers": list(weights.entries), "shapes": {k: list(t.shape) for k, t in tensors.items()},
    }
    # one metadata key: safetensors does not preserve key order, which would break byte-identical reruns
    tmp = path.with_name(path.name + ".tmp")
    save_file(tensors, str(tmp), metadata={_HEADER_KEY: json.dumps(header, sort_keys=True)})
    tmp.replace(path)
    return path


def checkpoint_header(path: str | Path) -> dict:
    """Decoded header of a checkpoint written by :func:`save_weights`; ShapeError otherwise."""
    from safetensors import safe_open

    try:
        with safe_open(str(path), framework="pt") as fh:
            raw = (fh.metadata() or {}).get(_HEADER_KEY)
        header = json.loads(raw) if raw else {}
    except (OSError, ValueError) as exc:
        raise ShapeError(f"{path} is not a readable checkpoint: {exc}") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ShapeError(f"{path} is not a weight checkpoint")
    return header


def load_weights(path: str | Path, spec: NetworkSpec | None = None, requires_grad: bool = False) -> WeightSet:
    path = Path(path)
    meta = checkpoint_header(path)
    flat = load_file(str(path))
    entries: dict[str, dict[str, torch.Tensor]] = {layer: {} for layer in meta["layers"]}
    for key, tensor in flat.items():
        layer, param = key.split("/", 1)
        entries[layer][param] = tensor
    ws = WeightSet(meta["spec_name"], entries)
    shapes = meta["shapes"]
    for key, tensor in ws.arrays():
        if list(tensor.shape) != shapes[key]:
            raise ShapeError(f"{path}: {key} shape {list(tensor.shape)} disagrees with header {shapes[key]}")
    if spec is not None:
        validate_weights(ws, spec)
    if requires_grad:
        ws = ws.clone(requires_grad=True)
    return ws


# --------------------------------------------------------------------------- #
# forward


def _pad_same(size: int, kernel: int, stride: int) -> tuple[int, int]:
    total = max((_same_out(size, stride) - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def _conv_same(h, w, b, stride):
    k = w.shape[-1]
    top, bottom = _pad_same(h.shape[2], k, stride)
    left, right = _pad_same(h.shape[3], k, stride)
    if top == bottom and left == right:
        return F.conv2d(h, w, b, stride=stride, padding=(top, left))
    return F.conv2d(F.pad(h, (left, right, top, bottom)), w, b, stride=stride)


def _deconv_same(h, w, b, stride):
    k = w.shape[-1]
    out_h, out_w = h.shape[2] * stride, h.shape[3] * stride
    lo = max(k - stride, 0) // 2
    if 2 * lo == k - stride:
        return F.conv_transpose2d(h, w, b, stride=stride, padding=lo)
    full = F.conv_transpose2d(h, w, b, stride=stride)
    return full[:, :, lo:lo + out_h, lo:lo + out_w]


def _maxpool_same(h, pool, stride):
    top, bottom = _pad_same(h.shape[2], pool, stride)
    left, right = _pad_same(h.shape[3], pool, stride)
    if top or bottom or left or right:
        h = F.pad(h, (left, right, top, bottom), value=float("-inf"))
    return F.max_pool2d(h, pool, stride)


def _batchnorm(h, entry, layer, mode, stats):
    eps = float(layer.params.get("eps", 1e-3))
    momentum = float(layer.params["momentum"])
    dims = (0, 2, 3) if h.dim() == 4 else (0,)
    view = (1, -1, 1, 1) if h.dim() == 4 else (1, -1)
    if mode == "train":
        mean = h.mean(dim=dims)
        var = h.var(dim=dims, unbiased=False)
        if stats is not None:
            with torch.no_grad():
                stats[layer.name] = {
                    "moving_mean": momentum * entry["moving_mean"] + (1 - momentum) * mean.detach(),
                    "moving_var": momentum * entry["moving_var"] + (1 - momentum) * var.detach(),
                }
    else:
        mean, var = entry["moving_mean"], entry["moving_var"]
    h = (h - mean.view(view)) / torch.sqrt(var.view(view) + eps)
    return h * entry["gamma"].view(view) + entry["beta"].view(view)


def _dropout(h, rate, rng):
    if rate <= 0.0:
        return h
    keep = torch.rand(h.shape, generator=rng, dtype=h.dtype) >= rate
    return h * keep / (1.0 - rate)


def _apply(layer: LayerSpec, h, weights: WeightSet, outputs, mode, rng, stats):
    p, k = layer.params, layer.kind
    entry = weights.entries.get(layer.name)
    if k == "dense":
        return h @ entry["kernel"] + entry["bias"]
    if k == "conv":
        return _conv_same(h, entry["kernel"], entry["bias"], int(p["stride"]))
    if k == "deconv":
        return _deconv_same(h, entry["kernel"], entry["bias"], int(p["stride"]))
    if k == "batchnorm":
        return _batchnorm(h, entry, layer, mode, stats)
    if k == "leakyrelu":
        return F.leaky_relu(h, float(p["slope"]))
    if k == "relu":
        return F.relu(h)
    if k == "dropout":
        return _dropout(h, float(p["rate"]), rng) if mode == "train" else h
    if k == "sigmoid":
        return torch.sigmoid(h)
    if k == "softmax":
        return torch.softmax(h, dim=-1)
    if k == "reshape":
        hh, ww, cc = p["target_shape"]
        return h.reshape(h.shape[0], hh, ww, cc).permute(0, 3, 1, 2)
    if k == "flatten":
        return h.permute(0, 2, 3, 1).reshape(h.shape[0], -1) if h.dim() == 4 else h
    if k == "residual_add":
        return h + outputs[p["skip"]]
    if k == "maxpool":
        return _maxpool_same(h, int(p["pool"]), int(p["stride"]))
    raise ValueError(k)


def forward(weights: WeightSet, spec: NetworkSpec, x, mode: str = "infer", *,
            rng: torch.Generator | None = None, stats: dict | None = None, logits: bool = False) -> torch.Tensor:
    """Run ``spec`` on a channels-last batch ``x`` of shape ``(N, *input_shape)``.

    ``mode="train"`` activates dropout (drawing masks from ``rng``) and
    normalizes with batch statistics; the updated moving statistics are
    written into ``stats`` when a dict is supplied (weights are not touched).
    ``logits=True`` stops before a terminal sigmoid/softmax.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    validate_weights(weights, spec)
    x = torch.as_tensor(x, dtype=weights.dtype)
    if tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeError(f"{spec.name}: input batch shape {tuple(x.shape)} does not match {spec.input_shape}")
    h = x.permute(0, 3, 1, 2) if x.dim() == 4 else x
    outputs = {}
    n_layers = len(spec.layers)
    for i, layer in enumerate(spec.layers):
        if logits and i == n_layers - 1 and layer.kind in ("sigmoid", "softmax"):
            break
        try:
            h = _apply(layer, h, weights, outputs, mode, rng, stats)
        except RuntimeError as exc:
            raise ShapeError(f"{spec.name}/{layer.name} ({layer.kind}): {exc}") from exc
        outputs[layer.name] = h
    return h.permute(0, 2, 3, 1) if h.dim() == 4 else h


def apply_stats(weights: WeightSet, stats: Mapping[str, Mapping[str, torch.Tensor]]) -> None:
    """Copy moving statistics collected by a train-mode forward into ``weights``."""
    with torch.no_grad():
        for layer, values in stats.items():
            for param, value in values.items():
                weights.entries[layer][param].copy_(value)
