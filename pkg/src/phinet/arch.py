"""Phi-Net and ResNet-- topologies, parameter storage and inference.

A network is described declaratively (:class:`PhiNetSpec`,
:class:`ResNetMinusSpec`); :func:`build_phinet` and
:func:`build_resnet_minus` turn a description into a :class:`Network`
holding a :class:`ParamStore`.

Phi-Net runs three paths over the same input and joins them::

    conv branch  --------------------------\\
    stem -> 7 residual modules  ------------+-- concat -> GAP -> FC(K) -> softmax
    pool branch  --------------------------/
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import ops
from .tensor import Tensor, no_grad


# ---------------------------------------------------------------- layer specs


@dataclass(frozen=True)
class ConvLayer:
    """Convolution (+ optional batch norm) + ReLU. ``padding=None`` means (k-1)//2."""

    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: Optional[int] = None

    @property
    def pad(self) -> int:
        return (self.kernel - 1) // 2 if self.padding is None else self.padding


@dataclass(frozen=True)
class PoolLayer:
    kind: str = "max"
    window: int = 2
    stride: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("max", "avg"):
            raise ValueError(f"unknown pooling kind {self.kind!r}")


Layer = Union[ConvLayer, PoolLayer]


@dataclass(frozen=True)
class ResidualModuleSpec:
    """Two 3^3 convolutions with an identity (or 1^3 projection) skip."""

    channels: int
    stride: int = 1


def _default_conv_branch() -> Tuple[Layer, ...]:
    return (ConvLayer(8, 7, 4), ConvLayer(16, 3, 2))


def _default_pool_branch() -> Tuple[Layer, ...]:
    return (PoolLayer("max", 2), PoolLayer("avg", 2), ConvLayer(8, 1, 1), PoolLayer("max", 2))


def _residual_stack(widths: Sequence[int], stem_width: int, strides: Optional[Sequence[int]]):
    if strides is None:
        strides, prev = [], stem_width
        for w in widths:
            strides.append(2 if w != prev else 1)
            prev = w
    if len(strides) != len(widths):
        raise ValueError("residual_strides must match residual_widths in length")
    return tuple(ResidualModuleSpec(int(w), int(s)) for w, s in zip(widths, strides))


@dataclass
class PhiNetSpec:
    conv_branch: Tuple[Layer, ...] = field(default_factory=_default_conv_branch)
    stem: ConvLayer = ConvLayer(8, 3, 2)
    residual_widths: Tuple[int, ...] = (8, 8, 16, 16, 16, 32, 32)
    residual_strides: Optional[Tuple[int, ...]] = None
    pool_branch: Tuple[Layer, ...] = field(default_factory=_default_pool_branch)
    num_classes: int = 3
    batch_norm: bool = True
    in_channels: int = 1
    input_extent: int = 32

    @property
    def residual_modules(self) -> Tuple[ResidualModuleSpec, ...]:
        return _residual_stack(self.residual_widths, self.stem.out_channels, self.residual_strides)


@dataclass
class ResNetMinusSpec:
    stem: ConvLayer = ConvLayer(8, 3, 2)
    residual_widths: Tuple[int, ...] = (8, 8, 8, 16, 16, 16, 16, 32, 32, 32, 32)
    residual_strides: Optional[Tuple[int, ...]] = None
    num_classes: int = 3
    batch_norm: bool = True
    in_channels: int = 1
    input_extent: int = 32

    @property
    def residual_modules(self) -> Tuple[ResidualModuleSpec, ...]:
        return _residual_stack(self.residual_widths, self.stem.out_channels, self.residual_strides)


def spec_to_dict(spec) -> dict:
    """JSON-friendly form of a network spec (inverse of :func:`spec_from_dict`)."""
    arch = "phinet" if isinstance(spec, PhiNetSpec) else "resnet_minus"
    out = {"arch": arch}
    for f in dataclasses.fields(spec):
        value = getattr(spec, f.name)
        if f.name in ("conv_branch", "pool_branch"):
            value = [_layer_to_dict(layer) for layer in value]
        elif f.name == "stem":
            value = _layer_to_dict(value)
        elif isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out


def _layer_to_dict(layer: Layer) -> dict:
    if isinstance(layer, ConvLayer):
        return {"type": "conv", **dataclasses.asdict(layer)}
    return {"type": "pool", **dataclasses.asdict(layer)}


def _layer_from_dict(d: dict) -> Layer:
    d = dict(d)
    kind = d.pop("type", "conv")
    if kind == "conv":
        return ConvLayer(**d)
    if kind == "pool":
        return PoolLayer(**d)
    raise ValueError(f"unknown layer type {kind!r}")


def spec_from_dict(d: dict):
    d = dict(d)
    arch = d.pop("arch", "phinet")
    cls = {"phinet": PhiNetSpec, "resnet_minus": ResNetMinusSpec}.get(arch)
    if cls is None:
        raise ValueError(f"unknown architecture {arch!r}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown model keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in d.items():
        if key in ("conv_branch", "pool_branch"):
            value = tuple(_layer_from_dict(x) for x in value)
        elif key == "stem":
            value = _layer_from_dict(value) if isinstance(value, dict) else value
        elif key in ("residual_widths", "residual_strides") and value is not None:
            value = tuple(int(v) for v in value)
        kwargs[key] = value
    return cls(**kwargs)


# ---------------------------------------------------------------- parameters


class ParamStore:
    """Named learnable tensors plus batch-norm running moments.

    Names are hierarchical (``center.res3.conv1.weight``); iteration follows
    insertion order, which is fixed by the network layout.
    """

    def __init__(self, seed: Optional[int] = None):
        self.seed = seed
        self.params: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray, buffer: bool = False) -> None:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        (self.buffers if buffer else self.params)[name] = value

    def __getitem__(self, name: str) -> np.ndarray:
        if name in self.params:
            return self.params[name]
        return self.buffers[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params or name in self.buffers

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> "ParamStore":
        out = ParamStore(self.seed)
        out.params = {k: v.copy() for k, v in self.params.items()}
        out.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return out

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(self.seed)
        out.params = {k: v.astype(dtype) for k, v in self.params.items()}
        out.buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        return out

    def equals(self, other: "ParamStore") -> bool:
        """Bitwise equality of every named array."""
        if list(self.params) != list(other.params) or list(self.buffers) != list(other.buffers):
            return False
        pairs = list(zip(self.params.values(), other.params.values()))
        pairs += list(zip(self.buffers.values(), other.buffers.values()))
        return all(a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in pairs)


# ---------------------------------------------------------------- blocks


class _Ctx:
    """Per-forward view of the parameters as tape leaves."""

    def __init__(self, store: ParamStore, training: bool, track: bool):
        self.store = store
        self.training = training
        self.leaves: Dict[str, Tensor] = {}
        self.track = track

    def p(self, name: str) -> Tensor:
        t = self.leaves.get(name)
        if t is None:
            t = Tensor(self.store.params[name], requires_grad=self.track, name=name)
            self.leaves[name] = t
        return t

    def bn_state(self, prefix: str) -> ops.BatchNormState:
        return ops.BatchNormState(
            self.store.buffers[prefix + ".running_mean"], self.store.buffers[prefix + ".running_var"]
        )


class _Block:
    def declare(self, prefix: str, in_ch: int) -> Tuple[list, int]:
        raise NotImplementedError

    def extent(self, n: int) -> int:
        raise NotImplementedError

    def __call__(self, x: Tensor, ctx: _Ctx) -> Tensor:
        raise NotImplementedError


def _bn_entries(prefix: str, ch: int) -> list:
    return [
        (prefix + ".gamma", (ch,), "ones"),
        (prefix + ".beta", (ch,), "zeros"),
        (prefix + ".running_mean", (ch,), "buffer_zeros"),
        (prefix + ".running_var", (ch,), "buffer_ones"),
    ]


class ConvBlock(_Block):
    def __init__(self, layer: ConvLayer, bn: bool):
        self.layer, self.bn = layer, bn

    def declare(self, prefix, in_ch):
        self.prefix, self.in_ch = prefix, in_ch
        L = self.layer
        self.conv = ops.ConvSpec(in_ch, L.out_channels, L.kernel, L.stride, L.pad)
        entries = [(prefix + ".weight", (L.out_channels, in_ch, L.kernel, L.kernel, L.kernel), "he")]
        if self.bn:
            entries += _bn_entries(prefix + ".bn", L.out_channels)
        else:
            entries.append((prefix + ".bias", (L.out_channels,), "zeros"))
        return entries, L.out_channels

    def extent(self, n):
        return self.conv.output_extent(n)

    def __call__(self, x, ctx):
        pre = self.prefix
        if self.bn:
            y = ops.conv3d(x, ctx.p(pre + ".weight"), None, self.conv)
            y = ops.batch_norm(y, ctx.p(pre + ".bn.gamma"), ctx.p(pre + ".bn.beta"), ctx.bn_state(pre + ".bn"), ctx.training)
        else:
            y = ops.conv3d(x, ctx.p(pre + ".weight"), ctx.p(pre + ".bias"), self.conv)
        return ops.relu(y)


class PoolBlock(_Block):
    def __init__(self, layer: PoolLayer):
        self.layer = layer

    def declare(self, prefix, in_ch):
        return [], in_ch

    def extent(self, n):
        w, s = self.layer.window, self.layer.stride or self.layer.window
        if w > n:
            raise ValueError(f"pooling window {w} larger than extent {n}")
        return (n - w) // s + 1

    def __call__(self, x, ctx):
        fn = ops.max_pool3d if self.layer.kind == "max" else ops.avg_pool3d
        return fn(x, self.layer.window, self.layer.stride or self.layer.window)


class ResidualBlock(_Block):
    """conv-bn-relu-conv-bn, plus identity or projection skip, then ReLU."""

    def __init__(self, spec: ResidualModuleSpec, bn: bool):
        self.spec, self.bn = spec, bn

    def declare(self, prefix, in_ch):
        self.prefix = prefix
        F, s = self.spec.channels, self.spec.stride
        self.conv1 = ops.ConvSpec(in_ch, F, 3, s, 1)
        self.conv2 = ops.ConvSpec(F, F, 3, 1, 1)
        self.project = in_ch != F or s > 1
        entries = [(prefix + ".conv1.weight", (F, in_ch, 3, 3, 3), "he")]
        entries += _bn_entries(prefix + ".bn1", F) if self.bn else [(prefix + ".conv1.bias", (F,), "zeros")]
        entries.append((prefix + ".conv2.weight", (F, F, 3, 3, 3), "he"))
        entries += _bn_entries(prefix + ".bn2", F) if self.bn else [(prefix + ".conv2.bias", (F,), "zeros")]
        if self.project:
            self.proj = ops.ConvSpec(in_ch, F, 1, s, 0)
            entries.append((prefix + ".proj.weight", (F, in_ch, 1, 1, 1), "he"))
            entries += _bn_entries(prefix + ".proj_bn", F) if self.bn else [(prefix + ".proj.bias", (F,), "zeros")]
        return entries, F

    def extent(self, n):
        return self.conv2.output_extent(self.conv1.output_extent(n))

    def _conv_bn(self, x, ctx, conv_name, bn_name, spec):
        pre = self.prefix
        if self.bn:
            y = ops.conv3d(x, ctx.p(f"{pre}.{conv_name}.weight"), None, spec)
            return ops.batch_norm(
                y, ctx.p(f"{pre}.{bn_name}.gamma"), ctx.p(f"{pre}.{bn_name}.beta"),
                ctx.bn_state(f"{pre}.{bn_name}"), ctx.training,
            )
        return ops.conv3d(x, ctx.p(f"{pre}.{conv_name}.weight"), ctx.p(f"{pre}.{conv_name}.bias"), spec)

    def __call__(self, x, ctx):
        y = ops.relu(self._conv_bn(x, ctx, "conv1", "bn1", self.conv1))
        y = self._conv_bn(y, ctx, "conv2", "bn2", self.conv2)
        skip = self._conv_bn(x, ctx, "proj", "proj_bn", self.proj) if self.project else x
        return ops.relu(ops.add(y, skip))


def _make_blocks(layers: Sequence[Layer], bn: bool) -> List[_Block]:
    return [ConvBlock(L, bn) if isinstance(L, ConvLayer) else PoolBlock(L) for L in layers]


class Path:
    """A named chain of blocks."""

    def __init__(self, name: str, blocks: List[_Block]):
        self.name, self.blocks = name, blocks

    def declare(self, in_ch: int) -> Tuple[list, int]:
        entries, ch = [], in_ch
        for i, block in enumerate(self.blocks):
            label = getattr(block, "label", str(i))
            e, ch = block.declare(f"{self.name}.{label}", ch)
            entries += e
        return entries, ch

    def extent(self, n: int) -> int:
        for block in self.blocks:
            n = block.extent(n)
        return n

    def __call__(self, x: Tensor, ctx: _Ctx) -> Tensor:
        for block in self.blocks:
            x = block(x, ctx)
        return x

    @property
    def residual_count(self) -> int:
        return sum(isinstance(b, ResidualBlock) for b in self.blocks)


def _center_path(name: str, spec, bn: bool) -> Path:
    stem = ConvBlock(spec.stem, bn)
    stem.label = "stem"
    blocks: List[_Block] = [stem]
    for i, rs in enumerate(spec.residual_modules, start=1):
        block = ResidualBlock(rs, bn)
        block.label = f"res{i}"
        blocks.append(block)
    return Path(name, blocks)


# ---------------------------------------------------------------- network


class Network:
    """Executable network: parallel paths, channel concat, GAP, FC head, softmax."""

    def __init__(self, spec, paths: List[Path]):
        self.spec = spec
        self.paths = paths
        self.num_classes = spec.num_classes
        entries = []
        widths = []
        for path in paths:
            e, ch = path.declare(spec.in_channels)
            entries += e
            widths.append(ch)
        self.feature_width = sum(widths)
        entries += [
            ("head.weight", (self.feature_width, self.num_classes), "he"),
            ("head.bias", (self.num_classes,), "zeros"),
        ]
        self.entries = entries
        self.params: Optional[ParamStore] = None

    @property
    def residual_module_count(self) -> int:
        return sum(p.residual_count for p in self.paths)

    def branch_extents(self, n: int) -> List[int]:
        return [p.extent(n) for p in self.paths]

    def check_extent(self, n: int) -> int:
        """Static shape flow: every path must land on the same spatial extent."""
        try:
            extents = self.branch_extents(n)
        except ValueError as exc:
            raise ValueError(f"input extent {n} too small for the downsampling chain: {exc}") from None
        if len(set(extents)) != 1:
            detail = ", ".join(f"{p.name}={e}" for p, e in zip(self.paths, extents))
            raise ValueError(f"branch spatial mismatch at concatenation: {detail}")
        return extents[0]

    def initialize(self, seed: int) -> ParamStore:
        rng = np.random.default_rng(seed)
        store = ParamStore(seed)
        for name, shape, kind in self.entries:
            if kind == "he":
                fan_in = int(np.prod(shape[1:])) if len(shape) > 2 else shape[0]
                value = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
                store.add(name, value)
            elif kind == "zeros":
                store.add(name, np.zeros(shape, np.float32))
            elif kind == "ones":
                store.add(name, np.ones(shape, np.float32))
            elif kind == "buffer_zeros":
                store.add(name, np.zeros(shape, np.float32), buffer=True)
            elif kind == "buffer_ones":
                store.add(name, np.ones(shape, np.float32), buffer=True)
        self.params = store
        return store

    def _validate_input(self, x: Tensor) -> None:
        if x.ndim != 5 or x.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected N x {self.spec.in_channels} x D x H x W input, got {x.shape}")
        for n in x.shape[2:]:
            self.check_extent(n)

    def logits(
        self, x, training: bool = False, track: bool = False, leaves: Optional[Dict[str, Tensor]] = None
    ) -> Tuple[Tensor, _Ctx]:
        """Raw class scores and the parameter leaves used to compute them.

        ``leaves`` lets a caller supply its own leaf tensors by name (used by
        gradient checks that perturb and inspect the same objects).
        """
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
        self._validate_input(x)
        ctx = _Ctx(self.params, training, track)
        if leaves:
            ctx.leaves.update(leaves)
        feats = [path(x, ctx) for path in self.paths]
        joined = ops.concat_channels(feats) if len(feats) > 1 else feats[0]
        pooled = ops.global_avg_pool(joined)
        return ops.dense(pooled, ctx.p("head.weight"), ctx.p("head.bias")), ctx

    def forward(self, batch, mode: str = "eval") -> Tensor:
        """Class probabilities, rows summing to 1."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if mode == "eval":
            with no_grad():
                z, _ = self.logits(batch, training=False)
                return ops.softmax(z)
        z, _ = self.logits(batch, training=True, track=True)
        return ops.softmax(z)

    __call__ = forward

    def predict(self, batch) -> Tuple[np.ndarray, np.ndarray]:
        """Class index per item (ties go to the lowest index) and probabilities."""
        probs = self.forward(batch, "eval").data
        return probs.argmax(axis=1), probs


def trace_ops(root: Tensor) -> List[Tensor]:
    """Every node of the recorded graph below ``root`` (each visited once)."""
    seen, out, stack = set(), [], [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        out.append(node)
        stack.extend(node.parents)
    return out


def build_phinet(spec: Optional[PhiNetSpec] = None, seed: int = 0) -> Network:
    spec = spec or PhiNetSpec()
    if spec.num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    bn = spec.batch_norm
    paths = [
        Path("conv", _make_blocks(spec.conv_branch, bn=False)),
        _center_path("center", spec, bn),
        Path("pool", _make_blocks(spec.pool_branch, bn=False)),
    ]
    net = Network(spec, paths)
    net.check_extent(spec.input_extent)
    net.initialize(seed)
    return net


def build_resnet_minus(spec: Optional[ResNetMinusSpec] = None, seed: int = 0) -> Network:
    spec = spec or ResNetMinusSpec()
    if spec.num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    net = Network(spec, [_center_path("center", spec, spec.batch_norm)])
    net.check_extent(spec.input_extent)
    net.initialize(seed)
    return net


def build_model(spec, seed: int = 0) -> Network:
    if isinstance(spec, dict):
        spec = spec_from_dict(spec)
    if isinstance(spec, PhiNetSpec):
        return build_phinet(spec, seed)
    if isinstance(spec, ResNetMinusSpec):
        return build_resnet_minus(spec, seed)
    raise TypeError(f"unsupported spec type {type(spec).__name__}")
