"""Block-structured backbones, bottleneck guided modules, and two-headed streams."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, asdict
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


class SpecError(ValueError):
    """An architecture description is internally inconsistent."""


class AttachmentError(ValueError):
    """A guided module does not fit the feature map it is attached to."""


# -- specs ------------------------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | bn | relu | maxpool
    out_channels: int = 0
    kernel: int = 3
    stride: int = 1
    size: int = 2

    def __post_init__(self):
        if self.kind not in ("conv", "bn", "relu", "maxpool"):
            raise SpecError(f"unknown layer kind {self.kind!r}")


@dataclass
class BackboneSpec:
    block_specs: list
    final_feature_dim: int
    num_classes: int
    in_channels: int = 3
    input_resolution: int = 32

    def __post_init__(self):
        self.block_specs = [
            [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in block]
            for block in self.block_specs
        ]

    @property
    def num_blocks(self) -> int:
        return len(self.block_specs)

    def to_dict(self) -> dict:
        return {
            "block_specs": [[asdict(l) for l in block] for block in self.block_specs],
            "final_feature_dim": self.final_feature_dim,
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "input_resolution": self.input_resolution,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        return cls(**d)

    def shape_chain(self) -> list:
        """(channels, spatial) after each block; raises SpecError when inconsistent."""
        if self.num_blocks < 2:
            raise SpecError(f"a stream needs at least 2 blocks, got {self.num_blocks}")
        if self.num_classes < 2:
            raise SpecError("num_classes must be at least 2")
        c, s = self.in_channels, self.input_resolution
        chain = []
        for bi, block in enumerate(self.block_specs):
            if not block:
                raise SpecError(f"block {bi} is empty")
            for layer in block:
                if layer.kind == "conv":
                    if layer.out_channels < 1 or layer.kernel < 1 or layer.stride < 1:
                        raise SpecError(f"block {bi}: bad conv {layer}")
                    pad = layer.kernel // 2
                    s = (s + 2 * pad - layer.kernel) // layer.stride + 1
                    c = layer.out_channels
                elif layer.kind == "maxpool":
                    if s % layer.size:
                        raise SpecError(f"block {bi}: spatial size {s} not divisible by pool {layer.size}")
                    s //= layer.size
                if s < 1:
                    raise SpecError(f"block {bi}: spatial size collapsed to {s}")
            chain.append((c, s))
        if c != self.final_feature_dim:
            raise SpecError(f"last block has {c} channels but final_feature_dim is {self.final_feature_dim}")
        return chain


@dataclass(frozen=True)
class GuidedModuleSpec:
    in_channels: int
    in_spatial: int
    out_spatial: int
    reduce_channels: int
    out_feature_dim: int
    num_classes: int

    def stage_count(self) -> int:
        s, n = self.in_spatial, 0
        while s > self.out_spatial:
            s = (s + 1) // 2
            n += 1
        if s != self.out_spatial:
            raise SpecError(f"cannot reach spatial {self.out_spatial} from {self.in_spatial} by halving")
        return n


def default_reduce_channels(in_channels: int) -> int:
    return max(in_channels // 2, 4)


def conv_blocks(widths, convs_per_block: int = 1, downsample: str = "stride") -> list:
    """Blocks of conv3x3-bn-relu units that each halve the resolution.

    ``downsample="stride"`` makes the first conv of a block stride 2;
    ``"pool"`` keeps stride 1 and appends a 2x2 max pool instead.
    """
    if downsample not in ("stride", "pool"):
        raise SpecError(f"downsample must be 'stride' or 'pool', got {downsample!r}")
    blocks = []
    for w in widths:
        layers = []
        for i in range(convs_per_block):
            stride = 2 if (i == 0 and downsample == "stride") else 1
            layers += [LayerSpec("conv", w, 3, stride), LayerSpec("bn"), LayerSpec("relu")]
        if downsample == "pool":
            layers.append(LayerSpec("maxpool", size=2))
        blocks.append(layers)
    return blocks


PRESETS = {
    # 2 blocks, for gradient checks on 8x8 inputs
    "tiny": dict(widths=(4, 6), convs_per_block=1),
    "tiny-teacher": dict(widths=(6, 6), convs_per_block=2),
    "small-student": dict(widths=(8, 16, 32), convs_per_block=1),
    "small-teacher": dict(widths=(16, 24, 32), convs_per_block=2),
    "medium-teacher": dict(widths=(24, 48, 32), convs_per_block=2),
}


def preset(name: str, num_classes: int, in_channels: int = 3, resolution: int = 32) -> BackboneSpec:
    if name not in PRESETS:
        raise SpecError(f"unknown backbone preset {name!r}; choose from {sorted(PRESETS)}")
    p = PRESETS[name]
    return BackboneSpec(
        block_specs=conv_blocks(p["widths"], p["convs_per_block"]),
        final_feature_dim=p["widths"][-1],
        num_classes=num_classes,
        in_channels=in_channels,
        input_resolution=resolution,
    )


# -- layers -----------------------------------------------------------------


def _he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Module:
    """Owns named parameters and buffers; subclasses implement ``__call__``."""

    def named_parameters(self, prefix: str = "") -> Iterator:
        for name, value in self.__dict__.items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator:
        for name, value in self.__dict__.items():
            if isinstance(value, np.ndarray):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state(self, prefix: str = "") -> dict:
        """Name -> ndarray for every parameter and buffer (live references)."""
        out = {n: p.data for n, p in self.named_parameters(prefix)}
        out.update(self.named_buffers(prefix))
        return out

    def load_state(self, state: dict, prefix: str = "", strict: bool = True) -> None:
        own = dict(self.named_parameters(prefix))
        bufs = dict(self.named_buffers(prefix))
        missing = [n for n in list(own) + list(bufs) if n not in state]
        if missing:
            raise KeyError(f"checkpoint lacks {len(missing)} tensors, e.g. {missing[:3]}")
        if strict:
            extra = [n for n in state if n.startswith(prefix) and n not in own and n not in bufs]
            if extra:
                raise KeyError(f"checkpoint has unexpected tensors, e.g. {extra[:3]}")
        for n, p in own.items():
            _copy_into(n, p.data, state[n])
        for n, b in bufs.items():
            _copy_into(n, b, state[n])


def _copy_into(name, dst: np.ndarray, src: np.ndarray) -> None:
    if dst.shape != src.shape:
        raise ValueError(f"{name}: checkpoint shape {src.shape} does not match model shape {dst.shape}")
    dst[...] = src


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, stride, rng, dtype):
        self.stride = stride
        self.padding = kernel // 2
        self.weight = Tensor(_he_normal(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel, dtype),
                             requires_grad=True)

    def __call__(self, x, training=True, update_stats=True):
        return T.conv2d(x, self.weight, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels, dtype):
        self.scale = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.shift = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x, training=True, update_stats=True):
        return T.batch_norm2d(x, self.scale, self.shift, self.running_mean, self.running_var,
                              training, update_stats=update_stats)


class ReLU(Module):
    def __call__(self, x, training=True, update_stats=True):
        return T.relu(x)


class MaxPool2d(Module):
    def __init__(self, size):
        self.size = size

    def __call__(self, x, training=True, update_stats=True):
        return T.max_pool2d(x, self.size)


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, dtype):
        self.weight = Tensor(_he_normal(rng, (in_dim, out_dim), in_dim, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return T.matmul(x, self.weight) + self.bias


class Sequential(Module):
    def __init__(self, layers):
        self.layers = list(layers)

    def __call__(self, x, training=True, update_stats=True):
        for layer in self.layers:
            x = layer(x, training, update_stats)
        return x


def decay_exempt_names(module: Module, prefix: str = "") -> set:
    """Names of batch-norm parameters, which are excluded from weight decay."""
    if isinstance(module, BatchNorm2d):
        return {f"{prefix}scale", f"{prefix}shift"}
    out = set()
    for name, value in module.__dict__.items():
        if isinstance(value, Module):
            out |= decay_exempt_names(value, f"{prefix}{name}.")
        elif isinstance(value, list):
            for i, item in enumerate(value):
                if isinstance(item, Module):
                    out |= decay_exempt_names(item, f"{prefix}{name}.{i}.")
    return out


# -- backbone & guided modules ------------------------------------------------


class Backbone(Module):
    def __init__(self, spec: BackboneSpec, rng_seed: int, dtype=T.DEFAULT_DTYPE):
        self.spec = spec
        self.chain = spec.shape_chain()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(rng_seed)
        c = spec.in_channels
        self.blocks = []
        for block in spec.block_specs:
            layers = []
            for l in block:
                if l.kind == "conv":
                    layers.append(Conv2d(c, l.out_channels, l.kernel, l.stride, rng, dtype))
                    c = l.out_channels
                elif l.kind == "bn":
                    layers.append(BatchNorm2d(c, dtype))
                elif l.kind == "relu":
                    layers.append(ReLU())
                else:
                    layers.append(MaxPool2d(l.size))
            self.blocks.append(Sequential(layers))
        self.fc = Linear(spec.final_feature_dim, spec.num_classes, rng, dtype)

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def _check_input(self, x: Tensor) -> None:
        want = (self.spec.in_channels, self.spec.input_resolution, self.spec.input_resolution)
        if x.ndim != 4 or tuple(x.shape[1:]) != want:
            raise T.ShapeError(f"backbone expects input [batch, {want[0]}, {want[1]}, {want[2]}], got {x.shape}")

    def forward_blocks(self, x: Tensor, training: bool, update_stats: bool = True):
        """Returns (outputs of every block, pre-FC feature, logits)."""
        self._check_input(x)
        feats = []
        for block in self.blocks:
            x = block(x, training, update_stats)
            feats.append(x)
        feature = T.global_avg_pool2d(x)
        return feats, feature, self.fc(feature)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return self.forward_blocks(x, training)[2]


class GuidedModule(Module):
    """reduce 1x1 -> stride-2 3x3 stages -> expand 1x1 -> pool -> FC."""

    def __init__(self, spec: GuidedModuleSpec, rng_seed: int, dtype=T.DEFAULT_DTYPE):
        self.spec = spec
        rng = np.random.default_rng(rng_seed)
        r = spec.reduce_channels
        layers = [Conv2d(spec.in_channels, r, 1, 1, rng, dtype), BatchNorm2d(r, dtype), ReLU()]
        for _ in range(spec.stage_count()):
            layers += [Conv2d(r, r, 3, 2, rng, dtype), BatchNorm2d(r, dtype), ReLU()]
        layers += [Conv2d(r, spec.out_feature_dim, 1, 1, rng, dtype),
                   BatchNorm2d(spec.out_feature_dim, dtype), ReLU()]
        self.body = Sequential(layers)
        self.fc = Linear(spec.out_feature_dim, spec.num_classes, rng, dtype)

    def __call__(self, f: Tensor, training: bool = True, update_stats: bool = True):
        s = self.spec
        if f.ndim != 4 or f.shape[1] != s.in_channels or f.shape[2] != s.in_spatial:
            raise AttachmentError(f"guided module expects [batch, {s.in_channels}, {s.in_spatial}, "
                                  f"{s.in_spatial}], got {f.shape}")
        feature = T.global_avg_pool2d(self.body(f, training, update_stats))
        return feature, self.fc(feature)


def build_backbone(spec: BackboneSpec, rng_seed: int, dtype=T.DEFAULT_DTYPE) -> Backbone:
    return Backbone(spec, rng_seed, dtype)


def build_guided_module(spec: GuidedModuleSpec, rng_seed: int, dtype=T.DEFAULT_DTYPE,
                        backbone_feature_dim: Optional[int] = None) -> GuidedModule:
    if backbone_feature_dim is not None and spec.out_feature_dim != backbone_feature_dim:
        raise SpecError(f"guided out_feature_dim {spec.out_feature_dim} != backbone feature dim "
                        f"{backbone_feature_dim}")
    return GuidedModule(spec, rng_seed, dtype)


def guided_spec_for(backbone_spec: BackboneSpec, block: int, reduce_channels: Optional[int] = None):
    """Spec of the guided module consuming the output of ``block`` (0-based)."""
    chain = backbone_spec.shape_chain()
    c, s = chain[block]
    return GuidedModuleSpec(
        in_channels=c,
        in_spatial=s,
        out_spatial=chain[-1][1],
        reduce_channels=reduce_channels or default_reduce_channels(c),
        out_feature_dim=backbone_spec.final_feature_dim,
        num_classes=backbone_spec.num_classes,
    )


# -- streams ------------------------------------------------------------------


@dataclass
class BlockOutputs:
    block_features: list
    backbone_feature: Tensor
    backbone_logits: Tensor
    guided_features: list = field(default_factory=list)
    guided_logits: list = field(default_factory=list)
    guided_blocks: list = field(default_factory=list)

    @property
    def num_heads(self) -> int:
        return len(self.guided_logits)

    def all_logits(self) -> list:
        return [self.backbone_logits, *self.guided_logits]

    def backbone_only(self) -> "BlockOutputs":
        return BlockOutputs(self.block_features, self.backbone_feature, self.backbone_logits)


def forward_collect(backbone: Backbone, guided: list, x: Tensor, training: bool,
                    update_stats: bool = True) -> BlockOutputs:
    """Run the backbone and every attached guided head.

    ``guided`` has one slot per attachment point (C-1 slots); empty slots hold None.
    """
    if len(guided) != backbone.num_blocks - 1:
        raise AttachmentError(f"expected {backbone.num_blocks - 1} guided slots, got {len(guided)}")
    feats, feature, logits = backbone.forward_blocks(x, training, update_stats)
    out = BlockOutputs(feats[:-1], feature, logits)
    for b, head in enumerate(guided):
        if head is None:
            continue
        try:
            gf, gl = head(feats[b], training, update_stats)
        except (AttachmentError, T.ShapeError) as e:
            raise AttachmentError(f"block {b}: {e}") from None
        out.guided_features.append(gf)
        out.guided_logits.append(gl)
        out.guided_blocks.append(b)
    return out


def attachment_points(num_blocks: int, num_pairs: Optional[int]) -> list:
    """Blocks that receive a guided module; deepest first when fewer than C-1."""
    slots = num_blocks - 1
    n = slots if num_pairs is None else num_pairs
    if not 0 <= n <= slots:
        raise SpecError(f"number of guided pairs must be in [0, {slots}], got {n}")
    return list(range(slots - n, slots))


class Stream(Module):
    """A backbone plus guided modules at selected attachment points."""

    def __init__(self, spec: BackboneSpec, rng_seed: int, guided: bool = True,
                 num_pairs: Optional[int] = None, reduce_channels=None,
                 dtype=T.DEFAULT_DTYPE, guided_blocks: Optional[list] = None):
        self.backbone = build_backbone(spec, rng_seed, dtype)
        self.guided = [None] * (spec.num_blocks - 1)
        if guided_blocks is None:
            guided_blocks = attachment_points(spec.num_blocks, num_pairs) if guided else []
        for b in guided_blocks:
            if not 0 <= b < spec.num_blocks - 1:
                raise SpecError(f"guided module cannot attach after block {b}")
            r = reduce_channels.get(b) if isinstance(reduce_channels, dict) else reduce_channels
            gspec = guided_spec_for(spec, b, r)
            self.guided[b] = build_guided_module(gspec, _head_seed(rng_seed, b), dtype,
                                                 spec.final_feature_dim)

    @property
    def spec(self) -> BackboneSpec:
        return self.backbone.spec

    @property
    def has_guided(self) -> bool:
        return any(g is not None for g in self.guided)

    def collect(self, x: Tensor, training: bool, update_stats: bool = True) -> BlockOutputs:
        return forward_collect(self.backbone, self.guided, x, training, update_stats)

    def named_parameters(self, prefix: str = ""):
        yield from self.backbone.named_parameters(prefix + "backbone.")
        for b, g in enumerate(self.guided):
            if g is not None:
                yield from g.named_parameters(f"{prefix}guided.{b}.")

    def named_buffers(self, prefix: str = ""):
        yield from self.backbone.named_buffers(prefix + "backbone.")
        for b, g in enumerate(self.guided):
            if g is not None:
                yield from g.named_buffers(f"{prefix}guided.{b}.")

    def decay_exempt(self, prefix: str = "") -> set:
        out = decay_exempt_names(self.backbone, prefix + "backbone.")
        for b, g in enumerate(self.guided):
            if g is not None:
                out |= decay_exempt_names(g, f"{prefix}guided.{b}.")
        return out


def _head_seed(seed: int, block: int) -> int:
    return int(np.random.SeedSequence([seed, 1000 + block]).generate_state(1)[0])


def export_backbone(backbone: Backbone) -> Backbone:
    """Standalone deep copy of a backbone; guided modules are never part of it."""
    if isinstance(backbone, Stream):
        backbone = backbone.backbone
    return copy.deepcopy(backbone)
