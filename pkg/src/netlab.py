"""Probeable desk-scale networks.

Two families live here: `mini_cnn`, a ResNet-style analog, and `mini_vit`, a
DeiT-style analog. Both expose
  * a module table in forward order (top-level module ids own their parameters),
  * a partition registry (the WT-ST groups, one tap per group, a separate head),
  * forward-hook taps for activation capture,
  * weight snapshots with a manifest + binary blob checkpoint format.

Architecture sizes come from data/architectures.json.
"""
from __future__ import annotations

import hashlib
import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from functools import lru_cache
from pathlib import Path
from types import MappingProxyType
from typing import Any, Dict, FrozenSet, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from src.errors import (
    CompatibilityError,
    ConfigurationError,
    DataError,
    ShapeError,
    UnknownEntryError,
    UnsupportedOperationError,
)

logger = logging.getLogger(__name__)

ARCH_TABLE_PATH = Path(__file__).resolve().parent.parent / "data" / "architectures.json"

# Load architecture table
with open(ARCH_TABLE_PATH, "r") as f:
    ARCH_TABLE: Dict[str, Dict[str, Any]] = json.load(f)

CHECKPOINT_FORMAT = "tl-checkpoint/1"


class ModuleKind(str, Enum):
    STEM = "stem"
    CONV_STAGE = "conv_stage"
    RESIDUAL_BLOCK = "residual_block"
    PATCHIFIER = "patchifier"
    TRANSFORMER_BLOCK = "transformer_block"
    ATTENTION = "attention"
    MLP = "mlp"
    NORM = "norm"
    HEAD = "head"


class Layout(str, Enum):
    SPATIAL_MAP = "spatial_map"
    TOKEN_SEQ = "token_seq"


class SnapshotTag(str, Enum):
    INITIAL = "initial"
    BEST = "best"
    PRETRAINED = "pretrained"


# ============ ARCHITECTURE IDS ============

def arch_id_for(family: str, capacity: str, truncate: Optional[int] = None) -> str:
    """Canonical id, e.g. `mini_vit/small` or `mini_vit/small/d3` for a truncated ViT."""
    if family not in ARCH_TABLE:
        raise ConfigurationError(f"unknown model family {family!r}; known: {sorted(ARCH_TABLE)}")
    capacities = ARCH_TABLE[family]["capacities"]
    if capacity not in capacities:
        raise ConfigurationError(f"unknown capacity {capacity!r} for {family}; known: {sorted(capacities)}")
    if truncate is None:
        return f"{family}/{capacity}"
    if family != "mini_vit":
        raise ConfigurationError(f"truncation is only defined for mini_vit, not {family}")
    depth = capacities[capacity]["depth"]
    if not 1 <= truncate <= depth:
        raise ConfigurationError(f"truncate must lie in 1..{depth}, got {truncate}")
    if truncate == depth:
        return f"{family}/{capacity}"
    return f"{family}/{capacity}/d{truncate}"


def parse_arch_id(arch_id: str) -> Tuple[str, str, Optional[int]]:
    parts = arch_id.split("/")
    try:
        family, capacity = parts[0], parts[1]
        depth = int(parts[2][1:]) if len(parts) == 3 and parts[2].startswith("d") else None
        if len(parts) not in (2, 3) or (len(parts) == 3 and depth is None):
            raise ValueError(arch_id)
        capacity_spec = ARCH_TABLE[family]["capacities"][capacity]
    except (IndexError, KeyError, ValueError):
        raise UnknownEntryError(f"architecture {arch_id!r} is not registered")
    if depth is not None and not 1 <= depth < capacity_spec["depth"]:
        raise UnknownEntryError(f"architecture {arch_id!r} is not registered")
    return family, capacity, depth


def base_arch_id(arch_id: str) -> str:
    family, capacity, _ = parse_arch_id(arch_id)
    return f"{family}/{capacity}"


# ============ PARTITIONS ============

@dataclass(frozen=True)
class PartitionGroup:
    group_id: str
    module_ids: Tuple[str, ...]
    tap_id: Optional[str] = None


@dataclass(frozen=True)
class ModulePartition:
    """WT-ST groups in forward order; the head sits outside the groups and is never transferred."""
    arch_id: str
    groups: Tuple[PartitionGroup, ...]
    head: PartitionGroup

    @property
    def wt_st_levels(self) -> int:
        return len(self.groups) + 1

    @property
    def group_ids(self) -> Tuple[str, ...]:
        return tuple(g.group_id for g in self.groups)

    @property
    def taps(self) -> Tuple[str, ...]:
        return tuple(g.tap_id for g in self.groups if g.tap_id is not None)

    def group(self, group_id: str) -> PartitionGroup:
        for g in self.groups + (self.head,):
            if g.group_id == group_id:
                return g
        raise UnknownEntryError(f"group {group_id!r} is not part of the {self.arch_id} partition")

    def group_of_module(self, module_id: str) -> str:
        for g in self.groups + (self.head,):
            if module_id in g.module_ids:
                return g.group_id
        raise UnknownEntryError(f"module {module_id!r} is not covered by the {self.arch_id} partition")


def _vit_depth(capacity: str, truncate: Optional[int]) -> int:
    return truncate if truncate is not None else ARCH_TABLE["mini_vit"]["capacities"][capacity]["depth"]


@lru_cache(maxsize=None)
def partition_for_arch(arch_id: str) -> ModulePartition:
    family, capacity, depth = parse_arch_id(arch_id)
    if family == "mini_cnn":
        names = ARCH_TABLE["mini_cnn"]["partition"]
    elif family == "mini_vit":
        names = ["patchifier"] + [f"block{i}" for i in range(1, _vit_depth(capacity, depth) + 1)] + ["final_norm"]
    else:
        raise UnknownEntryError(f"no partition registered for family {family!r}")
    groups = tuple(PartitionGroup(name, (name,), name) for name in names)
    return ModulePartition(arch_id=arch_id, groups=groups, head=PartitionGroup("head", ("head",), None))


def partition_of(network: "ProbeableNetwork") -> ModulePartition:
    return partition_for_arch(network.arch_id)


# ============ NETWORKS ============

class ProbeableNetwork(nn.Module):
    """Base class: top-level attributes are the module table, in forward order."""

    family: str = ""

    def __init__(self, capacity: str, input_shape: Tuple[int, int, int], num_classes: int):
        super().__init__()
        self.capacity = capacity
        self.input_shape = tuple(input_shape)  # (H, W, C)
        self.num_classes = num_classes
        self.patch_size: Optional[int] = None
        self.build_seed = 0

    @property
    def arch_id(self) -> str:
        return arch_id_for(self.family, self.capacity)

    @property
    def module_table(self) -> Tuple[Tuple[str, ModuleKind], ...]:
        raise NotImplementedError

    @property
    def tap_ids(self) -> Tuple[str, ...]:
        raise NotImplementedError

    def tap_module(self, tap_id: str) -> nn.Module:
        raise NotImplementedError

    def tap_layout(self, tap_id: str) -> Layout:
        raise NotImplementedError

    @staticmethod
    def module_of(name: str) -> str:
        """Top-level module id owning a parameter or buffer name."""
        return name.split(".", 1)[0]

    def check_input(self, inputs: torch.Tensor) -> None:
        h, w, c = self.input_shape
        if inputs.ndim != 4 or tuple(inputs.shape[1:]) != (c, h, w):
            raise ShapeError(
                f"{self.arch_id} expects inputs of shape (batch, {c}, {h}, {w}), got {tuple(inputs.shape)}"
            )


class BasicBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class MiniCNN(ProbeableNetwork):
    family = "mini_cnn"

    def __init__(self, capacity: str, input_shape: Tuple[int, int, int], num_classes: int):
        super().__init__(capacity, input_shape, num_classes)
        spec = ARCH_TABLE["mini_cnn"]
        mult = spec["capacities"][capacity]["width_multiplier"]
        widths = [max(4, int(round(w * mult))) for w in spec["stage_widths"]]
        self.widths = widths
        channels = input_shape[2]
        self.stem_conv = nn.Conv2d(channels, widths[0], 3, 1, 1, bias=False)
        self.stem_norm = nn.BatchNorm2d(widths[0])
        in_ch = widths[0]
        for i, (width, stride) in enumerate(zip(widths, spec["stage_strides"]), start=1):
            blocks = [BasicBlock(in_ch, width, stride)]
            blocks += [BasicBlock(width, width, 1) for _ in range(spec["blocks_per_stage"] - 1)]
            setattr(self, f"stage{i}", nn.Sequential(*blocks))
            in_ch = width
        self.head = nn.Linear(widths[-1], num_classes)

    @property
    def module_table(self) -> Tuple[Tuple[str, ModuleKind], ...]:
        stages = tuple((f"stage{i}", ModuleKind.CONV_STAGE) for i in range(1, len(self.widths) + 1))
        return (("stem_conv", ModuleKind.STEM), ("stem_norm", ModuleKind.NORM)) + stages + (
            ("head", ModuleKind.HEAD),
        )

    @property
    def tap_ids(self) -> Tuple[str, ...]:
        return tuple(m for m, kind in self.module_table if kind != ModuleKind.HEAD)

    def tap_module(self, tap_id: str) -> nn.Module:
        if tap_id not in self.tap_ids:
            raise UnknownEntryError(f"tap {tap_id!r} does not exist on {self.arch_id}; taps: {self.tap_ids}")
        return getattr(self, tap_id)

    def tap_layout(self, tap_id: str) -> Layout:
        self.tap_module(tap_id)
        return Layout.SPATIAL_MAP

    def forward_features(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.stem_norm(self.stem_conv(x)))
        for i in range(1, len(self.widths) + 1):
            x = getattr(self, f"stage{i}")(x)
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.forward_features(x).mean(dim=(2, 3)))


class Patchifier(nn.Module):
    """Patch projection plus cls token and learned positions (all transferred together)."""

    def __init__(self, in_channels: int, dim: int, patch_size: int, grid: Tuple[int, int]):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, dim, patch_size, patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + grid[0] * grid[1], dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.proj(x).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        return torch.cat([cls, x], dim=1) + self.pos_embed


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        # Hook point for attention probabilities (batch, heads, tokens, tokens).
        self.attn_probs = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = self.attn_probs((q @ k.transpose(-2, -1) * self.scale).softmax(dim=-1))
        return self.proj((attn @ v).transpose(1, 2).reshape(b, n, d))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.attn_out = nn.Identity()
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, dim * mlp_ratio)
        self.mlp_out = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.attn_out(x + self.attn(self.norm1(x)))
        return self.mlp_out(x + self.mlp(self.norm2(x)))


class MiniViT(ProbeableNetwork):
    family = "mini_vit"

    def __init__(
        self,
        capacity: str,
        input_shape: Tuple[int, int, int],
        num_classes: int,
        depth: Optional[int] = None,
    ):
        super().__init__(capacity, input_shape, num_classes)
        spec = ARCH_TABLE["mini_vit"]
        cap = spec["capacities"][capacity]
        self.patch_size = spec["patch_size"]
        self.dim = cap["dim"]
        self.native_depth = cap["depth"]
        self.depth = depth or cap["depth"]
        h, w, c = input_shape
        self.grid = (h // self.patch_size, w // self.patch_size)
        self.patchifier = Patchifier(c, self.dim, self.patch_size, self.grid)
        for i in range(1, self.depth + 1):
            setattr(self, f"block{i}", TransformerBlock(self.dim, spec["heads"], spec["mlp_ratio"]))
        self.final_norm = nn.LayerNorm(self.dim)
        self.head = nn.Linear(self.dim, num_classes)

    @property
    def arch_id(self) -> str:
        truncate = self.depth if self.depth != self.native_depth else None
        return arch_id_for(self.family, self.capacity, truncate)

    @property
    def blocks(self) -> List[TransformerBlock]:
        return [getattr(self, f"block{i}") for i in range(1, self.depth + 1)]

    @property
    def module_table(self) -> Tuple[Tuple[str, ModuleKind], ...]:
        blocks = tuple((f"block{i}", ModuleKind.TRANSFORMER_BLOCK) for i in range(1, self.depth + 1))
        return (("patchifier", ModuleKind.PATCHIFIER),) + blocks + (
            ("final_norm", ModuleKind.NORM),
            ("head", ModuleKind.HEAD),
        )

    @property
    def tap_ids(self) -> Tuple[str, ...]:
        taps = ["patchifier"]
        for i in range(1, self.depth + 1):
            taps += [f"block{i}.attn", f"block{i}"]
        return tuple(taps + ["final_norm"])

    @property
    def token_count(self) -> int:
        return 1 + self.grid[0] * self.grid[1]

    def tap_module(self, tap_id: str) -> nn.Module:
        if tap_id not in self.tap_ids:
            raise UnknownEntryError(f"tap {tap_id!r} does not exist on {self.arch_id}; taps: {self.tap_ids}")
        if tap_id.endswith(".attn"):
            return getattr(self, tap_id.split(".")[0]).attn_out
        return getattr(self, tap_id)

    def tap_layout(self, tap_id: str) -> Layout:
        self.tap_module(tap_id)
        return Layout.TOKEN_SEQ

    def forward_features(self, x: torch.Tensor) -> torch.Tensor:
        x = self.patchifier(x)
        for block in self.blocks:
            x = block(x)
        return self.final_norm(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.forward_features(x)[:, 0])


# ============ BUILD ============

@dataclass(frozen=True)
class ArchSpec:
    family: str
    capacity: str
    input_shape: Tuple[int, int, int] = (32, 32, 3)
    num_classes: int = 10
    seed: int = 0

    @classmethod
    def from_mapping(cls, raw: Mapping[str, Any]) -> "ArchSpec":
        data = dict(raw)
        if "input_shape" in data:
            data["input_shape"] = tuple(data["input_shape"])
        return cls(**data)


def build_model(arch_spec: Union[ArchSpec, Mapping[str, Any]]) -> ProbeableNetwork:
    """Builds a network and applies the Kaiming (RI) initialization for `arch_spec.seed`."""
    from src.initkit import init_random

    spec = arch_spec if isinstance(arch_spec, ArchSpec) else ArchSpec.from_mapping(arch_spec)
    arch_id_for(spec.family, spec.capacity)
    if spec.num_classes < 2:
        raise ConfigurationError(f"num_classes must be >= 2, got {spec.num_classes}")
    if len(spec.input_shape) != 3:
        raise ShapeError(f"input_shape must be (H, W, C), got {spec.input_shape}")
    h, w, c = spec.input_shape
    if spec.family == "mini_cnn":
        stride = int(np.prod(ARCH_TABLE["mini_cnn"]["stage_strides"]))
        if h % stride or w % stride:
            raise ShapeError(f"mini_cnn needs H and W divisible by {stride}, got {h}x{w}")
        network: ProbeableNetwork = MiniCNN(spec.capacity, spec.input_shape, spec.num_classes)
    else:
        patch = ARCH_TABLE["mini_vit"]["patch_size"]
        if h % patch or w % patch:
            raise ShapeError(f"mini_vit needs H and W divisible by patch size {patch}, got {h}x{w}")
        network = MiniViT(spec.capacity, spec.input_shape, spec.num_classes)
    network.build_seed = spec.seed
    init_random(network, spec.seed)
    logger.debug("built %s with %d parameters", network.arch_id, parameter_count(network))
    return network


def parameter_count(network: nn.Module) -> int:
    return sum(p.numel() for p in network.parameters())


def truncate(network: ProbeableNetwork, n_blocks: int, seed: Optional[int] = None) -> MiniViT:
    """Keeps the patchifier and the first `n_blocks` blocks; final norm and head are fresh."""
    from src.initkit import init_random

    if not isinstance(network, MiniViT):
        raise UnsupportedOperationError(f"truncate is only defined for mini_vit, not {network.family}")
    if not 1 <= n_blocks <= network.depth:
        raise ConfigurationError(f"n_blocks must lie in 1..{network.depth}, got {n_blocks}")
    seed = network.build_seed if seed is None else seed
    trimmed = MiniViT(network.capacity, network.input_shape, network.num_classes, depth=n_blocks)
    trimmed.build_seed = seed
    init_random(trimmed, seed)
    keep = {"patchifier"} | {f"block{i}" for i in range(1, n_blocks + 1)}
    source = network.state_dict()
    with torch.no_grad():
        for name, tensor in trimmed.state_dict().items():
            if ProbeableNetwork.module_of(name) in keep:
                tensor.copy_(source[name])
    trimmed.train(network.training)
    return trimmed


# ============ ACTIVATION CAPTURE ============

@dataclass(frozen=True)
class ActivationBatch:
    tap_id: str
    layout: Layout
    values: torch.Tensor  # (batch, c, h, w) or (batch, tokens, dim)
    sample_ids: Tuple[Any, ...]
    cls_index: Optional[int] = None

    def __post_init__(self):
        if self.values.shape[0] != len(self.sample_ids):
            raise ShapeError(
                f"tap {self.tap_id}: batch dim {self.values.shape[0]} != {len(self.sample_ids)} sample ids"
            )


@contextmanager
def tapped(network: ProbeableNetwork, tap_ids: Sequence[str]) -> Iterator[Dict[str, torch.Tensor]]:
    """Registers forward hooks on the given taps; captured outputs land in the yielded dict."""
    store: Dict[str, torch.Tensor] = {}
    handles = []

    def make_hook(tap_id: str):
        def hook(module, inputs, output):
            store[tap_id] = output.detach().clone()
        return hook

    try:
        for tap_id in tap_ids:
            handles.append(network.tap_module(tap_id).register_forward_hook(make_hook(tap_id)))
        yield store
    finally:
        for handle in handles:
            handle.remove()


def _ordered_taps(network: ProbeableNetwork, tap_ids: Sequence[str]) -> List[str]:
    order = {tap: i for i, tap in enumerate(network.tap_ids)}
    for tap in tap_ids:
        if tap not in order:
            raise UnknownEntryError(f"tap {tap!r} does not exist on {network.arch_id}; taps: {network.tap_ids}")
    return sorted(dict.fromkeys(tap_ids), key=order.__getitem__)


def capture_activations(
    network: ProbeableNetwork,
    inputs: torch.Tensor,
    tap_ids: Sequence[str],
    sample_ids: Optional[Sequence[Any]] = None,
) -> List[ActivationBatch]:
    """Runs one inference pass and returns one ActivationBatch per tap, in forward order."""
    network.check_input(inputs)
    sample_ids = tuple(range(inputs.shape[0])) if sample_ids is None else tuple(sample_ids)
    if len(sample_ids) != inputs.shape[0]:
        raise ShapeError(f"{len(sample_ids)} sample ids for a batch of {inputs.shape[0]}")
    taps = _ordered_taps(network, tap_ids)
    was_training = network.training
    network.eval()
    try:
        with torch.no_grad(), tapped(network, taps) as store:
            network(inputs)
    finally:
        network.train(was_training)
    batches = []
    for tap in taps:
        layout = network.tap_layout(tap)
        cls_index = 0 if layout == Layout.TOKEN_SEQ else None
        batches.append(ActivationBatch(tap, layout, store[tap], sample_ids, cls_index))
    return batches


def capture_attention(network: ProbeableNetwork, inputs: torch.Tensor) -> List[torch.Tensor]:
    """Attention probabilities of every block, each (batch, heads, tokens, tokens)."""
    if not isinstance(network, MiniViT):
        raise UnsupportedOperationError(f"{network.arch_id} has no attention layers")
    network.check_input(inputs)
    store: Dict[int, torch.Tensor] = {}
    handles = []
    for i, block in enumerate(network.blocks):
        handles.append(
            block.attn.attn_probs.register_forward_hook(
                lambda module, inp, out, i=i: store.__setitem__(i, out.detach().clone())
            )
        )
    was_training = network.training
    network.eval()
    try:
        with torch.no_grad():
            network(inputs)
    finally:
        network.train(was_training)
        for handle in handles:
            handle.remove()
    return [store[i] for i in range(network.depth)]


# ============ SNAPSHOTS ============

@dataclass(frozen=True)
class WeightSnapshot:
    """Immutable copy of a network's state (parameters and buffers)."""
    arch_id: str
    tensors: Mapping[str, torch.Tensor]
    tag: SnapshotTag
    created_at: str
    learnable: FrozenSet[str]
    metadata: Mapping[str, Any] = field(default_factory=dict)

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(self.tensors)

    def tensor(self, name: str) -> torch.Tensor:
        if name not in self.tensors:
            raise UnknownEntryError(f"snapshot of {self.arch_id} has no tensor {name!r}")
        return self.tensors[name].clone()

    def without_modules(self, module_ids: Sequence[str], tag: Optional[SnapshotTag] = None) -> "WeightSnapshot":
        drop = set(module_ids)
        kept = {k: v for k, v in self.tensors.items() if ProbeableNetwork.module_of(k) not in drop}
        return WeightSnapshot(
            arch_id=self.arch_id,
            tensors=MappingProxyType(kept),
            tag=tag or self.tag,
            created_at=self.created_at,
            learnable=frozenset(n for n in self.learnable if n in kept),
            metadata=self.metadata,
        )

    def equals(self, other: "WeightSnapshot") -> bool:
        """Bitwise equality of names, shapes, dtypes and values."""
        if self.arch_id != other.arch_id or list(self.tensors) != list(other.tensors):
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and torch.equal(a, b)
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )


def _network_metadata(network: ProbeableNetwork) -> Dict[str, Any]:
    meta: Dict[str, Any] = {
        "family": network.family,
        "capacity": network.capacity,
        "input_shape": list(network.input_shape),
        "num_classes": network.num_classes,
    }
    if isinstance(network, MiniViT):
        meta["depth"] = network.depth
        meta["positional_embedding_group"] = ARCH_TABLE["mini_vit"]["positional_embedding_group"]
    return meta


def snapshot_weights(network: ProbeableNetwork, tag: Union[SnapshotTag, str]) -> WeightSnapshot:
    tensors = {name: t.detach().cpu().clone() for name, t in network.state_dict().items()}
    return WeightSnapshot(
        arch_id=network.arch_id,
        tensors=MappingProxyType(tensors),
        tag=SnapshotTag(tag),
        created_at=datetime.now(timezone.utc).isoformat(),
        learnable=frozenset(name for name, _ in network.named_parameters()),
        metadata=MappingProxyType(_network_metadata(network)),
    )


def _copy_from_snapshot(network: ProbeableNetwork, snapshot: WeightSnapshot, module_ids: Sequence[str]) -> None:
    wanted = set(module_ids)
    state = network.state_dict()
    with torch.no_grad():
        for name, tensor in state.items():
            if ProbeableNetwork.module_of(name) not in wanted:
                continue
            if name not in snapshot.tensors:
                raise CompatibilityError(f"snapshot of {snapshot.arch_id} lacks tensor {name!r}")
            source = snapshot.tensors[name]
            if source.shape != tensor.shape:
                raise CompatibilityError(
                    f"{name}: snapshot shape {tuple(source.shape)} != network shape {tuple(tensor.shape)}"
                )
            tensor.copy_(source)


def _require_same_arch(network: ProbeableNetwork, snapshot: WeightSnapshot) -> None:
    if snapshot.arch_id != network.arch_id:
        raise CompatibilityError(f"snapshot is for {snapshot.arch_id}, network is {network.arch_id}")


def restore_module(network: ProbeableNetwork, snapshot: WeightSnapshot, group_id: str) -> ProbeableNetwork:
    """Copies one partition group (parameters and buffers) back from the snapshot."""
    _require_same_arch(network, snapshot)
    group = partition_of(network).group(group_id)
    _copy_from_snapshot(network, snapshot, group.module_ids)
    return network


def restore_all(network: ProbeableNetwork, snapshot: WeightSnapshot) -> ProbeableNetwork:
    _require_same_arch(network, snapshot)
    partition = partition_of(network)
    for group in partition.groups + (partition.head,):
        _copy_from_snapshot(network, snapshot, group.module_ids)
    return network


def group_parameter_names(
    network_or_snapshot: Union[ProbeableNetwork, WeightSnapshot],
    partition: ModulePartition,
    group_id: str,
    learnable_only: bool = True,
) -> List[str]:
    modules = set(partition.group(group_id).module_ids)
    if isinstance(network_or_snapshot, WeightSnapshot):
        names = list(network_or_snapshot.tensors)
        learnable = network_or_snapshot.learnable
    else:
        names = list(network_or_snapshot.state_dict())
        learnable = {n for n, _ in network_or_snapshot.named_parameters()}
    return [
        n for n in names
        if ProbeableNetwork.module_of(n) in modules and (not learnable_only or n in learnable)
    ]


# ============ CHECKPOINT FILES ============

def _stem(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".json", ".bin") else path


def save_snapshot(snapshot: WeightSnapshot, path: Union[str, Path]) -> Path:
    """Writes `<stem>.json` (manifest) and `<stem>.bin` (little-endian float32 blob)."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    manifest_path = Path(f"{stem}.json")
    blob_path = Path(f"{stem}.bin")
    family, capacity, _ = parse_arch_id(snapshot.arch_id)
    entries = []
    offset = 0
    with open(blob_path, "wb") as blob:
        for name, tensor in snapshot.tensors.items():
            data = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=False).tobytes()
            entries.append({
                "name": name,
                "shape": list(tensor.shape),
                "dtype": str(tensor.dtype).replace("torch.", ""),
                "offset": offset,
                "nbytes": len(data),
                "sha256": hashlib.sha256(data).hexdigest(),
            })
            blob.write(data)
            offset += len(data)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "arch_id": snapshot.arch_id,
        "family": family,
        "capacity": capacity,
        "tag": snapshot.tag.value,
        "created_at": snapshot.created_at,
        "learnable": sorted(snapshot.learnable),
        "metadata": dict(snapshot.metadata),
        "blob": blob_path.name,
        "tensors": entries,
    }
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest_path


def load_snapshot(path: Union[str, Path]) -> WeightSnapshot:
    stem = _stem(path)
    manifest_path = Path(f"{stem}.json")
    if not manifest_path.exists():
        raise DataError(f"checkpoint manifest {manifest_path} not found")
    with open(manifest_path, "r") as f:
        manifest = json.load(f)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{manifest_path}: unsupported checkpoint format {manifest.get('format')!r}")
    blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    tensors: Dict[str, torch.Tensor] = {}
    for entry in manifest["tensors"]:
        data = blob[entry["offset"]: entry["offset"] + entry["nbytes"]]
        if len(data) != entry["nbytes"] or hashlib.sha256(data).hexdigest() != entry["sha256"]:
            raise DataError(f"{manifest_path}: checksum mismatch for tensor {entry['name']!r}")
        values = np.frombuffer(data, dtype="<f4").reshape(entry["shape"]).astype(np.float32)
        tensors[entry["name"]] = torch.from_numpy(values).to(getattr(torch, entry["dtype"]))
    return WeightSnapshot(
        arch_id=manifest["arch_id"],
        tensors=MappingProxyType(tensors),
        tag=SnapshotTag(manifest["tag"]),
        created_at=manifest["created_at"],
        learnable=frozenset(manifest["learnable"]),
        metadata=MappingProxyType(manifest.get("metadata", {})),
    )


def network_from_snapshot(snapshot: WeightSnapshot, num_classes: Optional[int] = None) -> ProbeableNetwork:
    """Rebuilds the network a snapshot was taken from and loads every tensor it carries."""
    meta = snapshot.metadata
    family, capacity, depth = parse_arch_id(snapshot.arch_id)
    network = build_model(ArchSpec(
        family=family,
        capacity=capacity,
        input_shape=tuple(meta.get("input_shape", (32, 32, 3))),
        num_classes=num_classes or meta.get("num_classes", 10),
    ))
    if depth is not None:
        network = truncate(network, depth)
    partition = partition_of(network)
    modules = [m for g in partition.groups for m in g.module_ids]
    if "head.weight" in snapshot.tensors and num_classes in (None, meta.get("num_classes")):
        modules.append("head")
    _copy_from_snapshot(network, snapshot, modules)
    return network
