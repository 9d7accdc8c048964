"""Initialization strategies: random (RI), stats transfer (ST), weight transfer (WT), WT-ST-n/m.

Every tensor draws from its own generator, seeded from (seed, tensor name), so the
result is a pure function of the network's shapes, the scheme and the seed.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Iterable, Mapping, Optional

import torch
import torch.nn as nn

from src.errors import CompatibilityError, ConfigurationError
from src.netlab import (
    ProbeableNetwork,
    WeightSnapshot,
    base_arch_id,
    partition_of,
)

logger = logging.getLogger(__name__)

NORM_TYPES = (nn.BatchNorm2d, nn.LayerNorm)
# cls token and positional table: small normal, as ViT implementations do.
EMBEDDING_STD = 0.02


class InitKind(str, Enum):
    RI = "RI"
    ST = "ST"
    WT = "WT"
    WT_ST = "WT_ST"


@dataclass(frozen=True)
class TensorStats:
    name: str
    mu: float
    sigma: float
    count: int


@dataclass(frozen=True)
class LayerStats:
    entries: Mapping[str, TensorStats]

    def __getitem__(self, name: str) -> TensorStats:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class InitScheme:
    kind: InitKind
    transfer_depth_n: Optional[int] = None
    source: Optional[str] = None  # checkpoint path of the pretrained snapshot
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", InitKind(self.kind))
        if self.kind == InitKind.WT_ST and self.transfer_depth_n is None:
            raise ConfigurationError("WT_ST needs a transfer depth n")

    def canonical(self, groups_count: int) -> "InitScheme":
        """WT_ST with n = 0 is ST, with n = groups_count it is WT."""
        if self.kind != InitKind.WT_ST:
            return self
        if self.transfer_depth_n == 0:
            return InitScheme(InitKind.ST, None, self.source, self.seed)
        if self.transfer_depth_n == groups_count:
            return InitScheme(InitKind.WT, None, self.source, self.seed)
        return self

    def label(self, groups_count: Optional[int] = None) -> str:
        if self.kind != InitKind.WT_ST:
            return self.kind.value
        if groups_count is None:
            return f"WT-ST-{self.transfer_depth_n}"
        return f"WT-ST-{self.transfer_depth_n}/{groups_count - self.transfer_depth_n}"

    def to_config(self) -> Dict[str, Any]:
        return {
            "kind": self.kind.value,
            "n": self.transfer_depth_n,
            "source_checkpoint": self.source,
            "seed": self.seed,
        }

    @classmethod
    def from_config(cls, raw: Mapping[str, Any]) -> "InitScheme":
        return cls(
            kind=InitKind(raw["kind"]),
            transfer_depth_n=raw.get("n"),
            source=raw.get("source_checkpoint"),
            seed=int(raw.get("seed", 0)),
        )


def wt_fraction(n: int, groups_count: int) -> float:
    return n / groups_count


def _generator(seed: int, name: str) -> torch.Generator:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return torch.Generator().manual_seed(int.from_bytes(digest[:8], "little") & ((1 << 63) - 1))


def _owner_modules(network: nn.Module) -> Dict[str, nn.Module]:
    owners = {}
    for module_name, module in network.named_modules():
        for param_name, _ in module.named_parameters(recurse=False):
            owners[f"{module_name}.{param_name}" if module_name else param_name] = module
    return owners


def _reset_buffers(network: nn.Module, module_ids: Optional[Iterable[str]] = None) -> None:
    wanted = None if module_ids is None else set(module_ids)
    for name, module in network.named_modules():
        if isinstance(module, nn.BatchNorm2d) and (wanted is None or name.split(".", 1)[0] in wanted):
            module.reset_running_stats()


def _kaiming_fill(name: str, param: torch.Tensor, owner: nn.Module, seed: int) -> None:
    leaf = name.rsplit(".", 1)[-1]
    if isinstance(owner, NORM_TYPES):
        param.fill_(1.0 if leaf == "weight" else 0.0)
    elif leaf in ("cls_token", "pos_embed"):
        param.copy_(torch.randn(param.shape, generator=_generator(seed, name)) * EMBEDDING_STD)
    elif param.ndim == 1:
        param.zero_()
    else:
        fan_in = param[0].numel()
        std = math.sqrt(2.0 / fan_in)
        param.copy_(torch.randn(param.shape, generator=_generator(seed, name)) * std)


def _random_init_params(network: ProbeableNetwork, seed: int, module_ids: Optional[Iterable[str]] = None) -> None:
    wanted = None if module_ids is None else set(module_ids)
    owners = _owner_modules(network)
    with torch.no_grad():
        for name, param in network.named_parameters():
            if wanted is not None and ProbeableNetwork.module_of(name) not in wanted:
                continue
            _kaiming_fill(name, param, owners[name], seed)
    _reset_buffers(network, module_ids)


def weight_stats(snapshot: WeightSnapshot) -> LayerStats:
    """Layer-wise mean and population standard deviation of every learnable tensor."""
    entries = {}
    for name, tensor in snapshot.tensors.items():
        if name not in snapshot.learnable:
            continue
        values = tensor.detach().to(torch.float64)
        entries[name] = TensorStats(
            name=name,
            mu=float(values.mean()),
            sigma=float(values.std(unbiased=False)) if values.numel() > 1 else 0.0,
            count=values.numel(),
        )
    return LayerStats(entries)


def init_random(network: ProbeableNetwork, seed: int) -> ProbeableNetwork:
    """Kaiming fan-in normal weights, zero biases, unit norm scales, zero norm shifts."""
    _random_init_params(network, seed)
    return network


def _sample_stats(name: str, param: torch.Tensor, stats: TensorStats, seed: int) -> None:
    if stats.sigma == 0.0:
        param.fill_(stats.mu)
        return
    draw = torch.randn(param.shape, generator=_generator(seed, name), dtype=torch.float64)
    param.copy_(draw * stats.sigma + stats.mu)


def _head_ids(network: ProbeableNetwork):
    return partition_of(network).head.module_ids


def _stats_init_modules(
    network: ProbeableNetwork, stats: LayerStats, seed: int, module_ids: Iterable[str]
) -> None:
    wanted = set(module_ids)
    with torch.no_grad():
        for name, param in network.named_parameters():
            if ProbeableNetwork.module_of(name) not in wanted:
                continue
            if name not in stats:
                raise CompatibilityError(f"weight statistics have no entry for {name!r}")
            if stats[name].count != param.numel():
                raise CompatibilityError(
                    f"{name}: statistics cover {stats[name].count} elements, tensor has {param.numel()}"
                )
            _sample_stats(name, param, stats[name], seed)
    _reset_buffers(network, wanted)


def init_stats_transfer(network: ProbeableNetwork, stats: LayerStats, seed: int) -> ProbeableNetwork:
    """Samples every non-head tensor from N(mu_i, sigma_i^2); the head gets RI."""
    partition = partition_of(network)
    body = [m for g in partition.groups for m in g.module_ids]
    _stats_init_modules(network, stats, seed, body)
    _random_init_params(network, seed, _head_ids(network))
    return network


def _check_transfer_source(network: ProbeableNetwork, snapshot: WeightSnapshot) -> None:
    if base_arch_id(snapshot.arch_id) != base_arch_id(network.arch_id):
        raise CompatibilityError(f"snapshot is for {snapshot.arch_id}, network is {network.arch_id}")


def _copy_modules(network: ProbeableNetwork, snapshot: WeightSnapshot, module_ids: Iterable[str]) -> None:
    wanted = set(module_ids)
    with torch.no_grad():
        for name, tensor in network.state_dict().items():
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


def init_weight_transfer(network: ProbeableNetwork, snapshot: WeightSnapshot, seed: int = 0) -> ProbeableNetwork:
    """Copies every non-head tensor (buffers included); the task head is always re-initialized."""
    _check_transfer_source(network, snapshot)
    partition = partition_of(network)
    _copy_modules(network, snapshot, [m for g in partition.groups for m in g.module_ids])
    _random_init_params(network, seed, _head_ids(network))
    return network


def build_wt_st(network: ProbeableNetwork, snapshot: WeightSnapshot, n: int, seed: int) -> ProbeableNetwork:
    """WT for groups 1..n, ST for groups n+1..end, RI for the head."""
    _check_transfer_source(network, snapshot)
    partition = partition_of(network)
    if not 0 <= n <= len(partition.groups):
        raise ConfigurationError(f"transfer depth n must lie in 0..{len(partition.groups)}, got {n}")
    transferred = [m for g in partition.groups[:n] for m in g.module_ids]
    sampled = [m for g in partition.groups[n:] for m in g.module_ids]
    _copy_modules(network, snapshot, transferred)
    if sampled:
        _stats_init_modules(network, weight_stats(snapshot), seed, sampled)
    _random_init_params(network, seed, _head_ids(network))
    logger.debug("%s initialized as WT-ST-%d/%d", network.arch_id, n, len(partition.groups) - n)
    return network


def apply_scheme(
    network: ProbeableNetwork, scheme: InitScheme, snapshot: Optional[WeightSnapshot] = None
) -> ProbeableNetwork:
    scheme = scheme.canonical(len(partition_of(network).groups))
    if scheme.kind == InitKind.RI:
        return init_random(network, scheme.seed)
    if snapshot is None:
        raise ConfigurationError(f"{scheme.kind.value} initialization needs a source snapshot")
    if scheme.kind == InitKind.ST:
        _check_transfer_source(network, snapshot)
        return init_stats_transfer(network, weight_stats(snapshot), scheme.seed)
    if scheme.kind == InitKind.WT:
        return init_weight_transfer(network, snapshot, scheme.seed)
    return build_wt_st(network, snapshot, scheme.transfer_depth_n, scheme.seed)
