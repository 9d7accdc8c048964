from __future__ import annotations

import math

import torch

from src.errors import CompatibilityError
from src.netlab import ModulePartition, WeightSnapshot, group_parameter_names, partition_for_arch
from src.probes.series import LayerSeries, SeriesKind, make_series


def l2_drift(initial: WeightSnapshot, final: WeightSnapshot, partition: ModulePartition = None) -> LayerSeries:
    """Per group: ||w_final - w_init||_2 divided by the group's learnable element count.

    Buffers (norm running statistics) are not weights and are left out.
    """
    if initial.arch_id != final.arch_id:
        raise CompatibilityError(f"cannot compare {initial.arch_id} with {final.arch_id}")
    partition = partition or partition_for_arch(final.arch_id)
    values = []
    for group_id in partition.group_ids:
        names = group_parameter_names(final, partition, group_id)
        squared = 0.0
        count = 0
        for name in names:
            if name not in initial.tensors:
                raise CompatibilityError(f"initial snapshot lacks {name!r}")
            diff = final.tensors[name].to(torch.float64) - initial.tensors[name].to(torch.float64)
            squared += float(diff.pow(2).sum())
            count += diff.numel()
        values.append(math.sqrt(squared) / count if count else 0.0)
    return make_series(SeriesKind.L2_DRIFT, partition.group_ids, values)
