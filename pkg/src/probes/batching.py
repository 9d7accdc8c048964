from __future__ import annotations

from typing import Any, Iterator, List, Tuple, Union

import torch
from torch.utils.data import DataLoader, Dataset

EvalSet = Union[torch.Tensor, Dataset]


def _collate(items: List[Tuple[Any, ...]]):
    inputs = torch.stack([item[0] for item in items])
    labels = torch.as_tensor([int(item[1]) for item in items]) if len(items[0]) > 1 else None
    ids = tuple(item[2] if len(item) > 2 else None for item in items)
    return inputs, labels, ids


def iter_batches(eval_set: EvalSet, batch_size: int) -> Iterator[Tuple[torch.Tensor, torch.Tensor, Tuple[Any, ...]]]:
    """Yields (inputs, labels or None, sample ids) in fixed order, without augmentation."""
    if isinstance(eval_set, torch.Tensor):
        for start in range(0, eval_set.shape[0], batch_size):
            chunk = eval_set[start:start + batch_size]
            yield chunk, None, tuple(range(start, start + chunk.shape[0]))
        return
    loader = DataLoader(eval_set, batch_size=batch_size, shuffle=False, collate_fn=_collate)
    offset = 0
    for inputs, labels, ids in loader:
        if any(i is None for i in ids):
            ids = tuple(range(offset, offset + inputs.shape[0]))
        offset += inputs.shape[0]
        yield inputs, labels, ids


def eval_len(eval_set: EvalSet) -> int:
    return int(eval_set.shape[0]) if isinstance(eval_set, torch.Tensor) else len(eval_set)
