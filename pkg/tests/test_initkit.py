import math

import pytest
import torch

from src.errors import CompatibilityError, ConfigurationError
from src.initkit import (
    InitKind,
    InitScheme,
    apply_scheme,
    build_wt_st,
    init_random,
    init_stats_transfer,
    init_weight_transfer,
    weight_stats,
)
from src.netlab import ArchSpec, SnapshotTag, build_model, partition_of, snapshot_weights, truncate


def _source_snapshot(family, capacity="tiny", input_shape=(16, 16, 3)):
    """A 'pretrained' snapshot whose tensors all have non-trivial statistics."""
    network = build_model(ArchSpec(family, capacity, input_shape=input_shape, num_classes=4, seed=1))
    gen = torch.Generator().manual_seed(11)
    with torch.no_grad():
        for p in network.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=gen) + 0.02)
    return snapshot_weights(network, SnapshotTag.PRETRAINED)


def _fresh(family, seed=9):
    return build_model(ArchSpec(family, "tiny", input_shape=(16, 16, 3), num_classes=4, seed=seed))


@pytest.mark.parametrize("family", ["mini_cnn", "mini_vit"])
def test_wt_st_prefix_is_bitwise_transferred(family):
    source = _source_snapshot(family)
    groups = partition_of(_fresh(family)).groups
    for n in range(len(groups) + 1):
        network = build_wt_st(_fresh(family), source, n, seed=4)
        state = network.state_dict()
        for group in groups[:n]:
            for name, tensor in state.items():
                if network.module_of(name) in group.module_ids:
                    assert torch.equal(tensor, source.tensors[name]), (n, name)
        for group in groups[n:]:
            learnable = [
                name for name, p in network.named_parameters()
                if network.module_of(name) in group.module_ids and p.numel() > 1
            ]
            assert learnable
            assert any(not torch.equal(state[name], source.tensors[name]) for name in learnable), (n, group)


@pytest.mark.parametrize("family", ["mini_cnn", "mini_vit"])
def test_st_and_wt_are_the_ends_of_the_sweep(family):
    source = _source_snapshot(family)
    groups_count = len(partition_of(_fresh(family)).groups)

    st = init_stats_transfer(_fresh(family), weight_stats(source), seed=4)
    wt_st_0 = build_wt_st(_fresh(family), source, 0, seed=4)
    assert snapshot_weights(st, SnapshotTag.INITIAL).equals(snapshot_weights(wt_st_0, SnapshotTag.INITIAL))

    wt = init_weight_transfer(_fresh(family), source, seed=4)
    wt_st_max = build_wt_st(_fresh(family), source, groups_count, seed=4)
    assert snapshot_weights(wt, SnapshotTag.INITIAL).equals(snapshot_weights(wt_st_max, SnapshotTag.INITIAL))


def test_stats_transfer_matches_source_moments():
    source = _source_snapshot("mini_cnn", "small", (32, 32, 3))
    stats = weight_stats(source)
    target = build_model(ArchSpec("mini_cnn", "small", num_classes=4, seed=2))
    init_stats_transfer(target, stats, seed=3)
    checked = 0
    for name, param in target.named_parameters():
        if target.module_of(name) == "head" or param.numel() < 10_000:
            continue
        values = param.detach().to(torch.float64)
        expected = stats[name]
        assert abs(float(values.mean()) - expected.mu) <= 4 * expected.sigma / math.sqrt(expected.count)
        assert abs(float(values.std(unbiased=False)) / expected.sigma - 1.0) <= 0.05
        checked += 1
    assert checked >= 5


def test_head_is_always_random():
    source = _source_snapshot("mini_cnn")
    reference = init_random(_fresh("mini_cnn"), seed=4)
    for network in (
        init_weight_transfer(_fresh("mini_cnn"), source, seed=4),
        init_stats_transfer(_fresh("mini_cnn"), weight_stats(source), seed=4),
        build_wt_st(_fresh("mini_cnn"), source, 3, seed=4),
    ):
        assert torch.equal(network.head.weight, reference.head.weight)
        assert not torch.equal(network.head.weight, source.tensors["head.weight"])
        assert not network.head.bias.any()


def test_transfer_works_without_a_head_in_the_snapshot():
    source = _source_snapshot("mini_vit").without_modules(["head"], tag=SnapshotTag.PRETRAINED)
    network = build_wt_st(_fresh("mini_vit"), source, 2, seed=0)
    assert torch.equal(network.patchifier.pos_embed, source.tensors["patchifier.pos_embed"])


def test_truncated_vit_accepts_full_depth_snapshot():
    source = _source_snapshot("mini_vit")
    trimmed = truncate(_fresh("mini_vit"), 2)
    build_wt_st(trimmed, source, 3, seed=0)
    assert torch.equal(trimmed.block2.attn.qkv.weight, source.tensors["block2.attn.qkv.weight"])
    assert not torch.equal(trimmed.final_norm.weight, source.tensors["final_norm.weight"])


def test_incompatible_sources_are_rejected():
    vit_source = _source_snapshot("mini_vit")
    with pytest.raises(CompatibilityError):
        init_weight_transfer(_fresh("mini_cnn"), vit_source)
    with pytest.raises(CompatibilityError):
        build_wt_st(_fresh("mini_cnn"), vit_source, 1, seed=0)
    wide = build_model(ArchSpec("mini_cnn", "small", input_shape=(16, 16, 3), num_classes=4))
    with pytest.raises(CompatibilityError):
        init_weight_transfer(wide, _source_snapshot("mini_cnn"))


def test_depth_out_of_range():
    source = _source_snapshot("mini_cnn")
    with pytest.raises(ConfigurationError):
        build_wt_st(_fresh("mini_cnn"), source, 7, seed=0)
    with pytest.raises(ConfigurationError):
        build_wt_st(_fresh("mini_cnn"), source, -1, seed=0)


def test_random_init_is_seeded():
    a = snapshot_weights(init_random(_fresh("mini_vit", seed=0), 5), SnapshotTag.INITIAL)
    b = snapshot_weights(init_random(_fresh("mini_vit", seed=1), 5), SnapshotTag.INITIAL)
    c = snapshot_weights(init_random(_fresh("mini_vit", seed=0), 6), SnapshotTag.INITIAL)
    assert a.equals(b)
    assert not a.equals(c)


def test_scheme_canonical_forms_and_labels():
    assert InitScheme(InitKind.WT_ST, 0).canonical(6).kind == InitKind.ST
    assert InitScheme(InitKind.WT_ST, 6).canonical(6).kind == InitKind.WT
    assert InitScheme(InitKind.WT_ST, 2).canonical(6).transfer_depth_n == 2
    assert InitScheme(InitKind.WT_ST, 2).label(6) == "WT-ST-2/4"
    assert InitScheme(InitKind.RI).label(6) == "RI"
    assert InitScheme.from_config(InitScheme("WT_ST", 3, "ckpt", 1).to_config()) == InitScheme("WT_ST", 3, "ckpt", 1)
    with pytest.raises(ConfigurationError):
        InitScheme(InitKind.WT_ST)


def test_apply_scheme_needs_a_source():
    with pytest.raises(ConfigurationError):
        apply_scheme(_fresh("mini_cnn"), InitScheme(InitKind.ST))
    network = apply_scheme(_fresh("mini_cnn"), InitScheme(InitKind.RI, seed=3))
    assert snapshot_weights(network, SnapshotTag.INITIAL).equals(
        snapshot_weights(init_random(_fresh("mini_cnn"), 3), SnapshotTag.INITIAL)
    )


@pytest.mark.parametrize("family", ["mini_cnn", "mini_vit"])
def test_random_init_follows_kaiming_fan_in(family):
    network = init_random(build_model(ArchSpec(family, "small")), seed=3)
    checked = 0
    for name, param in network.named_parameters():
        if param.ndim < 2 or param.numel() < 10_000 or name.endswith(("cls_token", "pos_embed")):
            continue
        expected = math.sqrt(2.0 / param[0].numel())
        values = param.detach().to(torch.float64)
        assert abs(float(values.std()) - expected) <= 0.05 * expected, name
        assert abs(float(values.mean())) <= 4 * expected / math.sqrt(values.numel()), name
        checked += 1
    assert checked > 0
