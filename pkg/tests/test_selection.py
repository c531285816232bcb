import torch
import pytest

from panoqa.selection import (
    COMBINATIONS,
    DEFAULT_TASKS,
    FeatureSelection,
    FixedFusion,
    QUALITY,
)

WIDTHS = (16, 24, 32, 32)
C = 24
V = 4


def make(seed=0, **kw):
    torch.manual_seed(seed)
    return FeatureSelection(WIDTHS, channels=C, num_views=V, **kw)


def pyramid(seed=1, batch=None):
    torch.manual_seed(seed)
    lead = (V,) if batch is None else (batch, V)
    sides = (8, 4, 2, 2)
    return tuple(torch.randn(*lead, WIDTHS[i], sides[i], sides[i]) for i in range(4))


def test_combination_table_frozen():
    assert len(COMBINATIONS) == 15
    assert len(set(COMBINATIONS)) == 15
    assert COMBINATIONS[:4] == ((0,), (1,), (2,), (3,))
    assert COMBINATIONS[-1] == (0, 1, 2, 3)
    sizes = [len(c) for c in COMBINATIONS]
    assert sizes == sorted(sizes)


def test_unify_is_bias_free_zero_to_zero():
    sel = make()
    zeros = tuple(torch.zeros(V, WIDTHS[i], s, s) for i, s in enumerate((8, 4, 2, 2)))
    for u in sel.unify_channels(zeros):
        assert torch.equal(u, torch.zeros_like(u))


def test_fused_levels_share_stride8_grid():
    sel = make()
    fused = sel.fuse_levels(sel.unify_channels(pyramid()))
    assert len(fused) == 4
    for m in fused:
        assert m.shape == (V, C, 8, 8)


def test_zero_pyramid_gives_zero_fused_maps():
    sel = make()
    zeros = tuple(torch.zeros(V, WIDTHS[i], s, s) for i, s in enumerate((8, 4, 2, 2)))
    for m in sel.fuse_levels(sel.unify_channels(zeros)):
        assert torch.equal(m, torch.zeros_like(m))


def test_constant_pyramid_gives_spatially_constant_maps():
    # constant inputs stay constant through 1x1 maps and bilinear resizes
    sel = make()
    consts = tuple(
        torch.ones(V, WIDTHS[i], s, s) * 0.37 for i, s in enumerate((8, 4, 2, 2))
    )
    for m in sel.fuse_levels(sel.unify_channels(consts)):
        flat = m.reshape(V, C, -1)
        assert (flat.std(dim=-1) < 1e-6).all()


def test_forward_soft_contract():
    sel = make()
    out, state = sel(pyramid(), mode="soft")
    assert set(out) == set(DEFAULT_TASKS)
    for t in out:
        assert out[t].shape == (V, C, 8, 8)
    assert state.level_weights.shape == (1, 4)
    torch.testing.assert_close(
        state.level_weights.sum(dim=-1), torch.ones(1)
    )
    for t, s in state.scores.items():
        assert s.shape == (1, 15)
        torch.testing.assert_close(s.sum(dim=-1), torch.ones(1))
        assert (s > 0).all()
    assert set(state.chosen) == set(DEFAULT_TASKS)


def test_hard_mode_bit_equals_indexed_combination():
    sel = make(3)
    feats = pyramid(4)
    out, state = sel(feats, mode="hard")
    fused = sel.fuse_levels(sel.unify_channels(feats))
    combos = sel.combination_tensors(fused, state.level_weights)
    for t in DEFAULT_TASKS:
        idx = int(state.chosen[t][0])
        assert torch.equal(out[t], combos[idx])


def test_one_hot_soft_matches_hard():
    sel = make(5)
    feats = pyramid(6)
    one_hot = {}
    for i, t in enumerate(DEFAULT_TASKS):
        v = torch.zeros(1, 15)
        v[0, (i * 3 + 2) % 15] = 1.0
        one_hot[t] = v
    soft, s_state = sel(feats, mode="soft", override_scores=one_hot)
    hard, h_state = sel(feats, mode="hard", override_scores=one_hot)
    for t in DEFAULT_TASKS:
        assert int(s_state.chosen[t][0]) == int(h_state.chosen[t][0])
        assert (soft[t] - hard[t]).abs().max() < 1e-6


def test_batched_forward_and_per_sample_choice():
    sel = make(7)
    feats = pyramid(8, batch=3)
    out, state = sel(feats, mode="hard")
    assert out[QUALITY].shape == (3, V, C, 8, 8)
    assert state.level_weights.shape == (3, 4)
    assert state.chosen[QUALITY].shape == (3,)


def test_scaling_score_logits_keeps_choice():
    sel = make(9)
    feats = pyramid(10)
    _, before = sel(feats, mode="hard")
    with torch.no_grad():
        sel.score_heads["task_" + QUALITY].weight.mul_(3.0)
        sel.score_heads["task_" + QUALITY].bias.mul_(3.0)
    _, after = sel(feats, mode="hard")
    assert torch.equal(before.chosen[QUALITY], after.chosen[QUALITY])


def test_view_count_mismatch_raises():
    sel = make()
    bad = tuple(
        torch.randn(V + 1, WIDTHS[i], s, s) for i, s in enumerate((8, 4, 2, 2))
    )
    with pytest.raises(ValueError):
        sel(bad)


def test_state_serialization():
    sel = make()
    _, state = sel(pyramid())
    d = state.to_lists()
    assert len(d["level_weights"][0]) == 4
    assert len(d["scores"][QUALITY][0]) == 15
    assert isinstance(d["chosen"][QUALITY][0], int)


def test_fixed_fusion_shares_one_tensor():
    torch.manual_seed(11)
    fixed = FixedFusion(WIDTHS, channels=C)
    out, state = fixed(pyramid(12))
    assert state is None
    base = out[QUALITY]
    assert base.shape == (V, C, 8, 8)
    for t in DEFAULT_TASKS:
        assert out[t] is base
