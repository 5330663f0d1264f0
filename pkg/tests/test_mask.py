import itertools

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from alcot.mask import (GridIndex, MaskError, Occupancy, build_step_mask, key_layout, mask_value,
                        position_ids, step_attention_bias, visible)
from alcot.oracle import flat_grid_mask


def open_keys(mask_row, length, k):
    layout = key_layout(length, k)
    return {(g.t, g.k) for g, v in zip(layout, mask_row.tolist()) if v == 0.0}


def test_visible_examples():
    occ = Occupancy.full(3, 3)
    assert visible(GridIndex(2, 1), GridIndex(1, 1), occ)
    assert not visible(GridIndex(2, 1), GridIndex(1, 2), occ)
    assert visible(GridIndex(1, 3), GridIndex(1, 2), occ)


def test_visible_respects_occupancy():
    occ = Occupancy([3, 1], 3)
    assert not visible(GridIndex(2, 3), GridIndex(2, 2), occ)
    assert visible(GridIndex(2, 3), GridIndex(1, 3), occ)


def test_visible_out_of_range():
    occ = Occupancy.full(2, 2)
    for bad in (GridIndex(0, 1), GridIndex(3, 1), GridIndex(1, 3)):
        with pytest.raises(MaskError):
            visible(bad, GridIndex(1, 1), occ)
    with pytest.raises(MaskError):
        Occupancy([0, 1], 2)


@pytest.mark.parametrize("length", [1, 3, 7])
def test_step_one_is_standard_causal(length):
    occ = Occupancy.full(length, 4)
    got = torch.tensor([[visible(GridIndex(i, 1), GridIndex(j, 1), occ) for j in range(1, length + 1)]
                        for i in range(1, length + 1)])
    assert torch.equal(got, torch.ones(length, length, dtype=torch.bool).tril())
    queries, mask = build_step_mask(length, 4, 1, [range(1, length + 1)])
    assert queries == list(range(1, length + 1))
    assert torch.equal(mask == 0, torch.ones(length, length, dtype=torch.bool).tril())


def test_build_step_mask_pruned_token():
    queries, mask = build_step_mask(2, 2, 2, [[1, 2], [1]])
    assert queries == [1]
    assert open_keys(mask[0], 2, 2) == {(1, 1), (1, 2)}


def test_build_step_mask_single_token_chain():
    queries, mask = build_step_mask(1, 4, 4, [[1]] * 4)
    assert queries == [1]
    assert open_keys(mask[0], 1, 4) == {(1, 1), (1, 2), (1, 3), (1, 4)}


def test_build_step_mask_empty_query_set():
    queries, mask = build_step_mask(3, 3, 2, [[1, 2, 3], []])
    assert queries == [] and mask.shape == (0, 6)


def test_build_step_mask_errors():
    with pytest.raises(MaskError):
        build_step_mask(2, 2, 3, [[1]] * 3)
    with pytest.raises(MaskError):
        build_step_mask(2, 2, 2, [[1, 2]])
    with pytest.raises(MaskError):
        build_step_mask(2, 2, 1, [[3]])


def test_mask_value_is_finite_and_safe():
    for dt in (torch.float32, torch.float64):
        v = mask_value(dt)
        assert v < 0 and torch.isfinite(torch.tensor(v, dtype=dt) * 2)
    row = torch.tensor([0.0, mask_value(torch.float32)])
    assert torch.softmax(row, 0).tolist() == [1.0, 0.0]


def test_position_ids_shared_across_steps():
    pos = position_ids(8, 4)
    assert pos.shape == (4, 8)
    assert int(pos[0, 4]) == 5 and int(pos[2, 4]) == 5
    assert int(pos[3, 0]) == 1
    assert int(pos.max()) == 8 == int(position_ids(8, 1).max())


def test_build_step_mask_matches_flat_grid_oracle():
    length, k_max = 4, 3
    flat = flat_grid_mask(length, k_max)
    all_pos = list(range(1, length + 1))
    for k in range(1, k_max + 1):
        queries, mask = build_step_mask(length, k_max, k, [all_pos] * k)
        for qi, t in enumerate(queries):
            row = flat[(k - 1) * length + t - 1, : k * length]
            assert torch.equal(mask[qi] == 0, row)
        # keys at deeper steps are never visible to step-k queries
        assert not bool(flat[(k - 1) * length:k * length, k * length:].any())


def grids(draw_len=st.integers(1, 5), draw_k=st.integers(1, 4)):
    @st.composite
    def _grid(draw):
        length, k_max = draw(draw_len), draw(draw_k)
        k_star = draw(st.lists(st.integers(1, k_max), min_size=length, max_size=length))
        return length, k_max, k_star
    return _grid()


@settings(max_examples=60, deadline=None)
@given(grids())
def test_step_mask_agrees_with_predicate(grid):
    length, k_max, k_star = grid
    occ = Occupancy(k_star, k_max)
    sets = [occ.active_set(k) for k in range(1, k_max + 1)]
    for k in range(1, k_max + 1):
        queries, mask = build_step_mask(length, k_max, k, sets[:k])
        assert queries == sets[k - 1]
        layout = key_layout(length, k)
        for qi, t in enumerate(queries):
            src = GridIndex(t, k)
            expect = [visible(src, dst, occ) for dst in layout]
            assert (mask[qi] == 0).tolist() == expect
            # a query always sees its own column up to its step, so no row is fully masked
            assert all((mask[qi] == 0)[(s - 1) * length + t - 1] for s in range(1, k + 1))


@settings(max_examples=40, deadline=None)
@given(grids(st.integers(1, 4), st.integers(1, 3)))
def test_visibility_is_transitive(grid):
    length, k_max, _ = grid
    occ = Occupancy.full(length, k_max)
    cells = [GridIndex(t, k) for t in range(1, length + 1) for k in range(1, k_max + 1)]
    for a, b, c in itertools.product(cells, repeat=3):
        if visible(a, b, occ) and visible(b, c, occ):
            assert visible(a, c, occ)


def test_monotone_active_sets():
    occ = Occupancy([4, 2, 1, 3], 4)
    for k in range(1, 4):
        assert set(occ.active_set(k + 1)) <= set(occ.active_set(k))
    assert occ.active_set(1) == [1, 2, 3, 4]


def test_step_attention_bias_batched_shape():
    q_pos = torch.tensor([[0, 2], [1, 0]])
    key_active = torch.ones(2, 2, 3, dtype=torch.bool)
    bias = step_attention_bias(q_pos, key_active, torch.float32)
    assert bias.shape == (2, 1, 2, 6)
    assert (bias[0, 0, 0] == 0).tolist() == [True, False, False, True, False, False]
