import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from alcot import halting
from alcot.halting import (HaltingError, HaltingSchedule, compute_exit, compute_reach,
                           finalize_gates, mix_states, prune_ratio, reallocate_residual,
                           truncation_step)
from alcot.oracle import halting_mc, halting_mc_vectorized


def t64(x):
    return torch.tensor(x, dtype=torch.float64)


def random_gates(rng, n, k_max):
    g = rng.uniform(0.0, 1.0, size=(n, k_max))
    g[:, -1] = 0.0
    return g


@pytest.mark.parametrize("gates, expected", [
    ((0.5, 0.5, 0.5, 0.0), (1.0, 0.5, 0.25, 0.125)),
    ((0.0, 0.0, 0.0, 0.0), (1.0, 0.0, 0.0, 0.0)),
    ((1.0, 1.0, 1.0, 0.0), (1.0, 1.0, 1.0, 1.0)),
])
def test_compute_reach_examples(gates, expected):
    assert compute_reach(t64(gates)).tolist() == list(expected)


@pytest.mark.parametrize("gates, expected", [
    ((0.5, 0.5, 0.5, 0.0), (0.5, 0.25, 0.125, 0.125)),
    ((0.0, 0.0, 0.0, 0.0), (1.0, 0.0, 0.0, 0.0)),
])
def test_compute_exit_examples(gates, expected):
    g = t64(gates)
    ex = compute_exit(g, compute_reach(g))
    assert ex.tolist() == list(expected)
    assert float(ex.sum()) == 1.0


def test_exit_mass_conservation_random():
    g = t64(random_gates(np.random.default_rng(0), 10_000, 6))
    ex = compute_exit(g, compute_reach(g))
    assert float((ex.sum(-1) - 1).abs().max()) <= 1e-9


def test_exit_last_equals_reach_last():
    g = t64(random_gates(np.random.default_rng(1), 100, 5))
    r = compute_reach(g)
    assert torch.equal(compute_exit(g, r)[:, -1], r[:, -1])


def test_empty_and_mismatch_errors():
    with pytest.raises(HaltingError):
        compute_reach(t64([]))
    with pytest.raises(HaltingError):
        compute_exit(t64([0.5, 0.0]), t64([1.0, 0.5, 0.2]))


@pytest.mark.parametrize("reach, tau, k", [
    ((1, 0.5, 0.25, 0.125), 0.3, 2),
    ((1, 0.5, 0.25, 0.125), 1.0, 1),
    ((1, 1, 1, 1), 0.5, 4),
])
def test_truncation_examples(reach, tau, k):
    assert truncation_step(t64(reach), tau) == k


def test_truncation_tie_counts_as_reachable():
    assert truncation_step(t64([1, 0.5, 0.25]), 0.25) == 3


@pytest.mark.parametrize("tau", [0.0, -0.1, 1.5])
def test_truncation_rejects_bad_threshold(tau):
    with pytest.raises(HaltingError):
        truncation_step(t64([1, 0.5]), tau)


def test_reallocate_examples():
    ex, r = t64([0.5, 0.25, 0.125, 0.125]), t64([1, 0.5, 0.25, 0.125])
    assert reallocate_residual(ex, r, 2).tolist() == [0.5, 0.5]
    assert torch.equal(reallocate_residual(ex, r, 4), ex)
    for bad in (0, 5):
        with pytest.raises(HaltingError):
            reallocate_residual(ex, r, bad)


def test_tail_sum_identity_random():
    rng = np.random.default_rng(2)
    g = t64(random_gates(rng, 10_000, 6))
    r = compute_reach(g)
    ex = compute_exit(g, r)
    taus = rng.uniform(1e-3, 1.0, size=10_000)
    worst_tail, worst_mass = 0.0, 0.0
    for i in range(10_000):
        k = truncation_step(r[i], float(taus[i]))
        hat = reallocate_residual(ex[i], r[i], k)
        tail = sum(float(v) for v in ex[i, k - 1:])  # explicit summation
        worst_tail = max(worst_tail, abs(float(hat[-1]) - tail))
        worst_mass = max(worst_mass, abs(float(hat.sum()) - 1.0))
    assert worst_tail <= 1e-12
    assert worst_mass <= 1e-9


def test_batched_reallocation_matches_per_row():
    rng = np.random.default_rng(3)
    g = t64(random_gates(rng, 64, 5))
    r = compute_reach(g)
    ex = compute_exit(g, r)
    ks = truncation_step(r, 0.2)
    full = reallocate_residual(ex, r, ks)
    for i in range(64):
        k = int(ks[i])
        assert torch.equal(full[i, :k], reallocate_residual(ex[i], r[i], k))
        assert bool((full[i, k:] == 0).all())


def test_mix_states_examples():
    e1, e2 = t64([1, 0]), t64([0, 1])
    assert mix_states(t64([0.5, 0.5]), [e1, e2]).tolist() == [0.5, 0.5]
    s = t64([0.3, -2.0, 7.0])
    assert torch.equal(mix_states(t64([1.0]), [s]), s)
    v = t64([1.5, -0.25])
    assert torch.allclose(mix_states(t64([0.25, 0.25, 0.5]), [v, v, v]), v, atol=0, rtol=1e-15)


def test_mix_states_errors():
    with pytest.raises(HaltingError):
        mix_states(t64([0.5, 0.5]), [t64([1.0])])
    with pytest.raises(HaltingError):
        mix_states(t64([0.5, 0.4]), [t64([1.0]), t64([2.0])])


def test_prune_ratio_examples():
    assert prune_ratio([5, 5, 5], 5) == 0.0
    assert prune_ratio([0, 0], 5) == 1.0
    lengths = [5] * 38 + [4] * 62  # mean executed length 4.38 under l_max = 5
    assert np.mean(lengths) == pytest.approx(4.38)
    assert prune_ratio(lengths, 5) == pytest.approx(0.124, abs=1e-12)
    with pytest.raises(HaltingError):
        prune_ratio([], 5)
    with pytest.raises(HaltingError):
        prune_ratio([1], 0)


def test_finalize_gates_clamps_and_forces_halt():
    g = finalize_gates(t64([0.0, 1.0, 0.3, 0.9]))
    assert g.tolist() == [halting.GATE_EPS, 1 - halting.GATE_EPS, 0.3, 0.0]


def test_schedule_from_gates():
    s = HaltingSchedule.from_gates([0.5, 0.5, 0.5, 0.0], 0.3)
    assert s.k_star == 2 and s.latent_length == 1
    assert s.hat_exit.tolist() == [0.5, 0.5]
    with pytest.raises(HaltingError):
        HaltingSchedule.from_gates([0.5, 0.2], 0.3)


def test_degenerate_tiny_threshold_keeps_everything():
    g = t64(random_gates(np.random.default_rng(4), 200, 5))
    g = finalize_gates(g)
    r = compute_reach(g)
    ex = compute_exit(g, r)
    ks = truncation_step(r, 1e-300)
    assert bool((ks == 5).all())
    assert torch.equal(reallocate_residual(ex, r, ks), ex)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=8),
       st.floats(1e-6, 1.0), st.floats(1e-6, 1.0))
def test_flow_properties(raw, tau_a, tau_b):
    g = t64(raw[:-1] + [0.0])
    r = compute_reach(g)
    assert float(r[0]) == 1.0
    assert bool((r[1:] <= r[:-1]).all())
    ex = compute_exit(g, r)
    assert abs(float(ex.sum()) - 1.0) <= 1e-9
    lo, hi = sorted((tau_a, tau_b))
    assert truncation_step(r, hi) <= truncation_step(r, lo)
    k = truncation_step(r, lo)
    assert abs(float(reallocate_residual(ex, r, k).sum()) - 1.0) <= 1e-9


def test_float32_mass_conservation():
    g = torch.tensor(random_gates(np.random.default_rng(5), 10_000, 8), dtype=torch.float32)
    ex = compute_exit(g, compute_reach(g))
    assert float((ex.sum(-1) - 1).abs().max()) <= 1e-5


def test_monte_carlo_examples():
    hist = halting_mc_vectorized([0.5, 0.5, 0.5, 0.0], 100_000)
    expected = np.array([0.5, 0.25, 0.125, 0.125])
    se = np.sqrt(expected * (1 - expected) / 100_000)
    assert np.all(np.abs(hist - expected) <= 3 * se)
    assert halting_mc([0.0, 0.3, 0.0], 500).tolist() == [1.0, 0.0, 0.0]
    assert halting_mc([1.0, 1.0, 0.0], 500).tolist() == [0.0, 0.0, 1.0]
    with pytest.raises(ValueError):
        halting_mc([0.0], 0)


def test_monte_carlo_loop_and_vectorized_agree():
    g = [0.7, 0.4, 0.9, 0.0]
    a = halting_mc(g, 20_000, np.random.default_rng(1))
    b = halting_mc_vectorized(g, 20_000, np.random.default_rng(2))
    assert np.abs(a - b).max() < 0.02


def test_monte_carlo_many_vectors():
    from alcot.oracle import halting_mc_batch

    rng = np.random.default_rng(6)
    n, k_max, samples = 10_000, 5, 100_000
    g = random_gates(rng, n, k_max)
    expected = compute_exit(t64(g), compute_reach(t64(g))).numpy()
    hist = halting_mc_batch(g, samples, rng)
    assert np.allclose(hist.sum(1), 1.0)
    var = expected * (1 - expected) / samples
    ok = expected * (1 - expected) * samples >= 1.0  # normal approximation is meaningless for near-empty cells
    z = np.abs(hist - expected)[ok] / np.sqrt(var[ok])
    # 3 sigma per cell: about 0.27% of cells should exceed it by chance
    assert np.mean(z > 3) < 0.005


def test_binomial_sampler_agrees_with_coin_loop():
    from alcot.oracle import halting_mc_batch

    g = [0.8, 0.5, 0.3, 0.0]
    a = halting_mc(g, 20_000, np.random.default_rng(3))
    b = halting_mc_batch([g], 20_000, np.random.default_rng(4))[0]
    assert np.abs(a - b).max() < 0.02
    with pytest.raises(ValueError):
        halting_mc_batch([g], 0)
