from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from diffsearch.errors import ConfigError
from diffsearch.schedule import (DiffusionState, NoiseConfig, add_noise,
                                 build_cosine_schedule, duplicate_ground_truth,
                                 normalize_embeddings, pure_noise_state,
                                 sample_timestep)


def _cosine_reference(t: int, T: int) -> float:
    s = 0.008
    f = lambda u: math.cos(((u / T + s) / (1 + s)) * math.pi / 2) ** 2
    return f(t) / f(0)


def test_alpha_bar_endpoints():
    table = build_cosine_schedule(1000)
    assert table.alpha_bar[0] == 1.0
    assert 0.0 <= table.alpha_bar[1000] <= 1e-3  # clipped tail


def test_alpha_bar_midpoint_matches_formula():
    table = build_cosine_schedule(1000)
    assert table.alpha_bar[500] == pytest.approx(_cosine_reference(500, 1000), rel=1e-10)
    # away from the clipped tail the cumulative product telescopes exactly
    for t in (1, 10, 100, 250, 750, 900):
        assert table.alpha_bar[t] == pytest.approx(_cosine_reference(t, 1000), rel=1e-9)


def test_schedule_strictly_decreasing():
    table = build_cosine_schedule(1000)
    assert (np.diff(table.alpha_bar) < 0).all()
    assert (table.betas > 0).all() and (table.betas <= 0.999).all()
    assert (table.alpha_bar >= 0).all() and (table.alpha_bar <= 1).all()


def test_schedule_rejects_bad_T():
    with pytest.raises(ConfigError):
        build_cosine_schedule(0)


def test_duplicate_exact_division():
    out = duplicate_ground_truth(["a", "b", "c"], 300)
    assert len(out) == 300
    assert all(out.count(k) == 100 for k in "abc")


def test_duplicate_remainder_goes_first():
    out = duplicate_ground_truth(["a", "b"], 5)
    assert out == ["a", "a", "a", "b", "b"]


def test_duplicate_seven_into_300():
    out = duplicate_ground_truth(list(range(7)), 300)
    counts = [out.count(i) for i in range(7)]
    assert counts == [43, 43, 43, 43, 43, 43, 42]


def test_duplicate_conserves_multiset():
    items = [("b1", 3), ("b2", 5), ("b3", 3)]
    out = duplicate_ground_truth(items, 100)
    assert len(out) == 100
    assert set(out) == set(items)


def test_duplicate_errors():
    with pytest.raises(ValueError):
        duplicate_ground_truth([], 10)
    with pytest.raises(ValueError):
        duplicate_ground_truth([1, 2, 3], 2)


def test_add_noise_t_out_of_range():
    table = build_cosine_schedule(10)
    rng = torch.Generator().manual_seed(0)
    with pytest.raises(ValueError):
        add_noise(torch.zeros(2, 4), torch.zeros(2, 3), 0, table, rng)
    with pytest.raises(ValueError):
        add_noise(torch.zeros(2, 4), torch.zeros(2, 3), 11, table, rng)


def test_add_noise_exact_at_alpha_bar_one():
    # hypothetical table with abar=1 at t=1: the t->0 limit returns the
    # clean scaled signals exactly
    from diffsearch.schedule import ScheduleTable
    table = ScheduleTable(T=2, alpha_bar=np.array([1.0, 1.0, 0.5]),
                          alphas=np.array([1.0, 0.5]), betas=np.array([0.0, 0.5]))
    rng = torch.Generator().manual_seed(0)
    b0 = torch.full((8, 4), 1.5)
    e0 = torch.full((8, 16), -0.5)
    state = add_noise(b0, e0, 1, table, rng)
    assert torch.equal(state.boxes, b0)
    assert torch.equal(state.embeds, e0)


def test_add_noise_near_clean_at_small_t():
    table = build_cosine_schedule(1000)
    rng = torch.Generator().manual_seed(0)
    b0 = torch.full((8, 4), 1.5)
    e0 = torch.full((8, 16), -0.5)
    state = add_noise(b0, e0, 1, table, rng)
    sa = table.sqrt_alpha_bar(1)
    sn = table.sqrt_one_minus_alpha_bar(1)
    assert sn < 0.01
    assert torch.allclose(state.boxes, sa * b0, atol=5 * sn)
    assert torch.allclose(state.embeds, sa * e0, atol=5 * sn)


def test_add_noise_pure_noise_at_T():
    table = build_cosine_schedule(1000)
    rng = torch.Generator().manual_seed(1)
    n = 25000
    b0 = torch.full((n, 4), 100.0)  # huge signal: would dominate if not suppressed
    e0 = torch.full((n, 4), -100.0)
    state = add_noise(b0, e0, 1000, table, rng)
    # signal contribution sqrt(abar_T)*100 < 0.01; samples are near-standard normal
    for x in (state.boxes, state.embeds):
        assert abs(float(x.mean())) < 0.02
        assert float(x.var()) == pytest.approx(1.0, abs=0.02)


@pytest.mark.parametrize("t", [100, 500, 1000])
def test_add_noise_moments_match_closed_form(t):
    table = build_cosine_schedule(1000)
    rng = torch.Generator().manual_seed(42 + t)
    n = 25000  # x4 coordinates = 1e5 samples per channel
    signal_b = torch.tensor([0.8, -1.2, 0.3, 1.9]).expand(n, 4)
    signal_e = torch.tensor([2.0, -0.7, 0.0, 1.1]).expand(n, 4)
    state = add_noise(signal_b, signal_e, t, table, rng)
    sa = table.sqrt_alpha_bar(t)
    var = 1.0 - float(table.alpha_bar[t])
    se_mean = math.sqrt(var / n)
    se_var = var * math.sqrt(2.0 / (n - 1))
    for x, sig in ((state.boxes, signal_b), (state.embeds, signal_e)):
        mean = x.mean(dim=0)
        emp_var = x.var(dim=0)
        for c in range(4):
            assert abs(float(mean[c]) - sa * float(sig[0, c])) < 3 * se_mean
            assert abs(float(emp_var[c]) - var) < 3 * se_var


def test_add_noise_same_t_for_both_channels():
    table = build_cosine_schedule(100)
    rng = torch.Generator().manual_seed(0)
    state = add_noise(torch.zeros(3, 4), torch.zeros(3, 8), 40, table, rng)
    assert state.t == 40
    assert state.N == 3


def test_sample_timestep_t_one():
    rng = torch.Generator().manual_seed(0)
    assert all(sample_timestep(1, rng) == 1 for _ in range(20))


def test_sample_timestep_uniform_mean():
    rng = torch.Generator().manual_seed(0)
    draws = torch.randint(1, 1001, (10**6,), generator=rng).float()
    assert abs(float(draws.mean()) - 500.5) < 1.0


def test_sample_timestep_deterministic():
    a = torch.Generator().manual_seed(9)
    b = torch.Generator().manual_seed(9)
    seq_a = [sample_timestep(1000, a) for _ in range(50)]
    seq_b = [sample_timestep(1000, b) for _ in range(50)]
    assert seq_a == seq_b
    assert all(1 <= t <= 1000 for t in seq_a)


def test_noise_config_validation():
    with pytest.raises(ConfigError):
        NoiseConfig(s1=0.0)
    with pytest.raises(ConfigError):
        NoiseConfig(T=0)
    cfg = NoiseConfig()
    assert (cfg.s1, cfg.s2) == (2.0, 3.0)


def test_normalize_embeddings_idempotent():
    rng = torch.Generator().manual_seed(0)
    e = torch.randn(10, 32, generator=rng)
    n1 = normalize_embeddings(e)
    assert torch.allclose(n1.norm(dim=-1), torch.ones(10), atol=1e-6)
    assert torch.allclose(normalize_embeddings(n1), n1, atol=1e-7)


def test_pure_noise_state_shapes():
    rng = torch.Generator().manual_seed(0)
    state = pure_noise_state(6, 12, 17, rng)
    assert state.boxes.shape == (6, 4) and state.embeds.shape == (6, 12)
    assert state.t == 17


def test_diffusion_state_checks_set_size():
    with pytest.raises(ValueError):
        DiffusionState(boxes=torch.zeros(3, 4), embeds=torch.zeros(2, 8), t=1)
