import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from m2dt.diffusion import (
    NoiseSchedule,
    ddim_step,
    forward_perturb,
    make_zero_snr_schedule,
    recover_clean,
    timestep_grid,
    velocity_target,
)

from oracles import linear_zero_snr_reference

QUARTER = NoiseSchedule(np.array([1.0, 0.25, 0.0]))


@pytest.mark.parametrize("T", [2, 3, 10, 100, 1000])
@pytest.mark.parametrize("base", ["linear", "cosine"])
def test_schedule_endpoints_and_monotone(T, base):
    s = make_zero_snr_schedule(T, base)
    assert s.T == T
    assert s.alpha_bar[0] == 1.0
    assert s.alpha_bar[T] == 0.0
    assert np.all(np.diff(s.alpha_bar) < 0)


def test_schedule_matches_reference_rescaling():
    s = make_zero_snr_schedule(1000)
    assert abs(s.alpha_bar[500] - linear_zero_snr_reference(1000, 500)) <= 1e-12
    s100 = make_zero_snr_schedule(100)
    for t in (1, 37, 99):
        assert abs(s100.alpha_bar[t] - linear_zero_snr_reference(100, t)) <= 1e-12


def test_schedule_rejects_short():
    with pytest.raises(ValueError):
        make_zero_snr_schedule(1)


def test_scalar_hand_values():
    z, e = torch.tensor([2.0], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64)
    assert forward_perturb(z, e, 1, QUARTER).item() == pytest.approx(0.5 * 2 + math.sqrt(0.75), abs=1e-12)
    assert forward_perturb(z, e, 1, QUARTER).item() == pytest.approx(1.8660, abs=1e-4)
    assert velocity_target(z, e, 1, QUARTER).item() == pytest.approx(-1.2321, abs=1e-4)
    zt = forward_perturb(z, e, 1, QUARTER)
    v = velocity_target(z, e, 1, QUARTER)
    z0, eps = recover_clean(zt, v, 1, QUARTER)
    assert z0.item() == pytest.approx(2.0, abs=1e-6)
    assert eps.item() == pytest.approx(1.0, abs=1e-6)


def test_endpoint_identities():
    s = make_zero_snr_schedule(50)
    gen = torch.Generator().manual_seed(0)
    z, e = torch.randn(4, 3, generator=gen), torch.randn(4, 3, generator=gen)
    assert torch.equal(forward_perturb(z, e, 0, s), z)
    assert torch.equal(forward_perturb(z, e, 50, s), e)
    assert torch.equal(velocity_target(z, e, 0, s), e)
    assert torch.equal(velocity_target(z, e, 50, s), -z)
    z0, _ = recover_clean(z, e, 0, s)
    assert torch.equal(z0, z)


def test_terminal_step_carries_no_signal():
    s = make_zero_snr_schedule(20)
    z = torch.randn(3, 2, requires_grad=True)
    e = torch.randn(3, 2)
    (g,) = torch.autograd.grad(forward_perturb(z, e, 20, s).sum(), z)
    assert g.abs().sum().item() == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100), st.integers(0, 10_000))
def test_round_trip_all_t(t, seed):
    s = make_zero_snr_schedule(100)
    gen = torch.Generator().manual_seed(seed)
    z, e = torch.randn(5, 4, generator=gen), torch.randn(5, 4, generator=gen)
    z0, e0 = recover_clean(forward_perturb(z, e, t, s), velocity_target(z, e, t, s), t, s)
    assert (z0 - z).abs().max().item() <= 1e-6
    assert (e0 - e).abs().max().item() <= 1e-6


def test_per_row_timesteps_broadcast():
    s = make_zero_snr_schedule(10)
    z, e = torch.ones(2, 3, 1), torch.zeros(2, 3, 1)
    t = np.array([[0, 5, 10], [10, 10, 0]])
    out = forward_perturb(z, e, t, s)
    expected = torch.as_tensor(np.sqrt(s.alpha_bar[t]), dtype=torch.float32)[..., None]
    torch.testing.assert_close(out, expected)


def test_shape_mismatch():
    s = make_zero_snr_schedule(10)
    with pytest.raises(ValueError):
        forward_perturb(torch.zeros(2, 3), torch.zeros(3, 2), 1, s)
    with pytest.raises(ValueError):
        velocity_target(torch.zeros(2), torch.zeros(3), 1, s)
    with pytest.raises(ValueError):
        forward_perturb(torch.zeros(2), torch.zeros(2), 11, s)


def _oracle_v(z_V, z_t, t, s):
    a, b = s.coeffs(t)
    return (a * z_t - z_V) / b


def test_ddim_identity_and_errors():
    s = make_zero_snr_schedule(10)
    z = torch.randn(3)
    assert ddim_step(z, torch.randn(3), 4, 4, s) is z
    with pytest.raises(ValueError):
        ddim_step(z, z, 3, 4, s)


def test_ddim_one_step_oracle_exact():
    s = make_zero_snr_schedule(100)
    gen = torch.Generator().manual_seed(0)
    z_V, noise = torch.randn(6, 4, generator=gen), torch.randn(6, 4, generator=gen)
    v = _oracle_v(z_V, noise, 100, s)
    assert torch.equal(ddim_step(noise, v, 100, 0, s), z_V)


def test_ddim_multi_step_matches_one_step():
    s = make_zero_snr_schedule(100)
    gen = torch.Generator().manual_seed(1)
    z_V, noise = torch.randn(6, 4, generator=gen), torch.randn(6, 4, generator=gen)
    z = noise
    grid = timestep_grid(100, 10)
    for t, tn in zip(grid[:-1], grid[1:]):
        z = ddim_step(z, _oracle_v(z_V, z, t, s), t, tn, s)
    one = ddim_step(noise, _oracle_v(z_V, noise, 100, s), 100, 0, s)
    assert (z - one).abs().max().item() <= 1e-5


def test_timestep_grid():
    assert timestep_grid(100, 1) == [100, 0]
    assert timestep_grid(100, 4) == [100, 75, 50, 25, 0]
    g = timestep_grid(100, 100)
    assert g == list(range(100, -1, -1))
    with pytest.raises(ValueError):
        timestep_grid(10, 11)
    with pytest.raises(ValueError):
        timestep_grid(10, 0)
