import numpy as np
import pytest
import torch

from inrflow.errors import ConfigError, ContractError, SamplingError
from inrflow.fields import grid_coords
from inrflow.model import INRFlow, ModelConfig
from inrflow.sampling import (
    SamplerConfig,
    cfg_velocity,
    grid_subsample,
    sample,
    sample_ode,
    sample_resolution_agnostic,
    sample_sde,
)


def constant_field(c):
    def field(coords, values, qc, qv, t, condition):
        return np.full(np.shape(qv), c)
    return field


def linear_field(coords, values, qc, qv, t, condition):
    return -np.asarray(qv)


def zero_field(coords, values, qc, qv, t, condition):
    return np.zeros(np.shape(qv))


def toy_model(seed=0):
    model = INRFlow(ModelConfig(num_latents=4, latent_dim=16, trunk_layers=1, heads=2, condition_vocab=2), seed=seed)
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=g))
    return model.eval()


def test_cfg_velocity_examples():
    vc, vu = np.array([1.0, 2.0]), np.array([0.0, 5.0])
    np.testing.assert_array_equal(cfg_velocity(vc, vu, 1.0), vc)
    np.testing.assert_array_equal(cfg_velocity(vc, vu, 0.0), vu)
    assert cfg_velocity(np.array(1.0), np.array(0.0), 2.0) == 2.0
    with pytest.raises(ContractError):
        cfg_velocity(np.zeros(2), np.zeros(3), 1.0)


@pytest.mark.parametrize("steps", [1, 7, 50])
def test_constant_field_exact(steps):
    traj = sample_ode(constant_field(0.3), grid_coords(4, 2), cfg=SamplerConfig(steps=steps), d_out=3)
    np.testing.assert_allclose(traj.final, traj.values[0] - 0.3, atol=1e-12)
    assert traj.values.shape == (steps + 1, 1, 16, 3)
    assert traj.times[0] == 1.0 and traj.times[-1] == 0.0


def test_euler_first_order():
    coords = np.zeros((5, 1))
    errors = []
    for steps in (20, 40, 80):
        traj = sample_ode(linear_field, coords, cfg=SamplerConfig(steps=steps, seed=2), d_out=1)
        errors.append(np.abs(traj.final - np.e * traj.values[0]).max())
    ratios = [errors[0] / errors[1], errors[1] / errors[2]]
    assert all(1.7 <= r <= 2.3 for r in ratios), ratios


def test_ode_determinism():
    m = toy_model()
    a = sample_ode(m, grid_coords(4, 2), cfg=SamplerConfig(steps=5, seed=11), num_samples=2)
    b = sample_ode(m, grid_coords(4, 2), cfg=SamplerConfig(steps=5, seed=11), num_samples=2)
    assert a.values.tobytes() == b.values.tobytes()


def test_sde_zero_noise_bit_equal():
    m = toy_model()
    ode = sample_ode(m, grid_coords(4, 2), cfg=SamplerConfig(steps=6, seed=5))
    sde = sample_sde(m, grid_coords(4, 2), cfg=SamplerConfig(kind="euler_maruyama", steps=6, seed=5, noise_scale=0.0))
    assert ode.values.tobytes() == sde.values.tobytes()


def test_sde_brownian_variance():
    cfg = SamplerConfig(kind="euler_maruyama", steps=20, noise_scale=1.0, seed=0)
    traj = sample_sde(zero_field, np.zeros((1, 1)), cfg=cfg, num_samples=10_000, d_out=1)
    start, end = traj.values[0].ravel(), traj.final.ravel()
    assert abs(end.var() - (start.var() + 1.0)) <= 0.05 * (start.var() + 1.0)


def test_sde_determinism():
    cfg = SamplerConfig(kind="euler_maruyama", steps=4, noise_scale=0.5, seed=3)
    a = sample_sde(toy_model(), grid_coords(4, 2), cfg=cfg)
    b = sample_sde(toy_model(), grid_coords(4, 2), cfg=cfg)
    assert a.values.tobytes() == b.values.tobytes()


def test_grid_subsample_stride():
    coords = grid_coords(512, 2)
    idx, enc = grid_subsample(coords, 256 * 256)
    assert len(idx) == 65536
    rows, cols = np.divmod(idx, 512)
    assert set(np.unique(rows)) == set(range(0, 512, 2)) and set(np.unique(cols)) == set(range(0, 512, 2))
    np.testing.assert_array_equal(enc, coords[idx])


def test_grid_subsample_identity_and_errors():
    coords = grid_coords(8, 2)
    idx, _ = grid_subsample(coords, 64)
    np.testing.assert_array_equal(idx, np.arange(64))
    with pytest.raises(ConfigError):
        grid_subsample(coords, 9)  # side 3 does not divide 8
    with pytest.raises(ConfigError):
        grid_subsample(coords, 65)


def test_point_subsample_reproducible():
    pts = np.random.default_rng(0).uniform(-1, 1, (300, 3))
    a, _ = grid_subsample(pts, 100, seed=4)
    b, _ = grid_subsample(pts, 100, seed=4)
    np.testing.assert_array_equal(a, b)
    assert len(np.unique(a)) == 100


@pytest.mark.parametrize("kind,noise", [("euler_ode", 0.0), ("euler_maruyama", 0.3)])
def test_resolution_agnostic_subset_equality(kind, noise):
    m = toy_model()
    hi = grid_coords(16, 2)
    cfg = SamplerConfig(kind=kind, steps=10, seed=7, noise_scale=noise)
    traj = sample_resolution_agnostic(m, hi, 64, cfg=cfg, num_samples=2, condition=1)
    idx = traj.encoder_indices
    base = sample(m, hi[idx], cfg=cfg, num_samples=2, condition=1)
    assert np.abs(traj.values[:, :, idx] - base.values).max() <= 1e-5
    assert traj.final.shape == (2, 256, 3)


def test_resolution_agnostic_full_resolution_is_ode():
    m = toy_model()
    cfg = SamplerConfig(steps=4, seed=1)
    a = sample_resolution_agnostic(m, grid_coords(8, 2), 64, cfg=cfg)
    b = sample_ode(m, grid_coords(8, 2), cfg=cfg)
    assert np.abs(a.values - b.values).max() <= 1e-6


def test_export_clamp_keeps_raw():
    traj = sample_ode(constant_field(-10.0), np.zeros((4, 2)), cfg=SamplerConfig(steps=2), d_out=3)
    assert traj.final.max() > 1.5
    out = traj.export_values()
    assert out.max() <= 1.5 and out.min() >= -1.5


def test_cfg_guidance_uses_null_condition():
    calls = []

    def field(coords, values, qc, qv, t, condition):
        calls.append(None if condition is None else condition.tolist())
        return np.zeros(np.shape(qv)) if condition is None else np.where(condition[:, None, None] < 0, 0.0, 1.0) + 0 * qv

    traj = sample_ode(field, np.zeros((3, 2)), condition=1, cfg=SamplerConfig(steps=2, cfg_scale=3.0), d_out=1)
    assert [1] in calls and [-1] in calls
    np.testing.assert_allclose(traj.final, traj.values[0] - 3.0)


def test_nonfinite_raises_with_step():
    def blowup(coords, values, qc, qv, t, condition):
        return np.full(np.shape(qv), np.inf if t[0] < 0.6 else 0.0)

    with pytest.raises(SamplingError) as err:
        sample_ode(blowup, np.zeros((2, 2)), cfg=SamplerConfig(steps=4), d_out=1)
    assert err.value.step == 2


def test_bad_config():
    with pytest.raises(ConfigError):
        sample_ode(zero_field, np.zeros((2, 2)), cfg=SamplerConfig(steps=0), d_out=1)
    with pytest.raises(ContractError):
        sample_ode(zero_field, np.zeros((2, 2)), cfg=SamplerConfig())
