import dataclasses

import numpy as np
import pytest
import torch
from torch.func import functional_call

from inrflow.errors import ConfigError, ContractError
from inrflow.fields import grid_coords
from inrflow.model import (
    INRFlow,
    ModelConfig,
    assign_to_latents,
    ema_init,
    ema_update,
    make_pseudo_coords,
)
from oracles import central_difference_grad, relative_errors


def small_config(**kw):
    base = dict(num_latents=4, latent_dim=16, trunk_layers=2, heads=2, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def jitter(model, seed=1, scale=0.1):
    """Move every parameter off its init so zero-initialized paths are exercised."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return model


def test_grid_pseudo_coords():
    np.testing.assert_array_equal(
        make_pseudo_coords("grid", 4, 2), [[-0.5, -0.5], [-0.5, 0.5], [0.5, -0.5], [0.5, 0.5]]
    )
    with pytest.raises(ConfigError):
        make_pseudo_coords("grid", 5, 2)
    assert make_pseudo_coords("grid", 8, 3).shape == (8, 3)


def test_kmeans_pp_two_points():
    pts = np.array([[-1.0, -1.0], [1.0, 1.0]])
    for seed in range(5):
        got = make_pseudo_coords("kmeans_pp", 2, 2, pts, seed=seed)
        assert sorted(map(tuple, got)) == [(-1.0, -1.0), (1.0, 1.0)]


def test_random_pseudo_determinism():
    a = make_pseudo_coords("random", 16, 2, seed=3)
    np.testing.assert_array_equal(a, make_pseudo_coords("random", 16, 2, seed=3))
    assert np.all(np.abs(a) <= 1)
    assert make_pseudo_coords("hash", 16, 2).shape == (0, 2)


def test_quadrant_assignment():
    coords = grid_coords(4, 2)
    pseudo = make_pseudo_coords("grid", 4, 2)
    a = assign_to_latents(coords, pseudo, "grid")
    for j, (py, px) in enumerate(pseudo):
        members = coords[a == j]
        assert len(members) == 4
        assert np.all(np.sign(members) == np.sign([py, px]))


def test_assignment_ties_and_single_latent():
    pseudo = make_pseudo_coords("grid", 4, 2)
    assert assign_to_latents(np.zeros((1, 2)), pseudo, "grid")[0] == 0
    # equidistant from latents 1 and 3 only
    assert assign_to_latents(np.array([[0.0, 0.5]]), pseudo, "grid")[0] == 1
    coords = np.random.default_rng(0).uniform(-1, 1, (50, 2))
    assert np.all(assign_to_latents(coords, make_pseudo_coords("grid", 1, 2), "grid") == 0)


def test_assignment_errors():
    with pytest.raises(ContractError):
        assign_to_latents(np.zeros((3, 2)), np.zeros((0, 2)), "random")
    with pytest.raises(ContractError):
        assign_to_latents(np.zeros((3, 2)), None, "vanilla")


def test_hash_assignment():
    coords = np.random.default_rng(0).uniform(-1, 1, (500, 3))
    a = assign_to_latents(coords, None, "hash", num_latents=16)
    np.testing.assert_array_equal(a, assign_to_latents(coords, None, "hash", num_latents=16))
    assert a.min() >= 0 and a.max() < 16
    assert len(np.unique(a)) > 8
    # points in the same lattice cell share a latent (cell size 2/3 for L=16, d=3)
    assert len(set(assign_to_latents(np.array([[0.1, 0.1, 0.1], [0.2, 0.15, 0.3]]), None, "hash", 16))) == 1


def _inputs(b=2, n=16, seed=0, d_in=2):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1, 1, (b, n, d_in)), rng.normal(size=(b, n, 3)), rng.uniform(size=b)


def test_encode_shapes_and_batch_independence():
    m = jitter(INRFlow(small_config()))
    c, v, t = _inputs(n=10)
    c[1], v[1], t[1] = c[0], v[0], t[0]
    st = m.encode(c, v, t)
    assert st.z.shape == (2, 4, 16)
    assert torch.equal(st.z[0], st.z[1])
    assert st.assignment.shape == (2, 10)


def test_encode_permutation_within_group():
    m = jitter(INRFlow(small_config()))
    c, v, t = _inputs(b=1, n=20)
    perm = np.random.default_rng(1).permutation(20)
    a = m.encode(c, v, t).z
    b = m.encode(c[:, perm], v[:, perm], t).z
    assert torch.allclose(a, b, atol=1e-5)


def test_encoder_group_locality():
    m = jitter(INRFlow(small_config()))
    c = grid_coords(4, 2)[None]
    v = np.random.default_rng(0).normal(size=(1, 16, 3))
    st = m.encode(c, v, np.array([0.3]))
    j = st.assignment[0, 5]
    v2 = v.copy()
    v2[0, 5] += 1.0
    z2 = m.encode(c, v2, np.array([0.3])).z
    changed = (z2 - st.z).abs().amax(dim=-1)[0] > 0
    assert changed.tolist() == [k == j for k in range(4)]


def test_empty_group_placeholder():
    m = jitter(INRFlow(small_config(pseudo_coord_mode="random"), seed=0))
    with torch.no_grad():
        m.pseudo_coords.copy_(torch.tensor([[-0.5, -0.5], [0.5, 0.5], [5.0, 5.0], [-5.0, 5.0]]))
    c, v, t = _inputs(b=1, n=12)
    c = np.clip(c, -0.9, 0.9)
    st = m.encode(c, v, t)
    assert set(np.unique(st.assignment)) <= {0, 1}
    assert torch.isfinite(st.z).all()
    # an empty group's latent ignores the inputs entirely
    z2 = m.encode(c, v + 1.0, t).z
    assert torch.equal(st.z[0, 2:], z2[0, 2:])


def test_trunk_identity_at_init_and_shape():
    m = INRFlow(small_config())
    z = torch.randn(3, 4, 16, dtype=torch.float64)
    c = m.embed_conditions(np.array([0.1, 0.5, 0.9]))
    out = m.trunk(z, c)
    assert out.shape == z.shape and torch.equal(out, z)


def test_trunk_permutation_equivariance():
    m = jitter(INRFlow(small_config()))
    z = torch.randn(2, 4, 16, dtype=torch.float64)
    c = m.embed_conditions(np.array([0.2, 0.7]))
    perm = torch.tensor([2, 0, 3, 1])
    assert torch.allclose(m.trunk(z[:, perm], c), m.trunk(z, c)[:, perm], atol=1e-12)


def test_decode_conditional_independence():
    m = jitter(INRFlow(small_config(dtype="float32")))
    c, v, t = _inputs(b=2, n=16)
    cond = m.embed_conditions(t)
    z = m.trunk(m.encode(c, v, cond_emb=cond).z, cond)
    qc, qv = np.random.default_rng(5).uniform(-1, 1, (2, 9, 2)), np.random.default_rng(6).normal(size=(2, 9, 3))
    full = m.decode(qc, qv, z, cond)
    sub = [1, 4, 8]
    part = m.decode(qc[:, sub], qv[:, sub], z, cond)
    assert (full[:, sub] - part).abs().max() <= 1e-6
    one = m.decode(qc[:, 4:5], qv[:, 4:5], z, cond)
    assert (full[:, 4:5] - one).abs().max() <= 1e-6
    perm = np.random.default_rng(0).permutation(9)
    assert (m.decode(qc[:, perm], qv[:, perm], z, cond) - full[:, perm]).abs().max() <= 1e-6


def test_forward_shapes_and_batch_duplication():
    m = jitter(INRFlow(small_config()))
    c, v, t = _inputs(b=1, n=16)
    qc, qv = c[:, :5], v[:, :5]
    out = m(c, v, qc, qv, t)
    assert out.shape == (1, 5, 3)
    dup = m(np.repeat(c, 2, 0), np.repeat(v, 2, 0), np.repeat(qc, 2, 0), np.repeat(qv, 2, 0), np.repeat(t, 2))
    assert torch.allclose(dup[0], out[0]) and torch.allclose(dup[1], out[0])


def test_shape_errors():
    m = INRFlow(small_config())
    with pytest.raises(ContractError):
        m.encode(np.zeros((1, 4, 2)), np.zeros((1, 5, 3)), np.zeros(1))
    with pytest.raises(ContractError):
        m.encode(np.zeros((1, 4, 3)), np.zeros((1, 4, 3)), np.zeros(1))


def test_config_validation():
    with pytest.raises(ConfigError):
        INRFlow(small_config(latent_dim=15))
    with pytest.raises(ConfigError):
        INRFlow(small_config(num_latents=5))
    with pytest.raises(ConfigError):
        INRFlow(small_config(pseudo_coord_mode="vanilla", positional_mode="fourier_plus_rope"))


def test_deterministic_init_and_param_count():
    a, b = INRFlow(small_config(), seed=4), INRFlow(small_config(), seed=4)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n
    c = INRFlow(small_config(pseudo_coord_mode="vanilla"), seed=9)
    assert a.num_parameters() == c.num_parameters()
    assert INRFlow(small_config(trunk_layers=3)).num_parameters() > a.num_parameters()


def test_vanilla_and_hash_modes_run():
    c, v, t = _inputs(b=2, n=16, d_in=3)
    for mode in ("vanilla", "hash"):
        m = jitter(INRFlow(small_config(d_in=3, pseudo_coord_mode=mode, values_as_coords=True)))
        out = m(c, v, c, v, t)
        assert out.shape == (2, 16, 3) and torch.isfinite(out).all()
        st = m.encode(c, v, t)
        assert (st.assignment is None) == (mode == "vanilla")


def test_values_as_coords_ignores_coords_argument():
    m = jitter(INRFlow(small_config(d_in=3, pseudo_coord_mode="vanilla", values_as_coords=True)))
    c, v, t = _inputs(b=1, n=8, d_in=3)
    assert torch.equal(m(c, v, c, v, t), m(np.zeros_like(c), v, np.zeros_like(c), v, t))


def test_rope_mode():
    m = jitter(INRFlow(small_config(latent_dim=16, heads=2, positional_mode="fourier_plus_rope")))
    c, v, t = _inputs()
    assert torch.isfinite(m(c, v, c, v, t)).all()


def test_null_condition_matches_none():
    m = jitter(INRFlow(small_config(condition_vocab=3)))
    c, v, t = _inputs()
    a = m(c, v, c, v, t, None)
    b = m(c, v, c, v, t, np.array([-1, -1]))
    assert torch.equal(a, b)
    assert not torch.equal(a, m(c, v, c, v, t, np.array([0, 2])))
    with pytest.raises(ContractError):
        m(c, v, c, v, t, np.array([3, 0]))


def test_gradient_matches_finite_differences_small():
    m = jitter(INRFlow(small_config(latent_dim=8, trunk_layers=1, num_latents=4, heads=2)))
    rng = np.random.default_rng(0)
    c, v, t = rng.uniform(-1, 1, (1, 6, 2)), rng.normal(size=(1, 6, 3)), rng.uniform(size=1)

    def loss_fn(params):
        return functional_call(m, params, (c, v, c, v, t)).mean()

    loss_fn(dict(m.named_parameters())).backward()
    analytic = {n: p.grad.clone() for n, p in m.named_parameters()}
    numeric = central_difference_grad(m, loss_fn)
    assert max(relative_errors(analytic, numeric).values()) < 1e-4


def test_ema_update_examples():
    params = {"w": torch.ones(3)}
    assert torch.equal(ema_update(params, {"w": torch.zeros(3)}, 0.0)["w"], torch.ones(3))
    assert torch.equal(ema_update(params, {"w": torch.zeros(3)}, 1.0)["w"], torch.zeros(3))
    out = ema_update(params, {"w": torch.zeros(3, dtype=torch.float64)}, 0.999)["w"]
    assert torch.allclose(out, torch.full((3,), 0.001, dtype=torch.float64), atol=1e-15)
    with pytest.raises(ContractError):
        ema_update(params, {"w": torch.zeros(4)}, 0.5)


def test_ema_shadow_shapes():
    m = INRFlow(small_config())
    shadow = ema_init(m)
    assert {k: v.shape for k, v in shadow.items()} == {k: p.shape for k, p in m.named_parameters()}


def test_config_roundtrip_dict():
    cfg = small_config(condition_vocab=5)
    again = ModelConfig(**cfg.to_dict())
    assert again == cfg and dataclasses.asdict(again)["fourier"]["num_bands"] == cfg.fourier.num_bands
