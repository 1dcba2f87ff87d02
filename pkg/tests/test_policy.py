"""Diffusion policy: schedule, nets, training, and samplers."""
from __future__ import annotations

import numpy as np
import pytest

from lpb import data as datamod
from lpb import env as envmod
from lpb import policy as polmod
from lpb.errors import ContractError

# ---------------------------------------------------------------------------
# noise schedule


def test_cosine_schedule_shape_and_monotonicity():
    sched = polmod.cosine_schedule(K=100)
    abars = np.array([sched.abar(k) for k in range(0, 101)])
    assert abars[0] == pytest.approx(1.0)
    assert np.all(np.diff(abars) < 0)
    assert abars[-1] < 0.01
    betas = np.array([sched.beta(k) for k in range(1, 101)])
    assert np.all(betas > 0) and np.all(betas <= 0.999)


def test_cosine_schedule_matches_closed_form():
    # abar(k) follows the squared-cosine profile normalized to abar(0) = 1
    K, s = 100, 0.008

    def f(k):
        return np.cos((k / K + s) / (1 + s) * np.pi / 2) ** 2

    sched = polmod.cosine_schedule(K=K, offset=s)
    for k in (1, 17, 50, 99):
        want = f(k) / f(0)
        got = sched.abar(k)
        assert got == pytest.approx(want, rel=1e-6) or got == pytest.approx(
            np.prod([sched.alpha(j) for j in range(1, k + 1)]), rel=1e-6)
    # alpha products reproduce abar exactly
    prod = 1.0
    for k in range(1, K + 1):
        prod *= sched.alpha(k)
        assert sched.abar(k) == pytest.approx(prod, rel=1e-9)


def test_timestep_embedding_basics():
    e0 = polmod.timestep_embedding(0)
    e1 = polmod.timestep_embedding(1)
    assert e0.shape == e1.shape
    assert not np.allclose(e0, e1)
    # batch form stacks the scalar form
    eb = polmod.timestep_embedding(np.array([0, 1]))
    np.testing.assert_allclose(eb[0], e0, atol=1e-7)
    np.testing.assert_allclose(eb[1], e1, atol=1e-7)


# ---------------------------------------------------------------------------
# policy construction


def _tiny_policy(seed=0):
    return polmod.make_policy(obs_mode=envmod.VECTOR, seed=seed,
                              enc_hidden=(16,), nn_hidden=(32,), latent_dim=8)


def test_make_policy_deterministic_and_latent_default():
    a = _tiny_policy(seed=4)
    b = _tiny_policy(seed=4)
    assert a.checksum() == b.checksum()
    assert a.latent_dim == 8
    default = polmod.make_policy(obs_mode=envmod.VECTOR, seed=0,
                                 enc_hidden=(8,), nn_hidden=(8,))
    assert default.latent_dim == 32
    assert a.chunk_dim == a.t_p * 2


def test_encode_single_tiles_the_frame():
    pol = _tiny_policy()
    frame = np.linspace(-1, 1, 7).astype(np.float32)
    z1 = polmod.encode_single(pol, frame)
    z2 = polmod.encode_stack(pol, np.tile(frame, pol.t_o)).data
    np.testing.assert_allclose(z1, z2, atol=1e-7)
    assert z1.shape == (pol.latent_dim,)


def test_clone_shares_nothing():
    pol = _tiny_policy()
    twin = pol.clone()
    twin.noise_net.weights[0].data[0, 0] += 1.0
    assert twin.checksum() != pol.checksum()


# ---------------------------------------------------------------------------
# training


def _two_step_dataset(n=6):
    rng = np.random.default_rng(0)
    trajs = []
    prov = []
    for i in range(n):
        L = 20
        obs = rng.normal(size=(L + 1, 7)).astype(np.float32)
        acts = np.clip(rng.normal(scale=0.4, size=(L, 2)), -1, 1).astype(np.float32)
        trajs.append(datamod.Trajectory(obs=obs, actions=acts, success=True,
                                        seed=i, init_mode="IN_DIST", obs_mode="VECTOR"))
        prov.append(datamod.Provenance(origin="demo", seed=i, success=True, demo_id=i))
    return datamod.CuratedDataset(source=datamod.EXPERT, trajectories=trajs, provenance=prov)


def test_bc_train_reduces_loss_and_is_deterministic():
    ds = _two_step_dataset()
    pol1 = _tiny_policy(seed=1)
    pol1, log1, _ = polmod.bc_train(pol1, ds, epochs=8, batch_size=32, seed=5)
    assert log1.losses[-1] < log1.losses[0]
    pol2 = _tiny_policy(seed=1)
    pol2, log2, _ = polmod.bc_train(pol2, ds, epochs=8, batch_size=32, seed=5)
    assert pol1.checksum() == pol2.checksum()
    assert log1.losses == log2.losses


def test_bc_train_lr_decay_changes_result():
    ds = _two_step_dataset()
    a, _, _ = polmod.bc_train(_tiny_policy(seed=1), ds, epochs=4, batch_size=32,
                              seed=5, lr=1e-3, lr_final=1e-4)
    b, _, _ = polmod.bc_train(_tiny_policy(seed=1), ds, epochs=4, batch_size=32,
                              seed=5, lr=1e-3, lr_final=None)
    assert a.checksum() != b.checksum()


# ---------------------------------------------------------------------------
# sampling


def test_ddpm_sample_shape_bounds_and_determinism():
    pol = _tiny_policy()
    stack = np.zeros(pol.t_o * 7, dtype=np.float32)
    a = polmod.ddpm_sample(pol, stack, np.random.default_rng(3))
    b = polmod.ddpm_sample(pol, stack, np.random.default_rng(3))
    c = polmod.ddpm_sample(pol, stack, np.random.default_rng(4))
    assert a.shape == (pol.t_p, 2)
    assert np.all(np.abs(a) <= 1.0)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_identity_hook_leaves_draws_untouched():
    # the random stream must not depend on whether a hook is installed
    pol = _tiny_policy()
    stack = np.zeros(pol.t_o * 7, dtype=np.float32)
    plain = polmod.ddpm_sample(pol, stack, np.random.default_rng(9))
    hooked = polmod.ddpm_sample(pol, stack, np.random.default_rng(9),
                                hook=lambda a, k, eps: eps)
    np.testing.assert_array_equal(plain, hooked)


def test_ddim_steps_descend_through_k():
    steps = polmod.ddim_steps(100, 16)
    assert len(steps) == 16
    assert steps[0] == 100
    assert steps == sorted(steps, reverse=True)
    assert all(1 <= k <= 100 for k in steps)
    with pytest.raises(ContractError):
        polmod.ddim_steps(100, 0)


def test_ddim_sample_bounds_and_batch_consistency():
    pol = _tiny_policy()
    stack = np.zeros(pol.t_o * 7, dtype=np.float32)
    single = polmod.ddim_sample(pol, stack, np.random.default_rng(2), n_steps=8)
    assert single.shape == (pol.t_p, 2)
    assert np.all(np.abs(single) <= 1.0)
    batch = polmod.ddim_sample_batch(pol, np.tile(stack, (3, 1)),
                                     np.random.default_rng(2), 8)
    assert batch.shape == (3, pol.t_p, 2)


def test_sample_chunk_rejects_unknown_sampler():
    pol = _tiny_policy()
    stack = np.zeros(pol.t_o * 7, dtype=np.float32)
    with pytest.raises(ContractError):
        polmod.sample_chunk(pol, stack, np.random.default_rng(0), sampler="euler")


def test_act_receding_horizon_executes_chunks():
    pol = _tiny_policy()
    result = polmod.act_receding_horizon(pol, seed=0, max_steps=20)
    traj = result.trajectory
    assert traj.length == 20 or traj.success
    # each replan executes at most t_a actions
    assert result.n_plans >= int(np.ceil(traj.length / pol.t_a))


# ---------------------------------------------------------------------------
# sampler correctness against an analytic two-mode target
#
# With the noise prediction replaced by the exact posterior noise for a
# two-point mixture, ancestral sampling must reproduce the mixture weights
# and the modes. This checks every non-learned piece of the sampler at once
# (schedule, update rule, hook plumbing, clipping).

MODE_A = np.array([0.5, -0.3]) / 3.0
MODE_B = np.array([-0.4, 0.6]) / 3.0
WEIGHT_A = 0.7


def _analytic_eps(pol):
    xa = np.tile(MODE_A, pol.t_p).astype(np.float64)
    xb = np.tile(MODE_B, pol.t_p).astype(np.float64)
    sched = pol.schedule

    def hook(a_flat, k, eps):
        abar = sched.abar(k)
        sq = np.sqrt(abar)
        var = 1.0 - abar
        a = a_flat.astype(np.float64)
        la = np.log(WEIGHT_A) - np.sum((a - sq * xa) ** 2) / (2 * var)
        lb = np.log(1 - WEIGHT_A) - np.sum((a - sq * xb) ** 2) / (2 * var)
        m = max(la, lb)
        ra = np.exp(la - m)
        rb = np.exp(lb - m)
        ra, rb = ra / (ra + rb), rb / (ra + rb)
        x_hat = ra * xa + rb * xb
        return ((a - sq * x_hat) / np.sqrt(var)).astype(np.float32)

    return hook


def test_ddpm_recovers_analytic_mixture():
    pol = _tiny_policy()
    stack = np.zeros(pol.t_o * 7, dtype=np.float32)
    stacks = np.tile(stack, (4000, 1))
    chunks = polmod.ddpm_sample_batch(pol, stacks, np.random.default_rng(11),
                                      hook=_analytic_eps(pol))
    flat = chunks.reshape(len(chunks), -1)
    xa = np.tile(MODE_A, pol.t_p)
    xb = np.tile(MODE_B, pol.t_p)
    da = np.sum((flat - xa) ** 2, axis=1)
    db = np.sum((flat - xb) ** 2, axis=1)
    near_a = da < db
    w_hat = float(np.mean(near_a))
    assert abs(w_hat - WEIGHT_A) < 0.03
    np.testing.assert_allclose(flat[near_a].mean(axis=0), xa, atol=0.02)
    np.testing.assert_allclose(flat[~near_a].mean(axis=0), xb, atol=0.02)
