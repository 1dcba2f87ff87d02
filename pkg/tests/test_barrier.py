"""Expert-latent index, threshold calibration, and guided sampling."""
from __future__ import annotations

import math

import numpy as np
import pytest

from lpb import barrier as barmod
from lpb import dynamics as dynmod
from lpb import env as envmod
from lpb import nn
from lpb import policy as polmod
from lpb.autodiff import Tensor
from lpb.errors import ContractError

# ---------------------------------------------------------------------------
# nearest-neighbor index


def test_build_index_validates_inputs():
    with pytest.raises(ContractError):
        barmod.build_index(np.zeros((0, 3)))
    with pytest.raises(ContractError):
        barmod.build_index(np.zeros(5))
    with pytest.raises(ContractError):
        barmod.build_index(np.zeros((4, 3)), backend="BALLTREE")


def test_backends_agree_on_random_clouds(rng):
    pts = rng.normal(size=(500, 6))
    brute = barmod.build_index(pts, barmod.BRUTE)
    tree = barmod.build_index(pts, barmod.KDTREE)
    for q in rng.normal(size=(200, 6)) * 2:
        ib, db = barmod.nearest(brute, q)
        it, dt = barmod.nearest(tree, q)
        assert ib == it
        assert db == dt


def test_backends_agree_under_exact_ties():
    # duplicated points force distance ties; both backends must return the
    # lowest point index
    base = np.array([[0.0, 0.0], [1.0, 1.0], [1.0, 1.0], [0.0, 0.0], [2.0, 0.0]])
    brute = barmod.build_index(base, barmod.BRUTE)
    tree = barmod.build_index(base, barmod.KDTREE)
    for q in [np.array([0.1, 0.0]), np.array([1.0, 1.0]), np.array([1.5, 0.5])]:
        ib, db = barmod.nearest(brute, q)
        it, dt = barmod.nearest(tree, q)
        assert (ib, db) == (it, dt)
    assert barmod.nearest(brute, np.array([0.0, 0.0]))[0] == 0
    assert barmod.nearest(tree, np.array([1.0, 1.0]))[0] == 1


def test_nearest_rejects_dimension_mismatch():
    ix = barmod.build_index(np.zeros((3, 4)))
    with pytest.raises(ContractError):
        barmod.nearest(ix, np.zeros(5))


def test_ood_scores_match_scalar_path(rng):
    pts = rng.normal(size=(64, 5))
    qs = rng.normal(size=(20, 5))
    for backend in (barmod.BRUTE, barmod.KDTREE):
        ix = barmod.build_index(pts, backend)
        batch = barmod.ood_scores(ix, qs)
        singles = np.array([barmod.ood_score(ix, q) for q in qs])
        np.testing.assert_allclose(batch, singles, rtol=1e-9, atol=1e-12)


def test_ood_score_is_squared_distance():
    ix = barmod.build_index(np.array([[1.0, 0.0], [0.0, 2.0]]))
    assert barmod.ood_score(ix, np.array([0.0, 0.0])) == pytest.approx(1.0)
    assert barmod.ood_score(ix, np.array([0.0, 4.0])) == pytest.approx(4.0)


# ---------------------------------------------------------------------------
# threshold calibration


def test_calibrate_tau_is_percentile_of_nonzero_scores(rng):
    pts = rng.normal(size=(30, 3))
    ix = barmod.build_index(pts)
    # calibration set includes exact index members whose score is zero
    latents = np.concatenate([pts[:10], rng.normal(size=(40, 3)) * 2])
    scores = barmod.ood_scores(ix, latents)
    nonzero = scores[scores > 0]
    want = float(np.percentile(nonzero, 90.0))
    assert barmod.calibrate_tau(ix, latents, q=90.0) == pytest.approx(want, rel=1e-12)


def test_calibrate_tau_validation(rng):
    ix = barmod.build_index(rng.normal(size=(5, 2)))
    with pytest.raises(ContractError):
        barmod.calibrate_tau(ix, np.zeros((0, 2)))
    with pytest.raises(ContractError):
        barmod.calibrate_tau(ix, rng.normal(size=(4, 2)), q=0.0)
    with pytest.raises(ContractError):
        barmod.calibrate_tau(ix, ix.points.copy())  # all scores exactly zero


def test_guidance_config_validation():
    with pytest.raises(ContractError):
        barmod.GuidanceConfig(eta=-0.1)
    with pytest.raises(ContractError):
        barmod.GuidanceConfig(tau=-1.0)
    with pytest.raises(ContractError):
        barmod.GuidanceConfig(k_guide=-1)
    with pytest.raises(ContractError):
        barmod.GuidanceConfig(sampler="euler")
    assert math.isinf(barmod.GuidanceConfig().tau)


# ---------------------------------------------------------------------------
# guided noise on a hand-built linear dynamics model
#
# Predictor: z' = P a with P selecting the first D action coordinates, so the
# index {0} gives score(a) = sum of those coordinates squared and an exact
# analytic gradient 2a. This pins the correction's sign and scale: the noise
# moves by +eta * sqrt(1 - abar_k) * grad, which the reverse update then
# subtracts, descending the score.

D = 4
T_P = 16


def _linear_model() -> dynmod.DynamicsModel:
    in_dim = D + T_P * 2
    w = np.zeros((in_dim, D), dtype=np.float32)
    for j in range(D):
        w[D + j, j] = 1.0
    predictor = nn.Mlp(widths=[in_dim, D], weights=[Tensor(w)],
                       biases=[Tensor(np.zeros(D))], activation="softplus")
    enc = nn.mlp_init((2 * 7, D), rng=np.random.default_rng(0))
    return dynmod.DynamicsModel(encoder=enc, predictor=predictor,
                                t_o=2, t_p=T_P, obs_dim=7, latent_dim=D)


def test_guided_noise_analytic_value(rng):
    model = _linear_model()
    index = barmod.build_index(np.zeros((1, D)))
    sched = polmod.cosine_schedule(100)
    a = rng.normal(size=T_P * 2).astype(np.float32)
    eps = rng.normal(size=T_P * 2).astype(np.float32)
    k = 5
    out = barmod.guided_noise(a, k, np.zeros(D), eps, model, index, eta=0.25,
                              schedule=sched)
    grad = np.zeros(T_P * 2, dtype=np.float64)
    grad[:D] = 2.0 * a[:D]
    want = eps + 0.25 * math.sqrt(1.0 - sched.abar(k)) * grad
    np.testing.assert_allclose(out, want, rtol=1e-4, atol=1e-6)


def test_guided_noise_eta_zero_is_identity(rng):
    model = _linear_model()
    index = barmod.build_index(np.zeros((1, D)))
    sched = polmod.cosine_schedule(100)
    a = rng.normal(size=T_P * 2).astype(np.float32)
    eps = rng.normal(size=T_P * 2).astype(np.float32)
    out = barmod.guided_noise(a, 10, np.zeros(D), eps, model, index, eta=0.0,
                              schedule=sched)
    np.testing.assert_allclose(out, eps, atol=1e-7)


def test_guided_chain_descends_score_vs_paired_twin():
    # drive the chain with the exact point-mass noise so unguided samples
    # land at x_star, then stack the correction on top: with identical random
    # draws the guided endpoint must score strictly lower, every seed
    model = _linear_model()
    index = barmod.build_index(np.zeros((1, D)))
    pol = polmod.make_policy(obs_mode=envmod.VECTOR, seed=0, enc_hidden=(16,),
                             nn_hidden=(32,), latent_dim=D)
    sched = pol.schedule
    x_star = np.tile([0.4, -0.2], T_P).astype(np.float64)
    z_t = np.zeros(D)

    def base(a, k, eps):
        abar = sched.abar(k)
        return ((a.astype(np.float64) - math.sqrt(abar) * x_star)
                / math.sqrt(1.0 - abar)).astype(np.float32)

    def guided(a, k, eps):
        eps2 = base(a, k, eps)
        if k <= 20:
            eps2 = barmod.guided_noise(a, k, z_t, eps2, model, index, 2.0, sched)
        return eps2

    stack = np.tile(np.linspace(-0.5, 0.5, 7).astype(np.float32), pol.t_o)
    for seed in range(5):
        plain = polmod.ddpm_sample(pol, stack, np.random.default_rng(seed),
                                   hook=base).reshape(-1)
        steered = polmod.ddpm_sample(pol, stack, np.random.default_rng(seed),
                                     hook=guided).reshape(-1)
        d_plain = float(np.sum(plain[:D] ** 2))
        d_steered = float(np.sum(steered[:D] ** 2))
        assert d_plain > 0.1  # the unguided endpoint sits near x_star
        assert d_steered < d_plain
        # untouched coordinates follow the same draws on both chains
        np.testing.assert_allclose(steered[D:], plain[D:], atol=1e-5)


# ---------------------------------------------------------------------------
# steering decisions


def _toy_setup():
    pol = polmod.make_policy(obs_mode=envmod.VECTOR, seed=0, enc_hidden=(16,),
                             nn_hidden=(32,), latent_dim=D)
    model = _linear_model()
    index = barmod.build_index(np.zeros((1, D)))
    obs = np.linspace(-0.5, 0.5, 7).astype(np.float32)
    stack = np.tile(obs, pol.t_o)
    return pol, model, index, stack, obs


def test_lpb_act_inactive_below_tau_matches_plain_sampler():
    pol, model, index, stack, obs = _toy_setup()
    cfg = barmod.GuidanceConfig(eta=0.5, tau=math.inf, k_guide=10)
    chunk, rec = barmod.lpb_act(pol, model, index, cfg, stack, obs,
                                np.random.default_rng(5))
    plain = polmod.sample_chunk(pol, stack, np.random.default_rng(5))
    np.testing.assert_array_equal(chunk, plain)
    assert not rec.active
    assert rec.delta_pre == rec.delta_post


def test_lpb_act_eta_zero_equals_unguided_twin():
    pol, model, index, stack, obs = _toy_setup()
    cfg = barmod.GuidanceConfig(eta=0.0, tau=0.0, k_guide=10)
    chunk, rec = barmod.lpb_act(pol, model, index, cfg, stack, obs,
                                np.random.default_rng(5))
    plain = polmod.sample_chunk(pol, stack, np.random.default_rng(5))
    np.testing.assert_allclose(chunk, plain, atol=1e-7)
    assert rec.active
    assert rec.delta_pre == pytest.approx(rec.delta_post, rel=1e-6)


def test_lpb_act_rejects_latent_dim_mismatch():
    pol, model, index, stack, obs = _toy_setup()
    bad_index = barmod.build_index(np.zeros((1, D + 1)))
    cfg = barmod.GuidanceConfig()
    with pytest.raises(ContractError):
        barmod.lpb_act(pol, model, bad_index, cfg, stack, obs,
                       np.random.default_rng(0))


def test_lpb_rollout_matches_bc_when_guidance_disabled():
    pol, model, index, _, _ = _toy_setup()
    cfg = barmod.GuidanceConfig(eta=0.5, tau=math.inf, k_guide=10)
    result, trace = barmod.lpb_rollout(pol, model, index, cfg, seed=3,
                                       max_steps=24)
    bare = polmod.act_receding_horizon(pol, seed=3, max_steps=24)
    np.testing.assert_array_equal(result.trajectory.actions,
                                  bare.trajectory.actions)
    np.testing.assert_array_equal(result.trajectory.obs, bare.trajectory.obs)
    assert not trace.any_active()
    assert len(trace.records) == result.n_plans


def test_steering_trace_recovered_semantics():
    trace = barmod.SteeringTrace(tau=1.0)
    rec = lambda d: barmod.StepRecord(delta=d, active=d > 1.0, delta_pre=0,
                                      delta_post=0, nearest_idx=0,
                                      actions=np.empty((0, 2)))
    trace.records = [rec(0.5), rec(0.7)]
    assert not trace.recovered()
    trace.records = [rec(2.0), rec(1.5)]
    assert not trace.recovered()
    trace.records = [rec(2.0), rec(0.9)]
    assert trace.recovered()
    trace.records = [rec(0.5), rec(3.0), rec(0.2)]
    assert trace.recovered()


# ---------------------------------------------------------------------------
# ablation actors


def test_mpc_act_returns_the_lowest_scoring_candidate():
    pol, model, index, stack, obs = _toy_setup()
    picked = barmod.mpc_act(pol, model, index, 8, stack, obs,
                            np.random.default_rng(7))
    # mirror the candidate draw exactly and score by hand
    chunks = polmod.ddpm_sample_batch(pol, np.tile(stack, (8, 1)),
                                      np.random.default_rng(7))
    z_t = dynmod.encode_frame(model, obs)
    scores = []
    for c in chunks:
        z_hat = dynmod.predict(model, z_t, c).data
        scores.append(barmod.ood_score(index, z_hat))
    np.testing.assert_array_equal(picked, chunks[int(np.argmin(scores))])
    with pytest.raises(ContractError):
        barmod.mpc_act(pol, model, index, 0, stack, obs, np.random.default_rng(0))


def test_gd_act_never_scores_worse_than_its_start():
    pol, model, index, stack, obs = _toy_setup()
    start = barmod.gd_act(pol, model, index, 0, 0.1, stack, obs,
                          np.random.default_rng(4))
    refined = barmod.gd_act(pol, model, index, 12, 0.1, stack, obs,
                            np.random.default_rng(4))
    z_t = dynmod.encode_frame(model, obs)
    s0 = barmod.ood_score(index, dynmod.predict(model, z_t, start).data)
    s1 = barmod.ood_score(index, dynmod.predict(model, z_t, refined).data)
    assert s1 <= s0 + 1e-9
    assert np.all(np.abs(refined) <= 1.0)
    with pytest.raises(ContractError):
        barmod.gd_act(pol, model, index, -1, 0.1, stack, obs,
                      np.random.default_rng(0))
