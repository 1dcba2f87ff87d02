"""Command-line surface tying the pipeline together.

    gen-demos -> train-policy -> collect-rollouts -> curate ->
    train-dynamics -> calibrate-tau -> evaluate / sweep / trace

Every command is deterministic given the same config and seed, writes its
resolved config next to its outputs, and never mutates an input artifact.
Errors print one machine-parsable line to stderr: ``error: <Kind>: <detail>``.
Exit codes: 0 success, 1 missing/invalid artifact or bad precondition,
2 usage (unknown command or flag).
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import artifacts as art
from . import barrier as barmod
from . import config as cfgmod
from . import data as datamod
from . import dynamics as dynmod
from . import env as envmod
from . import harness as harmod
from . import policy as polmod
from . import rollout as rolmod
from .errors import ContractError, NumericError

COMMANDS = ("gen-demos", "train-policy", "collect-rollouts", "curate",
            "train-dynamics", "calibrate-tau", "evaluate", "sweep", "trace", "inspect")


def _path(cfg: cfgmod.RunConfig, stem: str) -> str:
    return os.path.join(cfg.out_dir, stem + ".lpbf")


def _load(cfg: cfgmod.RunConfig, stem: str, kind: str):
    path = _path(cfg, stem)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return art.load_artifact(path, expect_kind=kind)


def _provenance(cfg: cfgmod.RunConfig) -> dict:
    # out_dir is a placement detail, not an input: keeping it out of the
    # artifact makes reruns byte-identical regardless of where they land.
    resolved = cfg.resolved()
    resolved.pop("out_dir", None)
    return {"config": resolved, "seed": cfg.seed}


def _eval_ckpt_epochs(cfg: cfgmod.RunConfig) -> list[int]:
    """The final-k checkpoint epochs an evaluation averages over."""
    s = cfg.eval_ckpt_spacing
    epochs = [cfg.bc_epochs - i * s for i in range(cfg.eval_final_k)]
    return sorted(e for e in epochs if e >= 1)


def _schedule(cfg: cfgmod.RunConfig) -> rolmod.RolloutSchedule:
    return rolmod.RolloutSchedule(cfg.ckpt_t0, cfg.ckpt_dt, cfg.ckpt_t_final, cfg.n_per_ckpt)


def _checkpoint_epochs(cfg: cfgmod.RunConfig) -> list[int]:
    wanted = set(rolmod.schedule_epochs(_schedule(cfg))) | set(_eval_ckpt_epochs(cfg))
    return sorted(e for e in wanted if e <= cfg.bc_epochs)


def cmd_gen_demos(cfg: cfgmod.RunConfig) -> int:
    demos = datamod.gen_demos(cfg.n_demos, seed_base=cfg.seed, obs_mode=cfg.obs_mode)
    art.save_artifact(demos, art.DATASET, _path(cfg, "demos"), extra_meta=_provenance(cfg))
    n_ok = sum(t.success for t in demos.trajectories)
    print(f"demos: {len(demos)} trajectories, {n_ok} successful -> {_path(cfg, 'demos')}")
    return 0


def cmd_train_policy(cfg: cfgmod.RunConfig) -> int:
    dataset = _load(cfg, cfg.bc_dataset, art.DATASET)
    policy = polmod.make_policy(
        obs_mode=cfg.obs_mode, seed=cfg.seed, t_o=cfg.t_o, t_p=cfg.t_p, t_a=cfg.t_a,
        latent_dim=cfg.latent_dim, enc_hidden=tuple(cfg.enc_hidden),
        nn_hidden=tuple(cfg.nn_hidden), K=cfg.K, activation=cfg.activation)
    epochs_wanted = _checkpoint_epochs(cfg)
    policy, log, checkpoints = polmod.bc_train(
        policy, dataset, epochs=cfg.bc_epochs, seed=cfg.seed, batch_size=cfg.bc_batch,
        lr=cfg.bc_lr, lr_final=cfg.bc_lr_final, checkpoint_epochs=epochs_wanted)
    for epoch, snap in sorted(checkpoints.items()):
        art.save_artifact(snap, art.POLICY, _path(cfg, f"policy_ep{epoch}"),
                          extra_meta=_provenance(cfg))
    art.save_artifact(policy, art.POLICY, _path(cfg, "policy"), extra_meta=_provenance(cfg))
    print(f"policy: {cfg.bc_epochs} epochs, final loss {log.losses[-1]:.4f}, "
          f"{len(checkpoints)} checkpoints -> {_path(cfg, 'policy')}")
    return 0


def cmd_collect_rollouts(cfg: cfgmod.RunConfig) -> int:
    schedule = _schedule(cfg)
    checkpoints = {}
    for epoch in rolmod.schedule_epochs(schedule):
        checkpoints[epoch] = _load(cfg, f"policy_ep{epoch}", art.POLICY)
    rollouts = rolmod.collect(
        checkpoints, schedule, seed_base=cfg.seed, sampler=cfg.rollout_sampler,
        n_ddim=cfg.rollout_n_ddim, max_steps=cfg.max_steps)
    art.save_artifact(rollouts, art.DATASET, _path(cfg, "rollouts"), extra_meta=_provenance(cfg))
    n_ok = sum(t.success for t in rollouts.trajectories)
    print(f"rollouts: {len(rollouts)} trajectories ({n_ok} successful) "
          f"from {len(checkpoints)} checkpoints -> {_path(cfg, 'rollouts')}")
    return 0


def cmd_curate(cfg: cfgmod.RunConfig) -> int:
    demos = _load(cfg, "demos", art.DATASET)
    mode = cfg.curate_mode
    rollouts = None
    final_policy = None
    if mode in (datamod.MIXED, datamod.FILTERED):
        rollouts = _load(cfg, "rollouts", art.DATASET)
    if mode == datamod.EPS_GREEDY:
        final_policy = _load(cfg, "policy", art.POLICY)
    curated = rolmod.curate(
        demos, rollouts, mode, noise_p=cfg.perturb_p or 0.3, noise_sigma=cfg.perturb_sigma,
        seed=cfg.seed, final_policy=final_policy,
        sampler=cfg.rollout_sampler, n_ddim=cfg.rollout_n_ddim)
    art.save_artifact(curated, art.DATASET, _path(cfg, "curated"), extra_meta=_provenance(cfg))
    print(f"curated: {len(curated)} trajectories, mode {mode} -> {_path(cfg, 'curated')}")
    return 0


def cmd_train_dynamics(cfg: cfgmod.RunConfig) -> int:
    policy = _load(cfg, "policy", art.POLICY)
    curated = _load(cfg, "curated", art.DATASET)
    model = dynmod.make_dynamics(policy, seed=cfg.seed, hidden=tuple(cfg.dyn_hidden))
    model, log = dynmod.dyn_train(model, [curated], dynmod.DynTrainConfig(
        batch_size=cfg.dyn_batch, lr=cfg.dyn_lr, epochs=cfg.dyn_epochs,
        holdout_frac=cfg.dyn_holdout_frac, seed=cfg.seed))
    art.save_artifact(model, art.DYNAMICS, _path(cfg, "dynamics"), extra_meta=_provenance(cfg))
    print(f"dynamics: {cfg.dyn_epochs} epochs, holdout mse {log.holdout_mse:.6f} "
          f"({log.n_holdout} windows) -> {_path(cfg, 'dynamics')}")
    return 0


def cmd_calibrate_tau(cfg: cfgmod.RunConfig) -> int:
    policy = _load(cfg, "policy", art.POLICY)
    demos = _load(cfg, "demos", art.DATASET)
    model = _load(cfg, "dynamics", art.DYNAMICS)
    index = barmod.build_expert_index(policy, demos, backend=cfg.index_backend)
    frames = []
    for i in range(cfg.tau_rollouts):
        result = polmod.act_receding_horizon(
            policy, seed=cfg.seed + i, init_mode=envmod.IN_DIST, max_steps=cfg.max_steps,
            sampler=cfg.sampler, n_ddim=cfg.n_ddim)
        frames.append(result.trajectory.obs)
    latents = dynmod.encode_frames(model, np.concatenate(frames))
    tau = barmod.calibrate_tau(index, latents, cfg.tau_quantile)
    meta = _provenance(cfg)
    meta["tau"] = tau
    meta["tau_quantile"] = cfg.tau_quantile
    art.save_artifact(index, art.INDEX, _path(cfg, "index"), extra_meta=meta)
    print(f"tau: {tau:.6f} (quantile {cfg.tau_quantile} over {cfg.tau_rollouts} rollouts, "
          f"{index.size} expert latents) -> {_path(cfg, 'index')}")
    return 0


def _resolve_tau(cfg: cfgmod.RunConfig) -> float:
    if cfg.tau is not None:
        return float(cfg.tau)
    path = _path(cfg, "index")
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    _, meta = art.peek(path)
    stored = meta.get("provenance_info", {}).get("tau")
    if stored is None:
        raise ContractError(f"index artifact {path} carries no calibrated tau; set the tau config key")
    return float(stored)


def _eval_artifacts(cfg: cfgmod.RunConfig, method: str) -> harmod.EvalArtifacts:
    checkpoints = {}
    for epoch in _eval_ckpt_epochs(cfg):
        checkpoints[epoch] = _load(cfg, f"policy_ep{epoch}", art.POLICY)
    dynamics = index = guidance = None
    if method in (harmod.LPB, harmod.LPB_MPC, harmod.LPB_GD):
        dynamics = _load(cfg, "dynamics", art.DYNAMICS)
        index = _load(cfg, "index", art.INDEX)
        guidance = barmod.GuidanceConfig(
            eta=cfg.eta, tau=_resolve_tau(cfg), k_guide=cfg.k_guide,
            sampler=cfg.sampler, n_ddim=cfg.n_ddim)
    return harmod.EvalArtifacts(checkpoints=checkpoints, dynamics=dynamics,
                                index=index, guidance=guidance)


def _eval_spec(cfg: cfgmod.RunConfig, method: str) -> harmod.EvalSpec:
    perturbation = None
    if cfg.perturb_p > 0:
        perturbation = envmod.PerturbSpec(
            probability=cfg.perturb_p, sigma=cfg.perturb_sigma, seed=cfg.seed)
    return harmod.EvalSpec(
        method=method, episodes=cfg.eval_episodes, init_mode=cfg.eval_init_mode,
        perturbation=perturbation, seed_base=cfg.eval_seed_base,
        final_k=cfg.eval_final_k, max_steps=cfg.max_steps)


def cmd_evaluate(cfg: cfgmod.RunConfig, method: str | None = None) -> int:
    method = (method or cfg.eval_method).upper()
    spec = _eval_spec(cfg, method)
    artifacts = _eval_artifacts(cfg, method)
    report = harmod.run_eval(spec, artifacts, mpc_candidates=cfg.mpc_candidates,
                             gd_steps=cfg.gd_steps, gd_step_size=cfg.gd_step_size)
    stem = f"report_{method.lower()}"
    art.save_artifact(report, art.REPORT, _path(cfg, stem), extra_meta=_provenance(cfg))
    print(f"evaluate: method={method} mean={report.mean:.4f} std={report.std:.4f} "
          f"episodes={report.episodes} checkpoints={report.checkpoint_epochs} "
          f"-> {_path(cfg, stem)}")
    return 0


def _fraction_builder(cfg: cfgmod.RunConfig, demos: datamod.CuratedDataset):
    """DEMO_FRACTION cells retrain the whole stack on a demo prefix."""

    def build(value: float) -> harmod.EvalArtifacts:
        n = max(1, int(round(len(demos) * float(value))))
        subset = datamod.CuratedDataset(
            source=demos.source, trajectories=demos.trajectories[:n],
            provenance=demos.provenance[:n])
        policy = polmod.make_policy(
            obs_mode=cfg.obs_mode, seed=cfg.seed, t_o=cfg.t_o, t_p=cfg.t_p, t_a=cfg.t_a,
            latent_dim=cfg.latent_dim, enc_hidden=tuple(cfg.enc_hidden),
            nn_hidden=tuple(cfg.nn_hidden), K=cfg.K, activation=cfg.activation)
        policy, _, checkpoints = polmod.bc_train(
            policy, subset, epochs=cfg.bc_epochs, seed=cfg.seed, batch_size=cfg.bc_batch,
            lr=cfg.bc_lr, lr_final=cfg.bc_lr_final, checkpoint_epochs=_eval_ckpt_epochs(cfg))
        index = barmod.build_expert_index(policy, subset, backend=cfg.index_backend)
        model = dynmod.make_dynamics(policy, seed=cfg.seed, hidden=tuple(cfg.dyn_hidden))
        model, _ = dynmod.dyn_train(model, [subset], dynmod.DynTrainConfig(
            batch_size=cfg.dyn_batch, lr=cfg.dyn_lr, epochs=cfg.dyn_epochs,
            holdout_frac=cfg.dyn_holdout_frac, seed=cfg.seed))
        guidance = barmod.GuidanceConfig(eta=cfg.eta, tau=_resolve_tau(cfg),
                                         k_guide=cfg.k_guide, sampler=cfg.sampler,
                                         n_ddim=cfg.n_ddim)
        return harmod.EvalArtifacts(checkpoints=checkpoints, dynamics=model,
                                    index=index, guidance=guidance)

    return build


def _rollout_count_builder(cfg: cfgmod.RunConfig, base: harmod.EvalArtifacts,
                           demos: datamod.CuratedDataset,
                           rollouts: datamod.CuratedDataset):
    """ROLLOUT_COUNT cells retrain only the dynamics model on demos plus a
    rollout prefix of the requested size; policy, index, and tau stay fixed."""
    epoch = sorted(base.checkpoints)[-1]
    policy = base.checkpoints[epoch]

    def build(value: float) -> harmod.EvalArtifacts:
        n = int(value)
        if n > len(rollouts):
            raise ContractError(f"rollout count {n} exceeds collected {len(rollouts)}")
        subset = datamod.CuratedDataset(
            source=rollouts.source, trajectories=rollouts.trajectories[:n],
            provenance=rollouts.provenance[:n])
        datasets = [demos] if n == 0 else [demos, subset]
        model = dynmod.make_dynamics(policy, seed=cfg.seed, hidden=tuple(cfg.dyn_hidden))
        model, _ = dynmod.dyn_train(model, datasets, dynmod.DynTrainConfig(
            batch_size=cfg.dyn_batch, lr=cfg.dyn_lr, epochs=cfg.dyn_epochs,
            holdout_frac=cfg.dyn_holdout_frac, seed=cfg.seed))
        return dataclasses.replace(base, dynamics=model)

    return build


def cmd_sweep(cfg: cfgmod.RunConfig, axis: str | None = None) -> int:
    axis = (axis or cfg.sweep_axis).upper()
    method = cfg.eval_method.upper()
    spec = _eval_spec(cfg, method)
    artifacts = _eval_artifacts(cfg, method)
    builder = None
    if axis == harmod.DEMO_FRACTION:
        builder = _fraction_builder(cfg, _load(cfg, "demos", art.DATASET))
    elif axis == harmod.ROLLOUT_COUNT:
        builder = _rollout_count_builder(cfg, artifacts, _load(cfg, "demos", art.DATASET),
                                         _load(cfg, "rollouts", art.DATASET))
    cells = harmod.sweep(axis, cfg.sweep_values, spec, artifacts,
                         builder=builder, out_dir=cfg.out_dir)
    for c in cells:
        if c.report is None:
            print(f"sweep {axis}={c.value:g}: error: {c.error}")
        else:
            print(f"sweep {axis}={c.value:g}: mean={c.report.mean:.4f} std={c.report.std:.4f}")
    return 0


def cmd_trace(cfg: cfgmod.RunConfig) -> int:
    artifacts = _eval_artifacts(cfg, harmod.LPB)
    trace, frames = harmod.trace_episode(
        artifacts, seed=cfg.seed, init_mode=cfg.trace_init_mode, out_dir=cfg.out_dir)
    n_active = sum(f["active"] for f in frames)
    print(f"trace: {len(frames)} replans, {n_active} guidance-active, "
          f"recovered={trace.recovered()} success={bool(frames[-1]['success'])} "
          f"-> {os.path.join(cfg.out_dir, f'trace_seed{cfg.seed}.csv')}")
    return 0


def cmd_inspect(paths: list[str]) -> int:
    for path in paths:
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        kind, meta = art.peek(path)
        if kind == art.DATASET:
            origins: dict[str, int] = {}
            for p in meta["provenance"]:
                origins[p["origin"]] = origins.get(p["origin"], 0) + 1
            n_ok = sum(1 for t in meta["trajectories"] if t["success"])
            hist = " ".join(f"{k}={v}" for k, v in sorted(origins.items()))
            print(f"{path}: DATASET source={meta['source']} trajectories={len(meta['trajectories'])} "
                  f"successes={n_ok} origins: {hist or 'none'}")
        elif kind == art.POLICY:
            print(f"{path}: POLICY obs_mode={meta['obs_mode']} T_o={meta['t_o']} T_p={meta['t_p']} "
                  f"T_a={meta['t_a']} D={meta['latent_dim']} K={meta['K']} "
                  f"noise_net={meta['noise_net']['widths']}")
        elif kind == art.DYNAMICS:
            print(f"{path}: DYNAMICS D={meta['latent_dim']} T_p={meta['t_p']} "
                  f"predictor={meta['predictor']['widths']} encoder_checksum={meta['encoder_checksum']}")
        elif kind == art.INDEX:
            tau = meta.get("provenance_info", {}).get("tau")
            tau_s = f" tau={tau:.6f}" if isinstance(tau, float) else ""
            print(f"{path}: INDEX backend={meta['backend']} points={meta['count']} dim={meta['dim']}{tau_s}")
        else:
            print(f"{path}: REPORT method={meta['method']} init={meta['init_mode']} "
                  f"episodes={meta['episodes']} mean={meta['mean']:.4f} std={meta['std']:.4f}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="JSON config file")
    shared.add_argument("--preset", help="named preset", choices=sorted(cfgmod.PRESETS))
    shared.add_argument("--seed", type=int, help="global seed override")
    shared.add_argument("--out", help="output directory override")
    shared.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config key")
    parser = argparse.ArgumentParser(prog="lpb", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        if name == "inspect":
            p = sub.add_parser(name, parents=[shared], help="print artifact summaries")
            p.add_argument("paths", nargs="+", help="artifact files")
            continue
        p = sub.add_parser(name, parents=[shared], help=f"run {name}")
        if name == "evaluate":
            p.add_argument("--method", help="evaluation method",
                           choices=[m.lower() for m in harmod.METHODS])
        if name == "sweep":
            p.add_argument("--axis", help="sweep axis",
                           choices=[a.lower() for a in harmod.SWEEP_AXES])
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "inspect":
            return cmd_inspect(args.paths)
        overrides: dict = {}
        for item in args.overrides:
            key, value = cfgmod.parse_override(item)
            overrides[key] = value
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out_dir"] = args.out
        cfg = cfgmod.build_config(preset=args.preset, config_path=args.config,
                                  overrides=overrides)
        os.makedirs(cfg.out_dir, exist_ok=True)
        cfgmod.write_resolved(cfg)
        if args.command == "gen-demos":
            return cmd_gen_demos(cfg)
        if args.command == "train-policy":
            return cmd_train_policy(cfg)
        if args.command == "collect-rollouts":
            return cmd_collect_rollouts(cfg)
        if args.command == "curate":
            return cmd_curate(cfg)
        if args.command == "train-dynamics":
            return cmd_train_dynamics(cfg)
        if args.command == "calibrate-tau":
            return cmd_calibrate_tau(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, method=args.method)
        if args.command == "sweep":
            return cmd_sweep(cfg, axis=args.axis)
        if args.command == "trace":
            return cmd_trace(cfg)
        raise ContractError(f"unhandled command {args.command!r}")
    except FileNotFoundError as exc:
        print(f"error: MissingArtifact: {exc}", file=sys.stderr)
        return 1
    except (art.ArtifactError, ContractError, NumericError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
