"""Command-line entry points for the full experiment pipeline.

Subcommands: generate-data, train, sample, evaluate, mcmc, benchmark, paths.
Each run reads a flat key=value config file (optionally a previous run's
manifest), applies --set overrides, executes, and writes a manifest with the
resolved config, master seed, and content hashes of every input file, which
is sufficient to reproduce the run bit for bit (rerun with
``--config <manifest.json>``).

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .cfm import SamplerConfig, TrainConfig, path_straightness, sample_posterior, train
from .config import (ConfigError, RunConfig, config_reference, load_config_file,
                     parse_value, resolve, serializable)
from .data import DataGenConfig, generate_dataset, load_dataset, save_dataset
from .mcmc import ChainConfig, run_chain
from .metrics import (benchmark_timing, evaluate_sweep, generation_error,
                      relative_error_de, write_chain_csv, write_sweep_csv)
from .net import NetConfig, VelocityNet
from .tasks import get_task

SUBCOMMANDS = ("generate-data", "train", "sample", "evaluate", "mcmc", "benchmark", "paths")


class UsageError(Exception):
    pass


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _build_config(args) -> RunConfig:
    explicit = {}
    if args.config:
        explicit.update(load_config_file(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got '{item}'")
        key, _, raw = item.partition("=")
        explicit[key.strip()] = parse_value(key.strip(), raw.strip())
    if args.seed is not None:
        explicit["seed"] = args.seed
    return resolve(explicit)


def _task_from(cfg: RunConfig):
    kwargs = {}
    if cfg["data.sigma"] is not None:
        kwargs["sigma_rel" if cfg.task_name == "darcy" else "sigma"] = cfg["data.sigma"]
    if cfg.task_name == "seir":
        kwargs["shifted_ramp"] = cfg["seir.shifted_ramp"]
    return get_task(cfg.task_name, **kwargs)


def _net_config(cfg: RunConfig, task) -> NetConfig:
    return NetConfig(
        n_emb=cfg["net.n_emb"], n_head=cfg["net.n_head"], n_layer=cfg["net.n_layer"],
        dim_m=task.dim_m, obs_token_dim=task.obs_token_dim,
        design_token_dim=task.design_token_dim, rope_base=cfg["net.rope_base"],
        arch=cfg["net.arch"], mlp_hidden=cfg["net.mlp_hidden"],
        mlp_n_obs=cfg["net.mlp_n_obs"])


def _sampler_config(cfg: RunConfig) -> SamplerConfig:
    return SamplerConfig(steps=cfg["sampler.steps"], method=cfg["sampler.method"],
                         ensemble=cfg["sampler.ensemble"], seed=cfg["seed"])


def _require(cfg, key, what):
    v = cfg[key]
    if v is None:
        raise UsageError(f"{what} requires '{key}' (see --set {key}=...)")
    return v


def _load_net(cfg: RunConfig):
    path = _require(cfg, "paths.checkpoint", "this subcommand")
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ck = load_checkpoint(path)
    if ck.task_name != cfg.task_name:
        raise UsageError(f"checkpoint is for task '{ck.task_name}', config says '{cfg.task_name}'")
    task = _task_from(cfg)
    return VelocityNet(task, ck.net_config, ck.params), path


def _draw_instance(cfg: RunConfig, task):
    n_obs = cfg["instance.n_obs"]
    rng = np.random.default_rng(
        np.random.SeedSequence((cfg["seed"], 0x696e7374, cfg["instance.seed"])))
    m = task.sample_params(rng, 1)[0]
    e = task.sample_design(rng, n_obs)
    clean, scale = task.simulate_batch(m[None, :], e[None, :], n_obs)
    d = clean[0] + rng.standard_normal(clean.shape[1]) * scale[0]
    return m, e, d


def _write_manifest(cfg: RunConfig, subcommand, inputs, outputs, out_dir, extra=None):
    manifest = {
        "tool": f"flowinverse {__version__}",
        "subcommand": subcommand,
        "seed": cfg["seed"],
        "config": serializable(cfg.values),
        "input_hashes": {p: _sha256(p) for p in inputs if p and os.path.exists(p)},
        "outputs": outputs,
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, f"manifest_{subcommand.replace('-', '_')}.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return path


# ---------------------------------------------------------------------------
# subcommand bodies
# ---------------------------------------------------------------------------

def _cmd_generate_data(cfg: RunConfig, out_dir):
    path = cfg["paths.dataset"] or os.path.join(out_dir, f"{cfg.task_name}.cfmd")
    gen = DataGenConfig(task=cfg.task_name, tuples_per_n_obs=cfg["data.tuples_per_n_obs"],
                        n_obs_set=cfg["data.n_obs"], seed=cfg["seed"],
                        sigma=cfg["data.sigma"])
    if cfg.task_name == "seir":
        gen.task_kwargs["shifted_ramp"] = cfg["seir.shifted_ramp"]
    shards = generate_dataset(gen)
    save_dataset(shards, cfg.task_name, path)
    print(f"wrote {sum(len(s) for s in shards)} tuples in {len(shards)} shards to {path}")
    return [], [path]


def _cmd_train(cfg: RunConfig, out_dir):
    data_path = _require(cfg, "paths.dataset", "train")
    task = _task_from(cfg)
    _, shards = load_dataset(data_path, task=task)
    net_cfg = _net_config(cfg, task)
    net = VelocityNet(task, net_cfg, seed=cfg["net.init_seed"])
    ckpt_path = cfg["paths.checkpoint"] or os.path.join(out_dir, f"{cfg.task_name}.cfmt")
    tc = TrainConfig(lr=cfg["train.lr"], epochs=cfg["train.epochs"],
                     batch_size=cfg["train.batch_size"],
                     accum_window=cfg["train.accum_window"], seed=cfg["seed"],
                     checkpoint_every=cfg["train.checkpoint_every"])

    def save_at(step, epoch, trained):
        save_checkpoint(ckpt_path + f".step{step}", cfg.task_name, net_cfg,
                        trained.params, step=step,
                        rng_state={"seed": cfg["seed"], "epoch": epoch})

    t0 = time.time()
    net, history = train(net, shards, tc,
                         checkpoint_fn=save_at if tc.checkpoint_every else None)
    dur = time.time() - t0
    save_checkpoint(ckpt_path, cfg.task_name, net_cfg, net.params, step=len(history),
                    rng_state={"seed": cfg["seed"], "epoch": tc.epochs})
    loss_path = os.path.join(out_dir, "loss_history.csv")
    with open(loss_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        for i, v in enumerate(history):
            w.writerow([i, repr(v)])
    print(f"trained {net.n_params} parameters, {len(history)} steps in {dur:.1f}s; "
          f"final loss {history[-1]:.6g}; wrote {ckpt_path}")
    return [data_path], [ckpt_path, loss_path]


def _cmd_sample(cfg: RunConfig, out_dir):
    net, ckpt_path = _load_net(cfg)
    task = net.task
    m_true, e, d = _draw_instance(cfg, task)
    ens = sample_posterior(net, d, e, _sampler_config(cfg))
    out = os.path.join(out_dir, "ensemble.csv")
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"m{i}" for i in range(task.dim_m)])
        for row in ens.samples:
            w.writerow([repr(v) for v in row])
    inst = os.path.join(out_dir, "instance.json")
    with open(inst, "w") as f:
        json.dump({"m_true": m_true.tolist(), "e": e.tolist(), "d": d.tolist()},
                  f, indent=2)
    err = relative_error_de(m_true, ens, task, e)
    print(f"posterior mean {np.round(ens.mean, 4).tolist()}; "
          f"solution relative error {100 * err:.2f}%")
    return [ckpt_path], [out, inst]


def _cmd_evaluate(cfg: RunConfig, out_dir):
    net, ckpt_path = _load_net(cfg)
    task = net.task
    reports = evaluate_sweep(net, task, cfg["eval.n_obs_list"], cfg["eval.trials"],
                             _sampler_config(cfg), seed=cfg["seed"])
    out = os.path.join(out_dir, f"sweep_{cfg.task_name}.csv")
    write_sweep_csv(reports, out)
    outputs = [out]
    for r in reports:
        print(f"N={r.n_obs}: {100 * r.mean_error:.2f}% +/- {100 * r.std_error:.2f}% "
              f"({r.trials} trials)")
    if cfg.task_name == "nonlinear":
        pooled, per_case = generation_error(net, task, cfg["eval.n_inferences"],
                                            ensemble=cfg["sampler.ensemble"],
                                            steps=cfg["sampler.steps"], seed=cfg["seed"])
        gen_path = os.path.join(out_dir, "generation_error.json")
        with open(gen_path, "w") as f:
            json.dump({"pooled": pooled,
                       "median_per_case": float(np.median(per_case)),
                       "n_inferences": cfg["eval.n_inferences"]}, f, indent=2)
        outputs.append(gen_path)
        print(f"reconstruction error (pooled over {cfg['eval.n_inferences']} "
              f"inferences): {pooled:.4g}")
    return [ckpt_path], outputs


def _chain_config(cfg: RunConfig) -> ChainConfig:
    return ChainConfig(n_samples=cfg["chain.n_samples"],
                       proposal_scale=cfg["chain.proposal_scale"],
                       burn_in=cfg["chain.burn_in"], sigma_obs=cfg["chain.sigma_obs"],
                       seed=cfg["seed"], tune=cfg["chain.tune"])


def _cmd_mcmc(cfg: RunConfig, out_dir):
    task = _task_from(cfg)
    m_true, e, d = _draw_instance(cfg, task)
    chain_csv = os.path.join(out_dir, "chain.csv")
    res = run_chain(task, d, e, _chain_config(cfg), csv_path=chain_csv)
    err = relative_error_de(m_true, res.posterior_mean[None, :], task, e)
    table = os.path.join(out_dir, f"mcmc_{cfg.task_name}.csv")
    write_chain_csv([(cfg["instance.n_obs"], cfg["chain.n_samples"], err)], table)
    result = os.path.join(out_dir, "mcmc_result.json")
    with open(result, "w") as f:
        json.dump({"acceptance_rate": res.acceptance_rate,
                   "posterior_mean": res.posterior_mean.tolist(),
                   "relative_error": err, "wall_seconds": res.wall_seconds,
                   "proposal_scale": res.proposal_scale,
                   "warnings": res.warnings}, f, indent=2)
    print(f"chain of {cfg['chain.n_samples']}: acceptance {res.acceptance_rate:.2f}, "
          f"solution relative error {100 * err:.2f}% in {res.wall_seconds:.1f}s")
    return [], [chain_csv, table, result]


def _cmd_benchmark(cfg: RunConfig, out_dir):
    net, ckpt_path = _load_net(cfg)
    task = net.task
    _, e, d = _draw_instance(cfg, task)
    cfm_s, mcmc_s, ratio = benchmark_timing(net, task, d, e, _chain_config(cfg),
                                            _sampler_config(cfg))
    out = os.path.join(out_dir, "timing.json")
    with open(out, "w") as f:
        json.dump({"cfm_seconds": cfm_s, "mcmc_seconds": mcmc_s, "ratio": ratio},
                  f, indent=2)
    print(f"flow inference {cfm_s:.3f}s vs chain {mcmc_s:.1f}s -> {ratio:.0f}x")
    return [ckpt_path], [out]


def _cmd_paths(cfg: RunConfig, out_dir):
    net, ckpt_path = _load_net(cfg)
    task = net.task
    _, e, d = _draw_instance(cfg, task)
    out = os.path.join(out_dir, "paths.csv")
    rep = path_straightness(net, d, e, n_paths=cfg["paths.n_paths"],
                            cfg=_sampler_config(cfg), csv_path=out)
    summary = os.path.join(out_dir, "straightness.json")
    with open(summary, "w") as f:
        json.dump({"mean_deviation": rep.mean_deviation, "skipped": rep.skipped,
                   "n_paths": cfg["paths.n_paths"]}, f, indent=2)
    print(f"mean relative chord deviation {rep.mean_deviation:.4f} "
          f"({rep.skipped} degenerate paths skipped)")
    return [ckpt_path], [out, summary]


_BODIES = {
    "generate-data": _cmd_generate_data,
    "train": _cmd_train,
    "sample": _cmd_sample,
    "evaluate": _cmd_evaluate,
    "mcmc": _cmd_mcmc,
    "benchmark": _cmd_benchmark,
    "paths": _cmd_paths,
}


def _parser():
    p = argparse.ArgumentParser(
        prog="flowinverse",
        description="Amortized Bayesian inversion with conditional flow matching.",
        epilog="Config keys:\n" + config_reference(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="subcommand")
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="flat key=value config file or a run manifest (.json)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key")
        sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("--out-dir", help="override the output directory")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _parser()
    if not argv:
        parser.print_help()
        return 1
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    if args.subcommand not in _BODIES:
        parser.print_help()
        return 1
    try:
        cfg = _build_config(args)
        out_dir = args.out_dir or cfg.out_dir()
        os.makedirs(out_dir, exist_ok=True)
    except (ConfigError, UsageError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    try:
        inputs, outputs = _BODIES[args.subcommand](cfg, out_dir)
        if args.config:
            inputs = [args.config] + inputs
        manifest = _write_manifest(cfg, args.subcommand, inputs, outputs, out_dir)
        print(f"manifest: {manifest}")
        return 0
    except (ConfigError, UsageError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:
        print(f"runtime failure: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
