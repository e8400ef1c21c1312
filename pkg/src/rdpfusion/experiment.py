"""Model construction, training runs, evaluation and sweep outputs.

Everything written to a run directory is a deterministic function of the
config and seed, so reruns reproduce the metrics files byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .accountant import MechanismShape
from .config import dumps
from .environments import DensityWalkEnv, LinearGaussianEnv, TrafficConfig, TrafficDensityEnv
from .environments.traffic import bundled_data_path
from .errors import ConfigError, InvalidInputError
from .fusion import ERROR_FUNCTIONS, Critic, Estimator, adaptive_policy, classical_baseline, run_episodes
from .nn import load_checkpoint, save_checkpoint
from .training import PpoConfig, alternate_optimize, audit_batch, balanced_replay, train_classical, write_log

KINDS = ("adaptive", "classical")


def make_env(env_cfg: dict, split="train"):
    name, params = env_cfg["name"], dict(env_cfg.get("params") or {})
    try:
        if name == "linear":
            return LinearGaussianEnv(**params)
        if name == "density_walk":
            return DensityWalkEnv(**params)
        if name == "traffic":
            data = env_cfg.get("data") or bundled_data_path()
            return TrafficDensityEnv.from_csv(data, TrafficConfig(**params), split=split)
    except TypeError as exc:
        raise ConfigError("env.params", str(exc)) from None
    raise ConfigError("env.name", f"unknown environment {name!r}")


def split_envs(env_cfg):
    """(train, validation, test) environments; synthetic ones reuse a single instance."""
    train = make_env(env_cfg, "train")
    if isinstance(train, TrafficDensityEnv):
        return train, train.with_split("validation"), train.with_split("test")
    return train, train, train


def ppo_config(cfg) -> PpoConfig:
    return PpoConfig(**cfg["ppo"])


def build_models(cfg, env, budget, kind, seed):
    """Policy, estimator and (adaptive only) critic.

    Each network draws from its own stream and the filter is built first, so
    both kinds share the filter and estimator initialization for one seed.
    """
    if kind not in KINDS:
        raise InvalidInputError(f"unknown policy kind {kind!r}")
    rng = np.random.default_rng([int(seed), 11])
    spec = env.spec
    shape = MechanismShape(cfg["policy"]["d"], spec.m)
    sizes = {"hidden": cfg["policy"]["hidden"], "head_hidden": cfg["policy"]["head_hidden"]}
    make = adaptive_policy if kind == "adaptive" else classical_baseline
    policy = make(budget, spec.horizon, shape, cfg["alpha"], rng, spec.n_y, **sizes)
    estimator = Estimator(
        shape.d, spec.n_x, np.random.default_rng([int(seed), 12]),
        hidden=cfg["estimator"]["hidden"], head_hidden=cfg["estimator"]["head_hidden"],
        out_shift=spec.state_mean, out_scale=spec.state_std,
    )
    critic = None
    if kind == "adaptive":
        critic = Critic(shape.d, np.random.default_rng([int(seed), 13]), hidden=cfg["critic"]["hidden"], head_hidden=cfg["critic"]["head_hidden"])
    return policy, estimator, critic


def _modules(policy, estimator, critic):
    mods = {"policy": policy, "estimator": estimator}
    if critic is not None:
        mods["critic"] = critic
    return mods


def save_models(path, policy, estimator, critic, seed, extra):
    extra = dict(extra)
    if critic is not None:
        extra["critic_value_scale"] = critic.value_scale
    return save_checkpoint(path, _modules(policy, estimator, critic), seed=seed, extra=extra)


def load_models(path, cfg, env, budget, kind, seed):
    policy, estimator, critic = build_models(cfg, env, budget, kind, seed)
    manifest = load_checkpoint(path, _modules(policy, estimator, critic))
    if critic is not None:
        critic.value_scale = float(manifest["extra"].get("critic_value_scale", 1.0))
    return policy, estimator, critic


def train_seed(seed, budget_index):
    """Shared by both kinds so their comparison uses common random numbers."""
    return [int(seed), int(budget_index)]


def train_policy(cfg, envs, budget, kind, seed, out_dir=None, tag=""):
    """Train one policy kind at one budget; optionally write checkpoint and log."""
    train_env, val_env, _ = envs
    pcfg = ppo_config(cfg)
    mseed = int(np.random.SeedSequence(seed).generate_state(1)[0])
    policy, estimator, critic = build_models(cfg, train_env, budget, kind, mseed)
    if kind == "adaptive":
        res = alternate_optimize(train_env, val_env, policy, estimator, critic, pcfg, budget, cfg["alpha"], mseed)
    else:
        res = train_classical(train_env, val_env, policy, estimator, pcfg, budget, cfg["alpha"], mseed)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_log(res.log, out_dir / f"train_log_{kind}{tag}.jsonl")
        save_models(out_dir / f"{kind}{tag}", policy, estimator, critic, mseed,
                    {"kind": kind, "budget": budget, "best_val_error": res.best_val_error})
    return policy, estimator, critic, res


def evaluate_policy(cfg, env, policy, estimator, budget, seeds=None, keep_first=False):
    """Deterministic evaluation over ``eval_seeds`` seeds of ``eval_episodes`` episodes."""
    n_seeds = cfg["eval_seeds"] if seeds is None else len(seeds)
    seeds = list(range(n_seeds)) if seeds is None else list(seeds)
    err_fn = ERROR_FUNCTIONS[cfg["error"]]
    per_seed, err_k, leak_k = [], [], []
    first = None
    for s in seeds:
        b = run_episodes(env, policy, estimator, budget, cfg["alpha"], [int(cfg["seed"]), 5003, int(s)],
                         batch=cfg["eval_episodes"], error_fn=err_fn,
                         env_kwargs=balanced_replay(env, cfg["eval_episodes"]))
        audit_batch(b)
        per_seed.append(b.mean_error())
        err_k.append(b.errors)
        leak_k.append(b.leakage)
        if first is None:
            first = b
    errors = np.concatenate(err_k)
    leak = np.concatenate(leak_k)
    per_seed = np.array(per_seed)
    return {
        "mean_error": float(per_seed.mean()),
        "stderr": float(per_seed.std(ddof=1) / math.sqrt(len(per_seed))) if len(per_seed) > 1 else 0.0,
        "seeds": len(seeds),
        "per_seed": per_seed.tolist(),
        "error_by_step": errors.mean(axis=0),
        "error_stderr_by_step": errors.std(axis=0, ddof=1) / math.sqrt(len(errors)) if len(errors) > 1 else np.zeros(errors.shape[1]),
        "leakage_by_step": leak.mean(axis=0),
        "max_total_leakage": float(leak.sum(axis=1).max()),
        "first_batch": first if keep_first else None,
    }


def _fmt(x):
    return repr(float(x))


def _write_csv(path, header, rows):
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def budget_dir(out, budget):
    return Path(out) / f"budget_{budget:g}"


def _train_job(cfg, budget, bi, kind, bdir):
    _, _, _, res = train_policy(cfg, split_envs(cfg["env"]), budget, kind, train_seed(cfg["seed"], bi), bdir)
    return res.best_val_error


def run_sweep(cfg, out, budgets=None, log=print):
    """Train (or load) both policies per budget, evaluate, and write the CSVs.

    Training jobs are independent and seeded per (budget, policy), so
    ``cfg["workers"] > 1`` runs them in a process pool with identical results.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    budgets = list(cfg["budgets"] if budgets is None else budgets)
    (out / "config.json").write_text(dumps({**cfg, "budgets": budgets}), encoding="utf-8")
    jobs = [
        (budget, bi, kind, budget_dir(out, budget))
        for bi, budget in enumerate(budgets)
        for kind in KINDS
        if not (budget_dir(out, budget) / f"{kind}.json").exists()
    ]
    workers = int(cfg.get("workers", 1))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            futs = [pool.submit(_train_job, cfg, *job) for job in jobs]
            for job, fut in zip(jobs, futs):
                log(f"budget {job[0]:g} {job[2]}: trained, validation error {fut.result():.6g}")
    else:
        for job in jobs:
            log(f"budget {job[0]:g} {job[2]}: trained, validation error {_train_job(cfg, *job):.6g}")

    envs = split_envs(cfg["env"])
    test_env = envs[2]
    trade, alloc, est_rows, trace = [], [], [], []
    summary = {}
    for budget in budgets:
        bdir = budget_dir(out, budget)
        for kind in KINDS:
            ckpt = bdir / kind
            mseed = json.loads(ckpt.with_suffix(".json").read_text())["seed"]
            policy, estimator, _ = load_models(ckpt, cfg, envs[0], budget, kind, mseed)
            ev = evaluate_policy(cfg, test_env, policy, estimator, budget, keep_first=True)
            log(f"budget {budget:g} {kind}: test error {ev['mean_error']:.6g} +/- {ev['stderr']:.2g}")
            summary[f"{budget:g}/{kind}"] = {k: ev[k] for k in ("mean_error", "stderr", "seeds", "max_total_leakage")}
            trade.append([_fmt(budget), kind, _fmt(ev["mean_error"]), _fmt(ev["stderr"]), ev["seeds"]])
            for k in range(len(ev["error_by_step"])):
                alloc.append([_fmt(budget), kind, k + 1, _fmt(ev["leakage_by_step"][k])])
                est_rows.append([_fmt(budget), kind, k + 1, _fmt(ev["error_by_step"][k]), _fmt(ev["error_stderr_by_step"][k])])
            fb = ev["first_batch"]
            for k in range(fb.horizon):
                for j in range(fb.states.shape[2]):
                    trace.append([_fmt(budget), kind, 0, k + 1, j, _fmt(fb.states[0, k, j]), _fmt(fb.estimates[0, k, j])])
    _write_csv(out / "tradeoff.csv", ["budget", "policy", "mean_error", "stderr", "seeds"], trade)
    _write_csv(out / "budget_allocation.csv", ["budget", "policy", "k", "leakage"], alloc)
    _write_csv(out / "est_error.csv", ["budget", "policy", "k", "mean_error", "stderr"], est_rows)
    _write_csv(out / "density_trace.csv", ["budget", "policy", "episode", "k", "dim", "state", "estimate"], trace)
    (out / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary
