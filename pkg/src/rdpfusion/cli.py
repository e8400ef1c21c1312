"""Command line entry point: train, eval, sweep, oracle, audit, print-defaults.

Exit codes: 0 ok, 1 validation error, 2 runtime error, 3 audit failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import config as config_mod
from .audit import audit_file
from .errors import ConfigError, InfeasibleInstanceError, InvalidInputError, RdpFusionError

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_AUDIT = 0, 1, 2, 3


def _parse_budgets(text):
    try:
        vals = [float(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise ConfigError("--budgets", f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise ConfigError("--budgets", "empty list")
    return vals


def _load_config(args):
    raw = {"env": {"name": "linear"}}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(args.config, f"cannot read ({exc.strerror})") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(args.config, f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "expected a JSON object")
    raw = json.loads(json.dumps(raw))
    if getattr(args, "env", None):
        raw.setdefault("env", {})
        if isinstance(raw["env"], dict):
            raw["env"]["name"] = args.env
    if getattr(args, "data", None):
        raw.setdefault("env", {})
        if isinstance(raw["env"], dict):
            raw["env"]["data"] = args.data
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "out", None):
        raw["out"] = args.out
    if getattr(args, "budgets", None):
        raw["budgets"] = _parse_budgets(args.budgets)
    if getattr(args, "workers", None) is not None:
        raw["workers"] = args.workers
    if getattr(args, "budget", None) is not None:
        raw["budget"] = args.budget
    return config_mod.validate(raw)


def cmd_print_defaults(args):
    sys.stdout.write(config_mod.dumps(config_mod.defaults()))
    return EXIT_OK


def cmd_train(args):
    from .experiment import KINDS, split_envs, train_policy, train_seed

    cfg = _load_config(args)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config_mod.dumps(cfg), encoding="utf-8")
    envs = split_envs(cfg["env"])
    kinds = KINDS if args.policy == "both" else (args.policy,)
    metrics = {}
    for kind in kinds:
        seed = train_seed(cfg["seed"], 0)
        _, _, _, res = train_policy(cfg, envs, cfg["budget"], kind, seed, out)
        metrics[kind] = {"best_val_error": res.best_val_error, "updates": len(res.log)}
        print(f"{kind}: best validation error {res.best_val_error:.6g} after {len(res.log)} updates")
    (out / "train_metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_eval(args):
    from .experiment import KINDS, evaluate_policy, load_models, split_envs

    run = Path(args.out or "runs/default")
    cfg_path = Path(args.config) if args.config else run / "config.json"
    args.config = str(cfg_path)
    args.out = str(run)
    cfg = _load_config(args)
    envs = split_envs(cfg["env"])
    report = {}
    traj = (run / "trajectories.jsonl").open("w", encoding="utf-8") if args.trajectories else None
    try:
        for kind in KINDS:
            ckpt = run / kind
            if not ckpt.with_suffix(".json").exists():
                continue
            mseed = json.loads(ckpt.with_suffix(".json").read_text())["seed"]
            policy, estimator, _ = load_models(ckpt, cfg, envs[0], cfg["budget"], kind, mseed)
            ev = evaluate_policy(cfg, envs[2], policy, estimator, cfg["budget"], keep_first=True)
            report[kind] = {k: ev[k] for k in ("mean_error", "stderr", "seeds", "max_total_leakage")}
            report[kind]["error_by_step"] = ev["error_by_step"].tolist()
            report[kind]["leakage_by_step"] = ev["leakage_by_step"].tolist()
            print(f"{kind}: mean error {ev['mean_error']:.6g} +/- {ev['stderr']:.2g} over {ev['seeds']} seeds")
            if traj is not None:
                for rec in ev["first_batch"].records():
                    traj.write(rec.to_jsonl())
    finally:
        if traj is not None:
            traj.close()
    if not report:
        print(f"no checkpoints found in {run}", file=sys.stderr)
        return EXIT_RUNTIME
    (run / "eval.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_sweep(args):
    from .experiment import run_sweep

    cfg = _load_config(args)
    run_sweep(cfg, cfg["out"], log=print)
    print(f"wrote {Path(cfg['out']) / 'tradeoff.csv'}")
    return EXIT_OK


def cmd_oracle(args):
    from .oracle import DiscreteInstance, compare, random_instance

    if args.instance and args.random:
        raise ConfigError("oracle", "give either an instance file or --random, not both")
    if args.instance:
        try:
            text = Path(args.instance).read_text(encoding="utf-8")
            instances = [("instance", DiscreteInstance.from_json(text))]
        except OSError as exc:
            raise ConfigError(args.instance, f"cannot read ({exc.strerror})") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(args.instance, f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    else:
        n = args.random or 5
        base = args.seed or 0
        instances = [(f"random seed {base + i}", random_instance(base + i)) for i in range(n)]
    reports = []
    failed = False
    for label, inst in instances:
        try:
            r = compare(inst)
        except InfeasibleInstanceError as exc:
            print(f"{label}: INFEASIBLE ({exc})")
            reports.append({"label": label, "infeasible": str(exc)})
            failed = True
            continue
        verdict = "dominance holds" if r["dominance"] else "DOMINANCE VIOLATED"
        strict = ", strict" if r["strict"] else ""
        print(
            f"{label}: adaptive {r['adaptive_value']:.12g}  best uniform {r['best_uniform_value']:.12g}"
            f"  open loop {r['open_loop_value']:.12g}  -> {verdict}{strict}"
        )
        failed |= not r["dominance"]
        reports.append({"label": label, **r})
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "oracle_report.json").write_text(json.dumps(reports, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_audit(args):
    path = Path(args.trajectory)
    if not path.exists():
        raise ConfigError(str(path), "no such file")
    reports = audit_file(path)
    for r in reports:
        print(r.line())
    ok = all(r.passed for r in reports)
    print(f"{'PASS' if ok else 'FAIL'}: {sum(r.passed for r in reports)}/{len(reports)} trajectories within budget")
    return EXIT_OK if ok else EXIT_AUDIT


def build_parser():
    p = argparse.ArgumentParser(prog="rdpfusion", description="Rényi-private real-time sensor fusion experiments")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--seed", type=int, help="global seed")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--env", choices=config_mod.ENV_NAMES, help="environment name")
        sp.add_argument("--data", help="trajectory CSV for the traffic environment")

    sp = sub.add_parser("train", help="train policies at one budget")
    common(sp)
    sp.add_argument("--budget", type=float, help="global privacy budget (nats)")
    sp.add_argument("--policy", choices=("adaptive", "classical", "both"), default="both")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate checkpoints in a run directory")
    common(sp)
    sp.add_argument("--budget", type=float)
    sp.add_argument("--trajectories", action="store_true", help="also write trajectories.jsonl")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="train and evaluate over a list of budgets")
    common(sp)
    sp.add_argument("--budgets", help="comma-separated budgets, e.g. 0.5,1,1.5,3")
    sp.add_argument("--workers", type=int, help="parallel training processes")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("oracle", help="exact tabular solution on tiny instances")
    sp.add_argument("instance", nargs="?", help="instance JSON file")
    sp.add_argument("--random", type=int, help="solve N random instances")
    sp.add_argument("--seed", type=int, help="first random seed")
    sp.add_argument("--out", help="directory for oracle_report.json")
    sp.set_defaults(func=cmd_oracle)

    sp = sub.add_parser("audit", help="recompute leakage of logged trajectories")
    sp.add_argument("trajectory", help="JSON-lines trajectory file")
    sp.set_defaults(func=cmd_audit)

    sp = sub.add_parser("print-defaults", help="print the default config")
    sp.set_defaults(func=cmd_print_defaults)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except RdpFusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
