"""Command-line surface.

Subcommands: gen-data, train, eval, sweep, theory, report. Exit codes:
0 on success, 1 on a hard failure, 2 on a configuration error.
"""

import argparse
import itertools
import json
import sys

import numpy as np

from . import evaluate, problems, train
from .flow import Flow


class ConfigError(Exception):
    pass


def _load_config(path):
    if path is None:
        raise ConfigError("missing --config")
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")


def _problem_from(config, seed):
    prob = config.get("problem")
    if not prob or "family" not in prob:
        raise ConfigError("config needs a 'problem' section with a 'family'")
    family = prob["family"]
    if family == "energy":
        path = prob.get("csv")
        if not path:
            raise ConfigError("energy problem needs problem.csv")
        return problems.load_energy_csv(path)
    if family not in problems.FAMILY_GENERATORS:
        raise ConfigError(f"unknown family '{family}'")
    try:
        gcfg = problems.GenConfig(n=prob["n"], d_x=prob["d_x"], d_c=prob["d_c"],
                                  deg=prob.get("deg", 2),
                                  sigma=prob.get("sigma", 20.0), seed=seed)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad problem section: {exc}")
    return problems.FAMILY_GENERATORS[family](gcfg)


def cmd_gen_data(args):
    if args.family == "energy":
        prices = problems.gen_energy_prices(args.days, seed=args.seed)
        problems.save_energy_csv(prices, args.out)
    else:
        config = {"problem": {"family": args.family, "n": args.n, "d_x": args.d_x,
                              "d_c": args.d_c, "deg": args.deg, "sigma": args.sigma}}
        data, _ = _problem_from(config, args.seed)
        problems.save_dataset_csv(data, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_train(args):
    config = _load_config(args.config)
    data, spec = _problem_from(config, args.seed)
    cfg = evaluate._train_cfg_from(config, {"seed": args.seed})
    if args.model in ("proxy", "gendfl"):
        proxy = train.train_proxy(data, spec, cfg)
        flow = proxy.flow
        if args.model == "gendfl":
            flow = train.train_gendfl(data, spec, cfg, proxy, log_path=args.log)
        flow.save(args.out)
    elif args.model == "pto":
        train.train_pto(data, cfg).save(args.out)
    elif args.model == "cvar-reg":
        train.train_cvar_regressor(data, cfg.alpha, cfg).save(args.out)
    else:
        raise ConfigError(f"unknown model '{args.model}'")
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args):
    if not args.model_checkpoint:
        raise ConfigError("missing --model-checkpoint")
    config = _load_config(args.config)
    data, spec = _problem_from(config, args.seed)
    cfg = evaluate._train_cfg_from(config, {"seed": args.seed})
    if args.model in ("proxy", "gendfl"):
        flow = Flow.load(args.model_checkpoint)
        decider = evaluate.gendfl_decider(flow, spec, cfg.alpha, cfg.n_samples,
                                          cfg.solver, seed=args.seed)
    else:
        model = train.PredictorMLP.load(args.model_checkpoint)
        decider = evaluate.pointwise_decider(model, spec)
    ev = config.get("eval", {})
    rng = np.random.default_rng((args.seed, 99))
    holdout_X = rng.standard_normal((ev.get("holdout", 100), spec.d_x))
    rows = []
    import time as _time
    t0 = _time.perf_counter()
    for alpha_eval in ev.get("alpha_eval", [cfg.alpha]):
        pct, _, _ = evaluate.relative_regret(
            decider, spec, data.truth.resample, holdout_X, alpha_eval,
            ev.get("M", 2000), seed=args.seed)
        rows.append(evaluate.RegretReport(
            model=args.model, family=spec.family,
            deg=config["problem"].get("deg", 2),
            sigma=config["problem"].get("sigma", 20.0), alpha_train=cfg.alpha,
            alpha_eval=alpha_eval, seed=args.seed, regret_pct=pct,
            runtime_s=_time.perf_counter() - t0))
    evaluate.write_report_csv(rows, args.out)
    print(f"wrote {args.out}")
    return 0


SWEEP_AXES = ("beta", "alpha", "sigma", "deg", "d_x", "n", "n_samples")


def _sweep_grid(config):
    sweep = config.get("sweep", {})
    axes = [(k, sweep[k]) for k in SWEEP_AXES if k in sweep]
    for combo in itertools.product(*(vals for _, vals in axes)):
        yield dict(zip((k for k, _ in axes), combo))


def cmd_sweep(args):
    config = _load_config(args.config)
    cells = list(_sweep_grid(config))
    if args.dry_run:
        for cell in cells:
            print(json.dumps(cell, sort_keys=True))
        print(f"planned {len(cells)} sweep cells")
        return 0
    all_rows = []
    for cell in cells:
        cfg = json.loads(json.dumps(config))  # deep copy
        for k, v in cell.items():
            if k in ("sigma", "deg", "d_x", "n"):
                cfg["problem"][k] = v
            else:
                cfg.setdefault("train", {})[k] = v
        label_bits = ",".join(f"{k}={v}" for k, v in sorted(cell.items()))
        rows = evaluate.run_experiment(cfg)
        for r in rows:
            r.model = f"{r.model}[{label_bits}]"
        all_rows.extend(rows)
    evaluate.write_report_csv(all_rows, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_theory(args):
    report = evaluate.theory_suite()
    print(evaluate.theory_report_text(report))
    return 0 if all(e["passed"] for e in report) else 1


def cmd_report(args):
    rows = []
    for path in args.inputs:
        rows.extend(evaluate.read_report_csv(path))
    summary = evaluate.summarize(rows)
    # gnuplot-ready: space-separated columns, one block per model
    print("# model family deg sigma alpha_train alpha_eval mean stderr n")
    for entry in summary:
        key = " ".join(str(k) for k in entry["key"])
        print(f"{key} {entry['mean']:.6f} {entry['stderr']:.6f} {entry['n']}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("model,family,deg,sigma,alpha_train,alpha_eval,mean,stderr,n\n")
            for entry in summary:
                fh.write(",".join(str(k) for k in entry["key"]) +
                         f",{entry['mean']:.6f},{entry['stderr']:.6f},{entry['n']}\n")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="gendfl",
                                     description="risk-sensitive decision-focused learning")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset CSV")
    p.add_argument("--family", required=True,
                   choices=["portfolio", "knapsack", "shortest_path", "energy"])
    p.add_argument("--n", type=int, default=320)
    p.add_argument("--d-x", type=int, default=5)
    p.add_argument("--d-c", type=int, default=10)
    p.add_argument("--deg", type=int, default=2)
    p.add_argument("--sigma", type=float, default=20.0)
    p.add_argument("--days", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write its checkpoint")
    p.add_argument("--model", required=True, choices=["proxy", "gendfl", "pto", "cvar-reg"])
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", default=None, help="JSON-lines epoch log path")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, write a regret CSV")
    p.add_argument("--model", required=True, choices=["proxy", "gendfl", "pto", "cvar-reg"])
    p.add_argument("--model-checkpoint")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid sweep over training/problem axes")
    p.add_argument("--config")
    p.add_argument("--out", default="sweep.csv")
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("theory", help="run the theory test suite")
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("report", help="aggregate regret CSVs into a summary")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # hard failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
