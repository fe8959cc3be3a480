"""Command-line entry point: ``noma-aoi <subcommand> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment as ex
from .baselines import PolicyKind, PolicySpec, value_iteration, write_policy_table
from .channel import ChannelMode
from .dqn import config_hash, evaluate_policy, load_net, save_net
from .env import NomaEnv

log = logging.getLogger("noma_aoi")


def _snr_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _load(args) -> ex.ExperimentConfig:
    source = args.config
    if source and not Path(source).exists() and ex.preset_path(source).exists():
        source = ex.preset_path(source)
    cfg = ex.parse_config(source) if source else ex.parse_config_text("")
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    if args.out is not None:
        cfg.out = args.out
    if args.snr_db is not None:
        cfg.sweep = args.snr_db
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.cfg").write_text(ex.format_config(cfg))
    return cfg


def _single_snr(args, cfg) -> float:
    return args.snr_db[0] if args.snr_db else cfg.env.snr_db


def _tag(snr: float, policy: str) -> str:
    return f"{policy}_{snr:g}dB"


def cmd_train(args):
    cfg = _load(args)
    snr = _single_snr(args, cfg)
    spec = cfg.policy(args.policy)
    if not spec.learned:
        raise ValueError(f"policy {args.policy!r} is not learned")
    env, result = ex.train_cell(cfg, snr, spec)
    out = Path(cfg.out)
    net_path = out / f"net_{_tag(snr, spec.name)}.txt"
    save_net(result.net, net_path, config_hash(dataclasses.replace(cfg.env, snr_db=snr), cfg.train))
    ex.write_curve(out / f"curve_{_tag(snr, spec.name)}.csv", result.curve)
    print(net_path)


def cmd_evaluate(args):
    cfg = _load(args)
    spec = cfg.policy(args.policy)
    net = load_net(args.net)[0] if args.net else None
    snrs = args.snr_db or [cfg.env.snr_db]
    records = []
    for snr in snrs:
        if spec.learned and net is None:
            records.append(ex.run_cell(cfg, snr, spec))
        else:
            records.append(ex.evaluate_cell(cfg, snr, spec, net))
    path = ex.write_records(Path(cfg.out) / f"metrics_{spec.name}.csv", records, cfg.env.t_max)
    print(path)


def cmd_sweep(args):
    cfg = _load(args)
    records = ex.run_sweep(cfg)
    path = ex.write_records(Path(cfg.out) / "sweep.csv", records, cfg.env.t_max)
    print(path)


def cmd_oracle(args):
    cfg = _load(args)
    snr = _single_snr(args, cfg)
    env_cfg = dataclasses.replace(cfg.env, snr_db=snr, channel_mode=ChannelMode.DETERMINISTIC_MEAN)
    env = NomaEnv(env_cfg)
    result = value_iteration(env, cfg.train.gamma, args.tolerance)
    out = Path(cfg.out)
    write_policy_table(out / f"oracle_policy_{snr:g}dB.csv", result)
    rng = np.random.default_rng([cfg.seed, 3])
    res = evaluate_policy(env, result.policy(), cfg.eval.horizon, cfg.eval.episodes, cfg.eval.warmup, rng)
    rec = ex.MetricsRecord(snr, "oracle", res.mean_aoi, res.stderr, res.round_fractions, res.slots)
    path = ex.write_records(out / f"oracle_metrics_{snr:g}dB.csv", [rec], env_cfg.t_max)
    print(path)


def cmd_histogram(args):
    cfg = _load(args)
    spec = cfg.policy(args.policy)
    net = load_net(args.net)[0] if args.net else None
    rows = []
    for snr in args.snr_db or cfg.sweep:
        seed = ex.cell_seed(cfg.seed, snr, spec.name)
        if spec.learned and net is None:
            env, result = ex.train_cell(cfg, snr, spec)
            policy = ex.build_policy(cfg, env, spec, seed, result.net)
        else:
            env = ex.make_env(cfg, snr, spec)
            policy = ex.build_policy(cfg, env, spec, seed, net)
        fr = ex.retransmission_histogram(policy, env, args.slots, cfg.eval.warmup,
                                         np.random.default_rng([seed, 4]))
        rows.append([repr(float(snr)), spec.name] + [repr(float(f)) for f in fr])
    path = Path(cfg.out) / f"histogram_{spec.name}.csv"
    with open(path, "w") as fh:
        fh.write(",".join(["snr_db", "policy"] + [f"frac_round_{t}" for t in range(1, cfg.env.t_max + 1)]) + "\n")
        for r in rows:
            fh.write(",".join(r) + "\n")
    print(path)


def cmd_compare(args):
    report = ex.compare_report(args.csv, args.z)
    text = report.to_csv()
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "compare.csv").write_text(text)
    sys.stdout.write(text)
    for a, b, lo, hi in report.crossovers:
        print(f"# crossover {a} vs {b} between {lo:g} and {hi:g} dB")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="noma-aoi", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, policy=False, net=False):
        p.add_argument("--config", help="key = value experiment file, or a preset name (full, desk)")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--snr-db", type=_snr_list, help="comma-separated SNR points in dB")
        if policy:
            p.add_argument("--policy", default="raw", choices=[k.value for k in PolicyKind])
        if net:
            p.add_argument("--net", help="trained network file")
        return p

    common(sub.add_parser("train", help="train one learned policy at one SNR"), policy=True).set_defaults(func=cmd_train)
    common(sub.add_parser("evaluate", help="evaluate a policy"), policy=True, net=True).set_defaults(func=cmd_evaluate)
    common(sub.add_parser("sweep", help="full SNR x policy grid")).set_defaults(func=cmd_sweep)
    p = common(sub.add_parser("oracle", help="value iteration on a reduced instance"))
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.set_defaults(func=cmd_oracle)
    p = common(sub.add_parser("histogram", help="retransmission round fractions"), policy=True, net=True)
    p.add_argument("--slots", type=int, default=10_000)
    p.set_defaults(func=cmd_histogram)
    p = sub.add_parser("compare", help="pairwise comparison of metrics CSVs")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out")
    p.add_argument("--z", type=float, default=2.0, help="standard errors needed to resolve a gap")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # one machine-readable line, nonzero exit
        if args.verbose:
            log.exception("command failed")
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 2 if isinstance(exc, ex.ConfigError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
