"""Experiment driver: config files, per-cell training/evaluation, SNR sweeps,
retransmission histograms and cross-policy comparison."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .baselines import (NackGatedEnv, PairedNomaEnv, PairingPlan, PolicyKind, PolicySpec,
                        fixed_policy, random_policy)
from .channel import ChannelMode
from .dqn import (EvalResult, GreedyPolicy, TrainConfig, TrainingDiverged, config_hash,
                  evaluate_policy, train)
from .env import EnvConfig, NomaEnv
from .fbl import CodeParams

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 10
    horizon: int = 10_000
    warmup: float = 0.1

    def __post_init__(self):
        if self.episodes < 1 or self.horizon < 1 or not 0 <= self.warmup < 1:
            raise ValueError(f"invalid evaluation settings {self}")


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: list[float] = field(default_factory=lambda: [float(x) for x in range(0, 31, 2)])
    policies: list[PolicySpec] = field(default_factory=lambda: [PolicySpec(PolicyKind.FIXED)])
    fixed_levels: tuple[int, ...] = (1, 2, 5, 12)
    pairing_plan: tuple[tuple[int, int], ...] | None = None
    workers: int = 1
    out: str = "results"
    seed: int = 0

    def policy(self, name: str) -> PolicySpec:
        for p in self.policies:
            if p.name == name:
                return p
        return PolicySpec(PolicyKind(name))


# ---------------------------------------------------------------------------
# key = value config files

def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _pairs(text: str) -> tuple[tuple[int, int], ...] | None:
    text = text.strip()
    if not text or text == "strongest_weakest":
        return None
    return tuple(tuple(int(u) for u in p.split("-")) for p in text.split(","))


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        if value and isinstance(value[0], (tuple, list)):
            return ",".join("-".join(str(u) for u in p) for p in value)
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, ChannelMode):
        return value.value
    return str(value)


# key -> (section, field, parser)
_KEYS: dict[str, tuple[str, str, Callable[[str], Any]]] = {
    "seed": ("", "seed", int),
    "out": ("", "out", str),
    "workers": ("", "workers", int),
    "env.n_users": ("env", "n_users", int),
    "env.m_levels": ("env", "m_levels", int),
    "env.t_max": ("env", "t_max", int),
    "env.weights": ("env", "weights", lambda t: _floats(t) or None),
    "env.aoi_cap": ("env", "aoi_cap", int),
    "env.distances": ("env", "distances", _floats),
    "env.path_loss_exponent": ("env", "path_loss_exponent", float),
    "env.snr_db": ("env", "snr_db", float),
    "env.channel_mode": ("env", "channel_mode", ChannelMode),
    "env.message_bits": ("code", "message_bits", int),
    "env.symbols": ("code", "symbols", int),
    "train.episodes": ("train", "episodes", int),
    "train.slots": ("train", "slots", int),
    "train.gamma": ("train", "gamma", float),
    "train.learning_rate": ("train", "learning_rate", float),
    "train.epsilon": ("train", "epsilon", float),
    "train.epsilon_decay": ("train", "epsilon_decay", float),
    "train.epsilon_min": ("train", "epsilon_min", float),
    "train.replay_threshold": ("train", "replay_threshold", int),
    "train.train_period": ("train", "train_period", int),
    "train.target_sync": ("train", "target_sync", int),
    "train.batch_size": ("train", "batch_size", int),
    "train.replay_capacity": ("train", "replay_capacity", int),
    "train.hidden": ("train", "hidden", _ints),
    "train.double_dqn": ("train", "double_dqn", _bool),
    "train.dtype": ("train", "dtype", str),
    "train.reward_scale": ("train", "reward_scale", float),
    "train.optimizer": ("train", "optimizer", str),
    "eval.episodes": ("eval", "episodes", int),
    "eval.horizon": ("eval", "horizon", int),
    "eval.warmup": ("eval", "warmup", float),
    "sweep.snr_db": ("", "sweep", lambda t: list(_floats(t))),
    "policies": ("", "policies", lambda t: [PolicySpec(PolicyKind(x.strip())) for x in t.split(",") if x.strip()]),
    "policies.fixed_levels": ("", "fixed_levels", _ints),
    "policies.pairing_plan": ("", "pairing_plan", _pairs),
}


def _defaults() -> dict[str, dict[str, Any]]:
    env, train_cfg = EnvConfig(), TrainConfig()
    top = ExperimentConfig()
    sections: dict[str, dict[str, Any]] = {
        "env": {f.name: getattr(env, f.name) for f in dataclasses.fields(EnvConfig) if f.name != "code"},
        "code": dataclasses.asdict(CodeParams()),
        "train": {f.name: getattr(train_cfg, f.name) for f in dataclasses.fields(TrainConfig)},
        "eval": dataclasses.asdict(EvalConfig()),
        "": {k: getattr(top, k) for k in ("seed", "out", "workers", "sweep", "policies",
                                           "fixed_levels", "pairing_plan")},
    }
    sections["env"]["weights"] = None
    return sections


def build_config(values: dict[str, dict[str, Any]]) -> ExperimentConfig:
    top = values[""]
    try:
        env = EnvConfig(code=CodeParams(**values["code"]), **values["env"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"env: {exc}") from exc
    try:
        train_cfg = TrainConfig(**{**values["train"], "seed": top["seed"]})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from exc
    try:
        eval_cfg = EvalConfig(**values["eval"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"eval: {exc}") from exc
    cfg = ExperimentConfig(env=env, train=train_cfg, eval=eval_cfg, sweep=list(top["sweep"]),
                           policies=list(top["policies"]), fixed_levels=tuple(top["fixed_levels"]),
                           pairing_plan=top["pairing_plan"], workers=int(top["workers"]),
                           out=top["out"], seed=int(top["seed"]))
    if not cfg.policies:
        raise ConfigError("policies: at least one policy is required")
    if any(p.kind is PolicyKind.FIXED for p in cfg.policies):
        try:
            fixed_policy(NomaEnv(env), cfg.fixed_levels)
        except ValueError as exc:
            raise ConfigError(f"policies.fixed_levels: {exc}") from exc
    if cfg.pairing_plan is not None:
        try:
            PairingPlan(cfg.pairing_plan)
        except ValueError as exc:
            raise ConfigError(f"policies.pairing_plan: {exc}") from exc
    return cfg


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse ``key = value`` lines; unknown keys and bad values raise ConfigError."""
    values = _defaults()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        section, name, parser = _KEYS[key]
        try:
            values[section][name] = parser(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}:{lineno}: invalid value for {key}: {value!r} ({exc})") from exc
    return build_config(values)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config_text(path.read_text(), str(path))


def format_config(cfg: ExperimentConfig) -> str:
    """Fully resolved config in the same ``key = value`` syntax."""
    sections = {"env": cfg.env, "code": cfg.env.code, "train": cfg.train, "eval": cfg.eval, "": cfg}
    lines = []
    for key, (section, name, _) in _KEYS.items():
        if key == "policies":
            value = ",".join(p.name for p in cfg.policies)
        else:
            value = _fmt(getattr(sections[section], name))
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def preset_path(name: str = "full") -> Path:
    return Path(__file__).parent / "presets" / f"{name}.cfg"


# ---------------------------------------------------------------------------
# cells

def cell_seed(master: int, snr_db: float, policy: str) -> int:
    blob = f"{master}|{float(snr_db)!r}|{policy}".encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


def make_env(cfg: ExperimentConfig, snr_db: float, spec: PolicySpec):
    env_cfg = dataclasses.replace(cfg.env, snr_db=float(snr_db))
    kind = PolicyKind(spec.kind)
    if kind is PolicyKind.RESTRICTED:
        return NackGatedEnv(env_cfg)
    if kind is PolicyKind.PAIRING:
        plan = PairingPlan(cfg.pairing_plan) if cfg.pairing_plan else None
        return PairedNomaEnv(env_cfg, plan)
    return NomaEnv(env_cfg)


@dataclass
class MetricsRecord:
    snr_db: float
    policy: str
    mean_aoi: float
    stderr: float
    round_fractions: list[float]
    slots: int
    status: str = "ok"

    def row(self) -> list[str]:
        return ([_fmt(float(self.snr_db)), self.policy, repr(float(self.mean_aoi)), repr(float(self.stderr))]
                + [repr(float(f)) for f in self.round_fractions] + [str(self.slots), self.status])


def csv_header(t_max: int) -> list[str]:
    return (["snr_db", "policy", "mean_aoi", "stderr"]
            + [f"frac_round_{t}" for t in range(1, t_max + 1)] + ["slots", "status"])


def train_cell(cfg: ExperimentConfig, snr_db: float, spec: PolicySpec):
    """Train the learned policy of one (SNR, policy) cell; returns (env, TrainResult)."""
    env = make_env(cfg, snr_db, spec)
    train_cfg = dataclasses.replace(cfg.train, seed=cell_seed(cfg.seed, snr_db, spec.name))
    return env, train(env, train_cfg)


def build_policy(cfg: ExperimentConfig, env, spec: PolicySpec, seed: int, net=None):
    kind = PolicyKind(spec.kind)
    if kind is PolicyKind.FIXED:
        return fixed_policy(env, spec.params.get("levels", cfg.fixed_levels))
    if kind is PolicyKind.RANDOM:
        return random_policy(env, np.random.default_rng([seed, 1]))
    if net is None:
        raise ValueError(f"policy {spec.name!r} needs a trained network")
    return GreedyPolicy(net, env)


def evaluate_cell(cfg: ExperimentConfig, snr_db: float, spec: PolicySpec, net=None) -> MetricsRecord:
    seed = cell_seed(cfg.seed, snr_db, spec.name)
    env = make_env(cfg, snr_db, spec)
    policy = build_policy(cfg, env, spec, seed, net)
    res = evaluate_policy(env, policy, cfg.eval.horizon, cfg.eval.episodes, cfg.eval.warmup,
                          np.random.default_rng([seed, 2]), cfg.env.t_max)
    return MetricsRecord(float(snr_db), spec.name, res.mean_aoi, res.stderr, res.round_fractions, res.slots)


def run_cell(cfg: ExperimentConfig, snr_db: float, spec: PolicySpec) -> MetricsRecord:
    net = None
    if spec.learned:
        try:
            net = train_cell(cfg, snr_db, spec)[1].net
        except TrainingDiverged as exc:
            log.warning("snr %.1f dB, policy %s: %s", snr_db, spec.name, exc)
            nan = float("nan")
            return MetricsRecord(float(snr_db), spec.name, nan, nan, [nan] * cfg.env.t_max, 0,
                                 f"diverged: {exc}".replace(",", ";"))
    return evaluate_cell(cfg, snr_db, spec, net)


def _run_cell_args(args):
    return run_cell(*args)


def run_sweep(cfg: ExperimentConfig, snr_points: Sequence[float] | None = None,
              cell_runner: Callable = run_cell) -> list[MetricsRecord]:
    """Every (SNR, policy) cell, in (snr, policy) order regardless of completion order."""
    snrs = list(snr_points if snr_points is not None else cfg.sweep)
    if not snrs:
        raise ConfigError("sweep.snr_db: empty sweep")
    cells = [(cfg, snr, spec) for snr in snrs for spec in cfg.policies]
    if cfg.workers > 1 and cell_runner is run_cell:
        with ProcessPoolExecutor(cfg.workers) as pool:
            return list(pool.map(_run_cell_args, cells))
    return [cell_runner(*c) for c in cells]


def records_to_csv(records: Iterable[MetricsRecord], t_max: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(csv_header(t_max))
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def write_records(path, records: Iterable[MetricsRecord], t_max: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(records_to_csv(records, t_max))
    return path


def read_records(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        fracs = [float(r[k]) for k in sorted((k for k in r if k.startswith("frac_round_")),
                                            key=lambda k: int(k.rsplit("_", 1)[1]))]
        out.append(MetricsRecord(float(r["snr_db"]), r["policy"], float(r["mean_aoi"]),
                                 float(r["stderr"]), fracs, int(r["slots"]), r.get("status", "ok")))
    return out


def write_curve(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "mean_reward", "mean_weighted_aoi", "epsilon"])
        for ep, reward, aoi, eps in curve:
            w.writerow([ep, repr(float(reward)), repr(float(aoi)), repr(float(eps))])


# ---------------------------------------------------------------------------
# histogram and comparison

def retransmission_histogram(policy, env, slots: int, warmup: float = 0.1,
                             rng: np.random.Generator | None = None) -> list[float]:
    """Fractions of finished packages by final round count, T = 1..T_max."""
    if slots < 1000:
        raise ValueError(f"need at least 1000 slots, got {slots}")
    res = evaluate_policy(env, policy, horizon=slots, episodes=1, warmup=warmup, rng=rng)
    return res.round_fractions


@dataclass
class ComparisonRow:
    snr_db: float
    first: str
    second: str
    difference: float  # first - second
    stderr: float
    sign: int  # +1 / -1 when resolved at `z` standard errors, 0 for a tie


@dataclass
class CompareReport:
    rows: list[ComparisonRow]
    crossovers: list[tuple[str, str, float, float]]  # (first, second, snr_low, snr_high)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["snr_db", "first", "second", "difference", "stderr", "sign", "crossover"])
        flagged = {(a, b, hi) for a, b, _, hi in self.crossovers}
        for r in self.rows:
            w.writerow([_fmt(r.snr_db), r.first, r.second, repr(r.difference), repr(r.stderr), r.sign,
                        int((r.first, r.second, r.snr_db) in flagged)])
        return buf.getvalue()


def compare_report(paths: Sequence, z: float = 2.0) -> CompareReport:
    """Pairwise AoI differences between all policy series of the given CSVs.

    A difference counts as resolved when it exceeds ``z`` combined standard
    errors; a crossover is a sign flip between consecutive resolved SNRs.
    """
    series: dict[str, dict[float, MetricsRecord]] = {}
    header = None
    for p in paths:
        with open(p, newline="") as fh:
            h = next(csv.reader(fh))
        cols = [c for c in h if not c.startswith("frac_round_")]
        if header is not None and cols != header:
            raise ValueError(f"schema mismatch: {p} has columns {h}")
        header = cols
        tag = Path(p).stem
        for r in read_records(p):
            name = f"{tag}:{r.policy}" if len(paths) > 1 else r.policy
            series.setdefault(name, {})[r.snr_db] = r
    names = list(series)
    rows, crossovers = [], []
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            common = sorted(set(series[a]) & set(series[b]))
            prev = None
            for snr in common:
                ra, rb = series[a][snr], series[b][snr]
                diff = ra.mean_aoi - rb.mean_aoi
                se = math.hypot(ra.stderr, rb.stderr)
                sign = 0 if abs(diff) <= z * se else (1 if diff > 0 else -1)
                rows.append(ComparisonRow(snr, a, b, diff, se, sign))
                if sign:
                    if prev is not None and prev[1] != sign:
                        crossovers.append((a, b, prev[0], snr))
                    prev = (snr, sign)
    return CompareReport(rows, crossovers)
