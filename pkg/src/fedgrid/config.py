"""Experiment configuration: dataclasses, flat ``key = value`` files, validation.

Keys are dotted (``ppo.clip_param``, ``scenario.sigma``, ``hnet.embed_dim``).
Structural problems are errors; values outside the hyperparameter sweep
bounds in :data:`SWEEP_BOUNDS` are reported as warnings.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

from .federation.rounds import Algorithm, FedConfig
from .ppo import PpoConfig
from .scenario import (
    SCHEDULE_KEYS,
    ConfigError,
    DiversitySpec,
    EnvOptions,
    UtilitySchedule,
    parse_kv_text,
    scenario_from_kv,
    tou_schedule,
)

ALGORITHMS = ("PFH", "FedAvg", "LocalOnly", "NoRL")


@dataclass(frozen=True)
class HnetConfig:
    embed_dim: int = 16
    hidden: tuple[int, ...] = (64,)
    lr: float = 0.2
    embed_lr: float | None = None
    dropout: float = 0.0
    l2: float = 0.0
    out_scale: float = 0.1


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: DiversitySpec = DiversitySpec(n_prosumers=4, n_microgrids=5)
    schedule: UtilitySchedule = field(default_factory=tou_schedule)
    algorithm: str = "PFH"
    local_steps: int = 1
    ppo: PpoConfig = PpoConfig(gamma=0.0, entropy_coef=0.0)
    hnet: HnetConfig = HnetConfig()
    policy_hidden: tuple[int, ...] = (32,)
    policy_init: str = "utility"  # initial mean prices: "utility" tariff or "zero" (mid-range)
    value_hidden: tuple[int, ...] = (64,)
    env: EnvOptions = EnvOptions()
    profiles: str = "synth"
    load_scale: float = 30.0
    horizon_days: int = 2000
    eval_every: int = 0  # days between deterministic evaluations; 0 disables
    eval_days: int = 30
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "runs"

    @property
    def days_per_round(self) -> int:
        return self.local_steps * self.ppo.batch_size

    @property
    def rounds(self) -> int:
        return self.horizon_days // self.days_per_round

    @property
    def fed(self) -> FedConfig:
        algo = Algorithm.LOCAL_ONLY if self.algorithm == "NoRL" else Algorithm(self.algorithm)
        return FedConfig(rounds=max(1, self.rounds), local_steps=self.local_steps, algorithm=algo)


# Hyperparameter sweep bounds: key -> (low, high, distribution)
SWEEP_BOUNDS = {
    "ppo.batch_size": (16, math.floor(math.e**8), "int_uniform"),
    "ppo.learning_rate": (math.e**-8, 1.0, "log_uniform"),
    "policy.layers": (1, 7, "int_uniform"),
    "policy.width": (1, math.floor(math.e**7), "int_log_uniform"),
    "ppo.clip_param": (0.01, 1.0, "uniform"),
    "ppo.sgd_iters": (1, 30, "int_uniform"),
    "fedavg.local_steps": (2, math.floor(math.e**6), "int_log_uniform"),
    "hnet.dropout": (math.e**-10, 1.0, "log_uniform"),
    "hnet.embed_dim": (1, 512, "int_uniform"),
    "hnet.l2": (math.e**-10, 1.0, "log_uniform"),
    "hnet.lr": (math.e**-4, 1.0, "log_uniform"),
    "hnet.layers": (1, 6, "int_uniform"),
    "hnet.width": (1, 1024, "int_uniform"),
    "pfh.local_steps": (1, 100, "int_uniform"),
}


# ----- flat key mapping ----------------------------------------------------------

_SECTIONS = {"ppo": "ppo", "hnet": "hnet", "env": "env"}
_TOP = {
    "algorithm", "local_steps", "profiles", "load_scale", "horizon_days", "eval_every",
    "eval_days", "seeds", "output_dir", "policy_init",
}
_ALIASES = {
    "fed.local_steps": "local_steps",
    "policy.hidden": "policy_hidden",
    "value.hidden": "value_hidden",
}


def _int_tuple(value: str) -> tuple[int, ...]:
    value = value.strip()
    if value in ("", "()"):
        return ()
    return tuple(int(x) for x in value.strip("()").split(",") if x.strip())


def _parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _cast(default, value: str, name: str):
    if name in ("hidden", "policy_hidden", "value_hidden", "seeds"):
        return _int_tuple(value)
    if name in ("embed_lr", "horizon") and value.strip().lower() in ("none", ""):
        return None
    if isinstance(default, bool):
        return _parse_bool(value)
    if isinstance(default, int) and not isinstance(default, bool):
        return int(value)
    if isinstance(default, float) or name in ("embed_lr",):
        return float(value)
    if name == "horizon":
        return int(value)
    return value


def _apply_section(obj, kv: dict[str, str], problems: list[str], prefix: str):
    kw = {}
    names = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in kv.items():
        if key not in names:
            problems.append(f"unknown key {prefix}.{key}")
            continue
        try:
            kw[key] = _cast(getattr(obj, key), value, key)
        except ValueError as exc:
            problems.append(f"{prefix}.{key}: {exc}")
    try:
        return replace(obj, **kw)
    except (ValueError, TypeError) as exc:
        problems.append(f"{prefix}: {exc}")
        return obj


def config_from_kv(kv: dict[str, str], base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Resolve flat keys over ``base`` (defaults when omitted); collects every problem."""
    cfg = ExperimentConfig() if base is None else base
    problems: list[str] = []
    sections: dict[str, dict[str, str]] = {"ppo": {}, "hnet": {}, "env": {}, "scenario": {}}
    top: dict[str, str] = {}
    for key, value in kv.items():
        key = _ALIASES.get(key, key)
        if "." in key:
            sec, sub = key.split(".", 1)
            if sec == "schedule":
                sec, sub = "scenario", sub
            if sec not in sections:
                problems.append(f"unknown key {key}")
                continue
            sections[sec][sub] = value
        elif key in _TOP or key in ("policy_hidden", "value_hidden"):
            top[key] = value
        else:
            problems.append(f"unknown key {key}")

    if sections["scenario"]:
        scen_kv = {f.name: str(getattr(cfg.scenario, f.name)) for f in dataclasses.fields(DiversitySpec)}
        scen_kv.update(sections["scenario"])
        sched_given = {k: v for k, v in sections["scenario"].items() if k in SCHEDULE_KEYS}
        try:
            spec, schedule = scenario_from_kv(scen_kv)
            cfg = replace(cfg, scenario=spec, schedule=schedule if sched_given else cfg.schedule)
        except ConfigError as exc:
            problems.extend(exc.problems)

    for sec in _SECTIONS:
        if sections[sec]:
            cfg = replace(cfg, **{sec: _apply_section(getattr(cfg, sec), sections[sec], problems, sec)})

    kw = {}
    for key, value in top.items():
        try:
            kw[key] = _cast(getattr(cfg, key), value, key)
        except ValueError as exc:
            problems.append(f"{key}: {exc}")
    cfg = replace(cfg, **kw)
    problems.extend(validate(cfg))
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    kv: dict[str, str] = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from None
        kv.update(parse_kv_text(text, str(path)))
    kv.update(overrides or {})
    return config_from_kv(kv)


def validate(cfg: ExperimentConfig) -> list[str]:
    """Structural errors (empty list when the config is runnable)."""
    problems = []
    if cfg.algorithm not in ALGORITHMS:
        problems.append(f"algorithm must be one of {', '.join(ALGORITHMS)}, got {cfg.algorithm!r}")
    if cfg.policy_init not in ("utility", "zero"):
        problems.append(f"policy_init must be utility or zero, got {cfg.policy_init!r}")
    if cfg.local_steps < 1:
        problems.append("local_steps must be >= 1")
    if cfg.horizon_days < 1:
        problems.append("horizon_days must be >= 1")
    elif cfg.algorithm != "NoRL" and cfg.local_steps >= 1 and cfg.horizon_days < cfg.days_per_round:
        problems.append(
            f"horizon_days {cfg.horizon_days} shorter than one round ({cfg.days_per_round} days)"
        )
    if cfg.eval_every < 0 or cfg.eval_every > cfg.horizon_days:
        problems.append("eval_every must lie in [0, horizon_days]")
    if cfg.eval_days < 1:
        problems.append("eval_days must be >= 1")
    if not cfg.seeds:
        problems.append("at least one seed is required")
    if any(w < 1 for w in cfg.policy_hidden + cfg.value_hidden + cfg.hnet.hidden):
        problems.append("hidden widths must be >= 1")
    if cfg.hnet.embed_dim < 1:
        problems.append("hnet.embed_dim must be >= 1")
    if not 0.0 <= cfg.hnet.dropout < 1.0:
        problems.append("hnet.dropout must lie in [0, 1)")
    if cfg.hnet.l2 < 0 or cfg.hnet.lr <= 0:
        problems.append("hnet.l2 must be >= 0 and hnet.lr > 0")
    if cfg.env.soc_levels < 2:
        problems.append("env.soc_levels must be >= 2")
    if cfg.env.soc_mode not in ("reset", "carry"):
        problems.append("env.soc_mode must be reset or carry")
    if not 0.0 <= cfg.env.power_ratio <= 1.0:
        problems.append("env.power_ratio must lie in [0, 1]")
    if cfg.profiles != "synth" and not Path(cfg.profiles).exists():
        problems.append(f"profiles path {cfg.profiles} does not exist")
    if cfg.load_scale < 0:
        problems.append("load_scale must be >= 0")
    return problems


def sweep_values(cfg: ExperimentConfig) -> dict[str, float]:
    """Current values of every swept hyperparameter, keyed like :data:`SWEEP_BOUNDS`."""
    local_key = "pfh.local_steps" if cfg.algorithm == "PFH" else "fedavg.local_steps"
    out = {
        "ppo.batch_size": cfg.ppo.batch_size,
        "ppo.learning_rate": cfg.ppo.learning_rate,
        "policy.layers": len(cfg.policy_hidden),
        "ppo.clip_param": cfg.ppo.clip_param,
        "ppo.sgd_iters": cfg.ppo.sgd_iters,
    }
    if cfg.policy_hidden:
        out["policy.width"] = max(cfg.policy_hidden)
    if cfg.algorithm in ("PFH", "FedAvg"):
        out[local_key] = cfg.local_steps
    if cfg.algorithm == "PFH":
        out.update({
            "hnet.embed_dim": cfg.hnet.embed_dim,
            "hnet.lr": cfg.hnet.lr,
            "hnet.layers": len(cfg.hnet.hidden),
        })
        if cfg.hnet.hidden:
            out["hnet.width"] = max(cfg.hnet.hidden)
        if cfg.hnet.dropout > 0:
            out["hnet.dropout"] = cfg.hnet.dropout
        if cfg.hnet.l2 > 0:
            out["hnet.l2"] = cfg.hnet.l2
    return out


def bound_warnings(cfg: ExperimentConfig) -> list[str]:
    warnings = []
    for key, value in sweep_values(cfg).items():
        lo, hi, _ = SWEEP_BOUNDS[key]
        if not lo <= value <= hi:
            warnings.append(f"{key}={value} outside sweep bounds [{lo:g}, {hi:g}]")
    return warnings


def flat_items(cfg: ExperimentConfig) -> list[tuple[str, str]]:
    """Fully resolved config as sorted ``(key, value)`` pairs."""

    def fmt(v) -> str:
        if isinstance(v, tuple):
            return ",".join(str(x) for x in v)
        if isinstance(v, float):
            return repr(v)
        return str(v)

    items = []
    for name in sorted(_TOP):
        items.append((name, fmt(getattr(cfg, name))))
    items.append(("policy.hidden", fmt(cfg.policy_hidden)))
    items.append(("value.hidden", fmt(cfg.value_hidden)))
    for sec in ("ppo", "hnet", "env", "scenario"):
        obj = getattr(cfg, sec)
        for f in dataclasses.fields(obj):
            items.append((f"{sec}.{f.name}", fmt(getattr(obj, f.name))))
    items.append(("schedule.buy", ",".join(repr(float(x)) for x in cfg.schedule.buy)))
    items.append(("schedule.sell_prices", ",".join(repr(float(x)) for x in cfg.schedule.sell)))
    return sorted(items)


def resolved_text(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in flat_items(cfg))


def git_blob_sha1(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def config_hash(cfg: ExperimentConfig) -> str:
    """Content hash of the resolved config; seeds and output_dir are excluded."""
    text = "".join(
        f"{k} = {v}\n" for k, v in flat_items(cfg) if k not in ("seeds", "output_dir")
    )
    return git_blob_sha1(text.encode())
