"""Experiment runner: baselines, federated training, few-shot transfer, grid sweeps.

Output layout under ``<output_dir>/<run_id>/``:

``metrics.csv``
    one row per (seed, round, env); ``mean_daily_profit`` is the mean
    reward earned over that round's days, ``cumulative_profit`` the running
    total for the env.
``eval.csv``
    deterministic-policy evaluations, when ``eval_every > 0``.
``manifest.txt``
    resolved config plus content hashes, ``key=value`` per line.
``state_seed<N>.bin``
    final hypernetwork state (PFH runs), in codec framing.
"""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import (
    SWEEP_BOUNDS,
    ExperimentConfig,
    config_from_kv,
    config_hash,
    flat_items,
    git_blob_sha1,
)
from .env import MicrogridEnv, prices_to_actions
from .federation.hypernet import HypernetState, load_state, make_hypernet, save_state, transfer_init
from .federation.rounds import Algorithm, Client, FedConfig, ServerState, run_round, worker_count
from .ppo import LocalTrainer, evaluate, init_policy, policy_specs, theta_size
from .scenario import SynthSource, build_cluster

log = logging.getLogger(__name__)

METRICS_HEADER = ("run_id", "seed", "round", "day", "env_id", "mean_daily_profit", "cumulative_profit")
EVAL_HEADER = ("run_id", "seed", "round", "day", "env_id", "eval_profit")

TAG_POLICY = 11
TAG_TRAINER = 12
TAG_HNET = 13
TAG_TRANSFER = 14


@dataclass(frozen=True)
class MetricsRow:
    run_id: str
    seed: int
    round: int
    day: int
    env_id: int
    mean_daily_profit: float
    cumulative_profit: float

    def as_csv(self) -> list[str]:
        return [
            self.run_id, str(self.seed), str(self.round), str(self.day), str(self.env_id),
            repr(float(self.mean_daily_profit)), repr(float(self.cumulative_profit)),
        ]


@dataclass
class SeedResult:
    seed: int
    rows: list[MetricsRow]
    evals: list[tuple]
    state: HypernetState | None = None


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def build_envs(cfg: ExperimentConfig, id_offset: int = 0) -> list[MicrogridEnv]:
    source = SynthSource(cfg.load_scale) if cfg.profiles == "synth" else cfg.profiles
    return build_cluster(cfg.scenario, cfg.schedule, source, cfg.env, id_offset=id_offset)


def initial_mean_action(cfg: ExperimentConfig) -> np.ndarray | None:
    """Raw action whose prices equal the utility tariff, or None for a zero-centred start."""
    if cfg.policy_init == "zero":
        return None
    return prices_to_actions(cfg.schedule.price_day(), 2.0 * float(np.max(cfg.schedule.buy)))


def make_clients(cfg: ExperimentConfig, envs: list[MicrogridEnv], seed: int, init_theta: np.ndarray | None = None):
    specs = policy_specs(cfg.policy_hidden)
    policy = init_policy(specs, _rng(seed, TAG_POLICY), cfg.ppo.log_std_init, initial_mean_action(cfg))
    if init_theta is not None:
        policy = type(policy).from_theta(init_theta, specs)
    clients = []
    for env in envs:
        trainer = LocalTrainer.create(env, cfg.ppo, _rng(seed, TAG_TRAINER, env.env_id), cfg.value_hidden)
        clients.append(Client(env.env_id, trainer, policy, eval_days=0))
    return clients, policy


def new_hypernet(cfg: ExperimentConfig, theta0: np.ndarray, env_ids, seed: int) -> HypernetState:
    h = cfg.hnet
    return make_hypernet(
        theta0, env_ids, embed_dim=h.embed_dim, hidden=h.hidden, seed=_rng(seed, TAG_HNET),
        out_scale=h.out_scale, hnet_lr=h.lr, embed_lr=h.embed_lr, l2=h.l2, dropout=h.dropout,
    )


def _server_state(cfg: ExperimentConfig, algo: Algorithm, theta0, env_ids, seed, hypernet=None) -> ServerState:
    if algo == Algorithm.PFH:
        hypernet = new_hypernet(cfg, theta0, env_ids, seed) if hypernet is None else hypernet
        if hypernet.theta_dim != theta0.shape[0]:
            raise ValueError(f"hypernetwork emits {hypernet.theta_dim} params, policy needs {theta0.shape[0]}")
        return ServerState(algo, hypernet=hypernet, seed=seed)
    if algo == Algorithm.FEDAVG:
        return ServerState(algo, shared_theta=theta0.copy(), seed=seed)
    return ServerState(algo, seed=seed)


def train_federated(
    cfg: ExperimentConfig,
    seed: int,
    run_id: str,
    envs: list[MicrogridEnv] | None = None,
    hypernet: HypernetState | None = None,
) -> SeedResult:
    envs = build_envs(cfg) if envs is None else envs
    algo = cfg.fed.algorithm
    clients, policy = make_clients(cfg, envs, seed)
    state = _server_state(cfg, algo, policy.theta, [e.env_id for e in envs], seed, hypernet)
    fed = FedConfig(rounds=cfg.rounds, local_steps=cfg.local_steps, algorithm=algo)
    rows, evals = [], []
    cumulative = {c.env_id: 0.0 for c in clients}
    next_eval = cfg.eval_every
    for _ in range(fed.rounds):
        state, metrics = run_round(state, clients, fed)
        day = None
        for c in clients:
            rep = metrics["clients"][c.env_id]
            cumulative[c.env_id] += rep["total_reward"]
            day = rep["day_end"]
            rows.append(MetricsRow(run_id, seed, metrics["round"], day, c.env_id, rep["mean_reward"], cumulative[c.env_id]))
        if cfg.eval_every and day >= next_eval:
            next_eval += cfg.eval_every
            for c in clients:
                evals.append((run_id, seed, metrics["round"], day, c.env_id, evaluate(c.env, c.policy, cfg.eval_days)))
    return SeedResult(seed, rows, evals, state.hypernet)


def run_no_rl(cfg: ExperimentConfig, seed: int, run_id: str, envs=None) -> SeedResult:
    envs = build_envs(cfg) if envs is None else envs
    window = cfg.days_per_round
    rows = []
    for env in envs:
        cumulative = 0.0
        day = 0
        rnd = 0
        while day < cfg.horizon_days:
            n = min(window, cfg.horizon_days - day)
            total = sum(env.no_rl_step().reward for _ in range(n))
            day += n
            rnd += 1
            cumulative += total
            rows.append(MetricsRow(run_id, seed, rnd, day, env.env_id, total / n, cumulative))
    rows.sort(key=lambda r: (r.round, r.env_id))
    return SeedResult(seed, rows, [])


def run_seed(cfg: ExperimentConfig, seed: int, run_id: str) -> SeedResult:
    if cfg.algorithm == "NoRL":
        return run_no_rl(cfg, seed, run_id)
    return train_federated(cfg, seed, run_id)


# ----- output -------------------------------------------------------------------


def _limit_threads() -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")


def _parallel_map(fn, args_list, workers: int):
    """Ordered map over processes; results come back in input order."""
    if workers <= 1 or len(args_list) <= 1:
        return [fn(*a) for a in args_list]
    _limit_threads()
    with ProcessPoolExecutor(max_workers=min(workers, len(args_list))) as pool:
        futures = [pool.submit(fn, *a) for a in args_list]
        return [f.result() for f in futures]


def metrics_csv_bytes(rows: list[MetricsRow]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow(r.as_csv())
    return buf.getvalue().encode()


def read_metrics(path: str | Path) -> list[MetricsRow]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            MetricsRow(r["run_id"], int(r["seed"]), int(r["round"]), int(r["day"]), int(r["env_id"]),
                       float(r["mean_daily_profit"]), float(r["cumulative_profit"]))
            for r in reader
        ]


def run_id_for(cfg: ExperimentConfig) -> str:
    return f"{cfg.algorithm}-{config_hash(cfg)[:12]}"


def _write_outputs(out: Path, run_id: str, cfg: ExperimentConfig, results: list[SeedResult], extra=None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    rows = [r for res in results for r in res.rows]
    data = metrics_csv_bytes(rows)
    metrics_path = out / "metrics.csv"
    metrics_path.write_bytes(data)
    evals = [e for res in results for e in res.evals]
    if evals:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(EVAL_HEADER)
        for e in evals:
            w.writerow([*map(str, e[:5]), repr(float(e[5]))])
        (out / "eval.csv").write_text(buf.getvalue())
    manifest = [("run_id", run_id), *flat_items(cfg), ("config_hash", config_hash(cfg)),
                ("metrics_sha1", git_blob_sha1(data))]
    manifest += list(extra or [])
    (out / "manifest.txt").write_text("".join(f"{k}={v}\n" for k, v in manifest))
    return metrics_path


def run_experiment(cfg: ExperimentConfig, workers: int | None = None) -> Path:
    """Run every seed of ``cfg`` and write metrics, manifest and final states."""
    workers = worker_count() if workers is None else workers
    run_id = run_id_for(cfg)
    out = Path(cfg.output_dir) / run_id
    log.info("run %s: %s, %d seeds, %d rounds", run_id, cfg.algorithm, len(cfg.seeds), cfg.rounds)
    results = _parallel_map(run_seed, [(cfg, s, run_id) for s in cfg.seeds], workers)
    path = _write_outputs(out, run_id, cfg, results)
    for res in results:
        if res.state is not None:
            save_state(res.state, out / f"state_seed{res.seed}.bin")
    return path


# ----- transfer -------------------------------------------------------------------


def resolve_state_path(path: str | Path, seed: int) -> Path:
    path = Path(path)
    if path.is_dir():
        path = path / f"state_seed{seed}.bin"
    if not path.exists():
        raise FileNotFoundError(f"pretrained state {path} not found")
    return path


def transfer_seed(cfg: ExperimentConfig, seed: int, run_id: str, state_path: str) -> list[SeedResult]:
    """Paired arms on a fresh cluster: pretrained phi vs freshly initialised phi."""
    pretrained = load_state(resolve_state_path(state_path, seed))
    specs = policy_specs(cfg.policy_hidden)
    if pretrained.theta_dim != theta_size(specs):
        raise ValueError(
            f"pretrained hypernetwork emits {pretrained.theta_dim} params; policy.hidden needs {theta_size(specs)}"
        )
    offset = max(pretrained.env_ids, default=-1) + 1
    pfh_cfg = replace(cfg, algorithm="PFH")
    new_ids = [offset + m for m in range(cfg.scenario.n_microgrids)]

    warm = transfer_init(pretrained, new_ids, _rng(seed, TAG_TRANSFER))
    warm_res = train_federated(pfh_cfg, seed, f"{run_id}-pretrained", build_envs(cfg, offset), hypernet=_subset(warm, new_ids))

    hidden = tuple(s.output_dim for s in pretrained.phi.specs[:-1])
    base_cfg = replace(pfh_cfg, hnet=replace(cfg.hnet, embed_dim=pretrained.embed_dim, hidden=hidden,
                                             lr=pretrained.hnet_lr, embed_lr=pretrained.v_lr,
                                             l2=pretrained.l2, dropout=pretrained.dropout))
    _, policy = make_clients(base_cfg, [], seed)
    fresh = new_hypernet(base_cfg, policy.theta, new_ids, seed)
    base_res = train_federated(base_cfg, seed, f"{run_id}-baseline", build_envs(cfg, offset), hypernet=fresh)
    return [warm_res, base_res]


def _subset(h: HypernetState, env_ids) -> HypernetState:
    return replace(h, embeddings={e: h.embeddings[e] for e in env_ids})


def run_transfer(cfg: ExperimentConfig, pretrained_state_path: str | Path, workers: int | None = None) -> Path:
    """Few-shot transfer; both arms land in one metrics file tagged by run_id suffix."""
    workers = worker_count() if workers is None else workers
    for s in cfg.seeds:
        resolve_state_path(pretrained_state_path, s)
    run_id = f"transfer-{config_hash(cfg)[:12]}"
    out = Path(cfg.output_dir) / run_id
    per_seed = _parallel_map(transfer_seed, [(cfg, s, run_id, str(pretrained_state_path)) for s in cfg.seeds], workers)
    results = [r for pair in per_seed for r in pair]
    return _write_outputs(out, run_id, cfg, results, extra=[("pretrained_state", str(pretrained_state_path))])


# ----- analysis helpers --------------------------------------------------------------


def round_means(rows: list[MetricsRow], run_id: str | None = None) -> dict[tuple[int, int], float]:
    """Mean over envs of ``mean_daily_profit`` keyed by ``(seed, round)``."""
    acc: dict[tuple[int, int], list[float]] = {}
    for r in rows:
        if run_id is None or r.run_id == run_id:
            acc.setdefault((r.seed, r.round), []).append(r.mean_daily_profit)
    return {k: float(np.mean(v)) for k, v in sorted(acc.items())}


def rounds_to_reach(curve: list[float], threshold: float) -> int | None:
    """1-based index of the first round at or above ``threshold``."""
    for k, v in enumerate(curve, start=1):
        if v >= threshold:
            return k
    return None


def profit_above_baseline(rows: list[MetricsRow], baseline_rows: list[MetricsRow]) -> dict[tuple[int, int], float]:
    """Final cumulative profit minus the NoRL baseline's, per (seed, env)."""

    def final(rs):
        out = {}
        for r in rs:
            out[(r.seed, r.env_id)] = r.cumulative_profit
        return out

    a, b = final(rows), final(baseline_rows)
    return {k: a[k] - b[k] for k in a if k in b}


# ----- grid sweep ------------------------------------------------------------------


def grid_points(key: str, n: int) -> list:
    """``n`` grid points spanning the sweep bounds for ``key`` (geometric for log scales)."""
    lo, hi, dist = SWEEP_BOUNDS[key]
    if n == 1:
        pts = [math.sqrt(lo * hi) if "log" in dist else 0.5 * (lo + hi)]
    elif "log" in dist:
        pts = list(np.geomspace(lo, hi, n))
    else:
        pts = list(np.linspace(lo, hi, n))
    if dist.startswith("int"):
        pts = sorted(set(int(math.floor(p)) for p in pts))
    return [float(p) if not dist.startswith("int") else p for p in pts]


# sweep key -> the config key it sets (None for keys that need special handling)
_SWEEP_TARGETS = {
    "ppo.batch_size": "ppo.batch_size",
    "ppo.learning_rate": "ppo.learning_rate",
    "ppo.clip_param": "ppo.clip_param",
    "ppo.sgd_iters": "ppo.sgd_iters",
    "fedavg.local_steps": "local_steps",
    "pfh.local_steps": "local_steps",
    "hnet.dropout": "hnet.dropout",
    "hnet.embed_dim": "hnet.embed_dim",
    "hnet.l2": "hnet.l2",
    "hnet.lr": "hnet.lr",
}


def _sweep_override(cfg: ExperimentConfig, key: str, value) -> dict[str, str]:
    if key in _SWEEP_TARGETS:
        v = min(value, 0.999) if key == "hnet.dropout" else value
        return {_SWEEP_TARGETS[key]: str(v)}
    if key == "policy.layers":
        width = cfg.policy_hidden[0] if cfg.policy_hidden else 32
        return {"policy.hidden": ",".join([str(width)] * int(value))}
    if key == "policy.width":
        return {"policy.hidden": ",".join([str(int(value))] * max(1, len(cfg.policy_hidden)))}
    if key == "hnet.layers":
        width = cfg.hnet.hidden[0] if cfg.hnet.hidden else 64
        return {"hnet.hidden": ",".join([str(width)] * int(value))}
    if key == "hnet.width":
        return {"hnet.hidden": ",".join([str(int(value))] * max(1, len(cfg.hnet.hidden)))}
    raise KeyError(key)


def sweep_grid(base_kv: dict[str, str], axes: dict[str, int], workers: int | None = None) -> Path:
    """Deterministic grid over sweep bounds; writes ``sweep.csv`` next to the runs."""
    base = config_from_kv(base_kv)
    for key in axes:
        if key not in SWEEP_BOUNDS:
            raise KeyError(f"unknown sweep parameter {key!r}; choose from {', '.join(SWEEP_BOUNDS)}")
    grids = {k: grid_points(k, n) for k, n in axes.items()}
    lines = [",".join([*grids, "run_id", "final_mean_daily_profit", "cumulative_profit"])]
    for combo in itertools.product(*grids.values()):
        kv = dict(base_kv)
        for key, value in zip(grids, combo):
            kv.update(_sweep_override(base, key, value))
        cfg = config_from_kv(kv)
        path = run_experiment(cfg, workers)
        rows = read_metrics(path)
        last = max(r.round for r in rows)
        final = float(np.mean([r.mean_daily_profit for r in rows if r.round == last]))
        cum = float(np.mean([r.cumulative_profit for r in rows if r.round == last]))
        lines.append(",".join([*(str(v) for v in combo), run_id_for(cfg), repr(final), repr(cum)]))
    out = Path(base.output_dir) / "sweep.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")
    return out
