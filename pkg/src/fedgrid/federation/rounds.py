"""Round orchestration for FedAvg, PFH and local-only training.

The coordinator talks to clients exclusively through :class:`RoundMessage`
values. In-process clients still push every message through the binary
codec, so the same bytes cross the boundary as over a socket.
"""

from __future__ import annotations

import enum
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from ..ppo import LocalTrainer, Policy, evaluate
from .codec import MessageKind, RoundMessage, decode, encode
from .fedavg import fedavg_aggregate
from .hypernet import HypernetState, dropout_masks, hnet_forward, pfh_update

SHUTDOWN_ROUND = 2**32 - 1


class Algorithm(str, enum.Enum):
    FEDAVG = "FedAvg"
    PFH = "PFH"
    LOCAL_ONLY = "LocalOnly"


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 10
    local_steps: int = 1
    algorithm: Algorithm = Algorithm.PFH

    def __post_init__(self) -> None:
        if self.rounds < 1 or self.local_steps < 1:
            raise ValueError("rounds and local_steps must be >= 1")
        object.__setattr__(self, "algorithm", Algorithm(self.algorithm))


class ProtocolError(RuntimeError):
    pass


class RoundAbortedError(RuntimeError):
    """A client failed; no aggregation was applied for this round."""

    def __init__(self, round_idx: int, failed: dict[int, str], partial: dict):
        super().__init__(f"round {round_idx} aborted; failed clients: {failed}")
        self.round = round_idx
        self.failed = failed
        self.partial = partial


@dataclass(frozen=True)
class ServerState:
    algorithm: Algorithm
    round: int = 0
    hypernet: HypernetState | None = None
    shared_theta: np.ndarray | None = None
    seed: int = 0

    def params_for(self, env_id: int, masks=None) -> np.ndarray:
        if self.algorithm == Algorithm.PFH:
            return hnet_forward(self.hypernet, env_id, masks)
        if self.algorithm == Algorithm.FEDAVG:
            return self.shared_theta
        raise ProtocolError("LocalOnly servers emit no parameters")


class Client:
    """In-process client: owns one environment, its trainer and its local policy."""

    def __init__(self, env_id: int, trainer: LocalTrainer, policy: Policy, eval_days: int = 0):
        self.env_id = env_id
        self.trainer = trainer
        self.policy = policy
        self.eval_days = eval_days
        self.last_report: dict = {}
        self.received: list[np.ndarray] = []

    @property
    def env(self):
        return self.trainer.env

    def register_message(self) -> RoundMessage:
        return RoundMessage(MessageKind.REGISTER, 0, self.env_id, np.array([float(self.policy.theta.shape[0])]))

    def _train(self, round_idx: int, local_steps: int) -> None:
        day0 = self.env.steps
        self.policy, rewards = self.trainer.train(self.policy, local_steps)
        report = {
            "round": round_idx,
            "env_id": self.env_id,
            "days": len(rewards),
            "day_end": day0 + len(rewards),
            "mean_reward": float(np.mean(rewards)),
            "total_reward": float(np.sum(rewards)),
        }
        if self.eval_days:
            report["eval_reward"] = evaluate(self.env, self.policy, self.eval_days)
        self.last_report = report

    def handle(self, msg: RoundMessage, local_steps: int) -> RoundMessage:
        if msg.kind != MessageKind.PARAMS_DOWN or msg.env_id != self.env_id:
            raise ProtocolError(f"client {self.env_id} got unexpected {msg.kind.name} for env {msg.env_id}")
        theta = msg.payload.copy()
        self.received.append(theta)
        self.policy = Policy.from_theta(theta, self.policy.specs)
        self._train(msg.round, local_steps)
        delta = self.policy.theta - theta
        return RoundMessage(MessageKind.DELTA_UP, msg.round, self.env_id, delta)

    def exchange(self, msg: RoundMessage, local_steps: int) -> RoundMessage:
        reply = self.handle(decode(encode(msg)), local_steps)
        return decode(encode(reply))

    def train_local(self, round_idx: int, local_steps: int) -> None:
        self._train(round_idx, local_steps)

    def report(self) -> dict:
        return dict(self.last_report)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("FEDGRID_THREADS", "1")))
    except ValueError:
        return 1


def _map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [_guard(fn, x) for x in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(lambda x: _guard(fn, x), items))


def _guard(fn, x):
    try:
        return fn(x), None
    except Exception as exc:  # noqa: BLE001 - reported through RoundAbortedError
        return None, f"{type(exc).__name__}: {exc}"


def run_round(
    state: ServerState, clients: Sequence, cfg: FedConfig, workers: int | None = None
) -> tuple[ServerState, dict]:
    """One federation round with full participation.

    Returns the new server state and ``{"round": r, "clients": {env_id: report}}``.
    """
    workers = worker_count() if workers is None else workers
    r = state.round + 1
    ids = [c.env_id for c in clients]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate client env ids {ids}")

    if cfg.algorithm == Algorithm.LOCAL_ONLY:
        results = _map(lambda c: c.train_local(r, cfg.local_steps), list(clients), workers)
        failed = {c.env_id: err for c, (_, err) in zip(clients, results) if err}
        reports = {c.env_id: c.report() for c, (_, err) in zip(clients, results) if not err}
        if failed:
            raise RoundAbortedError(r, failed, {"round": r, "clients": reports})
        return replace(state, round=r), {"round": r, "clients": reports}

    if cfg.algorithm == Algorithm.PFH:
        missing = [e for e in ids if e not in state.hypernet.embeddings]
        if missing:
            raise ProtocolError(f"clients {missing} have no embedding")
        mask_rng = np.random.default_rng([state.seed, r])
        masks = {e: dropout_masks(state.hypernet, mask_rng) for e in sorted(ids)}
    else:
        masks = {e: None for e in ids}

    def exchange(c):
        down = RoundMessage(MessageKind.PARAMS_DOWN, r, c.env_id, state.params_for(c.env_id, masks[c.env_id]))
        up = c.exchange(down, cfg.local_steps)
        if up.kind != MessageKind.DELTA_UP or up.env_id != c.env_id or up.round != r:
            raise ProtocolError(f"bad reply from env {c.env_id}: {up.kind.name} round {up.round}")
        if up.payload.shape != down.payload.shape:
            raise ProtocolError(f"env {c.env_id} delta has length {up.payload.shape[0]}")
        return up.payload

    results = _map(exchange, list(clients), workers)
    failed = {c.env_id: err for c, (_, err) in zip(clients, results) if err}
    reports = {c.env_id: c.report() for c in clients if hasattr(c, "report")}
    metrics = {"round": r, "clients": reports}
    if failed:
        raise RoundAbortedError(r, failed, metrics)
    deltas = {c.env_id: d for c, (d, _) in zip(clients, results)}
    metrics["delta_norm"] = {e: float(np.linalg.norm(d)) for e, d in deltas.items()}

    if cfg.algorithm == Algorithm.PFH:
        new_state = replace(state, round=r, hypernet=pfh_update(state.hypernet, deltas, masks))
    else:
        trained = [state.shared_theta + deltas[e] for e in sorted(deltas)]
        new_state = replace(state, round=r, shared_theta=fedavg_aggregate(trained))
    return new_state, metrics
