"""Personalized federated hypernetwork: server-side state and updates.

The server holds a hypernetwork mapping a per-environment embedding to the
flat policy vector theta. After local training a client reports
``delta = theta_trained - theta_sent``; the server moves phi (and the
client's embedding) along the vector-Jacobian product ``J^T delta``, which
moves the emitted theta toward the trained one. This is gradient descent on
the surrogate ``-<H_phi(v), delta>``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .. import nn
from .codec import CodecError, MessageKind, RoundMessage, decode_stream, encode

STATE_ENV_ID = 2**32 - 1  # env_id marking hypernetwork-level frames in state files
_ACT_CODES = {name: k for k, name in enumerate(nn.ACTIVATIONS)}


class UnknownEnvError(KeyError):
    pass


@dataclass(frozen=True)
class HypernetState:
    phi: nn.ParamVector
    embeddings: Mapping[int, np.ndarray]
    hnet_lr: float = 0.05
    embed_lr: float | None = None  # defaults to hnet_lr
    l2: float = 0.0
    dropout: float = 0.0

    def __post_init__(self) -> None:
        emb = {int(k): np.asarray(v, dtype=np.float64) for k, v in self.embeddings.items()}
        for k, v in emb.items():
            if v.shape != (self.embed_dim,):
                raise nn.ShapeError(f"embedding for env {k} has shape {v.shape}, expected ({self.embed_dim},)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        object.__setattr__(self, "embeddings", emb)

    @property
    def embed_dim(self) -> int:
        return self.phi.input_dim

    @property
    def theta_dim(self) -> int:
        return self.phi.output_dim

    @property
    def env_ids(self) -> list[int]:
        return sorted(self.embeddings)

    @property
    def v_lr(self) -> float:
        return self.hnet_lr if self.embed_lr is None else self.embed_lr

    def embedding(self, env_id: int) -> np.ndarray:
        try:
            return self.embeddings[env_id]
        except KeyError:
            raise UnknownEnvError(env_id) from None


def make_hypernet(
    theta_init: np.ndarray,
    env_ids: Sequence[int],
    embed_dim: int = 16,
    hidden: Sequence[int] = (64,),
    seed: int | np.random.Generator = 0,
    out_scale: float = 0.1,
    **kwargs,
) -> HypernetState:
    """Hypernetwork whose output for every embedding starts near ``theta_init``.

    The output bias is set to ``theta_init`` and the output weights are
    scaled by ``out_scale``, so environments start from a standard policy
    initialisation plus a small embedding-dependent perturbation.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    theta_init = np.asarray(theta_init, dtype=np.float64)
    specs = nn.mlp_specs([embed_dim, *hidden, theta_init.shape[0]])
    phi = nn.mlp_init(specs, rng)
    w, b = phi.unflatten()[-1]
    w *= out_scale
    b[:] = theta_init
    emb = {int(e): rng.standard_normal(embed_dim) for e in env_ids}
    return HypernetState(phi, emb, **kwargs)


def dropout_masks(h: HypernetState, rng: np.random.Generator) -> list[np.ndarray] | None:
    if h.dropout <= 0.0:
        return None
    keep = 1.0 - h.dropout
    return [
        (rng.random(s.output_dim) < keep).astype(np.float64) / keep for s in h.phi.specs[:-1]
    ]


def hnet_forward(h: HypernetState, env_id: int, masks=None) -> np.ndarray:
    """Flat policy vector for ``env_id``."""
    return nn.mlp_forward(h.phi, h.embedding(env_id), masks)


def hnet_vjp(h: HypernetState, env_id: int, delta: np.ndarray, masks=None) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``<H_phi(v), delta>`` w.r.t. phi and the env's embedding."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (h.theta_dim,):
        raise nn.ShapeError(f"delta for env {env_id} has shape {delta.shape}, expected ({h.theta_dim},)")
    return nn.mlp_backward(h.phi, h.embedding(env_id), delta, masks)


def pfh_update(
    h: HypernetState,
    deltas: Mapping[int, np.ndarray],
    masks: Mapping[int, list[np.ndarray] | None] | None = None,
) -> HypernetState:
    """One hypernetwork step from the per-environment deltas of a round.

    phi moves by ``hnet_lr`` times the delta-weighted VJP averaged over the
    participating environments (minus the L2 term); each embedding moves by
    ``embed_lr`` times its own VJP. All gradients are taken at the old state.
    """
    if not deltas:
        return h
    n = len(deltas)
    acc = np.zeros_like(h.phi.values)
    embeddings = dict(h.embeddings)
    for env_id in sorted(deltas):
        m = None if masks is None else masks.get(env_id)
        g_phi, g_v = hnet_vjp(h, env_id, deltas[env_id], m)
        acc += g_phi / n
        embeddings[env_id] = h.embeddings[env_id] + h.v_lr * g_v
    step = acc - h.l2 * h.phi.values if h.l2 else acc
    phi = h.phi.with_values(h.phi.values + h.hnet_lr * step)
    return replace(h, phi=phi, embeddings=embeddings)


def transfer_init(
    pretrained: HypernetState, new_env_ids: Sequence[int], seed: int | np.random.Generator = 0
) -> HypernetState:
    """Keep phi and add embeddings for unseen environments.

    New embeddings start at the mean pretrained embedding plus Gaussian
    noise with standard deviation ``0.01 * |mean|``.
    """
    new_env_ids = [int(e) for e in new_env_ids]
    if not new_env_ids:
        return pretrained
    clash = sorted(set(new_env_ids) & set(pretrained.embeddings))
    if clash or len(set(new_env_ids)) != len(new_env_ids):
        raise ValueError(f"env id collision: {clash or new_env_ids}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if pretrained.embeddings:
        center = np.mean(np.stack([pretrained.embeddings[k] for k in pretrained.env_ids]), axis=0)
    else:
        center = np.zeros(pretrained.embed_dim)
    scale = 0.01 * (float(np.linalg.norm(center)) or 1.0)
    embeddings = dict(pretrained.embeddings)
    for e in new_env_ids:
        embeddings[e] = center + scale * rng.standard_normal(pretrained.embed_dim)
    return replace(pretrained, embeddings=embeddings)


# ----- persistence -----------------------------------------------------------


def state_frames(h: HypernetState) -> list[RoundMessage]:
    layout = []
    for s in h.phi.specs:
        layout += [s.input_dim, s.output_dim, _ACT_CODES[s.activation]]
    hyper = [h.hnet_lr, h.v_lr, h.l2, h.dropout]
    frames = [
        RoundMessage(MessageKind.REGISTER, 0, STATE_ENV_ID, np.array(layout + hyper, dtype=np.float64)),
        RoundMessage(MessageKind.PARAMS_DOWN, 0, STATE_ENV_ID, h.phi.values),
    ]
    frames += [RoundMessage(MessageKind.PARAMS_DOWN, 0, e, h.embeddings[e]) for e in h.env_ids]
    return frames


def save_state(h: HypernetState, path: str | Path) -> None:
    """Concatenated codec frames: layout header, phi, then one frame per embedding."""
    Path(path).write_bytes(b"".join(encode(m) for m in state_frames(h)))


def load_state(path: str | Path) -> HypernetState:
    frames = decode_stream(Path(path).read_bytes())
    if len(frames) < 2 or frames[0].kind != MessageKind.REGISTER or frames[0].env_id != STATE_ENV_ID:
        raise CodecError(f"{path}: not a hypernetwork state file")
    head = frames[0].payload
    n_layers = (len(head) - 4) // 3
    if len(head) != 3 * n_layers + 4 or n_layers < 1:
        raise CodecError(f"{path}: malformed layout header")
    names = {v: k for k, v in _ACT_CODES.items()}
    specs = tuple(
        nn.LayerSpec(int(head[3 * k]), int(head[3 * k + 1]), names[int(head[3 * k + 2])]) for k in range(n_layers)
    )
    hnet_lr, v_lr, l2, dropout = head[-4:]
    if frames[1].kind != MessageKind.PARAMS_DOWN or frames[1].env_id != STATE_ENV_ID:
        raise CodecError(f"{path}: missing phi frame")
    phi = nn.ParamVector(frames[1].payload.copy(), specs)
    emb = {}
    for f in frames[2:]:
        if f.kind != MessageKind.PARAMS_DOWN or f.env_id == STATE_ENV_ID or f.env_id in emb:
            raise CodecError(f"{path}: unexpected frame for env {f.env_id}")
        emb[f.env_id] = f.payload.copy()
    return HypernetState(phi, emb, hnet_lr=float(hnet_lr), embed_lr=float(v_lr), l2=float(l2), dropout=float(dropout))
