"""Siamese self-supervised methods as one configurable training procedure.

A :class:`MethodConfig` toggles the mechanisms that distinguish the four
classic Siamese methods: presence of a predictor, stop-gradient on the
target branch, momentum (EMA) target updates, and weight sharing between the
two encoders.  The BYOL / SimSiam / SimCLR / MoCo presets are points in that
toggle space, and every ablation in between is a legal configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .nn import MlpSpec, Network, OptimizerState, sgd_step
from .params import NamedParams, ema_blend

LOSS_KINDS = ("neg_cosine", "nt_xent", "info_nce_queue")


class NonFiniteLossError(RuntimeError):
    """Training produced a non-finite loss (collapse-to-NaN event)."""


@dataclass(frozen=True)
class MethodConfig:
    """Toggle set defining one Siamese SSL method."""

    has_predictor: bool
    stop_gradient: bool
    target_ema: bool
    weight_sharing: bool
    loss_kind: str
    temperature: float = 0.5
    queue_size: int = 256
    momentum: float = 0.99
    symmetrize: bool = True

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.weight_sharing and self.target_ema:
            raise ValueError("weight_sharing and target_ema are mutually exclusive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.queue_size < 1:
            raise ValueError("queue_size must be positive")
        if not (0.0 <= self.momentum <= 1.0):
            raise ValueError("momentum must lie in [0, 1]")


PRESETS: dict[str, MethodConfig] = {
    "byol": MethodConfig(
        has_predictor=True, stop_gradient=True, target_ema=True,
        weight_sharing=False, loss_kind="neg_cosine"),
    "simsiam": MethodConfig(
        has_predictor=True, stop_gradient=True, target_ema=False,
        weight_sharing=True, loss_kind="neg_cosine"),
    "simclr": MethodConfig(
        has_predictor=False, stop_gradient=False, target_ema=False,
        weight_sharing=True, loss_kind="nt_xent", temperature=0.5),
    "moco": MethodConfig(
        has_predictor=False, stop_gradient=True, target_ema=True,
        weight_sharing=False, loss_kind="info_nce_queue", temperature=0.07),
}


def preset(name: str, **overrides) -> MethodConfig:
    """A named preset with optional field overrides for ablations."""
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown method preset {name!r}") from None
    return replace(cfg, **overrides) if overrides else cfg


# -- losses -------------------------------------------------------------------

def _row_norms(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    if np.any(norms == 0.0):
        raise ValueError(f"zero-norm row in {what}")
    return norms


def neg_cosine_loss(p: np.ndarray, z: np.ndarray
                    ) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean of ``2 - 2*cos(p_i, z_i)`` with gradients for both inputs.

    The caller decides whether the gradient w.r.t. ``z`` is used (stop
    gradient) or propagated into the target branch.
    """
    p = np.asarray(p, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if p.shape != z.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {z.shape}")
    b = p.shape[0]
    pn = _row_norms(p, "p")
    zn = _row_norms(z, "z")
    ph = p / pn
    zh = z / zn
    cos = np.sum(ph * zh, axis=1, keepdims=True)
    loss = float(np.mean(2.0 - 2.0 * cos))
    grad_p = (-2.0 / b) * (zh - cos * ph) / pn
    grad_z = (-2.0 / b) * (ph - cos * zh) / zn
    return loss, grad_p, grad_z


def nt_xent_loss(z1: np.ndarray, z2: np.ndarray, temperature: float
                 ) -> tuple[float, np.ndarray, np.ndarray]:
    """Normalized-temperature cross-entropy over the 2B views of a batch.

    Rows are L2-normalized internally; for each view the positive is its
    paired view and the negatives are the other ``2B - 2`` views.
    """
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if z1.shape != z2.shape:
        raise ValueError(f"shape mismatch {z1.shape} vs {z2.shape}")
    b = z1.shape[0]
    if b < 2:
        raise ValueError("nt_xent needs a batch of at least 2 (no negatives)")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    n1 = _row_norms(z1, "z1")
    n2 = _row_norms(z2, "z2")
    w = np.vstack([z1 / n1, z2 / n2])
    m = 2 * b
    sims = (w @ w.T) / temperature
    np.fill_diagonal(sims, -np.inf)
    pos = np.concatenate([np.arange(b, m), np.arange(0, b)])

    row_max = sims.max(axis=1, keepdims=True)
    expd = np.exp(sims - row_max)
    denom = expd.sum(axis=1, keepdims=True)
    logprob = sims - row_max - np.log(denom)
    loss = float(-np.mean(logprob[np.arange(m), pos]))

    g = expd / denom
    g[np.arange(m), pos] -= 1.0
    g /= m
    np.fill_diagonal(g, 0.0)
    gw = ((g + g.T) @ w) / temperature

    def through_norm(graw, normed, norms):
        return (graw - normed * np.sum(graw * normed, axis=1, keepdims=True)) / norms

    grad_z1 = through_norm(gw[:b], w[:b], n1)
    grad_z2 = through_norm(gw[b:], w[b:], n2)
    return loss, grad_z1, grad_z2


def info_nce_queue_loss(q: np.ndarray, k_pos: np.ndarray, queue: np.ndarray,
                        temperature: float) -> tuple[float, np.ndarray]:
    """Cross-entropy against one positive key and a queue of negatives.

    Logits are ``[q_i . k_pos_i, q_i . queue_j] / temperature`` and the
    gradient flows into ``q`` only; keys and queue entries act as constants.
    """
    q = np.asarray(q, dtype=np.float64)
    k_pos = np.asarray(k_pos, dtype=np.float64)
    queue = np.asarray(queue, dtype=np.float64)
    if q.shape != k_pos.shape:
        raise ValueError(f"shape mismatch {q.shape} vs {k_pos.shape}")
    if queue.ndim != 2 or queue.shape[0] < 1:
        raise ValueError("queue must be a nonempty [Q x d] matrix")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    b = q.shape[0]
    logits = np.concatenate(
        [np.sum(q * k_pos, axis=1, keepdims=True), q @ queue.T], axis=1)
    logits /= temperature
    row_max = logits.max(axis=1, keepdims=True)
    expd = np.exp(logits - row_max)
    denom = expd.sum(axis=1, keepdims=True)
    loss = float(-np.mean(logits[:, 0:1] - row_max - np.log(denom)))

    g = expd / denom
    g[:, 0] -= 1.0
    g /= b
    grad_q = (g[:, 0:1] * k_pos + g[:, 1:] @ queue) / temperature
    return loss, grad_q


def push_queue(queue: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """FIFO enqueue at fixed capacity: oldest rows drop off the front."""
    rows = np.asarray(rows, dtype=np.float64)
    cap = queue.shape[0]
    if rows.shape[0] >= cap:
        return rows[-cap:].copy()
    return np.concatenate([queue[rows.shape[0]:], rows])


def target_momentum_update(target: NamedParams, online: NamedParams,
                           m: float) -> NamedParams:
    """Momentum target update ``m * target + (1 - m) * online``."""
    if not (0.0 <= m <= 1.0):
        raise ValueError(f"momentum must lie in [0, 1], got {m}")
    return ema_blend(target, online, m, groups=target.group_names)


# -- client-side networks -----------------------------------------------------

class ClientNets:
    """The networks one client trains: online encoder, optional predictor,
    target encoder (alias of the online encoder under weight sharing), and
    the negatives queue for the queue-based contrastive method."""

    def __init__(self, online_encoder: Network, predictor: Network | None,
                 target_encoder: Network, queue: np.ndarray | None):
        self.online_encoder = online_encoder
        self.predictor = predictor
        self.target_encoder = target_encoder
        self.queue = queue

    @property
    def weight_shared(self) -> bool:
        return self.target_encoder is self.online_encoder

    @classmethod
    def build(cls, cfg: MethodConfig, encoder_spec: MlpSpec,
              predictor_spec: MlpSpec, rng: np.random.Generator) -> "ClientNets":
        online = Network.init(encoder_spec, "encoder", rng)
        predictor = (Network.init(predictor_spec, "predictor", rng)
                     if cfg.has_predictor else None)
        if cfg.weight_sharing:
            target = online
        else:
            target = Network(encoder_spec, "encoder", online.theta)
        queue = None
        if cfg.loss_kind == "info_nce_queue":
            raw = rng.standard_normal((cfg.queue_size, encoder_spec.out_dim))
            queue = raw / np.sqrt(np.sum(raw * raw, axis=1, keepdims=True))
        return cls(online, predictor, target, queue)

    def upload_params(self) -> NamedParams:
        """The online network as sent to the server (encoder + predictor)."""
        groups = {"encoder": self.online_encoder.theta}
        if self.predictor is not None:
            groups["predictor"] = self.predictor.theta
        return NamedParams(groups)

    def set_online(self, global_: NamedParams) -> None:
        self.online_encoder.set_flat(global_.group("encoder"))
        if self.predictor is not None:
            self.predictor.set_flat(global_.group("predictor"))

    def set_target(self, global_: NamedParams) -> None:
        if not self.weight_shared:
            self.target_encoder.set_flat(global_.group("encoder"))

    def momentum_update_target(self, m: float) -> None:
        if self.weight_shared:
            raise ValueError("momentum update on a weight-shared target")
        updated = target_momentum_update(
            self.target_encoder.params, self.online_encoder.params, m)
        self.target_encoder.set_params(updated)


# -- training ------------------------------------------------------------------

# Maps a [B x d] batch to two augmented views; owns its own random stream.
ViewSampler = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


def _online_forward(nets: ClientNets, x: np.ndarray):
    h, enc_tape = nets.online_encoder.forward_tape(x)
    if nets.predictor is not None:
        p, pred_tape = nets.predictor.forward_tape(h)
        return p, enc_tape, pred_tape
    return h, enc_tape, None


def batch_gradients(nets: ClientNets, cfg: MethodConfig, v1: np.ndarray,
                    v2: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and per-network gradient vectors for one two-view batch.

    Returned keys are ``encoder`` (online), ``predictor`` when present, and
    ``target_encoder`` when the target branch is a distinct network that
    receives gradient (stop-gradient off without weight sharing).
    """
    acc: dict[str, np.ndarray] = {"encoder": np.zeros_like(nets.online_encoder.theta)}
    if nets.predictor is not None:
        acc["predictor"] = np.zeros_like(nets.predictor.theta)
    target_grads = not cfg.stop_gradient and cfg.loss_kind != "info_nce_queue"
    if target_grads and not nets.weight_shared:
        acc["target_encoder"] = np.zeros_like(nets.target_encoder.theta)

    def online_back(enc_tape, pred_tape, g):
        if pred_tape is not None:
            pg, g = nets.predictor.backward_tape(pred_tape, g)
            acc["predictor"] += pg
        eg, _ = nets.online_encoder.backward_tape(enc_tape, g)
        acc["encoder"] += eg

    def target_back(tape, g):
        tg, _ = nets.target_encoder.backward_tape(tape, g)
        if nets.weight_shared:
            acc["encoder"] += tg
        else:
            acc["target_encoder"] += tg

    if cfg.loss_kind == "neg_cosine":
        p1, enc1, pred1 = _online_forward(nets, v1)
        z2, tgt2 = nets.target_encoder.forward_tape(v2)
        loss1, gp1, gz2 = neg_cosine_loss(p1, z2)
        if cfg.symmetrize:
            p2, enc2, pred2 = _online_forward(nets, v2)
            z1, tgt1 = nets.target_encoder.forward_tape(v1)
            loss2, gp2, gz1 = neg_cosine_loss(p2, z1)
            loss = 0.5 * (loss1 + loss2)
            online_back(enc1, pred1, 0.5 * gp1)
            online_back(enc2, pred2, 0.5 * gp2)
            if target_grads:
                target_back(tgt2, 0.5 * gz2)
                target_back(tgt1, 0.5 * gz1)
        else:
            loss = loss1
            online_back(enc1, pred1, gp1)
            if target_grads:
                target_back(tgt2, gz2)
    elif cfg.loss_kind == "nt_xent":
        z1, enc1, pred1 = _online_forward(nets, v1)
        z2, tgt2 = nets.target_encoder.forward_tape(v2)
        loss, g1, g2 = nt_xent_loss(z1, z2, cfg.temperature)
        online_back(enc1, pred1, g1)
        if target_grads:
            target_back(tgt2, g2)
    elif cfg.loss_kind == "info_nce_queue":
        q, enc1, pred1 = _online_forward(nets, v1)
        k, _ = nets.target_encoder.forward_tape(v2)
        loss, gq = info_nce_queue_loss(q, k, nets.queue, cfg.temperature)
        online_back(enc1, pred1, gq)
        nets.queue = push_queue(nets.queue, k)
    else:  # pragma: no cover - guarded by MethodConfig
        raise ValueError(cfg.loss_kind)
    return loss, acc


def local_train(nets: ClientNets, cfg: MethodConfig, samples: np.ndarray,
                epochs: int, batch_size: int, opt: OptimizerState,
                rng: np.random.Generator, view_sampler: ViewSampler
                ) -> list[tuple[int, int, float]]:
    """Train the client networks for ``epochs`` passes over its local data.

    Each epoch shuffles the local samples and walks full mini-batches (the
    trailing partial batch is dropped).  For every batch: draw two views,
    compute the configured loss, take one SGD step over all networks that
    receive gradient, then apply the momentum target update when enabled.
    Returns the loss trace as ``(epoch, batch, loss)`` rows.
    """
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.shape[0]
    if n == 0:
        raise ValueError("client dataset is empty")
    if epochs < 1:
        raise ValueError("epochs must be at least 1")
    if not (1 <= batch_size <= n):
        raise ValueError(f"batch size {batch_size} out of range for {n} samples")

    nets_by_name = {"encoder": nets.online_encoder}
    if nets.predictor is not None:
        nets_by_name["predictor"] = nets.predictor
    if (not cfg.stop_gradient and cfg.loss_kind != "info_nce_queue"
            and not nets.weight_shared):
        nets_by_name["target_encoder"] = nets.target_encoder

    trace = []
    steps = n // batch_size
    for epoch in range(epochs):
        order = rng.permutation(n)
        for b in range(steps):
            batch = samples[order[b * batch_size:(b + 1) * batch_size]]
            v1, v2 = view_sampler(batch)
            loss, grads = batch_gradients(nets, cfg, v1, v2)
            if not np.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite loss {loss!r} at epoch {epoch} batch {b}")
            current = NamedParams({k: net.theta for k, net in nets_by_name.items()})
            stepped = sgd_step(current, NamedParams(grads), opt)
            for k, net in nets_by_name.items():
                net.set_flat(stepped.group(k))
            if cfg.target_ema:
                nets.momentum_update_target(cfg.momentum)
            trace.append((epoch, b, loss))
    return trace
