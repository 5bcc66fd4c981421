"""Server/client round protocol: selection, update strategies, aggregation.

Each round walks the four-step pipeline: select participants, push the
global model into each client under the configured update strategy, train
locally, then aggregate the uploaded online networks by sample count.  The
divergence-aware EMA strategy additionally calibrates a per-client scaler
the first time a client participates and blends local with global weights
in proportion to how far they have drifted apart.

Determinism: participants are processed with id-keyed random streams and
aggregated in id order, so results do not depend on worker count or
scheduling.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import evaluation
from .config import ExperimentConfig
from .data import (Dataset, PartitionSpec, load_dataset, make_blobs,
                   partition_non_iid, split_per_class, two_view_batch)
from .methods import ClientNets, MethodConfig, local_train
from .nn import MlpSpec, Network, OptimizerState
from .params import (DegenerateDivergenceError, NamedParams, autoscale_lambda,
                     compute_mu, divergence, ema_blend, weighted_average)
from .seeding import derive_rng, derive_seed

logger = logging.getLogger(__name__)


# -- update strategies ---------------------------------------------------------

@dataclass(frozen=True)
class Replace:
    """Online network becomes the global network; the target keeps local state."""


@dataclass(frozen=True)
class UpdateBoth:
    """Online and target networks both become the global network."""


@dataclass(frozen=True)
class FedEma:
    """Divergence-aware EMA of global into local, with fixed or autoscaled scaler.

    Exactly one of ``lambda_`` (fixed scaler) or ``tau`` (autoscaler target
    decay rate at the calibration round) must be set.  ``allow_weight_shared``
    permits the off-label use on weight-sharing methods, where the blend
    touches the shared encoder.
    """

    lambda_: float | None = None
    tau: float | None = None
    allow_weight_shared: bool = False

    def __post_init__(self):
        if (self.lambda_ is None) == (self.tau is None):
            raise ValueError("FedEma requires exactly one of lambda_ or tau")
        if self.tau is not None and not (0.0 <= self.tau < 1.0):
            raise ValueError(f"tau must lie in [0, 1), got {self.tau}")
        if self.lambda_ is not None and self.lambda_ < 0:
            raise ValueError("lambda_ must be nonnegative")

    @property
    def autoscaled(self) -> bool:
        return self.tau is not None


@dataclass(frozen=True)
class ConstantMu:
    """Fixed-decay EMA update with separate rates for encoder and predictor."""

    mu_encoder: float
    mu_predictor: float

    def __post_init__(self):
        for v in (self.mu_encoder, self.mu_predictor):
            if not (0.0 <= v <= 1.0):
                raise ValueError("constant mu values must lie in [0, 1]")


UpdateStrategy = Replace | UpdateBoth | FedEma | ConstantMu


def build_strategy(cfg: ExperimentConfig) -> UpdateStrategy | None:
    """Strategy object for a config; None selects standalone (no communication)."""
    s = cfg.strategy
    if s.kind == "replace":
        return Replace()
    if s.kind == "update_both":
        return UpdateBoth()
    if s.kind == "fedema":
        shared = cfg.method_config().weight_sharing
        if shared:
            logger.warning("fedema on a weight-sharing method blends the "
                           "shared encoder (off-label configuration)")
        return FedEma(lambda_=s.lambda_, tau=s.tau, allow_weight_shared=shared)
    if s.kind == "constant_mu":
        return ConstantMu(s.mu_encoder, s.mu_predictor)
    if s.kind == "standalone":
        return None
    raise ValueError(f"unknown strategy kind {s.kind!r}")


# -- state ----------------------------------------------------------------------

@dataclass
class ClientState:
    """Persistent per-client record, cached server-side across rounds."""

    id: int
    n_k: int
    nets: ClientNets
    samples: np.ndarray
    opt: OptimizerState
    lambda_k: float | None = None
    last_selected_round: int | None = None


@dataclass
class ServerState:
    global_params: NamedParams
    round: int
    strategy: UpdateStrategy | None
    clients: dict[int, ClientState]


@dataclass
class ClientRoundRecord:
    client: int
    n_k: int
    loss_mean: float
    divergence: float
    mu: float
    reset: bool
    lambda_entry: float | None
    lambda_exit: float | None


@dataclass
class RoundRecord:
    round: int
    selected: list[int]
    clients: list[ClientRoundRecord]
    weight_sum: float
    knn_acc: float | None = None
    collapse_stat: float | None = None


@dataclass
class UpdateOutcome:
    mu: float
    divergence: float
    reset: bool


# -- protocol operations ----------------------------------------------------------

def select_clients(pool_ids, count: int, rng: np.random.Generator) -> list[int]:
    """Uniform sample without replacement, returned in ascending id order."""
    ids = sorted(int(i) for i in pool_ids)
    if not (1 <= count <= len(ids)):
        raise ValueError(f"count {count} out of range for pool of {len(ids)}")
    picked = rng.choice(len(ids), size=count, replace=False)
    return sorted(ids[i] for i in picked)


def apply_update(client: ClientState, global_: NamedParams,
                 strategy: UpdateStrategy, r: int,
                 divergence_groups=("encoder",)) -> UpdateOutcome:
    """Push the global model into one client according to the strategy.

    A client that has never trained is fully initialized from the global
    model regardless of strategy.  The divergence between the incoming
    global model and the client's current online network is measured before
    any mutation and reported for monitoring (NaN on a first touch).
    """
    nets = client.nets
    current = nets.upload_params()
    first_touch = client.last_selected_round is None
    div = (divergence(global_, current, divergence_groups)
           if not first_touch else float("nan"))

    if isinstance(strategy, FedEma):
        if nets.weight_shared and not strategy.allow_weight_shared:
            raise ValueError(
                "FedEma on a weight-sharing method requires allow_weight_shared")
        if client.lambda_k is None or client.last_selected_round != r - 1:
            nets.set_online(global_)
            nets.set_target(global_)
            return UpdateOutcome(mu=0.0, divergence=div, reset=True)
        mu = compute_mu(client.lambda_k, div)
        nets.set_online(ema_blend(current, global_, mu, global_.group_names))
        return UpdateOutcome(mu=mu, divergence=div, reset=False)

    if first_touch:
        nets.set_online(global_)
        nets.set_target(global_)
        return UpdateOutcome(mu=0.0, divergence=div, reset=True)

    if isinstance(strategy, Replace):
        nets.set_online(global_)
        return UpdateOutcome(mu=0.0, divergence=div, reset=False)
    if isinstance(strategy, UpdateBoth):
        nets.set_online(global_)
        nets.set_target(global_)
        return UpdateOutcome(mu=0.0, divergence=div, reset=False)
    if isinstance(strategy, ConstantMu):
        enc = ema_blend(current, global_, strategy.mu_encoder, ("encoder",))
        groups = {"encoder": enc.group("encoder")}
        if nets.predictor is not None:
            pred = ema_blend(current, global_, strategy.mu_predictor, ("predictor",))
            groups["predictor"] = pred.group("predictor")
        nets.set_online(NamedParams(groups))
        return UpdateOutcome(mu=strategy.mu_encoder, divergence=div, reset=False)
    raise TypeError(f"unknown strategy {strategy!r}")


def post_aggregate_autoscale(server: ServerState, participants, uploads,
                             tau: float, divergence_groups=("encoder",)
                             ) -> dict[int, float]:
    """Fix the scaler of first-time participants from the fresh aggregate.

    Each participant whose scaler is still unset receives
    ``tau / divergence(new global, its upload)``; the value is immutable
    afterwards.  Degenerate divergence falls back to a scaler of 0 (pure
    global updates) with a warning.
    """
    assigned = {}
    for k in participants:
        client = server.clients[k]
        if client.lambda_k is not None:
            continue
        try:
            client.lambda_k = autoscale_lambda(
                server.global_params, uploads[k], tau, divergence_groups)
        except DegenerateDivergenceError:
            logger.warning(
                "client %d: degenerate divergence at calibration; scaler set to 0", k)
            client.lambda_k = 0.0
        assigned[k] = client.lambda_k
    return assigned


# -- experiment runtime ------------------------------------------------------------

@dataclass
class Runtime:
    """Everything a run needs beyond the server state."""

    cfg: ExperimentConfig
    method: MethodConfig
    server: ServerState
    train_ds: Dataset
    test_ds: Dataset
    partition: list[np.ndarray]
    probe: np.ndarray
    loss_rows: list = field(default_factory=list)


@dataclass
class ExperimentResult:
    final_params: NamedParams
    records: list[RoundRecord]
    final_eval: evaluation.EvalReport
    runtime: Runtime


def _build_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.path is not None:
        full = load_dataset(d.path)
    else:
        full = make_blobs(d.num_classes, d.per_class + d.test_per_class, d.dim,
                          d.spread, derive_seed(cfg.seed, "data"))
    return split_per_class(full, d.test_per_class)


def init_runtime(cfg: ExperimentConfig) -> Runtime:
    method = cfg.method_config()
    enc_spec = cfg.encoder_spec()
    pred_spec = cfg.predictor_spec()
    train_ds, test_ds = _build_datasets(cfg)

    parts = partition_non_iid(train_ds, PartitionSpec(
        cfg.num_clients, cfg.classes_per_client, derive_seed(cfg.seed, "partition")))

    init_nets = ClientNets.build(method, enc_spec, pred_spec,
                                 derive_rng(cfg.seed, "init"))
    global_params = init_nets.upload_params()

    strategy = build_strategy(cfg)
    fixed_lambda = (strategy.lambda_
                    if isinstance(strategy, FedEma) and not strategy.autoscaled
                    else None)

    clients: dict[int, ClientState] = {}
    for k in range(cfg.num_clients):
        samples = train_ds.samples[parts[k]]
        n_k = samples.shape[0]
        steps_per_epoch = max(1, n_k // cfg.batch_size)
        total = max(1, cfg.rounds * cfg.local_epochs * steps_per_epoch)
        nets = ClientNets.build(method, enc_spec, pred_spec,
                                derive_rng(cfg.seed, "client", k))
        clients[k] = ClientState(
            id=k, n_k=n_k, nets=nets, samples=samples,
            opt=OptimizerState(base_lr=cfg.lr, total_steps=total),
            lambda_k=fixed_lambda)

    server = ServerState(global_params=global_params, round=0,
                         strategy=strategy, clients=clients)
    probe = train_ds.samples[:min(256, len(train_ds))]
    return Runtime(cfg=cfg, method=method, server=server, train_ds=train_ds,
                   test_ds=test_ds, partition=parts, probe=probe)


def _global_encoder(rt: Runtime) -> Network:
    return Network(rt.cfg.encoder_spec(), "encoder",
                   rt.server.global_params.group("encoder"))


def _monitor_encoders(rt: Runtime) -> list[Network]:
    if rt.server.strategy is None:
        return [c.nets.online_encoder for _, c in sorted(rt.server.clients.items())]
    return [_global_encoder(rt)]


def _train_participant(rt: Runtime, k: int, r: int
                       ) -> tuple[ClientRoundRecord, NamedParams, list]:
    cfg = rt.cfg
    client = rt.server.clients[k]
    if rt.server.strategy is None:
        first = client.last_selected_round is None
        if first:
            client.nets.set_online(rt.server.global_params)
            client.nets.set_target(rt.server.global_params)
        outcome = UpdateOutcome(mu=0.0, divergence=float("nan"), reset=first)
    else:
        outcome = apply_update(client, rt.server.global_params,
                               rt.server.strategy, r, cfg.divergence_group_names())
    aug = cfg.aug_spec()
    aug_rng = derive_rng(cfg.seed, "aug", k, r)
    sampler = lambda batch: two_view_batch(batch, aug, aug_rng)
    trace = local_train(client.nets, rt.method, client.samples,
                        cfg.local_epochs, cfg.batch_size, client.opt,
                        derive_rng(cfg.seed, "train", k, r), sampler)
    rec = ClientRoundRecord(
        client=k, n_k=client.n_k,
        loss_mean=float(np.mean([t[2] for t in trace])),
        divergence=outcome.divergence, mu=outcome.mu, reset=outcome.reset,
        lambda_entry=client.lambda_k, lambda_exit=client.lambda_k)
    rows = [(r, k, epoch, b, loss) for epoch, b, loss in trace]
    return rec, client.nets.upload_params(), rows


def run_round(rt: Runtime) -> RoundRecord:
    """One full round; returns its metrics record."""
    cfg = rt.cfg
    server = rt.server
    r = server.round
    selected = select_clients(server.clients.keys(), cfg.participants_per_round(),
                              derive_rng(cfg.seed, "select", r))

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            outcomes = list(pool.map(lambda k: _train_participant(rt, k, r), selected))
    else:
        outcomes = [_train_participant(rt, k, r) for k in selected]
    records = {rec.client: rec for rec, _, _ in outcomes}
    uploads = {rec.client: up for rec, up, _ in outcomes}
    for _, _, rows in outcomes:  # participant (id) order, not completion order
        rt.loss_rows.extend(rows)

    weight_sum = 0.0
    if server.strategy is not None:
        entries = [(uploads[k], float(server.clients[k].n_k)) for k in selected]
        server.global_params = weighted_average(entries)
        total = sum(w for _, w in entries)
        weight_sum = sum(w / total for _, w in entries)
        if isinstance(server.strategy, FedEma) and server.strategy.autoscaled:
            assigned = post_aggregate_autoscale(
                server, selected, uploads, server.strategy.tau,
                cfg.divergence_group_names())
            for k, lam in assigned.items():
                records[k].lambda_exit = lam
    else:
        weight_sum = 1.0

    for k in selected:
        server.clients[k].last_selected_round = r

    record = RoundRecord(round=r, selected=list(selected),
                         clients=[records[k] for k in selected],
                         weight_sum=weight_sum)
    if (r + 1) % cfg.eval_every == 0 or r == cfg.rounds - 1:
        encoders = _monitor_encoders(rt)
        record.knn_acc = float(np.mean(
            [evaluation.knn_eval(e, rt.train_ds, rt.test_ds, cfg.knn_k)
             for e in encoders]))
        record.collapse_stat = float(np.mean(
            [evaluation.collapse_stat(e, rt.probe) for e in encoders]))
    server.round += 1
    return record


def divergence_trajectories(records: list[RoundRecord]) -> dict[int, list[float]]:
    """Per-client divergence series in round order (NaN-free)."""
    out: dict[int, list[float]] = {}
    for rec in records:
        for c in rec.clients:
            if not math.isnan(c.divergence):
                out.setdefault(c.client, []).append(c.divergence)
    return out


def final_linear_accuracy(rt: Runtime) -> float:
    cfg = rt.cfg
    accs = [evaluation.linear_eval(e, rt.train_ds, rt.test_ds,
                                   cfg.linear_epochs, cfg.linear_lr, cfg.seed)
            for e in _monitor_encoders(rt)]
    return float(np.mean(accs))


def run_experiment(cfg: ExperimentConfig, on_round=None) -> ExperimentResult:
    """Run the full protocol for ``cfg.rounds`` rounds and evaluate the result.

    ``on_round`` is called with each completed :class:`RoundRecord`.  The
    returned representation is the final global online network (or, for
    standalone runs, the evaluation averages the per-client encoders).
    """
    rt = init_runtime(cfg)
    records = []
    for _ in range(cfg.rounds):
        rec = run_round(rt)
        records.append(rec)
        if on_round is not None:
            on_round(rec)

    encoders = _monitor_encoders(rt)
    knn = float(np.mean([evaluation.knn_eval(e, rt.train_ds, rt.test_ds, cfg.knn_k)
                         for e in encoders]))
    collapse = float(np.mean([evaluation.collapse_stat(e, rt.probe)
                              for e in encoders]))
    linear = final_linear_accuracy(rt)
    report = evaluation.EvalReport(
        knn_acc=knn, linear_acc=linear, collapse_stat=collapse,
        per_round_divergence=divergence_trajectories(records))
    return ExperimentResult(final_params=rt.server.global_params,
                            records=records, final_eval=report, runtime=rt)
