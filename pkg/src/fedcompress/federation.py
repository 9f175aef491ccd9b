"""FedAvg simulation: local clipped SGD, masked averaging, broadcast, telemetry."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import Dataset
from .linalg import RngStream, frobenius
from .metrics import EvalReport, evaluate

log = logging.getLogger(__name__)


@dataclass
class FederationConfig:
    n_clients: int = 4
    rounds: int = 30
    local_steps: int = 5
    learning_rate: float = 0.05
    clip_bound: float = 1.0
    batch_size: int = 16
    seed: int = 0
    clip: bool = True
    weighted: bool = False
    workers: int = 1
    patience: int = 0

    def __post_init__(self):
        if self.n_clients < 1 or self.rounds < 0 or self.local_steps < 0:
            raise ValueError("federation needs n_clients >= 1, rounds >= 0, local_steps >= 0")
        if not self.learning_rate > 0 or not self.clip_bound > 0:
            raise ValueError("federation.learning_rate and federation.clip_bound must be positive")
        if self.workers < 1:
            raise ValueError("federation.workers must be >= 1")


@dataclass
class LocalStats:
    losses: list[float] = field(default_factory=list)
    grad_norms: dict[str, float] = field(default_factory=dict)   # sum over steps, after clipping
    max_update_norm: float = 0.0

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.losses)) if self.losses else float("nan")


@dataclass
class RoundRecord:
    round: int
    client_losses: list[float]
    eval: EvalReport | None
    norms: dict[str, float]
    clipped_grad_norm_sums: dict[str, float]
    payload_bytes: int
    max_update_norm: float


def clip_gradient(g: np.ndarray, bound: float) -> np.ndarray:
    norm = frobenius(g)
    return g * (bound / norm) if norm > bound else g


def local_train(model, data: Dataset, t_agg: int, eta: float, clip_bound: float, stream: RngStream, *,
                batch_size: int = 0, clip: bool = True):
    """``t_agg`` plain SGD steps on minibatches of ``data``; mutates ``model``.

    Each trainable parameter's gradient is clipped to Frobenius norm
    ``clip_bound`` before the update (skipped when ``clip`` is False).
    ``batch_size <= 0`` or at least the shard size means full batch.
    """
    stats = LocalStats()
    names = model.trainable_names()
    stats.grad_norms = {k: 0.0 for k in names}
    rng = stream.generator()
    n = len(data)
    full = batch_size <= 0 or batch_size >= n
    for step in range(t_agg):
        batch = data if full else data.subset(np.sort(rng.choice(n, size=batch_size, replace=False)))
        loss, grads = model.loss_and_grads(batch)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite training loss at local step {step}")
        stats.losses.append(loss)
        for k in names:
            g = clip_gradient(grads[k], clip_bound) if clip else grads[k]
            gn = frobenius(g)
            stats.grad_norms[k] += gn
            stats.max_update_norm = max(stats.max_update_norm, eta * gn)
            p = model.params[k]
            p.value = p.value - eta * g
    return model, stats


def fedavg(client_params: list[dict[str, np.ndarray]], mask, weights=None) -> dict[str, np.ndarray]:
    """Element-wise mean of the masked parameters, summed in client order.

    ``weights`` (e.g. shard sizes) switches to a weighted mean.
    """
    if not client_params:
        raise ValueError("fedavg needs at least one client")
    if weights is not None and len(weights) != len(client_params):
        raise ValueError("fedavg: one weight per client required")
    out = {}
    for name in mask:
        shapes = {np.shape(c.get(name)) for c in client_params}
        if any(name not in c for c in client_params) or len(shapes) != 1:
            raise ValueError(f"fedavg: parameter {name!r} missing or shaped differently across clients: {shapes}")
        if weights is None:
            acc = np.array(client_params[0][name], dtype=np.float64)
            for c in client_params[1:]:
                acc = acc + c[name]
            out[name] = acc / len(client_params)
        else:
            w = np.asarray(weights, dtype=np.float64)
            acc = w[0] * np.asarray(client_params[0][name], dtype=np.float64)
            for wi, c in zip(w[1:], client_params[1:]):
                acc = acc + wi * c[name]
            out[name] = acc / w.sum()
    return out


def aggregated_names(model) -> list[str]:
    if hasattr(model, "aggregated_names"):
        return model.aggregated_names()
    return []


def _evaluate_clients(clients, eval_set, personal: bool) -> EvalReport | None:
    if eval_set is None:
        return None
    if not personal:
        return evaluate(clients[0], eval_set)
    reports = [evaluate(c, eval_set) for c in clients]
    mean = lambda attr: None if getattr(reports[0], attr) is None else float(np.mean([getattr(r, attr) for r in reports]))
    return EvalReport(mean("loss"), mean("accuracy"), mean("macro_f1"), reports[0].count,
                      mean("rouge_l_f1"), mean("bleu_4"))


@dataclass
class FederationResult:
    records: list[RoundRecord]
    clients: list
    stopped_round: int | None = None
    diverged_round: int | None = None

    @property
    def model(self):
        return self.clients[0]


def run_federation(config: FederationConfig, model, client_data: list[Dataset],
                   eval_set: Dataset | None = None, *,
                   on_aggregate: Callable[[int, list], None] | None = None,
                   stop_on_divergence: bool = False) -> FederationResult:
    """Full-participation FedAvg.

    ``model`` is the shared adapter-initialised model; each client gets a deep
    copy. A round runs every client's ``local_train``, averages the masked
    parameters, broadcasts them back and records telemetry. Round 0 records
    the initial state. Clients may run on a thread pool; results do not depend
    on scheduling because each client has its own stream and the reduction
    runs in client order. With ``stop_on_divergence`` a non-finite local loss
    ends the run (recorded as ``diverged_round``) instead of raising.
    """
    if len(client_data) != config.n_clients:
        raise ValueError(f"{config.n_clients} clients configured but {len(client_data)} shards given")
    base = RngStream(config.seed).spawn("federation")
    clients = [model.clone() for _ in range(config.n_clients)]
    mask = aggregated_names(model)
    personal = any(k not in mask for k in model.trainable_names())
    payload = 8 * sum(model.params[k].size for k in mask) * config.n_clients
    sizes = [len(d) for d in client_data]
    cum = {k: 0.0 for k in mask}

    def record(s, losses, max_upd):
        return RoundRecord(
            round=s, client_losses=losses, eval=_evaluate_clients(clients, eval_set, personal),
            norms={k: frobenius(clients[0].params[k].value) for k in mask},
            clipped_grad_norm_sums=dict(cum), payload_bytes=payload if s else 0, max_update_norm=max_upd,
        )

    records = [record(0, [float("nan")] * config.n_clients, 0.0)]
    if on_aggregate:
        on_aggregate(0, clients)
    best, stale, stopped, diverged = records[0].eval.loss if records[0].eval else math.inf, 0, None, None

    def work(i, s):
        return local_train(clients[i], client_data[i], config.local_steps, config.learning_rate,
                           config.clip_bound, base.spawn("client", i, "round", s),
                           batch_size=config.batch_size, clip=config.clip)[1]

    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    try:
        for s in range(1, config.rounds + 1):
            try:
                if pool:
                    stats = list(pool.map(lambda i: work(i, s), range(config.n_clients)))
                else:
                    stats = [work(i, s) for i in range(config.n_clients)]
            except FloatingPointError:
                if not stop_on_divergence:
                    raise
                diverged = s
                log.warning("training diverged in round %d", s)
                break
            agg = fedavg([c.state() for c in clients], mask, sizes if config.weighted else None)
            for c in clients:
                for k, v in agg.items():
                    c.params[k].value = v.copy()
            for k in mask:
                cum[k] += float(np.mean([st.grad_norms.get(k, 0.0) for st in stats]))
            rec = record(s, [st.mean_loss for st in stats], max(st.max_update_norm for st in stats))
            records.append(rec)
            if on_aggregate:
                on_aggregate(s, clients)
            if config.patience > 0 and rec.eval is not None:
                if rec.eval.loss < best:
                    best, stale = rec.eval.loss, 0
                else:
                    stale += 1
                    if stale >= config.patience:
                        stopped = s
                        log.info("early stop after round %d (patience %d)", s, config.patience)
                        break
    finally:
        if pool:
            pool.shutdown()
    return FederationResult(records, clients, stopped, diverged)
