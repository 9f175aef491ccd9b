"""Executable checks of the weight-norm bound and the excess-risk bound.

Weight norm: for every aggregated matrix after ``s`` rounds,
``||W_agg|| <= ||W_0|| + eta * s * t_agg * D`` when every per-matrix update is
clipped to ``D``.

Excess risk: on a convex instance (a linear probe ``W2 @ Wc @ x`` with ``Wc``
fixed), ``|L(W_agg) - L(W*)| <= alpha * D^2 * s * t_agg + D * ||W_0 - W*||``.
``W*`` comes from a Newton solver on the pooled data that never touches the
tape or the federation code.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Param, Tape
from .data import Dataset, dirichlet_partition, make_task
from .federation import FederationConfig, RoundRecord, run_federation
from .linalg import RngStream, frobenius, gaussian


@dataclass
class LemmaCheck:
    param: str
    round: int
    initial_norm: float
    eta: float
    t_agg: int
    clip_bound: float
    measured_norm: float
    bound: float

    @property
    def slack(self) -> float:
        return self.bound - self.measured_norm

    @property
    def passed(self) -> bool:
        return self.slack >= 0.0


def verify_lemma1(records: list[RoundRecord], config: FederationConfig,
                  clip_bound: float | None = None) -> list[LemmaCheck]:
    """One check per aggregated matrix per recorded round.

    ``clip_bound`` overrides the declared ``D`` (the negative control declares
    a small ``D`` while training unclipped).
    """
    d = config.clip_bound if clip_bound is None else clip_bound
    initial = records[0].norms
    checks = []
    for rec in records:
        for name, norm in rec.norms.items():
            bound = initial[name] + config.learning_rate * rec.round * config.local_steps * d
            checks.append(LemmaCheck(name, rec.round, initial[name], config.learning_rate,
                                     config.local_steps, d, norm, bound))
    return checks


# -- convex instance -------------------------------------------------------------


class LinearProbe:
    """``logits = W2 (Wc x)`` with ``Wc`` frozen; convex in ``W2``."""

    def __init__(self, wc: np.ndarray, w2: np.ndarray):
        self.params = {
            "probe.wc": Param("probe.wc", wc, trainable=False),
            "probe.w2": Param("probe.w2", w2, trainable=True),
        }

    def clone(self) -> "LinearProbe":
        return LinearProbe(self.params["probe.wc"].value.copy(), self.params["probe.w2"].value.copy())

    def trainable_names(self) -> list[str]:
        return ["probe.w2"]

    def aggregated_names(self) -> list[str]:
        return ["probe.w2"]

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def forward(self, batch: Dataset):
        tape = Tape()
        x = tape.leaf(batch.inputs)
        z = tape.linear(x, tape.param(self.params["probe.wc"]))
        return tape.linear(z, tape.param(self.params["probe.w2"])), tape

    def loss_and_grads(self, batch: Dataset):
        logits, tape = self.forward(batch)
        loss = tape.record("softmax_xent", [logits], targets=batch.labels)
        return float(loss.value[0, 0]), tape.backward(loss)

    def loss(self, batch: Dataset) -> float:
        logits, tape = self.forward(batch)
        return float(tape.record("softmax_xent", [logits], targets=batch.labels).value[0, 0])


def _xent(w2, z, y):
    logits = z @ w2.T
    logits = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(logits).sum(axis=1))
    return float(np.mean(logz - logits[np.arange(len(y)), y]))


def _xent_grad_hess(w2, z, y):
    logits = z @ w2.T
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    n = len(y)
    r = p.copy()
    r[np.arange(n), y] -= 1.0
    grad = r.T @ z / n
    # Hessian over vec(W2) in row-major order: mean_i (diag(p_i) - p_i p_i^T) kron z_i z_i^T
    c, d = w2.shape
    h = np.zeros((c * d, c * d))
    for pi, zi in zip(p, z):
        h += np.kron(np.diag(pi) - np.outer(pi, pi), np.outer(zi, zi))
    return grad, h / n


@dataclass
class ConvexInstance:
    data: Dataset            # pooled training data (vec_classify features)
    wc: np.ndarray           # fixed projection, d x F
    w2_init: np.ndarray      # shared start, classes x d
    client_data: list[Dataset]

    @property
    def projected(self) -> np.ndarray:
        return self.data.inputs @ self.wc.T

    def model(self) -> LinearProbe:
        return LinearProbe(self.wc.copy(), self.w2_init.copy())

    def pooled_loss(self, w2: np.ndarray) -> float:
        return _xent(w2, self.projected, self.data.labels)

    def gradient_bound(self) -> float:
        """Upper bound on any (mini)batch gradient norm: sqrt(2) * max ||Wc x||."""
        return float(np.sqrt(2.0) * np.linalg.norm(self.projected, axis=1).max())

    def optimum(self, tol: float = 1e-8, max_iter: int = 200) -> np.ndarray:
        """Pooled-loss minimiser nearest ``w2_init`` via damped Newton steps.

        Softmax is invariant to adding a vector to every class row, so the
        Hessian is singular; least-squares Newton steps stay orthogonal to that
        direction and the iterate converges to the closest optimum.
        """
        z, y = self.projected, self.data.labels
        w = self.w2_init.copy()
        for _ in range(max_iter):
            g, h = _xent_grad_hess(w, z, y)
            if np.linalg.norm(g) < tol:
                return w
            step = np.linalg.lstsq(h, g.ravel(), rcond=None)[0].reshape(w.shape)
            f0, t = _xent(w, z, y), 1.0
            while _xent(w - t * step, z, y) > f0 - 1e-4 * t * float(g.ravel() @ step.ravel()) and t > 1e-10:
                t *= 0.5
            w = w - t * step
        g, _ = _xent_grad_hess(w, z, y)
        if np.linalg.norm(g) >= tol:
            raise RuntimeError(f"optimum oracle stalled at gradient norm {np.linalg.norm(g):.3e}")
        return w


def make_convex_instance(n_clients: int, stream: RngStream, *, size: int = 400, label_count: int = 4,
                         feature_dim: int = 16, d: int = 8, separation: float = 0.5,
                         alpha: float = 0.1, source: Dataset | None = None) -> ConvexInstance:
    """Overlapping Gaussian clusters (so the optimum is finite), unit-norm
    features, a fixed Gaussian ``Wc`` and a zero start, split by Dirichlet."""
    if source is None:
        source = make_task("vec_classify", size, label_count, stream.spawn("task"),
                           feature_dim=feature_dim, separation=separation)
    x = source.features()
    x = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    data = Dataset(x, source.labels.copy(), source.label_count, "vec_classify")
    wc = gaussian(d, x.shape[1], stream.spawn("wc")) / np.sqrt(x.shape[1])
    w2 = np.zeros((data.label_count, d))
    if n_clients == 1:
        parts = [data]
    else:
        parts = [data.subset(s.indices) for s in dirichlet_partition(data, n_clients, alpha, stream.spawn("split"))]
    return ConvexInstance(data, wc, w2, parts)


@dataclass
class TheoremCheck:
    n_clients: int
    round: int
    t_agg: int
    alpha: float
    clip_bound: float
    c: float
    measured_excess: float
    bound: float

    @property
    def passed(self) -> bool:
        return self.measured_excess <= self.bound


@dataclass
class TheoremRun:
    checks: list[TheoremCheck]
    lemma: list[LemmaCheck]
    optimum: np.ndarray = field(repr=False)


def verify_theorem1(instance: ConvexInstance, config: FederationConfig,
                    optimum: np.ndarray | None = None) -> TheoremRun:
    """Federated run on the convex instance, checking the excess-risk bound
    right after every aggregation (round 0 is the shared start)."""
    w_star = instance.optimum() if optimum is None else optimum
    l_star = instance.pooled_loss(w_star)
    c = config.clip_bound * frobenius(instance.w2_init - w_star)
    checks = []

    def on_aggregate(s, clients):
        w = clients[0].params["probe.w2"].value
        excess = abs(instance.pooled_loss(w) - l_star)
        bound = config.learning_rate * config.clip_bound**2 * s * config.local_steps + c
        checks.append(TheoremCheck(config.n_clients, s, config.local_steps, config.learning_rate,
                                   config.clip_bound, c, excess, bound))

    result = run_federation(config, instance.model(), instance.client_data, on_aggregate=on_aggregate)
    return TheoremRun(checks, verify_lemma1(result.records, config), w_star)


@dataclass
class ScalingRow:
    n_clients: int
    rounds: int
    t_agg: int
    measured_excess: float
    bound: float

    @property
    def passed(self) -> bool:
        return self.measured_excess <= self.bound


def bound_scaling_report(runs: list[TheoremRun], rounds: list[int] | None = None) -> list[ScalingRow]:
    """(N, S, t_agg, measured, bound) rows sorted by N, t_agg, S.

    ``rounds`` restricts the rows to those values of S.
    """
    rows = []
    for run in runs:
        for ch in run.checks:
            if ch.round == 0 or (rounds is not None and ch.round not in rounds):
                continue
            rows.append(ScalingRow(ch.n_clients, ch.round, ch.t_agg, ch.measured_excess, ch.bound))
    rows.sort(key=lambda r: (r.n_clients, r.t_agg, r.rounds))
    return rows


def format_scaling(rows: list[ScalingRow]) -> str:
    lines = ["N\tS\tt_agg\tS*t_agg\tmeasured_excess\tbound\tpassed"]
    for r in rows:
        lines.append(f"{r.n_clients}\t{r.rounds}\t{r.t_agg}\t{r.rounds * r.t_agg}\t"
                     f"{r.measured_excess!r}\t{r.bound!r}\t{'yes' if r.passed else 'NO'}")
    return "\n".join(lines) + "\n"
