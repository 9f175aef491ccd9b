"""Synthetic labelled tasks and label-skewed Dirichlet partitioning."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .linalg import RngStream

TASK_KINDS = ("seq_classify", "char_lm", "vec_classify")


@dataclass
class Dataset:
    """A labelled example collection; also used as a minibatch.

    ``inputs`` holds int token ids ``(n, T)`` for token tasks or float features
    ``(n, F)`` for ``vec_classify``. ``labels`` is the per-example class used
    for partitioning (the grammar id for ``char_lm``). ``targets`` holds the
    next-token ids for ``char_lm`` and is ``None`` otherwise.
    """

    inputs: np.ndarray
    labels: np.ndarray
    label_count: int
    task_kind: str
    targets: np.ndarray | None = None
    vocab_size: int = 0

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.task_kind!r}")
        if len(self.labels) == 0:
            raise ValueError("dataset must be non-empty")
        if self.labels.min() < 0 or self.labels.max() >= self.label_count:
            raise ValueError("labels must lie in [0, label_count)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def output_classes(self) -> int:
        return self.vocab_size if self.task_kind == "char_lm" else self.label_count

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.inputs[idx], self.labels[idx], self.label_count, self.task_kind,
            None if self.targets is None else self.targets[idx], self.vocab_size,
        )

    def histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.label_count)

    def features(self) -> np.ndarray:
        """Fixed-length real features: raw vectors, or normalised token counts."""
        if self.task_kind == "vec_classify":
            return self.inputs.astype(np.float64)
        counts = np.zeros((len(self), self.vocab_size))
        np.add.at(counts, (np.repeat(np.arange(len(self)), self.inputs.shape[1]), self.inputs.ravel()), 1.0)
        return counts / self.inputs.shape[1]


def _balanced_labels(size, label_count, rng):
    return rng.permutation(np.arange(size) % label_count)


def make_task(task_kind: str, size: int, label_count: int, stream: RngStream, *,
              seq_len: int = 8, vocab_size: int = 16, feature_dim: int = 16,
              separation: float = 3.0) -> Dataset:
    """Deterministic synthetic task.

    * ``vec_classify``: one Gaussian cluster per label, centres scaled by ``separation``.
    * ``seq_classify``: each label owns a token pair; the label is whichever pair
      co-occurs in the sequence. Other labels' tokens appear at most singly.
    * ``char_lm``: each label owns a noisy successor permutation over the
      vocabulary; sequences start with the label's token and targets are next tokens.
    """
    if size < label_count:
        raise ValueError("size must be at least label_count")
    rule = stream.spawn("rule").generator()
    rng = stream.spawn("examples").generator()
    labels = _balanced_labels(size, label_count, rng)

    if task_kind == "vec_classify":
        centres = separation * rule.standard_normal((label_count, feature_dim))
        x = centres[labels] + rng.standard_normal((size, feature_dim))
        return Dataset(x, labels, label_count, task_kind)

    if task_kind == "seq_classify":
        if vocab_size < 2 * label_count + 1:
            raise ValueError("seq_classify needs vocab_size >= 2 * label_count + 1")
        if seq_len < 3:
            raise ValueError("seq_classify needs seq_len >= 3")
        tokens = rule.permutation(vocab_size)
        pairs = tokens[: 2 * label_count].reshape(label_count, 2)
        filler = tokens[2 * label_count:]
        x = filler[rng.integers(0, len(filler), size=(size, seq_len))]
        for i, k in enumerate(labels):
            pos = rng.choice(seq_len, size=3, replace=False)
            x[i, pos[0]], x[i, pos[1]] = pairs[k]
            if label_count > 1:
                other = (k + 1 + rng.integers(0, label_count - 1)) % label_count
                x[i, pos[2]] = pairs[other, rng.integers(0, 2)]
        return Dataset(x, labels, label_count, task_kind, vocab_size=vocab_size)

    if task_kind == "char_lm":
        if vocab_size < label_count:
            raise ValueError("char_lm needs vocab_size >= label_count")
        successors = np.stack([rule.permutation(vocab_size) for _ in range(label_count)])
        seqs = np.empty((size, seq_len + 1), dtype=np.int64)
        seqs[:, 0] = labels
        noise = rng.random((size, seq_len)) < 0.1
        rand_tok = rng.integers(0, vocab_size, size=(size, seq_len))
        for t in range(seq_len):
            nxt = successors[labels, seqs[:, t]]
            seqs[:, t + 1] = np.where(noise[:, t], rand_tok[:, t], nxt)
        return Dataset(seqs[:, :-1].copy(), labels, label_count, task_kind,
                       targets=seqs[:, 1:].copy(), vocab_size=vocab_size)

    raise ValueError(f"unknown task kind {task_kind!r}")


def split(dataset: Dataset, fraction: float, stream: RngStream) -> tuple[Dataset, Dataset]:
    """Random split; returns ``(rest, held_out)`` with ``held_out`` ~ ``fraction``."""
    n = len(dataset)
    k = int(round(fraction * n))
    if not 0 < k < n:
        raise ValueError(f"split fraction {fraction} leaves an empty side for {n} examples")
    perm = stream.generator().permutation(n)
    return dataset.subset(np.sort(perm[k:])), dataset.subset(np.sort(perm[:k]))


@dataclass
class Shard:
    client_id: int
    indices: np.ndarray
    label_histogram: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.indices)


def _apportion(n: int, p: np.ndarray) -> np.ndarray:
    """Largest-remainder rounding of ``n * p`` to integers summing to ``n``."""
    raw = n * p
    counts = np.floor(raw).astype(np.int64)
    short = n - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(dataset: Dataset, n_clients: int, alpha: float,
                        stream: RngStream) -> list[Shard]:
    """Per-label Dirichlet split across ``n_clients``.

    For every label a proportion vector ``p ~ Dir(alpha * 1)`` is drawn and the
    label's shuffled examples are dealt out in those proportions. Clients left
    empty are repaired by moving single examples from the largest shard.
    """
    if n_clients < 2:
        raise ValueError("dirichlet_partition needs at least 2 clients")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    rng = stream.generator()
    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    for k in range(dataset.label_count):
        idx = np.flatnonzero(dataset.labels == k)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        p = rng.dirichlet(np.full(n_clients, alpha))
        for c, chunk in enumerate(np.split(idx, np.cumsum(_apportion(idx.size, p))[:-1])):
            buckets[c].extend(chunk.tolist())

    common = int(np.argmax(dataset.histogram()))
    for _ in range(n_clients):
        empty = [c for c in range(n_clients) if not buckets[c]]
        if not empty:
            break
        donor = max(range(n_clients), key=lambda c: (len(buckets[c]), -c))
        if len(buckets[donor]) < 2:
            break
        labels = dataset.labels[buckets[donor]]
        want = common if (labels == common).any() else int(np.bincount(labels).argmax())
        pos = int(np.flatnonzero(labels == want)[-1])
        buckets[empty[0]].append(buckets[donor].pop(pos))
    if any(not b for b in buckets):
        raise ValueError(f"could not give every one of {n_clients} clients an example")

    shards = []
    for c, b in enumerate(buckets):
        ind = np.sort(np.array(b, dtype=np.int64))
        hist = np.bincount(dataset.labels[ind], minlength=dataset.label_count)
        shards.append(Shard(c, ind, hist.tolist()))
    return shards


def shard_manifest(shards: list[Shard]) -> dict:
    return {
        "clients": [
            {"client_id": s.client_id, "size": len(s), "label_histogram": s.label_histogram,
             "indices": s.indices.tolist()}
            for s in shards
        ]
    }


def write_manifest(shards: list[Shard], path: Path) -> None:
    Path(path).write_text(json.dumps(shard_manifest(shards), indent=1) + "\n", encoding="utf-8")


def histogram_table(shards: list[Shard], label_count: int) -> str:
    """Tab-separated per-client label counts."""
    header = "client\t" + "\t".join(f"label_{k}" for k in range(label_count)) + "\ttotal"
    rows = [header]
    for s in shards:
        rows.append(f"{s.client_id}\t" + "\t".join(str(v) for v in s.label_histogram) + f"\t{len(s)}")
    return "\n".join(rows) + "\n"
