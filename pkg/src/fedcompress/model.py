"""Toy transformer (embedding -> [attention -> FFN] x L -> head) built on the tape.

Weights are stored in ``(out, in)`` orientation and applied as ``x @ W.T`` on
row-major activations. The FFN of block ``i`` is

    ffn.up (M x h) + ffn.up_bias -> GELU -> ffn.down (m x M) + ffn.down_bias

and with the compression adapter ``ffn.down`` is replaced by ``ffn.w2 @ ffn.wc``
applied sequentially with no nonlinearity in between.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .autodiff import Param, Tape
from .data import Dataset
from .linalg import RngStream, gaussian

CHECKPOINT_FORMAT = "fedcompress-checkpoint/1"


class CompressionDimWarning(UserWarning):
    pass


@dataclass
class ModelConfig:
    hidden_dim: int = 16
    up_dim: int = 64
    out_dim: int = 16
    num_blocks: int = 2
    num_heads: int = 2
    num_classes: int = 4
    vocab_size: int = 16
    max_seq_len: int = 8
    compression_dim: int = 8
    task_kind: str = "vec_classify"
    feature_dim: int = 16
    patch_dim: int = 4

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, int) and v < 1:
                raise ValueError(f"model.{f.name} must be a positive integer, got {v}")
        if self.out_dim != self.hidden_dim:
            raise ValueError("model.out_dim must equal hidden_dim (the FFN output feeds a residual)")
        if self.hidden_dim % self.num_heads:
            raise ValueError("model.hidden_dim must be divisible by num_heads")
        d, cap = self.compression_dim, min(self.up_dim, self.out_dim)
        if d >= cap:
            raise ValueError(f"model.compression_dim={d} must be < min(up_dim, out_dim)={cap}")
        if d > cap / 4:
            warnings.warn(f"compression_dim={d} is not much smaller than min(up_dim, out_dim)={cap}",
                          CompressionDimWarning, stacklevel=2)
        if self.task_kind == "vec_classify" and self.feature_dim % self.patch_dim:
            raise ValueError("model.feature_dim must be divisible by patch_dim")

    @property
    def seq_len(self) -> int:
        if self.task_kind == "vec_classify":
            return self.feature_dim // self.patch_dim
        return self.max_seq_len

    @property
    def output_dim(self) -> int:
        return self.vocab_size if self.task_kind == "char_lm" else self.num_classes

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", CompressionDimWarning)
            return cls(**d)


class Model:
    """Named parameters plus an optional adapter description.

    ``reference`` keeps weights that an adapter took off the active path (the
    original ``ffn.down``); they never train and are not part of any payload.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Param], adapter=None,
                 reference: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params = params
        self.adapter = adapter
        self.reference = reference or {}

    def clone(self) -> "Model":
        return Model(self.config, {k: p.copy() for k, p in self.params.items()}, self.adapter,
                     {k: v.copy() for k, v in self.reference.items()})

    def trainable_names(self) -> list[str]:
        return [k for k, p in self.params.items() if p.trainable]

    def aggregated_names(self) -> list[str]:
        if self.adapter is None:
            return []
        return [k for k in self.params if self.adapter.is_aggregated(k)]

    def trainable_params(self) -> list[Param]:
        return [p for p in self.params.values() if p.trainable]

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    # -- forward -------------------------------------------------------------

    def _embed(self, tape: Tape, batch: Dataset, leaf):
        cfg = self.config
        n, t = len(batch), cfg.seq_len
        if cfg.task_kind == "vec_classify":
            if batch.inputs.shape[1] != cfg.feature_dim:
                raise ValueError(f"expected {cfg.feature_dim} features, got {batch.inputs.shape[1]}")
            patches = tape.leaf(batch.inputs.reshape(n * t, cfg.patch_dim))
            x = tape.linear(patches, leaf("embed.patch"))
        else:
            if batch.inputs.shape[1] > cfg.max_seq_len:
                raise ValueError(f"sequence length {batch.inputs.shape[1]} exceeds {cfg.max_seq_len}")
            t = batch.inputs.shape[1]
            x = tape.record("take_rows", [leaf("embed.tok")], ids=batch.inputs.reshape(-1))
        pos = tape.record("take_rows", [leaf("embed.pos")], ids=np.tile(np.arange(t), n))
        return tape.add(x, pos), t

    def _attention_mask(self, n: int, t: int) -> np.ndarray:
        block = np.tril(np.ones((t, t), dtype=bool)) if self.config.task_kind == "char_lm" else np.ones((t, t), dtype=bool)
        return np.kron(np.eye(n, dtype=bool), block)

    def _project(self, tape, x, site, leaf):
        y = tape.linear(x, leaf(site))
        a_name = site + ".lora_a"
        if a_name in self.params:
            delta = tape.linear(tape.linear(x, leaf(a_name)), leaf(site + ".lora_b"))
            y = tape.add(y, tape.scale(delta, self.adapter.alpha_lora / self.adapter.rank))
        return y

    def forward(self, batch: Dataset):
        """Returns ``(logits_node, tape)``.

        Logits are ``(batch, classes)`` for classification and
        ``(batch * seq, vocab)`` for ``char_lm``.
        """
        cfg = self.config
        tape = Tape()
        leaves = {}

        def leaf(name):
            if name not in leaves:
                leaves[name] = tape.param(self.params[name])
            return leaves[name]

        x, t = self._embed(tape, batch, leaf)
        n = len(batch)
        mask = self._attention_mask(n, t)
        dh = cfg.hidden_dim // cfg.num_heads
        for i in range(cfg.num_blocks):
            pre = f"blocks.{i}"
            q = self._project(tape, x, f"{pre}.attn.q", leaf)
            k = self._project(tape, x, f"{pre}.attn.k", leaf)
            v = self._project(tape, x, f"{pre}.attn.v", leaf)
            heads = []
            for h in range(cfg.num_heads):
                sl = dict(start=h * dh, stop=(h + 1) * dh)
                qh = tape.record("slice_cols", [q], **sl)
                kh = tape.record("slice_cols", [k], **sl)
                vh = tape.record("slice_cols", [v], **sl)
                scores = tape.scale(tape.matmul(qh, tape.record("transpose", [kh])), 1.0 / math.sqrt(dh))
                heads.append(tape.matmul(tape.record("softmax", [scores], mask=mask), vh))
            att = heads[0] if len(heads) == 1 else tape.record("concat_cols", heads)
            x = tape.add(x, self._project(tape, att, f"{pre}.attn.o", leaf))

            u = tape.record("gelu", [tape.add(tape.linear(x, leaf(f"{pre}.ffn.up")), leaf(f"{pre}.ffn.up_bias"))])
            if f"{pre}.ffn.wc" in self.params:
                y = tape.linear(tape.linear(u, leaf(f"{pre}.ffn.wc")), leaf(f"{pre}.ffn.w2"))
            else:
                y = tape.linear(u, leaf(f"{pre}.ffn.down"))
            x = tape.add(x, tape.add(y, leaf(f"{pre}.ffn.down_bias")))

        if cfg.task_kind == "char_lm":
            return tape.linear(x, leaf("head.w")), tape
        pool = tape.leaf(np.kron(np.eye(n), np.full((1, t), 1.0 / t)))
        return tape.linear(tape.matmul(pool, x), leaf("head.w")), tape

    @staticmethod
    def _targets(batch: Dataset) -> np.ndarray:
        return batch.targets.reshape(-1) if batch.task_kind == "char_lm" else batch.labels

    def loss_and_grads(self, batch: Dataset) -> tuple[float, dict[str, np.ndarray]]:
        logits, tape = self.forward(batch)
        loss = tape.record("softmax_xent", [logits], targets=self._targets(batch))
        grads = tape.backward(loss)
        return float(loss.value[0, 0]), grads

    def loss(self, batch: Dataset) -> float:
        logits, tape = self.forward(batch)
        return float(tape.record("softmax_xent", [logits], targets=self._targets(batch)).value[0, 0])

    def logits(self, batch: Dataset) -> np.ndarray:
        return self.forward(batch)[0].value

    def predict(self, batch: Dataset) -> np.ndarray:
        return self.logits(batch).argmax(axis=1)


def build(config: ModelConfig, stream: RngStream) -> Model:
    """Fresh base model; every weight is frozen until an adapter is attached.

    Matrices are ``N(0, 1/fan_in)``, biases zero. Each parameter draws from its
    own child stream keyed by name.
    """
    h, M, m = config.hidden_dim, config.up_dim, config.out_dim
    shapes: dict[str, tuple[int, int]] = {}
    if config.task_kind == "vec_classify":
        shapes["embed.patch"] = (h, config.patch_dim)
    else:
        shapes["embed.tok"] = (config.vocab_size, h)
    shapes["embed.pos"] = (config.seq_len, h)
    for i in range(config.num_blocks):
        for s in "qkvo":
            shapes[f"blocks.{i}.attn.{s}"] = (h, h)
        shapes[f"blocks.{i}.ffn.up"] = (M, h)
        shapes[f"blocks.{i}.ffn.up_bias"] = (1, M)
        shapes[f"blocks.{i}.ffn.down"] = (m, M)
        shapes[f"blocks.{i}.ffn.down_bias"] = (1, m)
    shapes["head.w"] = (config.output_dim, h)

    params = {}
    for name, (r, c) in shapes.items():
        if name.endswith("_bias"):
            value = np.zeros((r, c))
        elif name.startswith("embed.") and name != "embed.patch":
            value = gaussian(r, c, stream.spawn("init", name)) / math.sqrt(h)
        else:
            value = gaussian(r, c, stream.spawn("init", name)) / math.sqrt(c)
        params[name] = Param(name, value, trainable=False)
    return Model(config, params)


def pretrain_lite(model: Model, task: Dataset, steps: int, stream: RngStream, *,
                  lr: float = 0.05, batch_size: int = 32, clip: float = 1.0) -> Model:
    """Short full-model SGD run so the base weights are not purely random.

    Every parameter trains here regardless of its flag; flags are preserved
    on the returned copy. Gradients are clipped per parameter to ``clip``.
    """
    out = model.clone()
    if steps <= 0:
        return out
    rng = stream.spawn("pretrain").generator()
    n = len(task)
    for step in range(steps):
        idx = np.sort(rng.choice(n, size=min(batch_size, n), replace=False))
        loss, grads = out.loss_and_grads(task.subset(idx))
        if not math.isfinite(loss):
            raise FloatingPointError(f"pretraining diverged at step {step}")
        for name, p in out.params.items():
            g = grads[name]
            norm = float(np.sqrt(np.sum(g * g)))
            if norm > clip:
                g = g * (clip / norm)
            p.value = p.value - lr * g
    return out


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(model: Model, path: Path) -> None:
    """Structured-text checkpoint; float repr round-trips float64 exactly."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "adapter": None if model.adapter is None else model.adapter.to_dict(),
        "params": {
            k: {"shape": list(p.value.shape), "trainable": p.trainable, "data": p.value.ravel().tolist()}
            for k, p in model.params.items()
        },
        "reference": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in model.reference.items()},
    }
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_checkpoint(path: Path) -> Model:
    from .peft import AdapterSpec

    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    params = {
        k: Param(k, np.array(v["data"], dtype=np.float64).reshape(v["shape"]), v["trainable"])
        for k, v in doc["params"].items()
    }
    reference = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["reference"].items()}
    adapter = None if doc["adapter"] is None else AdapterSpec.from_dict(doc["adapter"])
    return Model(ModelConfig.from_dict(doc["config"]), params, adapter, reference)
