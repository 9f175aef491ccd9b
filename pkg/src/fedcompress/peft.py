"""Adapter strategies: the sequential compression layer and three LoRA variants.

Each kind fixes which adapter matrices train and which are averaged by the
server:

=============  =================  ==================
kind           trainable          aggregated
=============  =================  ==================
compression    Wc, W2             Wc, W2
lora           A, B               A, B
ffa_lora       B                  B
fedsa_lora     A, B               A
=============  =================  ==================

With ``train_head`` the classifier ``head.w`` is trained and aggregated too.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from .autodiff import Param
from .linalg import PINV_RTOL, RngStream, frobenius, gaussian, matmul, pinv, svd
from .model import Model


class AdapterKind(str, Enum):
    COMPRESSION = "compression"
    LORA = "lora"
    FFA_LORA = "ffa_lora"
    FEDSA_LORA = "fedsa_lora"


LORA_KINDS = (AdapterKind.LORA, AdapterKind.FFA_LORA, AdapterKind.FEDSA_LORA)
LORA_TARGETS = ("q", "k", "v")
# LoRA / compression trainable-count ratio regarded as comparable (r = d = 8 gives 1.2 per block)
PARITY_BAND = (0.8, 1.25)

_TRAINABLE = {
    AdapterKind.COMPRESSION: (".ffn.wc", ".ffn.w2"),
    AdapterKind.LORA: (".lora_a", ".lora_b"),
    AdapterKind.FFA_LORA: (".lora_b",),
    AdapterKind.FEDSA_LORA: (".lora_a", ".lora_b"),
}
_AGGREGATED = {
    AdapterKind.COMPRESSION: (".ffn.wc", ".ffn.w2"),
    AdapterKind.LORA: (".lora_a", ".lora_b"),
    AdapterKind.FFA_LORA: (".lora_b",),
    AdapterKind.FEDSA_LORA: (".lora_a",),
}


@dataclass
class AdapterSpec:
    kind: AdapterKind = AdapterKind.COMPRESSION
    compression_dim: int = 8
    rank: int = 8
    alpha_lora: float = 16.0
    train_head: bool = False
    target_sites: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.kind = AdapterKind(self.kind)
        if self.compression_dim < 1 or self.rank < 1:
            raise ValueError("adapter compression_dim and rank must be >= 1")
        if self.alpha_lora <= 0:
            raise ValueError("adapter alpha_lora must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterSpec":
        return cls(**d)

    def is_trainable(self, name: str) -> bool:
        return name.endswith(_TRAINABLE[self.kind]) or (self.train_head and name == "head.w")

    def is_aggregated(self, name: str) -> bool:
        return name.endswith(_AGGREGATED[self.kind]) or (self.train_head and name == "head.w")


class RankDeficientError(ValueError):
    pass


def _full_row_rank(wc: np.ndarray) -> bool:
    _, s, _ = svd(wc)
    return s[-1] > PINV_RTOL * s[0]


def _apply_flags(model: Model) -> Model:
    for name, p in model.params.items():
        p.trainable = model.adapter.is_trainable(name)
    return model


def init_compression(model: Model, d: int, stream: RngStream, *, wc: np.ndarray | None = None,
                     train_head: bool = False) -> Model:
    """Insert the compression layer into every block's FFN.

    ``Wc`` (d x M) is unit Gaussian and ``W2 = W @ pinv(Wc)``, the least-squares
    factor of the original down-projection ``W``. ``wc`` overrides the draw
    (same matrix for every block) and skips the ``d < min(M, m)`` check.
    """
    cfg = model.config
    if wc is None and not d < min(cfg.up_dim, cfg.out_dim):
        raise ValueError(f"compression_dim {d} must be < min(M, m) = {min(cfg.up_dim, cfg.out_dim)}")
    if model.adapter is not None:
        raise ValueError("model already carries an adapter")
    out = model.clone()
    sites = []
    for i in range(cfg.num_blocks):
        pre = f"blocks.{i}.ffn"
        w = out.params.pop(f"{pre}.down").value
        if wc is not None:
            c = np.array(wc, dtype=np.float64)
        else:
            site_stream = stream.spawn("compression", i)
            c = gaussian(d, cfg.up_dim, site_stream)
            if not _full_row_rank(c):
                c = gaussian(d, cfg.up_dim, site_stream.spawn("redraw"))
                if not _full_row_rank(c):
                    raise RankDeficientError(f"{pre}.wc is rank deficient after one redraw")
        out.reference[f"{pre}.down"] = w
        out.params[f"{pre}.wc"] = Param(f"{pre}.wc", c)
        out.params[f"{pre}.w2"] = Param(f"{pre}.w2", matmul(w, pinv(c)))
        sites.append(pre)
    # keep the head last so parameter order stays stable across kinds
    out.params["head.w"] = out.params.pop("head.w")
    out.adapter = AdapterSpec(AdapterKind.COMPRESSION, compression_dim=c.shape[0],
                              train_head=train_head, target_sites=sites)
    return _apply_flags(out)


def init_lora(model: Model, r: int, alpha_lora: float, kind, stream: RngStream, *,
              train_head: bool = False) -> Model:
    """Attach ``W0 + (alpha/r) B A`` on every block's query, key and value.

    ``A ~ N(0, 1/r)`` and ``B = 0``, so the adapted network starts identical
    to the base network.
    """
    kind = AdapterKind(kind)
    if kind not in LORA_KINDS:
        raise ValueError(f"init_lora does not handle adapter kind {kind.value!r}")
    if r < 1:
        raise ValueError("LoRA rank must be >= 1")
    if model.adapter is not None:
        raise ValueError("model already carries an adapter")
    out = model.clone()
    head = out.params.pop("head.w")
    sites = []
    for i in range(model.config.num_blocks):
        for s in LORA_TARGETS:
            site = f"blocks.{i}.attn.{s}"
            p, q = out.params[site].value.shape
            a = gaussian(r, q, stream.spawn("lora", site)) / math.sqrt(r)
            out.params[f"{site}.lora_a"] = Param(f"{site}.lora_a", a)
            out.params[f"{site}.lora_b"] = Param(f"{site}.lora_b", np.zeros((p, r)))
            sites.append(site)
    out.params["head.w"] = head
    out.adapter = AdapterSpec(kind, rank=r, alpha_lora=alpha_lora, train_head=train_head, target_sites=sites)
    return _apply_flags(out)


def attach(model: Model, spec: AdapterSpec, stream: RngStream) -> Model:
    if spec.kind is AdapterKind.COMPRESSION:
        return init_compression(model, spec.compression_dim, stream, train_head=spec.train_head)
    return init_lora(model, spec.rank, spec.alpha_lora, spec.kind, stream, train_head=spec.train_head)


def aggregation_names(model: Model) -> list[str]:
    return model.aggregated_names()


def payload_bytes(model: Model) -> int:
    """Bytes one client uploads per aggregation (float64 values in the mask)."""
    return 8 * sum(model.params[k].size for k in aggregation_names(model))


def reconstruction_error(model: Model) -> dict[str, float]:
    """``||W2 Wc - W||_F`` per compressed site; zero only when rank(W) <= d."""
    out = {}
    if model.adapter is None or model.adapter.kind is not AdapterKind.COMPRESSION:
        return out
    for site in model.adapter.target_sites:
        approx = model.params[f"{site}.w2"].value @ model.params[f"{site}.wc"].value
        out[site] = frobenius(approx - model.reference[f"{site}.down"])
    return out


@dataclass
class ParamReport:
    kind: str
    per_site: dict[str, int]
    head: int
    total: int

    @property
    def per_block(self) -> dict[int, int]:
        blocks: dict[int, int] = {}
        for site, n in self.per_site.items():
            b = int(site.split(".")[1])
            blocks[b] = blocks.get(b, 0) + n
        return blocks


def adapter_param_report(model: Model) -> ParamReport:
    """Trainable parameter counts per adapted site, excluding inactive reference weights."""
    if model.adapter is None:
        return ParamReport("none", {}, 0, 0)
    per_site = {}
    for site in model.adapter.target_sites:
        per_site[site] = sum(
            p.size for k, p in model.params.items()
            if p.trainable and k.startswith(site + ".")
        )
    head = model.params["head.w"].size if model.params["head.w"].trainable else 0
    return ParamReport(model.adapter.kind.value, per_site, head, sum(per_site.values()) + head)


def within_parity(ratio: float) -> bool:
    return PARITY_BAND[0] <= ratio <= PARITY_BAND[1]


def parity_table(reports: list[ParamReport], reference_kind: str = "compression") -> list[dict]:
    """Trainable totals for each method and their ratio to ``reference_kind``."""
    ref = next((r.total for r in reports if r.kind == reference_kind), None)
    rows = []
    for r in reports:
        rows.append({
            "kind": r.kind,
            "trainable": r.total,
            "ratio_to_" + reference_kind: (r.total / ref) if ref else float("nan"),
        })
    return rows
