"""Run configuration: a YAML document with nested sections.

Schema (defaults in brackets, ``*`` marks required keys)::

    seed*: int                      # master seed for every random stream
    out_dir: str                    [runs/default]
    dirichlet_alpha: float          [0.1]
    convex_instance: bool           [false]  # also verify the excess-risk bound
    task:
      kind*: vec_classify | seq_classify | char_lm
      size, label_count, seq_len, vocab_size, feature_dim, separation,
      eval_fraction [0.2], pretrain_fraction [0.25], pretrain_steps [200], pretrain_lr [0.05]
    model:    ModelConfig fields (task_kind, num_classes, vocab_size, max_seq_len
              and feature_dim are taken from ``task``)
    adapter:
      kind*: compression | lora | ffa_lora | fedsa_lora
      compression_dim [8], rank [8], alpha_lora [16, or 32 for vec_classify],
      train_head [true for vec_classify]
    federation:
      n_clients*, rounds*, local_steps*, learning_rate*, clip_bound*,
      batch_size [16], clip [true], weighted [false], workers [1], patience [0]
    compare:
      methods [all four kinds], client_counts [[3, 4]]
    verify:
      client_counts [[2, 4, 8]], rounds [[1, 5, 10, 20]], local_steps [[1, 5]],
      learning_rate [0.1], clip_bound [null = derived gradient bound], batch_size [16]
"""
from __future__ import annotations

import copy
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .federation import FederationConfig
from .model import CompressionDimWarning, ModelConfig
from .peft import AdapterKind, AdapterSpec


class ConfigError(ValueError):
    pass


@dataclass
class TaskSpec:
    kind: str = "vec_classify"
    size: int = 600
    label_count: int = 4
    seq_len: int = 8
    vocab_size: int = 16
    feature_dim: int = 16
    separation: float = 3.0
    eval_fraction: float = 0.2
    pretrain_fraction: float = 0.25
    pretrain_steps: int = 200
    pretrain_lr: float = 0.05


@dataclass
class CompareSpec:
    methods: list[str] = field(default_factory=lambda: [k.value for k in AdapterKind])
    client_counts: list[int] = field(default_factory=lambda: [3, 4])


@dataclass
class VerifySpec:
    client_counts: list[int] = field(default_factory=lambda: [2, 4, 8])
    rounds: list[int] = field(default_factory=lambda: [1, 5, 10, 20])
    local_steps: list[int] = field(default_factory=lambda: [1, 5])
    learning_rate: float = 0.1
    clip_bound: float | None = None
    batch_size: int = 16


@dataclass
class RunConfig:
    seed: int
    task: TaskSpec
    model: ModelConfig
    adapter: AdapterSpec
    federation: FederationConfig
    dirichlet_alpha: float = 0.1
    out_dir: str = "runs/default"
    convex_instance: bool = False
    compare: CompareSpec = field(default_factory=CompareSpec)
    verify: VerifySpec = field(default_factory=VerifySpec)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adapter"] = self.adapter.to_dict()
        for k in ("task_kind", "num_classes", "vocab_size", "max_seq_len", "feature_dim"):
            d["model"].pop(k)
        d["federation"].pop("seed")
        d["adapter"].pop("target_sites")
        return d

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def with_overrides(self, **changes) -> "RunConfig":
        return parse_dict(_merge(self.to_dict(), changes))

    def for_method(self, kind: str, n_clients: int) -> "RunConfig":
        spec = self.adapter.to_dict()
        spec.pop("target_sites")
        spec["kind"] = kind
        return self.with_overrides(adapter=spec, federation={"n_clients": n_clients})


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


_REQUIRED = {
    "": ("seed", "task", "adapter", "federation"),
    "task": ("kind",),
    "adapter": ("kind",),
    "federation": ("n_clients", "rounds", "local_steps", "learning_rate", "clip_bound"),
}


def _section(cls, raw, path: str, **extra):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(raw).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown field")
    for key in _REQUIRED.get(path, ()):
        if key not in raw:
            raise ConfigError(f"{path}.{key}: missing required field")
    try:
        return cls(**{**raw, **extra})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from None


def parse_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    for key in _REQUIRED[""]:
        if key not in raw:
            raise ConfigError(f"{key}: missing required field")
    top = {"seed", "task", "model", "adapter", "federation", "dirichlet_alpha", "out_dir",
           "convex_instance", "compare", "verify"}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown field")
    seed = raw["seed"]
    if not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError("seed: must be an unsigned 64-bit integer")

    task = _section(TaskSpec, raw["task"], "task")
    vision = task.kind == "vec_classify"
    model_raw = dict(raw.get("model") or {})
    for k in ("task_kind", "num_classes", "vocab_size", "max_seq_len", "feature_dim"):
        if k in model_raw:
            raise ConfigError(f"model.{k}: derived from the task section, do not set it here")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CompressionDimWarning)
        model = _section(ModelConfig, model_raw, "model", task_kind=task.kind, num_classes=task.label_count,
                         vocab_size=task.vocab_size, max_seq_len=task.seq_len, feature_dim=task.feature_dim)
    adapter_raw = dict(raw["adapter"] or {})
    adapter_raw.setdefault("alpha_lora", 32.0 if vision else 16.0)
    adapter_raw.setdefault("train_head", vision)
    adapter = _section(AdapterSpec, adapter_raw, "adapter")
    if adapter.kind is AdapterKind.COMPRESSION and adapter.compression_dim != model.compression_dim:
        raise ConfigError("adapter.compression_dim: must match model.compression_dim")
    federation = _section(FederationConfig, raw["federation"], "federation", seed=seed)
    alpha = raw.get("dirichlet_alpha", 0.1)
    if not isinstance(alpha, (int, float)) or alpha <= 0:
        raise ConfigError("dirichlet_alpha: must be a positive number")
    return RunConfig(
        seed=seed, task=task, model=model, adapter=adapter, federation=federation,
        dirichlet_alpha=float(alpha), out_dir=str(raw.get("out_dir", "runs/default")),
        convex_instance=bool(raw.get("convex_instance", False)),
        compare=_section(CompareSpec, raw.get("compare"), "compare"),
        verify=_section(VerifySpec, raw.get("verify"), "verify"),
    )


def parse(text: str, source: str = "<config>") -> RunConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"{source}:{mark.line + 1}:{mark.column + 1}" if mark else source
        raise ConfigError(f"{where}: {getattr(e, 'problem', None) or e}") from None
    return parse_dict(raw)


def load(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror}") from None
    try:
        return parse(text, str(path))
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}" if not str(e).startswith(str(path)) else str(e)) from None


def default_config(**overrides) -> RunConfig:
    """The toy defaults: N=4, S=30, t_agg=5, eta=0.05, D=1.0 on vec_classify."""
    base = {
        "seed": 0,
        "task": {"kind": "vec_classify"},
        "adapter": {"kind": "compression"},
        "federation": {"n_clients": 4, "rounds": 30, "local_steps": 5, "learning_rate": 0.05, "clip_bound": 1.0},
    }
    return parse_dict(_merge(base, overrides))
