"""Experiment orchestration behind the CLI: partition, run, compare, verify.

Output directory layout::

    config.yaml          exact RunConfig used
    shards.json          per-client example indices and label histograms
    label_histogram.tsv  per-client label counts
    records.csv          one row per round (see record_columns)
    checkpoints/         initial.json, final.json (+ client_<i>.json when clients differ)
    bounds.txt           weight-norm checks (and excess-risk checks with --convex-instance)
    eval.json            final evaluation, parameter counts, stop round
    compare.md/.csv      method comparison table (compare only)
    verify.txt           bound sweep (verify only)
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .bounds import (LemmaCheck, TheoremRun, bound_scaling_report, format_scaling,
                     make_convex_instance, verify_lemma1, verify_theorem1)
from .config import RunConfig
from .data import Dataset, Shard, dirichlet_partition, histogram_table, make_task, split, write_manifest
from .federation import FederationConfig, FederationResult, RoundRecord, run_federation
from .linalg import RngStream
from .model import Model, build, pretrain_lite, save_checkpoint
from .peft import (PARITY_BAND, AdapterKind, AdapterSpec, adapter_param_report, attach, payload_bytes,
                   reconstruction_error, within_parity)

log = logging.getLogger(__name__)

NEGATIVE_CONTROL_D = 0.01


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class Prepared:
    train: Dataset
    eval: Dataset
    pretrain: Dataset
    base: Model


@lru_cache(maxsize=8)
def _prepare_cached(cfg_yaml: str) -> Prepared:
    from .config import parse

    cfg = parse(cfg_yaml)
    t = cfg.task
    root = RngStream(cfg.seed)
    task = make_task(t.kind, t.size, t.label_count, root.spawn("task"), seq_len=t.seq_len,
                     vocab_size=t.vocab_size, feature_dim=t.feature_dim, separation=t.separation)
    rest, held_out = split(task, t.eval_fraction, root.spawn("eval_split"))
    train, pre = split(rest, t.pretrain_fraction, root.spawn("pretrain_split"))
    base = pretrain_lite(build(cfg.model, root.spawn("model")), pre, t.pretrain_steps,
                         root.spawn("pretrain"), lr=t.pretrain_lr)
    return Prepared(train, held_out, pre, base)


def prepare(cfg: RunConfig) -> Prepared:
    """Task, held-out eval set, pretraining pool and pretrained base model.

    Depends only on ``seed``, ``task`` and ``model``, so every method and
    client count in a comparison shares the same base weights.
    """
    key = RunConfig(cfg.seed, cfg.task, cfg.model, AdapterSpec(AdapterKind.LORA), FederationConfig()).dump()
    return _prepare_cached(key)


def partition(cfg: RunConfig, train: Dataset, n_clients: int | None = None) -> list[Shard]:
    n = cfg.federation.n_clients if n_clients is None else n_clients
    return dirichlet_partition(train, n, cfg.dirichlet_alpha, RngStream(cfg.seed).spawn("partition", n))


def write_partition(cfg: RunConfig, out: Path) -> list[Shard]:
    out.mkdir(parents=True, exist_ok=True)
    shards = partition(cfg, prepare(cfg).train)
    write_manifest(shards, out / "shards.json")
    (out / "label_histogram.tsv").write_text(histogram_table(shards, cfg.task.label_count), encoding="utf-8")
    return shards


# -- records -------------------------------------------------------------------


def record_columns(records: list[RoundRecord], n_clients: int) -> list[str]:
    cols = ["round"] + [f"client_{i}" for i in range(n_clients)]
    cols += ["eval_loss", "eval_acc", "macro_f1", "rouge_l", "bleu_4"]
    cols += [f"norm:{k}" for k in records[0].norms]
    cols += ["lemma1_bound", "lemma1_slack", "payload_bytes"]
    return cols


def records_csv(records: list[RoundRecord], checks: list[LemmaCheck], n_clients: int) -> str:
    """CSV text; ``lemma1_*`` report the tightest (smallest-slack) matrix per round."""
    tightest: dict[int, LemmaCheck] = {}
    for ch in checks:
        if ch.round not in tightest or ch.slack < tightest[ch.round].slack:
            tightest[ch.round] = ch
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(record_columns(records, n_clients))
    for r in records:
        ev = r.eval
        row = [r.round] + [None if math.isnan(x) else x for x in r.client_losses]
        row += [ev and ev.loss, ev and ev.accuracy, ev and ev.macro_f1,
                ev and ev.rouge_l_f1, ev and ev.bleu_4]
        row += list(r.norms.values())
        t = tightest.get(r.round)
        row += [t and t.bound, t and t.slack, r.payload_bytes]
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def format_lemma(checks: list[LemmaCheck], label: str) -> str:
    failed = [c for c in checks if not c.passed]
    lines = [f"# weight-norm bound ({label}): {len(checks) - len(failed)}/{len(checks)} checks passed"]
    lines.append("param\tround\tmeasured_norm\tbound\tslack\tpassed")
    for c in checks:
        lines.append(f"{c.param}\t{c.round}\t{c.measured_norm!r}\t{c.bound!r}\t{c.slack!r}\t"
                     f"{'yes' if c.passed else 'NO'}")
    return "\n".join(lines) + "\n"


# -- run -------------------------------------------------------------------------


@dataclass
class RunOutcome:
    result: FederationResult
    lemma: list[LemmaCheck]
    theorem: list[TheoremRun] = field(default_factory=list)
    negative_control: bool = False

    @property
    def violations(self) -> int:
        n = sum(not c.passed for c in self.lemma) + (self.result.diverged_round is not None)
        for run in self.theorem:
            n += sum(not c.passed for c in run.checks) + sum(not c.passed for c in run.lemma)
        return n


def negative_control(cfg: RunConfig) -> RunConfig:
    return cfg.with_overrides(federation={"clip": False, "clip_bound": NEGATIVE_CONTROL_D})


def client_datasets(train: Dataset, shards: list[Shard]) -> list[Dataset]:
    return [train.subset(s.indices) for s in shards]


def execute(cfg: RunConfig, shards: list[Shard] | None = None, *,
            stop_on_divergence: bool = False) -> tuple[Model, FederationResult, Prepared]:
    prep = prepare(cfg)
    shards = partition(cfg, prep.train) if shards is None else shards
    model = attach(prep.base, cfg.adapter, RngStream(cfg.seed).spawn("adapter"))
    result = run_federation(cfg.federation, model, client_datasets(prep.train, shards), prep.eval,
                            stop_on_divergence=stop_on_divergence)
    return model, result, prep


def _theorem_runs(cfg: RunConfig, n_clients: list[int], local_steps: list[int], rounds: int,
                  lr: float, clip_bound: float | None, batch_size: int, no_clip: bool) -> list[TheoremRun]:
    runs = []
    for n in n_clients:
        inst = make_convex_instance(n, RngStream(cfg.seed).spawn("convex"), alpha=cfg.dirichlet_alpha)
        d = NEGATIVE_CONTROL_D if no_clip else (clip_bound or inst.gradient_bound())
        w_star = inst.optimum()
        for t in local_steps:
            fc = FederationConfig(n_clients=n, rounds=rounds, local_steps=t, learning_rate=lr, clip_bound=d,
                                  batch_size=batch_size, seed=cfg.seed, clip=not no_clip)
            runs.append(verify_theorem1(inst, fc, w_star))
    return runs


def run(cfg: RunConfig, out: Path, *, no_clip: bool = False, convex: bool | None = None) -> RunOutcome:
    if no_clip:
        cfg = negative_control(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.dump(), encoding="utf-8")
    prep = prepare(cfg)
    shards = partition(cfg, prep.train)
    write_manifest(shards, out / "shards.json")
    (out / "label_histogram.tsv").write_text(histogram_table(shards, cfg.task.label_count), encoding="utf-8")

    model, result, _ = execute(cfg, shards, stop_on_divergence=no_clip)
    lemma = verify_lemma1(result.records, cfg.federation)
    outcome = RunOutcome(result, lemma, negative_control=no_clip)
    label = "NEGATIVE CONTROL: clipping disabled, D declared" if no_clip else "clipped"
    text = format_lemma(lemma, f"{label} D={cfg.federation.clip_bound}")
    if result.diverged_round is not None:
        text += f"DIVERGED in round {result.diverged_round}: weights grew without bound\n"
    if convex if convex is not None else cfg.convex_instance:
        fc = cfg.federation
        outcome.theorem = _theorem_runs(cfg, [fc.n_clients], [fc.local_steps], fc.rounds,
                                        fc.learning_rate, None, fc.batch_size, no_clip)
        text += "\n# excess-risk bound on the convex instance\n"
        text += format_scaling(bound_scaling_report(outcome.theorem))
    (out / "records.csv").write_text(records_csv(result.records, lemma, cfg.federation.n_clients), encoding="utf-8")
    (out / "bounds.txt").write_text(text, encoding="utf-8")

    ck = out / "checkpoints"
    ck.mkdir(exist_ok=True)
    save_checkpoint(model, ck / "initial.json")
    save_checkpoint(result.model, ck / "final.json")
    if any(k not in model.aggregated_names() for k in model.trainable_names()):
        for i, c in enumerate(result.clients):
            save_checkpoint(c, ck / f"client_{i}.json")

    fc = cfg.federation
    mean_shard = float(np.mean([len(s) for s in shards]))
    steps_per_epoch = math.ceil(mean_shard / fc.batch_size) if fc.batch_size > 0 else 1
    summary = {
        "negative_control": no_clip,
        "final_eval": result.records[-1].eval.to_dict() if result.records[-1].eval else None,
        "rounds_completed": result.records[-1].round,
        "stopped_round": result.stopped_round,
        "diverged_round": result.diverged_round,
        "epochs_equivalent": result.records[-1].round * fc.local_steps / steps_per_epoch,
        "epoch_mapping": f"one epoch = one pass over a mean-sized shard = {steps_per_epoch} local steps",
        "trainable_params": adapter_param_report(model).total,
        "payload_bytes_per_client_round": payload_bytes(model),
        "initial_reconstruction_error": reconstruction_error(model),
        "lemma1_violations": sum(not c.passed for c in lemma),
        "bound_violations": outcome.violations,
    }
    (out / "eval.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return outcome


# -- compare ---------------------------------------------------------------------


COMPARE_COLUMNS = ["N", "method", "trainable_params", "ratio_to_compression", "payload_bytes_per_round",
                   "final_eval_loss", "accuracy", "macro_f1", "rouge_l", "bleu_4", "rounds_run"]


def compare(cfg: RunConfig, out: Path | None = None) -> list[dict]:
    """One row per (N, method), all sharing base model, task and partition per N."""
    rows = []
    for n in cfg.compare.client_counts:
        shards = partition(cfg, prepare(cfg).train, n)
        group = []
        for method in cfg.compare.methods:
            mcfg = cfg.for_method(method, n)
            model, result, _ = execute(mcfg, shards)
            ev = result.records[-1].eval
            group.append({
                "N": n, "method": method, "trainable_params": adapter_param_report(model).total,
                "payload_bytes_per_round": payload_bytes(model) * n,
                "final_eval_loss": ev.loss, "accuracy": ev.accuracy, "macro_f1": ev.macro_f1,
                "rouge_l": ev.rouge_l_f1, "bleu_4": ev.bleu_4, "rounds_run": result.records[-1].round,
            })
        ref = next((r["trainable_params"] for r in group if r["method"] == "compression"), None)
        for r in group:
            r["ratio_to_compression"] = r["trainable_params"] / ref if ref else None
        rows.extend(group)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(cfg.dump(), encoding="utf-8")
        (out / "compare.md").write_text(compare_markdown(rows, cfg), encoding="utf-8")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COMPARE_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in COMPARE_COLUMNS])
        (out / "compare.csv").write_text(buf.getvalue(), encoding="utf-8")
    return rows


def compare_markdown(rows: list[dict], cfg: RunConfig) -> str:
    seq = cfg.task.kind == "char_lm"
    cols = ["N", "method", "trainable_params", "ratio_to_compression", "final_eval_loss", "accuracy", "macro_f1"]
    if seq:
        cols += ["bleu_4", "rouge_l"]
    lines = [f"# Method comparison: task={cfg.task.kind}, dirichlet_alpha={cfg.dirichlet_alpha}, "
             f"rounds={cfg.federation.rounds}, local_steps={cfg.federation.local_steps}", "",
             "| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        cells = []
        for c in cols:
            v = r[c]
            cells.append(f"{v:.4f}" if isinstance(v, float) else str(v))
        lines.append("| " + " | ".join(cells) + " |")
    lines.append("")
    for r in rows:
        if r["method"] == "lora" and r["ratio_to_compression"] is not None:
            ok = "within" if within_parity(r["ratio_to_compression"]) else "OUTSIDE"
            lines.append(f"Parameter parity N={r['N']}: lora/compression = {r['ratio_to_compression']:.4f} "
                         f"({ok} declared band {PARITY_BAND[0]} to {PARITY_BAND[1]})")
    return "\n".join(lines) + "\n"


# -- verify ----------------------------------------------------------------------


def verify(cfg: RunConfig, out: Path | None = None, *, no_clip: bool = False) -> tuple[list[TheoremRun], str]:
    v = cfg.verify
    if not (v.client_counts and v.rounds and v.local_steps):
        raise ValueError("verify grid is empty: client_counts, rounds and local_steps need at least one value")
    runs = _theorem_runs(cfg, v.client_counts, v.local_steps, max(v.rounds), v.learning_rate,
                         v.clip_bound, v.batch_size, no_clip)
    rows = bound_scaling_report(runs, v.rounds)
    lemma = [c for r in runs for c in r.lemma]
    label = "NEGATIVE CONTROL (clipping disabled, D declared 0.01)" if no_clip else "clipped"
    text = f"# bound sweep: {label}\n# excess-risk bound\n" + format_scaling(rows)
    failed = [r for r in rows if not r.passed]
    text += f"\n# excess-risk violations: {len(failed)}\n"
    for r in failed:
        text += f"VIOLATION N={r.n_clients} S={r.rounds} t_agg={r.t_agg}\n"
    bad_lemma = [c for c in lemma if not c.passed]
    text += f"# weight-norm violations: {len(bad_lemma)} of {len(lemma)} checks\n"
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(cfg.dump(), encoding="utf-8")
        (out / "verify.txt").write_text(text, encoding="utf-8")
    return runs, text
