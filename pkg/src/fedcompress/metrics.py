"""Evaluation metrics: macro-F1, ROUGE-L F1 and sentence BLEU-4 over token ids."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np


def macro_f1(predictions, labels, n_classes: int) -> float:
    """Unweighted mean of per-class F1. A class with no true or predicted
    examples scores 0."""
    pred = np.asarray(predictions)
    true = np.asarray(labels)
    if pred.size == 0:
        raise ValueError("macro_f1 needs at least one prediction")
    if pred.shape != true.shape:
        raise ValueError(f"predictions {pred.shape} and labels {true.shape} differ in shape")
    scores = []
    for c in range(n_classes):
        tp = np.sum((pred == c) & (true == c))
        fp = np.sum((pred == c) & (true != c))
        fn = np.sum((pred != c) & (true == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom and tp else 0.0)
    return float(np.mean(scores))


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_f1(candidate: Sequence, reference: Sequence) -> float:
    if len(reference) == 0:
        raise ValueError("reference must be non-empty")
    if len(candidate) == 0:
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(candidate), lcs / len(reference)
    return 2 * p * r / (p + r)


def _ngrams(seq: Sequence, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu_4(candidate: Sequence, reference: Sequence) -> float:
    """Sentence BLEU with uniform weights over 1..4-grams.

    An order with no clipped matches uses ``1 / (max(count, 1) + 1)`` in place
    of its zero precision, so short outputs still score above zero. The
    brevity penalty is ``exp(1 - |ref|/|cand|)`` when the candidate is shorter.
    """
    if len(reference) == 0:
        raise ValueError("reference must be non-empty")
    if len(candidate) == 0:
        return 0.0
    cand, ref = list(candidate), list(reference)
    log_p = 0.0
    for n in range(1, 5):
        c_grams, r_grams = _ngrams(cand, n), _ngrams(ref, n)
        total = sum(c_grams.values())
        matched = sum(min(k, r_grams[g]) for g, k in c_grams.items())
        p = matched / total if matched else 1.0 / (max(total, 1) + 1)
        log_p += 0.25 * math.log(p)
    bp = 1.0 if len(cand) >= len(ref) else math.exp(1.0 - len(ref) / len(cand))
    return bp * math.exp(log_p)


@dataclass
class EvalReport:
    loss: float
    accuracy: float
    macro_f1: float
    count: int
    rouge_l_f1: float | None = None
    bleu_4: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(model, dataset, batch_size: int = 64) -> EvalReport:
    """Loss, accuracy and macro-F1; for ``char_lm`` also mean ROUGE-L/BLEU-4 of
    the teacher-forced greedy continuation against the target sequence."""
    n = len(dataset)
    losses, preds = [], []
    for start in range(0, n, batch_size):
        batch = dataset.subset(np.arange(start, min(n, start + batch_size)))
        logits, tape = model.forward(batch)
        targets = batch.targets.reshape(-1) if batch.task_kind == "char_lm" else batch.labels
        loss = tape.record("softmax_xent", [logits], targets=targets).value[0, 0]
        losses.append(loss * len(targets))
        preds.append(logits.value.argmax(axis=1))
    pred = np.concatenate(preds)
    if dataset.task_kind == "char_lm":
        truth = dataset.targets.reshape(-1)
        pred_seqs = pred.reshape(dataset.targets.shape)
        rouge = float(np.mean([rouge_l_f1(p.tolist(), t.tolist()) for p, t in zip(pred_seqs, dataset.targets)]))
        bleu = float(np.mean([bleu_4(p.tolist(), t.tolist()) for p, t in zip(pred_seqs, dataset.targets)]))
        n_cls = dataset.vocab_size
    else:
        truth = dataset.labels
        rouge = bleu = None
        n_cls = dataset.label_count
    return EvalReport(
        loss=float(np.sum(losses) / truth.size),
        accuracy=float(np.mean(pred == truth)),
        macro_f1=macro_f1(pred, truth, n_cls),
        count=n,
        rouge_l_f1=rouge,
        bleu_4=bleu,
    )
