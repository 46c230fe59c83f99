"""Diagnosis parsing, micro/macro precision-recall-F1, and corpus BLEU.

Metric conventions (fixed because scores are incomparable otherwise):
0/0 ratios are 0; macro averages run over all 25 labels including those with
zero gold support; unparseable generations count as empty prediction sets;
BLEU is corpus-level BLEU-4 with clipped counts, uniform weights, the
standard brevity penalty, and no smoothing.
"""
from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

from .corpus import Corpus, LabelRegistry
from .errors import SchemaError, SizeError
from .model import word_tokenize

_DIAG_RE = re.compile(r"diagnoses\s*:\s*(?P<labels>[^.]*)(?:\.(?P<rest>.*))?$",
                      re.IGNORECASE | re.DOTALL)


@dataclass
class ParsedGeneration:
    labels: Set[str]
    rationale_text: str
    unmatched: int          # fragments that matched no registry label
    flagged: bool           # no "Diagnoses:" marker found


@dataclass
class ConfusionCounts:
    tp: Dict[str, int]
    fp: Dict[str, int]
    fn: Dict[str, int]


@dataclass
class MetricReport:
    micro_precision: float
    micro_recall: float
    micro_f1: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    bleu: float
    n_records: int
    seed: int = 0
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "micro": {"precision": self.micro_precision, "recall": self.micro_recall,
                      "f1": self.micro_f1},
            "macro": {"precision": self.macro_precision, "recall": self.macro_recall,
                      "f1": self.macro_f1},
            "bleu": self.bleu,
            "n_records": self.n_records,
            "seed": self.seed,
            **self.extras,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def parse_generation(text: str, registry: LabelRegistry) -> ParsedGeneration:
    """Split the 'Diagnoses: ... .' clause on ';' and match fragments
    case-insensitively (whitespace-normalized) against the registry."""
    m = _DIAG_RE.search(text)
    if not m:
        return ParsedGeneration(set(), "", 0, True)
    by_norm = {" ".join(l.split()): l for l in registry.labels}
    labels: Set[str] = set()
    unmatched = 0
    clause = m.group("labels").strip()
    if clause:
        for fragment in clause.split(";"):
            norm = " ".join(fragment.lower().split())
            if not norm or norm == "none":
                continue
            if norm in by_norm:
                labels.add(by_norm[norm])
            else:
                unmatched += 1
    rest = (m.group("rest") or "").strip()
    return ParsedGeneration(labels, rest, unmatched, False)


def parse_diagnoses(text: str, registry: LabelRegistry) -> Set[str]:
    return parse_generation(text, registry).labels


def confusion_counts(preds: Sequence[Set[str]], golds: Sequence[Set[str]],
                     registry: LabelRegistry) -> ConfusionCounts:
    if len(preds) != len(golds):
        raise SchemaError("prediction and gold lists are not aligned")
    tp = {l: 0 for l in registry.labels}
    fp = {l: 0 for l in registry.labels}
    fn = {l: 0 for l in registry.labels}
    for p, g in zip(preds, golds):
        for label in p & g:
            tp[label] += 1
        for label in p - g:
            fp[label] += 1
        for label in g - p:
            fn[label] += 1
    return ConfusionCounts(tp, fp, fn)


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if (p + r) else 0.0


def micro_macro_prf(preds: Sequence[Set[str]], golds: Sequence[Set[str]],
                    registry: LabelRegistry) -> Dict[str, float]:
    """Micro: pooled integer counts across labels. Macro: unweighted mean of
    per-label scores over all 25 labels, with 0/0 defined as 0."""
    c = confusion_counts(preds, golds, registry)
    tp_sum = sum(c.tp.values())
    fp_sum = sum(c.fp.values())
    fn_sum = sum(c.fn.values())
    micro_p = _ratio(tp_sum, tp_sum + fp_sum)
    micro_r = _ratio(tp_sum, tp_sum + fn_sum)
    per_p, per_r, per_f = [], [], []
    for label in registry.labels:
        p = _ratio(c.tp[label], c.tp[label] + c.fp[label])
        r = _ratio(c.tp[label], c.tp[label] + c.fn[label])
        per_p.append(p)
        per_r.append(r)
        per_f.append(_f1(p, r))
    n = len(registry.labels)
    return {
        "micro_precision": micro_p,
        "micro_recall": micro_r,
        "micro_f1": _f1(micro_p, micro_r),
        "macro_precision": sum(per_p) / n,
        "macro_recall": sum(per_r) / n,
        "macro_f1": sum(per_f) / n,
    }


# ---- BLEU ---------------------------------------------------------------------


def _ngrams(tokens: List[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[str], references: Sequence[str],
         max_n: int = 4) -> float:
    """Corpus-level BLEU with one reference per candidate and uniform n-gram
    weights. Zero overlap at any order yields 0 (no smoothing)."""
    if not candidates:
        raise SizeError("empty candidate list")
    if len(candidates) != len(references):
        raise SchemaError("candidate and reference lists are not aligned")
    clipped = [0] * max_n
    totals = [0] * max_n
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        c_toks = word_tokenize(cand)
        r_toks = word_tokenize(ref)
        cand_len += len(c_toks)
        ref_len += len(r_toks)
        for n in range(1, max_n + 1):
            c_counts = _ngrams(c_toks, n)
            r_counts = _ngrams(r_toks, n)
            totals[n - 1] += sum(c_counts.values())
            clipped[n - 1] += sum(min(count, r_counts[g]) for g, count in c_counts.items())
    if cand_len == 0 or any(c == 0 for c in clipped) or any(t == 0 for t in totals):
        return 0.0
    log_p = sum(math.log(c / t) for c, t in zip(clipped, totals)) / max_n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p)


# ---- end-to-end evaluation -----------------------------------------------------


def evaluate_model(model, test_corpus: Corpus, vk, mode: str,
                   batch_size: int = 32, seed: int = 0,
                   generator=None) -> MetricReport:
    """Generate per-record text with the mode's encoder input, parse, score.

    mode: phase1 (note input), phase2 (fused labs input, lab-rationale
    reference), phase3 (prefix-fused input). `generator` lets tests inject an
    oracle decoder: it receives the record batch and returns texts.
    """
    if mode not in ("phase1", "phase2", "phase3"):
        raise SchemaError(f"unknown mode {mode!r}")
    registry = test_corpus.registry
    preds: List[Set[str]] = []
    golds: List[Set[str]] = []
    cand_rats: List[str] = []
    ref_rats: List[str] = []
    n_flagged = 0
    records = test_corpus.records
    for lo in range(0, len(records), batch_size):
        batch = records[lo: lo + batch_size]
        if generator is not None:
            texts = generator(batch)
        else:
            if mode == "phase1":
                enc, valid = model.encode_phase1(batch)
            elif mode == "phase2":
                enc, valid = model.encode_phase2(batch, vk)
            else:
                enc, valid = model.encode_phase3(batch, vk)
            texts = model.generate(enc, valid, model.config.max_target_tokens)
        for record, text in zip(batch, texts):
            parsed = parse_generation(text, registry)
            n_flagged += parsed.flagged
            preds.append(parsed.labels)
            golds.append(set(record.diagnoses))
            reference = _reference_rationale(record, mode)
            if reference:
                cand_rats.append(parsed.rationale_text)
                ref_rats.append(reference)
    scores = micro_macro_prf(preds, golds, registry)
    bleu_score = bleu(cand_rats, ref_rats) if cand_rats else 0.0
    return MetricReport(
        micro_precision=scores["micro_precision"],
        micro_recall=scores["micro_recall"],
        micro_f1=scores["micro_f1"],
        macro_precision=scores["macro_precision"],
        macro_recall=scores["macro_recall"],
        macro_f1=scores["macro_f1"],
        bleu=bleu_score,
        n_records=len(records),
        seed=seed,
        extras={"mode": mode, "n_flagged": n_flagged},
    )


def _reference_rationale(record, mode: str) -> Optional[str]:
    if mode == "phase2":
        return record.lab_rationale
    parts = [p for p in (record.note_rationale, record.lab_rationale) if p]
    return " ".join(parts) if parts else None
