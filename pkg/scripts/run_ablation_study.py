#!/usr/bin/env python3
"""Ablation study: full model vs w/o knowledge vocabulary vs w/o reasoning.

Trains the three variants over paired seeds on a synthetic corpus and prints
mean held-out micro-F1 per variant. Example:

    python scripts/run_ablation_study.py --n 1000 --seeds 1 2 3 --out runs/ablation
"""

import argparse
import json
import os
import time

import numpy as np

import clindistill.autodiff as ad
from clindistill.anomaly import caption_record
from clindistill.corpus import default_registry, split_train_test
from clindistill.evaluation import evaluate_model
from clindistill.knowledge import (build_knowledge_base, build_knowledge_vocab,
                                   fixture_documents)
from clindistill.model import ClinDistillModel, SlmConfig, build_tokenizer
from clindistill.synthetic import FEATURES, generate_synthetic_corpus
from clindistill.teacher import MockTeacher, distill_rationales
from clindistill.training import Ablations, PhaseConfig, train_phase1, \
    train_phase2, train_phase3

VARIANTS = {
    "full": Ablations(),
    "wo_know": Ablations(without_know=True),
    "wo_reasoning": Ablations(without_reasoning=True),
}


def train_variant(train_corpus, test_corpus, tokenizer, vk, ablations, seed,
                  epochs=(20, 20, 12)):
    model = ClinDistillModel(SlmConfig(n_features=len(FEATURES), seed=seed),
                             tokenizer)

    def cfg(phase, n_epochs, lr):
        return PhaseConfig(phase=phase, epochs=n_epochs, batch_size=32,
                           base_lr=lr, weight_decay=0.01,
                           seed=seed * 10 + phase, ablations=ablations)

    train_phase1(train_corpus, model, cfg(1, epochs[0], 1.5e-3))
    train_phase2(train_corpus, model, vk, cfg(2, epochs[1], 1.5e-3))
    train_phase3(train_corpus, model, vk, cfg(3, epochs[2], 1e-3), prev_phase=2)
    return evaluate_model(model, test_corpus, vk, mode="phase3", seed=0)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--n", type=int, default=1000)
    parser.add_argument("--corpus-seed", type=int, default=11)
    parser.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    parser.add_argument("--eval-records", type=int, default=100)
    parser.add_argument("--out", default=None, help="write results JSON here")
    args = parser.parse_args()

    ad.set_dtype(np.float32)
    registry = default_registry()
    corpus = generate_synthetic_corpus(args.n, args.corpus_seed, registry)
    captions = {r.record_id: caption_record(r.labs) for r in corpus.records}
    teacher = MockTeacher()
    distilled, _ = distill_rationales(corpus, captions, teacher)
    kb = build_knowledge_base(registry, fixture_documents(registry), teacher)
    tokenizer = build_tokenizer(distilled, kb)
    vk = build_knowledge_vocab(kb, tokenizer)
    train_corpus, test_corpus = split_train_test(distilled)
    from clindistill.corpus import Corpus
    eval_corpus = Corpus(test_corpus.records[:args.eval_records],
                         test_corpus.registry)

    results = {name: [] for name in VARIANTS}
    t0 = time.time()
    for seed in args.seeds:
        for name, ablations in VARIANTS.items():
            report = train_variant(train_corpus, eval_corpus, tokenizer, vk,
                                   ablations, seed)
            results[name].append(report.micro_f1)
            print(f"seed {seed} {name:12s} micro-F1 {report.micro_f1:.4f} "
                  f"({time.time() - t0:.0f}s)", flush=True)

    print()
    means = {name: float(np.mean(f1s)) for name, f1s in results.items()}
    for name, mean in means.items():
        print(f"{name:12s} mean micro-F1 {mean:.4f}  {results[name]}")
    ordered = means["full"] >= means["wo_know"] >= means["wo_reasoning"]
    print(f"\nordering full >= wo_know >= wo_reasoning: {ordered}")

    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        with open(args.out, "w") as f:
            json.dump({"means": means, "per_seed": results,
                       "ordered": ordered}, f, indent=2)


if __name__ == "__main__":
    main()
