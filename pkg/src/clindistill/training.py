"""Three-phase sequential rationale-distillation schedule.

Phase 1 trains the sequence model on notes alone; phase 2 freezes it
(bitwise, hash-verified) and trains only the fusion stack on the fused lab
sequence; phase 3 trains everything on the prefix-fused input. Optimizer
state is reset at phase boundaries (a documented choice). Checkpoints are a
self-contained deterministic binary format; the run manifest is JSON.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .corpus import Corpus
from .errors import TrainingError
from .evaluation import MetricReport, evaluate_model
from .knowledge import KnowledgeVocab
from .model import (ClinDistillModel, SlmConfig, Tokenizer, PAD, SEP, UNK, BOS, EOS)
from .optim import GROUP_FUSION, GROUP_SLM, AdamW, lr_at

CHECKPOINT_MAGIC = b"CLDK0001"


@dataclass
class Ablations:
    without_know: bool = False
    without_reasoning: bool = False
    without_lab_and_know: bool = False


@dataclass
class PhaseConfig:
    phase: int
    epochs: int = 5
    batch_size: int = 16
    base_lr: float = 1e-5
    weight_decay: float = 0.05
    seed: int = 0
    ablations: Ablations = field(default_factory=Ablations)

    def __post_init__(self):
        if self.phase not in (1, 2, 3):
            raise TrainingError(f"unknown phase {self.phase}")
        if self.ablations.without_lab_and_know and self.phase in (2, 3):
            raise TrainingError(
                "the lab-and-knowledge ablation runs phase 1 only")


@dataclass
class TrainState:
    model: ClinDistillModel
    optimizer: AdamW
    step: int
    rng: np.random.Generator
    phase: int
    epoch_losses: List[float] = field(default_factory=list)
    provenance: str = "fresh"


def full_vocab_knowledge(tokenizer: Tokenizer) -> KnowledgeVocab:
    """The 'without knowledge' ablation: attend over the whole non-special
    vocabulary instead of the knowledge-filtered subset."""
    ids = [i for i in range(len(tokenizer)) if i not in (PAD, BOS, EOS, UNK, SEP)]
    return KnowledgeVocab(token_ids=ids, source_terms={i: [] for i in ids})


# ---- batching -----------------------------------------------------------------


def _make_batches(model: ClinDistillModel, corpus: Corpus, target_fn,
                  batch_size: int) -> List[Tuple[list, np.ndarray]]:
    """Bucket records by target length to bound padding waste; batch
    composition is fixed, only batch order is shuffled per epoch."""
    records = sorted(corpus.records,
                     key=lambda r: (len(target_fn(r)), r.record_id))
    batches = []
    for lo in range(0, len(records), batch_size):
        chunk = records[lo: lo + batch_size]
        id_lists = [target_fn(r) for r in chunk]
        max_len = max(len(x) for x in id_lists)
        ids = np.full((len(chunk), max_len), PAD, dtype=np.int64)
        for i, row in enumerate(id_lists):
            ids[i, : len(row)] = row
        batches.append((chunk, ids))
    return batches


def _run_phase(model: ClinDistillModel, corpus: Corpus, cfg: PhaseConfig,
               encode_fn: Callable, target_fn: Callable) -> TrainState:
    optimizer = AdamW(model.store, lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    batches = _make_batches(model, corpus, target_fn, cfg.batch_size)
    total_steps = cfg.epochs * len(batches)
    state = TrainState(model=model, optimizer=optimizer, step=0, rng=rng,
                       phase=cfg.phase)
    for _ in range(cfg.epochs):
        order = rng.permutation(len(batches))
        epoch_loss = 0.0
        for bi in order:
            chunk, target_ids = batches[bi]
            model.store.zero_grad()
            enc, valid = encode_fn(chunk)
            loss = model.forward_loss(enc, valid, target_ids)
            ad.backward(loss)
            optimizer.step(lr=lr_at(state.step, total_steps, cfg.base_lr))
            state.step += 1
            epoch_loss += loss.item()
        state.epoch_losses.append(epoch_loss / len(batches))
    return state


def _require_rationales(corpus: Corpus, need_note: bool, need_lab: bool) -> None:
    for r in corpus.records:
        if need_note and r.note_rationale is None:
            raise TrainingError(
                f"record {r.record_id} lacks a note rationale; distill first "
                "or pass the reasoning ablation")
        if need_lab and r.lab_rationale is None:
            raise TrainingError(
                f"record {r.record_id} lacks a lab rationale; distill first "
                "or pass the reasoning ablation")


def train_phase1(corpus: Corpus, model: ClinDistillModel,
                 cfg: PhaseConfig) -> TrainState:
    """Note-only input; targets are labels + both rationales (labels only
    under the reasoning ablation). Trains the SLM group; fusion untouched."""
    if cfg.phase != 1:
        raise TrainingError("train_phase1 needs a phase-1 config")
    with_rat = not cfg.ablations.without_reasoning
    if with_rat:
        _require_rationales(corpus, True, True)
    model.store.set_trainable(GROUP_SLM, True)
    model.store.set_trainable(GROUP_FUSION, False)
    fusion_before = model.store.group_hash(GROUP_FUSION)

    def target_fn(r):
        return model.target_ids(r, corpus.registry, with_rat, with_rat)

    state = _run_phase(model, corpus, cfg, model.encode_phase1, target_fn)
    if model.store.group_hash(GROUP_FUSION) != fusion_before:
        raise TrainingError("phase 1 mutated fusion parameters")
    return state


def train_phase2(corpus: Corpus, model: ClinDistillModel, vk: KnowledgeVocab,
                 cfg: PhaseConfig) -> TrainState:
    """Fused-lab input; targets are labels + lab rationale. SLM group is
    frozen and hash-checked; only the fusion group trains."""
    if cfg.phase != 2:
        raise TrainingError("train_phase2 needs a phase-2 config")
    with_rat = not cfg.ablations.without_reasoning
    if with_rat:
        _require_rationales(corpus, False, True)
    if cfg.ablations.without_know:
        vk = full_vocab_knowledge(model.tokenizer)
    model.store.set_trainable(GROUP_SLM, False)
    model.store.set_trainable(GROUP_FUSION, True)
    slm_before = model.store.group_hash(GROUP_SLM)

    def target_fn(r):
        return model.target_ids(r, corpus.registry, False, with_rat)

    state = _run_phase(model, corpus, cfg,
                       lambda chunk: model.encode_phase2(chunk, vk), target_fn)
    if model.store.group_hash(GROUP_SLM) != slm_before:
        raise TrainingError("phase 2 mutated frozen SLM parameters")
    return state


def train_phase3(corpus: Corpus, model: ClinDistillModel, vk: KnowledgeVocab,
                 cfg: PhaseConfig, prev_phase: int = 2) -> TrainState:
    """Prefix-fused input; all parameters train."""
    if cfg.phase != 3:
        raise TrainingError("train_phase3 needs a phase-3 config")
    if prev_phase != 2:
        raise TrainingError(
            f"phase 3 requires a phase-2 checkpoint, got phase {prev_phase}")
    with_rat = not cfg.ablations.without_reasoning
    if with_rat:
        _require_rationales(corpus, True, True)
    if cfg.ablations.without_know:
        vk = full_vocab_knowledge(model.tokenizer)
    model.store.set_trainable(GROUP_SLM, True)
    model.store.set_trainable(GROUP_FUSION, True)

    def target_fn(r):
        return model.target_ids(r, corpus.registry, with_rat, with_rat)

    return _run_phase(model, corpus, cfg,
                      lambda chunk: model.encode_phase3(chunk, vk), target_fn)


# ---- checkpoints ----------------------------------------------------------------


def save_checkpoint(path: str, state: TrainState,
                    knowledge_ids: Optional[List[int]] = None) -> None:
    """Deterministic binary: magic | header length | JSON header | raw
    float64 blobs (params, then Adam moments) in header order."""
    model = state.model
    store = model.store
    names = sorted(store.params.keys())
    opt_names = sorted(n for n in state.optimizer.state if n in store.params)
    header = {
        "version": 1,
        "phase": state.phase,
        "step": state.step,
        "config": model.config.to_dict(),
        "tokenizer": model.tokenizer.id_to_token,
        "params": [
            {"name": n, "shape": list(store.params[n].data.shape),
             "group": store.groups[n], "trainable": store.trainable[n]}
            for n in names
        ],
        "opt": [{"name": n, "step": state.optimizer.state[n]["step"]}
                for n in opt_names],
        "opt_hyper": {"lr": state.optimizer.lr, "betas": list(state.optimizer.betas),
                      "eps": state.optimizer.eps,
                      "weight_decay": state.optimizer.weight_decay},
        "rng_state": _rng_state_to_json(state.rng),
        "epoch_losses": state.epoch_losses,
        "knowledge_ids": knowledge_ids,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(store.params[n].data, dtype="<f8").tobytes())
        for n in opt_names:
            st = state.optimizer.state[n]
            f.write(np.ascontiguousarray(st["m"], dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(st["v"], dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Tuple[TrainState, Optional[List[int]]]:
    with open(path, "rb") as f:
        if f.read(8) != CHECKPOINT_MAGIC:
            raise TrainingError(f"{path} is not a checkpoint")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen))
        cfg = SlmConfig(**header["config"])
        tokenizer = Tokenizer(header["tokenizer"])
        model = ClinDistillModel(cfg, tokenizer)
        for meta in header["params"]:
            shape = tuple(meta["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(f.read(count * 8), dtype="<f8").reshape(shape)
            p = model.store.params[meta["name"]]
            p.data = arr.copy()
            model.store.trainable[meta["name"]] = meta["trainable"]
        hyper = header["opt_hyper"]
        optimizer = AdamW(model.store, lr=hyper["lr"], betas=tuple(hyper["betas"]),
                          eps=hyper["eps"], weight_decay=hyper["weight_decay"])
        for meta in header["opt"]:
            shape = model.store.params[meta["name"]].data.shape
            count = int(np.prod(shape)) if shape else 1
            m = np.frombuffer(f.read(count * 8), dtype="<f8").reshape(shape).copy()
            v = np.frombuffer(f.read(count * 8), dtype="<f8").reshape(shape).copy()
            optimizer.state[meta["name"]] = {"step": meta["step"], "m": m, "v": v}
    rng = _rng_state_from_json(header["rng_state"])
    state = TrainState(model=model, optimizer=optimizer, step=header["step"],
                       rng=rng, phase=header["phase"],
                       epoch_losses=list(header["epoch_losses"]),
                       provenance=path)
    return state, header.get("knowledge_ids")


def _rng_state_to_json(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=int))


def _rng_state_from_json(obj: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    state = dict(obj)
    inner = dict(state["state"])
    inner["state"] = int(inner["state"])
    inner["inc"] = int(inner["inc"])
    state["state"] = inner
    rng.bit_generator.state = state
    return rng


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---- pipeline -------------------------------------------------------------------


@dataclass
class PipelineResult:
    manifest: dict
    final_checkpoint: str
    report: MetricReport


def run_pipeline(train_corpus: Corpus, test_corpus: Corpus,
                 model: ClinDistillModel, vk: KnowledgeVocab,
                 phase_configs: Dict[int, PhaseConfig],
                 out_dir: str,
                 ablations: Optional[Ablations] = None) -> PipelineResult:
    """Execute phases 1 -> 2 -> 3 (or phase 1 only under the lab-and-know
    ablation), evaluating after each, and write a machine-readable manifest."""
    os.makedirs(out_dir, exist_ok=True)
    ablations = ablations or Ablations()
    manifest: dict = {
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "model_config": model.config.to_dict(),
        "ablations": asdict(ablations),
        "phases": [],
    }
    knowledge_ids = list(vk.token_ids)
    phases = [1] if ablations.without_lab_and_know else [1, 2, 3]
    last_ckpt = ""
    last_report: Optional[MetricReport] = None
    prev_phase = 0
    step_base = 0
    for phase in phases:
        cfg = phase_configs[phase]
        cfg.ablations = ablations
        if phase == 1:
            state = train_phase1(train_corpus, model, cfg)
        elif phase == 2:
            state = train_phase2(train_corpus, model, vk, cfg)
        else:
            state = train_phase3(train_corpus, model, vk, cfg, prev_phase=prev_phase)
        state.step += step_base
        step_base = state.step
        ckpt = os.path.join(out_dir, f"phase{phase}.ckpt")
        save_checkpoint(ckpt, state, knowledge_ids=knowledge_ids)
        report = evaluate_model(model, test_corpus, vk, mode=f"phase{phase}",
                                seed=cfg.seed)
        manifest["phases"].append({
            "phase": phase,
            "config": {**asdict(cfg), "ablations": asdict(ablations)},
            "epoch_losses": state.epoch_losses,
            "final_step": state.step,
            "checkpoint": os.path.basename(ckpt),
            "checkpoint_sha256": file_sha256(ckpt),
            "metrics": report.to_dict(),
        })
        last_ckpt = ckpt
        last_report = report
        prev_phase = phase
    manifest_path = os.path.join(out_dir, "manifest.json")
    tmp = manifest_path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, manifest_path)
    assert last_report is not None
    return PipelineResult(manifest=manifest, final_checkpoint=last_ckpt,
                          report=last_report)
