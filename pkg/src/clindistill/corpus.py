"""EHR record model, JSONL wire format, padding/patching, and splitting.

A record is one patient stay: free-text note, a multivariate lab time series,
a set of diagnosis labels from a fixed 25-label registry, and (after
distillation) a note rationale and a lab rationale.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import List, Optional, Set, Tuple

import numpy as np

from .errors import ParseError, SchemaError, SizeError

MAX_STEPS = 1000
N_PATCHES = 125
PATCH_LEN = 8

_REGISTRY_PATH = os.path.join(os.path.dirname(__file__), "fixtures", "label_registry.json")


@dataclass(frozen=True)
class LabelRegistry:
    labels: Tuple[str, ...]

    def __post_init__(self):
        if len(self.labels) != 25:
            raise SchemaError(f"registry must hold exactly 25 labels, got {len(self.labels)}")
        if len(set(self.labels)) != len(self.labels):
            raise SchemaError("registry labels must be unique")

    def index(self, label: str) -> int:
        return self.labels.index(label)

    def sort(self, labels) -> List[str]:
        """Canonical (registry) order, used everywhere labels are serialized."""
        return [l for l in self.labels if l in set(labels)]


def default_registry() -> LabelRegistry:
    with open(_REGISTRY_PATH) as f:
        return LabelRegistry(tuple(json.load(f)))


@dataclass
class LabSeries:
    feature_names: List[str]
    values: np.ndarray       # [n_features, n_steps]
    step_mask: np.ndarray    # [n_steps] bool, False = padding

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.step_mask = np.asarray(self.step_mask, dtype=bool)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.feature_names):
            raise SchemaError("values must be [n_features x n_steps]")
        if self.step_mask.shape != (self.values.shape[1],):
            raise SchemaError("step_mask length must equal n_steps")

    @property
    def n_features(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]


@dataclass
class PatchGrid:
    feature_names: List[str]
    values: np.ndarray       # [n_features, N_PATCHES, PATCH_LEN]
    step_mask: np.ndarray    # [N_PATCHES, PATCH_LEN] bool
    n_valid_steps: int

    @property
    def patch_mask(self) -> np.ndarray:
        """[N_PATCHES] bool, True where the patch holds at least one real step."""
        return self.step_mask.any(axis=1)


@dataclass
class EhrRecord:
    record_id: str
    note: str
    labs: LabSeries
    diagnoses: Set[str]
    note_rationale: Optional[str] = None
    lab_rationale: Optional[str] = None

    def validate(self, registry: LabelRegistry) -> None:
        unknown = self.diagnoses - set(registry.labels)
        if unknown:
            raise SchemaError(f"unknown label(s): {sorted(unknown)}")
        if self.lab_rationale is not None and self.note_rationale is None:
            raise SchemaError(
                f"record {self.record_id}: lab rationale present without note rationale")


@dataclass
class Corpus:
    records: List[EhrRecord]
    registry: LabelRegistry
    split_seed: int = 0

    def __post_init__(self):
        ids = [r.record_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise SchemaError("record ids must be unique")
        for rec in self.records:
            rec.validate(self.registry)


def fill_missing(values: np.ndarray) -> np.ndarray:
    """Fill NaNs with the nearest available value along time within a feature;
    ties broken toward the earlier step. A feature with no values becomes 0."""
    out = values.copy()
    n_steps = out.shape[1]
    for f in range(out.shape[0]):
        row = out[f]
        valid = np.flatnonzero(~np.isnan(row))
        if valid.size == 0:
            out[f] = 0.0
            continue
        if valid.size == n_steps:
            continue
        for t in np.flatnonzero(np.isnan(row)):
            dist = np.abs(valid - t)
            # argmin takes the first minimum, i.e. the earlier step on ties
            row[t] = row[valid[np.argmin(dist)]]
    return out


# ---- wire format ------------------------------------------------------------


def _record_to_json(record: EhrRecord, registry: LabelRegistry) -> str:
    obj = {
        "id": record.record_id,
        "note": record.note,
        "lab_features": list(record.labs.feature_names),
        "lab_values": [[float(v) for v in row] for row in record.labs.values],
        "diagnoses": registry.sort(record.diagnoses),
    }
    if record.note_rationale is not None:
        obj["rationale_note"] = record.note_rationale
    if record.lab_rationale is not None:
        obj["rationale_lab"] = record.lab_rationale
    return json.dumps(obj, ensure_ascii=False)


def _record_from_json(obj: dict, registry: LabelRegistry) -> EhrRecord:
    values = np.array(
        [[math.nan if v is None else float(v) for v in row] for row in obj["lab_values"]],
        dtype=np.float64,
    )
    if values.size == 0:
        values = values.reshape(len(obj["lab_features"]), 0)
    if np.isnan(values).any():
        values = fill_missing(values)
    labs = LabSeries(
        feature_names=list(obj["lab_features"]),
        values=values,
        step_mask=np.ones(values.shape[1], dtype=bool),
    )
    record = EhrRecord(
        record_id=obj["id"],
        note=obj["note"],
        labs=labs,
        diagnoses=set(obj["diagnoses"]),
        note_rationale=obj.get("rationale_note"),
        lab_rationale=obj.get("rationale_lab"),
    )
    record.validate(registry)
    return record


def save_corpus(corpus: Corpus, path: str) -> None:
    """One JSON object per line; byte output is deterministic for a corpus."""
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        for record in corpus.records:
            f.write(_record_to_json(record, corpus.registry))
            f.write("\n")
    os.replace(tmp, path)


def load_corpus(path: str, registry: Optional[LabelRegistry] = None,
                split_seed: int = 0) -> Corpus:
    registry = registry or default_registry()
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: malformed record: {exc}") from exc
            try:
                records.append(_record_from_json(obj, registry))
            except KeyError as exc:
                raise ParseError(f"{path}:{lineno}: missing field {exc}") from exc
    return Corpus(records=records, registry=registry, split_seed=split_seed)


# ---- padding / patching ------------------------------------------------------


def pad_and_patch(labs: LabSeries) -> PatchGrid:
    """Pad to MAX_STEPS and fold into N_PATCHES patches of PATCH_LEN steps.

    Padded positions carry value 0 and an invalid mask; series longer than
    MAX_STEPS are a hard error (silent truncation is never acceptable here).
    """
    n_valid = int(labs.step_mask.sum())
    if labs.n_steps > MAX_STEPS:
        raise SizeError(f"series of {labs.n_steps} steps exceeds the {MAX_STEPS}-step limit")
    padded = np.zeros((labs.n_features, MAX_STEPS), dtype=np.float64)
    padded[:, : labs.n_steps] = np.where(labs.step_mask, labs.values, 0.0)
    mask = np.zeros(MAX_STEPS, dtype=bool)
    mask[: labs.n_steps] = labs.step_mask
    return PatchGrid(
        feature_names=list(labs.feature_names),
        values=padded.reshape(labs.n_features, N_PATCHES, PATCH_LEN),
        step_mask=mask.reshape(N_PATCHES, PATCH_LEN),
        n_valid_steps=n_valid,
    )


def unpatch(grid: PatchGrid) -> LabSeries:
    """Recover the unpadded prefix of the original series."""
    flat_mask = grid.step_mask.reshape(-1)
    n = int(flat_mask.sum())
    flat = grid.values.reshape(len(grid.feature_names), -1)
    return LabSeries(
        feature_names=list(grid.feature_names),
        values=flat[:, :n],
        step_mask=flat_mask[:n],
    )


# ---- splitting ---------------------------------------------------------------


def split_train_test(corpus: Corpus) -> Tuple[Corpus, Corpus]:
    """Deterministic 4:1 split by seeded shuffle; train gets ceil(0.8 n)."""
    n = len(corpus.records)
    if n < 5:
        raise SizeError(f"need at least 5 records to split, got {n}")
    rng = np.random.default_rng(corpus.split_seed)
    order = rng.permutation(n)
    n_train = math.ceil(0.8 * n)
    train_idx = sorted(order[:n_train].tolist())
    test_idx = sorted(order[n_train:].tolist())
    train = Corpus([corpus.records[i] for i in train_idx], corpus.registry, corpus.split_seed)
    test = Corpus([corpus.records[i] for i in test_idx], corpus.registry, corpus.split_seed)
    return train, test
