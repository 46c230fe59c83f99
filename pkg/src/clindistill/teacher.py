"""Prompt assembly and the teacher clients (deterministic mock, remote HTTP).

The two rationale prompts are fixed skeletons; rendering is byte-exact and
covered by golden-file tests. The mock teacher is scripted from the synthetic
generator's ground truth and parses its inputs straight out of the rendered
prompt, so it exercises the same wire surface as a remote teacher.
"""
from __future__ import annotations

import json
import os
import re
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .anomaly import CaptionSet, parse_caption
from .corpus import Corpus, EhrRecord, LabelRegistry
from .errors import OrderingError, SchemaError, TeacherError, TemplateError

NOTE_RATIONALE_PREFIX = "Based on the medical notes"
LAB_RATIONALE_PREFIX = "Lab test shows"
NO_DISEASE_TEXT = "no disease was diagnosed"

_FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")

NOTE_PROMPT_SKELETON = """Below is an instruction that describes examples of generating the rationale of disease diagnosis; please refer to the examples style to generate the Output from the Input:

### Instruction:

There are some examples please to refer:

{exemplars}

### Input:

### Medical note: [{note}]

### Diagnosed diseases: [{diseases}]

Please review the patient's medical records. Adhere to the provided format to craft a succinct 100-word rationale for diagnosing these conditions (Start with "Based on the medical notes..."). If the diagnosis indicates "no disease was diagnosed," the rationale must state "no disease was diagnosed." Otherwise, provide a comprehensive rationale for the diagnosis.

### Response:

### Output:

### Medical note-based Rationale: ["""

LAB_PROMPT_SKELETON = """Below is an instruction that describes examples of generating the rationale of disease diagnosis, please refer to the examples style to generate the Output from the Input:

### Instruction:

There are some examples please to refer:

{exemplars}

### Input:

### Medical note: [{note}]

### Descriptions of lab test abnormalities: [{captions}]

### Diagnosed diseases: [{diseases}]

### Medical note-based rationale: [{note_rationale}]

Please review the patient's medical notes, laboratory test anomaly results, and existing rationales in the medical record. Construct a concise, one-sentence rationale, limited to max 50 words, that accurately describes a diagnosed condition based on descriptions of laboratory test abnormalities (Start with "Lab test shows..."). Pay close attention to potential inaccuracies in the lab descriptions.

### Response:

### Output:

### Lab test-based rationale: ["""

TERM_PROMPT_SKELETON = """Below is an instruction that describes how to extract key medical terms for a disease from reference documents.

### Instruction:

Read the documents and extract the key medical terms most relevant to the disease. Return one lowercase term per line. Include previously known terms that remain relevant.

### Input:

### Disease: [{disease}]

### Documents: [{documents}]

### Known terms: [{terms}]

### Response:

### Output:

### Key medical terms: ["""


def _render_exemplars(exemplars: List[str]) -> str:
    if not exemplars:
        raise TemplateError("exemplar slot is empty")
    return "\n\n".join(f"Example {i}: {text}" for i, text in enumerate(exemplars, start=1))


def _render_diseases(diagnoses, registry: LabelRegistry) -> str:
    labels = registry.sort(diagnoses)
    return "; ".join(labels) if labels else NO_DISEASE_TEXT


def load_exemplars(kind: str) -> List[str]:
    """Clinician-style exemplars shipped as editable fixture files, one per
    paragraph (blank-line separated)."""
    path = os.path.join(_FIXTURES, f"exemplars_{kind}.txt")
    with open(path, encoding="utf-8") as f:
        blocks = [b.strip() for b in f.read().split("\n\n")]
    return [b for b in blocks if b]


def build_note_rationale_prompt(record: EhrRecord, registry: LabelRegistry,
                                exemplars: List[str]) -> str:
    if not record.note:
        raise TemplateError("medical note slot is empty")
    return NOTE_PROMPT_SKELETON.format(
        exemplars=_render_exemplars(exemplars),
        note=record.note,
        diseases=_render_diseases(record.diagnoses, registry),
    )


def build_lab_rationale_prompt(record: EhrRecord, captions: CaptionSet,
                               note_rationale: Optional[str],
                               registry: LabelRegistry,
                               exemplars: List[str]) -> str:
    if note_rationale is None:
        raise OrderingError("lab rationale requires the note rationale first")
    if not record.note:
        raise TemplateError("medical note slot is empty")
    return LAB_PROMPT_SKELETON.format(
        exemplars=_render_exemplars(exemplars),
        note=record.note,
        captions=" ".join(captions.captions),
        diseases=_render_diseases(record.diagnoses, registry),
        note_rationale=note_rationale,
    )


def build_term_extraction_prompt(disease: str, docs: List[str],
                                 known_terms: List[str]) -> str:
    if not docs:
        raise TemplateError("documents slot is empty")
    return TERM_PROMPT_SKELETON.format(
        disease=disease,
        documents=" | ".join(docs),
        terms="; ".join(sorted(known_terms)) if known_terms else "none",
    )


# ---- clients ----------------------------------------------------------------


@dataclass
class RetryPolicy:
    max_attempts: int = 3
    backoff_seconds: float = 1.0


class MockTeacher:
    """Deterministic scripted teacher. It reads the slots back out of the
    rendered prompt and answers from the synthetic generator's keyword table,
    so distilled rationales always contain the planted evidence."""

    def __init__(self):
        self.n_calls = 0

    def complete(self, prompt: str, kind: str) -> str:
        self.n_calls += 1
        if kind == "note_rationale":
            return self._note_rationale(prompt)
        if kind == "lab_rationale":
            return self._lab_rationale(prompt)
        if kind == "term_extraction":
            return self._terms(prompt)
        raise TeacherError(f"unknown prompt kind: {kind}")

    @staticmethod
    def _slot(prompt: str, name: str) -> str:
        m = re.search(re.escape(f"### {name}: [") + r"(.*?)\]", prompt, re.DOTALL)
        if not m:
            raise TeacherError(f"prompt is missing slot {name!r}")
        return m.group(1)

    def _note_rationale(self, prompt: str) -> str:
        from .synthetic import KEYWORDS

        note = self._slot(prompt, "Medical note")
        diseases = self._slot(prompt, "Diagnosed diseases")
        if diseases == NO_DISEASE_TEXT:
            return NO_DISEASE_TEXT + "."
        labels = [d.strip() for d in diseases.split(";")]
        evidence = [KEYWORDS[l] for l in labels if l in KEYWORDS and KEYWORDS[l] in note]
        if evidence:
            return (f"{NOTE_RATIONALE_PREFIX}, the documented {', '.join(evidence)} "
                    f"supports the diagnosis of {diseases}.")
        return f"{NOTE_RATIONALE_PREFIX}, the overall picture supports the diagnosis of {diseases}."

    def _lab_rationale(self, prompt: str) -> str:
        captions_text = self._slot(prompt, "Descriptions of lab test abnormalities")
        diseases = self._slot(prompt, "Diagnosed diseases")
        fragments = []
        for sentence in re.findall(r"[^.]+\.", captions_text):
            feature, h, l = parse_caption(sentence.strip())
            if h > 0:
                fragments.append(f"{feature} higher than normal {h} times")
            if l > 0:
                fragments.append(f"{feature} lower than normal {l} times")
        fragments = fragments[:3]
        if not fragments or diseases == NO_DISEASE_TEXT:
            return f"{LAB_RATIONALE_PREFIX} no significant abnormalities."
        return f"{LAB_RATIONALE_PREFIX} {'; '.join(fragments)}; consistent with {diseases}."

    def _terms(self, prompt: str) -> str:
        documents = self._slot(prompt, "Documents")
        disease = self._slot(prompt, "Disease")
        terms = [disease]
        for m in re.finditer(r"key terms: ([^.]+)\.", documents):
            terms.extend(t.strip() for t in m.group(1).split(";"))
        return "\n".join(terms)


@dataclass
class RemoteTeacherConfig:
    base_url: str
    model: str
    api_key: str = ""
    retry: RetryPolicy = field(default_factory=RetryPolicy)

    @classmethod
    def from_env(cls) -> "RemoteTeacherConfig":
        base_url = os.environ.get("TEACHER_BASE_URL")
        model = os.environ.get("TEACHER_MODEL")
        if not base_url or not model:
            raise TeacherError("TEACHER_BASE_URL and TEACHER_MODEL must be set for remote mode")
        return cls(base_url=base_url, model=model,
                   api_key=os.environ.get("TEACHER_API_KEY", ""))


class RemoteTeacher:
    """Generic chat-completion client: POST {base_url}/chat/completions with a
    JSON body; no vendor specifics beyond that shape. Temperature is pinned to
    0 (decoding settings are unspecified upstream; this is our default)."""

    def __init__(self, config: RemoteTeacherConfig, session=None):
        import requests

        self.config = config
        self.session = session or requests.Session()

    def complete(self, prompt: str, kind: str) -> str:
        cfg = self.config
        headers = {"Content-Type": "application/json"}
        if cfg.api_key:
            headers["Authorization"] = f"Bearer {cfg.api_key}"
        body = {
            "model": cfg.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        }
        last_exc: Optional[Exception] = None
        for attempt in range(1, cfg.retry.max_attempts + 1):
            try:
                resp = self.session.post(
                    cfg.base_url.rstrip("/") + "/chat/completions",
                    data=json.dumps(body), headers=headers, timeout=60)
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"]
            except Exception as exc:  # noqa: BLE001 - every failure is retryable here
                last_exc = exc
                if attempt < cfg.retry.max_attempts:
                    time.sleep(cfg.retry.backoff_seconds * (2 ** (attempt - 1)))
        raise TeacherError(
            f"teacher call failed after {cfg.retry.max_attempts} attempts: {last_exc}")


# ---- distillation ------------------------------------------------------------


@dataclass
class DistillSummary:
    n_records: int = 0
    n_skipped: int = 0
    n_failed: int = 0
    failed_ids: List[str] = field(default_factory=list)


def _note_rationale_valid(text: str, has_diagnoses: bool) -> bool:
    if text.startswith(NOTE_RATIONALE_PREFIX):
        return True
    # the prompt's special case for empty diagnoses
    return not has_diagnoses and text.strip() == NO_DISEASE_TEXT + "."


def distill_rationales(corpus: Corpus, captions: Dict[str, CaptionSet], teacher,
                       max_attempts: int = 3) -> Tuple[Corpus, DistillSummary]:
    """Fill note then lab rationales for every record, in that order.

    Responses violating the prefix discipline are regenerated up to
    max_attempts; a record whose teacher calls are exhausted is left
    unmodified and counted in the summary. Records already holding both
    rationales are skipped (idempotent resume).
    """
    note_exemplars = load_exemplars("note")
    lab_exemplars = load_exemplars("lab")
    summary = DistillSummary(n_records=len(corpus.records))
    out_records = []
    for record in corpus.records:
        if record.note_rationale is not None and record.lab_rationale is not None:
            summary.n_skipped += 1
            out_records.append(record)
            continue
        if record.record_id not in captions:
            raise SchemaError(f"no captions for record {record.record_id}")
        try:
            note_rat = _generate_validated(
                teacher, "note_rationale",
                build_note_rationale_prompt(record, corpus.registry, note_exemplars),
                lambda t, rec=record: _note_rationale_valid(t, bool(rec.diagnoses)),
                max_attempts)
            lab_prompt = build_lab_rationale_prompt(
                record, captions[record.record_id], note_rat,
                corpus.registry, lab_exemplars)
            lab_rat = _generate_validated(
                teacher, "lab_rationale", lab_prompt,
                lambda t: t.startswith(LAB_RATIONALE_PREFIX), max_attempts)
        except TeacherError:
            summary.n_failed += 1
            summary.failed_ids.append(record.record_id)
            out_records.append(record)
            continue
        out_records.append(EhrRecord(
            record_id=record.record_id, note=record.note, labs=record.labs,
            diagnoses=record.diagnoses,
            note_rationale=note_rat, lab_rationale=lab_rat))
    return Corpus(out_records, corpus.registry, corpus.split_seed), summary


def _generate_validated(teacher, kind: str, prompt: str, valid, max_attempts: int) -> str:
    last = ""
    for _ in range(max_attempts):
        last = teacher.complete(prompt, kind).strip()
        if valid(last):
            return last
    raise TeacherError(
        f"{kind} failed validation after {max_attempts} attempts (last: {last[:80]!r})")
