"""Prompt golden files, prefix discipline, the mock teacher, and distillation."""

import json
import os

import numpy as np
import pytest

from clindistill.anomaly import CaptionSet, caption_record
from clindistill.corpus import EhrRecord, LabSeries
from clindistill.errors import OrderingError, TeacherError, TemplateError
from clindistill.synthetic import generate_synthetic_corpus
from clindistill.teacher import (LAB_RATIONALE_PREFIX, NO_DISEASE_TEXT,
                                 NOTE_RATIONALE_PREFIX, MockTeacher,
                                 RemoteTeacher, RemoteTeacherConfig,
                                 build_lab_rationale_prompt,
                                 build_note_rationale_prompt,
                                 build_term_extraction_prompt,
                                 distill_rationales, load_exemplars)

GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "golden")


def _golden_record(registry):
    labs = LabSeries(["glucose", "sodium"], np.zeros((2, 4)), np.ones(4, dtype=bool))
    return EhrRecord(
        "golden-0001",
        "patient reports worsening orthopnea and bilateral leg swelling. "
        "long history of cardiac disease. currently on diuretics.",
        labs,
        {"congestive heart failure"},
    )


def _golden_captions():
    return CaptionSet(["glucose is higher than normal 2 times.",
                       "sodium is lower than normal 1 times."])


_GOLDEN_NOTE_RATIONALE = (
    "Based on the medical notes, the documented orthopnea and leg swelling "
    "supports the diagnosis of congestive heart failure.")


def test_note_prompt_matches_golden_byte_for_byte(registry):
    got = build_note_rationale_prompt(_golden_record(registry), registry,
                                      load_exemplars("note"))
    with open(os.path.join(GOLDEN_DIR, "note_prompt.txt"), encoding="utf-8") as f:
        assert got == f.read()


def test_lab_prompt_matches_golden_byte_for_byte(registry):
    got = build_lab_rationale_prompt(_golden_record(registry), _golden_captions(),
                                     _GOLDEN_NOTE_RATIONALE, registry,
                                     load_exemplars("lab"))
    with open(os.path.join(GOLDEN_DIR, "lab_prompt.txt"), encoding="utf-8") as f:
        assert got == f.read()


def test_term_prompt_matches_golden_byte_for_byte():
    got = build_term_extraction_prompt(
        "congestive heart failure",
        ["congestive heart failure: fluid overload with orthopnea. "
         "key terms: orthopnea; fluid overload."],
        ["congestive heart failure"])
    with open(os.path.join(GOLDEN_DIR, "term_prompt.txt"), encoding="utf-8") as f:
        assert got == f.read()


def test_prompts_contain_the_literal_instruction_sentences(registry):
    note_p = build_note_rationale_prompt(_golden_record(registry), registry,
                                         load_exemplars("note"))
    lab_p = build_lab_rationale_prompt(_golden_record(registry), _golden_captions(),
                                       _GOLDEN_NOTE_RATIONALE, registry,
                                       load_exemplars("lab"))
    assert 'Start with "Based on the medical notes..."' in note_p
    assert 'no disease was diagnosed' in note_p
    assert 'Start with "Lab test shows..."' in lab_p


def test_lab_prompt_requires_note_rationale_first(registry):
    with pytest.raises(OrderingError):
        build_lab_rationale_prompt(_golden_record(registry), _golden_captions(),
                                   None, registry, load_exemplars("lab"))


def test_empty_note_slot_rejected(registry):
    labs = LabSeries(["glucose"], np.zeros((1, 2)), np.ones(2, dtype=bool))
    rec = EhrRecord("r", "", labs, set())
    with pytest.raises(TemplateError):
        build_note_rationale_prompt(rec, registry, load_exemplars("note"))


def test_empty_exemplars_rejected(registry):
    with pytest.raises(TemplateError):
        build_note_rationale_prompt(_golden_record(registry), registry, [])


def test_mock_teacher_is_deterministic(registry):
    prompt = build_note_rationale_prompt(_golden_record(registry), registry,
                                         load_exemplars("note"))
    teacher = MockTeacher()
    assert (teacher.complete(prompt, "note_rationale")
            == teacher.complete(prompt, "note_rationale"))


def test_mock_teacher_prefix_discipline(registry, small_corpus):
    for rec in small_corpus.records[:20]:
        if rec.diagnoses:
            assert rec.note_rationale.startswith(NOTE_RATIONALE_PREFIX)
            assert rec.lab_rationale.startswith(LAB_RATIONALE_PREFIX)
        else:
            assert NO_DISEASE_TEXT in rec.note_rationale


def test_distill_fills_every_record(small_corpus):
    for rec in small_corpus.records:
        assert rec.note_rationale
        assert rec.lab_rationale


def test_distill_is_idempotent(registry, teacher, small_corpus):
    captions = {r.record_id: caption_record(r.labs) for r in small_corpus.records}
    again, summary = distill_rationales(small_corpus, captions, teacher)
    assert summary.n_skipped == len(small_corpus.records)
    for a, b in zip(small_corpus.records, again.records):
        assert a.note_rationale == b.note_rationale
        assert a.lab_rationale == b.lab_rationale


class _FakeResponse:
    def __init__(self, status_code, payload):
        self.status_code = status_code
        self._payload = payload
        self.text = json.dumps(payload)

    def json(self):
        return self._payload

    def raise_for_status(self):
        if self.status_code >= 400:
            raise RuntimeError(f"HTTP {self.status_code}")


class _FakeSession:
    def __init__(self, responses):
        self.responses = list(responses)
        self.calls = []

    def post(self, url, data=None, headers=None, timeout=None):
        self.calls.append((url, data, headers))
        return self.responses.pop(0)


def test_remote_teacher_retries_then_succeeds(monkeypatch):
    monkeypatch.setattr("clindistill.teacher.time.sleep", lambda s: None)
    session = _FakeSession([
        _FakeResponse(503, {"error": "busy"}),
        _FakeResponse(503, {"error": "busy"}),
        _FakeResponse(200, {"choices": [{"message": {"content": "ok"}}]}),
    ])
    cfg = RemoteTeacherConfig(base_url="http://teacher.test/v1", model="m",
                              api_key="k")
    teacher = RemoteTeacher(cfg, session=session)
    assert teacher.complete("prompt", "note") == "ok"
    assert len(session.calls) == 3
    url, body, headers = session.calls[0]
    assert url == "http://teacher.test/v1/chat/completions"
    assert json.loads(body)["temperature"] == 0
    assert headers["Authorization"] == "Bearer k"


def test_remote_teacher_gives_up_after_retries(monkeypatch):
    monkeypatch.setattr("clindistill.teacher.time.sleep", lambda s: None)
    session = _FakeSession([_FakeResponse(500, {"error": "down"})] * 10)
    cfg = RemoteTeacherConfig(base_url="http://teacher.test/v1", model="m",
                              api_key="k")
    with pytest.raises(TeacherError):
        RemoteTeacher(cfg, session=session).complete("prompt", "note")


def test_remote_config_from_env(monkeypatch):
    monkeypatch.setenv("TEACHER_BASE_URL", "http://teacher.test/v1")
    monkeypatch.setenv("TEACHER_MODEL", "big-model")
    monkeypatch.setenv("TEACHER_API_KEY", "secret")
    cfg = RemoteTeacherConfig.from_env()
    assert cfg.base_url == "http://teacher.test/v1"
    assert cfg.model == "big-model"
    assert cfg.api_key == "secret"
