"""Disease-term knowledge base and the derived knowledge token vocabulary.

Term extraction goes through the teacher and iterates until two consecutive
rounds return the same term set (or a round cap is hit). Live document
retrieval is out of scope: a bundled offline fixture provider stands in for
PubMed/Wikipedia so the whole pipeline is deterministic.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set

from .corpus import LabelRegistry
from .errors import SchemaError, TeacherError
from .teacher import build_term_extraction_prompt

logger = logging.getLogger(__name__)

DEFAULT_MAX_ROUNDS = 5


@dataclass
class DiseaseKnowledge:
    documents: List[str]
    provenance: List[str]
    terms: Set[str] = field(default_factory=set)
    rounds: int = 0
    stable: bool = False


@dataclass
class KnowledgeBase:
    entries: Dict[str, DiseaseKnowledge] = field(default_factory=dict)

    def all_terms(self) -> Set[str]:
        out: Set[str] = set()
        for e in self.entries.values():
            out |= e.terms
        return out

    def to_json(self) -> str:
        obj = {
            label: {
                "documents": e.documents,
                "provenance": e.provenance,
                "terms": sorted(e.terms),
                "rounds": e.rounds,
                "stable": e.stable,
            }
            for label, e in sorted(self.entries.items())
        }
        return json.dumps(obj, indent=2, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "KnowledgeBase":
        obj = json.loads(text)
        kb = cls()
        for label, e in obj.items():
            kb.entries[label] = DiseaseKnowledge(
                documents=list(e["documents"]),
                provenance=list(e["provenance"]),
                terms=set(e["terms"]),
                rounds=int(e["rounds"]),
                stable=bool(e["stable"]),
            )
        return kb

    def save(self, path: str) -> None:
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            f.write(self.to_json())
            f.write("\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "KnowledgeBase":
        with open(path, encoding="utf-8") as f:
            return cls.from_json(f.read())


@dataclass
class KnowledgeVocab:
    token_ids: List[int]                      # ordered by token id
    source_terms: Dict[int, List[str]]        # witness: id -> contributing terms

    def __len__(self) -> int:
        return len(self.token_ids)


def fixture_documents(registry: LabelRegistry) -> Dict[str, DiseaseKnowledge]:
    """Offline stand-in for document retrieval: two short documents per
    disease, each carrying an explicit 'key terms:' line."""
    from .synthetic import FEATURES, KEYWORDS, signature_table

    signatures = signature_table(registry)
    out = {}
    for label in registry.labels:
        kw = KEYWORDS[label]
        feature = FEATURES[signatures[label][0]][0]
        direction = signatures[label][1]
        doc1 = (f"{label}: a clinical overview. typical presentation includes {kw}. "
                f"key terms: {label}; {kw}.")
        doc2 = (f"laboratory findings in {label} often include {feature} values "
                f"{direction}er than the reference range. "
                f"key terms: {feature}; {direction} {feature}.")
        out[label] = DiseaseKnowledge(
            documents=[doc1, doc2],
            provenance=["fixture:overview", "fixture:laboratory"],
        )
    return out


def normalize_term(term: str) -> str:
    return " ".join(term.lower().split())


def extract_terms(disease: str, docs: List[str], teacher,
                  known_terms: Optional[Set[str]] = None) -> Set[str]:
    """One teacher round: returns the normalized, deduplicated term set."""
    if not docs:
        raise SchemaError(f"no documents for disease {disease!r}")
    prompt = build_term_extraction_prompt(disease, docs, sorted(known_terms or ()))
    response = teacher.complete(prompt, "term_extraction")
    terms = {normalize_term(line) for line in response.splitlines()}
    terms.discard("")
    return terms


def build_knowledge_base(registry: LabelRegistry,
                         docs_per_disease: Dict[str, DiseaseKnowledge],
                         teacher,
                         max_rounds: int = DEFAULT_MAX_ROUNDS) -> KnowledgeBase:
    """Iterate extraction per disease until two consecutive rounds agree."""
    if max_rounds < 1:
        raise SchemaError("max_rounds must be >= 1")
    kb = KnowledgeBase()
    for label in registry.labels:
        if label not in docs_per_disease:
            raise SchemaError(f"no documents provided for label {label!r}")
        src = docs_per_disease[label]
        entry = DiseaseKnowledge(documents=list(src.documents),
                                 provenance=list(src.provenance))
        prev: Optional[Set[str]] = None
        terms: Set[str] = set()
        rounds = 0
        stable = False
        while rounds < max_rounds:
            try:
                terms = extract_terms(label, entry.documents, teacher, known_terms=terms)
            except TeacherError as exc:
                raise TeacherError(
                    f"knowledge extraction failed for {label!r} "
                    f"after {rounds} completed rounds: {exc}") from exc
            rounds += 1
            if prev is not None and terms == prev:
                stable = True
                break
            prev = terms
        entry.terms = terms
        entry.rounds = rounds
        entry.stable = stable
        if not stable:
            logger.warning("term set for %r did not stabilize in %d rounds", label, max_rounds)
        kb.entries[label] = entry
    return kb


def build_knowledge_vocab(kb: KnowledgeBase, tokenizer) -> KnowledgeVocab:
    """Knowledge vocabulary: every tokenizer id appearing in the tokenization
    of some knowledge term. Tokens outside the tokenizer vocabulary are
    dropped with a warning (the vocabulary is fixed after tokenizer build)."""
    source: Dict[int, List[str]] = {}
    for term in sorted(kb.all_terms()):
        for token in tokenizer.tokenize(term):
            tid = tokenizer.token_to_id.get(token)
            if tid is None:
                logger.warning("knowledge token %r not in vocabulary; dropped", token)
                continue
            source.setdefault(tid, [])
            if term not in source[tid]:
                source[tid].append(term)
    ids = sorted(source.keys())
    return KnowledgeVocab(token_ids=ids, source_terms=source)
