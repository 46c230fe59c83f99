"""Synthetic EHR corpus with planted, learnable structure.

Every diagnosis label is recoverable from the record in two redundant ways:
a label-specific keyword phrase planted in the note, and a label-specific
lab-anomaly signature (one feature pushed beyond its IQR fence in one
direction for several steps). The planted rule (keyword match OR signature
match) is a Bayes-optimal oracle with micro-F1 1.0 on the generated corpus,
which is verified before any model-learning acceptance test runs.
"""
from __future__ import annotations

from typing import Dict, List, Set, Tuple

import numpy as np

from .anomaly import detect_anomalies
from .corpus import Corpus, EhrRecord, LabelRegistry, LabSeries
from .errors import SizeError

# (name, baseline mean, baseline half-spread); baseline noise is uniform in
# [mean - spread, mean + spread], so an un-excursed feature never crosses its
# own IQR fences.
FEATURES: List[Tuple[str, float, float]] = [
    ("glucose", 110.0, 20.0),
    ("creatinine", 1.0, 0.3),
    ("blood urea nitrogen", 18.0, 5.0),
    ("sodium", 140.0, 3.0),
    ("potassium", 4.2, 0.4),
    ("chloride", 102.0, 3.0),
    ("bicarbonate", 24.0, 2.0),
    ("hemoglobin", 13.0, 1.5),
    ("hematocrit", 40.0, 4.0),
    ("platelet count", 250.0, 60.0),
    ("white blood cell count", 8.0, 2.0),
    ("lactate", 1.5, 0.5),
    ("bilirubin", 0.8, 0.3),
    ("albumin", 4.0, 0.5),
]

FEATURE_NAMES = [f[0] for f in FEATURES]

KEYWORDS: Dict[str, str] = {
    "acute and unspecified renal failure": "rapid decline in urine output",
    "acute cerebrovascular disease": "sudden onset left sided weakness",
    "acute myocardial infarction": "crushing substernal chest pain",
    "cardiac dysrhythmias": "irregularly irregular pulse on exam",
    "chronic kidney disease": "longstanding reduced filtration rate",
    "chronic obstructive pulmonary disease": "chronic smoker with barrel chest",
    "complications of surgical procedures or medical care": "dehiscence of the surgical wound",
    "conduction disorders": "prolonged pr interval on tracing",
    "congestive heart failure": "orthopnea and pitting leg edema",
    "coronary atherosclerosis": "extensive calcified coronary plaque",
    "diabetes mellitus with complications": "diabetic foot ulcer with neuropathy",
    "diabetes mellitus without complication": "longstanding insulin use without sequelae",
    "disorders of lipid metabolism": "markedly elevated fasting lipid panel",
    "essential hypertension": "persistently elevated blood pressure readings",
    "fluid and electrolyte disorders": "profound derangement of serum chemistries",
    "gastrointestinal hemorrhage": "melena and coffee ground emesis",
    "hypertension with complications": "hypertensive urgency with end organ strain",
    "other liver diseases": "jaundice with ascites on exam",
    "other lower respiratory disease": "chronic productive cough with wheeze",
    "other upper respiratory disease": "persistent sinus congestion and hoarseness",
    "pleurisy and pneumothorax": "pleuritic pain with absent breath sounds",
    "pneumonia": "focal consolidation on chest film",
    "respiratory failure": "worsening hypoxia requiring ventilator support",
    "septicemia": "rigors with positive blood cultures",
    "shock": "profound hypotension despite fluid resuscitation",
}

_DISTRACTORS = [
    "patient arrived accompanied by family members.",
    "past history was reviewed from prior admissions.",
    "home medications were continued on arrival.",
    "diet was advanced as tolerated overnight.",
    "physical therapy evaluated the patient at bedside.",
    "social work was consulted for discharge planning.",
    "vital signs were monitored at regular intervals.",
    "the care team discussed goals with the patient.",
    "skin was warm and dry without rash.",
    "follow up appointments were arranged before discharge.",
    "nursing staff documented intake and output each shift.",
    "the patient slept comfortably through the night.",
    "allergies were verified against the pharmacy record.",
    "a bedside swallow screen was completed without difficulty.",
    "telemetry leads were repositioned during morning rounds.",
    "the family requested an updated visiting schedule.",
    "ambulation in the hallway was encouraged twice daily.",
    "interpreter services assisted with the consent discussion.",
    "peripheral access was maintained without complication.",
    "the chaplain visited at the request of the spouse.",
    "code status was confirmed with the attending team.",
    "sequential compression devices remained in place overnight.",
    "morning weights were obtained before breakfast.",
    "the patient tolerated repositioning without distress.",
    "discharge paperwork was started by the case manager.",
    "immunization history was updated in the chart.",
    "a quiet environment was maintained to promote rest.",
    "the resident reconciled outside records into the chart.",
    "oral care was provided per the unit protocol.",
    "transport arrived to take the patient for imaging.",
]

_LABEL_SENTENCES = [
    "the note documents {kw}.",
    "assessment is remarkable for {kw}.",
    "clinical course was notable for {kw}.",
]

_LABEL_CARDINALITY = ([0, 1, 2, 3], [0.15, 0.45, 0.30, 0.10])

# Minimum planted excursion length; the signature-match side of the planted
# rule requires at least this many flagged steps in the right direction.
MIN_EXCURSION = 6
SIGNATURE_MIN_COUNT = 3


def signature_table(registry: LabelRegistry) -> Dict[str, Tuple[int, str]]:
    """label -> (feature index, 'high'|'low'); unique per label."""
    slots = [(f, d) for d in ("high", "low") for f in range(len(FEATURES))]
    return {label: slots[i] for i, label in enumerate(registry.labels)}


def generate_synthetic_corpus(n: int, seed: int, registry: LabelRegistry) -> Corpus:
    if n < 1:
        raise SizeError("need n >= 1 records")
    rng = np.random.default_rng(seed)
    signatures = signature_table(registry)
    records = []
    for i in range(n):
        k_labels = int(rng.choice(_LABEL_CARDINALITY[0], p=_LABEL_CARDINALITY[1]))
        labels = set(rng.choice(registry.labels, size=k_labels, replace=False).tolist())
        labs = _generate_labs(rng, labels, signatures)
        note = _generate_note(rng, labels, registry)
        records.append(EhrRecord(
            record_id=f"synth-{seed}-{i:06d}",
            note=note,
            labs=labs,
            diagnoses=labels,
        ))
    return Corpus(records=records, registry=registry, split_seed=seed)


def _generate_labs(rng: np.random.Generator, labels: Set[str],
                   signatures: Dict[str, Tuple[int, str]]) -> LabSeries:
    n_steps = int(rng.integers(80, 241))
    values = np.empty((len(FEATURES), n_steps), dtype=np.float64)
    for f, (_, mean, spread) in enumerate(FEATURES):
        values[f] = mean + spread * rng.uniform(-1.0, 1.0, size=n_steps)
    # Excursion length stays a small fraction of the series so the fences,
    # recomputed per patient, still land between baseline and excursion.
    max_k = min(20, n_steps // 8)
    for label in sorted(labels):
        f, direction = signatures[label]
        _, mean, spread = FEATURES[f]
        k = int(rng.integers(MIN_EXCURSION, max_k + 1))
        start = int(rng.integers(0, n_steps - k + 1))
        magnitude = spread * (4.0 + rng.uniform(0.0, 1.0, size=k))
        if direction == "high":
            values[f, start:start + k] = mean + magnitude
        else:
            values[f, start:start + k] = mean - magnitude
    return LabSeries(FEATURE_NAMES, values, np.ones(n_steps, dtype=bool))


def _generate_note(rng: np.random.Generator, labels: Set[str],
                   registry: LabelRegistry) -> str:
    sentences = []
    for label in registry.sort(labels):
        template = _LABEL_SENTENCES[int(rng.integers(0, len(_LABEL_SENTENCES)))]
        sentences.append(template.format(kw=KEYWORDS[label]))
    n_distract = int(rng.integers(2, 5))
    picks = rng.choice(len(_DISTRACTORS), size=n_distract, replace=False)
    sentences.extend(_DISTRACTORS[j] for j in picks)
    rng.shuffle(sentences)
    return " ".join(sentences)


def planted_rule_predict(record: EhrRecord, registry: LabelRegistry) -> Set[str]:
    """Bayes-optimal oracle: keyword match in the note, or the label's
    anomaly signature firing in the lab series."""
    signatures = signature_table(registry)
    predicted = set()
    report = detect_anomalies(record.labs)
    for label in registry.labels:
        if KEYWORDS[label] in record.note:
            predicted.add(label)
            continue
        f, direction = signatures[label]
        count = report.high_counts[f] if direction == "high" else report.low_counts[f]
        if count >= SIGNATURE_MIN_COUNT:
            predicted.add(label)
    return predicted
