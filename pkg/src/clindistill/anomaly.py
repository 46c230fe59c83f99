"""IQR anomaly detection for lab series and template-based captioning.

Quantile convention: linear interpolation between order statistics (numpy's
default). Values exactly on a fence are not anomalies (strict inequality),
which also makes constant series anomaly-free. Both choices are enforced by
golden tests because downstream text metrics depend on them.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .corpus import LabSeries
from .errors import SchemaError, SizeError

# Grammar preserved verbatim, including "1 times": the captions feed prompts
# that must match the fixed wording bit-for-bit.
TEMPLATE_NORMAL = "{feature} is normal all the time."
TEMPLATE_HIGH = "{feature} is higher than normal {h} times."
TEMPLATE_LOW = "{feature} is lower than normal {l} times."
TEMPLATE_BOTH = "{feature} is higher than normal {h} times and lower than normal {l} times."

_CAPTION_RE = re.compile(
    r"^(?P<feature>.+?) is (?:normal all the time"
    r"|higher than normal (?P<h>\d+) times(?: and lower than normal (?P<l2>\d+) times)?"
    r"|lower than normal (?P<l>\d+) times)\.$"
)


@dataclass
class AnomalyReport:
    feature_names: List[str]
    high_counts: List[int]
    low_counts: List[int]
    fences: List[Optional[Tuple[float, float]]]  # None when a feature has no valid steps


@dataclass
class CaptionSet:
    captions: List[str]  # one per feature, in feature order

    def text(self) -> str:
        return " ".join(self.captions)


def iqr_fences(values) -> Tuple[float, float]:
    """(Q1 - 1.5 IQR, Q3 + 1.5 IQR) with linear-interpolation quantiles."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise SizeError("iqr_fences needs at least one value")
    q1, q3 = np.quantile(arr, [0.25, 0.75], method="linear")
    iqr = q3 - q1
    return float(q1 - 1.5 * iqr), float(q3 + 1.5 * iqr)


def detect_anomalies(labs: LabSeries) -> AnomalyReport:
    """Count steps strictly outside each feature's own fences; padded steps
    are excluded both from the fences and from the counts."""
    highs, lows, fences = [], [], []
    for f in range(labs.n_features):
        row = labs.values[f][labs.step_mask]
        if row.size == 0:
            highs.append(0)
            lows.append(0)
            fences.append(None)
            continue
        lower, upper = iqr_fences(row)
        highs.append(int((row > upper).sum()))
        lows.append(int((row < lower).sum()))
        fences.append((lower, upper))
    return AnomalyReport(list(labs.feature_names), highs, lows, fences)


def caption(report: AnomalyReport, feature_names: List[str]) -> CaptionSet:
    """Render each feature's counts into exactly one of the four templates."""
    if list(report.feature_names) != list(feature_names):
        raise SchemaError("report and feature names are not aligned")
    out = []
    for name, h, l in zip(feature_names, report.high_counts, report.low_counts):
        if h == 0 and l == 0:
            out.append(TEMPLATE_NORMAL.format(feature=name))
        elif h > 0 and l == 0:
            out.append(TEMPLATE_HIGH.format(feature=name, h=h))
        elif h == 0 and l > 0:
            out.append(TEMPLATE_LOW.format(feature=name, l=l))
        else:
            out.append(TEMPLATE_BOTH.format(feature=name, h=h, l=l))
    return CaptionSet(out)


def parse_caption(text: str) -> Tuple[str, int, int]:
    """Invert a caption back to (feature, high_count, low_count)."""
    m = _CAPTION_RE.match(text)
    if not m:
        raise SchemaError(f"not a caption: {text!r}")
    h = int(m.group("h")) if m.group("h") else 0
    l = int(m.group("l2") or m.group("l") or 0)
    return m.group("feature"), h, l


def caption_record(labs: LabSeries) -> CaptionSet:
    return caption(detect_anomalies(labs), labs.feature_names)
