"""Desk-scale multimodal rationale distillation for EHR diagnosis.

Pipeline: synthetic corpus -> IQR anomaly captions -> knowledge base and
knowledge vocabulary -> teacher-distilled rationales -> three-phase training
of a small encoder-decoder with knowledge-augmented lab fusion -> multilabel
and BLEU evaluation.
"""

__version__ = "0.1.0"
