"""Evaluation metrics: clean accuracy, attack success rate, and the
accuracy/attack trade-off score, all on the 0-100 percent scale."""

from __future__ import annotations

import csv
import io as _stdio
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError, UndefinedMetricError
from .inference import FULL_PRECISION, ExecutionMode, forward
from .io import Dataset, ModelGraph

CSV_COLUMNS = ("model", "method", "bits", "cda", "asr", "delta_asr", "dtm", "seed")
_EVAL_CHUNK = 256


def predict(graph: ModelGraph, samples: np.ndarray, mode: ExecutionMode = FULL_PRECISION) -> np.ndarray:
    """Argmax class per sample (ties resolve to the lowest class index)."""
    preds = []
    for start in range(0, len(samples), _EVAL_CHUNK):
        logits = forward(graph, samples[start : start + _EVAL_CHUNK], mode)
        preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def clean_accuracy(graph: ModelGraph, data: Dataset, mode: ExecutionMode = FULL_PRECISION) -> float:
    """Percent of samples whose argmax prediction equals the label."""
    if data.labels is None:
        raise ContractError("clean_accuracy needs a labeled dataset")
    preds = predict(graph, data.samples, mode)
    return 100.0 * float((preds == data.labels).sum()) / len(data.labels)


def attack_success_rate(
    graph: ModelGraph, data: Dataset, target: int, mode: ExecutionMode = FULL_PRECISION
) -> float:
    """Percent of non-target-labeled samples predicted as the target class."""
    if data.labels is None:
        raise ContractError("attack_success_rate needs a labeled dataset")
    keep = data.labels != target
    if not keep.any():
        raise UndefinedMetricError("every sample already carries the target label")
    preds = predict(graph, data.samples[keep], mode)
    return 100.0 * float((preds == target).sum()) / int(keep.sum())


def dtm(cda: float, asr_before: float, asr_after: float, alpha: float = 0.5) -> float:
    """Defense trade-off: (1-alpha)*CDA - alpha*(ASR_after - ASR_before)."""
    for name, v in (("cda", cda), ("asr_before", asr_before), ("asr_after", asr_after)):
        if not 0.0 <= v <= 100.0:
            raise ContractError(f"{name} must be a percent in [0, 100], got {v}")
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must be in [0, 1], got {alpha}")
    return (1.0 - alpha) * cda - alpha * (asr_after - asr_before)


@dataclass
class EvalReport:
    """One evaluation row for a (model, method, bits) combination."""

    model: str
    method: str
    bits: int
    cda: float
    asr: float
    asr_before: float
    delta_asr: float
    dtm: float
    alpha: float = 0.5
    seed: int = 0

    @classmethod
    def build(cls, model: str, method: str, bits: int, cda: float, asr: float,
              asr_before: float | None = None, alpha: float = 0.5, seed: int = 0) -> "EvalReport":
        before = asr if asr_before is None else asr_before
        return cls(
            model=model, method=method, bits=bits, cda=cda, asr=asr, asr_before=before,
            delta_asr=asr - before, dtm=dtm(cda, before, asr, alpha), alpha=alpha, seed=seed,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def to_csv(self) -> str:
        buf = _stdio.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        writer.writerow([getattr(self, c) for c in CSV_COLUMNS])
        return buf.getvalue()
