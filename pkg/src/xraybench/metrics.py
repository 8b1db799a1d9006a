"""Confusion matrices, rate metrics, latency statistics and confidence histograms."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Sequence

import numpy as np

from xraybench.errors import EmptyInputError
from xraybench.runtime import Diagnosis

ANOMALY_KINDS = ("suspect_no_image", "refusal", "parse_error", "transport_error", "inference_error")
DEFAULT_THRESHOLD = 0.5
DEFAULT_BINS = 10


@dataclass
class InferenceRecord:
    config_id: str
    sample_id: str
    ground_truth: str
    diagnosis: Diagnosis | None
    end_to_end_ms: float
    model_exec_ms: float
    prompt_tokens: int | None = None
    completion_tokens: int | None = None
    anomaly: str | None = None
    detail: str | None = None
    raw_text: str | None = None
    # carbon attribution, mgCO2eq
    app_carbon_mg: float = 0.0
    remote_carbon_mg: float = 0.0
    remote_carbon_alt_mg: float | None = None
    carbon_mg: float = 0.0
    carbon_per_mb_mg: float = 0.0
    memory_fraction: float = 1.0
    time_basis: str | None = None
    started_at: float = 0.0
    finished_at: float = 0.0
    manifest_sha: str | None = None

    def __post_init__(self) -> None:
        if self.ground_truth not in ("positive", "negative"):
            raise ValueError(f"ground_truth must be positive/negative, got {self.ground_truth!r}")
        if self.anomaly is not None and self.anomaly not in ANOMALY_KINDS:
            raise ValueError(f"unknown anomaly kind {self.anomaly!r}")
        if self.anomaly is not None and self.diagnosis is not None:
            raise ValueError("anomalous records carry no diagnosis")
        if self.anomaly is None and self.diagnosis is None:
            raise ValueError("non-anomalous record needs a diagnosis")
        if self.model_exec_ms > self.end_to_end_ms:
            raise ValueError("model_exec_ms cannot exceed end_to_end_ms")

    @property
    def is_anomalous(self) -> bool:
        return self.anomaly is not None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["diagnosis"] = None if self.diagnosis is None else [self.diagnosis.p_positive, self.diagnosis.p_negative]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "InferenceRecord":
        d = dict(d)
        diag = d.pop("diagnosis", None)
        return cls(diagnosis=None if diag is None else Diagnosis(*diag), **d)


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int
    excluded: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.tn, self.fn, self.excluded) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class RateMetrics:
    """Percentages; ``None`` marks a rate whose denominator is zero."""

    accuracy: float | None
    specificity: float | None
    sensitivity: float | None
    ppv: float | None

    def rounded(self, places: int = 1) -> dict[str, str]:
        return {k: round_pct(v, places) for k, v in asdict(self).items()}


def round_pct(value: float | None, places: int = 1) -> str:
    """Half-up decimal rounding for presentation; ``undefined`` for None."""
    if value is None:
        return "undefined"
    q = Decimal(1).scaleb(-places)
    return str(Decimal(repr(value)).quantize(q, rounding=ROUND_HALF_UP))


def _scored(records: Iterable[InferenceRecord]) -> tuple[list[InferenceRecord], int]:
    records = list(records)
    scored = [r for r in records if not r.is_anomalous]
    return scored, len(records) - len(scored)


def confusion(records: Sequence[InferenceRecord], threshold: float = DEFAULT_THRESHOLD) -> ConfusionMatrix:
    """Binarize at ``threshold`` (p_positive >= threshold is a positive call)."""
    if not records:
        raise EmptyInputError("no records to score")
    ids = {r.config_id for r in records}
    if len(ids) > 1:
        raise ValueError(f"records span several configs: {sorted(ids)}")
    scored, excluded = _scored(records)
    tp = fp = tn = fn = 0
    for r in scored:
        pred = r.diagnosis.p_positive >= threshold
        if r.ground_truth == "positive":
            tp, fn = (tp + 1, fn) if pred else (tp, fn + 1)
        else:
            fp, tn = (fp + 1, tn) if pred else (fp, tn + 1)
    return ConfusionMatrix(tp, fp, tn, fn, excluded)


def _rate(num: int, den: int) -> float | None:
    return None if den == 0 else 100.0 * num / den


def summary(cm: ConfusionMatrix) -> RateMetrics:
    if cm.total == 0:
        raise EmptyInputError("confusion matrix is empty")
    return RateMetrics(
        accuracy=_rate(cm.tp + cm.tn, cm.total),
        specificity=_rate(cm.tn, cm.tn + cm.fp),
        sensitivity=_rate(cm.tp, cm.tp + cm.fn),
        ppv=_rate(cm.tp, cm.tp + cm.fp),
    )


def correct_class_score(r: InferenceRecord) -> float:
    p = r.diagnosis.p_positive
    return p if r.ground_truth == "positive" else 1.0 - p


def confidence_histogram(records: Sequence[InferenceRecord], bins: int = DEFAULT_BINS) -> list[float]:
    """Share of records per equal-width bin of the probability given to the true class.

    Bins are left-closed except the last, which also includes 1.0.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    scored, _ = _scored(records)
    if not scored:
        raise EmptyInputError("no scorable records for histogram")
    scores = np.clip(np.array([correct_class_score(r) for r in scored]), 0.0, 1.0)
    counts, _ = np.histogram(scores, bins=bins, range=(0.0, 1.0))
    return (counts / counts.sum()).tolist()


def lower_percentile(values: Sequence[float], q: float) -> float:
    return float(np.percentile(np.asarray(values, dtype=np.float64), q, method="lower"))


def latency_stats(records: Sequence[InferenceRecord]) -> tuple[float, float]:
    """(median, IQR) of end-to-end latency in ms, lower interpolation."""
    scored, _ = _scored(records)
    if not scored:
        raise EmptyInputError("no scorable records for latency statistics")
    times = [r.end_to_end_ms for r in scored]
    return lower_percentile(times, 50), lower_percentile(times, 75) - lower_percentile(times, 25)


@dataclass(frozen=True)
class MetricsSummary:
    config_id: str
    confusion: ConfusionMatrix
    rates: RateMetrics
    median_time_ms: float
    iqr_time_ms: float
    median_model_exec_ms: float
    median_carbon_mg: float
    median_carbon_alt_mg: float | None
    median_carbon_per_mb: float
    memory_percent: float
    confidence_histogram: list[float] = field(default_factory=list)
    anomalies: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rates_rounded"] = self.rates.rounded()
        return d


def summarize(records: Sequence[InferenceRecord], threshold: float = DEFAULT_THRESHOLD,
              bins: int = DEFAULT_BINS) -> MetricsSummary:
    cm = confusion(records, threshold)
    scored, excluded = _scored(records)
    med, iqr = latency_stats(records)
    alt = [r.remote_carbon_alt_mg for r in scored]
    alt_med = None
    if all(a is not None for a in alt):
        alt_totals = [r.app_carbon_mg + a for r, a in zip(scored, alt)]
        alt_med = lower_percentile(alt_totals, 50)
    return MetricsSummary(
        config_id=records[0].config_id,
        confusion=cm,
        rates=summary(cm),
        median_time_ms=med,
        iqr_time_ms=iqr,
        median_model_exec_ms=lower_percentile([r.model_exec_ms for r in scored], 50),
        median_carbon_mg=lower_percentile([r.carbon_mg for r in scored], 50),
        median_carbon_alt_mg=alt_med,
        median_carbon_per_mb=lower_percentile([r.carbon_per_mb_mg for r in scored], 50),
        memory_percent=100.0 * scored[0].memory_fraction,
        confidence_histogram=confidence_histogram(records, bins),
        anomalies=excluded,
    )
