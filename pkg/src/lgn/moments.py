"""Temporal proposal geometry: clip sequences, spans, the 2-D moment map and tIoU.

Cell ``(a, b)`` of an ``N x N`` map is the proposal that starts at clip ``a``
and ends at clip ``b`` (inclusive). It covers ``[a*tau, (b+1)*tau]`` seconds
with ``tau = duration / N``; cells with ``a > b`` are invalid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidCellError, InvalidSpanError, ValidationFailure
from .grad import kernels


@dataclass(frozen=True)
class MomentSpan:
    start_s: float
    end_s: float

    def __post_init__(self):
        if not (np.isfinite(self.start_s) and np.isfinite(self.end_s)):
            raise InvalidSpanError(f"non-finite span [{self.start_s}, {self.end_s}]")
        if self.start_s < 0:
            raise InvalidSpanError(f"span starts before 0: [{self.start_s}, {self.end_s}]")
        if not self.end_s > self.start_s:
            raise InvalidSpanError(f"degenerate span [{self.start_s}, {self.end_s}]")

    @property
    def length(self) -> float:
        return self.end_s - self.start_s


@dataclass
class ClipFeatureSequence:
    video_id: str
    features: np.ndarray
    duration_s: float

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValidationFailure(f"{self.video_id}: features must be T x d_v with T >= 1, got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ValidationFailure(f"{self.video_id}: non-finite clip features")
        if not self.duration_s > 0:
            raise ValidationFailure(f"{self.video_id}: duration must be positive, got {self.duration_s}")

    @property
    def T(self) -> int:
        return self.features.shape[0]

    @property
    def d_v(self) -> int:
        return self.features.shape[1]


@dataclass
class AnnotationRecord:
    video_id: str
    tokens: list
    span: MomentSpan
    query_id: str = ""

    def check_within(self, duration_s: float) -> None:
        if self.span.end_s > duration_s + 1e-9:
            raise InvalidSpanError(
                f"{self.video_id}: span [{self.span.start_s}, {self.span.end_s}] exceeds duration {duration_s}"
            )


@dataclass
class TemporalMap:
    N: int
    cell_features: np.ndarray
    valid: np.ndarray = field(init=False)

    def __post_init__(self):
        self.valid = valid_mask(self.N)

    @property
    def num_valid(self) -> int:
        return self.N * (self.N + 1) // 2


def valid_mask(n: int) -> np.ndarray:
    """Boolean N x N mask, True on cells with start <= end."""
    return np.triu(np.ones((n, n), dtype=bool))


def resample_clips(seq: ClipFeatureSequence, n: int) -> ClipFeatureSequence:
    """Average T clips into N contiguous near-equal groups.

    With T < N each output clip copies the input clip nearest its center.
    """
    if n < 1:
        raise ValidationFailure(f"N must be >= 1, got {n}")
    t = seq.T
    if t == n:
        return seq
    if t > n:
        starts = (np.arange(n) * t) // n
        ends = np.append(starts[1:], t)
        sums = np.add.reduceat(seq.features, starts, axis=0)
        feats = sums / (ends - starts)[:, None]
    else:
        idx = ((2 * np.arange(n) + 1) * t) // (2 * n)
        feats = seq.features[idx]
    return ClipFeatureSequence(seq.video_id, feats, seq.duration_s)


def cell_to_span(a: int, b: int, n: int, duration_s: float) -> MomentSpan:
    if not (0 <= a <= b < n):
        raise InvalidCellError(f"cell ({a}, {b}) is not a valid proposal on an {n}x{n} map")
    return MomentSpan(a * duration_s / n, (b + 1) * duration_s / n)


def temporal_iou(x: MomentSpan, y: MomentSpan) -> float:
    inter = max(0.0, min(x.end_s, y.end_s) - max(x.start_s, y.start_s))
    union = (x.end_s - x.start_s) + (y.end_s - y.start_s) - inter
    return inter / union


def cell_bounds(n: int, duration_s: float) -> tuple[np.ndarray, np.ndarray]:
    """Start and end seconds of every cell as two N x N arrays (invalid cells included)."""
    idx = np.arange(n)
    starts = np.broadcast_to((idx * duration_s / n)[:, None], (n, n))
    ends = np.broadcast_to(((idx + 1) * duration_s / n)[None, :], (n, n))
    return starts, ends


def iou_field(n: int, gt: MomentSpan, duration_s: float) -> np.ndarray:
    """tIoU of every valid cell against ``gt``; invalid cells are 0."""
    if gt.end_s > duration_s + 1e-9:
        raise InvalidSpanError(f"ground truth [{gt.start_s}, {gt.end_s}] exceeds duration {duration_s}")
    starts, ends = cell_bounds(n, duration_s)
    inter = np.maximum(0.0, np.minimum(ends, gt.end_s) - np.maximum(starts, gt.start_s))
    union = (ends - starts) + (gt.end_s - gt.start_s) - inter
    valid = valid_mask(n)
    return np.divide(inter, union, out=np.zeros((n, n)), where=valid)


def span_to_best_cell(span: MomentSpan, n: int, duration_s: float) -> tuple[int, int]:
    """Valid cell with the highest tIoU against ``span``; ties go to smaller start, then end."""
    field_ = np.where(valid_mask(n), iou_field(n, span, duration_s), -1.0)
    flat = int(np.argmax(field_))
    return divmod(flat, n)


def pool_moment_features(seq: ClipFeatureSequence, mode: str = "max") -> TemporalMap:
    """Pool clip features over every span into a d_v x N x N map (N = T)."""
    return TemporalMap(seq.T, kernels.span_pool(seq.features, mode))
