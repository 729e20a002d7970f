"""Signal container and the distance-based similarity metrics.

All metrics are evaluated in float64 whatever the input dtype.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError

# Noise-amplitude segments used for stratified tables. Half-open except the
# last one, which is closed at 2.0.
SEGMENTS = ((0.2, 0.6), (0.6, 1.0), (1.0, 1.5), (1.5, 2.0))
METRICS = ("ssd", "mad", "prd", "cosine")


@dataclass(frozen=True)
class SignalRecord:
    id: str
    samples: np.ndarray
    sample_rate_hz: float
    source_tag: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size < 1:
            raise ValueError(f"record {self.id!r}: samples must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(samples)):
            raise ValueError(f"record {self.id!r}: samples contain NaN or Inf")
        if not (self.sample_rate_hz > 0):
            raise ValueError(f"record {self.id!r}: sample_rate_hz must be positive")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self):
        return self.samples.size / self.sample_rate_hz


def _pair(x, x_hat):
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.ndim != 1 or x_hat.ndim != 1:
        raise ValueError("metrics expect 1-D sequences")
    if x.size != x_hat.size:
        raise ValueError(f"length mismatch: {x.size} vs {x_hat.size}")
    if x.size < 1:
        raise ValueError("metrics need at least one sample")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(x_hat))):
        raise ValueError("metrics inputs must be finite")
    return x, x_hat


def ssd(x, x_hat):
    """Sum of squared distances between clean ``x`` and estimate ``x_hat``."""
    x, x_hat = _pair(x, x_hat)
    d = x - x_hat
    return float(np.dot(d, d))


def mad(x, x_hat):
    """Maximum absolute distance."""
    x, x_hat = _pair(x, x_hat)
    return float(np.max(np.abs(x - x_hat)))


def prd(x, x_hat):
    """Percentage root-mean-square difference.

    The denominator centres the clean signal on its own mean; the estimate is
    not centred.
    """
    x, x_hat = _pair(x, x_hat)
    centred = x - x.mean()
    den = float(np.dot(centred, centred))
    if den == 0.0:
        raise DegenerateInputError("prd undefined for a constant reference signal")
    d = x - x_hat
    return math.sqrt(float(np.dot(d, d)) / den) * 100.0


def cosine_sim(x, x_hat):
    x, x_hat = _pair(x, x_hat)
    nx = float(np.linalg.norm(x))
    ny = float(np.linalg.norm(x_hat))
    if nx == 0.0 or ny == 0.0:
        raise DegenerateInputError("cosine similarity undefined for a zero-norm signal")
    c = float(np.dot(x, x_hat)) / (nx * ny)
    return min(1.0, max(-1.0, c))


def segment_of(factor):
    """Index into SEGMENTS for a noise factor, or None when outside [0.2, 2.0]."""
    if factor is None or not math.isfinite(factor):
        return None
    last = len(SEGMENTS) - 1
    for i, (lo, hi) in enumerate(SEGMENTS):
        if lo <= factor < hi or (i == last and factor == hi):
            return i
    return None


def segment_label(index):
    lo, hi = SEGMENTS[index]
    return f"{lo:.1f}-{hi:.1f}"


@dataclass
class MetricRow:
    record_id: str
    patch_index: int
    noise_factor: float | None
    ssd: float
    mad: float
    prd: float
    cosine: float


@dataclass
class MetricsReport:
    rows: list[MetricRow]
    aggregates: dict = field(default_factory=dict)

    def values(self, metric, segment=None):
        """Column of one metric, optionally restricted to a segment index."""
        return np.array(
            [getattr(r, metric) for r in self.rows
             if segment is None or segment_of(r.noise_factor) == segment],
            dtype=np.float64,
        )

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["record_id", "patch_index", "noise_factor", "ssd", "mad", "prd", "cosine"])
        for r in self.rows:
            factor = "" if r.noise_factor is None else repr(float(r.noise_factor))
            w.writerow([r.record_id, r.patch_index, factor,
                        repr(r.ssd), repr(r.mad), repr(r.prd), repr(r.cosine)])
        return buf.getvalue()

    def to_json(self):
        return json.dumps(self.aggregates, indent=2, sort_keys=True)


def _summary(values):
    if values.size == 0:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(values.mean()), "std": float(values.std()), "n": int(values.size)}


def aggregate(rows):
    """mean/std/n per metric, overall and per noise segment.

    std is the population standard deviation (ddof=0).
    """
    report = MetricsReport(rows)
    out = {"overall": {m: _summary(report.values(m)) for m in METRICS}, "segments": {}}
    for i in range(len(SEGMENTS)):
        out["segments"][segment_label(i)] = {m: _summary(report.values(m, i)) for m in METRICS}
    return out


def evaluate_pair(clean, denoised, noise_factor=None, record_id="", patch_index=0):
    return MetricRow(
        record_id=record_id,
        patch_index=int(patch_index),
        noise_factor=None if noise_factor is None else float(noise_factor),
        ssd=ssd(clean, denoised),
        mad=mad(clean, denoised),
        prd=prd(clean, denoised),
        cosine=cosine_sim(clean, denoised),
    )


def evaluate_batch(pairs, record_ids=None, patch_indices=None):
    """Score ``(clean, denoised, noise_factor)`` triples into a MetricsReport."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("evaluate_batch needs at least one pair")
    rows = []
    for i, (clean, denoised, factor) in enumerate(pairs):
        rid = record_ids[i] if record_ids is not None else ""
        pidx = patch_indices[i] if patch_indices is not None else i
        rows.append(evaluate_pair(clean, denoised, factor, rid, pidx))
    return MetricsReport(rows, aggregate(rows))
