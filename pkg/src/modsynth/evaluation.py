"""Landmark-transfer error computation and report emission.

Errors are Euclidean distances (um) between transformed moving landmarks and
their fixed-space partners. Summaries use the lower-middle median for even
counts and the population standard deviation; both choices are deterministic
and documented here.
"""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass

import numpy as np

from ._ioutil import atomic_write_text
from .errors import CorruptFileError, ParameterError
from .landmarks import LandmarkSet


@dataclass(frozen=True)
class LandmarkErrorRecord:
    subject_id: str
    method: str
    landmark_name: str
    error_um: float

    def __post_init__(self):
        if not (math.isfinite(self.error_um) and self.error_um >= 0):
            raise ParameterError(
                f"error must be finite and >= 0, got {self.error_um}"
            )


@dataclass(frozen=True)
class ErrorSummary:
    n: int
    median_um: float
    mean_um: float
    std_um: float
    failed: bool = False

    @classmethod
    def for_failure(cls) -> "ErrorSummary":
        return cls(n=0, median_um=math.nan, mean_um=math.nan, std_um=math.nan,
                   failed=True)


def landmark_error(
    t, lms: LandmarkSet, subject_id: str = "", method: str = ""
) -> list[LandmarkErrorRecord]:
    """Per-active-landmark ||t(moving) - fixed||; t maps moving to fixed space."""
    moving = lms.moving_array()
    fixed = lms.fixed_array()
    names = lms.names()
    if moving.shape[0] == 0:
        return []
    mapped = t.apply(moving)
    errors = np.sqrt(np.sum((mapped - fixed) ** 2, axis=1))
    return [
        LandmarkErrorRecord(subject_id, method, name, float(e))
        for name, e in zip(names, errors)
    ]


def summarize(records: list[LandmarkErrorRecord]) -> ErrorSummary:
    if not records:
        raise ParameterError("cannot summarize zero records")
    errors = np.sort(np.array([r.error_um for r in records]))
    n = errors.size
    median = float(errors[(n - 1) // 2])
    mean = float(errors.mean())
    std = float(np.sqrt(np.mean((errors - mean) ** 2)))
    return ErrorSummary(n=n, median_um=median, mean_um=mean, std_um=std)


def inter_annotator_error(
    lms_a: LandmarkSet, lms_b: LandmarkSet, subject_id: str = ""
) -> list[LandmarkErrorRecord]:
    """Distance between the two annotators' moving points, matched by name."""
    a = {lm.name: lm for lm in lms_a}
    b = {lm.name: lm for lm in lms_b}
    missing_in_b = sorted(set(a) - set(b))
    missing_in_a = sorted(set(b) - set(a))
    if missing_in_a or missing_in_b:
        parts = []
        if missing_in_b:
            parts.append(f"missing from second set: {missing_in_b}")
        if missing_in_a:
            parts.append(f"missing from first set: {missing_in_a}")
        raise ParameterError("landmark name mismatch; " + "; ".join(parts))
    out = []
    for name in sorted(a):
        pa = np.asarray(a[name].moving_um)
        pb = np.asarray(b[name].moving_um)
        out.append(
            LandmarkErrorRecord(
                subject_id, "inter-annotator", name,
                float(np.linalg.norm(pa - pb)),
            )
        )
    return out


def tally_success(
    summaries: list[tuple[str, ErrorSummary]], threshold_um: float
) -> tuple[int, int]:
    """Count subjects with a non-failed summary whose mean beats the threshold."""
    n_success = sum(
        1 for _, s in summaries if not s.failed and s.mean_um < threshold_um
    )
    return n_success, len(summaries)


def emit_report(
    records: list[LandmarkErrorRecord],
    summaries: list[tuple[str, str, ErrorSummary]],
    records_path: str,
    summary_path: str | None = None,
) -> None:
    """Write the long-format error CSV and the per-(subject, method) summary.

    Row order is (subject, method, landmark name), so output is byte-stable.
    """
    if summary_path is None:
        base, _ = os.path.splitext(records_path)
        summary_path = base + "_summary.csv"

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["subject", "method", "landmark", "error_um"])
    for r in sorted(records, key=lambda r: (r.subject_id, r.method, r.landmark_name)):
        writer.writerow([r.subject_id, r.method, r.landmark_name, repr(r.error_um)])
    atomic_write_text(records_path, buf.getvalue())

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["subject", "method", "n", "median", "mean", "std", "failed"])
    for subject, method, s in sorted(summaries, key=lambda t: (t[0], t[1])):
        writer.writerow([
            subject, method, s.n,
            repr(s.median_um), repr(s.mean_um), repr(s.std_um),
            "true" if s.failed else "false",
        ])
    atomic_write_text(summary_path, buf.getvalue())


def read_error_records(path: str) -> list[LandmarkErrorRecord]:
    out = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["subject", "method", "landmark", "error_um"]:
            raise CorruptFileError(f"{path}: unexpected header {header}")
        for row in reader:
            out.append(LandmarkErrorRecord(row[0], row[1], row[2], float(row[3])))
    return out


def read_summaries(path: str) -> list[tuple[str, str, ErrorSummary]]:
    out = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["subject", "method", "n", "median", "mean", "std", "failed"]
        if header != expected:
            raise CorruptFileError(f"{path}: unexpected header {header}")
        for row in reader:
            out.append((
                row[0], row[1],
                ErrorSummary(
                    n=int(row[2]), median_um=float(row[3]), mean_um=float(row[4]),
                    std_um=float(row[5]), failed=row[6] == "true",
                ),
            ))
    return out
