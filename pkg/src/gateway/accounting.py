"""Windowed accounting over metric samples.

Usage metrics are treated as step functions (a sample holds until the
next one) and averaged per (group, site, window) with time weighting;
eviction counters contribute per-window deltas. Records are written as
append-only CSV; there is no database.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

from .metrics import MetricSample

ACCOUNTED_NAMES = ("jobs_running", "gpus_allocated", "jobs_evicted_total")

SAMPLES_CSV_HEADER = ["t", "name", "labels", "value"]
RECORDS_CSV_HEADER = [
    "window_start",
    "window_end",
    "group",
    "site",
    "mean_running_jobs",
    "mean_gpus_allocated",
    "evictions",
]


class MalformedSamples(ValueError):
    pass


@dataclass(frozen=True)
class AccountingRecord:
    window_start: float
    window_end: float
    group: str
    site: str
    mean_running_jobs: float
    mean_gpus_allocated: Mapping[str, float]
    evictions: int

    def __post_init__(self):
        if self.window_end <= self.window_start:
            raise ValueError("window_end must be after window_start")
        if self.mean_running_jobs < 0:
            raise ValueError("mean_running_jobs must be >= 0")
        object.__setattr__(self, "mean_gpus_allocated", dict(self.mean_gpus_allocated))


def _encode_labels(labels: Mapping[str, str]) -> str:
    return ";".join(f"{k}={labels[k]}" for k in sorted(labels))


def _decode_labels(text: str) -> dict[str, str]:
    labels = {}
    if not text:
        return labels
    for part in text.split(";"):
        if "=" not in part:
            raise MalformedSamples(f"bad label token {part!r}")
        key, value = part.split("=", 1)
        labels[key] = value
    return labels


def write_samples_csv(samples: Iterable[MetricSample], fp) -> None:
    writer = csv.writer(fp)
    writer.writerow(SAMPLES_CSV_HEADER)
    for sample in samples:
        writer.writerow(
            [
                _format_t(sample.timestamp),
                sample.name,
                _encode_labels(sample.labels),
                _format_t(sample.value),
            ]
        )


def read_samples_csv(fp) -> list[MetricSample]:
    reader = csv.reader(fp)
    header = next(reader, None)
    if header is None:
        return []
    if header != SAMPLES_CSV_HEADER:
        raise MalformedSamples(f"unexpected header {header!r}")
    samples = []
    for row in reader:
        if len(row) != 4:
            raise MalformedSamples(f"bad row {row!r}")
        t, name, labels, value = row
        samples.append(
            MetricSample(
                name=name,
                labels=_decode_labels(labels),
                value=float(value),
                timestamp=float(t),
            )
        )
    return samples


def _format_t(value: float) -> str:
    if value == int(value):
        return str(int(value))
    return repr(float(value))


class _StepSeries:
    """Time-ordered (t, value) points interpreted as a step function."""

    def __init__(self):
        self.points: list[tuple[float, float]] = []

    def add(self, t: float, value: float) -> None:
        if self.points and t < self.points[-1][0]:
            raise MalformedSamples("samples must be time-ordered")
        self.points.append((t, value))

    def value_before(self, t: float) -> Optional[float]:
        """Value of the last sample strictly before t."""
        last = None
        for ts, value in self.points:
            if ts >= t:
                break
            last = value
        return last

    def window_mean(self, start: float, end: float) -> Optional[float]:
        """Time-weighted mean over [start, end); None when the window has
        no samples (skipped, not an error)."""
        inside = [(ts, v) for ts, v in self.points if start <= ts < end]
        if not inside:
            return None
        carry = self.value_before(start)
        if carry is not None:
            segments = [(start, carry)] + inside
            origin = start
        else:
            segments = inside
            origin = inside[0][0]
        total = 0.0
        for i, (ts, value) in enumerate(segments):
            nxt = segments[i + 1][0] if i + 1 < len(segments) else end
            total += value * (nxt - ts)
        duration = end - origin
        if duration <= 0:
            return None
        return total / duration

    def last_in_window(self, start: float, end: float) -> Optional[float]:
        last = None
        for ts, value in self.points:
            if start <= ts < end:
                last = value
        return last


def aggregate_accounting(
    samples: Sequence[MetricSample], window_s: float
) -> list[AccountingRecord]:
    """Average usage per (group, site) over fixed windows.

    Samples must be time-ordered. Windows are aligned to multiples of
    ``window_s``; a (group, site) window containing no samples produces
    no record.
    """
    if window_s <= 0:
        raise ValueError("window_s must be positive")
    relevant = [s for s in samples if s.name in ACCOUNTED_NAMES]
    if not relevant:
        return []
    last_t = None
    for sample in relevant:
        if last_t is not None and sample.timestamp < last_t:
            raise MalformedSamples("samples must be time-ordered")
        last_t = sample.timestamp

    running: dict[tuple[str, str], _StepSeries] = {}
    gpus: dict[tuple[str, str], dict[str, _StepSeries]] = {}
    evictions: dict[tuple[str, str], _StepSeries] = {}

    for sample in relevant:
        group = sample.labels.get("group", "")
        site = sample.labels.get("site", "")
        key = (group, site)
        if sample.name == "jobs_running":
            running.setdefault(key, _StepSeries()).add(sample.timestamp, sample.value)
        elif sample.name == "gpus_allocated":
            model = sample.labels.get("model", "")
            gpus.setdefault(key, {}).setdefault(model, _StepSeries()).add(
                sample.timestamp, sample.value
            )
        else:
            evictions.setdefault(key, _StepSeries()).add(sample.timestamp, sample.value)

    t_min = relevant[0].timestamp
    t_max = relevant[-1].timestamp
    first_window = math.floor(t_min / window_s)
    last_window = math.floor(t_max / window_s)

    keys = sorted(set(running) | set(gpus) | set(evictions))
    records = []
    for index in range(first_window, last_window + 1):
        start = index * window_s
        end = start + window_s
        for key in keys:
            group, site = key
            mean_running = None
            if key in running:
                mean_running = running[key].window_mean(start, end)
            gpu_means: dict[str, float] = {}
            for model, series in gpus.get(key, {}).items():
                mean = series.window_mean(start, end)
                if mean is not None:
                    gpu_means[model] = mean
            delta = None
            if key in evictions:
                last = evictions[key].last_in_window(start, end)
                if last is not None:
                    before = evictions[key].value_before(start)
                    delta = int(round(last - (before if before is not None else 0.0)))
            if mean_running is None and not gpu_means and delta is None:
                continue  # empty window for this key
            records.append(
                AccountingRecord(
                    window_start=start,
                    window_end=end,
                    group=group,
                    site=site,
                    mean_running_jobs=mean_running if mean_running is not None else 0.0,
                    mean_gpus_allocated=gpu_means,
                    evictions=delta if delta is not None else 0,
                )
            )
    return records


def write_records_csv(records: Iterable[AccountingRecord], fp) -> None:
    writer = csv.writer(fp)
    writer.writerow(RECORDS_CSV_HEADER)
    for record in records:
        writer.writerow(
            [
                _format_t(record.window_start),
                _format_t(record.window_end),
                record.group,
                record.site,
                repr(record.mean_running_jobs),
                json.dumps(
                    {k: record.mean_gpus_allocated[k] for k in sorted(record.mean_gpus_allocated)},
                    separators=(",", ":"),
                ),
                str(record.evictions),
            ]
        )


def read_records_csv(fp) -> list[AccountingRecord]:
    reader = csv.reader(fp)
    header = next(reader, None)
    if header != RECORDS_CSV_HEADER:
        raise MalformedSamples(f"unexpected header {header!r}")
    records = []
    for row in reader:
        records.append(
            AccountingRecord(
                window_start=float(row[0]),
                window_end=float(row[1]),
                group=row[2],
                site=row[3],
                mean_running_jobs=float(row[4]),
                mean_gpus_allocated=json.loads(row[5]),
                evictions=int(row[6]),
            )
        )
    return records
