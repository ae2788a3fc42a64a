"""Metric samples and the text exposition format.

The gateway defines its own small metric families; exposition follows
the Prometheus text format (one ``# TYPE`` per family, ``name{label="v"}
value`` samples). A strict parser doubles as the grammar checker used in
tests.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

_NAME_RE = re.compile(r"^[a-zA-Z_:][a-zA-Z0-9_:]*$")
_LABEL_NAME_RE = re.compile(r"^[a-zA-Z_][a-zA-Z0-9_]*$")


class ExpositionError(ValueError):
    """The document does not parse under the exposition grammar."""


@dataclass(frozen=True)
class MetricSample:
    name: str
    labels: Mapping[str, str]
    value: float
    timestamp: float

    def __post_init__(self):
        if not _NAME_RE.match(self.name):
            raise ValueError(f"invalid metric name {self.name!r}")
        object.__setattr__(self, "labels", dict(self.labels))


@dataclass(frozen=True)
class MetricFamily:
    name: str
    kind: str  # "gauge" | "counter"
    help: str
    samples: tuple[tuple[Mapping[str, str], float], ...] = ()

    def __post_init__(self):
        if not _NAME_RE.match(self.name):
            raise ValueError(f"invalid metric name {self.name!r}")
        if self.kind not in ("gauge", "counter"):
            raise ValueError(f"unsupported metric type {self.kind!r}")


def _escape_label_value(value: str) -> str:
    return value.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")


def _format_value(value: float) -> str:
    if value == int(value) and abs(value) < 1e15:
        return str(int(value))
    return repr(float(value))


def render_exposition(families: Sequence[MetricFamily]) -> str:
    """Render families in the text exposition format."""
    lines = []
    for family in families:
        if family.help:
            lines.append(f"# HELP {family.name} {family.help}")
        lines.append(f"# TYPE {family.name} {family.kind}")
        for labels, value in family.samples:
            if labels:
                rendered = ",".join(
                    f'{k}="{_escape_label_value(str(labels[k]))}"'
                    for k in sorted(labels)
                )
                lines.append(f"{family.name}{{{rendered}}} {_format_value(value)}")
            else:
                lines.append(f"{family.name} {_format_value(value)}")
    return "\n".join(lines) + "\n"


_SAMPLE_RE = re.compile(
    r"^(?P<name>[a-zA-Z_:][a-zA-Z0-9_:]*)"
    r"(?:\{(?P<labels>[^}]*)\})?"
    r"\s+(?P<value>[^\s]+)"
    r"(?:\s+(?P<ts>-?\d+))?$"
)
_LABEL_RE = re.compile(r'([a-zA-Z_][a-zA-Z0-9_]*)="((?:[^"\\]|\\.)*)"')


def parse_exposition(text: str) -> dict[str, dict]:
    """Parse an exposition document, raising on grammar violations.

    Returns family name -> {"type", "help", "samples": [(labels, value)]}.
    """
    families: dict[str, dict] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("# HELP "):
            parts = line[len("# HELP "):].split(" ", 1)
            name = parts[0]
            if not _NAME_RE.match(name):
                raise ExpositionError(f"line {lineno}: bad metric name in HELP")
            families.setdefault(name, {"type": None, "help": "", "samples": []})
            families[name]["help"] = parts[1] if len(parts) > 1 else ""
            continue
        if line.startswith("# TYPE "):
            parts = line[len("# TYPE "):].split(" ")
            if len(parts) != 2:
                raise ExpositionError(f"line {lineno}: malformed TYPE line")
            name, kind = parts
            if not _NAME_RE.match(name):
                raise ExpositionError(f"line {lineno}: bad metric name in TYPE")
            if kind not in ("counter", "gauge", "histogram", "summary", "untyped"):
                raise ExpositionError(f"line {lineno}: unknown type {kind!r}")
            entry = families.setdefault(name, {"type": None, "help": "", "samples": []})
            if entry["samples"]:
                raise ExpositionError(f"line {lineno}: TYPE after samples for {name!r}")
            entry["type"] = kind
            continue
        if line.startswith("#"):
            continue  # comment
        match = _SAMPLE_RE.match(line)
        if not match:
            raise ExpositionError(f"line {lineno}: malformed sample {line!r}")
        name = match.group("name")
        labels: dict[str, str] = {}
        raw_labels = match.group("labels")
        if raw_labels:
            consumed = 0
            for lm in _LABEL_RE.finditer(raw_labels):
                labels[lm.group(1)] = (
                    lm.group(2)
                    .replace("\\n", "\n")
                    .replace('\\"', '"')
                    .replace("\\\\", "\\")
                )
                consumed = lm.end()
                rest = raw_labels[consumed:]
                if rest.startswith(","):
                    consumed += 1
            leftover = raw_labels[consumed:].strip()
            if leftover:
                raise ExpositionError(f"line {lineno}: bad label syntax {leftover!r}")
        try:
            value = float(match.group("value"))
        except ValueError:
            raise ExpositionError(f"line {lineno}: bad value {match.group('value')!r}")
        base = name
        for suffix in ("_bucket", "_sum", "_count", "_total"):
            if name.endswith(suffix) and name[: -len(suffix)] in families:
                base = name[: -len(suffix)]
                break
        families.setdefault(base, {"type": None, "help": "", "samples": []})
        families[base]["samples"].append((labels, value))
    return families


def gather_families(
    running_by_site: Mapping[str, int],
    all_sites: Sequence[str],
    queued: int,
    evicted_total: int,
    gpus_allocated: Mapping[str, int],
    node_ready: Mapping[str, bool],
) -> list[MetricFamily]:
    """Build the gateway's metric families from controller/node state."""
    running_samples = tuple(
        ({"site": site}, float(running_by_site.get(site, 0))) for site in all_sites
    )
    return [
        MetricFamily(
            "jobs_running",
            "gauge",
            "Jobs currently executing, by site.",
            running_samples,
        ),
        MetricFamily("jobs_queued", "gauge", "Jobs waiting in the cluster queue.",
                     (({}, float(queued)),)),
        MetricFamily(
            "jobs_evicted_total",
            "counter",
            "Batch jobs evicted to make room for interactive sessions.",
            (({}, float(evicted_total)),),
        ),
        MetricFamily(
            "gpus_allocated",
            "gauge",
            "Local GPUs allocated to running jobs, by model.",
            tuple(
                ({"model": model}, float(count))
                for model, count in sorted(gpus_allocated.items())
            ),
        ),
        MetricFamily(
            "virtual_node_ready",
            "gauge",
            "Virtual node lease state (1 ready, 0 not ready).",
            tuple(
                ({"site": site}, 1.0 if ready else 0.0)
                for site, ready in sorted(node_ready.items())
            ),
        ),
    ]


def expose_metrics(
    running_by_site: Mapping[str, int],
    all_sites: Sequence[str],
    queued: int,
    evicted_total: int,
    gpus_allocated: Mapping[str, int],
    node_ready: Mapping[str, bool],
) -> str:
    return render_exposition(
        gather_families(
            running_by_site, all_sites, queued, evicted_total, gpus_allocated, node_ready
        )
    )
