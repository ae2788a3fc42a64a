"""Deterministic scenario runner.

Replays a configured multi-site test in simulated time: seeded job
arrivals, interactive session spawns, virtual nodes joining per their
availability, and simulated batch backends. Produces a per-tick time
series CSV, a decision audit log, metric samples for accounting, and a
summary document. Identical config and seed give byte-identical output.
"""

from __future__ import annotations

import csv
import io
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import yaml

from .accounting import write_samples_csv
from .clock import ManualClock
from .controller import QueueController, RoutingPolicy
from .gatekeeper import (
    Gatekeeper,
    GatekeeperConfig,
    SecretStore,
    SessionTemplate,
    load_policies,
)
from .metrics import MetricSample
from .model import JobState, WorkloadKind, WorkloadSpec, canonical_json
from .plugins.httpd import InProcessPluginClient
from .plugins.simulated import SimulatedSiteBackend, SiteModel
from .resources import ResourceVector
from .virtualnode import NodeConfig, NodeRegistry, apply_node_events

TIMESERIES_HEADER = ["t", "site", "running", "queued", "evicted_total"]

IN_FLIGHT_STATES = (
    JobState.ADMITTED_LOCAL,
    JobState.ADMITTED_REMOTE,
    JobState.RUNNING,
    JobState.UNKNOWN,
)


class ConfigInvalid(ValueError):
    pass


class ConservationError(AssertionError):
    """The per-tick job ledger failed to balance (a scheduler bug)."""


@dataclass(frozen=True)
class JobTemplate:
    image: str
    command: tuple[str, ...]
    group: str
    owner: str
    demand: ResourceVector
    duration_s: tuple[int, int]  # uniform range, inclusive; fixed when equal
    uses_local_storage: bool = False
    env: dict = field(default_factory=dict)

    @classmethod
    def from_obj(cls, obj: dict) -> "JobTemplate":
        duration = obj.get("expected_duration_s", 600)
        if isinstance(duration, (list, tuple)):
            lo, hi = int(duration[0]), int(duration[1])
        else:
            lo = hi = int(duration)
        if lo <= 0 or hi < lo:
            raise ConfigInvalid(f"bad expected_duration_s {duration!r}")
        return cls(
            image=str(obj.get("image", "scratch")),
            command=tuple(obj.get("command", ["true"])),
            group=str(obj["group"]),
            owner=str(obj["owner"]),
            demand=ResourceVector.from_json_obj(obj.get("demand") or {}),
            duration_s=(lo, hi),
            uses_local_storage=bool(obj.get("uses_local_storage", False)),
            env=dict(obj.get("env") or {}),
        )


@dataclass(frozen=True)
class ArrivalPhase:
    duration_s: int
    rate_per_min: float
    offload_fraction: float
    template: JobTemplate


@dataclass(frozen=True)
class SessionEvent:
    time: float
    spec: WorkloadSpec


@dataclass
class ScenarioConfig:
    duration_s: int
    tick_s: int
    seed: int
    sites: list[SiteModel]
    local_capacity: ResourceVector
    arrivals: list[ArrivalPhase]
    session_events: list[SessionEvent]
    routing: RoutingPolicy
    groups: dict
    platform_secrets: dict[str, dict]
    node_defaults: dict

    def validate(self) -> None:
        if self.duration_s <= 0 or self.tick_s <= 0:
            raise ConfigInvalid("duration_s and tick_s must be positive")
        if self.duration_s % self.tick_s != 0:
            raise ConfigInvalid("tick_s must divide duration_s")
        if sum(phase.duration_s for phase in self.arrivals) != self.duration_s:
            raise ConfigInvalid("arrival phases must cover the whole scenario")
        seen = set()
        for site in self.sites:
            if site.site in seen:
                raise ConfigInvalid(f"duplicate site {site.site!r}")
            seen.add(site.site)
        for event in self.session_events:
            if not 0 <= event.time <= self.duration_s:
                raise ConfigInvalid("session event outside the scenario timeline")


def load_scenario(path: Path | str) -> ScenarioConfig:
    text = Path(path).read_text()
    return parse_scenario(text)


def parse_scenario(text: str) -> ScenarioConfig:
    try:
        obj = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"scenario does not parse: {exc}")
    if not isinstance(obj, dict):
        raise ConfigInvalid("scenario must be a mapping")
    try:
        sites = [
            SiteModel.from_json_obj(entry["site"], entry)
            for entry in obj.get("sites", [])
        ]
        phases = [
            ArrivalPhase(
                duration_s=int(entry["duration_s"]),
                rate_per_min=float(entry.get("rate_per_min", 0.0)),
                offload_fraction=float(entry.get("offload_fraction", 0.0)),
                template=JobTemplate.from_obj(entry["template"]),
            )
            for entry in obj.get("arrivals", [])
        ]
        sessions = []
        for entry in obj.get("session_events", []):
            spec_obj = dict(entry["session"])
            spec_obj.setdefault("kind", "interactive_session")
            sessions.append(
                SessionEvent(
                    time=float(entry["time"]),
                    spec=WorkloadSpec.from_json_obj(spec_obj),
                )
            )
        sessions.sort(key=lambda s: s.time)
        config = ScenarioConfig(
            duration_s=int(obj["duration_s"]),
            tick_s=int(obj["tick_s"]),
            seed=int(obj.get("seed", 0)),
            sites=sites,
            local_capacity=ResourceVector.from_json_obj(obj.get("local_capacity") or {}),
            arrivals=phases,
            session_events=sessions,
            routing=RoutingPolicy(
                min_offload_duration_s=int(
                    (obj.get("routing") or {}).get("min_offload_duration_s", 60)
                ),
                node_order=(obj.get("routing") or {}).get("node_order", "least_loaded"),
            ),
            groups=obj.get("groups") or {},
            platform_secrets=obj.get("platform_secrets") or {},
            node_defaults=obj.get("node_defaults") or {},
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigInvalid):
            raise
        raise ConfigInvalid(f"bad scenario config: {exc}")
    config.validate()
    return config


@dataclass(frozen=True)
class _Arrival:
    time: float
    spec: WorkloadSpec


def generate_arrivals(config: ScenarioConfig, seed: int) -> list[_Arrival]:
    """Seeded Poisson arrivals over the configured phases."""
    rng = random.Random(seed)
    arrivals: list[_Arrival] = []
    phase_start = 0.0
    index = 0
    for phase in config.arrivals:
        phase_end = phase_start + phase.duration_s
        if phase.rate_per_min > 0:
            rate_per_s = phase.rate_per_min / 60.0
            t = phase_start
            while True:
                t += rng.expovariate(rate_per_s)
                if t >= phase_end:
                    break
                index += 1
                template = phase.template
                flagged = rng.random() < phase.offload_fraction
                duration = rng.randint(*template.duration_s)
                spec = WorkloadSpec(
                    workload_id=f"job-{index:04d}",
                    owner=template.owner,
                    group=template.group,
                    image=template.image,
                    command=template.command,
                    env=dict(template.env),
                    demand=template.demand,
                    offload_compatible=flagged,
                    expected_duration_s=duration,
                    uses_local_storage=template.uses_local_storage and not flagged,
                    kind=WorkloadKind.BATCH_JOB,
                )
                arrivals.append(_Arrival(t, spec))
        phase_start = phase_end
    return arrivals


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    seed: int
    rows: list[tuple[int, str, int, int, int]]
    samples: list[MetricSample]
    decisions: list[dict]
    summary: dict
    ticks_checked: int

    def timeseries_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(TIMESERIES_HEADER)
        for row in self.rows:
            writer.writerow(row)
        return buf.getvalue()

    def samples_csv(self) -> str:
        buf = io.StringIO()
        write_samples_csv(self.samples, buf)
        return buf.getvalue()

    def decisions_jsonl(self) -> str:
        return "".join(canonical_json(entry) + "\n" for entry in self.decisions)

    def summary_json(self) -> str:
        return json.dumps(self.summary, indent=2, sort_keys=True) + "\n"


def run_scenario(config: ScenarioConfig, seed: Optional[int] = None) -> ScenarioResult:
    """Drive the full stack over the scenario's simulated timeline."""
    config.validate()
    effective_seed = config.seed if seed is None else seed
    clock = ManualClock(0.0)

    store = SecretStore()
    platform_names = []
    for name in sorted(config.platform_secrets):
        entry = config.platform_secrets[name]
        store.put(
            name,
            str(entry.get("payload", f"payload-{name}")).encode(),
            bool(entry.get("shareable", False)),
        )
        platform_names.append(name)
    gatekeeper = Gatekeeper(
        load_policies(config.groups),
        store,
        GatekeeperConfig(platform_secrets=tuple(platform_names)),
        clock=clock,
    )

    controller = QueueController(
        local_capacity=config.local_capacity,
        routing=config.routing,
        clock=clock,
    )
    registry = NodeRegistry(clock)
    controller.set_node_directory(registry)

    backends = {site.site: SimulatedSiteBackend(site, clock) for site in config.sites}
    defaults = config.node_defaults
    node_configs = {
        site.site: NodeConfig(
            node_id=site.site,
            plugin_endpoint=f"inprocess://{site.site}",
            heartbeat_interval_s=float(defaults.get("heartbeat_interval_s", config.tick_s)),
            ttl_s=float(defaults.get("ttl_s", 3 * config.tick_s)),
            poll_interval_s=float(defaults.get("poll_interval_s", config.tick_s)),
            max_retries=int(defaults.get("max_retries", 5)),
        )
        for site in config.sites
    }
    join_times = {site.site: site.join_time() for site in config.sites}

    arrivals = generate_arrivals(config, effective_seed)
    pending_arrivals = list(arrivals)
    pending_sessions = list(config.session_events)

    site_order = ["local"] + [site.site for site in config.sites]
    groups = sorted(config.groups) or [""]
    gpu_models = sorted(config.local_capacity.gpus)

    rows: list[tuple[int, str, int, int, int]] = []
    samples: list[MetricSample] = []
    peak_running: dict[str, int] = {site: 0 for site in site_order}
    ticks_checked = 0

    def resolver(names):
        return store.resolve_shareable(names)

    for t in range(0, config.duration_s + config.tick_s, config.tick_s):
        clock.set(float(t))

        # late-joining sites register when their first window opens
        for site in config.sites:
            if site.site not in [n.node_id for n in registry.all()] and join_times[site.site] <= t:
                client = InProcessPluginClient(backends[site.site])
                registry.register(node_configs[site.site], client)

        for backend in backends.values():
            backend.advance(float(t))

        apply_node_events(controller, registry.sync_all(float(t)), float(t))

        while pending_arrivals and pending_arrivals[0].time <= t:
            arrival = pending_arrivals.pop(0)
            record = gatekeeper.submit(arrival.spec, arrival.spec.owner)
            controller.enqueue(record)
        while pending_sessions and pending_sessions[0].time <= t:
            event = pending_sessions.pop(0)
            record = gatekeeper.submit(event.spec, event.spec.owner)
            gatekeeper.register_session(
                SessionTemplate(
                    session_id=event.spec.workload_id,
                    spec=record.spec,
                    startup_command=record.spec.command,
                )
            )
            controller.enqueue(record)

        decisions = controller.admit_cycle(float(t))
        for decision in decisions:
            if decision.action != "remote":
                continue
            node = registry.get(decision.node)
            job = controller.record(decision.job_id)
            events = node.dispatch(job, resolver)
            apply_node_events(controller, events, float(t))

        _check_conservation(controller)
        ticks_checked += 1

        running = controller.running_by_site()
        queued = controller.queued_count()
        evicted_total = controller.evicted_total
        for site in site_order:
            count = running.get(site, 0)
            peak_running[site] = max(peak_running[site], count)
            rows.append((t, site, count, queued, evicted_total))

        samples.extend(
            _tick_samples(controller, float(t), groups, site_order, gpu_models)
        )

    summary = _summarize(config, controller, peak_running, len(arrivals))
    return ScenarioResult(
        config=config,
        seed=effective_seed,
        rows=rows,
        samples=samples,
        decisions=list(controller.decisions),
        summary=summary,
        ticks_checked=ticks_checked,
    )


def _check_conservation(controller: QueueController) -> None:
    """submitted = queued + in-flight + terminal, with no job left Evicted
    across a cycle boundary."""
    counts = controller.counts_by_state()
    queued = counts.get(JobState.QUEUED.value, 0)
    in_flight = sum(counts.get(state.value, 0) for state in IN_FLIGHT_STATES)
    terminal = (
        counts.get(JobState.SUCCEEDED.value, 0)
        + counts.get(JobState.FAILED.value, 0)
        + counts.get(JobState.CANCELLED.value, 0)
    )
    evicted_in_flight = counts.get(JobState.EVICTED.value, 0)
    total = queued + in_flight + terminal + evicted_in_flight
    if evicted_in_flight != 0:
        raise ConservationError(
            f"{evicted_in_flight} jobs left in Evicted at a tick boundary"
        )
    if total != controller.submitted_total:
        raise ConservationError(
            f"ledger mismatch: {total} accounted vs {controller.submitted_total} submitted"
        )


def _tick_samples(
    controller: QueueController,
    t: float,
    groups: Sequence[str],
    site_order: Sequence[str],
    gpu_models: Sequence[str],
) -> list[MetricSample]:
    running: dict[tuple[str, str], int] = {}
    local_gpus: dict[tuple[str, str], int] = {}
    evictions: dict[str, int] = {}
    for record in controller.jobs.values():
        group = record.spec.group
        if record.state is JobState.RUNNING and record.assigned_site:
            key = (group, record.assigned_site)
            running[key] = running.get(key, 0) + 1
        if record.state is JobState.RUNNING and record.assigned_site == "local":
            for model, count in record.spec.demand.gpus.items():
                gkey = (group, model)
                local_gpus[gkey] = local_gpus.get(gkey, 0) + count
        if record.eviction_count:
            evictions[group] = evictions.get(group, 0) + record.eviction_count

    samples = []
    for group in groups:
        for site in site_order:
            samples.append(
                MetricSample(
                    name="jobs_running",
                    labels={"group": group, "site": site},
                    value=float(running.get((group, site), 0)),
                    timestamp=t,
                )
            )
        for model in gpu_models:
            samples.append(
                MetricSample(
                    name="gpus_allocated",
                    labels={"group": group, "site": "local", "model": model},
                    value=float(local_gpus.get((group, model), 0)),
                    timestamp=t,
                )
            )
        samples.append(
            MetricSample(
                name="jobs_evicted_total",
                labels={"group": group, "site": "local"},
                value=float(evictions.get(group, 0)),
                timestamp=t,
            )
        )
    return samples


def _summarize(
    config: ScenarioConfig,
    controller: QueueController,
    peak_running: dict[str, int],
    arrival_count: int,
) -> dict:
    per_site: dict[str, dict] = {}
    for site in peak_running:
        per_site[site] = {"succeeded": 0, "failed": 0, "peak_running": peak_running[site]}
    for record in controller.jobs.values():
        site = record.assigned_site
        if site is None or site not in per_site:
            continue
        if record.state is JobState.SUCCEEDED:
            per_site[site]["succeeded"] += 1
        elif record.state is JobState.FAILED:
            per_site[site]["failed"] += 1
    return {
        "duration_s": config.duration_s,
        "tick_s": config.tick_s,
        "seed": config.seed,
        "arrivals": arrival_count,
        "sessions": len(config.session_events),
        "submitted": controller.submitted_total,
        "evicted_total": controller.evicted_total,
        "final_states": controller.counts_by_state(),
        "per_site": per_site,
    }


def write_artifacts(result: ScenarioResult, out_dir: Path, figure: bool = True) -> dict[str, Path]:
    """Write the run artifacts; returns the paths written."""
    from .plotting import emit_plot_data, render_running_figure

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}

    timeseries = out_dir / "timeseries.csv"
    timeseries.write_text(result.timeseries_csv(), newline="")
    paths["timeseries"] = timeseries

    stacked = out_dir / "stacked.csv"
    stacked.write_text(emit_plot_data(result.timeseries_csv()), newline="")
    paths["stacked"] = stacked

    samples = out_dir / "samples.csv"
    samples.write_text(result.samples_csv(), newline="")
    paths["samples"] = samples

    decisions = out_dir / "decisions.jsonl"
    decisions.write_text(result.decisions_jsonl())
    paths["decisions"] = decisions

    summary = out_dir / "summary.json"
    summary.write_text(result.summary_json())
    paths["summary"] = summary

    if figure:
        png = out_dir / "running_by_site.png"
        render_running_figure(result.timeseries_csv(), png)
        paths["figure"] = png
    return paths
