"""Command-line entry points.

* ``gateway serve --config FILE``: run the live gateway API.
* ``gateway simulate --scenario FILE --out DIR [--seed N]``: replay a
  scenario in simulated time; writes the time series CSV, stacked plot
  data, metric samples, decision audit, summary and a rendered figure.
* ``gateway account --window N --in CSV --out CSV``: aggregate metric
  samples into windowed accounting records.
* ``gateway plugin ...``: serve a backend over the plugin protocol.
"""

from __future__ import annotations

import importlib.resources
import logging
import os
import sys
from pathlib import Path

import click
import yaml

from .accounting import aggregate_accounting, read_samples_csv, write_records_csv
from .clock import SystemClock
from .plugins.httpd import PluginHTTPServer
from .plugins.local import LocalProcessBackend
from .plugins.simulated import SimulatedSiteBackend, SiteModel
from .scenario import ConfigInvalid, load_scenario, parse_scenario, run_scenario, write_artifacts
from .service import GatewayService, ServeConfig


def _setup_logging() -> None:
    level = os.environ.get("GATEWAY_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


@click.group()
def main():
    """Batch gateway: opportunistic local scheduling with remote offload."""
    _setup_logging()


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def serve(config_path: str):
    """Run the live gateway (HTTP API, scheduler, node sync loops)."""
    service = GatewayService(ServeConfig.load(config_path))
    service.start()
    try:
        service.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        service.stop()


def _resolve_scenario(name: str) -> str:
    path = Path(name)
    if path.exists():
        return path.read_text()
    bundled = importlib.resources.files("gateway") / "scenarios" / name
    if bundled.is_file():
        return bundled.read_text()
    raise click.ClickException(f"scenario {name!r} not found (no such file or bundle)")


@main.command()
@click.option("--scenario", "scenario_name", required=True,
              help="Scenario file path, or the name of a bundled scenario.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="Override the scenario seed.")
@click.option("--figure/--no-figure", default=True, show_default=True,
              help="Render the stacked running-jobs figure.")
def simulate(scenario_name: str, out_dir: str, seed: int | None, figure: bool):
    """Replay a scenario deterministically and write run artifacts."""
    try:
        config = parse_scenario(_resolve_scenario(scenario_name))
        result = run_scenario(config, seed=seed)
    except ConfigInvalid as exc:
        raise click.ClickException(f"invalid scenario: {exc}")
    paths = write_artifacts(result, Path(out_dir), figure=figure)
    summary = result.summary
    click.echo(
        f"simulated {summary['duration_s']}s in {result.ticks_checked} ticks: "
        f"{summary['submitted']} submitted, {summary['evicted_total']} evicted"
    )
    for site, stats in sorted(summary["per_site"].items()):
        click.echo(
            f"  {site}: succeeded={stats['succeeded']} failed={stats['failed']} "
            f"peak_running={stats['peak_running']}"
        )
    for kind, path in sorted(paths.items()):
        click.echo(f"  wrote {kind}: {path}")


@main.command()
@click.option("--window", "window_s", required=True, type=float)
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def account(window_s: float, in_path: str, out_path: str):
    """Aggregate a metric sample CSV into windowed accounting records."""
    with open(in_path, newline="") as fp:
        samples = read_samples_csv(fp)
    records = aggregate_accounting(samples, window_s)
    with open(out_path, "w", newline="") as fp:
        write_records_csv(records, fp)
    click.echo(f"wrote {len(records)} accounting records to {out_path}")


@main.command()
@click.option("--site", "site_name", default="podman", show_default=True)
@click.option("--mode", type=click.Choice(["local", "simulated"]), default="local",
              show_default=True)
@click.option("--model", "model_path", type=click.Path(exists=True),
              help="Site model YAML (simulated mode).")
@click.option("--workdir", type=click.Path(), default="./plugin-scratch",
              show_default=True, help="Scratch root for the local executor.")
@click.option("--slots", type=int, default=4, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=9000, show_default=True)
def plugin(site_name: str, mode: str, model_path: str | None, workdir: str,
           slots: int, host: str, port: int):
    """Serve one backend over the plugin REST protocol."""
    clock = SystemClock()
    if mode == "local":
        backend = LocalProcessBackend(site_name, clock, Path(workdir), slots=slots)
        backend.start_reaper()
    else:
        if not model_path:
            raise click.ClickException("--model is required in simulated mode")
        obj = yaml.safe_load(Path(model_path).read_text())
        backend = SimulatedSiteBackend(SiteModel.from_json_obj(site_name, obj), clock)
    server = PluginHTTPServer(backend, host=host, port=port)
    click.echo(f"plugin for site {site_name!r} listening on {server.address}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass


if __name__ == "__main__":
    sys.exit(main())
