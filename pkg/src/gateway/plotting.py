"""Stacked per-site series and figure rendering for scenario reports.

``emit_plot_data`` turns the run's time series into cumulative stacked
columns suitable for any plotting tool; ``render_running_figure`` draws
the stacked-area chart to a PNG next to the delimited output.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .scenario import TIMESERIES_HEADER


class MalformedCSV(ValueError):
    pass


def _parse_timeseries(csv_text: str) -> tuple[list[int], list[str], dict[str, list[int]]]:
    """Returns (ticks, site order, per-site running series)."""
    reader = csv.reader(io.StringIO(csv_text))
    header = next(reader, None)
    if header is None:
        return [], [], {}
    if header != TIMESERIES_HEADER:
        raise MalformedCSV(f"unexpected header {header!r}")
    ticks: list[int] = []
    sites: list[str] = []
    series: dict[str, dict[int, int]] = {}
    for row in reader:
        if len(row) != len(TIMESERIES_HEADER):
            raise MalformedCSV(f"bad row {row!r}")
        try:
            t = int(row[0])
            running = int(row[2])
        except ValueError:
            raise MalformedCSV(f"non-integer fields in row {row!r}")
        site = row[1]
        if site not in series:
            sites.append(site)
            series[site] = {}
        series[site][t] = running
        if not ticks or t > ticks[-1]:
            ticks.append(t)
        elif t < ticks[-1]:
            raise MalformedCSV("ticks must be non-decreasing")
    dense = {
        site: [values.get(t, 0) for t in ticks] for site, values in series.items()
    }
    return ticks, sites, dense


def emit_plot_data(csv_text: str) -> str:
    """Cumulative stacked series per site, as CSV.

    Column k holds the sum of the first k sites' running counts, so the
    document plots directly as a stacked chart. Site order follows first
    appearance in the input. An empty input yields an empty document.
    """
    ticks, sites, series = _parse_timeseries(csv_text)
    if not ticks:
        return ""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["t"] + sites)
    for i, t in enumerate(ticks):
        total = 0
        row: list[int] = [t]
        for site in sites:
            total += series[site][i]
            row.append(total)
        writer.writerow(row)
    return buf.getvalue()


def render_running_figure(csv_text: str, out_path: Path | str) -> None:
    """Render the running-jobs-by-site stacked area chart to a file."""
    ticks, sites, series = _parse_timeseries(csv_text)
    fig, ax = plt.subplots(figsize=(9, 4.5))
    if ticks:
        hours = [t / 3600.0 for t in ticks]
        ax.stackplot(
            hours,
            [series[site] for site in sites],
            labels=sites,
            linewidth=0.2,
        )
        ax.legend(loc="upper left", fontsize=8, ncol=2)
    ax.set_xlabel("time [h]")
    ax.set_ylabel("running jobs")
    ax.set_title("Running jobs by site")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
