import csv
import json
import math
from pathlib import Path

import numpy as np
from rich.console import Console
from rich.table import Table

from mfclab import __version__
from mfclab.utils.console import console as default_console

MANIFEST_FILE = "manifest.json"


def _jsonable(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (set, tuple)):
        return list(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def fmt(value, digits: int = 4) -> str:
    """Compact number for tables; '-' for missing values."""
    if value is None:
        return "-"
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(value)
    return f"{float(value):.{digits}g}"


class RunReporter:
    """Writes run artifacts (JSON manifest, CSV tables) into one output directory."""

    def __init__(self, out_dir: str, console: Console | None = None):
        self.out_dir = Path(out_dir)
        self.console = console or default_console

    def _ensure_dir(self):
        """Creates the output directory; returns False if the path exists and is not a directory."""
        if self.out_dir.exists() and not self.out_dir.is_dir():
            return False
        self.out_dir.mkdir(parents=True, exist_ok=True)
        return True

    def write_manifest(self, command: str, config: dict, fingerprint: str, results: dict, partial: bool = False):
        if not self._ensure_dir():
            raise NotADirectoryError(f"Output path {self.out_dir} is not a directory")

        manifest = {
            "command": command,
            "status": "partial" if partial else "complete",
            "mfclab_version": __version__,
            "fingerprint": fingerprint,
            "config": config,
            "results": results,
        }
        target_file = self.out_dir / MANIFEST_FILE
        with open(target_file, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True, default=_jsonable)
            f.write("\n")

        self.console.print(f"📝 Wrote run manifest to {target_file}")
        return target_file

    def write_table(self, name: str, rows: list[dict]):
        """CSV with the union of row keys as columns, first-seen order."""
        if not self._ensure_dir():
            raise NotADirectoryError(f"Output path {self.out_dir} is not a directory")

        columns: list[str] = []
        for row in rows:
            columns.extend(k for k in row if k not in columns)
        target_file = self.out_dir / name
        with open(target_file, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=columns, restval="")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _cell(v) for k, v in row.items()})

        self.console.print(f"📝 Wrote {len(rows)} rows to {target_file}")
        return target_file


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


# --- Rich renderers ---


def validation_table(report) -> Table:
    table = Table(title=f"{report.kind.capitalize()} checks: {report.model}")
    table.add_column("Check", style="cyan", no_wrap=True)
    table.add_column("Constant", justify="right")
    table.add_column("Exponent", justify="right")
    table.add_column("Allowed", justify="right")
    table.add_column("Status", justify="center")
    for c in report.checks:
        status = "[bold green]PASS[/bold green]" if c.passed else "[bold red]FAIL[/bold red]"
        table.add_row(c.name, fmt(c.constant), fmt(c.exponent), fmt(c.allowed_exponent), status)
    return table


def convergence_table(run) -> Table:
    fields = sorted({f for row in run.medians.values() for f in row})
    table = Table(title=f"{run.kind.capitalize()} limit: medians over seeds")
    table.add_column("n", justify="right", style="cyan")
    for f in fields:
        table.add_column(f, justify="right")
    table.add_column("failed", justify="right")
    for n, row in run.medians.items():
        failed = sum(1 for r in run.records if r.n == n and r.status != "ok")
        failed_cell = f"[bold red]{failed}[/bold red]" if failed else "0"
        table.add_row(str(n), *(fmt(row.get(f)) for f in fields), failed_cell)
    return table


def chatter_table(study) -> Table:
    table = Table(title="Chattering: strict vs relaxed value")
    table.add_column("Refinement", justify="right", style="cyan")
    table.add_column("Strict value", justify="right")
    table.add_column("|gap|", justify="right")
    table.add_column("Std. error", justify="right")
    table.add_column("gap / SE", justify="right")
    for row in study.rows:
        ratio = row.gap / row.std_error if row.std_error > 0 else float("inf")
        table.add_row(str(row.refinement), fmt(row.value), fmt(row.gap), fmt(row.std_error), fmt(ratio, 3))
    return table
