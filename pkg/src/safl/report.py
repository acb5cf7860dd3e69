"""Layer-selection frequency tables built from selection traces alone."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .selector import read_trace

BAND_NAMES = ("Lower", "Middle", "Higher", "Output")


@dataclass
class BandRow:
    name: str
    first: int
    last: int
    selection_pct: float
    avg_raw_attention: float | None
    avg_normalized_attention: float | None

    @property
    def label(self) -> str:
        return f"{self.name} ({self.first}-{self.last})"


@dataclass
class LayerFrequencyTable:
    rows: list[BandRow]
    per_layer_pct: np.ndarray
    num_records: int
    num_layers: int
    strategy: str

    def to_text(self) -> str:
        lines = [
            f"Layer selection frequency ({self.strategy}, {self.num_records} client-rounds, {self.num_layers} layers)",
            f"{'Layer group':<20}{'Selection %':>13}{'Avg attn (raw)':>16}{'Avg attn (norm)':>17}",
        ]
        for r in self.rows:
            raw = "n/a" if r.avg_raw_attention is None else f"{r.avg_raw_attention:.4f}"
            norm = "n/a" if r.avg_normalized_attention is None else f"{r.avg_normalized_attention:.4f}"
            lines.append(f"{r.label:<20}{r.selection_pct:>13.1f}{raw:>16}{norm:>17}")
        lines.append(f"{'Total':<20}{sum(r.selection_pct for r in self.rows):>13.1f}")
        return "\n".join(lines)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer_group", "first_layer", "last_layer", "selection_pct", "avg_raw_attention", "avg_normalized_attention"])
            for r in self.rows:
                w.writerow([r.name, r.first, r.last, r.selection_pct, r.avg_raw_attention, r.avg_normalized_attention])


def layer_bands(num_layers: int, num_bands: int = 4) -> list[np.ndarray]:
    """Split layer ids ``1..L`` into contiguous, near-equal bands."""
    return [b for b in np.array_split(np.arange(1, num_layers + 1), num_bands) if len(b)]


def frequency_table(records: Sequence[dict], num_layers: int | None = None) -> LayerFrequencyTable:
    if not records:
        raise ValueError("frequency_table: empty trace")
    if num_layers is None:
        known = [r["num_layers"] for r in records if r.get("num_layers")]
        num_layers = known[0] if known else max(max(r["selected"]) for r in records)
    counts = np.zeros(num_layers)
    raw_sum = np.zeros(num_layers)
    norm_sum = np.zeros(num_layers)
    scored = 0
    for r in records:
        for lid in r["selected"]:
            counts[lid - 1] += 1
        if r.get("raw_scores") is not None:
            raw_sum += np.asarray(r["raw_scores"])
            norm_sum += np.asarray(r["normalized_scores"])
            scored += 1
    total = counts.sum()
    per_layer = 100.0 * counts / total if total else counts
    rows = []
    for name, band in zip(BAND_NAMES, layer_bands(num_layers)):
        idx = band - 1
        rows.append(
            BandRow(
                name=name,
                first=int(band[0]),
                last=int(band[-1]),
                selection_pct=float(per_layer[idx].sum()),
                avg_raw_attention=float(raw_sum[idx].mean() / scored) if scored else None,
                avg_normalized_attention=float(norm_sum[idx].mean() / scored) if scored else None,
            )
        )
    strategies = sorted({r.get("strategy", "?") for r in records})
    return LayerFrequencyTable(rows, per_layer, len(records), num_layers, ", ".join(strategies))


def report_run(run_dir: str | Path) -> LayerFrequencyTable:
    """Build the table from ``run_dir/selection_trace.jsonl`` and write ``layer_frequency.csv``."""
    run_dir = Path(run_dir)
    table = frequency_table(read_trace(run_dir / "selection_trace.jsonl"))
    table.to_csv(run_dir / "layer_frequency.csv")
    return table
