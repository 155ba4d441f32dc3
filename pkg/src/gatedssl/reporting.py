"""Result tables over finished runs, in the layout of the accuracy tables
used for long-tailed benchmarks: one row per run (labelled by its task
combination), one column per dataset/ratio, best value per column bolded in
the markdown rendering. A CSV with the raw logged accuracies is produced
alongside.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .transforms import TaskKind

TASK_DISPLAY = {
    TaskKind.LOROT_E: "LoRot-E",
    TaskKind.QUAD_FLIP: "Flip",
    TaskKind.CHANNEL_SHUFFLE: "ShuffleChannel",
}


def method_label(tasks: tuple[TaskKind, ...]) -> str:
    names = [TASK_DISPLAY[t] for t in tasks]
    if len(names) == 1:
        return f"+{names[0]}"
    return "+MoE(" + "+".join(names) + ")"


@dataclass(frozen=True)
class RunRow:
    label: str
    column: str  # "<dataset> <ratio>" or "<dataset>"
    accuracy: float  # final-epoch top-1, as logged (fraction)


def _load_run(run_dir: Path) -> RunRow:
    config = json.loads((run_dir / "config.json").read_text())
    lines = [l for l in (run_dir / "metrics.jsonl").read_text().splitlines() if l.strip()]
    if not lines:
        raise FileNotFoundError(f"{run_dir}/metrics.jsonl is empty")
    last = json.loads(lines[-1])
    tasks = tuple(TaskKind(t) for t in config["tasks"])
    dataset = config["dataset"]["name"]
    ratio = config.get("imbalance_ratio")
    column = f"{dataset} {ratio}" if ratio is not None else dataset
    return RunRow(method_label(tasks), column, float(last["val_acc"]))


def collect_rows(run_dirs: list[Path]) -> tuple[list[RunRow], list[str]]:
    """Read every run dir; unreadable ones become warnings, not errors."""
    rows, warnings = [], []
    for run_dir in run_dirs:
        try:
            rows.append(_load_run(Path(run_dir)))
        except (OSError, KeyError, json.JSONDecodeError, FileNotFoundError) as exc:
            warnings.append(f"skipping {run_dir}: {exc}")
    return rows, warnings


def render_tables(rows: list[RunRow]) -> tuple[str, str]:
    """Returns (markdown, csv), one table row per run in input order.

    Markdown shows percentages with the best value per column bolded; the
    CSV carries the raw logged fractions so the numbers round-trip exactly.
    """
    columns = sorted({row.column for row in rows})
    best = {
        column: max(row.accuracy for row in rows if row.column == column)
        for column in columns
    }

    md = ["# Imbalanced classification accuracy (%)", ""]
    md.append("| Method | " + " | ".join(columns) + " |")
    md.append("|---" * (len(columns) + 1) + "|")
    for row in rows:
        row_cells = []
        for column in columns:
            if row.column != column:
                row_cells.append("-")
                continue
            text = f"{100.0 * row.accuracy:.2f}"
            row_cells.append(f"**{text}**" if row.accuracy == best[column] else text)
        md.append(f"| {row.label} | " + " | ".join(row_cells) + " |")
    markdown = "\n".join(md) + "\n"

    csv_lines = ["method," + ",".join(columns)]
    for row in rows:
        fields = [row.label]
        fields.extend(repr(row.accuracy) if row.column == column else "" for column in columns)
        csv_lines.append(",".join(fields))
    return markdown, "\n".join(csv_lines) + "\n"
