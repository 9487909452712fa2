"""Continual-learning metrics over the session-by-task accuracy matrix.

``a[t][i]`` is the accuracy on task i's test set measured after training
session t (1-based, i <= t). Final accuracy and per-session averages are
sample-weighted over the seen test sets; forgetting averages, per past task,
the gap between its best earlier accuracy and its final accuracy.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ProtocolError
from .matching import SelectionRecord


@dataclass
class AccuracyMatrix:
    """Lower-triangular accuracy records plus per-task test-set sizes."""

    num_tasks: int
    test_sizes: dict[int, int] = field(default_factory=dict)
    rows: dict[int, dict[int, float]] = field(default_factory=dict)

    def add_session(self, session: int, accuracies: dict[int, float]) -> None:
        if session != len(self.rows) + 1:
            raise ProtocolError(
                f"session {session} recorded after {len(self.rows)} sessions"
            )
        if sorted(accuracies) != list(range(1, session + 1)):
            raise ProtocolError(f"session {session} must cover tasks 1..{session}")
        for i, acc in accuracies.items():
            if not 0.0 <= acc <= 1.0:
                raise ProtocolError(f"accuracy {acc} for task {i} outside [0, 1]")
        self.rows[session] = dict(accuracies)

    def get(self, session: int, task: int) -> float:
        if task > session:
            raise ProtocolError(f"a[{session}][{task}] is above the diagonal")
        return self.rows[session][task]

    @property
    def sessions_recorded(self) -> int:
        return len(self.rows)

    @property
    def complete(self) -> bool:
        return self.sessions_recorded == self.num_tasks

    def size_of(self, task: int) -> int:
        if task not in self.test_sizes:
            raise ProtocolError(f"no test-set size recorded for task {task}")
        return self.test_sizes[task]

    def seen_accuracy(self, session: int) -> float:
        """Sample-weighted accuracy over all tasks seen through a session."""
        if session not in self.rows:
            raise ProtocolError(f"session {session} not recorded")
        weights = [self.size_of(i) for i in range(1, session + 1)]
        values = [self.rows[session][i] for i in range(1, session + 1)]
        return float(np.average(values, weights=weights))

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out)
        writer.writerow(["session"] + [f"task_{i}" for i in range(1, self.num_tasks + 1)])
        for t in range(1, self.sessions_recorded + 1):
            row: list[str] = [str(t)]
            for i in range(1, self.num_tasks + 1):
                row.append(repr(self.rows[t][i]) if i <= t else "")
            writer.writerow(row)
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str, test_sizes: dict[int, int]) -> "AccuracyMatrix":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        num_tasks = len(header) - 1
        matrix = cls(num_tasks=num_tasks, test_sizes=dict(test_sizes))
        for row in reader:
            session = int(row[0])
            matrix.add_session(
                session,
                {i: float(row[i]) for i in range(1, session + 1)},
            )
        return matrix


def last_acc(matrix: AccuracyMatrix) -> float:
    """Sample-weighted accuracy over every task's test set at the final session."""
    if not matrix.complete:
        raise ProtocolError(
            f"protocol incomplete: {matrix.sessions_recorded}/{matrix.num_tasks} sessions"
        )
    return matrix.seen_accuracy(matrix.num_tasks)


def avg_acc(matrix: AccuracyMatrix) -> float:
    """Mean over sessions of the seen-so-far sample-weighted accuracy."""
    if not matrix.complete:
        raise ProtocolError(
            f"protocol incomplete: {matrix.sessions_recorded}/{matrix.num_tasks} sessions"
        )
    return float(
        np.mean([matrix.seen_accuracy(t) for t in range(1, matrix.num_tasks + 1)])
    )


def forgetting(matrix: AccuracyMatrix) -> float:
    """Mean over past tasks of (best earlier accuracy - final accuracy)."""
    if matrix.num_tasks < 2:
        raise ProtocolError("forgetting is undefined for a single-task protocol")
    if not matrix.complete:
        raise ProtocolError(
            f"protocol incomplete: {matrix.sessions_recorded}/{matrix.num_tasks} sessions"
        )
    final = matrix.num_tasks
    gaps = []
    for i in range(1, final):
        best = max(matrix.rows[t][i] for t in range(i, final))
        gaps.append(best - matrix.rows[final][i])
    return float(np.mean(gaps))


@dataclass
class SelectionMatrix:
    """Row-normalized confusion of chosen task vs ground-truth task."""

    values: np.ndarray  # [T, T], rows sum to 1
    counts: np.ndarray  # queries per ground-truth task

    @property
    def num_tasks(self) -> int:
        return self.values.shape[0]

    def diagonal_mass(self) -> float:
        """Overall selection accuracy, weighting rows by query counts."""
        total = self.counts.sum()
        return float((np.diag(self.values) * self.counts).sum() / total)


def selection_matrix(records: list[SelectionRecord], num_tasks: int) -> SelectionMatrix:
    counts = np.zeros((num_tasks, num_tasks), dtype=np.float64)
    for rec in records:
        if rec.ground_truth_task is None:
            raise ProtocolError("selection records need ground-truth tasks for the matrix")
        counts[rec.ground_truth_task - 1, rec.chosen - 1] += 1
    row_totals = counts.sum(axis=1)
    if (row_totals == 0).any():
        missing = int(np.nonzero(row_totals == 0)[0][0]) + 1
        raise ProtocolError(f"no selection records for ground-truth task {missing}")
    return SelectionMatrix(values=counts / row_totals[:, None], counts=row_totals)


def selection_accuracy(records: list[SelectionRecord]) -> float:
    if not records:
        raise ProtocolError("no selection records")
    hits = sum(1 for r in records if r.ground_truth_task == r.chosen)
    return hits / len(records)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def export(
    out_dir: str | Path,
    matrix: AccuracyMatrix | None = None,
    records: list[SelectionRecord] | None = None,
    render: bool = False,
) -> list[Path]:
    """Write the metric tables; empty inputs produce header-only files.

    Files: metrics.csv (session, last_acc_so_far, avg_acc_so_far, ff_so_far),
    curve.csv (session, seen accuracy), accuracy_matrix.csv, and, when records
    are given, selection_matrix.csv (+ optional rendered heatmap.png).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    metrics_rows: list[list] = []
    curve_rows: list[list] = []
    if matrix is not None:
        for t in range(1, matrix.sessions_recorded + 1):
            seen = matrix.seen_accuracy(t)
            avg_so_far = float(np.mean([matrix.seen_accuracy(s) for s in range(1, t + 1)]))
            if t >= 2:
                gaps = []
                for i in range(1, t):
                    best = max(matrix.rows[s][i] for s in range(i, t))
                    gaps.append(best - matrix.rows[t][i])
                ff = repr(float(np.mean(gaps)))
            else:
                ff = ""
            metrics_rows.append([t, repr(seen), repr(avg_so_far), ff])
            curve_rows.append([t, repr(seen)])
    metrics_path = out_dir / "metrics.csv"
    _write_csv(metrics_path, ["session", "last_acc_so_far", "avg_acc_so_far", "ff_so_far"], metrics_rows)
    written.append(metrics_path)
    curve_path = out_dir / "curve.csv"
    _write_csv(curve_path, ["session", "seen_accuracy"], curve_rows)
    written.append(curve_path)

    matrix_path = out_dir / "accuracy_matrix.csv"
    if matrix is not None:
        matrix_path.write_text(matrix.to_csv())
    else:
        matrix_path.write_text("session\n")
    written.append(matrix_path)

    if records:
        num_tasks = max(r.ground_truth_task for r in records)  # tasks seen so far
        sel = selection_matrix(records, num_tasks)
        header = ["true_task"] + [f"chosen_{p}" for p in range(1, num_tasks + 1)]
        rows = [
            [g + 1] + [repr(float(v)) for v in sel.values[g]] for g in range(num_tasks)
        ]
        sel_path = out_dir / "selection_matrix.csv"
        _write_csv(sel_path, header, rows)
        written.append(sel_path)
        if render:
            written.append(_render_heatmap(sel, out_dir / "selection_heatmap.png"))
    return written


def _render_heatmap(sel: SelectionMatrix, path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(sel.values, cmap="Blues", vmin=0.0, vmax=1.0)
    ax.set_xlabel("chosen task")
    ax.set_ylabel("ground-truth task")
    ticks = range(sel.num_tasks)
    ax.set_xticks(ticks, [str(t + 1) for t in ticks])
    ax.set_yticks(ticks, [str(t + 1) for t in ticks])
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
