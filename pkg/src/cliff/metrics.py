"""Accuracy matrices, final average accuracy, forgetting, and text reports."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, StateError


@dataclass
class EvalMatrix:
    """``rows[s][t]``: accuracy (%) on task ``t`` after training step ``s``.

    Sequential runs give a lower-triangular matrix (``None`` above the
    diagonal).  A joint run is a single full row.
    """

    task_names: list[str]
    rows: list[list[float | None]] = field(default_factory=list)
    method: str = ""

    def __post_init__(self):
        for s, row in enumerate(self.rows):
            if len(row) != len(self.task_names):
                raise DataError(f"row {s} has {len(row)} entries for {len(self.task_names)} tasks")
            for v in row:
                if v is not None and not 0.0 <= v <= 100.0:
                    raise DataError(f"accuracy {v} outside [0, 100]")

    @classmethod
    def lower_triangular(cls, task_names, rows, method: str = "") -> "EvalMatrix":
        """Build from ragged rows where row ``s`` lists tasks ``0..s``."""
        n = len(task_names)
        full = [list(r) + [None] * (n - len(r)) for r in rows]
        return cls(list(task_names), full, method)

    @property
    def num_steps(self) -> int:
        return len(self.rows)

    @property
    def is_sequential(self) -> bool:
        return all(v is None for s, row in enumerate(self.rows) for v in row[s + 1:]) and self.num_steps > 1

    def final_row(self) -> list[float]:
        if not self.rows:
            raise StateError("evaluation matrix has no rows")
        last = self.rows[-1]
        if any(v is None for v in last):
            raise StateError("final row is incomplete; every task must be evaluated after the last step")
        return [float(v) for v in last]

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "task_names": list(self.task_names),
            "matrix": [list(r) for r in self.rows],
            "avg_accuracy": avg_accuracy(self),
            "forgetting": forgetting(self) if self.num_steps >= 2 else None,
        }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalMatrix":
        rows = [[None if v is None else float(v) for v in r] for r in d["matrix"]]
        return cls(list(d["task_names"]), rows, d.get("method", ""))

    @classmethod
    def from_json(cls, text: str) -> "EvalMatrix":
        return cls.from_dict(json.loads(text))


def avg_accuracy(matrix: EvalMatrix) -> float:
    """Macro-average of the final row."""
    return float(np.mean(matrix.final_row()))


def forgetting(matrix: EvalMatrix) -> float:
    """Mean drop from each task's peak (any step from its own onward) to its final value.

    The last task has no later measurement and is excluded.
    """
    m = matrix.num_steps
    if m < 2:
        raise StateError("forgetting needs at least two training steps")
    if len(matrix.task_names) != m:
        raise StateError("forgetting needs a square step-by-task matrix")
    final = matrix.final_row()
    drops = []
    for t in range(m - 1):
        column = [matrix.rows[s][t] for s in range(t, m)]
        if any(v is None for v in column):
            raise StateError(f"task {t} is missing an evaluation after step {t}")
        drops.append(max(column) - final[t])
    return float(np.mean(drops))


def evaluate_step(model, validation_sets: list, batch_size: int = 64) -> list[float]:
    """Accuracy (%) on each task; a hit needs both the class and the material right."""
    accs = []
    for t, samples in enumerate(validation_sets):
        if not samples:
            raise DataError(f"validation set for task {t} is empty")
        images = np.stack([s.image for s in samples])
        labels = np.array([s.thickness_class for s in samples])
        cls, mat = model.predict(images, batch_size=batch_size)
        accs.append(100.0 * float(np.mean((cls == labels) & (mat == t))))
    return accs


def evaluate_sequence(models: list, validation_sets: list, task_names, method: str = "") -> EvalMatrix:
    """Row ``s`` evaluates the step-``s`` model on tasks ``0..s``."""
    if len(models) == 1 and len(validation_sets) > 1:
        return EvalMatrix(list(task_names), [evaluate_step(models[0], validation_sets)], method)
    rows = [evaluate_step(model, validation_sets[: s + 1]) for s, model in enumerate(models)]
    return EvalMatrix.lower_triangular(task_names, rows, method)


def _fmt(v: float | None) -> str:
    return "-" if v is None else f"{v:.2f}"


def summary_line(matrix: EvalMatrix) -> str:
    line = f"Avg. Accuracy: {avg_accuracy(matrix):.2f}%"
    if matrix.num_steps >= 2:
        line += f" Forgetting: {forgetting(matrix):.2f}%"
    return line


def render_table(reports: list[EvalMatrix]) -> str:
    """Per-method blocks: one row per training step, one column per tested task."""
    if not reports:
        return ""
    names = reports[0].task_names
    labels = [f"T{i + 1}" for i in range(len(names))]
    header = f"{'Method':<18}{'Trained on':<12}" + "".join(f"{h:>9}" for h in labels)
    legend = "Tasks: " + ", ".join(f"{lab}={n}" for lab, n in zip(labels, names))
    rule = "-" * len(header)
    out = [legend, rule, header, rule]
    for rep in reports:
        for s, row in enumerate(rep.rows):
            method = rep.method if s == 0 else ""
            step = labels[s] if rep.num_steps > 1 else "Ensemble"
            out.append(f"{method:<18}{step:<12}" + "".join(f"{_fmt(v):>9}" for v in row))
        out.append(f"{'':<18}{'Summary':<12}  {summary_line(rep)}")
        out.append(rule)
    return "\n".join(out) + "\n"


def render_comparison(reports: list[EvalMatrix]) -> tuple[str, str]:
    """Text table plus JSON export (full matrices and recomputed summaries)."""
    text = render_table(reports)
    payload = json.dumps([r.to_dict() for r in reports], indent=2) + "\n"
    return text, payload
