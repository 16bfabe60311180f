"""Feature-importance distributions and crime-level transition tables.

Importance comes either from the attention weights of an attention model fed
the flat feature vector one value per step (so each attention position is
exactly one feature), or from the QICVN per-feature mixture weights.
Transition tables relate the most severe (numerically lowest) history level
to the label level ``L``: the correlation table counts frequencies in the
data, the causality table sums model importance over level-related features.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import autodiff as ad
from .data import LEVELS, MAX_STEPS, Dataset, flat_feature_names
from .models import Checkpoint
from .nn import LSTMClassifier
from .qicvn import QICVNClassifier

REPORT_SCHEMA = 1
ROW_TOL = 1e-9
COLUMN_TOL = 1e-6


class ExplainError(ValueError):
    pass


@dataclass
class ImportanceReport:
    feature_names: list[str]
    rows: np.ndarray  # [N, I] per-sample importance
    model_kind: str
    task: str
    sample_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2 or self.rows.shape[1] != len(self.feature_names):
            raise ExplainError(f"importance rows {self.rows.shape} do not match {len(self.feature_names)} features")
        if self.rows.size:
            err = np.abs(self.rows.sum(axis=1) - 1.0).max()
            if err > ROW_TOL or self.rows.min() < 0.0:
                raise ExplainError(f"importance rows are not probability vectors (sum error {err:.3g})")

    @property
    def mean(self) -> np.ndarray:
        return self.rows.mean(axis=0)

    def group_mean(self, names) -> float:
        """Mean per-feature importance over a group of features."""
        idx = [self.feature_names.index(n) for n in names]
        return float(self.mean[idx].mean())

    def to_json(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA, "type": "importance", "model_kind": self.model_kind,
            "task": self.task, "feature_names": list(self.feature_names), "mean": self.mean.tolist(),
            "rows": self.rows.tolist(), "sample_ids": list(self.sample_ids),
        }

    @classmethod
    def from_json(cls, obj: dict) -> ImportanceReport:
        return cls(obj["feature_names"], np.asarray(obj["rows"], dtype=np.float64).reshape(-1, len(obj["feature_names"])),
                   obj["model_kind"], obj["task"], obj.get("sample_ids", []))


@dataclass
class TransitionTable:
    """entries[a-1][L-1] = P(history level a | label level L); None where L is absent."""

    entries: list[list[float | None]]
    kind: str  # correlation | causality
    counts: list[int] = field(default_factory=lambda: [0, 0, 0])

    def __post_init__(self):
        for L in range(3):
            col = [self.entries[a][L] for a in range(3)]
            if all(v is None for v in col):
                continue
            if any(v is None for v in col):
                raise ExplainError(f"column L={L + 1} is partially undefined")
            if abs(sum(col) - 1.0) > COLUMN_TOL or min(col) < 0.0:
                raise ExplainError(f"column L={L + 1} is not a probability vector: {col}")

    def column(self, L: int) -> list[float | None]:
        return [self.entries[a][L - 1] for a in range(3)]

    def to_json(self) -> dict:
        return {"schema_version": REPORT_SCHEMA, "type": "transition", "kind": self.kind,
                "entries": self.entries, "counts": list(self.counts)}

    @classmethod
    def from_json(cls, obj: dict) -> TransitionTable:
        return cls([list(r) for r in obj["entries"]], obj["kind"], list(obj.get("counts", [0, 0, 0])))


# --------------------------------------------------------------------------
# importance
# --------------------------------------------------------------------------


def attention_importance(ckpt: Checkpoint, ds: Dataset, batch_size: int = 256) -> ImportanceReport:
    """Per-sample attention distribution over the flat feature positions."""
    model = ckpt.model
    if not isinstance(model, LSTMClassifier) or model.attn is None:
        raise ExplainError(f"attention_importance needs an attention model, got {ckpt.kind!r}")
    if model.layout != "flat":
        raise ExplainError("attention_importance needs the flat layout (one attention position per feature)")
    X = ckpt.prepare(ds)
    rows = []
    with ad.no_grad():
        for start in range(0, len(X), batch_size):
            _, w = model.forward(X[start:start + batch_size], return_attention=True)
            rows.append(w.data.reshape(w.shape[0], -1))
    names = flat_feature_names()
    rows = np.concatenate(rows) if rows else np.zeros((0, len(names)))
    return ImportanceReport(names, rows, ckpt.kind, ckpt.task, [s.person_id for s in ds.samples])


def qicvn_importance(ckpt: Checkpoint, ds: Dataset, batch_size: int = 256) -> ImportanceReport:
    """Per-sample softmax of amplitude norms from a single all-features window."""
    model = ckpt.model
    if not isinstance(model, QICVNClassifier):
        raise ExplainError(f"qicvn_importance needs a qicvn checkpoint, got {ckpt.kind!r}")
    if len(model.window.windows(model.num_features)) != 1:
        raise ExplainError(f"qicvn_importance needs the all-features window, got {model.window.to_json()}")
    X = ckpt.prepare(ds)
    rows = []
    with ad.no_grad():
        for start in range(0, len(X), batch_size):
            _, diag = model.forward_with_diagnostics(X[start:start + batch_size])
            rows.append(diag.feature_weights[0].data)
    names = flat_feature_names()
    rows = np.concatenate(rows) if rows else np.zeros((0, len(names)))
    return ImportanceReport(names, rows, ckpt.kind, ckpt.task, [s.person_id for s in ds.samples])


def importance(ckpt: Checkpoint, ds: Dataset) -> ImportanceReport:
    return qicvn_importance(ckpt, ds) if ckpt.kind == "qicvn" else attention_importance(ckpt, ds)


# --------------------------------------------------------------------------
# transition tables
# --------------------------------------------------------------------------


def correlation_table(test: Dataset) -> TransitionTable:
    """Relative frequency of the most severe history level given the label level."""
    counts = np.zeros((3, 3), dtype=np.int64)
    for s in test.samples:
        if s.final_level in LEVELS and s.history_levels:
            counts[min(s.history_levels) - 1, s.final_level - 1] += 1
    totals = counts.sum(axis=0)
    entries = [[None if totals[L] == 0 else counts[a, L] / totals[L] for L in range(3)] for a in range(3)]
    return TransitionTable([[None if v is None else float(v) for v in r] for r in entries], "correlation",
                           totals.tolist())


def default_level_feature_map() -> dict[str, int]:
    """Level-related features: per-step cumulative level counts and the static level counts."""
    out = {}
    for k in range(MAX_STEPS):
        for lvl in LEVELS:
            out[f"step{k + 1:02d}.cum_level{lvl}"] = lvl
    for lvl in LEVELS:
        out[f"count_level{lvl}"] = lvl
    return out


def level_shares(report: ImportanceReport, level_feature_map: dict[str, int]) -> np.ndarray:
    """Mean over samples of each level's share of level-related importance, shape [3]."""
    if not level_feature_map:
        raise ExplainError("level_feature_map is empty")
    unknown = sorted(set(level_feature_map) - set(report.feature_names))
    if unknown:
        raise ExplainError(f"level_feature_map names unknown features: {unknown[:3]}")
    if any(v not in LEVELS for v in level_feature_map.values()):
        raise ExplainError("level_feature_map values must be levels 1, 2 or 3")
    if not len(report.rows):
        raise ExplainError("no samples to average over")
    index = {n: i for i, n in enumerate(report.feature_names)}
    per_level = np.zeros((len(report.rows), 3))
    for name, lvl in level_feature_map.items():
        per_level[:, lvl - 1] += report.rows[:, index[name]]
    total = per_level.sum(axis=1, keepdims=True)
    return (per_level / total).mean(axis=0)


def causality_table(models_by_level: dict[int, Checkpoint], test: Dataset,
                    level_feature_map: dict[str, int] | None = None, source: str = "attention") -> TransitionTable:
    """Column L: level shares of the importance assigned by the model trained for task ``levelL``."""
    if source not in ("attention", "qicvn"):
        raise ExplainError(f"unknown importance source {source!r}")
    fmap = default_level_feature_map() if level_feature_map is None else level_feature_map
    if not fmap:
        raise ExplainError("level_feature_map is empty")
    entries = [[None] * 3 for _ in range(3)]
    counts = [0, 0, 0]
    for L, ckpt in sorted(models_by_level.items()):
        if L not in LEVELS:
            raise ExplainError(f"label level must be 1, 2 or 3, got {L!r}")
        if ckpt.task != f"level{L}":
            raise ExplainError(f"checkpoint for L={L} was trained for task {ckpt.task!r}")
        rep = attention_importance(ckpt, test) if source == "attention" else qicvn_importance(ckpt, test)
        shares = level_shares(rep, fmap)
        for a in range(3):
            entries[a][L - 1] = float(shares[a])
        counts[L - 1] = len(rep.rows)
    return TransitionTable(entries, "causality", counts)


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------


def _svg_importance(report: ImportanceReport) -> str:
    mean = report.mean
    n = len(mean)
    bar_w, height, pad = 4, 200, 30
    width = 2 * pad + bar_w * n
    top = float(mean.max()) if n and mean.max() > 0 else 1.0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height + 2 * pad}">',
        f'<title>{escape(f"mean importance: {report.model_kind} {report.task}")}</title>',
    ]
    for i, (name, v) in enumerate(zip(report.feature_names, mean)):
        h = height * float(v) / top
        parts.append(
            f'<rect class="bar" x="{pad + i * bar_w}" y="{pad + height - h:.4f}" width="{bar_w - 1}" '
            f'height="{h:.4f}" fill="#3b6ea8"><title>{escape(name)}: {float(v)!r}</title></rect>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _svg_transition(table: TransitionTable) -> str:
    cell, pad = 60, 40
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{2 * pad + 3 * cell}" height="{2 * pad + 3 * cell}">',
             f"<title>{escape(table.kind)} transitions</title>"]
    for a in range(3):
        for L in range(3):
            v = table.entries[a][L]
            shade = "#dddddd" if v is None else f"rgb(255,{int(255 * (1 - v))},{int(255 * (1 - v))})"
            label = "null" if v is None else f"{v:.2f}"
            x, y = pad + L * cell, pad + a * cell
            parts.append(f'<rect class="cell" x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{shade}">'
                         f"<title>P(level {a + 1}|L={L + 1}) = {label}</title></rect>")
            parts.append(f'<text x="{x + cell / 2}" y="{y + cell / 2}" text-anchor="middle">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(report: ImportanceReport | TransitionTable, fmt: str, path) -> None:
    if fmt not in ("json", "csv", "svg"):
        raise ExplainError(f"unknown report format {fmt!r}")
    path = Path(path)
    try:
        if fmt == "json":
            path.write_text(json.dumps(report.to_json(), sort_keys=True) + "\n")
        elif fmt == "svg":
            text = _svg_importance(report) if isinstance(report, ImportanceReport) else _svg_transition(report)
            path.write_text(text)
        else:
            with path.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                if isinstance(report, ImportanceReport):
                    w.writerow(["feature", "mean_importance"])
                    for name, v in zip(report.feature_names, report.mean):
                        w.writerow([name, repr(float(v))])
                else:
                    w.writerow(["history_level", "L1", "L2", "L3"])
                    for a in range(3):
                        w.writerow([f"P(level {a + 1}|L)"] + ["" if v is None else repr(v) for v in report.entries[a]])
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc}") from exc
