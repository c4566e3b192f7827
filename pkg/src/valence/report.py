"""Evaluation reports and the model x modality summary grid."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .data import COMBINATIONS, PARTITIONS, LoadError
from .metrics import MetricSummary, summarize

ROW_ORDER = ("svr", "hmm", "lstm", "vrnn", "human")
ROW_LABELS = {"svr": "SVR", "hmm": "HMM", "lstm": "LSTM", "vrnn": "VRNN", "human": "Human"}
MISSING = "--"
BEST_MARK = "*"


@dataclass(frozen=True)
class EvalReport:
    model: str
    modalities: str
    partition: str
    per_video: dict[str, float]
    fingerprint: str = ""
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def summary(self) -> MetricSummary:
        return summarize(self.per_video)

    def to_dict(self) -> dict:
        s = self.summary
        return {
            "model": self.model,
            "modalities": self.modalities,
            "partition": self.partition,
            "fingerprint": self.fingerprint,
            "seed": self.seed,
            "mean_ccc": s.mean,
            "sd_ccc": s.sd,
            "summary": s.format(),
            "n_videos": len(s.per_video),
            "per_video": s.per_video,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        try:
            return cls(
                str(d["model"]),
                str(d["modalities"]),
                str(d["partition"]),
                {str(k): float(v) for k, v in d["per_video"].items()},
                str(d.get("fingerprint", "")),
                d.get("seed"),
                dict(d.get("extra", {})),
            )
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise LoadError(f"malformed evaluation report: {exc}") from None


def write_report_json(path: str | Path, report: EvalReport) -> None:
    text = json.dumps(report.to_dict(), sort_keys=True, indent=1)
    Path(path).write_text(text + "\n", encoding="utf-8")


def write_report_csv(path: str | Path, report: EvalReport) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "ccc"])
        for vid, v in sorted(report.per_video.items()):
            w.writerow([vid, repr(float(v))])


def read_report(path: str | Path) -> EvalReport:
    p = Path(path)
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except OSError as exc:
        raise LoadError(f"{p}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise LoadError(f"{p}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    return EvalReport.from_dict(data)


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------


@dataclass
class Grid:
    partition: str
    rows: list[str]
    cells: dict[tuple[str, str], MetricSummary]

    def best(self, row: str) -> str | None:
        filled = [c for c in COMBINATIONS if (row, c) in self.cells]
        if len(filled) < 2:
            return None
        # first column wins a tie, in the fixed column order
        return max(filled, key=lambda c: (self.cells[(row, c)].mean, -COMBINATIONS.index(c)))

    def text_cells(self, row: str) -> list[str]:
        best = self.best(row)
        out = []
        for c in COMBINATIONS:
            s = self.cells.get((row, c))
            if s is None:
                out.append(MISSING)
            else:
                out.append(s.format() + (BEST_MARK if c == best else ""))
        return out


def _row_key(model: str) -> tuple[int, str]:
    m = model.lower()
    return (ROW_ORDER.index(m), m) if m in ROW_ORDER else (len(ROW_ORDER), m)


def build_grids(reports: Iterable[EvalReport]) -> list[Grid]:
    """One grid per partition; a later report for the same cell replaces an earlier one."""
    by_part: dict[str, dict[tuple[str, str], MetricSummary]] = {}
    for r in reports:
        if r.modalities not in COMBINATIONS:
            raise LoadError(f"report for {r.model} has unknown modality combination {r.modalities!r}")
        by_part.setdefault(r.partition, {})[(r.model.lower(), r.modalities)] = r.summary
    order = sorted(by_part, key=lambda p: (PARTITIONS.index(p) if p in PARTITIONS else len(PARTITIONS), p))
    grids = []
    for p in order:
        cells = by_part[p]
        rows = sorted({m for m, _ in cells}, key=_row_key)
        grids.append(Grid(p, rows, cells))
    return grids


def render_text(grids: Sequence[Grid]) -> str:
    blocks = []
    for g in grids:
        table = [[g.partition, *COMBINATIONS]]
        for row in g.rows:
            table.append([ROW_LABELS.get(row, row), *g.text_cells(row)])
        widths = [max(len(r[i]) for r in table) for i in range(len(table[0]))]
        lines = []
        for r in table:
            head = r[0].ljust(widths[0])
            rest = [cell.ljust(w) for cell, w in zip(r[1:], widths[1:])]
            lines.append("  ".join([head, *rest]).rstrip())
        blocks.append("\n".join(lines))
    legend = f"cells: mean (sd) of per-video CCC; {BEST_MARK} marks the best modality combination per row"
    return "\n\n".join(blocks) + "\n\n" + legend + "\n"


def write_grid_csv(path: str | Path, grids: Sequence[Grid]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["partition", "model", *COMBINATIONS])
        for g in grids:
            for row in g.rows:
                cells = [MISSING if (row, c) not in g.cells else g.cells[(row, c)].format() for c in COMBINATIONS]
                w.writerow([g.partition, ROW_LABELS.get(row, row), *cells])


def human_row(summary: MetricSummary, label: str = "Human") -> str:
    """The single-line human benchmark row: dashes except the all-modalities column."""
    return " ".join([label, *([MISSING] * (len(COMBINATIONS) - 1)), summary.format()])
