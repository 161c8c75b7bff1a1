"""Metric records, CSV round-trips, text tables, SVG learning curves and rankings."""

from __future__ import annotations

import csv
import io
import math
import re
from collections import defaultdict
from dataclasses import astuple, dataclass, fields
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

METRICS = ("rouge_l", "meteor", "embed_score", "entity_f1")
METRIC_TITLES = {"rouge_l": "ROUGE-L", "meteor": "METEOR", "embed_score": "Embed score", "entity_f1": "Entity F1"}
RECORD_HEADER = ("strategy", "preset", "k", "seed", *METRICS)

# Depth in the adaptation hierarchy; also the tie-break order (deeper first).
STRATEGY_DEPTH = {"general-only": 1, "+clinical-pretrain": 2, "+midtrain": 3}
STRATEGY_COLORS = {"general-only": "#7f7f7f", "+clinical-pretrain": "#1f77b4", "+midtrain": "#d62728"}


class ReportError(ValueError):
    pass


@dataclass(frozen=True)
class MetricRecord:
    strategy: str
    preset: str
    k: str  # a few-shot size, or "full"
    seed: int
    rouge_l: float
    meteor: float
    embed_score: float
    entity_f1: float

    def __post_init__(self) -> None:
        if self.k != "full" and not (self.k.isdigit() and int(self.k) > 0):
            raise ReportError(f"k must be a positive integer or 'full', got {self.k!r}")
        for name in ("rouge_l", "meteor", "entity_f1"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ReportError(f"{name}={getattr(self, name)} outside [0, 1]")
        if not -1.0 <= self.embed_score <= 1.0:
            raise ReportError(f"embed_score={self.embed_score} outside [-1, 1]")

    @property
    def k_value(self) -> float:
        return math.inf if self.k == "full" else float(self.k)

    def metric(self, name: str) -> float:
        return getattr(self, name)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def records_to_csv(records: Iterable[MetricRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_HEADER)
    for r in records:
        w.writerow([r.strategy, r.preset, r.k, r.seed, *(_fmt(r.metric(m)) for m in METRICS)])
    return buf.getvalue()


def records_from_csv(text: str) -> list[MetricRecord]:
    rows = csv.DictReader(line for line in io.StringIO(text) if not line.startswith("#"))
    missing = set(RECORD_HEADER) - set(rows.fieldnames or ())
    if missing:
        raise ReportError(f"records CSV lacks columns {sorted(missing)}")
    return [
        MetricRecord(
            strategy=row["strategy"],
            preset=row["preset"],
            k=row["k"],
            seed=int(row["seed"]),
            **{m: float(row[m]) for m in METRICS},
        )
        for row in rows
    ]


def save_records(records: Iterable[MetricRecord], path: str | Path) -> None:
    Path(path).write_text(records_to_csv(records), encoding="utf-8")


def load_records(path: str | Path) -> list[MetricRecord]:
    return records_from_csv(Path(path).read_text(encoding="utf-8"))


def sort_key(r: MetricRecord):
    return (size_key(r.preset), STRATEGY_DEPTH.get(r.strategy, 99), r.strategy, r.k_value, r.seed)


def size_key(preset: str) -> float:
    """Parameter scale from a preset label like ``0.2B`` or ``770m``; unknown labels sort first."""
    m = re.fullmatch(r"\s*([\d.]+)\s*([kmb])\s*", preset.lower())
    if not m:
        return 0.0
    return float(m.group(1)) * {"k": 1e3, "m": 1e6, "b": 1e9}[m.group(2)]


# ---------------------------------------------------------------------------
# Published fixtures
# ---------------------------------------------------------------------------


def _data_text(name: str) -> str:
    return resources.files("radlab.data").joinpath(name).read_text(encoding="utf-8")


def load_published_strategies() -> tuple[list[MetricRecord], dict[MetricRecord, str]]:
    """Published strategy comparison as records, plus each row's model name."""
    text = _data_text("published_strategies.csv")
    rows = list(csv.DictReader(line for line in io.StringIO(text) if not line.startswith("#")))
    records = records_from_csv(text)
    return records, {rec: row["model"] for rec, row in zip(records, rows)}


def load_published_fewshot() -> list[dict]:
    text = _data_text("published_fewshot.csv")
    out = []
    for row in csv.DictReader(line for line in io.StringIO(text) if not line.startswith("#")):
        out.append({"kind": row["kind"], "preset": row["preset"], "strategy": row["strategy"],
                    "k": int(row["k"]), "rouge_l": float(row["rouge_l"])})
    return out


# ---------------------------------------------------------------------------
# Aggregation and ranking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    strategy: str
    preset: str
    k: str
    mean: dict[str, float]
    low: dict[str, float]
    high: dict[str, float]
    n: int


def aggregate(records: Sequence[MetricRecord]) -> list[Cell]:
    """Seed mean, min and max per (strategy, preset, k), in table order."""
    groups: dict[tuple[str, str, str], list[MetricRecord]] = defaultdict(list)
    for r in sorted(records, key=sort_key):
        groups[(r.strategy, r.preset, r.k)].append(r)
    cells = []
    for (strategy, preset, k), rs in groups.items():
        cells.append(
            Cell(
                strategy,
                preset,
                k,
                {m: sum(r.metric(m) for r in rs) / len(rs) for m in METRICS},
                {m: min(r.metric(m) for r in rs) for m in METRICS},
                {m: max(r.metric(m) for r in rs) for m in METRICS},
                len(rs),
            )
        )
    return cells


@dataclass(frozen=True)
class Ranking:
    preset: str
    k: str
    metric: str
    order: tuple[tuple[str, float], ...]  # best first
    tie: bool


def compare_strategies(records: Sequence[MetricRecord]) -> list[Ranking]:
    """Rank strategies by seed-mean score for every (preset, k) shared by two or more.

    Equal means are ordered deeper-hierarchy first and flagged as a tie.
    """
    by_group: dict[tuple[str, str], list[Cell]] = defaultdict(list)
    for cell in aggregate(records):
        by_group[(cell.preset, cell.k)].append(cell)
    out = []
    for (preset, k), cells in sorted(by_group.items(), key=lambda kv: (size_key(kv[0][0]), kv[0][0], _k_sort(kv[0][1]))):
        if len(cells) < 2:
            continue
        for metric in METRICS:
            ranked = sorted(cells, key=lambda c: (-c.mean[metric], -STRATEGY_DEPTH.get(c.strategy, 0), c.strategy))
            means = [c.mean[metric] for c in ranked]
            tie = any(a == b for a, b in zip(means, means[1:]))
            out.append(Ranking(preset, k, metric, tuple((c.strategy, c.mean[metric]) for c in ranked), tie))
    if not out:
        raise ReportError("no (preset, k) group has two or more strategies to compare")
    return out


def _k_sort(k: str) -> float:
    return math.inf if k == "full" else float(k)


def format_rankings(rankings: Sequence[Ranking]) -> str:
    lines = []
    for r in rankings:
        order = " > ".join(f"{s} ({v:.4f})" for s, v in r.order)
        flag = "  [tie]" if r.tie else ""
        lines.append(f"{r.preset:>6} k={r.k:<5} {METRIC_TITLES[r.metric]:<12} {order}{flag}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Text table
# ---------------------------------------------------------------------------


def render_table(records: Sequence[MetricRecord], names: dict[MetricRecord, str] | None = None) -> str:
    """Aligned text table of seed means; the best value per preset and metric is wrapped in ``**``."""
    if not records:
        raise ReportError("nothing to render: no records")
    cells = aggregate(records)
    best: dict[tuple[str, str, str], float] = {}
    for c in cells:
        for m in METRICS:
            key = (c.preset, c.k, m)
            best[key] = max(best.get(key, -math.inf), c.mean[m])
    label = {}
    if names:
        for rec, name in names.items():
            label[(rec.strategy, rec.preset, rec.k)] = name
    header = ["model", "preset", "strategy", "k", "seeds", *(METRIC_TITLES[m] for m in METRICS)]
    rows = []
    for c in cells:
        vals = []
        for m in METRICS:
            v = f"{c.mean[m]:.4f}"
            vals.append(f"**{v}**" if c.mean[m] == best[(c.preset, c.k, m)] else v)
        rows.append([label.get((c.strategy, c.preset, c.k), "-"), c.preset, c.strategy, c.k, str(c.n), *vals])
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
    fmt = lambda cols: "  ".join(col.ljust(w) for col, w in zip(cols, widths)).rstrip()
    lines = [fmt(header), fmt(["-" * w for w in widths])]
    lines += [fmt(r) for r in rows]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# SVG curves
# ---------------------------------------------------------------------------

_W, _H = 640, 420
_LEFT, _RIGHT, _TOP, _BOTTOM = 60, 170, 30, 50


def render_curves(records: Sequence[MetricRecord], metric: str, overlay: Sequence[dict] | None = None) -> str:
    """One SVG: seed-mean score against k (log axis) per strategy, with a min/max band."""
    if metric not in METRICS:
        raise ReportError(f"unknown metric {metric!r}")
    cells = [c for c in aggregate(records) if c.k != "full"]
    if not cells:
        raise ReportError("curves need few-shot records with numeric k")
    ks = sorted({float(c.k) for c in cells} | {float(o["k"]) for o in overlay or ()})
    lo_k, hi_k = math.log10(ks[0]), math.log10(ks[-1])
    span = hi_k - lo_k or 1.0
    lo_y = min(0.0, *(c.low[metric] for c in cells))
    hi_y = max(1.0, *(c.high[metric] for c in cells))
    plot_w, plot_h = _W - _LEFT - _RIGHT, _H - _TOP - _BOTTOM

    def x(k: float) -> float:
        return _LEFT + (math.log10(k) - lo_k) / span * plot_w

    def y(v: float) -> float:
        return _TOP + (hi_y - v) / (hi_y - lo_y) * plot_h

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        f'<title>{METRIC_TITLES[metric]} vs few-shot size</title>',
        f'<rect x="{_LEFT}" y="{_TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#333"/>',
    ]
    for k in ks:
        out.append(f'<text x="{x(k):.2f}" y="{_H - _BOTTOM + 18}" font-size="11" text-anchor="middle">{k:g}</text>')
    for i in range(6):
        v = lo_y + (hi_y - lo_y) * i / 5
        out.append(f'<text x="{_LEFT - 6}" y="{y(v) + 4:.2f}" font-size="11" text-anchor="end">{v:.1f}</text>')
    out.append(f'<text x="{_LEFT + plot_w / 2:.0f}" y="{_H - 10}" font-size="12" text-anchor="middle">k (log scale)</text>')

    series: dict[tuple[str, str], list[Cell]] = defaultdict(list)
    for c in cells:
        series[(c.preset, c.strategy)].append(c)
    legend_y = _TOP + 10
    for (preset, strategy), cs in series.items():
        cs.sort(key=lambda c: float(c.k))
        color = STRATEGY_COLORS.get(strategy, "#2ca02c")
        upper = [f"{x(float(c.k)):.2f},{y(c.high[metric]):.2f}" for c in cs]
        lower = [f"{x(float(c.k)):.2f},{y(c.low[metric]):.2f}" for c in reversed(cs)]
        out.append(f'<polygon class="band" points="{" ".join(upper + lower)}" fill="{color}" fill-opacity="0.15" stroke="none"/>')
        pts = " ".join(f"{x(float(c.k)):.2f},{y(c.mean[metric]):.2f}" for c in cs)
        name = f"{strategy} ({preset})"
        out.append(f'<polyline class="mean" data-series="{name}" points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{_W - _RIGHT + 10}" y="{legend_y}" font-size="11" fill="{color}">{name}</text>')
        legend_y += 16
    for o in overlay or ():
        if o.get("metric", "rouge_l") != metric:
            continue
        color = STRATEGY_COLORS.get(o["strategy"], "#2ca02c")
        out.append(
            f'<circle class="published" cx="{x(o["k"]):.2f}" cy="{y(o["rouge_l"]):.2f}" r="4" fill="none" stroke="{color}"/>'
        )
    if overlay:
        out.append(f'<text x="{_W - _RIGHT + 10}" y="{legend_y}" font-size="10">o published (not reproduced)</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def parse_polylines(svg: str) -> dict[str, list[tuple[float, float]]]:
    """Mean polylines of an SVG written by :func:`render_curves`, keyed by series."""
    lines = {}
    for m in re.finditer(r'<polyline class="mean" data-series="([^"]+)" points="([^"]+)"', svg):
        lines[m.group(1)] = [tuple(float(v) for v in pt.split(",")) for pt in m.group(2).split()]
    return lines


def render(records: Sequence[MetricRecord], mode: str, out_dir: str | Path, names=None, overlay=None) -> list[Path]:
    """Write the table (text + CSV) or one SVG per metric into ``out_dir``."""
    if not records:
        raise ReportError("nothing to render: no records")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if mode == "table":
        ordered = sorted(records, key=sort_key)
        (out_dir / "table.txt").write_text(render_table(ordered, names), encoding="utf-8")
        (out_dir / "table.csv").write_text(records_to_csv(ordered), encoding="utf-8")
        written += [out_dir / "table.txt", out_dir / "table.csv"]
    elif mode == "curves":
        for metric in METRICS:
            path = out_dir / f"curve_{metric}.svg"
            path.write_text(render_curves(records, metric, overlay), encoding="utf-8")
            written.append(path)
    else:
        raise ReportError(f"render mode must be table or curves, got {mode!r}")
    return written


def record_tuple(r: MetricRecord) -> tuple:
    return astuple(r)


RECORD_FIELDS = tuple(f.name for f in fields(MetricRecord))
