"""Measurement and reporting: Pass@1 evaluation under autonomous and forced
modalities, exploration-collapse histograms over training logs, the
selection-accuracy report with its union bound, training-efficiency curves,
and round-count distributions. Emits CSV plus dependency-free SVG charts
with the data table embedded for audit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .core import C_CODE, C_REASON, GUIDANCE_FORCED, Query, SchemaError, Trajectory
from .policy import PolicyParams

log = logging.getLogger(__name__)

ARMS = ("auto", "cot", "code")


@dataclass(frozen=True)
class ArmOutcomes:
    auto: tuple[int, ...]
    cot: tuple[int, ...]
    code: tuple[int, ...]
    auto_c: tuple[int, ...]


@dataclass(frozen=True)
class EvalResult:
    entries: Mapping[str, ArmOutcomes]
    n: int
    sampling: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        for qid, e in self.entries.items():
            for outcomes in (e.auto, e.cot, e.code):
                if len(outcomes) != self.n:
                    raise SchemaError(f"query {qid!r}: expected {self.n} samples per arm")
            if len(e.auto_c) != self.n:
                raise SchemaError(f"query {qid!r}: auto decisions missing")


def evaluate_arms(
    policy: PolicyParams,
    backend,
    queries: Sequence[Query],
    n: int,
    rng: np.random.Generator,
    policy_tag: str = "eval",
) -> EvalResult:
    """n samples per query under each of auto / forced-cot / forced-code."""
    entries: dict[str, ArmOutcomes] = {}
    for query in sorted(queries, key=lambda q: q.id):
        auto = backend.rollout_batch(query.id, 0, GUIDANCE_FORCED, policy, n, rng, policy_tag, sample_c=True)
        cot = backend.rollout_batch(query.id, C_REASON, GUIDANCE_FORCED, policy, n, rng, policy_tag)
        code_arm = backend.rollout_batch(query.id, C_CODE, GUIDANCE_FORCED, policy, n, rng, policy_tag)
        entries[query.id] = ArmOutcomes(
            auto=tuple(t.reward for t in auto),
            cot=tuple(t.reward for t in cot),
            code=tuple(t.reward for t in code_arm),
            auto_c=tuple(t.decision.c for t in auto),
        )
    return EvalResult(entries=entries, n=n)


def pass_at_1(results: EvalResult, n: int | None = None) -> dict[str, float]:
    """Mean over queries of per-query mean correctness, per arm."""
    if n is not None and n != results.n:
        raise ValueError(f"expected {n} samples per query, result has {results.n}")
    accs = {}
    for arm in ARMS:
        per_query = [float(np.mean(getattr(e, arm))) for e in results.entries.values()]
        accs[arm] = float(np.mean(per_query)) if per_query else 0.0
    return accs


# ---------------------------------------------------------------------------
# Exploration collapse (invocation-rate histograms over training phases)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhaseBuckets:
    rates: tuple[Mapping[str, float], ...]     # per phase: query_id -> invocation rate
    histograms: tuple[tuple[int, ...], ...]    # per phase: 10-bin counts over [0,1]
    extremity: tuple[float, ...]               # per phase: mass at rate <= low or >= high
    bin_edges: tuple[float, ...]
    thresholds: tuple[float, float]


def invocation_histogram(
    trajectories: Iterable[Trajectory],
    n_phases: int = 3,
    bins: int = 10,
    low: float = 0.1,
    high: float = 0.9,
) -> PhaseBuckets:
    """Split logged rollouts into contiguous training phases by policy_tag
    order and histogram per-query code-invocation rates per phase.

    The extremity index is the fraction of (phase, query) rates at or beyond
    the given thresholds; its growth across phases is the collapse signature.
    """
    trajs = list(trajectories)
    if not trajs:
        raise ValueError("no trajectories to analyze")
    tags = sorted({t.policy_tag for t in trajs})
    if len(tags) < n_phases:
        raise ValueError(f"need at least {n_phases} distinguishable phases, got {len(tags)} policy tags")
    counts_by_tag = {tag: 0 for tag in tags}
    for t in trajs:
        counts_by_tag[t.policy_tag] += 1
    total = len(trajs)
    phase_of_tag: dict[str, int] = {}
    cum = 0
    for tag in tags:
        phase_of_tag[tag] = min(n_phases - 1, int(n_phases * cum / total))
        cum += counts_by_tag[tag]
    # lumpy tag sizes can leave late phases empty; force the last tags onto
    # missing phases so the phases always partition the log
    if len(set(phase_of_tag.values())) < n_phases:
        for offset in range(1, n_phases + 1):
            idx = len(tags) - offset
            if idx < 0:
                break
            phase_of_tag[tags[idx]] = max(phase_of_tag[tags[idx]], n_phases - offset)

    agg: list[dict[str, list[int]]] = [dict() for _ in range(n_phases)]
    for t in trajs:
        agg[phase_of_tag[t.policy_tag]].setdefault(t.query_id, []).append(t.decision.c)
    rates = []
    hists = []
    extremity = []
    edges = np.linspace(0.0, 1.0, bins + 1)
    for phase in range(n_phases):
        phase_rates = {qid: float(np.mean(cs)) for qid, cs in sorted(agg[phase].items())}
        values = np.array(list(phase_rates.values())) if phase_rates else np.zeros(0)
        hist, _ = np.histogram(values, bins=edges)
        ext = float(np.mean((values <= low) | (values >= high))) if values.size else 0.0
        rates.append(phase_rates)
        hists.append(tuple(int(h) for h in hist))
        extremity.append(ext)
    return PhaseBuckets(
        rates=tuple(rates),
        histograms=tuple(hists),
        extremity=tuple(extremity),
        bin_edges=tuple(float(e) for e in edges),
        thresholds=(low, high),
    )


# ---------------------------------------------------------------------------
# Selection accuracy and the union bound
# ---------------------------------------------------------------------------

def selection_report(ev: EvalResult) -> dict[str, float]:
    """Accuracy of the autonomous modality choice against forced prompting.

    union_bound counts a query solved if either forced arm solved it at
    least once. A query is decisive when exactly one forced arm solved it;
    selection accuracy averages, over decisive queries, the fraction of auto
    samples whose trigger decision matches the solving arm. Non-decisive
    queries are excluded and reported via decisive_count.
    """
    per_arm = pass_at_1(ev)
    union_hits = 0
    decisive_scores = []
    for e in ev.entries.values():
        cot_solved = any(e.cot)
        code_solved = any(e.code)
        if cot_solved or code_solved:
            union_hits += 1
        if cot_solved != code_solved:
            winning = C_CODE if code_solved else C_REASON
            decisive_scores.append(float(np.mean([c == winning for c in e.auto_c])))
    n_q = len(ev.entries)
    return {
        "auto_acc": per_arm["auto"],
        "cot_acc": per_arm["cot"],
        "code_acc": per_arm["code"],
        "union_bound": union_hits / n_q if n_q else 0.0,
        "selection_accuracy": float(np.mean(decisive_scores)) if decisive_scores else float("nan"),
        "decisive_count": float(len(decisive_scores)),
    }


def round_distribution(trajectories: Iterable[Trajectory]) -> dict[int, int]:
    """Histogram of code-execution round counts."""
    counts: dict[int, int] = {}
    for t in trajectories:
        counts[t.rounds] = counts.get(t.rounds, 0) + 1
    return dict(sorted(counts.items()))


# ---------------------------------------------------------------------------
# CSV + SVG emission
# ---------------------------------------------------------------------------

def write_csv(rows: Sequence[Mapping[str, Any]], columns: Sequence[str], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            cells = []
            for col in columns:
                v = row.get(col)
                if v is None:
                    cells.append("")
                elif isinstance(v, float):
                    cells.append(repr(float(v)))
                else:
                    cells.append(str(v))
            fh.write(",".join(cells) + "\n")


def write_selection_report_csv(report: Mapping[str, float], path: str | Path) -> None:
    cols = ("auto_acc", "cot_acc", "code_acc", "union_bound", "selection_accuracy", "decisive_count")
    write_csv([dict(report)], cols, path)


def write_invocation_hist_csv(buckets: PhaseBuckets, path: str | Path) -> None:
    rows = []
    for phase, hist in enumerate(buckets.histograms):
        for b, count in enumerate(hist):
            rows.append(
                {
                    "phase": phase,
                    "bin_low": buckets.bin_edges[b],
                    "bin_high": buckets.bin_edges[b + 1],
                    "count": count,
                    "extremity_index": buckets.extremity[phase],
                }
            )
    write_csv(rows, ("phase", "bin_low", "bin_high", "count", "extremity_index"), path)


@dataclass(frozen=True)
class Trace:
    method: str
    seed: int
    rows: tuple[Mapping[str, Any], ...]


def _trace_points(trace: Trace) -> list[tuple[float, float]]:
    pts = []
    for row in trace.rows:
        if row.get("pass1_dev") is None or row.get("phase") == "e-step":
            continue
        pts.append((float(row.get("interactions", 0)), float(row["pass1_dev"])))
    return pts


def efficiency_curves(
    traces: Sequence[Trace],
    out_csv: str | Path,
    out_svg: str | Path,
    title: str = "dev accuracy vs environment interactions",
) -> list[dict[str, Any]]:
    """Pass@1-versus-interactions curves per (method, seed), with per-method
    asymptote markers; returns the flat rows written to CSV."""
    if not traces:
        raise ValueError("no traces given")
    needed = {"pass1_dev", "interactions", "phase"}
    for tr in traces:
        for row in tr.rows:
            if not needed.issubset(row.keys()):
                raise SchemaError(f"trace {tr.method}/{tr.seed} missing columns {needed - set(row)}")
    rows = []
    series = []
    palette = {"em": "#1f77b4", "onpolicy_rl": "#d62728", "imitation": "#2ca02c", "base_rl": "#9467bd"}
    finals: dict[str, list[float]] = {}
    for tr in traces:
        pts = _trace_points(tr)
        for x, y in pts:
            rows.append({"method": tr.method, "seed": tr.seed, "interactions": x, "pass1": y})
        if pts:
            finals.setdefault(tr.method, []).append(pts[-1][1])
            series.append(
                Series(
                    label=f"{tr.method}/s{tr.seed}",
                    color=palette.get(tr.method, "#555555"),
                    points=tuple(pts),
                )
            )
    for method, vals in sorted(finals.items()):
        xmax = max((r["interactions"] for r in rows), default=1.0)
        series.append(
            Series(
                label=f"{method} asymptote",
                color=palette.get(method, "#555555"),
                points=((0.0, float(np.mean(vals))), (xmax, float(np.mean(vals)))),
                dashed=True,
            )
        )
    write_csv(rows, ("method", "seed", "interactions", "pass1"), out_csv)
    svg_line_chart(series, out_svg, title, "interactions", "pass@1 (dev)")
    return rows


@dataclass(frozen=True)
class Series:
    label: str
    color: str
    points: tuple[tuple[float, float], ...]
    dashed: bool = False


def svg_line_chart(
    series: Sequence[Series],
    path: str | Path,
    title: str,
    x_label: str,
    y_label: str,
    width: int = 860,
    height: int = 480,
) -> None:
    """Self-contained SVG line chart; the plotted data rides along in a
    <metadata> block so the chart is auditable without re-running."""
    margin = 60
    xs = [p[0] for s in series for p in s.points]
    ys = [p[1] for s in series for p in s.points]
    if not xs:
        xs, ys = [0.0, 1.0], [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def sx(x: float) -> float:
        return margin + (x - x0) / (x1 - x0) * (width - 2 * margin)

    def sy(y: float) -> float:
        return height - margin - (y - y0) / (y1 - y0) * (height - 2 * margin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        "<metadata>",
        "series,label,x,y",
    ]
    for i, s in enumerate(series):
        for x, y in s.points:
            parts.append(f"{i},{s.label},{x!r},{y!r}")
    parts.append("</metadata>")
    parts.append(f'<rect width="{width}" height="{height}" fill="white"/>')
    parts.append(
        f'<text x="{width / 2}" y="24" text-anchor="middle" font-size="16" font-family="sans-serif">{_esc(title)}</text>'
    )
    ax = f'stroke="#222" stroke-width="1"'
    parts.append(f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" {ax}/>')
    parts.append(f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" {ax}/>')
    for i in range(5):
        fx = x0 + i * (x1 - x0) / 4
        fy = y0 + i * (y1 - y0) / 4
        parts.append(
            f'<text x="{sx(fx):.1f}" y="{height - margin + 18}" text-anchor="middle" font-size="11" font-family="sans-serif">{fx:.3g}</text>'
        )
        parts.append(
            f'<text x="{margin - 8}" y="{sy(fy):.1f}" text-anchor="end" font-size="11" font-family="sans-serif">{fy:.3g}</text>'
        )
        parts.append(
            f'<line x1="{margin}" y1="{sy(fy):.1f}" x2="{width - margin}" y2="{sy(fy):.1f}" stroke="#eee" stroke-width="1"/>'
        )
    parts.append(
        f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle" font-size="12" font-family="sans-serif">{_esc(x_label)}</text>'
    )
    parts.append(
        f'<text x="16" y="{height / 2}" transform="rotate(-90 16 {height / 2})" text-anchor="middle" font-size="12" font-family="sans-serif">{_esc(y_label)}</text>'
    )
    seen_labels = set()
    legend_y = margin
    for s in series:
        if len(s.points) < 2:
            continue
        pts = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in s.points)
        dash = ' stroke-dasharray="6,4"' if s.dashed else ""
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{s.color}" stroke-width="1.4" opacity="0.85"{dash}/>')
        base = s.label.split("/")[0]
        if base not in seen_labels and not s.dashed:
            seen_labels.add(base)
            parts.append(
                f'<line x1="{width - margin - 150}" y1="{legend_y}" x2="{width - margin - 120}" y2="{legend_y}" stroke="{s.color}" stroke-width="2"/>'
            )
            parts.append(
                f'<text x="{width - margin - 112}" y="{legend_y + 4}" font-size="12" font-family="sans-serif">{_esc(base)}</text>'
            )
            legend_y += 18
    parts.append("</svg>")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(parts), encoding="utf-8")


def svg_phase_histogram(buckets: PhaseBuckets, path: str | Path, title: str = "code-invocation rates by phase") -> None:
    """Bar chart of per-phase invocation-rate histograms (one row per phase)."""
    width, row_h, margin = 860, 130, 50
    n_phases = len(buckets.histograms)
    height = margin * 2 + row_h * n_phases
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        "<metadata>",
        "phase,bin_low,bin_high,count,extremity_index",
    ]
    for phase, hist in enumerate(buckets.histograms):
        for b, count in enumerate(hist):
            parts.append(
                f"{phase},{buckets.bin_edges[b]!r},{buckets.bin_edges[b + 1]!r},{count},{buckets.extremity[phase]!r}"
            )
    parts.append("</metadata>")
    parts.append(f'<rect width="{width}" height="{height}" fill="white"/>')
    parts.append(
        f'<text x="{width / 2}" y="24" text-anchor="middle" font-size="16" font-family="sans-serif">{_esc(title)}</text>'
    )
    for phase, hist in enumerate(buckets.histograms):
        top = margin + phase * row_h
        maxc = max(max(hist), 1)
        bin_w = (width - 2 * margin) / len(hist)
        for b, count in enumerate(hist):
            h = (row_h - 40) * count / maxc
            x = margin + b * bin_w
            parts.append(
                f'<rect x="{x:.1f}" y="{top + (row_h - 40) - h:.1f}" width="{bin_w - 2:.1f}" height="{h:.1f}" fill="#1f77b4" opacity="0.8"/>'
            )
        parts.append(
            f'<text x="{margin}" y="{top + row_h - 20}" font-size="12" font-family="sans-serif">'
            f"phase {phase} (extremity {buckets.extremity[phase]:.3f})</text>"
        )
    parts.append("</svg>")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(parts), encoding="utf-8")


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
