"""Stage-by-metric report tables and paired significance tests across manifests."""

from __future__ import annotations

import csv
import io
from fnmatch import fnmatchcase

from .errors import ReportError
from .evaluation.evaluate import CLASSIFICATION_METRICS, GENERATION_METRICS
from .evaluation.wilcoxon import PairedScores, wilcoxon_signed_rank

BEST_MARK = "*"
_METRIC_ORDER = {m: i for i, m in enumerate(GENERATION_METRICS + CLASSIFICATION_METRICS)}


def _columns(manifest) -> list[tuple[str, str]]:
    cols = set()
    for s in manifest.stages:
        for task, metrics in s.report.metrics.items():
            cols.update((task, m) for m in metrics)
    return sorted(cols, key=lambda c: (c[0], _METRIC_ORDER.get(c[1], len(_METRIC_ORDER)), c[1]))


def report_rows(manifests) -> tuple[list[tuple[str, str]], list[dict]]:
    """Columns ``(task, metric)`` and one row dict per (manifest, stage) with best cells flagged."""
    if not manifests:
        raise ReportError("at least one manifest is required")
    columns = None
    rows = []
    for m in manifests:
        cols = _columns(m)
        if columns is None:
            columns = cols
        elif cols != columns:
            raise ReportError(f"run {m.run_name!r} has a different metric set than {manifests[0].run_name!r}")
        group = []
        for s in m.stages:
            values = {}
            for task, metric in columns:
                try:
                    values[(task, metric)] = float(s.report.metrics[task][metric])
                except KeyError:
                    raise ReportError(f"run {m.run_name!r} stage {s.label}: missing {task}/{metric}") from None
            group.append({"run": m.run_name, "stage": s.label, "values": values, "best": set()})
        for col in columns:
            # strict '>' keeps the earliest stage on ties
            best = None
            for row in group:
                if best is None or row["values"][col] > best["values"][col]:
                    best = row
            if best is not None:
                best["best"].add(col)
        rows.extend(group)
    return columns, rows


def _cell(row, col, digits: int) -> str:
    text = f"{row['values'][col]:.{digits}f}"
    return text + BEST_MARK if col in row["best"] else text


def emit_report(manifests, fmt: str = "table", digits: int = 4) -> str:
    """Render one row per stage and one column per task metric; ``*`` marks the best value in each column per run."""
    if fmt not in ("csv", "table"):
        raise ReportError(f"unknown report format {fmt!r}")
    columns, rows = report_rows(manifests)
    header = ["run", "stage"] + [f"{t}/{m}" for t, m in columns]
    body = [[r["run"], r["stage"]] + [_cell(r, c, digits) for c in columns] for r in rows]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow(header)
        writer.writerows(body)
        return buf.getvalue()
    widths = [max(len(x[i]) for x in [header] + body) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for r in body:
        cells = [r[0].ljust(widths[0]), r[1].ljust(widths[1])]
        cells += [v.rjust(w) for v, w in zip(r[2:], widths[2:])]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"


def _matching(manifest, pattern: str) -> list:
    return sorted((s for s in manifest.stages if fnmatchcase(s.label, pattern)), key=lambda s: s.label)


def compare_stages(manifests, stage_a: str, stage_b: str, metric: str, task: str | None = None,
                   mode: str = "auto") -> PairedScores:
    """Pair ``metric`` between two stage patterns per (run, task) and run the signed-rank test.

    Patterns use shell wildcards. When a pattern matches several stages in one
    run (e.g. ``PTQ-*-4bit`` over two methods), the sorted matches are paired
    position by position.
    """
    paired = PairedScores()
    for m in manifests:
        a_stages, b_stages = _matching(m, stage_a), _matching(m, stage_b)
        if not a_stages or not b_stages:
            continue
        if len(a_stages) != len(b_stages):
            raise ReportError(f"run {m.run_name!r}: {len(a_stages)} stages match {stage_a!r} but {len(b_stages)} match {stage_b!r}")
        for sa, sb in zip(a_stages, b_stages):
            tasks = sorted(set(sa.report.metrics) & set(sb.report.metrics))
            for t in tasks:
                if task is not None and not fnmatchcase(t, task):
                    continue
                if metric in sa.report.metrics[t] and metric in sb.report.metrics[t]:
                    paired.add(sa.report.metrics[t][metric], sb.report.metrics[t][metric], (m.run_name, sa.label, sb.label, t))
    if not paired.pairs:
        raise ReportError(f"no ({stage_a}, {stage_b}) pairs carry metric {metric!r}")
    wilcoxon_signed_rank(paired, mode)
    return paired


def format_comparison(paired: PairedScores, stage_a: str, stage_b: str, metric: str, alpha: float = 0.05) -> str:
    r = paired.result
    lines = [
        f"compare {stage_a} vs {stage_b} on {metric}",
        f"pairs {len(paired.pairs)}  n_effective {r.n_effective}  mode {r.mode}",
        f"W+ {r.w_plus:g}  W- {r.w_minus:g}  median_diff {r.median_difference:+.6g}",
        f"p {r.p_value:.6g}  significant at {alpha:g}: {'yes' if r.significant(alpha) else 'no'}",
    ]
    if r.degenerate:
        lines.append("degenerate: every difference is zero")
    return "\n".join(lines) + "\n"
