"""Metrics CSV, regime summary table and hand-written SVG charts.

Regime labels in the metrics CSV are ``sert:<ENV>`` for the single-environment
models, ``mert`` and ``seril``. For the summary every ``sert:*`` label is
pooled into one ``sert`` regime: each (environment, task, seed) unit gets the
mean error over all SERT models, which keeps the regimes paired by unit.
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from itertools import combinations

import numpy as np

from .errors import ConfigError
from .evaluate import EvalRecord, summarize
from .stats import SIGNIFICANCE, paired_ttest
from .world import EnvironmentSpec, Orientation, Pathology, Sequence, TaskId

METRICS_HEADER = ["regime", "sequence", "pathology", "orientation", "task", "seed", "terminal_error"]
REGIME_ORDER = ("sert", "mert", "seril")


# --- metrics CSV --------------------------------------------------------------

def _sort_key(r: EvalRecord):
    return (r.regime, r.env.orientation, r.env.pathology, r.env.sequence, r.task, r.seed)


def metrics_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in sorted(records, key=_sort_key):
        w.writerow([r.regime, r.env.sequence.name, r.env.pathology.name, r.env.orientation.name,
                    r.task.name, r.seed, f"{r.terminal_error:.6f}"])
    return buf.getvalue()


def parse_metrics_csv(text: str, name: str = "<metrics>", env_seed: int = 0) -> list:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != METRICS_HEADER:
        raise ConfigError(f"{name}: expected header {','.join(METRICS_HEADER)}")
    out = []
    for n, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            regime, seq, path, orient, task, seed, err = row
            spec = EnvironmentSpec(Sequence[seq], Pathology[path], Orientation[orient], env_seed)
            rec = EvalRecord(regime, spec, TaskId[task], int(seed), float(err))
        except (ValueError, KeyError):
            raise ConfigError(f"{name}: malformed row {n}") from None
        if not math.isfinite(rec.terminal_error) or rec.terminal_error < 0:
            raise ConfigError(f"{name}: bad terminal_error on row {n}")
        out.append(rec)
    return out


# --- summary ------------------------------------------------------------------

def regime_family(label: str) -> str:
    return label.split(":", 1)[0]


def pooled_errors(records) -> dict:
    """family -> {(env, task, seed): error}, SERT models averaged per unit."""
    acc = defaultdict(lambda: defaultdict(list))
    for r in records:
        acc[regime_family(r.regime)][(r.env.key, r.task, r.seed)].append(r.terminal_error)
    return {fam: {u: float(np.mean(v)) for u, v in units.items()} for fam, units in acc.items()}


def _ordered(families):
    known = [f for f in REGIME_ORDER if f in families]
    return known + sorted(f for f in families if f not in REGIME_ORDER)


def summary_rows(records, threshold: float):
    """Table rows per task plus an ``all`` row; also returns warnings.

    Columns: ``<regime>_mean``, ``<regime>_std``, ``<regime>_adequacy`` per
    regime, then ``p_<a>_<b>`` for every regime pair (units present in both).
    """
    pooled = pooled_errors(records)
    fams = _ordered(pooled)
    warnings = []
    if len(fams) < 2:
        warnings.append("only one regime present; no t-tests computed")
    degenerate = False
    rows = []
    for task in [*TaskId, None]:
        row = {"task": task.name if task is not None else "all"}
        for f in fams:
            errs = [e for u, e in sorted(pooled[f].items()) if task is None or u[1] == task]
            if errs:
                s = summarize(errs, threshold)
                row.update({f"{f}_mean": s.mean, f"{f}_std": s.stddev, f"{f}_adequacy": s.adequacy_rate})
            else:
                row.update({f"{f}_mean": math.nan, f"{f}_std": math.nan, f"{f}_adequacy": math.nan})
        for a, b in combinations(fams, 2):
            units = sorted(u for u in pooled[a] if u in pooled[b] and (task is None or u[1] == task))
            if len(units) < 2:
                row[f"p_{a}_{b}"] = math.nan
                continue
            res = paired_ttest([pooled[a][u] for u in units], [pooled[b][u] for u in units])
            degenerate |= res.degenerate
            row[f"p_{a}_{b}"] = res.p_value
        rows.append(row)
    return rows, warnings, degenerate


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    return "nan" if math.isnan(x) else f"{x:.6g}"


def summary_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = list(rows[0])
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(row[k]) for k in header])
    return buf.getvalue()


def per_model_stats(records, threshold: float) -> list:
    """(label, SummaryStats) per trained model, SERT models first in environment order."""
    by = defaultdict(list)
    for r in records:
        by[r.regime].append(r.terminal_error)

    def key(label):
        fam, _, env = label.partition(":")
        rank = REGIME_ORDER.index(fam) if fam in REGIME_ORDER else len(REGIME_ORDER)
        try:
            spec = EnvironmentSpec.from_name(env)
            order = (spec.orientation, spec.pathology, spec.sequence)
        except ConfigError:
            order = ()
        return (rank, order, label)

    return [(label, summarize(by[label], threshold)) for label in sorted(by, key=key)]


# --- SVG ----------------------------------------------------------------------

PALETTE = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860")


def _svg(width, height, body) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">\n'
            f'<rect width="{width}" height="{height}" fill="white"/>\n')
    return head + "".join(body) + "</svg>\n"


def _axis(body, x0, y0, plot_h, plot_w, top):
    body.append(f'<line x1="{x0}" y1="{y0}" x2="{x0 + plot_w}" y2="{y0}" stroke="black"/>\n')
    body.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y0 - plot_h}" stroke="black"/>\n')
    for k in range(5):
        v = top * k / 4
        y = y0 - plot_h * k / 4
        body.append(f'<line x1="{x0 - 4}" y1="{y:.2f}" x2="{x0}" y2="{y:.2f}" stroke="black"/>\n')
        body.append(f'<text x="{x0 - 6}" y="{y + 4:.2f}" text-anchor="end">{v:.1f}</text>\n')


def _nice_top(values) -> float:
    m = max([v for v in values if math.isfinite(v)] + [1e-9])
    step = 10 ** math.floor(math.log10(m))
    return math.ceil(m / step) * step


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def bar_chart_svg(labels, means, stds, title: str, ylabel: str = "terminal error (voxels)") -> str:
    """One bar per label with a mean +/- std whisker."""
    n = len(labels)
    bar_w, gap, x0, y0, plot_h = 18, 8, 60, 300, 240
    plot_w = n * (bar_w + gap) + gap
    top = _nice_top([m + s for m, s in zip(means, stds)])
    body = [f'<text x="{x0 + plot_w / 2:.1f}" y="20" text-anchor="middle" font-size="14">{_esc(title)}</text>\n',
            f'<text x="14" y="{y0 - plot_h / 2:.1f}" transform="rotate(-90 14 {y0 - plot_h / 2:.1f})" '
            f'text-anchor="middle">{_esc(ylabel)}</text>\n']
    _axis(body, x0, y0, plot_h, plot_w, top)
    for i, (label, m, s) in enumerate(zip(labels, means, stds)):
        x = x0 + gap + i * (bar_w + gap)
        h = plot_h * m / top
        color = PALETTE[REGIME_ORDER.index(regime_family(label)) if regime_family(label) in REGIME_ORDER else 3]
        body.append(f'<rect x="{x}" y="{y0 - h:.2f}" width="{bar_w}" height="{h:.2f}" fill="{color}"/>\n')
        cx = x + bar_w / 2
        lo, hi = y0 - plot_h * max(m - s, 0) / top, y0 - plot_h * (m + s) / top
        body.append(f'<line x1="{cx}" y1="{lo:.2f}" x2="{cx}" y2="{hi:.2f}" stroke="black"/>\n')
        body.append(f'<text x="{cx}" y="{y0 + 8}" transform="rotate(60 {cx} {y0 + 8})" '
                    f'font-size="9">{_esc(label)}</text>\n')
    return _svg(x0 + plot_w + 20, y0 + 150, body)


def grouped_bar_svg(groups, series, values, errors, title: str, ylabel: str = "terminal error (voxels)") -> str:
    """Bars grouped along ``groups`` (e.g. tasks), one colour per series (e.g. regime).

    ``values[s][g]`` and ``errors[s][g]`` index series then group.
    """
    bar_w, gap, x0, y0, plot_h = 16, 18, 60, 300, 240
    group_w = len(series) * bar_w
    plot_w = len(groups) * (group_w + gap) + gap
    top = _nice_top([values[s][g] + errors[s][g] for s in range(len(series)) for g in range(len(groups))])
    body = [f'<text x="{x0 + plot_w / 2:.1f}" y="20" text-anchor="middle" font-size="14">{_esc(title)}</text>\n',
            f'<text x="14" y="{y0 - plot_h / 2:.1f}" transform="rotate(-90 14 {y0 - plot_h / 2:.1f})" '
            f'text-anchor="middle">{_esc(ylabel)}</text>\n']
    _axis(body, x0, y0, plot_h, plot_w, top)
    for g, gname in enumerate(groups):
        gx = x0 + gap + g * (group_w + gap)
        for s in range(len(series)):
            m, e = values[s][g], errors[s][g]
            if not math.isfinite(m):
                continue
            x = gx + s * bar_w
            h = plot_h * m / top
            body.append(f'<rect x="{x}" y="{y0 - h:.2f}" width="{bar_w - 2}" height="{h:.2f}" '
                        f'fill="{PALETTE[s % len(PALETTE)]}"/>\n')
            cx = x + (bar_w - 2) / 2
            lo, hi = y0 - plot_h * max(m - e, 0) / top, y0 - plot_h * (m + e) / top
            body.append(f'<line x1="{cx}" y1="{lo:.2f}" x2="{cx}" y2="{hi:.2f}" stroke="black"/>\n')
        body.append(f'<text x="{gx + group_w / 2}" y="{y0 + 16}" text-anchor="middle">{_esc(gname)}</text>\n')
    for s, sname in enumerate(series):
        lx = x0 + plot_w + 10
        body.append(f'<rect x="{lx}" y="{40 + 16 * s}" width="10" height="10" fill="{PALETTE[s % len(PALETTE)]}"/>\n')
        body.append(f'<text x="{lx + 14}" y="{49 + 16 * s}">{_esc(sname)}</text>\n')
    return _svg(x0 + plot_w + 90, y0 + 40, body)


def heatmap_svg(matrix, labels, title: str) -> str:
    """Square heat map; NaN cells are left blank (grey)."""
    m = np.asarray(matrix, dtype=float)
    n = m.shape[0]
    cell, x0, y0 = 22, 150, 40
    finite = m[np.isfinite(m)]
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    span = hi - lo if hi > lo else 1.0
    body = [f'<text x="{x0 + n * cell / 2:.1f}" y="20" text-anchor="middle" font-size="14">{_esc(title)}</text>\n']
    for i in range(n):
        body.append(f'<text x="{x0 - 4}" y="{y0 + i * cell + 15}" text-anchor="end" font-size="9">'
                    f'{_esc(labels[i])}</text>\n')
        for j in range(n):
            v = m[i, j]
            if math.isfinite(v):
                t = (v - lo) / span
                fill = f"rgb({int(255 * t)},{int(80 + 100 * (1 - t))},{int(255 * (1 - t))})"
                text = f'<text x="{x0 + j * cell + 11}" y="{y0 + i * cell + 15}" text-anchor="middle" ' \
                       f'font-size="8" fill="white">{v:.1f}</text>\n'
            else:
                fill, text = "#dddddd", ""
            body.append(f'<rect x="{x0 + j * cell}" y="{y0 + i * cell}" width="{cell}" height="{cell}" '
                        f'fill="{fill}" stroke="white"/>\n')
            body.append(text)
    for j in range(n):
        cx, cy = x0 + j * cell + 11, y0 + n * cell + 6
        body.append(f'<text x="{cx}" y="{cy}" transform="rotate(60 {cx} {cy})" font-size="9">'
                    f'{_esc(labels[j])}</text>\n')
    body.append(f'<text x="{x0 + n * cell / 2:.1f}" y="{y0 + n * cell + 140}" text-anchor="middle">'
                f'rows: checkpoint after environment i, columns: evaluated environment j</text>\n')
    return _svg(x0 + n * cell + 40, y0 + n * cell + 160, body)


def regime_charts(records, threshold: float) -> dict:
    """{'models.svg': ..., 'tasks.svg': ...} from one set of metrics records."""
    models = per_model_stats(records, threshold)
    out = {"models.svg": bar_chart_svg([l for l, _ in models], [s.mean for _, s in models],
                                       [s.stddev for _, s in models], "Mean terminal error per model")}
    pooled = pooled_errors(records)
    fams = _ordered(pooled)
    tasks = list(TaskId)
    vals, errs = [], []
    for f in fams:
        v, e = [], []
        for t in tasks:
            xs = [x for u, x in pooled[f].items() if u[1] == t]
            s = summarize(xs, threshold) if xs else None
            v.append(s.mean if s else math.nan)
            e.append(s.stddev if s else 0.0)
        vals.append(v)
        errs.append(e)
    out["tasks.svg"] = grouped_bar_svg([t.name for t in tasks], fams, vals, errs, "Mean terminal error per task")
    return out


__all__ = [
    "METRICS_HEADER", "SIGNIFICANCE", "metrics_csv", "parse_metrics_csv", "pooled_errors", "summary_rows",
    "summary_csv", "per_model_stats", "bar_chart_svg", "grouped_bar_svg", "heatmap_svg", "regime_charts",
]
