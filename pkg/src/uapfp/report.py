"""Report tables built from stage outputs: similarity CDFs, ablation and robustness summaries, SVG charts."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

CDF_EDGES = np.round(np.arange(-1.0, 1.0 + 1e-9, 0.1), 1)
ROLES = ("piracy", "homologous")


def similarity_cdf(sims_by_role: dict, edges=CDF_EDGES):
    """Rows ``(upper_edge, cdf per role)``: fraction of sims <= edge, in 0.1 steps.

    A role with no samples gets empty cells; with no samples at all there are no rows.
    """
    if not any(len(sims_by_role.get(role, [])) for role in ROLES):
        return []
    rows = []
    for e in edges:
        row = [f"{e:.1f}"]
        for role in ROLES:
            s = np.asarray(sims_by_role.get(role, []), dtype=np.float64)
            row.append(f"{np.mean(s <= e + 1e-12):.6f}" if s.size else "")
        rows.append(row)
    return rows


def _read(path):
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def _write(path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def svg_lines(series: dict, title, xlabel, ylabel, width=480, height=320):
    """Minimal SVG line chart; ``series`` maps a label to (xs, ys)."""
    pad = 48
    xs_all = [x for xs, _ in series.values() for x in xs]
    ys_all = [y for _, ys in series.values() for y in ys]
    if not xs_all:
        xs_all, ys_all = [0.0, 1.0], [0.0, 1.0]
    x0, x1 = min(xs_all), max(xs_all)
    y0, y1 = min(min(ys_all), 0.0), max(max(ys_all), 1.0)
    x1 = x1 if x1 > x0 else x0 + 1.0

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<text x="{width / 2:.0f}" y="16" text-anchor="middle">{title}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2:.0f}" y="{height - 10}" text-anchor="middle">{xlabel}</text>',
        f'<text x="12" y="{height / 2:.0f}" transform="rotate(-90 12 {height / 2:.0f})" text-anchor="middle">{ylabel}</text>',
        f'<text x="{pad}" y="{height - pad + 14}" text-anchor="middle">{x0:g}</text>',
        f'<text x="{width - pad}" y="{height - pad + 14}" text-anchor="middle">{x1:g}</text>',
        f'<text x="{pad - 4}" y="{height - pad}" text-anchor="end">{y0:g}</text>',
        f'<text x="{pad - 4}" y="{pad + 4}" text-anchor="end">{y1:g}</text>',
    ]
    for i, (label, (xs, ys)) in enumerate(series.items()):
        c = colors[i % len(colors)]
        pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(xs, ys))
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{width - pad - 4}" y="{pad + 14 * (i + 1)}" text-anchor="end" fill="{c}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(run_dir, out_dir):
    """Write every table whose inputs exist; list the missing ones in ``missing.json``."""
    run_dir, out_dir = Path(run_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arts, missing = [], []

    views = run_dir / "verify" / "view_sims.csv"
    if views.exists():
        rows = _read(views)
        by_role = {r: [float(x["sim"]) for x in rows if x["role"] == r] for r in ROLES}
        cdf = similarity_cdf(by_role)
        arts.append(_write(out_dir / "similarity_cdf.csv", ["upper_edge", "piracy_cdf", "homologous_cdf"], cdf))
        series = {r: ([float(c[0]) for c in cdf], [float(c[i + 1]) for c in cdf]) for i, r in enumerate(ROLES) if by_role[r]}
        p = out_dir / "similarity_cdf.svg"
        p.write_text(svg_lines(series, "similarity CDF", "similarity", "fraction <= x"))
        arts.append(p)
    else:
        missing.append(str(views.relative_to(run_dir)))

    nsweep = run_dir / "ablate" / "n_sweep.csv"
    if nsweep.exists():
        rows = _read(nsweep)
        p = out_dir / "n_sweep.svg"
        p.write_text(svg_lines({"gap": ([float(r["n"]) for r in rows], [float(r["gap"]) for r in rows])},
                               "similarity gap vs probe count", "n", "gap"))
        arts.append(p)
    else:
        missing.append(str(nsweep.relative_to(run_dir)))

    rob = run_dir / "robustness" / "robustness.csv"
    if rob.exists():
        rows = _read(rob)
        keys = []
        for r in rows:
            k = (r["modification"], r["param"])
            if k not in keys:
                keys.append(k)
        table = []
        for mod, param in keys:
            sel = [r for r in rows if (r["modification"], r["param"]) == (mod, param)]
            sims = [float(r["mean_sim"]) for r in sel]
            accs = [float(r["test_acc"]) for r in sel]
            table.append([mod, param, len(sel), f"{np.mean(sims):.6f}", f"{np.min(sims):.6f}", f"{np.mean(accs):.6f}"])
        arts.append(_write(out_dir / "robustness_summary.csv",
                           ["modification", "param", "n_models", "mean_sim", "min_sim", "mean_test_acc"], table))
    else:
        missing.append(str(rob.relative_to(run_dir)))

    adv = run_dir / "robustness" / "advtrain_summary.csv"
    if adv.exists():
        rows = _read(adv)
        p = out_dir / "advtrain.svg"
        its = [float(r["iterations"]) for r in rows]
        p.write_text(svg_lines({"similarity (30-it avg)": (its, [float(r["moving_avg_30"]) for r in rows]),
                                "test accuracy": (its, [float(r["test_acc"]) for r in rows])},
                               "adversarial training", "iterations", "value"))
        arts.append(p)
    else:
        missing.append(str(adv.relative_to(run_dir)))

    summary = []
    for name, rel in (("auc", "verify/auc.json"),):
        p = run_dir / rel
        if p.exists():
            summary.append([name, f"{json.loads(p.read_text())['auc']:.6f}"])
        else:
            missing.append(rel)
    for rel in ("ablate/topk.csv", "ablate/uap_vs_lap.csv"):
        p = run_dir / rel
        if not p.exists():
            missing.append(rel)
            continue
        for r in _read(p):
            key = r.get("top_k") or r.get("method")
            summary.append([f"{Path(rel).stem}:{key}:auc", r["auc"]])
    arts.append(_write(out_dir / "summary.csv", ["metric", "value"], summary))
    p = out_dir / "missing.json"
    p.write_text(json.dumps(sorted(missing), indent=1) + "\n")
    arts.append(p)
    return arts
