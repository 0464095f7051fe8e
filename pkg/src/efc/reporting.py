"""Report rendering: JSON, CSV, aligned text tables and PNG figures."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from efc.evaluation import CI_NOTE, SCORING_NOTE, MetricsReport, UnknownExperimentReport  # noqa: E402

# Stacked-bar colours for benign / other classes / suspicious
UNKNOWN_COLORS = ("#4c72b0", "#dd8452", "#c44e52")


def _pm(mean: float, ci: float) -> str:
    return f"{mean:.3f} ± {ci:.3f}"


def metrics_table(report: MetricsReport) -> str:
    """Per-class precision/recall/F1 with macro and weighted averages."""
    header = ("Class", "Precision", "Recall", "F1", "Support")
    rows = []
    P, R, F = (report.mean(x) for x in ("precision", "recall", "f1"))
    Pc, Rc, Fc = (report.ci95(x) for x in ("precision", "recall", "f1"))
    support = report.confusion.counts.sum(axis=1)
    for c, label in enumerate(report.labels):
        rows.append((label, _pm(P[c], Pc[c]), _pm(R[c], Rc[c]), _pm(F[c], Fc[c]), str(support[c])))
    w = support / support.sum() if support.sum() else np.zeros_like(support, dtype=float)
    rows.append(("Macro average", f"{P.mean():.3f}", f"{R.mean():.3f}",
                 _pm(report.macro_f1, report.ci95("macro_f1")), str(support.sum())))
    rows.append(("Weighted average", f"{(P * w).sum():.3f}", f"{(R * w).sum():.3f}",
                 _pm(report.weighted_f1, report.ci95("weighted_f1")), str(support.sum())))
    widths = [max(len(r[k]) for r in rows + [header]) for k in range(len(header))]
    line = lambda r: "  ".join(s.ljust(w) if k == 0 else s.rjust(w)  # noqa: E731
                               for k, (s, w) in enumerate(zip(r, widths)))
    sep = "-" * len(line(header))
    out = [f"# scoring: {SCORING_NOTE}", f"# {CI_NOTE}", line(header), sep]
    out += [line(r) for r in rows[:-2]] + [sep] + [line(r) for r in rows[-2:]]
    out += [f"# flag: {f}" for f in report.flags]
    return "\n".join(out) + "\n"


def confusion_table(report: MetricsReport) -> str:
    cm = report.confusion
    head = ["true \\ predicted"] + list(cm.columns)
    rows = [[label] + [str(v) for v in cm.counts[r]] for r, label in enumerate(cm.labels)]
    widths = [max(len(r[k]) for r in rows + [head]) for k in range(len(head))]
    fmt = lambda r: "  ".join(s.rjust(w) for s, w in zip(r, widths))  # noqa: E731
    return "\n".join([fmt(head)] + [fmt(r) for r in rows]) + "\n"


def write_metrics_csv(report: MetricsReport, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "precision", "precision_ci95", "recall", "recall_ci95",
                    "f1", "f1_ci95", "support"])
        support = report.confusion.counts.sum(axis=1)
        stats = [(report.mean(x), report.ci95(x)) for x in ("precision", "recall", "f1")]
        for c, label in enumerate(report.labels):
            w.writerow([label] + [f"{v:.6f}" for m, ci in stats for v in (m[c], ci[c])]
                       + [int(support[c])])
        w.writerow(["macro_average", "", "", "", "", f"{report.macro_f1:.6f}",
                    f"{float(report.ci95('macro_f1')):.6f}", int(support.sum())])
        w.writerow(["weighted_average", "", "", "", "", f"{report.weighted_f1:.6f}",
                    f"{float(report.ci95('weighted_f1')):.6f}", int(support.sum())])


def plot_metrics(report: MetricsReport, path: Path) -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 4))
    x = np.arange(len(report.labels))
    ax1.bar(x, report.mean("f1"), yerr=report.ci95("f1"), color="#4c72b0", capsize=3)
    ax1.axhline(report.macro_f1, color="k", lw=0.8, ls="--", label=f"macro {report.macro_f1:.3f}")
    ax1.set_xticks(x, report.labels, rotation=30, ha="right")
    ax1.set_ylim(0, 1.05)
    ax1.set_ylabel("F1 (mean over folds)")
    ax1.legend(loc="lower right", frameon=False)

    cm = report.confusion.counts.astype(float)
    rownorm = cm / np.maximum(cm.sum(axis=1, keepdims=True), 1)
    im = ax2.imshow(rownorm, vmin=0, vmax=1, cmap="Blues", aspect="auto")
    ax2.set_xticks(np.arange(cm.shape[1]), report.confusion.columns, rotation=30, ha="right")
    ax2.set_yticks(x, report.labels)
    ax2.set_xlabel("predicted")
    ax2.set_ylabel("true")
    fig.colorbar(im, ax=ax2, fraction=0.046, label="row fraction")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_metrics_report(report: MetricsReport, out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / n for n in ("metrics.json", "metrics.csv", "metrics.txt", "metrics.png")]
    paths[0].write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    write_metrics_csv(report, paths[1])
    paths[2].write_text(metrics_table(report) + "\n" + confusion_table(report), encoding="utf-8")
    plot_metrics(report, paths[3])
    return paths


def unknown_table(reports: Sequence[UnknownExperimentReport]) -> str:
    header = ("Withheld class", "Benign", "Other classes", "Suspicious", "Test rows")
    rows = [(r.withheld, *(f"{r.fractions[k]:.3f}" for k in ("benign", "other", "suspicious")),
             str(r.total)) for r in reports]
    widths = [max(len(r[k]) for r in rows + [header]) for k in range(len(header))]
    fmt = lambda r: "  ".join(s.ljust(w) if k == 0 else s.rjust(w)  # noqa: E731
                              for k, (s, w) in enumerate(zip(r, widths)))
    return "\n".join([fmt(header), "-" * len(fmt(header))] + [fmt(r) for r in rows]) + "\n"


def write_unknown_csv(reports: Sequence[UnknownExperimentReport], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["withheld", "benign_fraction", "other_fraction", "suspicious_fraction",
                    "test_rows"])
        for r in reports:
            f = r.fractions
            w.writerow([r.withheld, f"{f['benign']:.6f}", f"{f['other']:.6f}",
                        f"{f['suspicious']:.6f}", r.total])


def plot_unknown(reports: Sequence[UnknownExperimentReport], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 0.6 * len(reports) + 1.5))
    y = np.arange(len(reports))
    left = np.zeros(len(reports))
    for key, name, color in zip(("benign", "other", "suspicious"),
                                ("Benign", "Other classes", "Suspicious"), UNKNOWN_COLORS):
        vals = np.array([r.fractions[key] for r in reports])
        ax.barh(y, vals, left=left, color=color, label=name)
        left += vals
    ax.set_yticks(y, [r.withheld for r in reports])
    ax.set_xlim(0, 1)
    ax.set_xlabel("fraction of withheld-class test flows")
    ax.legend(ncol=3, loc="upper center", bbox_to_anchor=(0.5, -0.25), frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_unknown_report(reports: Sequence[UnknownExperimentReport], out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for r in reports:
        p = out_dir / f"unknown_{_slug(r.withheld)}.json"
        p.write_text(json.dumps(r.to_dict(), indent=2) + "\n", encoding="utf-8")
        paths.append(p)
    summary = [out_dir / n for n in ("unknown.csv", "unknown.txt", "unknown.png")]
    write_unknown_csv(reports, summary[0])
    summary[1].write_text(unknown_table(reports), encoding="utf-8")
    plot_unknown(reports, summary[2])
    return paths + summary


def _slug(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in label)
