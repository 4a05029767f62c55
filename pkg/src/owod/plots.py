"""Figure emission: temperature-sweep panels and per-class PR curves.

Figures are rendered with matplotlib's SVG backend under a pinned hash
salt and without a creation date, so regenerating from the same reports
yields identical bytes. Null metrics are omitted from their series
rather than drawn as zeros.
"""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .metrics import EvalReport

_SWEEP_SERIES = ("u_recall", "map_both", "a_ose", "wi")
_HASHSALT = "owod"


def _render(fig) -> str:
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    return buf.getvalue().decode("utf-8")


def sweep_svg(reports: list[EvalReport]) -> str:
    """One panel per metric with temperature on the x-axis.

    Each point is labeled with the report value verbatim; reports where
    a metric is null contribute no point to that panel.
    """
    if not reports:
        raise ValueError("at least one report is required")
    with plt.rc_context({"svg.hashsalt": _HASHSALT}):
        fig, axes = plt.subplots(2, 2, figsize=(9, 6.5), sharex=True)
        ordered = sorted(reports, key=lambda r: r.tau)
        for ax, name in zip(axes.flat, _SWEEP_SERIES):
            xs = [r.tau for r in ordered if getattr(r, name) is not None]
            ys = [getattr(r, name) for r in ordered if getattr(r, name) is not None]
            if xs:
                ax.plot(xs, ys, color="tab:blue", linewidth=1.0, zorder=1)
                ax.scatter(xs, ys, color="tab:blue", s=18, zorder=2)
                for x, y in zip(xs, ys):
                    ax.annotate(repr(y), (x, y), fontsize=6, textcoords="offset points", xytext=(2, 4))
            ax.set_title(name)
            ax.set_xlabel("objectness temperature")
        fig.suptitle(f"temperature sweep, task {ordered[0].task}")
        fig.tight_layout()
        return _render(fig)


def pr_curves_svg(report: EvalReport) -> str:
    """Per-class precision-recall curves with the stored AP verbatim."""
    with plt.rc_context({"svg.hashsalt": _HASHSALT}):
        fig, ax = plt.subplots(figsize=(7, 5.5))
        for cls in sorted(report.per_class_pr):
            curve = report.per_class_pr[cls]
            if not curve["recall"]:
                continue
            ap = report.per_class_ap.get(cls)
            label = f"class {cls} (AP={ap!r})"
            ax.plot([0.0] + list(curve["recall"]), [1.0] + list(curve["precision"]), label=label)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_xlim(0.0, 1.05)
        ax.set_ylim(0.0, 1.05)
        ax.set_title(f"precision-recall, task {report.task}")
        ax.legend(fontsize=7, loc="lower left")
        return _render(fig)
