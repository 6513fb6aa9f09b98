"""Line-chart SVGs with byte-stable output."""

from __future__ import annotations

import io
from collections.abc import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "svg.hashsalt": "kaminor",
    "svg.fonttype": "none",
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.5,
    "legend.frameon": False,
}


def series_gid(name: str) -> str:
    return "series-" + "".join(ch if ch.isalnum() else "_" for ch in name)


def render_svg(
    series: Mapping[str, Sequence[float]],
    *,
    title: str = "",
    xlabel: str = "step",
    ylabel: str = "",
    logy: bool = False,
    x: Sequence[float] | None = None,
) -> bytes:
    """One polyline per named series plus a legend; identical input gives identical bytes.

    Missing values (None or NaN) break the line. Each line is tagged with
    the SVG id ``series-<name>``.
    """
    if not series or any(len(v) == 0 for v in series.values()):
        raise ValueError("need at least one nonempty series")
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        for name, vals in series.items():
            y = np.array([np.nan if v is None else v for v in vals], dtype=np.float64)
            xs = np.arange(len(y)) if x is None else np.asarray(x, dtype=np.float64)[: len(y)]
            (line,) = ax.plot(xs, y, label=name)
            line.set_gid(series_gid(name))
        if logy:
            ax.set_yscale("log")
        ax.set_title(title)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.legend()
        fig.tight_layout()
        buf = io.BytesIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    return buf.getvalue()


def emit_plot(series, path, **kwargs) -> None:
    data = render_svg(series, **kwargs)
    with open(path, "wb") as fh:
        fh.write(data)
