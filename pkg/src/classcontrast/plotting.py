"""Matplotlib defaults for report figures."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

SELECTOR_COLORS = {
    "original": "#1b9e77",
    "mean": "#7570b3",
    "max": "#d95f02",
    "weighted": "#e7298a",
}

params = {
    "font.family": "DejaVu Sans",
    "font.size": 8,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.2,
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "svg.hashsalt": "classcontrast",
}


def figure(nrows=1, ncols=1, width=3.2, height=2.6, **kw):
    """Figure with per-panel size ``width`` x ``height`` inches."""
    with plt.rc_context(params):
        fig, axes = plt.subplots(nrows, ncols, figsize=(width * ncols, height * nrows), squeeze=False, **kw)
    return fig, axes


def save(fig, path, **kw):
    # no timestamp metadata so repeated runs are byte-identical
    with plt.rc_context(params):
        fig.savefig(path, metadata={"Software": None}, **kw)
    plt.close(fig)
