"""Figure rendering for experiment reports (self-contained SVG via matplotlib)."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

colors = ["#08589e", "#2b8cbe", "#4eb3d3", "#7bccc4", "#a8ddb5", "#e34a33", "#fdbb84"]

params = {
    "axes.prop_cycle": matplotlib.cycler(color=colors),
    "axes.labelsize": 9,
    "font.size": 8,
    "font.family": "DejaVu Sans",
    "legend.fontsize": 7,
    "lines.linewidth": 0.9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    # text as paths: no font files referenced from the SVG
    "svg.fonttype": "path",
    # fixed element ids so identical data gives identical bytes
    "svg.hashsalt": "eoslab",
}

MAX_POINTS = 2000


def _thin(t, v):
    stride = max(1, int(math.ceil(len(t) / MAX_POINTS)))
    return t[::stride], v[::stride]


def emit_svg(trajectories, path, lambda_star: float, title: str = "", loglog: bool = False):
    """Three-panel log-scale chart of dist_par, |theta_perp| and lambda - lambda* against t.

    Non-positive values are dropped from each panel.  The file is a
    standalone SVG (glyphs rendered as paths, no external assets).
    """
    panels = [
        ("dist_par", r"$\|\theta^\parallel_t-\theta^\parallel_*\|$"),
        ("abs_theta_perp", r"$|\theta^\perp_t|$"),
        ("sharpness_gap", r"$\lambda(\theta^\parallel_t)-\lambda_*$"),
    ]
    with plt.rc_context(params):
        fig, axes = plt.subplots(1, 3, figsize=(9.0, 2.8))
        for ax, (key, label) in zip(axes, panels):
            for k, tr in enumerate(trajectories):
                t = np.asarray(tr.t, dtype=float)
                if key == "dist_par":
                    v = np.asarray(tr.dist_par)
                elif key == "abs_theta_perp":
                    v = np.abs(np.asarray(tr.theta_perp))
                else:
                    v = np.asarray(tr.sharpness_par) - lambda_star
                keep = (v > 0) & np.isfinite(v)
                if loglog:
                    keep &= t > 0
                if not np.any(keep):
                    continue
                ax.plot(*_thin(t[keep], v[keep]), label=f"init {k}")
            ax.set_yscale("log")
            if loglog:
                ax.set_xscale("log")
            ax.set_xlabel("$t$")
            ax.set_title(label)
        if len(trajectories) > 1:
            axes[0].legend(loc="best", frameon=False)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
