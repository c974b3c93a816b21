"""Static log-log plots of result tables."""

from __future__ import annotations

import math
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_table(rows: list, path: str, rate: Optional[dict] = None, config_hash: str = "", seed=None) -> None:
    """Plot every statistic against t with error bars and a dashed predicted slope."""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    stats = []
    for r in rows:
        if r["statistic"] not in stats:
            stats.append(r["statistic"])
    for name in stats:
        sub = [r for r in rows if r["statistic"] == name and r["mean"] > 0 and math.isfinite(r["mean"])]
        if not sub:
            continue
        t = np.array([r["t"] for r in sub])
        m = np.array([r["mean"] for r in sub])
        s = np.array([r["stderr"] for r in sub])
        ax.errorbar(t, m, yerr=np.where(np.isfinite(s), s, 0.0), marker="o", capsize=3, label=name)
        slope = None if rate is None else rate.get("predicted_slope")
        if slope is not None and len(t) >= 2 and not name.startswith("t*"):
            # anchor the reference line at the geometric centre of the data
            tc = math.exp(np.mean(np.log(t)))
            mc = math.exp(np.mean(np.log(m)))
            ref = mc * (t / tc) ** slope
            if rate.get("log_factor"):
                ref = ref * np.log(t) / math.log(tc)
            ax.plot(t, ref, "--", color="gray", label=f"slope {slope:.3g}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("t")
    ax.set_ylabel("statistic")
    ax.set_title(f"config {config_hash}  seed {seed}", fontsize=9)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
