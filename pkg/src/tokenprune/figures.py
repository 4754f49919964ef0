"""Figure rendering for report paths.

Every plotting command also writes the underlying CSV; the PNGs here are
companions for quick inspection, rendered headless via the Agg backend.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def render_tradeoff(rows, out_path) -> None:
    """Quality vs speedup per penalty setting: rows of
    (penalty, seed, metric, speedup)."""
    by_penalty: dict[float, list[tuple[float, float]]] = {}
    for penalty, _seed, metric, speedup in rows:
        by_penalty.setdefault(float(penalty), []).append((float(speedup), float(metric)))
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    xs, ys, labels = [], [], []
    for penalty in sorted(by_penalty):
        pts = by_penalty[penalty]
        xs.append(sum(p[0] for p in pts) / len(pts))
        ys.append(sum(p[1] for p in pts) / len(pts))
        labels.append(penalty)
        ax.scatter(*zip(*pts), s=12, alpha=0.45)
    ax.plot(xs, ys, "k.-", lw=1.2)
    for x, y, lam in zip(xs, ys, labels):
        ax.annotate(f"{lam:g}", (x, y), fontsize=7, xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel("FLOPs speedup")
    ax.set_ylabel("dev metric")
    ax.set_title("Quality / efficiency trade-off")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def render_strategy_curves(results, out_path) -> None:
    """Metric vs keep ratio per selection strategy (EliminationResult list)."""
    by_strategy: dict[str, list[tuple[float, float]]] = {}
    for r in results:
        by_strategy.setdefault(r.strategy, []).append((r.keep_ratio, r.metric))
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    for strategy, pts in sorted(by_strategy.items()):
        pts = sorted(pts)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=strategy)
    ax.set_xlabel("kept token fraction")
    ax.set_ylabel("metric")
    ax.set_title("Selection strategies under fixed elimination")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def render_eval(rows, out_path) -> None:
    """Per-example speedups from an evaluation run (dicts with orig_len,
    speedup)."""
    lengths = [r["orig_len"] for r in rows]
    speedups = [r["speedup"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7.5, 3.2))
    ax1.scatter(lengths, speedups, s=10, alpha=0.5)
    ax1.set_xlabel("sequence length")
    ax1.set_ylabel("FLOPs speedup")
    ax1.grid(alpha=0.3)
    ax2.hist(speedups, bins=20)
    ax2.set_xlabel("FLOPs speedup")
    ax2.set_ylabel("examples")
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
