"""Figure rendering for the experiment harness: every CSV the harness emits
can be rendered to a PNG next to it. Uses the non-interactive Agg backend so
runs work headless.
"""

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

FIG_SIZE = (7.0, 4.2)
DPI = 120


def _episode_ends(rows):
    """Collapse per-step rows to per-episode (end_step, return) points."""
    out = []
    last_episode = None
    prev = None
    for row in rows:
        episode = int(row["episode"])
        step = int(row["step"])
        ret = float(row["return"]) if row["return"] else None
        if last_episode is not None and episode != last_episode and prev is not None:
            out.append(prev)
        if ret is not None:
            prev = (step, ret)
        last_episode = episode
    if prev is not None:
        out.append(prev)
    return out


def render_learning_curve(csv_path, out_path, window=10, title=""):
    with open(csv_path) as fh:
        rows = list(csv.DictReader(fh))
    points = _episode_ends(rows)
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    if points:
        steps = [s for s, _ in points]
        rets = [r for _, r in points]
        ax.plot(steps, rets, lw=0.6, alpha=0.35, color="tab:blue", label="episode return")
        if len(points) >= window:
            sm_steps, sm_vals = [], []
            for i in range(0, len(points) - window + 1, window):
                chunk = points[i : i + window]
                sm_steps.append(chunk[-1][0])
                sm_vals.append(sum(r for _, r in chunk) / window)
            ax.plot(sm_steps, sm_vals, lw=1.8, color="tab:red",
                    label=f"smoothed ({window} episodes)")
    ax.set_xlabel("environment step")
    ax.set_ylabel("return")
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=DPI)
    plt.close(fig)
    return out_path


def render_compare_bars(result, out_path):
    rows = result["rows"]
    agents = [r["agent"] for r in rows]
    panels = [
        ("sample_complexity", "steps to threshold"),
        ("space_complexity", "trainable parameters"),
        ("time_per_update_s", "seconds per update"),
    ]
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.6))
    for ax, (key, label) in zip(axes, panels):
        values = [r[key] if r[key] is not None else 0.0 for r in rows]
        ax.bar(agents, values, color="tab:blue")
        ax.set_title(label, fontsize=9)
        ax.tick_params(axis="x", rotation=20, labelsize=8)
        ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(out_path, dpi=DPI)
    plt.close(fig)
    return out_path


def render_flop_scaling(k_values, gnn_counts, fnn_counts, out_path):
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    ax.plot(k_values, gnn_counts, "o-", label="graph agent (linear processors)")
    ax.plot(k_values, fnn_counts, "s--", label="dense agent (fixed widths)")
    ax.set_xlabel("number of users K")
    ax.set_ylabel("multiplications per inference")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=DPI)
    plt.close(fig)
    return out_path


def render_oracle_table(rows, out_path):
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    seeds = [r["seed"] for r in rows]
    for key, style in (("oracle", "o-"), ("all_active", "s--"), ("random_mean", "^:")):
        ax.plot(seeds, [r[key] for r in rows], style, label=key, ms=3, lw=0.9)
    ax.set_xlabel("instance seed")
    ax.set_ylabel("sum rate (bit/s/Hz)")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=DPI)
    plt.close(fig)
    return out_path
