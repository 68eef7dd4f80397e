"""Per-epoch conditioning curves from training logs (L2 per variant, CE overlay)."""

from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .trainer import META_NAME

COLORS = {"baseline-category-only": "tab:blue", "ogan": "magenta"}
LABELS = {"baseline-category-only": "baseline (category-only)", "ogan": "O-GAN"}


class PlotError(ValueError):
    pass


def read_log(path) -> tuple[str, list[dict]]:
    """Return ``(variant, records)``; the variant comes from the sibling meta file
    when present, otherwise from which CE series the log carries."""
    path = Path(path)
    try:
        records = [json.loads(ln) for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise PlotError(f"unreadable log {path}: {exc}") from None
    meta_path = path.parent / META_NAME
    variant = None
    if meta_path.exists():
        variant = json.loads(meta_path.read_text(encoding="utf-8")).get("variant")
    if variant is None:
        has_sub = any(r.get("cond_ce_sub") is not None for r in records)
        variant = "ogan" if has_sub else "baseline-category-only"
    return variant, records


def per_epoch(records: list[dict], key: str) -> tuple[list[int], list[float]]:
    """Mean of ``key`` over the generator steps of each epoch."""
    acc = defaultdict(list)
    for r in records:
        v = r.get(key)
        if v is not None:
            acc[r["epoch"]].append(v)
    epochs = sorted(acc)
    return epochs, [sum(acc[e]) / len(acc[e]) for e in epochs]


def _ce_key(records):
    for k in ("cond_ce_sub", "cond_ce_main"):
        if any(r.get(k) is not None for r in records):
            return k
    return None


def _panel(ax, title, ylabel):
    ax.set_title(title)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)


def plot_logs(log_paths, out_dir) -> list[Path]:
    """Write the three comparison figures to ``out_dir`` and return their paths."""
    if not log_paths:
        raise PlotError("at least one log file is required")
    runs = [(Path(p),) + read_log(p) for p in log_paths]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    for tag, variant in (("fig3a_l2_baseline", "baseline-category-only"), ("fig3b_l2_ogan", "ogan")):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        mine = [(p, recs) for p, v, recs in runs if v == variant]
        for p, recs in mine:
            x, y = per_epoch(recs, "cond_l2")
            ax.plot(x, y, marker="o", markersize=3, color=COLORS[variant], label=p.parent.name or p.name)
        if not mine:
            ax.text(0.5, 0.5, "no log for this variant", ha="center", va="center", transform=ax.transAxes)
        else:
            ax.legend(fontsize="small")
        _panel(ax, f"conditioning L2, {LABELS[variant]}", "L2 loss")
        fig.tight_layout()
        path = out / f"{tag}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for p, variant, recs in runs:
        key = _ce_key(recs)
        if key is None:
            continue
        x, y = per_epoch(recs, key)
        ax.plot(x, y, marker="o", markersize=3, color=COLORS.get(variant, "gray"),
                label=f"{LABELS.get(variant, variant)} ({p.parent.name or p.name})")
    ax.legend(fontsize="small")
    _panel(ax, "conditioning cross-entropy", "cross-entropy")
    fig.tight_layout()
    path = out / "fig3c_ce.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    written.append(path)
    return written
