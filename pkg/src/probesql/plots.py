"""Figures for an evaluation report (matplotlib, headless)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # a fixed creation date keeps reruns byte-stable
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_ex_at_k(per_example: list[dict], path: Path) -> Path | None:
    rows = [r for r in per_example if "ex_at_k" in r]
    if not rows:
        return None
    fig, ax = plt.subplots(figsize=(max(4, 0.5 * len(rows) + 2), 3.2))
    ids = [r["question_id"] for r in rows]
    colors = ["tab:green" if r["ex"] else "tab:red" for r in rows]
    ax.bar(range(len(rows)), [r["ex_at_k"] for r in rows], color=colors)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(ids, rotation=60, ha="right", fontsize=7)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("EX@k (green: voted answer correct)")
    return _save(fig, path)


def plot_rounds_queries(per_example: list[dict], path: Path) -> Path | None:
    rounds = [x for r in per_example for x in r.get("rounds", [])]
    queries = [x for r in per_example for x in r.get("queries", [])]
    if not rounds:
        return None
    fig, (a, b) = plt.subplots(1, 2, figsize=(7, 3))
    a.hist(rounds, bins=range(0, max(rounds) + 2), align="left", color="tab:blue")
    a.set_xlabel("exploration rounds per candidate")
    b.hist(queries, bins=range(0, max(queries) + 2), align="left", color="tab:orange")
    b.set_xlabel("explore queries per candidate")
    a.set_ylabel("candidates")
    return _save(fig, path)


def plot_linking(per_example: list[dict], path: Path) -> Path | None:
    rows = [r for r in per_example if "linking" in r]
    if not rows:
        return None
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter([r["linking"]["precision"] for r in rows], [r["linking"]["recall"] for r in rows], alpha=0.7)
    ax.set_xlim(-0.05, 1.05)
    ax.set_ylim(-0.05, 1.05)
    ax.set_xlabel("column precision")
    ax.set_ylabel("column recall")
    return _save(fig, path)


def render_figures(report: dict, out_dir: Path) -> list[Path]:
    per = report.get("per_example", [])
    made = [
        plot_ex_at_k(per, out_dir / "ex_at_k.png"),
        plot_rounds_queries(per, out_dir / "rounds_queries.png"),
        plot_linking(per, out_dir / "linking.png"),
    ]
    return [p for p in made if p is not None]
