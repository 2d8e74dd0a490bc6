"""Static charts rendered from a run directory's CSVs.

Charts are derived artifacts: each one declares the CSV columns it reads and
fails loudly when they are missing. Rendering is deterministic for a fixed
matplotlib version (no timestamps in the PNG metadata).
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .experiments import read_csv  # noqa: E402

CHART_COLUMNS = {
    "reward_curve": ("step", "mean_reward"),
    "sweep": ("value", "baseline_mode", "mean", "std"),
    "arr": ("m_train", "m_test", "arr"),
    "ablation": ("schedule_kind", "T", "eval_reward"),
}

_PNG_META = {"Software": None}


class ChartSchemaError(KeyError):
    pass


def _require(rows: list[dict], kind: str, path: Path) -> None:
    if not rows:
        raise ChartSchemaError(f"{path.name}: no data rows")
    missing = [c for c in CHART_COLUMNS[kind] if c not in rows[0]]
    if missing:
        raise ChartSchemaError(f"{path.name}: missing columns {missing} needed by the {kind} chart")


def _save(fig, path: Path) -> Path:
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_reward_curve(csv_path: Path, png_path: Path) -> Path:
    _, rows = read_csv(csv_path)
    _require(rows, "reward_curve", csv_path)
    step = np.array([float(r["step"]) for r in rows])
    rew = np.array([float(r["mean_reward"]) for r in rows])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(step, rew, lw=1.0)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("mean reward (bit/s/Hz)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, png_path)


def plot_sweep(csv_path: Path, png_path: Path, xlabel: str) -> Path:
    _, rows = read_csv(csv_path)
    _require(rows, "sweep", csv_path)
    fig, ax = plt.subplots(figsize=(6, 4))
    modes = sorted({r["baseline_mode"] for r in rows})
    for mode in modes:
        sel = sorted((float(r["value"]), float(r["mean"]), float(r["std"])) for r in rows
                     if r["baseline_mode"] == mode)
        x, m, s = (np.array(c) for c in zip(*sel))
        ax.errorbar(x, m, yerr=s, marker="o", capsize=3, label=mode)
    metric = rows[0].get("metric", "ar")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("SINR" if metric == "sinr" else "achievable rate (bit/s/Hz)")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, png_path)


def plot_arr(csv_path: Path, png_path: Path) -> tuple[Path, int]:
    """Heatmap of the ARR matrix; returns the path and the number of drawn cells."""
    _, rows = read_csv(csv_path)
    _require(rows, "arr", csv_path)
    tr = sorted({int(r["m_train"]) for r in rows})
    te = sorted({int(r["m_test"]) for r in rows})
    mat = np.full((len(tr), len(te)), np.nan)
    for r in rows:
        mat[tr.index(int(r["m_train"])), te.index(int(r["m_test"]))] = float(r["arr"])
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(mat, cmap="viridis", origin="lower")
    cells = 0
    for i in range(len(tr)):
        for j in range(len(te)):
            ax.text(j, i, f"{mat[i, j]:.2f}", ha="center", va="center", color="w", fontsize=9)
            cells += 1
    ax.set_xticks(range(len(te)), [str(v) for v in te])
    ax.set_yticks(range(len(tr)), [str(v) for v in tr])
    ax.set_xlabel("m_test")
    ax.set_ylabel("m_train")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    return _save(fig, png_path), cells


def plot_ablation(csv_path: Path, png_path: Path) -> Path:
    _, rows = read_csv(csv_path)
    _require(rows, "ablation", csv_path)
    fig, ax = plt.subplots(figsize=(6, 4))
    for kind in sorted({r["schedule_kind"] for r in rows}):
        sel = sorted((int(r["T"]), float(r["eval_reward"])) for r in rows if r["schedule_kind"] == kind)
        ax.plot([s[0] for s in sel], [s[1] for s in sel], marker="o", label=kind)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("diffusion steps T")
    ax.set_ylabel("final reward (bit/s/Hz)")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, png_path)


def emit_outputs(run_dir) -> list[Path]:
    """Render every chart whose CSV exists. Raises if the directory holds no chartable CSV."""
    run_dir = Path(run_dir)
    out: list[Path] = []
    for csv_path in sorted(run_dir.glob("reward_curve*.csv")):
        out.append(plot_reward_curve(csv_path, csv_path.with_suffix(".png")))
    labels = {"power": "transmit power (W)", "elements": "elements per RIS"}
    for axis, label in labels.items():
        p = run_dir / f"sweep_{axis}.csv"
        if p.exists():
            out.append(plot_sweep(p, p.with_suffix(".png"), label))
    if (run_dir / "arr.csv").exists():
        out.append(plot_arr(run_dir / "arr.csv", run_dir / "arr.png")[0])
    if (run_dir / "ablation.csv").exists():
        out.append(plot_ablation(run_dir / "ablation.csv", run_dir / "ablation.png"))
    if not out:
        raise FileNotFoundError(f"no chartable CSV in {run_dir}")
    return out
