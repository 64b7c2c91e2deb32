"""Static figures for an eval run (PNG via the Agg backend)."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _load_artifacts(run_dir: Path) -> dict:
    path = run_dir / "artifacts.npz"
    if not path.is_file():
        return {}
    with np.load(path) as z:
        return {k.replace("__", "/"): z[k] for k in z.files}


def plot_medians(report: dict, path: Path):
    names = list(report["methods"])
    lat = [report["methods"][n]["lateral"]["p50"] for n in names]
    lon = [report["methods"][n]["longitudinal"]["p50"] for n in names]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 3, 4))
    ax.bar(x - 0.2, lat, 0.4, label="lateral")
    ax.bar(x + 0.2, lon, 0.4, label="longitudinal")
    ax.set_xticks(x, names, rotation=30, ha="right")
    ax.set_yscale("log")
    ax.set_ylabel("median error [m]")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_trajectory(art: dict, path: Path):
    truth = art["truth_xy"]
    fig, (a0, a1) = plt.subplots(1, 2, figsize=(12, 4.5))
    a0.plot(truth[:, 0], truth[:, 1], "k-", lw=2, label="truth")
    for key, xy in art.items():
        if key.startswith("est_xy/"):
            a0.plot(xy[:, 0], xy[:, 1], lw=0.8, label=key.split("/", 1)[1])
    a0.set_aspect("equal")
    a0.set_title("first snippet")
    a0.legend(fontsize=7)
    for key, v in art.items():
        if key.startswith("lon_signed/"):
            a1.plot(v, lw=0.8, label=key.split("/", 1)[1])
    a1.set_xlabel("frame after burn-in")
    a1.set_ylabel("signed longitudinal error [m]")
    a1.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_beliefs(art: dict, path: Path) -> bool:
    keys = [k for k in art if k.startswith("belief/")]
    if not keys:
        return False
    fig, axes = plt.subplots(len(keys), 1, figsize=(10, 1.6 * len(keys) + 0.5), squeeze=False)
    for ax, key in zip(axes[:, 0], keys):
        b = art[key]
        ax.imshow(b, origin="lower", aspect="auto", cmap="magma")
        ax.set_title(f"{key.split('/', 1)[1]}: belief max over heading", fontsize=9)
        ax.set_ylabel("lat cell")
    axes[-1, 0].set_xlabel("lon cell")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def plot_run(report_path, out_dir=None) -> list[Path]:
    report_path = Path(report_path)
    report = json.loads(report_path.read_text())
    run_dir = report_path.parent
    out = Path(out_dir) if out_dir else run_dir
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "medians.png"]
    plot_medians(report, written[0])
    art = _load_artifacts(run_dir)
    if "truth_xy" in art:
        written.append(out / "trajectory.png")
        plot_trajectory(art, written[-1])
        if plot_beliefs(art, out / "beliefs.png"):
            written.append(out / "beliefs.png")
    return written
