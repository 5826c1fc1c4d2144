"""Static SVG plots from the CSV outputs of ``propagate`` and ``verify``.

* ``kernel_depth.svg``: diagonal of the forward kernel per stage, one line per position.
* ``grad_width.svg``: mean ``|dL/dtheta|`` per group against width on log-log axes,
  each labelled with its least-squares slope.
* ``update_width.svg``: ``|df|/lr`` after one step against width, per optimizer run.

Plots are rendered with matplotlib's SVG backend with the creation date
stripped and a fixed id salt, so reruns give identical files.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

KERNEL_COLUMNS = ("block", "label", "pair1", "pair2", "G", "F", "G_se")
SCALING_COLUMNS = ("quantity", "modality", "group", "width", "estimate", "stderr")


class ReportError(ValueError):
    """A CSV file is missing, empty or malformed."""


def read_csv(path: Path, columns: tuple[str, ...]) -> list[dict[str, str]]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ReportError(f"cannot read {path}: {exc.strerror}") from None
    if not text.strip():
        raise ReportError(f"{path}: empty file")
    reader = csv.DictReader(io.StringIO(text))
    missing = [c for c in columns if c not in (reader.fieldnames or [])]
    if missing:
        raise ReportError(f"{path}: missing columns {missing}")
    rows = list(reader)
    if not rows:
        raise ReportError(f"{path}: header but no data rows")
    return rows


def _float(row: dict[str, str], key: str, path: Path, line: int) -> float:
    try:
        return float(row[key])
    except (TypeError, ValueError):
        raise ReportError(f"{path}: line {line}: column {key!r} is not a number ({row[key]!r})") from None


@dataclass(frozen=True)
class KernelDiagonals:
    labels: list[str]  # stage labels in order
    positions: list[int]
    values: np.ndarray  # (positions, stages)


def kernel_diagonals(path: Path) -> KernelDiagonals:
    rows = read_csv(path, KERNEL_COLUMNS)
    stages: dict[int, str] = {}
    diag: dict[tuple[int, int], float] = {}
    for i, r in enumerate(rows, start=2):
        try:
            b, p, q = int(r["block"]), int(r["pair1"]), int(r["pair2"])
        except ValueError:
            raise ReportError(f"{path}: line {i}: block/pair indices must be integers") from None
        stages[b] = r["label"]
        if p == q:
            diag[(b, p)] = _float(r, "G", path, i)
    blocks = sorted(stages)
    positions = sorted({p for _, p in diag})
    try:
        values = np.array([[diag[(b, p)] for b in blocks] for p in positions])
    except KeyError as exc:
        raise ReportError(f"{path}: stage/position {exc.args[0]} has no diagonal entry") from None
    return KernelDiagonals([stages[b] for b in blocks], positions, values)


@dataclass(frozen=True)
class Series:
    label: str
    widths: np.ndarray
    estimate: np.ndarray
    stderr: np.ndarray

    def slope(self) -> float:
        """Least-squares slope of ``log estimate`` against ``log width``."""
        ok = self.estimate > 0
        if ok.sum() < 2:
            return float("nan")
        return float(np.polyfit(np.log(self.widths[ok]), np.log(self.estimate[ok]), 1)[0])


def scaling_series(path: Path, quantity: str) -> list[Series]:
    rows = read_csv(path, SCALING_COLUMNS)
    acc: dict[str, list[tuple[int, float, float]]] = {}
    for i, r in enumerate(rows, start=2):
        if r["quantity"] != quantity:
            continue
        try:
            w = int(r["width"])
        except ValueError:
            raise ReportError(f"{path}: line {i}: width must be an integer") from None
        label = f"{r['modality']}:{r['group']}"
        acc.setdefault(label, []).append((w, _float(r, "estimate", path, i), _float(r, "stderr", path, i)))
    out = []
    for label in sorted(acc):
        pts = sorted(acc[label])
        a = np.array(pts, dtype=float)
        out.append(Series(label, a[:, 0], a[:, 1], a[:, 2]))
    return out


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "wideformer"
    plt.rcParams["svg.fonttype"] = "none"
    return plt


def _save(fig, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    fig.savefig(tmp, format="svg", metadata={"Date": None, "Creator": None})
    tmp.replace(path)


def plot_kernel_depth(k: KernelDiagonals, path: Path) -> int:
    """Write the kernel-vs-depth plot; returns the number of polylines."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.arange(len(k.labels))
    for p, row in zip(k.positions, k.values):
        ax.plot(x, row, marker="o", ms=3, lw=1, label=f"p={p}", gid=f"pair-{p}")
    ax.set_xticks(x, k.labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("G_pp")
    ax.set_title("kernel diagonal by stage")
    if len(k.positions) <= 12:
        ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)
    return len(k.positions)


def plot_width_scaling(series: list[Series], path: Path, ylabel: str, title: str, loglog: bool = True) -> dict[str, float]:
    """Write a width-scaling plot; returns each series' fitted log-log slope."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    slopes = {}
    for s in series:
        slope = s.slope()
        slopes[s.label] = slope
        ax.errorbar(s.widths, s.estimate, yerr=s.stderr, marker="o", ms=3, lw=1, capsize=2,
                    label=f"{s.label} (slope {slope:+.2f})", gid=f"series-{s.label}")
    if loglog:
        ax.set_xscale("log")
        ax.set_yscale("log")
    else:
        ax.set_xscale("log")
    ax.set_xlabel("width n")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)
    return slopes


def render_reports(src: Path, dst: Path) -> dict[str, object]:
    """Render whichever plots the CSVs in ``src`` allow.

    ``kernels.csv`` gives the depth plot; ``scaling.csv`` the two width
    plots.  At least one of the two must exist, and any file that exists
    must parse.
    """
    src, dst = Path(src), Path(dst)
    kernels, scaling = src / "kernels.csv", src / "scaling.csv"
    if not kernels.exists() and not scaling.exists():
        raise ReportError(f"{src}: neither kernels.csv nor scaling.csv found")
    dst.mkdir(parents=True, exist_ok=True)
    written: dict[str, object] = {}
    if kernels.exists():
        written["kernel_depth.svg"] = plot_kernel_depth(kernel_diagonals(kernels), dst / "kernel_depth.svg")
    if scaling.exists():
        grads = scaling_series(scaling, "grad")
        updates = scaling_series(scaling, "update")
        if not grads and not updates:
            raise ReportError(f"{scaling}: no 'grad' or 'update' rows")
        if grads:
            written["grad_width.svg"] = plot_width_scaling(grads, dst / "grad_width.svg", "mean |dL/dtheta|", "gradient magnitude vs width")
        if updates:
            written["update_width.svg"] = plot_width_scaling(updates, dst / "update_width.svg", "|df| / lr", "one-step update vs width", loglog=False)
    return written
