"""Structured-text tables, training curves and their figures."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

OVERFIT_FLAG = "overfitting-suspect"
# a curve is flagged when its last TAIL points strictly decrease
TAIL = 3


class CurveError(ValueError):
    pass


@dataclass(frozen=True)
class Curve:
    points: tuple[tuple[int, float], ...]

    @property
    def steps(self) -> list[int]:
        return [s for s, _ in self.points]

    @property
    def values(self) -> list[float]:
        return [v for _, v in self.points]

    @property
    def overfitting_suspect(self) -> bool:
        tail = self.values[-TAIL:]
        return len(tail) == TAIL and all(a > b for a, b in zip(tail, tail[1:]))


def make_curve(snapshots) -> Curve:
    """Validate ``(step, J&F)`` snapshots; steps must be strictly increasing."""
    pts = tuple((int(s), float(v)) for s, v in snapshots)
    if len(pts) < 2:
        raise CurveError("a curve needs at least 2 snapshots")
    for (a, _), (b, _) in zip(pts, pts[1:]):
        if b == a:
            raise CurveError(f"duplicate step {a}")
        if b < a:
            raise CurveError(f"steps out of order: {a} then {b}")
    return Curve(pts)


def emit_curve(snapshots, path: str | Path, title: str = "validation J&F") -> Path:
    """Write ``step,J&F`` rows (no interpolation) plus a PNG next to it."""
    curve = make_curve(snapshots)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# {OVERFIT_FLAG if curve.overfitting_suspect else 'ok'}\n")
        w = csv.writer(fh)
        w.writerow(["step", "J&F"])
        for s, v in curve.points:
            w.writerow([s, f"{v:.6f}"])
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot(curve.steps, curve.values, marker="o")
    ax.set_xlabel("training step")
    ax.set_ylabel("J&F")
    ax.set_title(title + (f" ({OVERFIT_FLAG})" if curve.overfitting_suspect else ""))
    fig.tight_layout()
    fig.savefig(path.with_suffix(".png"), dpi=100)
    plt.close(fig)
    return path


def read_curve(path: str | Path) -> Curve:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    if not rows or rows[0] != ["step", "J&F"]:
        raise CurveError(f"{path}: not a curve file")
    return make_curve((int(s), float(v)) for s, v in rows[1:])


def curve_text(curve: Curve) -> str:
    lines = [f"{s}\t{v:.3f}" for s, v in curve.points]
    if curve.overfitting_suspect:
        lines.append(f"# {OVERFIT_FLAG}: the last {TAIL} snapshots decrease monotonically")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# tables


def format_table(rows: list[dict], columns: list[str]) -> str:
    """Tab-separated table; floats to 3 decimals."""

    def cell(v) -> str:
        return f"{v:.3f}" if isinstance(v, float) else str(v)

    out = ["\t".join(columns)]
    out += ["\t".join(cell(r[c]) for c in columns) for r in rows]
    return "\n".join(out) + "\n"


def write_table(rows: list[dict], columns: list[str], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_table(rows, columns))
    return path


def read_table(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    for r in rows:
        for k, v in r.items():
            try:
                r[k] = float(v)
            except ValueError:
                pass
    return rows


def bar_figure(labels: list[str], values: list[float], path: str | Path, ylabel: str = "J&F", errors: list[float] | None = None) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(labels)), 3.2))
    ax.bar(range(len(labels)), values, yerr=errors, capsize=3, color="tab:blue")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    lo = min(values) if values else 0.0
    ax.set_ylim(max(0.0, lo - 0.1), min(1.0, max(values, default=1.0) + 0.05))
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
