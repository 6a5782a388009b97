"""Render run artifacts: delimited tables plus matplotlib figures on disk."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .bench import BenchReport

_BENCH_COLUMNS = [
    "name", "fps", "speedup", "baseline", "psnr_mean", "ssim_mean",
    "action_accuracy", "absent", "fvd", "lpips",
]


def read_jsonl(path: str | Path) -> list[dict]:
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line:
            out.append(json.loads(line))
    return out


def reports_to_csv(reports: list[BenchReport | dict], out_csv: str | Path) -> Path:
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    rows = [r.as_dict() if isinstance(r, BenchReport) else r for r in reports]
    with open(out_csv, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_BENCH_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return out_csv


def render_text_table(reports: list[BenchReport | dict]) -> str:
    rows = [r.as_dict() if isinstance(r, BenchReport) else r for r in reports]
    headers = ["name", "fps", "speedup", "psnr", "ssim", "accuracy"]
    lines = ["  ".join(f"{h:>14}" for h in headers)]
    for r in rows:
        if r.get("absent"):
            lines.append(f"{r['name']:>14}  " + " (checkpoint absent)")
            continue
        def fmt(v, nd=3):
            return f"{v:.{nd}f}" if isinstance(v, (int, float)) and v is not None else "-"
        lines.append("  ".join(
            f"{v:>14}" for v in [
                r["name"], fmt(r.get("fps"), 2), fmt(r.get("speedup"), 2),
                fmt(r.get("psnr_mean"), 2), fmt(r.get("ssim_mean")), fmt(r.get("action_accuracy")),
            ]
        ))
    return "\n".join(lines)


def render_loss_curves(log_path: str | Path, out_png: str | Path) -> Path | None:
    records = read_jsonl(log_path)
    records = [r for r in records if "loss" in r or "loss_scm" in r]
    if not records:
        return None
    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    steps = [r["step"] for r in records]
    key = "loss" if "loss" in records[0] else "loss_scm"
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, [r[key] for r in records], lw=1.2, label=key)
    if "grad_norm" in records[0]:
        ax2 = ax.twinx()
        ax2.plot(steps, [r.get("grad_norm", 0.0) for r in records], lw=0.8, color="tab:orange", alpha=0.6)
        ax2.set_ylabel("grad norm", color="tab:orange")
    ax.set_xlabel("step")
    ax.set_ylabel(key)
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def render_bench_figures(reports: list[BenchReport | dict], out_dir: str | Path) -> list[Path]:
    rows = [r.as_dict() if isinstance(r, BenchReport) else r for r in reports]
    rows = [r for r in rows if not r.get("absent")]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    fps_rows = [r for r in rows if r.get("fps")]
    if fps_rows:
        fig, ax = plt.subplots(figsize=(7, 3.5))
        names = [r["name"] for r in fps_rows]
        ax.bar(range(len(fps_rows)), [r["fps"] for r in fps_rows], color="tab:blue")
        ax.set_xticks(range(len(fps_rows)), names, rotation=30, ha="right", fontsize=8)
        ax.set_ylabel("frames / s")
        fig.tight_layout()
        p = out_dir / "bench_fps.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        written.append(p)

    q_rows = [r for r in rows if r.get("action_accuracy") is not None]
    if q_rows:
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
        names = [r["name"] for r in q_rows]
        axes[0].bar(range(len(q_rows)), [r["action_accuracy"] for r in q_rows], color="tab:green")
        axes[0].set_ylabel("action accuracy")
        axes[1].bar(range(len(q_rows)), [r["psnr_mean"] for r in q_rows], color="tab:purple")
        axes[1].set_ylabel("PSNR (dB)")
        for ax in axes:
            ax.set_xticks(range(len(q_rows)), names, rotation=30, ha="right", fontsize=8)
        fig.tight_layout()
        p = out_dir / "bench_quality.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        written.append(p)
    return written


def write_report_bundle(run_dir: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Scan a run directory and emit CSV tables and figures next to it."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for log in sorted(run_dir.glob("*logs.jsonl")):
        fig = render_loss_curves(log, out_dir / f"{log.stem.replace('.jsonl', '')}_curve.png")
        if fig:
            written.append(fig)
    bench_path = run_dir / "bench.jsonl"
    if bench_path.exists():
        reports = read_jsonl(bench_path)
        written.append(reports_to_csv(reports, out_dir / "bench.csv"))
        written.extend(render_bench_figures(reports, out_dir))
        (out_dir / "bench.txt").write_text(render_text_table(reports) + "\n")
        written.append(out_dir / "bench.txt")
    return written
