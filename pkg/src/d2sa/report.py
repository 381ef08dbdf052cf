"""Render a finished run: grayscale dumps, a comparison figure and summary tables."""

from __future__ import annotations

import csv
import re
from pathlib import Path

import numpy as np

from .io import load_tensor, write_pgm
from .pipeline import REPORT_COLUMNS

__all__ = ["to_uint8", "residual_to_uint8", "load_run", "render_report", "SUMMARY_COLUMNS"]

SUMMARY_COLUMNS = ("scenario", "method", "median_psnr_db", "median_ssim", "seconds")


def to_uint8(img: np.ndarray, vmax: float | None = None) -> np.ndarray:
    """Map [0, vmax] linearly onto 0..255 (vmax defaults to the image maximum)."""
    img = np.asarray(img, dtype=np.float64)
    vmax = float(img.max()) if vmax is None else float(vmax)
    if vmax <= 0:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.clip(np.rint(img / vmax * 255), 0, 255).astype(np.uint8)


def residual_to_uint8(resid: np.ndarray, limit: float) -> np.ndarray:
    """Signed residual onto 0..255: zero lands on 127, +-limit on the ends."""
    if limit <= 0:
        return np.full(np.shape(resid), 128, dtype=np.uint8)
    scaled = 127.5 + 127.5 * np.clip(np.asarray(resid) / limit, -1, 1)
    return np.clip(np.floor(scaled), 0, 255).astype(np.uint8)


def load_run(run_dir) -> tuple[np.ndarray, dict[str, np.ndarray], list[dict]]:
    run_dir = Path(run_dir)
    ref = np.abs(load_tensor(run_dir / "reference.d2t"))
    recons = {}
    for path in sorted(run_dir.glob("recon_*.d2t")):
        recons[path.stem[len("recon_") :]] = np.abs(load_tensor(path))
    with open(run_dir / "report.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not recons:
        raise FileNotFoundError(f"no recon_*.d2t files in {run_dir}")
    return ref, recons, rows


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name)


def _figure(path: Path, ref: np.ndarray, recons: dict[str, np.ndarray], slice_index: int, limit: float) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(recons)
    fig, axes = plt.subplots(2, len(names) + 1, figsize=(2.2 * (len(names) + 1), 4.6), squeeze=False)
    vmax = ref[slice_index].max()
    axes[0, 0].imshow(ref[slice_index], cmap="gray", vmin=0, vmax=vmax)
    axes[0, 0].set_title("reference", fontsize=8)
    axes[1, 0].axis("off")
    for j, name in enumerate(names, start=1):
        img = recons[name][slice_index]
        axes[0, j].imshow(img, cmap="gray", vmin=0, vmax=vmax)
        axes[0, j].set_title(name, fontsize=8)
        axes[1, j].imshow(img - ref[slice_index], cmap="coolwarm", vmin=-limit, vmax=limit)
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_report(run_dir, out_dir, figure: bool = True) -> list[Path]:
    """Write magnitude and residual PGMs per (method, slice), a summary CSV and a PNG panel."""
    ref, recons, rows = load_run(run_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vmax = ref.max()
    limit = 0.25 * vmax
    written = []
    for i in range(ref.shape[0]):
        written.append(write_pgm(out / f"reference_s{i:02d}.pgm", to_uint8(ref[i], vmax)))
    for name, imgs in recons.items():
        for i, img in enumerate(imgs):
            written.append(write_pgm(out / f"{_safe(name)}_s{i:02d}_mag.pgm", to_uint8(img, vmax)))
            written.append(write_pgm(out / f"{_safe(name)}_s{i:02d}_resid.pgm", residual_to_uint8(img - ref[i], limit)))

    per_slice = out / "per_slice.csv"
    with open(per_slice, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        writer.writerows(r for r in rows if r["slice"] != "summary")
    summary = out / "summary.csv"
    with open(summary, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        for r in rows:
            if r["slice"] == "summary":
                writer.writerow(
                    {"scenario": r["scenario"], "method": r["method"], "median_psnr_db": r["psnr_db"],
                     "median_ssim": r["ssim"], "seconds": r["seconds"]}
                )
    written += [per_slice, summary]
    if figure:
        png = out / "comparison.png"
        _figure(png, ref, recons, ref.shape[0] // 2, limit)
        written.append(png)
    return written
