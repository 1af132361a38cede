"""Evaluation of a finished run: pixelwise color error, threshold
satisfaction, heatmaps and the on-disk run summary.

All color differences here are the Euclidean Lab distance, labelled
"dE (Taylor)" in every output so it is never mistaken for full CIEDE2000.
"""

from __future__ import annotations

import csv
import io
import math
import platform
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from . import colorspace as cs
from .engine import GuidanceConfig, RunLog, StepRecord
from .losses import as_mask, delta_e00_taylor, delta_e_taylor_array

DEFAULT_THRESHOLDS = (2.0, 5.0, 10.0, 20.0, 50.0)
DE_LABEL = "dE (Taylor)"

LOG_COLUMNS = (
    "step",
    "timestep",
    "L_total",
    "L_lin",
    "L_cvar",
    "grad_norm",
    "gate",
    "roi_L",
    "roi_a",
    "roi_b",
    "roi_r",
    "roi_g",
    "roi_b2",
    "nudged",
    "nan_repaired",
)

OUTSIDE_ROI = (128, 128, 128)
SATISFIED = (40, 170, 70)
UNSATISFIED = (200, 50, 50)


@dataclass(frozen=True)
class DeltaEStats:
    min: float
    max: float
    mean: float
    std: float
    median: float
    count: int = 0


@dataclass(frozen=True)
class ThresholdReport:
    thresholds: tuple[float, ...]
    fraction_satisfied: tuple[float, ...]
    maps: tuple[np.ndarray, ...] = field(default=(), compare=False, repr=False)


def _roi_delta_e(final, target, mask) -> tuple[np.ndarray, np.ndarray]:
    srgb = final.require(cs.Encoding.SRGB) if isinstance(final, cs.PixelImage) else np.asarray(final, dtype=np.float64)
    m = as_mask(mask, srgb.shape[:2])
    target_lab = _target_lab(target)
    de = delta_e_taylor_array(cs.srgb_to_lab_array(srgb), target_lab)
    return de, m


def _target_lab(target) -> np.ndarray:
    if isinstance(target, cs.ColorTriple):
        return target.to(cs.Encoding.LAB).as_array()
    return cs.srgb_to_lab_array(np.asarray(target, dtype=np.float64).reshape(1, 1, 3))[0, 0]


def lower_median(values: np.ndarray) -> float:
    """Median that picks the lower middle element for even counts."""
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    return float(ordered[(ordered.size - 1) // 2])


def roi_delta_e_stats(final, target, mask) -> DeltaEStats:
    """Min, max, mean, population std and lower median of ROI pixel errors."""
    de, m = _roi_delta_e(final, target, mask)
    values = de[m]
    if values.size == 0:
        raise ValueError("roi_delta_e_stats needs a non-empty mask")
    mean = float(values.mean())
    return DeltaEStats(
        min=float(values.min()),
        max=float(values.max()),
        mean=mean,
        std=float(np.sqrt(np.mean((values - mean) ** 2))),
        median=lower_median(values),
        count=int(values.size),
    )


def roi_percentile(final, target, mask, q: float) -> float:
    de, m = _roi_delta_e(final, target, mask)
    return float(np.percentile(de[m], q))


def threshold_satisfaction(final, target, mask, thresholds=DEFAULT_THRESHOLDS) -> ThresholdReport:
    """Fraction of ROI pixels with error strictly below each threshold."""
    thresholds = tuple(float(t) for t in thresholds)
    if list(thresholds) != sorted(thresholds):
        raise ValueError("thresholds must be sorted ascending")
    de, m = _roi_delta_e(final, target, mask)
    n = int(m.sum())
    fractions, maps = [], []
    for t in thresholds:
        ok = (de < t) & m
        maps.append(ok)
        fractions.append(float(ok.sum()) / n if n else 0.0)
    return ThresholdReport(thresholds, tuple(fractions), tuple(maps))


# ---------------------------------------------------------------------------
# rendering


def _load_ramp(name: str) -> np.ndarray:
    text = resources.files("chromanudge").joinpath("data").joinpath(name).read_text()
    rows = list(csv.reader(io.StringIO(text)))[1:]
    table = np.array([[int(v) for v in row] for row in rows], dtype=np.uint8)
    if table.shape != (256, 3):
        raise ValueError(f"ramp {name} must have 256 RGB rows, got {table.shape}")
    return table


SEQUENTIAL_RAMP = _load_ramp("ramp_sequential.csv")
DIVERGING_RAMP = _load_ramp("ramp_diverging.csv")


def sequential_index(values: np.ndarray, vmax: float) -> np.ndarray:
    """Map ``[0, vmax]`` onto ramp indices 0..255 (monotone, clipped)."""
    if vmax <= 0:
        return np.zeros(np.shape(values), dtype=np.intp)
    return np.clip(np.floor(np.asarray(values) / vmax * 255.0 + 0.5), 0, 255).astype(np.intp)


def diverging_index(values: np.ndarray, vmax: float) -> np.ndarray:
    """Map ``[-vmax, vmax]`` onto 0..255; zero lands on the upper middle entry."""
    if vmax <= 0:
        return np.full(np.shape(values), 128, dtype=np.intp)
    return np.clip(np.floor(127.5 + np.asarray(values) / vmax * 127.5 + 0.5), 0, 255).astype(np.intp)


def _raster(indices: np.ndarray, ramp: np.ndarray, m: np.ndarray) -> cs.PixelImage:
    rgb = ramp[indices].astype(np.float64)
    rgb[~m] = OUTSIDE_ROI
    return cs.PixelImage(rgb / 255.0, cs.Encoding.SRGB)


def render_heatmap(final, target, mask) -> dict[str, cs.PixelImage]:
    """Error heatmap and signed dL/da/db maps, ROI only (gray outside).

    The error map is auto-scaled to ``[0, max]`` over the ROI; each signed
    map to ``[-max|d|, +max|d|]`` so zero sits at the ramp centre.
    """
    srgb = final.require(cs.Encoding.SRGB) if isinstance(final, cs.PixelImage) else np.asarray(final, dtype=np.float64)
    m = as_mask(mask, srgb.shape[:2])
    diff = cs.srgb_to_lab_array(srgb) - _target_lab(target)
    de = np.sqrt((diff * diff).sum(axis=-1))
    vmax = float(de[m].max()) if m.any() else 0.0
    out = {"de": _raster(sequential_index(de, vmax), SEQUENTIAL_RAMP, m)}
    for c, name in enumerate(("dL", "da", "db")):
        d = diff[..., c]
        span = float(np.abs(d[m]).max()) if m.any() else 0.0
        out[name] = _raster(diverging_index(d, span), DIVERGING_RAMP, m)
    return out


def render_thresholds(report: ThresholdReport, mask, gap: int = 2) -> cs.PixelImage:
    """Side-by-side satisfaction maps, one panel per threshold."""
    m = as_mask(mask)
    h, w = m.shape
    panels = []
    for sat in report.maps:
        rgb = np.empty((h, w, 3), dtype=np.float64)
        rgb[:] = OUTSIDE_ROI
        rgb[m & sat] = SATISFIED
        rgb[m & ~sat] = UNSATISFIED
        panels.append(rgb)
        panels.append(np.full((h, gap, 3), 255.0))
    strip = np.concatenate(panels[:-1], axis=1) if panels else np.full((h, 1, 3), 255.0)
    return cs.PixelImage(strip / 255.0, cs.Encoding.SRGB)


def to_uint8(img) -> np.ndarray:
    data = img.require(cs.Encoding.SRGB) if isinstance(img, cs.PixelImage) else np.asarray(img, dtype=np.float64)
    return np.floor(np.clip(data, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(img, path) -> Path:
    """8-bit RGB PNG with an sRGB chunk; identical input gives identical bytes."""
    path = Path(path)
    info = PngInfo()
    info.add(b"sRGB", b"\x00")
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG", pnginfo=info, optimize=False, compress_level=6)
    return path


# ---------------------------------------------------------------------------
# run summary


def host_descriptor() -> str:
    import os

    return f"{platform.system()}-{platform.machine()} / Python {platform.python_version()} / {os.cpu_count()} CPUs"


def _fmt(v: float, digits: int = 2) -> str:
    return f"{v:.{digits}f}"


def _triple(c, digits: int = 2) -> str:
    return ", ".join(_fmt(v, digits) for v in c)


def summary_text(log: RunLog, stats: DeltaEStats, report: ThresholdReport, cfg: GuidanceConfig, device: str | None = None) -> str:
    device = device or host_descriptor()
    i_start = math.floor(cfg.f_start * cfg.N)
    i_stop = math.floor(cfg.f_stop * cfg.N)
    target_lab = cfg.target_srgb.to(cs.Encoding.LAB)
    final_lab = log.final_roi_lab or (log.records[-1].roi_mean_lab if log.records else None)
    final_srgb = log.final_roi_srgb or (log.records[-1].roi_mean_srgb if log.records else None)
    lines = [
        "[run]",
        f"device = {device}",
        f"steps = {cfg.N}",
        f"enforcer_active = {cfg.f_start * 100:g}%--{cfg.f_stop * 100:g}%",
        f"window = [{i_start}, {i_stop})",
        f"seed = {cfg.seed}",
        f"parameters.eta = {cfg.eta:g}",
        f"parameters.lambda_guidance = {cfg.lambda_lin:g}",
        f"parameters.lambda_master = {cfg.lambda_master:g}",
        f"parameters.s_cfg = {cfg.s_cfg:g}",
        f"parameters.k = {cfg.k:g}",
        f"toggles.LinearRGB = {cfg.enable_lin_rgb}",
        f"toggles.Angad = {cfg.enable_cvar}",
        f"toggles.BgAnchor = {cfg.enable_bg_anchor}",
        "",
        "[color]",
        f"target.lab = {_triple(target_lab)}",
        f"target.srgb = [{_triple(cfg.target_srgb)}]",
    ]
    if final_lab is not None:
        lines += [
            f"final.lab = {_triple(final_lab)}",
            f"final.srgb = [{_triple(final_srgb)}]",
            f"error.roi_mean_color = {_fmt(delta_e00_taylor(final_lab, target_lab))}  # {DE_LABEL} of the ROI mean color",
        ]
    lines += [
        f"error.pixel_mean = {_fmt(stats.mean)}  # {DE_LABEL}, mean over ROI pixels",
        "",
        f"[pixelwise]  # {DE_LABEL}",
        f"min = {_fmt(stats.min)}",
        f"max = {_fmt(stats.max)}",
        f"mean = {_fmt(stats.mean)}",
        f"std = {_fmt(stats.std)}",
        f"median = {_fmt(stats.median)}",
        f"pixels = {stats.count}",
        "",
        f"[thresholds]  # fraction of ROI pixels with {DE_LABEL} < T",
    ]
    for t, frac in zip(report.thresholds, report.fraction_satisfied):
        lines.append(f"T{t:g} = {frac:.6f}")
    return "\n".join(lines) + "\n"


def _row(rec: StepRecord) -> list[str]:
    g = lambda v: f"{v:.9g}"  # noqa: E731
    return [
        str(rec.step_index),
        str(rec.timestep),
        g(rec.L_total),
        g(rec.L_lin),
        g(rec.L_cvar),
        g(rec.grad_norm),
        g(rec.gate),
        *(g(v) for v in rec.roi_mean_lab),
        *(g(v) for v in rec.roi_mean_srgb),
        str(int(rec.nudged)),
        str(int(rec.nan_repaired)),
    ]


def write_log_csv(log: RunLog, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for rec in log.records:
            writer.writerow(_row(rec))
    return path


def read_log_csv(path) -> list[StepRecord]:
    records = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != LOG_COLUMNS:
            raise ValueError(f"unexpected log header {reader.fieldnames}")
        for row in reader:
            f = {k: float(v) for k, v in row.items() if k not in ("step", "timestep", "nudged", "nan_repaired")}
            records.append(
                StepRecord(
                    step_index=int(row["step"]),
                    timestep=int(row["timestep"]),
                    L_total=f["L_total"],
                    L_lin=f["L_lin"],
                    L_cvar=f["L_cvar"],
                    grad_norm=f["grad_norm"],
                    gate=f["gate"],
                    roi_mean_lab=cs.ColorTriple(f["roi_L"], f["roi_a"], f["roi_b"], cs.Encoding.LAB),
                    roi_mean_srgb=cs.ColorTriple(f["roi_r"], f["roi_g"], f["roi_b2"], cs.Encoding.SRGB),
                    nudged=row["nudged"] == "1",
                    nan_repaired=row["nan_repaired"] == "1",
                )
            )
    return records


def write_run_summary(
    log: RunLog,
    stats: DeltaEStats,
    report: ThresholdReport,
    cfg: GuidanceConfig,
    path,
    device: str | None = None,
) -> tuple[Path, Path]:
    """Write ``summary.txt`` and ``log.csv`` into the directory ``path``.

    Wall-clock runtime is kept out of both files so reruns are byte-identical;
    callers that want it write it separately.
    """
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        summary = out / "summary.txt"
        summary.write_text(summary_text(log, stats, report, cfg, device), encoding="utf-8")
        table = write_log_csv(log, out / "log.csv")
    except OSError as exc:
        raise OSError(f"cannot write run summary to {out}: {exc}") from exc
    return summary, table
