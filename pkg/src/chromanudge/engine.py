"""Color-guided inpainting loop with ROI-only latent nudging.

One call to :func:`run_guided_inpaint` samples a full trajectory:

1. CFG denoise and a DDIM step,
2. optional re-imposition of the noised background latent,
3. the guidance window check,
4. decode, ROI monitoring and the scheduled losses,
5. a clipped, normalized gradient step on the latent inside the ROI.

The gradient of the loss w.r.t. the latent is assembled by hand through the
fixed chain latent -> decode -> clamp -> color conversion -> loss, using the
analytic Jacobian of every stage.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np

from . import colorspace as cs
from . import losses
from .diffusion import (
    FlatColorPrior,
    LatentCodec,
    LatentState,
    NoiseSchedule,
    add_noise,
    analytic_denoiser,
    build_schedule,
    cfg_combine,
    resize_mask_nearest,
    scheduler_step,
)
from .losses import LossHyperparams, LossTerms
from .schedule import ScheduleContext, cvar_ramp_weight, guidance_window, lin_decay_weight

log = logging.getLogger(__name__)

MEAN_EPS = 1e-8
NORM_EPS = 1e-8


class EngineAbort(RuntimeError):
    """A latent went non-finite in a way the NaN repair could not absorb."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class Roi:
    """Axis-aligned rectangle in pixel coordinates (``x`` is the column)."""

    x: int
    y: int
    w: int
    h: int

    def within(self, height: int, width: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x + self.w <= width and self.y + self.h <= height


@dataclass(frozen=True)
class GuidanceConfig:
    """Everything that determines one guided run.

    ``lambda_lin`` is the per-term weight of the linear-RGB loss; the run
    summaries call it ``lambda_guidance``. ``gate_s`` is the late-start
    threshold of the perceptual gate and defaults to ``f_start``.
    ``snapshot_every = 0`` disables snapshots.
    """

    eta: float = 0.009
    lambda_master: float = 0.07
    lambda_lin: float = 100.0
    s_cfg: float = 8.0
    N: int = 80
    f_start: float = 0.2
    f_stop: float = 1.0
    k: float = 2.0
    gate_s: float | None = None
    enable_lin_rgb: bool = True
    enable_cvar: bool = True
    enable_bg_anchor: bool = True
    target_srgb: cs.ColorTriple = cs.ColorTriple(1.00, 0.53, 0.60, cs.Encoding.SRGB)
    bg_srgb: cs.ColorTriple = cs.ColorTriple(0.85, 0.88, 0.92, cs.Encoding.SRGB)
    height: int = 64
    width: int = 64
    roi: Roi = Roi(16, 16, 32, 32)
    seed: int = 0
    loss_hp: LossHyperparams = LossHyperparams()
    prior: FlatColorPrior = FlatColorPrior(
        mu_cond=cs.ColorTriple(0.60, 0.22, 0.45, cs.Encoding.LINEAR_RGB),
    )
    T_train: int = 1000
    beta_start: float = 8.5e-4
    beta_end: float = 0.012
    snapshot_every: int = 10
    resample_anchor_noise: bool = False
    mask_file: str | None = None

    def __post_init__(self) -> None:
        if not self.eta >= 0:
            raise ValueError(f"eta: must be >= 0, got {self.eta}")
        if self.N < 1:
            raise ValueError(f"N: must be >= 1, got {self.N}")
        if not 0.0 <= self.f_start <= self.f_stop <= 1.0:
            bad = "f_start" if not 0.0 <= self.f_start <= min(self.f_stop, 1.0) else "f_stop"
            raise ValueError(f"{bad}: need 0 <= f_start <= f_stop <= 1, got {self.f_start}, {self.f_stop}")
        for name in ("height", "width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name}: must be positive")
        if self.roi.w < 1 or self.roi.h < 1:
            raise ValueError(f"roi: degenerate rectangle {self.roi}")
        if not self.roi.within(self.height, self.width):
            raise ValueError(f"roi: {self.roi} lies outside the {self.height}x{self.width} canvas")
        if self.gate_s is not None and not 0.0 <= self.gate_s < 1.0:
            raise ValueError(f"gate_s: must lie in [0, 1), got {self.gate_s}")
        if self.k == 0:
            raise ValueError("k: ramp divisor must be nonzero")
        if self.snapshot_every < 0:
            raise ValueError("snapshot_every: must be >= 0")
        for name in ("target_srgb", "bg_srgb"):
            c = getattr(self, name)
            if c.encoding != cs.Encoding.SRGB:
                raise ValueError(f"{name}: must be an sRGB color")
            if not all(0.0 <= v <= 1.0 for v in c):
                raise ValueError(f"{name}: components must lie in [0, 1]")

    @property
    def guidance_on(self) -> bool:
        return self.enable_lin_rgb or self.enable_cvar

    def with_(self, **changes) -> "GuidanceConfig":
        return replace(self, **changes)

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.N, self.T_train, self.beta_start, self.beta_end)

    def schedule_context(self, sched: NoiseSchedule) -> ScheduleContext:
        s = self.f_start if self.gate_s is None else self.gate_s
        return ScheduleContext.from_timesteps(
            sched.timesteps, s=min(s, 1.0 - 1e-12), f_start=self.f_start, f_stop=self.f_stop, k=self.k
        )


@dataclass
class StepRecord:
    step_index: int
    timestep: int
    L_total: float = 0.0
    L_lin: float = 0.0
    L_cvar: float = 0.0
    grad_norm: float = 0.0
    gate: float = 0.0
    roi_mean_lab: cs.ColorTriple = cs.ColorTriple(0.0, 0.0, 0.0, cs.Encoding.LAB)
    roi_mean_srgb: cs.ColorTriple = cs.ColorTriple(0.0, 0.0, 0.0, cs.Encoding.SRGB)
    nudged: bool = False
    nan_repaired: bool = False
    terms: LossTerms = field(default_factory=LossTerms)


@dataclass
class RunLog:
    records: list[StepRecord] = field(default_factory=list)
    snapshots: list[tuple[int, cs.PixelImage]] = field(default_factory=list)
    runtime_seconds: float = 0.0
    final_roi_lab: cs.ColorTriple | None = None
    final_roi_srgb: cs.ColorTriple | None = None


@dataclass(frozen=True)
class Problem:
    """Quantities fixed for a whole run, derived once from the config."""

    sched: NoiseSchedule
    ctx: ScheduleContext
    codec: LatentCodec
    canvas: cs.PixelImage
    mask: np.ndarray
    mask_latent: np.ndarray
    z0: np.ndarray
    z_mask: np.ndarray
    target_lin: np.ndarray
    target_lab: np.ndarray


class GuidanceLoss(NamedTuple):
    L: float
    L_lin: float
    L_cvar: float
    terms: LossTerms
    gate: float
    grad: np.ndarray | None


class NudgeResult(NamedTuple):
    z: np.ndarray
    grad_norm: float
    nudged: bool
    nan_repaired: bool


# ---------------------------------------------------------------------------


def build_canvas(bg: cs.ColorTriple, roi: Roi, h: int, w: int) -> tuple[cs.PixelImage, np.ndarray]:
    """Flat background with a zeroed hole and the matching binary mask."""
    if roi.w < 1 or roi.h < 1:
        raise ValueError(f"degenerate roi {roi}")
    if not roi.within(h, w):
        raise ValueError(f"roi {roi} lies outside the {h}x{w} canvas")
    bg_arr = bg.as_array() if isinstance(bg, cs.ColorTriple) else np.asarray(bg, dtype=np.float64)
    img = np.broadcast_to(bg_arr, (h, w, 3)).copy()
    mask = np.zeros((h, w), dtype=bool)
    mask[roi.y : roi.y + roi.h, roi.x : roi.x + roi.w] = True
    img[mask] = 0.0
    return cs.PixelImage(img, cs.Encoding.SRGB), mask


def load_mask(path, height: int, width: int) -> np.ndarray:
    """Read a raster ROI mask; any pixel brighter than mid-gray is inside."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    if arr.shape != (height, width):
        raise ValueError(f"mask file {path} is {arr.shape[1]}x{arr.shape[0]}, canvas is {width}x{height}")
    mask = arr > 127
    if not mask.any():
        raise ValueError(f"mask file {path} selects no pixels")
    return mask


def prepare(cfg: GuidanceConfig, codec: LatentCodec | None = None) -> Problem:
    codec = codec or LatentCodec()
    sched = cfg.schedule()
    canvas, mask = build_canvas(cfg.bg_srgb, cfg.roi, cfg.height, cfg.width)
    if cfg.mask_file:
        mask = load_mask(cfg.mask_file, cfg.height, cfg.width)
        data = np.broadcast_to(cfg.bg_srgb.as_array(), (cfg.height, cfg.width, 3)).copy()
        data[mask] = 0.0
        canvas = cs.PixelImage(data, cs.Encoding.SRGB)
    z0 = codec.encode(canvas)
    mask_latent = resize_mask_nearest(mask, *z0.shape[:2]).astype(np.float64)[..., None]
    z_mask = codec.encode(canvas.data * (1.0 - mask[..., None]))
    return Problem(
        sched=sched,
        ctx=cfg.schedule_context(sched),
        codec=codec,
        canvas=canvas,
        mask=mask,
        mask_latent=mask_latent,
        z0=z0,
        z_mask=z_mask,
        target_lin=cfg.target_srgb.to(cs.Encoding.LINEAR_RGB).as_array(),
        target_lab=cfg.target_srgb.to(cs.Encoding.LAB).as_array(),
    )


def background_anchor(z, z0: np.ndarray, eps: np.ndarray, t: int, mask_latent: np.ndarray, sched: NoiseSchedule):
    """Overwrite the latent outside the ROI with the background noised to ``t``."""
    state = z if isinstance(z, LatentState) else None
    arr = state.z if state is not None else np.asarray(z)
    m = np.asarray(mask_latent, dtype=np.float64)
    if m.ndim == 2:
        m = m[..., None]
    z_bg = add_noise(z0, eps, t, sched)
    out = (1.0 - m) * z_bg + m * arr
    if state is not None:
        return LatentState(out, state.step_index, state.timestep)
    return out


def roi_means(x, mask, eps: float = MEAN_EPS) -> tuple[cs.ColorTriple, cs.ColorTriple]:
    """ROI mean color in Lab and sRGB, with ``eps`` added to the pixel count."""
    srgb = x.require(cs.Encoding.SRGB) if isinstance(x, cs.PixelImage) else np.asarray(x, dtype=np.float64)
    m = losses.as_mask(mask, srgb.shape[:2])
    n = int(m.sum())
    if n == 0:
        raise ValueError("roi_means needs a non-empty mask")
    lab = cs.srgb_to_lab_array(srgb)
    lab_mean = lab[m].sum(axis=0) / (n + eps)
    srgb_mean = srgb[m].sum(axis=0) / (n + eps)
    return (
        cs.ColorTriple.from_array(lab_mean, cs.Encoding.LAB),
        cs.ColorTriple.from_array(srgb_mean, cs.Encoding.SRGB),
    )


def compute_guidance_loss(
    z, i: int, t: int, cfg: GuidanceConfig, problem: Problem, with_grad: bool = True
) -> GuidanceLoss:
    """Scheduled guidance loss at step ``i`` and its gradient w.r.t. the latent.

    Callers only invoke this inside the guidance window with at least one
    loss enabled.
    """
    arr = z.z if isinstance(z, LatentState) else np.asarray(z, dtype=np.float64)
    x_raw = problem.codec.decode_raw(arr)
    x = cs.clamp_unit_array(x_raw)
    g_x = np.zeros_like(x)
    L_lin = L_cvar = 0.0
    terms = LossTerms()
    gate = 0.0

    if cfg.enable_lin_rgb:
        w = lin_decay_weight(i) * cfg.lambda_lin
        value, g_lin = losses.linear_rgb_enforcer_loss_and_grad(
            cs.srgb_to_linear_array(x), problem.mask, problem.target_lin
        )
        L_lin = w * value
        if with_grad:
            g_x += w * g_lin * cs.srgb_to_linear_derivative(x)

    if cfg.enable_cvar:
        w = cvar_ramp_weight(t, problem.ctx)
        value, terms, gate, g_tot = losses.total_loss_and_grad(
            x, t, problem.ctx, problem.target_lab, problem.mask, cfg.loss_hp
        )
        L_cvar = w * value
        if with_grad:
            g_x += w * g_tot

    L = cfg.lambda_master * (L_lin + L_cvar)
    grad = None
    if with_grad:
        grad = problem.codec.pullback(cfg.lambda_master * g_x * cs.clamp_unit_grad_mask(x_raw))
    return GuidanceLoss(L, L_lin, L_cvar, terms, gate, grad)


def nudge_latent(z, L: float, grad: np.ndarray, eta: float, mask_latent: np.ndarray, eps: float = NORM_EPS):
    """One ROI-restricted gradient step with clipping and L2 normalization.

    Every failure path (non-finite or non-positive loss, zero gradient)
    leaves the latent untouched. Non-finite entries produced by the update
    are zeroed and reported.
    """
    state = z if isinstance(z, LatentState) else None
    arr = np.asarray(state.z if state is not None else z, dtype=np.float64)

    def wrap(out, norm, nudged, repaired):
        if state is not None:
            out = LatentState(out, state.step_index, state.timestep)
        return NudgeResult(out, norm, nudged, repaired)

    if not math.isfinite(L) or L <= 0.0:
        return wrap(arr, 0.0, False, False)
    g = np.clip(grad, -1.0, 1.0)
    a = float(np.sqrt(np.sum(g * g)))
    if not a > 0.0:
        # also catches a NaN norm
        return wrap(arr, a if math.isfinite(a) else 0.0, False, False)
    m = np.asarray(mask_latent, dtype=np.float64)
    if m.ndim == 2:
        m = m[..., None]
    step = (eta / (a + eps)) * g * m
    out = arr - step
    # masked entries must stay bitwise identical
    out = np.where(m > 0, out, arr)
    bad = ~np.isfinite(out)
    repaired = bool(bad.any())
    if repaired:
        out = np.where(bad, 0.0, out)
    return wrap(out, a, True, repaired)


StepHook = Callable[[int, np.ndarray, np.ndarray], None]
Fault = Callable[[int, "GuidanceLoss"], "GuidanceLoss"]


def run_guided_inpaint(
    cfg: GuidanceConfig,
    codec: LatentCodec | None = None,
    on_nudge: StepHook | None = None,
    fault: Fault | None = None,
    latent_fault: Callable[[int, np.ndarray], np.ndarray] | None = None,
) -> tuple[cs.PixelImage, RunLog]:
    """Sample one guided trajectory and return the decoded image and its log.

    ``on_nudge(i, z_before, z_after)`` is called around every nudge step.
    ``fault`` may rewrite the computed loss and ``latent_fault`` the latent
    after the scheduler step; both exist for fault-injection tests.
    """
    started = time.perf_counter()
    problem = prepare(cfg, codec)
    sched, codec = problem.sched, problem.codec
    rng = np.random.default_rng(cfg.seed)
    eps = rng.standard_normal(problem.z0.shape)
    z = sched.init_noise_sigma * eps
    runlog = RunLog()

    for i, t in enumerate(sched.timesteps):
        eps_u = analytic_denoiser(z, t, False, cfg.prior, codec, sched)
        eps_c = analytic_denoiser(z, t, True, cfg.prior, codec, sched)
        z = scheduler_step(cfg_combine(eps_u, eps_c, cfg.s_cfg), t, z, sched)
        if latent_fault is not None:
            z = latent_fault(i, z)

        if cfg.enable_bg_anchor:
            anchor_eps = rng.standard_normal(z.shape) if cfg.resample_anchor_noise else eps
            z = background_anchor(z, problem.z0, anchor_eps, t, problem.mask_latent, sched)
        if not np.all(np.isfinite(z)):
            raise EngineAbort(i, "latent is non-finite after the scheduler step")

        x = codec.decode(z)
        lab_mean, srgb_mean = roi_means(x, problem.mask)
        rec = StepRecord(step_index=i, timestep=int(t), roi_mean_lab=lab_mean, roi_mean_srgb=srgb_mean)
        runlog.records.append(rec)

        if guidance_window(i, problem.ctx) and cfg.guidance_on:
            gl = compute_guidance_loss(z, i, t, cfg, problem)
            if fault is not None:
                gl = fault(i, gl)
            rec.gate, rec.terms = gl.gate, gl.terms
            if math.isfinite(gl.L) and gl.L > 0.0:
                rec.L_total, rec.L_lin, rec.L_cvar = gl.L, gl.L_lin, gl.L_cvar
                result = nudge_latent(z, gl.L, gl.grad, cfg.eta, problem.mask_latent)
                if on_nudge is not None:
                    on_nudge(i, z, result.z)
                z = result.z
                rec.grad_norm, rec.nudged, rec.nan_repaired = result.grad_norm, result.nudged, result.nan_repaired
            else:
                log.debug("step %d: skipping nudge, loss=%r", i, gl.L)

        if cfg.snapshot_every and (i % cfg.snapshot_every == 0 or i == sched.N - 1):
            runlog.snapshots.append((i, codec.decode(z)))

    if cfg.enable_bg_anchor:
        z = (1.0 - problem.mask_latent) * problem.z0 + problem.mask_latent * z
    if not np.all(np.isfinite(z)):
        raise EngineAbort(sched.N - 1, "final latent is non-finite")
    final = codec.decode(z)
    runlog.final_roi_lab, runlog.final_roi_srgb = roi_means(final, problem.mask)
    runlog.runtime_seconds = time.perf_counter() - started
    return final, runlog
