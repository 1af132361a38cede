"""ROI color losses and their analytic image gradients.

Images are ``H x W x 3`` arrays (or :class:`~chromanudge.colorspace.PixelImage`
with the matching encoding) and masks are ``H x W`` arrays of zeros and
ones. Every loss has a ``*_and_grad`` twin returning ``(value, grad)``
where ``grad`` has the image's shape and is exactly zero outside the ROI.

Reductions over the ROI always visit pixels in row-major order, so repeated
calls on the same input are bit-identical.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields

import numpy as np

from . import colorspace as cs
from .schedule import ScheduleContext, gate_at

log = logging.getLogger(__name__)

TERM_NAMES = ("mean", "pix", "tail", "max", "var")


@dataclass(frozen=True)
class LossHyperparams:
    """Weights and tolerances of the composite ROI loss.

    Tolerances are in Lab units. ``w_L`` and ``w_ab`` weight luminance and
    chroma in the early-sampling surrogate distance; ``alpha`` is the CVaR
    level, ``beta`` the log-sum-exp sharpness and ``p`` the hinge exponent.
    ``delta`` is the stabilizer under the square root of the Lab-mean loss.
    """

    w_L: float = 0.5
    w_ab: float = 1.0
    tau_mean: float = 1.0
    tau_pix: float = 2.0
    tau_tail: float = 5.0
    tau_max: float = 10.0
    tau_var: float = 4.0
    alpha: float = 0.9
    beta: float = 0.5
    p: float = 2.0
    eps: float = 1e-6
    delta: float = 1e-8
    lambda_mean: float = 1.0
    lambda_pix: float = 1.0
    lambda_tail: float = 2.0
    lambda_max: float = 0.5
    lambda_var: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.beta > 0.0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not self.p >= 1.0:
            raise ValueError(f"hinge exponent p must be >= 1, got {self.p}")
        if not self.eps > 0.0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.delta < 0.0:
            raise ValueError(f"delta must be non-negative, got {self.delta}")
        for f in fields(self):
            if f.name.startswith(("w_", "lambda_", "tau_")) and getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")
        if self.w_L <= 0 or self.w_ab <= 0:
            raise ValueError("surrogate channel weights must be positive")

    @property
    def lambdas(self) -> tuple[float, ...]:
        return tuple(getattr(self, f"lambda_{n}") for n in TERM_NAMES)


@dataclass(frozen=True)
class DistanceField:
    """Per-pixel error magnitude ``u`` and the gate it was built with.

    ``channel_weights`` are the effective per-channel weights of the gated
    squared distance; ``diff`` is the Lab difference from the target. Both
    are kept so the field can be differentiated without recomputation.
    """

    u: np.ndarray
    gate_used: float
    diff: np.ndarray | None = None
    channel_weights: np.ndarray | None = None

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    def grad_to_lab(self, d_u: np.ndarray) -> np.ndarray:
        """Pull a gradient with respect to ``u`` back to the Lab image."""
        return (d_u / self.u)[..., None] * self.channel_weights * self.diff


@dataclass(frozen=True)
class LossTerms:
    l_mean: float = 0.0
    l_pix: float = 0.0
    l_tail: float = 0.0
    l_max: float = 0.0
    l_var: float = 0.0

    def as_tuple(self) -> tuple[float, ...]:
        return (self.l_mean, self.l_pix, self.l_tail, self.l_max, self.l_var)

    def weighted_sum(self, hp: LossHyperparams) -> float:
        total = 0.0
        for lam, term in zip(hp.lambdas, self.as_tuple()):
            total += lam * term
        return total


# ---------------------------------------------------------------------------
# input plumbing


def _pixels(img, encoding: cs.Encoding) -> np.ndarray:
    if isinstance(img, cs.PixelImage):
        return img.require(encoding)
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {arr.shape}")
    return arr


def _target(target, encoding: cs.Encoding) -> np.ndarray:
    if isinstance(target, cs.ColorTriple):
        if target.encoding != encoding:
            raise cs.EncodingError(f"expected {encoding.value} target, got {target.encoding.value}")
        return target.as_array()
    return np.asarray(target, dtype=np.float64).reshape(3)


def as_mask(mask, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Validate a binary ROI mask and return it as a boolean array."""
    m = np.asarray(mask)
    if m.ndim == 3 and m.shape[0] == 1:
        m = m[0]
    if m.ndim != 2:
        raise ValueError(f"mask must be H x W, got shape {m.shape}")
    if shape is not None and m.shape != tuple(shape):
        raise ValueError(f"mask shape {m.shape} does not match image shape {tuple(shape)}")
    if m.dtype != bool and not np.all((m == 0) | (m == 1)):
        raise ValueError("mask must be binary")
    return m.astype(bool)


def _field(u) -> np.ndarray:
    return u.u if isinstance(u, DistanceField) else np.asarray(u, dtype=np.float64)


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what}: image contains non-finite values")


# ---------------------------------------------------------------------------
# scalar pieces


def hinge(r, p: float):
    """``max(0, r) ** p``; works elementwise on arrays."""
    if p < 1:
        raise ValueError(f"hinge exponent must be >= 1, got {p}")
    out = np.maximum(r, 0.0) ** p
    return float(out) if np.ndim(out) == 0 else out


def hinge_grad(r, p: float):
    """Derivative of :func:`hinge`; zero for ``r <= 0``."""
    r = np.asarray(r, dtype=np.float64)
    pos = r > 0.0
    out = np.where(pos, p * np.maximum(r, 0.0) ** (p - 1.0), 0.0)
    return float(out) if out.ndim == 0 else out


def tail_count(n: int, alpha: float) -> int:
    """Number of pixels in the top ``(1 - alpha)`` tail, at least one.

    A 1e-9 slack absorbs representation error in ``1 - alpha`` so that,
    say, alpha = 0.7 over 10 pixels gives 3 rather than 4.
    """
    return max(1, math.ceil((1.0 - alpha) * n - 1e-9))


# ---------------------------------------------------------------------------
# mean-color baselines


def linear_rgb_enforcer_loss_and_grad(img, mask, target) -> tuple[float, np.ndarray]:
    x = _pixels(img, cs.Encoding.LINEAR_RGB)
    m = as_mask(mask, x.shape[:2])
    c = _target(target, cs.Encoding.LINEAR_RGB)
    valid = m & np.all(np.isfinite(x), axis=-1)
    grad = np.zeros_like(x)
    n = int(valid.sum())
    if n == 0:
        return 0.0, grad
    mu = x[valid].sum(axis=0) / n
    d = mu - c
    grad[valid] = 2.0 * d / n
    return float(d @ d), grad


def linear_rgb_enforcer_loss(img, mask, target) -> float:
    """Squared distance between the ROI's mean linear-RGB color and the target.

    Non-finite pixels are dropped from the ROI; an empty ROI gives 0.
    """
    return linear_rgb_enforcer_loss_and_grad(img, mask, target)[0]


def lab_euclidean_loss_and_grad(
    img, mask, target, delta: float = 1e-8, mean_eps: float = 0.0
) -> tuple[float, np.ndarray]:
    lab = _pixels(img, cs.Encoding.LAB)
    m = as_mask(mask, lab.shape[:2])
    c = _target(target, cs.Encoding.LAB)
    _require_finite(lab, "lab_euclidean_loss")
    grad = np.zeros_like(lab)
    n = int(m.sum())
    if n == 0:
        return 0.0, grad
    mu = lab[m].sum(axis=0) / (n + mean_eps)
    d = mu - c
    dist = math.sqrt(float(d @ d) + delta)
    if dist > 0.0:
        grad[m] = d / (dist * (n + mean_eps))
    return dist, grad


def lab_euclidean_loss(img, mask, target, delta: float = 1e-8, mean_eps: float = 0.0) -> float:
    """Euclidean distance between the ROI's mean Lab color and the target.

    ``delta`` sits under the square root so the gradient stays finite at
    the minimum, which means a perfect match scores ``sqrt(delta)``.
    ``mean_eps`` is an optional guard added to the pixel count.
    """
    return lab_euclidean_loss_and_grad(img, mask, target, delta, mean_eps)[0]


# ---------------------------------------------------------------------------
# distribution-aware composite


def distance_field(img, target, gate: float, hp: LossHyperparams = LossHyperparams()) -> DistanceField:
    """Gate-interpolated per-pixel distance from the target color.

    At ``gate = 0`` luminance and chroma are weighted by ``w_L`` / ``w_ab``;
    at ``gate = 1`` the plain squared Lab distance is used. Because the
    interpolation is linear in the gate, it folds into per-channel weights.
    """
    if not 0.0 <= gate <= 1.0:
        raise ValueError(f"gate must lie in [0, 1], got {gate}")
    lab = _pixels(img, cs.Encoding.LAB)
    c = _target(target, cs.Encoding.LAB)
    diff = lab - c
    sq = diff * diff
    q_safe = hp.w_L * sq[..., 0] + hp.w_ab * (sq[..., 1] + sq[..., 2])
    q_00 = sq[..., 0] + sq[..., 1] + sq[..., 2]
    q_t = (1.0 - gate) * q_safe + gate * q_00
    u = np.sqrt(q_t + hp.eps)
    weights = np.array(
        [
            (1.0 - gate) * hp.w_L + gate,
            (1.0 - gate) * hp.w_ab + gate,
            (1.0 - gate) * hp.w_ab + gate,
        ]
    )
    return DistanceField(u=u, gate_used=float(gate), diff=diff, channel_weights=weights)


def cvar_and_grad(u, mask, alpha: float) -> tuple[float, np.ndarray]:
    field_ = _field(u)
    m = as_mask(mask, field_.shape)
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    n = int(m.sum())
    if n == 0:
        raise ValueError("CVaR is undefined on an empty ROI")
    flat_idx = np.flatnonzero(m)
    values = field_.ravel()[flat_idx]
    k = tail_count(n, alpha)
    # stable sort on the negated values: ties keep the lower pixel index first
    chosen = np.argsort(-values, kind="stable")[:k]
    value = math.fsum(values[chosen].tolist()) / k
    grad = np.zeros(field_.size)
    grad[flat_idx[chosen]] = 1.0 / k
    return value, grad.reshape(field_.shape)


def cvar(u, mask, alpha: float) -> float:
    """Mean of the ``k = ceil((1 - alpha) |ROI|)`` largest ROI values."""
    return cvar_and_grad(u, mask, alpha)[0]


def soft_max_lse_and_grad(u, mask, beta: float) -> tuple[float, np.ndarray]:
    field_ = _field(u)
    m = as_mask(mask, field_.shape)
    if not beta > 0.0:
        raise ValueError(f"beta must be positive, got {beta}")
    if not m.any():
        raise ValueError("soft maximum is undefined on an empty ROI")
    values = field_[m]
    top = values.max()
    w = np.exp(beta * (values - top))
    total = w.sum()
    value = float(top + math.log(total / values.size) / beta)
    grad = np.zeros_like(field_)
    grad[m] = w / total
    return value, grad


def soft_max_lse(u, mask, beta: float) -> float:
    """Log-mean-exp soft maximum of the ROI values at sharpness ``beta``."""
    return soft_max_lse_and_grad(u, mask, beta)[0]


def _terms_and_grads(
    field_: DistanceField, lab: np.ndarray, target: np.ndarray, m: np.ndarray, hp: LossHyperparams
) -> tuple[LossTerms, list[np.ndarray]]:
    """The five composite terms and each term's gradient w.r.t. the Lab image."""
    u = field_.u
    n = int(m.sum())
    p = hp.p

    mu_hat = lab[m].sum(axis=0) / n
    d_mean = mu_hat - target
    norm = math.sqrt(float(d_mean @ d_mean))
    r = norm - hp.tau_mean
    l_mean = hinge(r, p)
    g_mean = np.zeros_like(lab)
    if norm > 0.0:
        g_mean[m] = hinge_grad(r, p) * d_mean / (norm * n)

    u_roi = u[m]
    l_pix = float(hinge(u_roi - hp.tau_pix, p).sum() / n)
    du_pix = np.zeros_like(u)
    du_pix[m] = hinge_grad(u_roi - hp.tau_pix, p) / n

    c_val, dc = cvar_and_grad(u, m, hp.alpha)
    l_tail = hinge(c_val - hp.tau_tail, p)
    du_tail = hinge_grad(c_val - hp.tau_tail, p) * dc

    s_val, ds = soft_max_lse_and_grad(u, m, hp.beta)
    l_max = hinge(s_val - hp.tau_max, p)
    du_max = hinge_grad(s_val - hp.tau_max, p) * ds

    u_bar = u_roi.sum() / n
    centered = u_roi - u_bar
    var = float((centered * centered).sum() / n)
    l_var = hinge(var - hp.tau_var, p)
    du_var = np.zeros_like(u)
    du_var[m] = hinge_grad(var - hp.tau_var, p) * 2.0 * centered / n

    grads = [g_mean] + [field_.grad_to_lab(d) for d in (du_pix, du_tail, du_max, du_var)]
    terms = LossTerms(float(l_mean), l_pix, float(l_tail), float(l_max), float(l_var))
    return terms, grads


def roi_loss_terms(u: DistanceField, img, target, mask, hp: LossHyperparams = LossHyperparams()) -> LossTerms:
    """Mean, pixel-hinge, CVaR-tail, soft-max and variance penalties."""
    lab = _pixels(img, cs.Encoding.LAB)
    m = as_mask(mask, lab.shape[:2])
    if not m.any():
        log.warning("roi_loss_terms called with an empty ROI; returning zeros")
        return LossTerms()
    _require_finite(lab, "roi_loss_terms")
    if not isinstance(u, DistanceField):
        # bare field: no Lab pullback is needed for the values alone
        u = DistanceField(np.asarray(u, dtype=np.float64), float("nan"), np.zeros_like(lab), np.zeros(3))
    return _terms_and_grads(u, lab, _target(target, cs.Encoding.LAB), m, hp)[0]


def roi_loss_terms_grads(
    img, target, mask, gate: float, hp: LossHyperparams = LossHyperparams()
) -> tuple[LossTerms, dict[str, np.ndarray]]:
    """Composite terms plus each term's gradient w.r.t. the Lab image."""
    lab = _pixels(img, cs.Encoding.LAB)
    m = as_mask(mask, lab.shape[:2])
    if not m.any():
        log.warning("roi_loss_terms_grads called with an empty ROI; returning zeros")
        return LossTerms(), {name: np.zeros_like(lab) for name in TERM_NAMES}
    _require_finite(lab, "roi_loss_terms_grads")
    c = _target(target, cs.Encoding.LAB)
    field_ = distance_field(lab, c, gate, hp)
    terms, grads = _terms_and_grads(field_, lab, c, m, hp)
    return terms, dict(zip(TERM_NAMES, grads))


def composite_lab_loss_and_grad(
    img, target, mask, gate: float, hp: LossHyperparams = LossHyperparams()
) -> tuple[float, LossTerms, np.ndarray]:
    """Weighted composite loss on a Lab image and its Lab-image gradient."""
    terms, grads = roi_loss_terms_grads(img, target, mask, gate, hp)
    grad = np.zeros_like(next(iter(grads.values())))
    for lam, name in zip(hp.lambdas, TERM_NAMES):
        if lam != 0.0:
            grad += lam * grads[name]
    return terms.weighted_sum(hp), terms, grad


def total_loss_and_grad(
    img, t: float, schedule_ctx: ScheduleContext, target, mask, hp: LossHyperparams = LossHyperparams()
) -> tuple[float, LossTerms, float, np.ndarray]:
    """Composite loss on an sRGB image at timestep ``t``.

    Returns ``(loss, terms, gate, grad)`` with ``grad`` taken w.r.t. the
    sRGB image through the Lab conversion Jacobian.
    """
    srgb = _pixels(img, cs.Encoding.SRGB)
    _require_finite(srgb, "total_loss")
    lab = cs.srgb_to_lab_array(srgb)
    gate = gate_at(t, schedule_ctx)
    value, terms, g_lab = composite_lab_loss_and_grad(lab, target, mask, gate, hp)
    jac = cs.srgb_to_lab_jacobian_array(srgb)
    g_srgb = np.einsum("...ck,...c->...k", jac, g_lab)
    return value, terms, gate, g_srgb


def total_loss(
    img, t: float, schedule_ctx: ScheduleContext, target, mask, hp: LossHyperparams = LossHyperparams()
) -> tuple[float, LossTerms, float]:
    value, terms, gate, _ = total_loss_and_grad(img, t, schedule_ctx, target, mask, hp)
    return value, terms, gate


# ---------------------------------------------------------------------------
# color difference


def safe_quadratic_form(a, b) -> float:
    """Squared Lab distance, the unrooted form of :func:`delta_e00_taylor`."""
    d = _target(a, cs.Encoding.LAB) - _target(b, cs.Encoding.LAB)
    return float(d @ d)


def delta_e00_taylor(a, b) -> float:
    """Second-order approximation of CIEDE2000: Euclidean distance in Lab."""
    return math.sqrt(safe_quadratic_form(a, b))


def delta_e_taylor_array(lab: np.ndarray, target) -> np.ndarray:
    """Per-pixel :func:`delta_e00_taylor` of a Lab image against one color."""
    d = np.asarray(lab, dtype=np.float64) - _target(target, cs.Encoding.LAB)
    return np.sqrt((d * d).sum(axis=-1))
