"""A small, analytically exact latent diffusion backend.

Stands in for a trained inpainting model so the guidance loop can run end to
end on a laptop:

* a linear-beta DDPM noise schedule with evenly strided sampling timesteps,
* a deterministic DDIM reverse step,
* an invertible per-pixel linear "VAE" that keeps the usual 0.18215 scale,
* a closed-form epsilon predictor for a flat-color-plus-texture Gaussian image
  prior, with a conditional and an unconditional branch for CFG.

Latents live on the pixel grid (spatial factor 1) with three channels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import colorspace as cs

ALPHA_VAE = 0.18215

DEFAULT_MIX = np.array(
    [
        [0.90, 0.30, 0.10],
        [-0.25, 0.85, 0.20],
        [0.10, -0.35, 0.95],
    ]
)


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal levels and the descending sampling timesteps."""

    alpha_bar: np.ndarray
    timesteps: tuple[int, ...]
    betas: np.ndarray
    init_noise_sigma: float = 1.0

    @property
    def N(self) -> int:
        return len(self.timesteps)

    @property
    def T_train(self) -> int:
        return len(self.alpha_bar)

    def index_of(self, t: int) -> int:
        try:
            return self.timesteps.index(int(t))
        except ValueError:
            raise ValueError(f"timestep {t} is not part of this schedule") from None

    def next_timestep(self, t: int) -> int | None:
        """Timestep following ``t``, or ``None`` if ``t`` is the last one."""
        i = self.index_of(t)
        return self.timesteps[i + 1] if i + 1 < self.N else None

    def signal_noise(self, t: int, exact: bool = False):
        """``(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))`` at timestep ``t``.

        With ``exact`` the float coefficients are returned as Fractions so
        that object arrays of Fractions stay in exact arithmetic.
        """
        ab = float(self.alpha_bar[int(t)])
        a, b = float(np.sqrt(ab)), float(np.sqrt(1.0 - ab))
        if exact:
            return Fraction(a), Fraction(b)
        return a, b


def build_schedule(
    N: int = 80, T_train: int = 1000, beta_start: float = 8.5e-4, beta_end: float = 0.012
) -> NoiseSchedule:
    """Linear-beta schedule over ``T_train`` steps, sampled at ``N`` timesteps.

    Sampling timesteps are ``floor((N - 1 - i) * T_train / N)`` for
    ``i = 0 .. N-1``, so the last one is always 0 and the stride is
    ``T_train / N`` rounded down or up.
    """
    if not 1 <= N <= T_train:
        raise ValueError(f"need 1 <= N <= T_train, got N={N}, T_train={T_train}")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T_train, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - betas)
    timesteps = tuple(((N - 1 - i) * T_train) // N for i in range(N))
    return NoiseSchedule(alpha_bar=alpha_bar, timesteps=timesteps, betas=betas)


def _coefs(sched: NoiseSchedule, t: int, like: np.ndarray):
    return sched.signal_noise(t, exact=np.asarray(like).dtype == object)


def add_noise(x0: np.ndarray, eps: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Forward-noise ``x0`` to timestep ``t`` with the given noise draw."""
    x0, eps = np.asarray(x0), np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {eps.shape}")
    a, b = _coefs(sched, t, x0)
    return a * x0 + b * eps


def scheduler_step(eps_hat: np.ndarray, t: int, z: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic DDIM update from ``t`` to the next scheduled timestep.

    On the last timestep the predicted clean latent is returned.
    """
    z, eps_hat = np.asarray(z), np.asarray(eps_hat)
    t_next = sched.next_timestep(t)
    a, b = _coefs(sched, t, z)
    x0_hat = (z - b * eps_hat) / a
    if t_next is None:
        return x0_hat
    a_next, b_next = _coefs(sched, t_next, z)
    return a_next * x0_hat + b_next * eps_hat


def cfg_combine(eps_u: np.ndarray, eps_c: np.ndarray, s_cfg: float) -> np.ndarray:
    """Classifier-free guidance: extrapolate from unconditional toward conditional."""
    eps_u, eps_c = np.asarray(eps_u), np.asarray(eps_c)
    if eps_u.shape != eps_c.shape:
        raise ValueError(f"shape mismatch: {eps_u.shape} vs {eps_c.shape}")
    return eps_u + s_cfg * (eps_c - eps_u)


@dataclass(frozen=True)
class LatentCodec:
    """Invertible per-pixel affine codec ``z = alpha_vae * mix @ (x + offset)``."""

    mix: np.ndarray = field(default_factory=lambda: DEFAULT_MIX.copy())
    offset: np.ndarray = field(default_factory=lambda: np.full(3, -0.5))
    alpha_vae: float = ALPHA_VAE

    def __post_init__(self) -> None:
        mix = np.asarray(self.mix, dtype=np.float64)
        if mix.shape != (3, 3):
            raise ValueError(f"mix must be 3 x 3, got {mix.shape}")
        cond = np.linalg.cond(mix)
        if not np.isfinite(cond) or cond >= 100.0:
            raise ValueError(f"mix matrix is singular or ill-conditioned (cond={cond:.3g})")
        if self.alpha_vae == 0:
            raise ValueError("alpha_vae must be nonzero")
        mix.setflags(write=False)
        offset = np.broadcast_to(np.asarray(self.offset, dtype=np.float64), (3,)).copy()
        offset.setflags(write=False)
        inv = np.linalg.inv(mix)
        inv.setflags(write=False)
        object.__setattr__(self, "mix", mix)
        object.__setattr__(self, "offset", offset)
        object.__setattr__(self, "_inv", inv)

    @property
    def inverse_mix(self) -> np.ndarray:
        return self._inv  # type: ignore[attr-defined]

    @property
    def encode_jacobian(self) -> np.ndarray:
        """Constant per-pixel Jacobian of :meth:`encode`."""
        return self.alpha_vae * self.mix

    @property
    def decode_jacobian(self) -> np.ndarray:
        """Constant per-pixel Jacobian of :meth:`decode_raw` (before clamping)."""
        return self.inverse_mix / self.alpha_vae

    def encode(self, x) -> np.ndarray:
        if isinstance(x, cs.PixelImage):
            x = x.require(cs.Encoding.SRGB)
        x = np.asarray(x, dtype=np.float64)
        return self.alpha_vae * ((x + self.offset) @ self.mix.T)

    def decode_raw(self, z: np.ndarray) -> np.ndarray:
        return (np.asarray(z, dtype=np.float64) / self.alpha_vae) @ self.inverse_mix.T - self.offset

    def decode(self, z: np.ndarray) -> cs.PixelImage:
        return cs.PixelImage(cs.clamp_unit_array(self.decode_raw(z)), cs.Encoding.SRGB)

    def pullback(self, grad_x: np.ndarray) -> np.ndarray:
        """Map a gradient w.r.t. the raw decoded image back to the latent."""
        return np.asarray(grad_x) @ self.decode_jacobian


def encode(x, codec: LatentCodec) -> np.ndarray:
    return codec.encode(x)


def decode(z: np.ndarray, codec: LatentCodec) -> cs.PixelImage:
    return codec.decode(z)


@dataclass
class LatentState:
    """The latent being denoised and nudged, with its place in the schedule."""

    z: np.ndarray
    step_index: int = 0
    timestep: int = 0


@dataclass(frozen=True)
class FlatColorPrior:
    """Gaussian image prior: one shared color per image plus per-pixel texture.

    Colors are given in linear RGB and converted to sRGB, the space the
    codec encodes; the spreads are in sRGB units.
    """

    mu_cond: cs.ColorTriple = cs.ColorTriple(0.5, 0.5, 0.5, cs.Encoding.LINEAR_RGB)
    sigma_cond: float = 0.02
    mu_uncond: cs.ColorTriple = cs.ColorTriple(0.5, 0.5, 0.5, cs.Encoding.LINEAR_RGB)
    sigma_uncond: float = 0.25
    sigma_texture: float = 0.05

    def __post_init__(self) -> None:
        for name in ("sigma_cond", "sigma_uncond", "sigma_texture"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("mu_cond", "mu_uncond"):
            c = getattr(self, name)
            if not isinstance(c, cs.ColorTriple):
                c = cs.ColorTriple.from_array(c, cs.Encoding.LINEAR_RGB)
                object.__setattr__(self, name, c)
            if c.encoding != cs.Encoding.LINEAR_RGB:
                raise cs.EncodingError(f"{name} must be a linear RGB color")

    def branch(self, conditioned: bool) -> tuple[np.ndarray, float]:
        """sRGB mean color and color spread of one CFG branch."""
        mu, sigma = (self.mu_cond, self.sigma_cond) if conditioned else (self.mu_uncond, self.sigma_uncond)
        return cs.linear_to_srgb_array(mu.as_array()), sigma


def posterior_mean_image(
    z: np.ndarray, t: int, conditioned: bool, prior: FlatColorPrior, codec: LatentCodec, sched: NoiseSchedule
) -> np.ndarray:
    """``E[x0 | z_t]`` in sRGB pixel space for the flat-color prior.

    The shared color only shows up in the spatial mean of the latent, so the
    posterior splits into a 3x3 Gaussian update for the mean color and an
    independent per-pixel update for the texture deviations.
    """
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("analytic denoiser received a non-finite latent")
    h, w, _ = z.shape
    P = h * w
    a, b = sched.signal_noise(t)
    m, sigma_c = prior.branch(conditioned)
    s_tex2 = prior.sigma_texture**2
    A = a * codec.alpha_vae * codec.mix
    AAt = A @ A.T
    eye = np.eye(3)

    v = z - a * codec.alpha_vae * (codec.offset @ codec.mix.T)
    v_bar = v.reshape(P, 3).mean(axis=0)

    s_mean = sigma_c**2 + s_tex2 / P
    S_mean = s_mean * AAt + (b * b / P) * eye
    mean_color = m + s_mean * A.T @ np.linalg.solve(S_mean, v_bar - A @ m)

    S_dev = s_tex2 * AAt + b * b * eye
    gain = s_tex2 * A.T @ np.linalg.inv(S_dev)
    dev = (v - v_bar) @ gain.T
    return mean_color + dev


def analytic_denoiser(
    z, t: int, conditioned: bool, prior: FlatColorPrior, codec: LatentCodec, sched: NoiseSchedule
) -> np.ndarray:
    """Exact epsilon prediction for the flat-color prior at timestep ``t``."""
    if isinstance(z, LatentState):
        z = z.z
    z = np.asarray(z, dtype=np.float64)
    x0 = posterior_mean_image(z, t, conditioned, prior, codec, sched)
    a, b = sched.signal_noise(t)
    return (z - a * codec.encode(x0)) / b


def resize_mask_nearest(mask: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Nearest-neighbor resize; source index is ``floor(i * H_in / H_out)``."""
    if target_h < 1 or target_w < 1:
        raise ValueError(f"target size must be positive, got {target_h} x {target_w}")
    m = np.asarray(mask)
    h, w = m.shape[-2:]
    rows = (np.arange(target_h) * h) // target_h
    cols = (np.arange(target_w) * w) // target_w
    return m[..., rows[:, None], cols[None, :]].copy()
