"""Time-dependent scalars used by the guidance loop.

Two clocks coexist here and are kept apart on purpose: *timestep values*
``t`` (descending, as the noise schedule hands them out) drive the
denoising progress, the late-start gate and the CVaR ramp, while *step
indices* ``i`` (0, 1, ... N-1) drive the guidance window and the linear
decay weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class ScheduleContext:
    """Timing bookkeeping for one sampling run.

    Attributes:
        T: first (largest) timestep value of the schedule.
        t_min: last (smallest) timestep value.
        s: late-start threshold on progress, in [0, 1).
        N: number of sampling steps.
        f_start: fraction of ``N`` at which the guidance window opens.
        f_stop: fraction of ``N`` at which it closes.
        k: divisor of the CVaR ramp weight.
        T0: reference timestep of the CVaR ramp (normally equal to ``T``).
    """

    T: float
    t_min: float
    s: float = 0.2
    N: int = 80
    f_start: float = 0.2
    f_stop: float = 1.0
    k: float = 2.0
    T0: float | None = None

    def __post_init__(self) -> None:
        if not self.T > self.t_min:
            raise ValueError(f"T ({self.T}) must exceed t_min ({self.t_min})")
        if not 0.0 <= self.s < 1.0:
            raise ValueError(f"late-start threshold s must lie in [0, 1), got {self.s}")
        if self.k == 0:
            raise ValueError("ramp divisor k must be nonzero")
        if self.N < 1:
            raise ValueError(f"N must be positive, got {self.N}")
        if not 0.0 <= self.f_start <= self.f_stop <= 1.0:
            raise ValueError(f"need 0 <= f_start <= f_stop <= 1, got {self.f_start}, {self.f_stop}")
        if self.T0 is None:
            object.__setattr__(self, "T0", self.T)

    @classmethod
    def from_timesteps(cls, timesteps, **kwargs) -> "ScheduleContext":
        ts = [float(t) for t in timesteps]
        if len(ts) == 1:
            # a one-step schedule has no progress range of its own
            return cls(T=ts[0] + 1.0, t_min=ts[0], N=1, T0=ts[0], **kwargs)
        return cls(T=ts[0], t_min=ts[-1], N=len(ts), T0=ts[0], **kwargs)

    @property
    def window(self) -> tuple[int, int]:
        return math.floor(self.f_start * self.N), math.floor(self.f_stop * self.N)


def progress(t: float, ctx: ScheduleContext) -> float:
    """Fraction of the denoising trajectory completed at timestep ``t``."""
    if not ctx.t_min <= t <= ctx.T:
        raise ValueError(f"timestep {t} outside [{ctx.t_min}, {ctx.T}]")
    return (ctx.T - t) / (ctx.T - ctx.t_min)


def late_start_gate(prog: float, s: float) -> float:
    if s >= 1.0:
        raise ValueError("late-start threshold s = 1 leaves no ramp")
    if prog <= s:
        return 0.0
    return (prog - s) / (1.0 - s)


def guidance_window(i: int, ctx: ScheduleContext) -> bool:
    i_start, i_stop = ctx.window
    return i_start <= i < i_stop


def lin_decay_weight(i: int) -> float:
    if i < 0:
        raise ValueError(f"step index must be non-negative, got {i}")
    return 1.0 / (i + 1)


def cvar_ramp_weight(t: float, ctx: ScheduleContext) -> float:
    return max(0.0, ctx.T0 - t) / ctx.k


def gate_at(t: float, ctx: ScheduleContext) -> float:
    """Late-start gate evaluated at timestep ``t``."""
    return late_start_gate(progress(t, ctx), ctx.s)
