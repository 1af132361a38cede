"""Fast invariant checks shipped with the package.

Each check returns ``(passed, detail)``. ``white`` lets callers swap the
reference white point, which is how the negative control is produced.
"""

from __future__ import annotations

import math
import time
from fractions import Fraction
from typing import Callable

import numpy as np

from . import colorspace as cs
from . import losses
from .diffusion import LatentCodec, add_noise, build_schedule, scheduler_step
from .schedule import ScheduleContext, guidance_window

CheckResult = tuple[bool, str]


def check_color_anchors(white=cs.D65_WHITE) -> CheckResult:
    px = np.array([[[1.0, 0.53, 0.60], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0]]])
    lab = cs.srgb_to_lab_array(px, white=np.asarray(white))
    target_err = float(np.max(np.abs(lab[0, 0] - [69.97, 47.40, 11.54])))
    white_err = float(np.max(np.abs(lab[0, 1] - [100.0, 0.0, 0.0])))
    black_err = float(np.max(np.abs(lab[0, 2])))
    ok = target_err <= 0.5 and white_err <= 0.01 and black_err <= 0.01
    return ok, f"target {target_err:.3f}, white {white_err:.2e}, black {black_err:.2e}"


def check_round_trips() -> CheckResult:
    grid = np.linspace(0.0, 1.0, 256)
    rt = float(np.max(np.abs(cs.linear_to_srgb_array(cs.srgb_to_linear_array(grid)) - grid)))
    rng = np.random.default_rng(1)
    x = rng.random((8, 8, 3))
    codec = LatentCodec()
    cr = float(np.max(np.abs(codec.decode_raw(codec.encode(x)) - x)))
    return rt < 1e-6 and cr < 1e-9, f"srgb {rt:.1e}, codec {cr:.1e}"


def _fd_check(fn, grad, x, rng, n_probe=6, h=1e-6) -> float:
    worst = 0.0
    for _ in range(n_probe):
        d = rng.standard_normal(x.shape)
        fd = (fn(x + h * d) - fn(x - h * d)) / (2 * h)
        an = float((grad * d).sum())
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return worst


def check_gradients() -> CheckResult:
    rng = np.random.default_rng(2)
    mask = np.zeros((8, 8), bool)
    mask[2:6, 1:7] = True
    target_lin = np.array([0.8, 0.2, 0.3])
    target_lab = np.array([60.0, 30.0, 10.0])
    hp = losses.LossHyperparams()
    worst = 0.0
    for _ in range(3):
        lin = rng.uniform(0.05, 0.95, (8, 8, 3))
        _, g = losses.linear_rgb_enforcer_loss_and_grad(lin, mask, target_lin)
        worst = max(worst, _fd_check(lambda v: losses.linear_rgb_enforcer_loss(v, mask, target_lin), g, lin, rng))
        lab = rng.uniform([20, -40, -40], [90, 40, 40], (8, 8, 3))
        _, g = losses.lab_euclidean_loss_and_grad(lab, mask, target_lab)
        worst = max(worst, _fd_check(lambda v: losses.lab_euclidean_loss(v, mask, target_lab), g, lab, rng))
        value_fn = lambda v: losses.composite_lab_loss_and_grad(v, target_lab, mask, 0.4, hp)[0]  # noqa: E731
        _, _, g = losses.composite_lab_loss_and_grad(lab, target_lab, mask, 0.4, hp)
        worst = max(worst, _fd_check(value_fn, g, lab, rng))
    return worst < 1e-3, f"worst relative error {worst:.1e}"


def check_cvar_lse() -> CheckResult:
    rng = np.random.default_rng(3)
    for _ in range(200):
        n = int(rng.integers(1, 65))
        u = rng.random((1, n))
        mask = np.ones((1, n), bool)
        alpha = float(rng.uniform(0.05, 0.95))
        k = losses.tail_count(n, alpha)
        brute = math.fsum(sorted(u[0].tolist(), reverse=True)[:k]) / k
        if losses.cvar(u, mask, alpha) != brute:
            return False, f"CVaR mismatch at n={n}, alpha={alpha}"
    two = np.array([[0.3, 1.7]])
    m2 = np.ones_like(two, bool)
    beta = 2.0
    closed = 1.7 + np.log((1.0 + np.exp(beta * (0.3 - 1.7))) / 2.0) / beta
    e1 = abs(losses.soft_max_lse(two, m2, beta) - closed)
    big = rng.random((4, 4))
    e2 = abs(losses.soft_max_lse(big, np.ones_like(big, bool), 1e3) - big.max())
    return e1 < 1e-3 and e2 < 0.02, f"two-term {e1:.1e}, sharp {e2:.1e}"


def check_scheduler_identity(pairs: int = 79) -> CheckResult:
    sched = build_schedule(80)
    rng = np.random.default_rng(4)
    x0 = np.array([Fraction(v) for v in rng.standard_normal(4)], dtype=object)
    eps = np.array([Fraction(v) for v in rng.standard_normal(4)], dtype=object)
    for t, t_next in list(zip(sched.timesteps[:-1], sched.timesteps[1:]))[:pairs]:
        stepped = scheduler_step(eps, t, add_noise(x0, eps, t, sched), sched)
        if any(a != b for a, b in zip(stepped, add_noise(x0, eps, t_next, sched))):
            return False, f"mismatch at t={t}"
    return True, f"{pairs} adjacent pairs exact"


def check_window() -> CheckResult:
    ctx = ScheduleContext(T=987, t_min=0, N=80, f_start=0.2, f_stop=1.0)
    on = [i for i in range(80) if guidance_window(i, ctx)]
    ok = on == list(range(16, 80))
    return ok, f"window [{on[0]}, {on[-1] + 1})" if on else "empty window"


CHECKS: tuple[tuple[str, Callable[..., CheckResult]], ...] = (
    ("color anchors", check_color_anchors),
    ("round trips", check_round_trips),
    ("loss gradients", check_gradients),
    ("CVaR / LSE oracles", check_cvar_lse),
    ("scheduler identity", check_scheduler_identity),
    ("guidance window", check_window),
)


def run_selftest(white=None, out=print) -> bool:
    """Run every check, print a table and return whether all passed."""
    all_ok = True
    out(f"{'check':<22} {'result':<6} detail")
    for name, fn in CHECKS:
        started = time.perf_counter()
        try:
            ok, detail = fn(white=white) if (fn is check_color_anchors and white is not None) else fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= ok
        out(f"{name:<22} {'PASS' if ok else 'FAIL':<6} {detail} ({time.perf_counter() - started:.2f}s)")
    return all_ok
