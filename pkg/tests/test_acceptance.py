"""Acceptance checks AC-1 .. AC-11.

Each test records a one-line detail; ``conftest.py`` prints a PASS/FAIL
table at the end of the session.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import pytest

from chromanudge import colorspace as cs
from chromanudge import losses, report
from chromanudge.cli import main as cli_main
from chromanudge.config import preset
from chromanudge.diffusion import LatentCodec, add_noise, build_schedule, scheduler_step
from chromanudge.engine import compute_guidance_loss, nudge_latent, prepare, run_guided_inpaint
from chromanudge.schedule import (
    ScheduleContext,
    cvar_ramp_weight,
    gate_at,
    guidance_window,
    lin_decay_weight,
    progress,
)

SEEDS = tuple(range(10))


# ---------------------------------------------------------------------------
# AC-1


def test_ac1_color_anchors(record_property):
    lab = cs.srgb_to_lab_array(np.array([[[1.0, 0.53, 0.60], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0]]]))[0]
    target_err = np.abs(lab[0] - [69.97, 47.40, 11.54])
    white_err = np.abs(lab[1] - [100.0, 0.0, 0.0])
    black_err = np.abs(lab[2])
    record_property(
        "detail",
        f"target Lab {np.round(lab[0], 2).tolist()} max err {target_err.max():.3f} (tol 0.5); "
        f"white {white_err.max():.1e}, black {black_err.max():.1e} (tol 0.01)",
    )
    assert target_err.max() <= 0.5
    assert white_err.max() <= 0.01
    assert black_err.max() <= 0.01


# ---------------------------------------------------------------------------
# AC-2


def test_ac2_round_trips(record_property):
    grid = np.linspace(0.0, 1.0, 256)
    srgb_err = max(
        np.abs(cs.linear_to_srgb_array(cs.srgb_to_linear_array(grid)) - grid).max(),
        np.abs(cs.srgb_to_linear_array(cs.linear_to_srgb_array(grid)) - grid).max(),
    )
    rng = np.random.default_rng(0)
    codec = LatentCodec()
    x = rng.random((64, 64, 3))
    codec_err = np.abs(codec.decode_raw(codec.encode(x)) - x).max()
    record_property("detail", f"sRGB<->linear {srgb_err:.1e} (tol 1e-6); codec {codec_err:.1e} (tol 1e-9)")
    assert srgb_err < 1e-6
    assert codec_err < 1e-9


# ---------------------------------------------------------------------------
# AC-3


def _fd_relative_error(fn, grad, x, h=1e-6, regime=None):
    """Coordinate-wise central differences; coordinates whose +-h probes
    land in different smooth regimes are skipped."""
    fd = np.zeros(x.size)
    keep = np.ones(x.size, bool)
    flat = x.ravel()
    for j in range(x.size):
        xp, xm = flat.copy(), flat.copy()
        xp[j] += h
        xm[j] -= h
        xp, xm = xp.reshape(x.shape), xm.reshape(x.shape)
        if regime is not None and regime(xp) != regime(xm):
            keep[j] = False
            continue
        fd[j] = (fn(xp) - fn(xm)) / (2 * h)
    an = grad.ravel()[keep]
    return np.linalg.norm(fd[keep] - an) / max(np.linalg.norm(an), 1e-12), int((~keep).sum())


def _composite_regime(lab, target, mask, gate, hp):
    u = losses.distance_field(lab, target, gate, hp).u
    vals = u[mask]
    n = vals.size
    k = losses.tail_count(n, hp.alpha)
    top = tuple(np.sort(np.argsort(-vals, kind="stable")[:k]))
    mu = lab[mask].mean(axis=0)
    cv = np.sort(vals)[::-1][:k].mean()
    lse = losses.soft_max_lse(u, mask, hp.beta)
    return (
        top,
        np.linalg.norm(mu - target) > hp.tau_mean,
        tuple(vals > hp.tau_pix),
        cv > hp.tau_tail,
        lse > hp.tau_max,
        vals.var() > hp.tau_var,
    )


def test_ac3_gradient_suite(record_property):
    rng = np.random.default_rng(3)
    hp = losses.LossHyperparams()
    worst = {"alg1": 0.0, "alg2": 0.0, "alg4": 0.0}
    skipped = 0
    for _ in range(20):
        mask = rng.random((8, 8)) < 0.6
        mask[0, 0] = True
        target_lin = rng.uniform(0.05, 0.95, 3)
        lin = rng.uniform(0.0, 1.0, (8, 8, 3))
        _, g = losses.linear_rgb_enforcer_loss_and_grad(lin, mask, target_lin)
        err, _ = _fd_relative_error(lambda v: losses.linear_rgb_enforcer_loss(v, mask, target_lin), g, lin)
        worst["alg1"] = max(worst["alg1"], err)

        target_lab = np.array([rng.uniform(30, 80), rng.uniform(-30, 30), rng.uniform(-30, 30)])
        lab = target_lab + rng.normal(0.0, 6.0, (8, 8, 3))
        _, g = losses.lab_euclidean_loss_and_grad(lab, mask, target_lab)
        err, _ = _fd_relative_error(lambda v: losses.lab_euclidean_loss(v, mask, target_lab), g, lab)
        worst["alg2"] = max(worst["alg2"], err)

        gate = float(rng.uniform(0, 1))
        _, _, g = losses.composite_lab_loss_and_grad(lab, target_lab, mask, gate, hp)
        err, n_skip = _fd_relative_error(
            lambda v: losses.composite_lab_loss_and_grad(v, target_lab, mask, gate, hp)[0],
            g,
            lab,
            regime=lambda v: _composite_regime(v, target_lab, mask, gate, hp),
        )
        worst["alg4"] = max(worst["alg4"], err)
        skipped += n_skip
    record_property(
        "detail",
        "worst relative error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" (tol 1e-3; {skipped} kink coords skipped)",
    )
    assert max(worst.values()) < 1e-3


# ---------------------------------------------------------------------------
# AC-4


def test_ac4_oracle_equivalence(record_property):
    rng = np.random.default_rng(4)
    mismatches = 0
    for trial in range(1000):
        n = int(rng.integers(1, 65))
        if trial % 4 == 0:
            u = rng.integers(0, 5, n).astype(float)  # heavy ties
        else:
            u = rng.exponential(3.0, n)
        alpha = float(rng.choice([0.5, 0.7, 0.8, 0.9, 0.95, rng.uniform(0.01, 0.99)]))
        k = max(1, math.ceil((1 - alpha) * n - 1e-9))
        brute = math.fsum(sorted(u.tolist(), reverse=True)[:k]) / k
        got = losses.cvar(u[None, :], np.ones((1, n), bool), alpha)
        mismatches += got != brute

    lse_err = 0.0
    for _ in range(200):
        a, b = rng.normal(0, 3, 2)
        beta = float(rng.uniform(0.1, 10))
        closed = math.log((math.exp(beta * a) + math.exp(beta * b)) / 2) / beta
        lse_err = max(lse_err, abs(losses.soft_max_lse(np.array([[a, b]]), np.ones((1, 2), bool), beta) - closed))
    sharp_err = 0.0
    for _ in range(200):
        u = rng.normal(0, 5, (8, 8))
        sharp_err = max(sharp_err, abs(losses.soft_max_lse(u, np.ones_like(u, bool), 1e3) - u.max()))

    stats_err = 0.0
    for _ in range(50):
        img = rng.random((12, 12, 3))
        mask = rng.random((12, 12)) < 0.5
        mask[3, 3] = True
        target = cs.ColorTriple(*rng.random(3), cs.Encoding.SRGB)
        st = report.roi_delta_e_stats(cs.PixelImage(img, cs.Encoding.SRGB), target, mask)
        t_lab = target.to(cs.Encoding.LAB).as_array()
        values = []
        for (yy, xx) in zip(*np.nonzero(mask)):
            lab = cs.srgb_to_lab_array(img[yy, xx].reshape(1, 1, 3))[0, 0]
            values.append(math.sqrt(sum((lab[c] - t_lab[c]) ** 2 for c in range(3))))
        values.sort()
        mean = sum(values) / len(values)
        brute = (
            values[0],
            values[-1],
            mean,
            math.sqrt(sum((v - mean) ** 2 for v in values) / len(values)),
            values[(len(values) - 1) // 2],
        )
        stats_err = max(stats_err, max(abs(a - b) for a, b in zip((st.min, st.max, st.mean, st.std, st.median), brute)))

    record_property(
        "detail",
        f"CVaR mismatches {mismatches}/1000; LSE two-term err {lse_err:.1e} (tol 1e-3), "
        f"beta=1e3 vs max {sharp_err:.1e} (tol 0.02); stats err {stats_err:.1e}",
    )
    assert mismatches == 0
    assert lse_err < 1e-3
    assert sharp_err < 0.02
    assert stats_err < 1e-9


# ---------------------------------------------------------------------------
# AC-5


def test_ac5_schedule_algebra(record_property):
    checked = 0
    for N in range(1, 101):
        sched = build_schedule(N)
        for s in (0.0, 0.2, 0.5, 0.9):
            ctx = ScheduleContext.from_timesteps(sched.timesteps, s=s, f_start=0.2, f_stop=1.0)
            for i, t in enumerate(sched.timesteps):
                p = progress(t, ctx)
                assert p == (ctx.T - t) / (ctx.T - ctx.t_min)
                expected_gate = 0.0 if p <= s else (p - s) / (1 - s)
                assert gate_at(t, ctx) == expected_gate
                assert 0.0 <= expected_gate <= 1.0
                assert cvar_ramp_weight(t, ctx) == max(0.0, ctx.T0 - t) / ctx.k
                assert lin_decay_weight(i) == 1.0 / (i + 1)
                checked += 1
        for f_start in (0.0, 0.1, 0.2, 0.25, 0.5, 1.0):
            for f_stop in (f_start, 0.5, 0.8, 1.0):
                if f_stop < f_start:
                    continue
                ctx = ScheduleContext(T=1000, t_min=0, N=N, f_start=f_start, f_stop=f_stop)
                lo, hi = math.floor(f_start * N), math.floor(f_stop * N)
                assert [i for i in range(N) if guidance_window(i, ctx)] == list(range(lo, hi))
    ctx80 = ScheduleContext.from_timesteps(build_schedule(80).timesteps, f_start=0.2, f_stop=1.0)
    window = [i for i in range(80) if guidance_window(i, ctx80)]
    record_property("detail", f"{checked} progress/gate/weight points; N=80 window [{window[0]}, {window[-1] + 1})")
    assert (window[0], window[-1] + 1) == (16, 80)


# ---------------------------------------------------------------------------
# AC-6


def test_ac6_scheduler_identity(record_property):
    sched = build_schedule(80)
    rng = np.random.default_rng(6)
    x0_f = rng.standard_normal((4, 4, 3))
    eps_f = rng.standard_normal((4, 4, 3))
    to_exact = np.vectorize(Fraction, otypes=[object])
    x0, eps = to_exact(x0_f), to_exact(eps_f)
    exact_pairs = 0
    worst_rel = 0.0
    for t, t_next in zip(sched.timesteps[:-1], sched.timesteps[1:]):
        stepped = scheduler_step(eps, t, add_noise(x0, eps, t, sched), sched)
        exact_pairs += bool(np.all(stepped == add_noise(x0, eps, t_next, sched)))
        got = scheduler_step(eps_f, t, add_noise(x0_f, eps_f, t, sched), sched)
        want = add_noise(x0_f, eps_f, t_next, sched)
        a, b = sched.signal_noise(t_next)
        # forward-error scale: magnitude of the summed terms, not of the result
        scale = np.abs(a * x0_f) + np.abs(b * eps_f)
        worst_rel = max(worst_rel, float(np.max(np.abs(got - want) / (scale * np.finfo(float).eps))))
    pairs = sched.N - 1
    record_property(
        "detail",
        f"exact-arithmetic identity on {exact_pairs}/{pairs} pairs; float64 path within {worst_rel:.1f} eps x term size",
    )
    assert exact_pairs == pairs
    assert worst_rel <= 16


# ---------------------------------------------------------------------------
# AC-7 / AC-8 / AC-9: one paired sweep shared across criteria


def _background_deviation(final, problem):
    outside = ~problem.mask
    return float(np.abs(final.data[outside] - problem.canvas.data[outside]).max())


@pytest.fixture(scope="module")
def paired_sweep():
    presets = {
        "cvar-lrgb": preset("cvar-lrgb"),
        "lrgb-only": preset("lrgb-only"),
        "no-guidance": preset("no-guidance"),
        "no-anchor": preset("cvar-lrgb").with_(enable_bg_anchor=False),
    }
    out = {}
    for name, base in presets.items():
        rows = []
        for seed in SEEDS:
            cfg = base.with_(seed=seed, snapshot_every=0)
            problem = prepare(cfg)
            final, _ = run_guided_inpaint(cfg)
            stats = report.roi_delta_e_stats(final, cfg.target_srgb, problem.mask)
            p95 = report.roi_percentile(final, cfg.target_srgb, problem.mask, 95.0)
            rows.append((stats.mean, p95, _background_deviation(final, problem)))
        out[name] = np.array(rows)
    return out


def test_ac7_guidance_efficacy(paired_sweep, record_property):
    cfg = preset("cvar-lrgb")
    gap = np.linalg.norm(cfg.prior.mu_cond.as_array() - cfg.target_srgb.to(cs.Encoding.LINEAR_RGB).as_array())
    guided = paired_sweep["cvar-lrgb"][:, 0]
    plain = paired_sweep["no-guidance"][:, 0]
    wins = int((guided < plain).sum())
    improvement = 1.0 - guided.mean() / plain.mean()
    record_property(
        "detail",
        f"prior-target gap {gap:.2f}; guided lower on {wins}/10 seeds (need 9); "
        f"mean {guided.mean():.2f} vs {plain.mean():.2f}, improvement {improvement:.1%} (need 30%)",
    )
    assert gap >= 0.2
    assert wins >= 9
    assert improvement >= 0.30


def test_ac8_tail_control(paired_sweep, record_property):
    cvar_p95 = paired_sweep["cvar-lrgb"][:, 1]
    lrgb_p95 = paired_sweep["lrgb-only"][:, 1]
    wins = int((cvar_p95 < lrgb_p95).sum())
    record_property(
        "detail",
        f"p95 lower with CVaR on {wins}/10 seeds (need 8); mean p95 {cvar_p95.mean():.3f} vs {lrgb_p95.mean():.3f}",
    )
    assert wins >= 8


def test_ac9_anchor_efficacy(paired_sweep, record_property):
    on = paired_sweep["cvar-lrgb"][:, 2]
    off = paired_sweep["no-anchor"][:, 2]
    record_property("detail", f"max background deviation anchored {on.max():.2e} (tol 0.02); unanchored min {off.min():.3f}")
    assert on.max() < 0.02
    assert np.all(off > on)


# ---------------------------------------------------------------------------
# AC-10


def test_ac10_engine_safety(record_property):
    cfg = preset("cvar-lrgb").with_(snapshot_every=0, seed=3)
    problem = prepare(cfg)
    outside = problem.mask_latent[..., 0] == 0
    touched = []

    def watch(i, before, after):
        touched.append(not np.array_equal(before[outside], after[outside]))

    final, runlog = run_guided_inpaint(cfg, on_nudge=watch)
    assert len(touched) == 64 and not any(touched)

    faults = {
        "zero loss": lambda i, gl: gl._replace(L=0.0),
        "negative loss": lambda i, gl: gl._replace(L=-1.0),
        "nan loss": lambda i, gl: gl._replace(L=float("nan")),
        "inf loss": lambda i, gl: gl._replace(L=float("inf")),
        "zero grad": lambda i, gl: gl._replace(grad=np.zeros_like(gl.grad)),
        "nan grad": lambda i, gl: gl._replace(grad=np.full_like(gl.grad, np.nan)),
    }
    skipped = {}
    for name, fault in faults.items():
        injected = lambda i, gl, f=fault: f(i, gl) if i % 3 == 0 else gl  # noqa: E731
        final_f, log_f = run_guided_inpaint(cfg, fault=injected)
        assert np.all(np.isfinite(final_f.data))
        faulted = [r for r in log_f.records if 16 <= r.step_index and r.step_index % 3 == 0]
        assert faulted and not any(r.nudged for r in faulted), name
        clean = [r for r in log_f.records if 16 <= r.step_index and r.step_index % 3 != 0]
        assert all(r.nudged for r in clean), name
        skipped[name] = len(faulted)

    # the NaN-repair path: an update that overflows is zeroed, not propagated
    z = np.full((4, 4, 3), 1e308)
    res = nudge_latent(z, 1.0, -np.ones_like(z), 1e308 * 4, np.ones((4, 4, 1)))
    assert res.nan_repaired and np.all(np.isfinite(res.z))

    gl = compute_guidance_loss(np.zeros_like(problem.z0), 20, problem.sched.timesteps[20], cfg, problem)
    assert np.all(gl.grad[outside] == 0.0)
    record_property(
        "detail",
        f"outside-ROI latent unchanged across {len(touched)} nudges; skip paths exercised: "
        + ", ".join(f"{k} x{v}" for k, v in skipped.items())
        + "; overflow repaired",
    )


# ---------------------------------------------------------------------------
# AC-11


def test_ac11_determinism(tmp_path, record_property, capsys):
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        assert cli_main(["run", "--preset", "cvar-lrgb", "--seed", "7", "--out", str(d)]) == 0
        outs.append(d)
    capsys.readouterr()
    same = {f: (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in ("final.png", "log.csv", "summary.txt")}
    record_property("detail", "byte-identical: " + ", ".join(f"{k} {v}" for k, v in same.items()))
    assert all(same.values())
