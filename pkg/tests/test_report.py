from __future__ import annotations

import math

import numpy as np
import pytest
from PIL import Image

from chromanudge import colorspace as cs
from chromanudge import report
from chromanudge.engine import GuidanceConfig, Roi, prepare, run_guided_inpaint

TARGET = cs.ColorTriple(1.0, 0.53, 0.60, cs.Encoding.SRGB)


def _const(color, h=4, w=4):
    return cs.PixelImage(np.broadcast_to(np.asarray(color, float), (h, w, 3)).copy(), cs.Encoding.SRGB)


def test_stats_zero_at_target():
    st = report.roi_delta_e_stats(_const(TARGET.as_array()), TARGET, np.ones((4, 4), bool))
    assert max(st.min, st.max, st.mean, st.std, st.median) < 1e-9


def test_stats_two_pixel_median_convention(monkeypatch):
    monkeypatch.setattr(report, "delta_e_taylor_array", lambda lab, target: np.array([[0.0, 10.0]]))
    st = report.roi_delta_e_stats(np.zeros((1, 2, 3)), TARGET, np.ones((1, 2), bool))
    assert (st.min, st.max, st.mean, st.std, st.median) == (0.0, 10.0, 5.0, 5.0, 0.0)


def test_stats_reject_empty_mask():
    with pytest.raises(ValueError):
        report.roi_delta_e_stats(_const([0.5] * 3), TARGET, np.zeros((4, 4), bool))


def test_threshold_monotone_and_edges():
    rng = np.random.default_rng(0)
    img = cs.PixelImage(rng.random((8, 8, 3)), cs.Encoding.SRGB)
    mask = np.ones((8, 8), bool)
    st = report.roi_delta_e_stats(img, TARGET, mask)
    rep = report.threshold_satisfaction(img, TARGET, mask, [st.min, 20, 40, np.nextafter(st.max, np.inf)])
    f = rep.fraction_satisfied
    assert f[0] == 0.0 and f[-1] == 1.0
    assert all(a <= b for a, b in zip(f, f[1:]))
    assert report.threshold_satisfaction(img, TARGET, mask).thresholds == (2, 5, 10, 20, 50)
    with pytest.raises(ValueError):
        report.threshold_satisfaction(img, TARGET, mask, [5, 2])


def test_ramp_indices_monotone():
    v = np.linspace(0, 7, 200)
    idx = report.sequential_index(v, 7.0)
    assert idx[0] == 0 and idx[-1] == 255 and np.all(np.diff(idx) >= 0)
    d = report.diverging_index(np.linspace(-3, 3, 101), 3.0)
    assert d[0] == 0 and d[-1] == 255 and np.all(np.diff(d) >= 0)
    assert report.diverging_index(np.array(1e-9), 3.0) >= 128


def test_ramp_tables():
    lightness = cs.srgb_to_lab_array(report.SEQUENTIAL_RAMP[None] / 255.0)[0, :, 0]
    assert np.all(np.diff(lightness) > 0)
    div = report.DIVERGING_RAMP
    np.testing.assert_array_equal(div, div[::-1, ::-1])


def test_heatmap_constant_at_target_is_lowest_ramp_color():
    mask = np.zeros((4, 4), bool)
    mask[1:3, 1:3] = True
    maps = report.render_heatmap(_const(TARGET.as_array()), TARGET, mask)
    assert set(maps) == {"de", "dL", "da", "db"}
    de = report.to_uint8(maps["de"])
    assert np.all(de[mask] == report.SEQUENTIAL_RAMP[0])
    assert np.all(de[~mask] == report.OUTSIDE_ROI)


def test_signed_map_positive_side_for_positive_offset():
    # lowering green from the target pushes a* up
    data = np.broadcast_to(TARGET.as_array(), (2, 2, 3)).copy()
    data[..., 1] = 0.45
    data[0, 0, 1] = 0.43
    img = cs.PixelImage(data, cs.Encoding.SRGB)
    assert np.all(cs.srgb_to_lab_array(data)[..., 1] > TARGET.to(cs.Encoding.LAB).c1)
    da = report.to_uint8(report.render_heatmap(img, TARGET, np.ones((2, 2), bool))["da"])
    for px in da.reshape(-1, 3):
        hits = [i for i in range(256) if np.array_equal(report.DIVERGING_RAMP[i], px)]
        assert hits and min(hits) >= 128


def test_png_is_deterministic_and_tagged(tmp_path):
    rng = np.random.default_rng(1)
    img = cs.PixelImage(rng.random((6, 6, 3)), cs.Encoding.SRGB)
    a = report.write_png(img, tmp_path / "a.png")
    b = report.write_png(img, tmp_path / "b.png")
    assert a.read_bytes() == b.read_bytes()
    with Image.open(a) as im:
        assert im.mode == "RGB" and im.size == (6, 6)
        assert not im.info.get("interlace")
    assert b"sRGB" in a.read_bytes()


def test_thresholds_strip(tmp_path):
    mask = np.zeros((4, 4), bool)
    mask[:2] = True
    img = _const(TARGET.as_array())
    rep = report.threshold_satisfaction(img, TARGET, mask)
    strip = report.to_uint8(report.render_thresholds(rep, mask))
    assert strip.shape == (4, 5 * 4 + 4 * 2, 3)
    assert np.all(strip[:2, :4] == report.SATISFIED)
    assert np.all(strip[2:, :4] == report.OUTSIDE_ROI)


@pytest.fixture(scope="module")
def small_run():
    cfg = GuidanceConfig(height=16, width=16, roi=Roi(4, 4, 8, 8), N=12)
    final, log = run_guided_inpaint(cfg)
    mask = prepare(cfg).mask
    return cfg, final, log, mask


def test_summary_and_log_round_trip(tmp_path, small_run):
    cfg, final, log, mask = small_run
    stats = report.roi_delta_e_stats(final, cfg.target_srgb, mask)
    rep = report.threshold_satisfaction(final, cfg.target_srgb, mask)
    summary, table = report.write_run_summary(log, stats, rep, cfg, tmp_path, device="test-host")
    text = summary.read_text(encoding="utf-8")
    assert "target.srgb = [1.00, 0.53, 0.60]" in text
    assert "target.lab = 70.13, 47.11, 11.37" in text
    assert "dE (Taylor)" in text and "device = test-host" in text
    assert "toggles.Angad = True" in text
    lines = table.read_text().splitlines()
    assert lines[0] == ",".join(report.LOG_COLUMNS)
    assert len(lines) == 1 + cfg.N
    back = report.read_log_csv(table)
    for a, b in zip(log.records, back):
        assert a.step_index == b.step_index and a.timestep == b.timestep and a.nudged == b.nudged
        for x, y in [(a.L_total, b.L_total), (a.grad_norm, b.grad_norm), (a.gate, b.gate)]:
            assert y == pytest.approx(x, rel=1e-8, abs=1e-300)
        np.testing.assert_allclose(b.roi_mean_lab.as_array(), a.roi_mean_lab.as_array(), rtol=1e-8)


def test_summary_unwritable_path(tmp_path, small_run):
    cfg, final, log, mask = small_run
    stats = report.roi_delta_e_stats(final, cfg.target_srgb, mask)
    rep = report.threshold_satisfaction(final, cfg.target_srgb, mask)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        report.write_run_summary(log, stats, rep, cfg, blocker / "sub")


def test_delta_e_reference_pair():
    a = cs.ColorTriple(69.97, 47.40, 11.54, cs.Encoding.LAB)
    b = cs.ColorTriple(62.71, 25.60, -6.48, cs.Encoding.LAB)
    assert report.delta_e00_taylor(a, b) == pytest.approx(math.hypot(7.26, 21.80, 18.02))
