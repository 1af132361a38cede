"""Regenerate the fixed color ramps shipped in src/chromanudge/data/.

The sequential ramp is matplotlib's "magma" sampled at 256 points; the
diverging ramp is built here as blue -> white -> red, interpolated in linear
light and mirrored so entry i and entry 255 - i have swapped red/blue.
Run once; the CSVs are checked in so rendering never depends on matplotlib.
"""

from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "chromanudge" / "data"


def to_srgb(lin):
    lin = np.clip(lin, 0.0, 1.0)
    return np.where(lin <= 0.0031308, lin * 12.92, 1.055 * lin ** (1 / 2.4) - 0.055)


def sequential():
    from matplotlib import colormaps

    rgba = colormaps["magma"](np.linspace(0.0, 1.0, 256))
    return np.rint(rgba[:, :3] * 255).astype(int)


def diverging():
    blue = np.array([0.02, 0.09, 0.45])
    white = np.ones(3)
    s = (127 - np.arange(128)) / 127.0  # 1 at the blue end, 0 next to the centre
    lower = white + (blue - white) * s[:, None]
    upper = lower[::-1, ::-1]  # mirror image with red and blue swapped
    return np.rint(to_srgb(np.concatenate([lower, upper])) * 255).astype(int)


def write(name, table):
    assert table.shape == (256, 3)
    lines = ["r,g,b"] + [f"{r},{g},{b}" for r, g, b in table]
    (OUT / name).write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    write("ramp_sequential.csv", sequential())
    write("ramp_diverging.csv", diverging())
