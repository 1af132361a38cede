"""Color-accurate latent inpainting with perceptual loss guidance.

The package is organised bottom up: color conversions, ROI losses, the
guidance schedule, a small analytic diffusion backend, the guided sampling
loop, reporting, and a command-line front end.
"""

from __future__ import annotations

from .colorspace import ColorTriple, Encoding, PixelImage
from .engine import EngineAbort, GuidanceConfig, Roi, RunLog, run_guided_inpaint
from .losses import LossHyperparams

__all__ = [
    "ColorTriple",
    "Encoding",
    "EngineAbort",
    "GuidanceConfig",
    "LossHyperparams",
    "PixelImage",
    "Roi",
    "RunLog",
    "run_guided_inpaint",
]

__version__ = "0.1.0"
