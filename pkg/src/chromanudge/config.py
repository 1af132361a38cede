"""Flat ``key = value`` serialization of :class:`GuidanceConfig` and presets.

Keys are dotted (``loss.tau_pix``, ``toggles.Angad``) so a config file diffs
line by line. Floats are written with ``repr`` which round-trips exactly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from . import colorspace as cs
from .diffusion import FlatColorPrior
from .engine import GuidanceConfig, Roi
from .losses import LossHyperparams


class ConfigError(ValueError):
    """A config key is unknown or its value is malformed or out of range."""

    def __init__(self, key: str, msg: str) -> None:
        super().__init__(f"{key}: {msg}")
        self.key = key


# ---------------------------------------------------------------------------
# value codecs


def _fmt_float(v: float) -> str:
    return repr(float(v))


def _parse_float(s: str) -> float:
    return float(s)


def _parse_int(s: str) -> int:
    f = float(s)
    if f != int(f):
        raise ValueError(f"expected an integer, got {s!r}")
    return int(f)


def _fmt_bool(v: bool) -> str:
    return "True" if v else "False"


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _floats(s: str, n: int) -> list[float]:
    parts = [p for p in s.replace("[", "").replace("]", "").replace("(", "").replace(")", "").split(",")]
    if len(parts) != n:
        raise ValueError(f"expected {n} comma-separated numbers, got {s!r}")
    return [float(p) for p in parts]


def _color_codec(encoding: cs.Encoding):
    def fmt(c: cs.ColorTriple) -> str:
        return ", ".join(_fmt_float(v) for v in c)

    def parse(s: str) -> cs.ColorTriple:
        return cs.ColorTriple(*_floats(s, 3), encoding)

    return fmt, parse


def _fmt_roi(r: Roi) -> str:
    return f"{r.x}, {r.y}, {r.w}, {r.h}"


def _parse_roi(s: str) -> Roi:
    vals = _floats(s, 4)
    if any(v != int(v) for v in vals):
        raise ValueError(f"roi needs integer x, y, w, h, got {s!r}")
    return Roi(*(int(v) for v in vals))


def _fmt_opt_float(v: float | None) -> str:
    return "none" if v is None else _fmt_float(v)


def _parse_opt_float(s: str) -> float | None:
    return None if s.strip().lower() in ("none", "") else float(s)


def _fmt_opt_str(v: str | None) -> str:
    return "none" if v is None else v


def _parse_opt_str(s: str) -> str | None:
    return None if s.strip().lower() in ("none", "") else s.strip()


FLOAT = (_fmt_float, _parse_float)
INT = (str, _parse_int)
BOOL = (_fmt_bool, _parse_bool)
SRGB = _color_codec(cs.Encoding.SRGB)
LINEAR = _color_codec(cs.Encoding.LINEAR_RGB)


@dataclass(frozen=True)
class Field:
    key: str
    group: str | None  # None for top-level GuidanceConfig fields
    attr: str
    fmt: Callable[[Any], str]
    parse: Callable[[str], Any]


def _f(key: str, group: str | None, attr: str, codec) -> Field:
    return Field(key, group, attr, codec[0], codec[1])


FIELDS: tuple[Field, ...] = (
    _f("run.N", None, "N", INT),
    _f("run.seed", None, "seed", INT),
    _f("run.height", None, "height", INT),
    _f("run.width", None, "width", INT),
    _f("run.roi", None, "roi", (_fmt_roi, _parse_roi)),
    _f("run.mask_file", None, "mask_file", (_fmt_opt_str, _parse_opt_str)),
    _f("run.snapshot_every", None, "snapshot_every", INT),
    _f("parameters.eta", None, "eta", FLOAT),
    _f("parameters.lambda_guidance", None, "lambda_lin", FLOAT),
    _f("parameters.lambda_master", None, "lambda_master", FLOAT),
    _f("parameters.s_cfg", None, "s_cfg", FLOAT),
    _f("parameters.k", None, "k", FLOAT),
    _f("parameters.f_start", None, "f_start", FLOAT),
    _f("parameters.f_stop", None, "f_stop", FLOAT),
    _f("parameters.gate_s", None, "gate_s", (_fmt_opt_float, _parse_opt_float)),
    _f("toggles.LinearRGB", None, "enable_lin_rgb", BOOL),
    _f("toggles.Angad", None, "enable_cvar", BOOL),
    _f("toggles.BgAnchor", None, "enable_bg_anchor", BOOL),
    _f("color.target_srgb", None, "target_srgb", SRGB),
    _f("color.bg_srgb", None, "bg_srgb", SRGB),
    *(
        _f(f"loss.{f.name}", "loss_hp", f.name, FLOAT)
        for f in dataclasses.fields(LossHyperparams)
    ),
    _f("prior.mu_cond", "prior", "mu_cond", LINEAR),
    _f("prior.sigma_cond", "prior", "sigma_cond", FLOAT),
    _f("prior.mu_uncond", "prior", "mu_uncond", LINEAR),
    _f("prior.sigma_uncond", "prior", "sigma_uncond", FLOAT),
    _f("prior.sigma_texture", "prior", "sigma_texture", FLOAT),
    _f("diffusion.T_train", None, "T_train", INT),
    _f("diffusion.beta_start", None, "beta_start", FLOAT),
    _f("diffusion.beta_end", None, "beta_end", FLOAT),
    _f("diffusion.resample_anchor_noise", None, "resample_anchor_noise", BOOL),
)

BY_KEY = {f.key: f for f in FIELDS}

# short and historical names accepted on input
ALIASES = {
    "LinearRGB": "toggles.LinearRGB",
    "Angad": "toggles.Angad",
    "BgAnchor": "toggles.BgAnchor",
    "enable_lin_rgb": "toggles.LinearRGB",
    "enable_cvar": "toggles.Angad",
    "enable_bg_anchor": "toggles.BgAnchor",
    "lambda_guidance": "parameters.lambda_guidance",
    "lambda_lin": "parameters.lambda_guidance",
    "parameters.lambda_lin": "parameters.lambda_guidance",
    "steps": "run.N",
}
for _fld in FIELDS:
    if _fld.group is None:
        ALIASES.setdefault(_fld.attr, _fld.key)
        ALIASES.setdefault(_fld.key.split(".", 1)[1], _fld.key)


def canonical_key(key: str) -> str:
    key = key.strip()
    if key in BY_KEY:
        return key
    if key in ALIASES:
        return ALIASES[key]
    raise ConfigError(key, "unknown config key")


def serialize(cfg: GuidanceConfig) -> str:
    """Render every field of ``cfg`` as sorted-by-section ``key = value`` lines."""
    lines = []
    for f in FIELDS:
        holder = cfg if f.group is None else getattr(cfg, f.group)
        lines.append(f"{f.key} = {f.fmt(getattr(holder, f.attr))}")
    return "\n".join(lines) + "\n"


def parse_pairs(text: str, source: str = "<config>") -> list[tuple[str, str]]:
    """Split ``key = value`` lines; ``#`` starts a comment."""
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", f"expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def apply_overrides(cfg: GuidanceConfig, pairs) -> GuidanceConfig:
    """Return ``cfg`` with the given ``(key, value)`` strings applied in order.

    Raises:
        ConfigError: on unknown keys, unparsable values or a config that
            fails validation, naming the offending key.
    """
    top: dict[str, Any] = {}
    groups: dict[str, dict[str, Any]] = {"loss_hp": {}, "prior": {}}
    for key, value in pairs:
        f = BY_KEY[canonical_key(key)]
        try:
            parsed = f.parse(value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f.key, str(exc)) from None
        (top if f.group is None else groups[f.group])[f.attr] = parsed
        # remember which key set each attribute, for error messages
        top.setdefault("__keys__", {})[f.attr] = f.key

    keys = top.pop("__keys__", {})
    try:
        loss_hp = dataclasses.replace(cfg.loss_hp, **groups["loss_hp"])
    except ValueError as exc:
        raise ConfigError(_key_in_message(exc, "loss."), str(exc)) from None
    try:
        prior = dataclasses.replace(cfg.prior, **groups["prior"])
    except ValueError as exc:
        raise ConfigError(_key_in_message(exc, "prior."), str(exc)) from None
    try:
        return dataclasses.replace(cfg, loss_hp=loss_hp, prior=prior, **top)
    except ValueError as exc:
        attr = str(exc).split(":", 1)[0]
        raise ConfigError(keys.get(attr, _attr_key(attr)), str(exc).split(":", 1)[-1].strip()) from None


def _attr_key(attr: str) -> str:
    for f in FIELDS:
        if f.group is None and f.attr == attr:
            return f.key
    return attr


def _key_in_message(exc: Exception, prefix: str) -> str:
    msg = str(exc)
    for f in FIELDS:
        if f.key.startswith(prefix) and f.attr in msg.split()[0:2]:
            return f.key
    return prefix.rstrip(".")


def parse_config(text: str, base: GuidanceConfig | None = None, source: str = "<config>") -> GuidanceConfig:
    return apply_overrides(base or GuidanceConfig(), parse_pairs(text, source))


def load_config(path, base: GuidanceConfig | None = None) -> GuidanceConfig:
    p = Path(path)
    return parse_config(p.read_text(encoding="utf-8"), base, source=str(p))


def parse_set_flags(items) -> list[tuple[str, str]]:
    pairs = []
    for item in items or ():
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, value = item.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


# ---------------------------------------------------------------------------
# presets


@dataclass(frozen=True)
class RunPreset:
    name: str
    config: GuidanceConfig


_BASE = GuidanceConfig(
    N=80, eta=0.009, lambda_lin=100.0, lambda_master=0.07, s_cfg=8.0, k=2.0, f_start=0.2, f_stop=1.0
)

PRESETS: dict[str, RunPreset] = {
    p.name: p
    for p in (
        RunPreset("cvar-lrgb", _BASE.with_(enable_lin_rgb=True, enable_cvar=True, enable_bg_anchor=True)),
        RunPreset("lrgb-only", _BASE.with_(enable_lin_rgb=True, enable_cvar=False, enable_bg_anchor=True)),
        RunPreset("no-guidance", _BASE.with_(enable_lin_rgb=False, enable_cvar=False, enable_bg_anchor=True)),
    )
}


def preset(name: str) -> GuidanceConfig:
    try:
        return PRESETS[name].config
    except KeyError:
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None
