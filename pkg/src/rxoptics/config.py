"""Design configuration files (JSON), validated before any computation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

from .errors import ConfigError
from .eye import Prescription

_BLOCKS = {
    "prescription": {"sph", "cyl", "axis", "add"},
    "lens": {"thickness_mm", "material"},
    "display": {"width_mm", "height_mm", "pixels_x", "pixels_y", "pixel_pitch_um"},
    "optimizer": {"max_iters", "tol", "frozen"},
}
_TOP = set(_BLOCKS) | {"eye_relief_mm", "seed"}
_INTS = {"pixels_x", "pixels_y", "max_iters"}
#: Names accepted for the built-in seed geometry.
SEED_NAMES = ("prototype", "table3")


@dataclass(frozen=True)
class DesignConfig:
    rx: Prescription = Prescription(-1.0)
    lens_thickness_mm: float = 5.0
    lens_material: object = "COP"
    display: dict = field(default_factory=dict)
    eye_reliefs_mm: tuple = (12.0, 14.0, 16.0, 18.0, 20.0)
    max_iters: int = 500
    tol: float = 1e-6
    frozen: tuple = ()
    seed: object = "prototype"

    def design_params(self, seed=None):
        """Seed geometry with this config's lens and display blocks applied."""
        from .designer.ar import PROTOTYPE, DesignParams

        s = self.seed if seed is None else seed
        if isinstance(s, str):
            if s not in SEED_NAMES:
                raise ConfigError(f"unknown seed {s!r} (use 'prototype' or a parameter object)")
            base = PROTOTYPE
        elif isinstance(s, DesignParams):
            base = s
        else:
            base = DesignParams.from_dict(s)
        kw = {f"display_{k}" if k in ("width_mm", "height_mm") else k: v for k, v in self.display.items()}
        return replace(base, lens_thickness_mm=self.lens_thickness_mm, lens_material=self.lens_material, **kw)


def _number(path, v, integer=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path} must be a number")
    if not math.isfinite(v):
        raise ConfigError(f"{path} must be finite")
    if integer and int(v) != v:
        raise ConfigError(f"{path} must be an integer")
    return int(v) if integer else float(v)


def _block(data, name):
    b = data.get(name, {})
    if not isinstance(b, dict):
        raise ConfigError(f"{name} must be an object")
    unknown = set(b) - _BLOCKS[name]
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {sorted(unknown)}")
    return b


def parse_config(data):
    """Validate a config mapping and build a :class:`DesignConfig`.

    Raises:
        ConfigError: unknown keys, wrong types or out-of-range values.
    """
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(data) - _TOP
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kw = {}
    rx = _block(data, "prescription")
    if "prescription" in data:
        kw["rx"] = Prescription(**{k: _number(f"prescription.{k}", v) for k, v in rx.items()})
    lens = _block(data, "lens")
    if "thickness_mm" in lens:
        t = _number("lens.thickness_mm", lens["thickness_mm"])
        if not t >= 1.0:
            raise ConfigError("lens.thickness_mm must be at least 1 mm")
        kw["lens_thickness_mm"] = t
    if "material" in lens:
        from .materials import material_from_spec

        material_from_spec(lens["material"])
        kw["lens_material"] = lens["material"]
    disp = _block(data, "display")
    checked = {}
    for k, v in disp.items():
        x = _number(f"display.{k}", v, k in _INTS)
        if not x > 0:
            raise ConfigError(f"display.{k} must be positive")
        checked[k] = x
    kw["display"] = checked
    if "eye_relief_mm" in data:
        er = data["eye_relief_mm"]
        if not isinstance(er, list) or not er:
            raise ConfigError("eye_relief_mm must be a non-empty list")
        vals = tuple(_number("eye_relief_mm[]", v) for v in er)
        if any(not 12.0 <= v <= 20.0 for v in vals):
            raise ConfigError("eye_relief_mm values must lie in [12, 20] mm")
        kw["eye_reliefs_mm"] = vals
    opt = _block(data, "optimizer")
    if "max_iters" in opt:
        n = _number("optimizer.max_iters", opt["max_iters"], True)
        if n < 1:
            raise ConfigError("optimizer.max_iters must be at least 1")
        kw["max_iters"] = n
    if "tol" in opt:
        tol = _number("optimizer.tol", opt["tol"])
        if not tol > 0:
            raise ConfigError("optimizer.tol must be positive")
        kw["tol"] = tol
    if "frozen" in opt:
        fr = opt["frozen"]
        from .designer.ar import ALL_PARAMS

        if fr == "all":
            fr = list(ALL_PARAMS)
        if not isinstance(fr, list) or not all(isinstance(n, str) for n in fr):
            raise ConfigError("optimizer.frozen must be a list of parameter names or 'all'")
        bad = [n for n in fr if n not in ALL_PARAMS]
        if bad:
            raise ConfigError(f"unknown parameters in optimizer.frozen: {bad}")
        kw["frozen"] = tuple(fr)
    if "seed" in data:
        s = data["seed"]
        if isinstance(s, str):
            if s not in SEED_NAMES:
                raise ConfigError("seed must be 'prototype' or a parameter object")
        elif isinstance(s, dict):
            from .designer.ar import DesignParams

            DesignParams.from_dict(s)
        else:
            raise ConfigError("seed must be 'prototype' or a parameter object")
        kw["seed"] = s
    cfg = DesignConfig(**kw)
    cfg.design_params()
    return cfg


def load_config(path):
    """Read and validate a JSON config file."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(data)


def load_params(spec):
    """Design parameters from ``'prototype'`` or a JSON file written by ``design-ar``."""
    from .designer.ar import PROTOTYPE, DesignParams

    if spec is None or spec in SEED_NAMES:
        return PROTOTYPE
    try:
        with open(spec) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read parameters {spec}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"parameters {spec} are not valid JSON: {exc}") from exc
    if isinstance(data, dict) and "params" in data and isinstance(data["params"], dict):
        data = data["params"]
    if not isinstance(data, dict):
        raise ConfigError("parameter file must hold a JSON object")
    try:
        return DesignParams.from_dict(data)
    except TypeError as exc:
        raise ConfigError(f"bad parameter file {spec}: {exc}") from exc
