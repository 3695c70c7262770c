"""Prescription-driven schematic eye (myopic Atchison model with corneal astigmatism).

The eye is built with light travelling along +z, cornea vertex at
``z = cornea_z``.  Surfaces, in order::

    0 cornea (biconic)   1 posterior cornea   2 stop (iris)
    3 anterior lens      4 lens mid-plane      5 posterior lens   6 retina

Media behind surfaces 3 and 4 are gradient-index; their polynomials use the
local frame of the surface where each GRIN zone begins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateError, NotConverged
from .materials import (
    AQUEOUS,
    CORNEA,
    DESIGN_WAVELENGTH,
    LENS_ANTERIOR,
    LENS_POSTERIOR,
    STOP_MEDIUM,
    VITREOUS,
)
from .surfaces import Biconic, Mode, Plane, Standard, Surface, SurfacePose
from .tracer import Field, OpticalSystem, hexapolar_grid, trace_bundle

PUPIL_DIAMETER = 4.0  # mm
ACCOMMODATION_AMPLITUDE = 4.0  # D
CORNEA_THICKNESS = 0.55
AQUEOUS_DEPTH = 3.05
STOP_TO_LENS = 0.1
LENS_ANTERIOR_THICKNESS = 1.44
LENS_POSTERIOR_THICKNESS = 2.16
#: Iris (stop) plane behind the corneal vertex, mm.
STOP_Z = CORNEA_THICKNESS + AQUEOUS_DEPTH


@dataclass(frozen=True)
class Prescription:
    """Spectacle prescription in diopters (minus-cylinder form) and degrees."""

    sph: float = 0.0
    cyl: float = 0.0
    axis: float = 0.0
    add: float = 0.0

    def __post_init__(self):
        for name in ("sph", "cyl", "axis", "add"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ConfigError(f"prescription {name} must be finite")
        if self.cyl > 0:
            raise ConfigError("CYL must be written in minus-cylinder form (CYL <= 0)")
        if not 0.0 <= self.axis < 180.0:
            raise ConfigError("AXIS must lie in [0, 180) degrees")
        if self.add < 0:
            raise ConfigError("ADD must be non-negative")

    @property
    def sr(self):
        """Spectacle refraction used by the eye-model formulas."""
        return self.sph

    @property
    def spherical_equivalent(self):
        return self.sph + 0.5 * self.cyl

    def to_dict(self):
        return {"sph": self.sph, "cyl": self.cyl, "axis": self.axis, "add": self.add}

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - {"sph", "cyl", "axis", "add"}
        if unknown:
            raise ConfigError(f"unknown prescription keys: {sorted(unknown)}")
        return cls(float(data.get("sph", 0.0)), float(data.get("cyl", 0.0)), float(data.get("axis", 0.0)), float(data.get("add", 0.0)))


def cornea_radius_from_cyl(r_y, n_d, cyl):
    """Cornea radius (mm) in the second meridian after adding ``cyl`` diopters.

    ``D_y = (n_d - 1) / r_y`` and ``D_x = D_y + cyl``; radii in metres for
    the diopter arithmetic.
    """
    if r_y <= 0:
        raise DegenerateError("r_y must be positive")
    r_y_m = r_y * 1e-3
    den = (n_d - 1.0) + cyl * r_y_m
    if den <= 0:
        raise DegenerateError(f"cylinder {cyl} D leaves no positive corneal power")
    return r_y * (n_d - 1.0) / den


@dataclass(frozen=True)
class EyeModel:
    system: OpticalSystem
    rx: Prescription
    cornea_rotation: float
    axial_length: float
    extrapolated: bool = False
    parameters: dict = field(default_factory=dict, compare=False)

    @property
    def retina_index(self):
        return len(self.system.surfaces) - 1

    def with_front_optics(self, surfaces, reference_z=None):
        """System with ``surfaces`` (already posed in eye coordinates) ahead of the cornea.

        Collimated fields are launched just in front of the first added
        surface unless ``reference_z`` is given.
        """
        surfaces = tuple(surfaces)
        base = self.system
        if reference_z is None:
            reference_z = min(float(s.pose.decenter[2]) for s in surfaces) - 1.0 if surfaces else 0.0
        return OpticalSystem(
            surfaces + base.surfaces,
            stop_index=base.stop_index + len(surfaces),
            pupil_diameter=base.pupil_diameter,
            reference_point=(0.0, 0.0, reference_z),
        )


def eye_surfaces(rx, cornea_z=0.0, pupil_diameter=PUPIL_DIAMETER):
    """Surface list of the schematic eye for prescription ``rx``."""
    sr = rx.sr
    r_y = 7.77 + 0.022 * sr
    # The prescription's minus cylinder is the correction; the cornea carries
    # the opposite (ocular) astigmatism, so the eye needs exactly ``rx`` to see.
    r_x = cornea_radius_from_cyl(r_y, CORNEA.n_d, -rx.cyl)
    rotation = 90.0 - rx.axis
    vitreous = 16.28 - 0.299 * sr
    retina = Biconic(
        1.0 / (-12.91 - 0.094 * sr),
        1.0 / (-12.72 + 0.004 * sr),
        0.7 + 0.026 * sr,
        0.225 + 0.017 * sr,
    )
    z = cornea_z
    surfaces = []

    def add(profile, material, name, thickness, **kw):
        nonlocal z
        surfaces.append(Surface(profile, SurfacePose((0.0, 0.0, z), tilt_z=kw.pop("tilt_z", 0.0)), Mode.REFRACT, material, name=name, **kw))
        z += thickness

    add(Biconic(1.0 / r_x, 1.0 / r_y, -0.15, -0.15), CORNEA, "cornea", CORNEA_THICKNESS, tilt_z=rotation)
    add(Standard(1.0 / 6.40, -0.275), AQUEOUS, "aqueous", AQUEOUS_DEPTH)
    add(Plane(), STOP_MEDIUM, "stop", STOP_TO_LENS, aperture=(pupil_diameter / 2, pupil_diameter / 2), aperture_shape="ellipse")
    add(Standard(1.0 / 11.48, -5.0), LENS_ANTERIOR, "lens_anterior", LENS_ANTERIOR_THICKNESS)
    add(Plane(), LENS_POSTERIOR, "lens_posterior", LENS_POSTERIOR_THICKNESS)
    add(Standard(1.0 / -5.90, -2.0), VITREOUS, "vitreous", vitreous)
    add(retina, VITREOUS, "retina", 0.0)
    params = {"r_x_mm": r_x, "r_y_mm": r_y, "vitreous_mm": vitreous, "cornea_rotation_deg": rotation}
    return surfaces, params


def build_eye(rx, pupil_diameter=PUPIL_DIAMETER):
    """Schematic eye for ``rx`` as an optical system whose image surface is the retina."""
    surfaces, params = eye_surfaces(rx, 0.0, pupil_diameter)
    system = OpticalSystem(tuple(surfaces), stop_index=2, pupil_diameter=pupil_diameter, reference_point=(0.0, 0.0, 0.0))
    axial = (
        CORNEA_THICKNESS + AQUEOUS_DEPTH + STOP_TO_LENS + LENS_ANTERIOR_THICKNESS + LENS_POSTERIOR_THICKNESS + params["vitreous_mm"]
    )
    return EyeModel(system, rx, params["cornea_rotation_deg"], axial, extrapolated=rx.sr > 0, parameters=params)


def rms_radius(points):
    """RMS distance of (N, 2) or (N, 3) points from their centroid."""
    pts = np.asarray(points, float)
    if len(pts) == 0:
        return math.nan
    c = pts.mean(axis=0)
    return float(np.sqrt(np.mean(np.sum((pts - c) ** 2, axis=1))))


def retinal_rms(system, fld=None, grid=None, wavelength=DESIGN_WAVELENGTH):
    """RMS spot radius (mm) on the last surface for one field; NaN if all rays fail."""
    bundle = trace_bundle(system, fld or Field(), grid if grid is not None else hexapolar_grid(6), wavelength)
    pts = bundle.terminal_local()
    if len(pts) < 3:
        return math.nan
    return rms_radius(pts[:, :2])


def _golden(f, a, b, tol):
    g = (math.sqrt(5) - 1) / 2
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def best_vergence(system, lo=-1.0, hi=8.0, step=0.5, tol=0.01, grid=None, metric=None):
    """Object vergence (D) minimising an on-axis retinal metric (default RMS spot)."""
    metric = metric or (lambda v: retinal_rms(system, Field(0.0, 0.0, v), grid))

    def f(v):
        r = metric(v)
        return r if math.isfinite(r) else 1e9

    scan = np.arange(lo, hi + 0.5 * step, step)
    vals = np.array([f(v) for v in scan])
    i = int(np.argmin(vals))
    if i == 0 or i == len(scan) - 1:
        raise NotConverged(f"best focus at scan boundary ({scan[i]:+.2f} D)")
    return _golden(f, scan[i - 1], scan[i + 1], tol)


def far_point(eye, grid=None):
    """Far point of a relaxed eye in diopters (positive: real point in front)."""
    return best_vergence(eye.system, grid=grid)
