"""Merit functions: foveated field weights and the multi-configuration AR merit."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

#: Eccentricity (deg) at which acuity halves.
ACUITY_E2_DEG = 2.3
#: Gaze range (deg) inside which weights never drop below their value at the edge.
PLATEAU_DEG = 5.0
#: Squared-spot penalty (mm^2) for a field that cannot be traced.
UNTRACEABLE_MM2 = 1e6


def _acuity(e, e2=ACUITY_E2_DEG):
    return 1.0 / (1.0 + e / e2)


def foveated_weights(eccentricities, e2=ACUITY_E2_DEG, plateau_deg=PLATEAU_DEG):
    """Relative field weights ``1 / (1 + e / e2)`` (1 at the fovea).

    Inside ``plateau_deg`` the weight is floored at its value on the plateau
    edge, which guarantees the 5 degree gaze range; the default curve is
    already monotone, so there the floor is inactive.
    """
    e = np.asarray(eccentricities, float)
    if np.any(e < 0):
        raise ValueError("eccentricities must be non-negative")
    w = _acuity(e, e2)
    floor = _acuity(plateau_deg, e2)
    w = np.where(e <= plateau_deg, np.maximum(w, floor), w)
    return [float(v) for v in w]


# --------------------------------------------------------------------------
# Multi-configuration AR merit
#
# Image quality is scored on the reversed display path (pupil -> display):
# object fields are viewing angles, the image is the spot on the display.

#: Physical limits of the in-coupling chain (mm).
MIN_THICKNESS_MM = 1.0
MIN_GAP_MM = 0.2
MAX_STACK_MM = 8.5
THICKNESS_PARAMS = ("bsl_thickness_mm", "cylinder_depth_mm", "waveguide_depth_mm")
GAP_PARAMS = ("display_gap_mm", "prism_gap_mm")


@dataclass(frozen=True)
class ARMeritSpec:
    """What the AR merit samples and how it weighs the terms.

    Fields form a ``field_grid x field_grid`` lattice of viewing angles over
    the half field of view ``x >= 0`` (the path is mirror symmetric in x).
    ``field_weights`` overrides the foveated weights; with ``uniform`` every
    field weighs 1.  ``penalty_weight`` scales the squared constraint
    violations (mm^2 per mm^2).
    """

    eye_reliefs_mm: tuple = (12.0, 14.0, 16.0, 18.0, 20.0)
    fov_deg: tuple = (40.0, 20.0)
    field_grid: int = 5
    grid_rings: int = 2
    wavelengths: tuple = (0.5876,)
    field_weights: tuple = None
    uniform: bool = False
    penalty_weight: float = 1.0

    def __post_init__(self):
        from ..errors import ConfigError

        if not self.eye_reliefs_mm:
            raise ConfigError("at least one eye-relief configuration is required")
        for d in self.eye_reliefs_mm:
            if not 12.0 <= d <= 20.0:
                raise ConfigError(f"eye relief {d} mm outside the 12-20 mm design range")
        if self.field_grid < 1 or self.grid_rings < 1:
            raise ConfigError("field_grid and grid_rings must be >= 1")
        if len(self.fov_deg) != 2 or min(self.fov_deg) < 0:
            raise ConfigError("fov_deg must be two non-negative angles")
        if self.field_weights is not None:
            w = np.asarray(self.field_weights, float)
            if len(w) != self.field_grid ** 2 or np.any(w < 0) or not np.any(w > 0):
                raise ConfigError("field_weights must be non-negative, one per field, at least one positive")
        if self.penalty_weight < 0:
            raise ConfigError("penalty_weight must be non-negative")

    def field_angles(self):
        """(x_deg, y_deg) per field, row-major from the lowest row."""
        n = self.field_grid
        h, v = self.fov_deg
        xs = np.linspace(0.0, 0.5 * h, n) if n > 1 else np.zeros(1)
        ys = np.linspace(-0.5 * v, 0.5 * v, n) if n > 1 else np.zeros(1)
        return [(float(x), float(y)) for y in ys for x in xs]

    def fields(self, image_distance_mm):
        from ..tracer import Field

        vergence = -1000.0 / image_distance_mm
        return [Field(x, y, vergence) for x, y in self.field_angles()]

    def eccentricities(self):
        return [
            math.degrees(math.atan(math.hypot(math.tan(math.radians(x)), math.tan(math.radians(y)))))
            for x, y in self.field_angles()
        ]

    @property
    def weights(self):
        if self.field_weights is not None:
            return [float(w) for w in self.field_weights]
        if self.uniform:
            return [1.0] * self.field_grid ** 2
        return foveated_weights(self.eccentricities())


def _bsl_edge(params):
    from ..surfaces import Standard

    h = np.array([params.bsl_semi_aperture_mm])
    zero = np.zeros(1)
    z1, _, _, ok1 = Standard.from_radius(params.bsl_display_side_radius_mm).evaluate(h, zero)
    z2, _, _, ok2 = Standard.from_radius(params.bsl_prism_side_radius_mm).evaluate(h, zero)
    if not (ok1[0] and ok2[0]):
        return 0.0
    return float(params.bsl_thickness_mm - z1[0] + z2[0])


def constraint_penalties(params):
    """Exterior penalty residuals (mm) for the chain's length limits.

    Order: one per minimum thickness, the lens edge, one per minimum gap,
    then the stack.
    """
    r = [max(0.0, MIN_THICKNESS_MM - getattr(params, n)) for n in THICKNESS_PARAMS]
    r.append(max(0.0, MIN_THICKNESS_MM - _bsl_edge(params)))
    r += [max(0.0, MIN_GAP_MM - getattr(params, n)) for n in GAP_PARAMS]
    stack = sum(getattr(params, n) for n in THICKNESS_PARAMS + GAP_PARAMS)
    r.append(max(0.0, stack - MAX_STACK_MM))
    return np.array(r)


def tir_margins(result, bounce_indices):
    """``sin(incidence) - n_out/n_in`` at each bounce for every ray (>= 0 means TIR).

    Rays that never reach a bounce get -1.
    """
    out = np.full((result.n_rays, len(bounce_indices)), -1.0)
    for k, i in enumerate(bounce_indices):
        reached = result.codes[:, i] >= 0
        d_in = result.directions[:, i - 1]
        nrm = result.normals[:, i]
        cos = np.abs(np.sum(d_in * nrm, axis=1))
        sin = np.sqrt(np.clip(1.0 - cos ** 2, 0.0, 1.0))
        with np.errstate(invalid="ignore", divide="ignore"):
            outside = result.system.surfaces[i].material.index(result.wavelength)
            margin = sin - outside / result.n_in[:, i]
        out[:, k] = np.where(reached & np.isfinite(margin), margin, -1.0)
    return out


@dataclass
class MeritResult:
    value: float
    residuals: np.ndarray
    spot_terms: np.ndarray  # weighted squared RMS radius per (config, wavelength, field), mm^2
    penalty_terms: np.ndarray

    @property
    def penalty(self):
        return float(np.sum(self.penalty_terms))


def build_configurations(params, lens, spec):
    """One AR system per eye relief in ``spec``; ``None`` where the build fails."""
    from ..errors import OpticsError
    from .ar import build_ar_system

    out = []
    for d_e in spec.eye_reliefs_mm:
        try:
            out.append(build_ar_system(params, lens=lens, eye_relief_mm=d_e))
        except OpticsError:
            out.append(None)
    return out


def ar_merit(systems, spec, params=None, threads=1):
    """Weighted squared display-spot RMS over configurations plus penalties.

    Args:
        systems: built AR systems sharing one parameter vector, one per eye
            relief; ``None`` marks a configuration that could not be built
            (its fields then count as untraceable, 1e6 mm^2 each).
        params: parameters for the length penalties (defaults to the first
            built system's).

    Returns:
        MeritResult with ``sum(residuals**2) == value``.
    """
    from .ar import reverse_path
    from ..tracer import hexapolar_grid, trace_fields

    grid = hexapolar_grid(spec.grid_rings)
    m = len(grid)
    if params is None:
        params = next((s.params for s in systems if s is not None), None)
    if params is None:
        raise ValueError("no built system and no parameters given")
    fields = spec.fields(params.image_distance_mm)
    weights = spec.weights
    res_parts, spot_terms, tir_terms = [], [], []
    for ar in systems:
        rev = None if ar is None else reverse_path(ar)
        for wl in spec.wavelengths:
            bundles = [None] * len(fields)
            if rev is not None:
                try:
                    bundles = trace_fields(rev, fields, grid, wl, threads=threads)
                except Exception:
                    pass
            for w, b in zip(weights, bundles):
                r = np.zeros((m, 2))
                alive = None if b is None else b.alive
                if b is None or alive.sum() < 3:
                    r[:] = math.sqrt(w * UNTRACEABLE_MM2 / (2 * m))
                else:
                    pts = b.terminal_local()[:, :2]
                    r[alive] = (pts - pts.mean(axis=0)) * math.sqrt(w / alive.sum())
                res_parts.append(r.ravel())
                spot_terms.append(float(np.sum(r ** 2)))
                # TIR margin of the chief ray (pupil centre) at both bounces
                if b is None:
                    tir_terms.extend([1.0, 1.0])
                else:
                    bounce = [rev.index_of("lens_rear_tir"), rev.index_of("lens_front_tir")]
                    marg = tir_margins(b.result.subset(np.array([0])), bounce)[0]
                    tir_terms.extend(np.maximum(0.0, -marg))
    pen = np.concatenate([constraint_penalties(params), np.array(tir_terms)]) * math.sqrt(spec.penalty_weight)
    residuals = np.concatenate(res_parts + [pen])
    return MeritResult(float(residuals @ residuals), residuals, np.array(spot_terms), pen ** 2)
