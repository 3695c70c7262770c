"""Prescription lens: closed-form thick-lens seed and eye-model optimisation.

Coordinates follow the eye: light travels along +z, the lens sits in front
of the cornea with its rear vertex ``eye_relief`` mm ahead of the iris plane.
The front surface is spherical; the rear one is a biconic turned about z by
``rear_rotation_deg`` (same convention as the corneal rotation), optionally
with a near-vision segment for ADD.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ..errors import ConfigError, GeometryError, NotConverged
from ..eye import STOP_Z, Prescription, build_eye
from ..materials import DESIGN_WAVELENGTH, material_from_spec, material_to_spec
from ..surfaces import Biconic, Bifocal, Mode, Standard, Surface, SurfacePose
from ..tracer import Field, hexapolar_grid, trace_fields
from .lm import levenberg_marquardt
from .merit import foveated_weights

EYE_RELIEFS_MM = (12.0, 14.0, 16.0, 18.0, 20.0)
#: Field grid (deg) spanning the 26 x 18 degree design field.
LENS_FIELDS_DEG = ((0.0, 0.0), (13.0, 0.0), (-13.0, 0.0), (0.0, 9.0), (0.0, -9.0))
ADD_BOUNDARY_MM = -4.0
MIN_THICKNESS_MM = 1.0
#: Penalty residual (mm) for a ray that fails to reach the retina.
LOST_RAY_MM = 1.0


def _diopters(curvature_per_mm, dn):
    return dn * curvature_per_mm * 1000.0


@dataclass(frozen=True)
class PrescriptionLensDesign:
    """Spherical front, biconic rear; curvatures in 1/mm, eye frame."""

    rx: Prescription
    front_curvature: float
    rear_curvature_x: float
    rear_curvature_y: float
    rear_rotation_deg: float
    thickness_mm: float
    material: object = "COP"
    semi_diameter_mm: float = 25.0
    add_boundary_y_mm: float = ADD_BOUNDARY_MM

    def __post_init__(self):
        if not self.thickness_mm >= MIN_THICKNESS_MM:
            raise ConfigError(f"lens thickness must be at least {MIN_THICKNESS_MM} mm")
        if not self.semi_diameter_mm > 0:
            raise ConfigError("semi-diameter must be positive")

    # -- geometry -------------------------------------------------------
    @property
    def glass(self):
        return material_from_spec(self.material)

    def index(self, wavelength=DESIGN_WAVELENGTH):
        return self.glass.index(wavelength)

    @property
    def front_radius_mm(self):
        return math.inf if self.front_curvature == 0 else 1.0 / self.front_curvature

    @property
    def rear_radius_x_mm(self):
        return math.inf if self.rear_curvature_x == 0 else 1.0 / self.rear_curvature_x

    @property
    def rear_radius_y_mm(self):
        return math.inf if self.rear_curvature_y == 0 else 1.0 / self.rear_curvature_y

    @property
    def add_curvature(self):
        """Extra rear curvature of the near segment (adds ADD to the back-vertex power)."""
        return self.rx.add / ((1.0 - self.index()) * 1000.0)

    def front_profile(self):
        return Standard(self.front_curvature)

    def rear_profile(self):
        base = Biconic(self.rear_curvature_x, self.rear_curvature_y)
        if self.rx.add > 0:
            return Bifocal(base, self.add_curvature, self.add_boundary_y_mm, self.rear_rotation_deg)
        return base

    def back_vertex_powers(self, wavelength=DESIGN_WAVELENGTH):
        """Paraxial back-vertex power (D) in the rear surface's local x and y meridians."""
        n = self.index(wavelength)
        f1 = _diopters(self.front_curvature, n - 1.0)
        t = self.thickness_mm * 1e-3
        front = f1 / (1.0 - t * f1 / n)
        return (
            _diopters(self.rear_curvature_x, 1.0 - n) + front,
            _diopters(self.rear_curvature_y, 1.0 - n) + front,
        )

    @property
    def cylinder_power(self):
        px, py = self.back_vertex_powers()
        return px - py

    def edge_thickness_mm(self, samples=360):
        """Minimum thickness on the rim circle of radius ``semi_diameter_mm``."""
        a = np.linspace(0.0, 2 * math.pi, samples, endpoint=False)
        r = self.semi_diameter_mm
        x, y = r * np.cos(a), r * np.sin(a)
        zf, _, _, okf = self.front_profile().evaluate(x, y)
        rot = math.radians(self.rear_rotation_deg)
        xl = math.cos(rot) * x + math.sin(rot) * y
        yl = -math.sin(rot) * x + math.cos(rot) * y
        zr, _, _, okr = self.rear_profile().evaluate(xl, yl)
        if not (okf.all() and okr.all()):
            return -math.inf
        return float(np.min(self.thickness_mm + zr - zf))

    def check(self):
        """Raise GeometryError when the rim is thinner than the 1 mm floor."""
        edge = self.edge_thickness_mm()
        if edge < MIN_THICKNESS_MM:
            raise GeometryError(f"edge thickness {edge:.3f} mm below {MIN_THICKNESS_MM} mm")
        return self

    def surfaces(self, eye_relief_mm, stop_z=STOP_Z, names=("lens_front", "lens_rear")):
        """Front and rear surfaces placed ``eye_relief_mm`` ahead of the iris plane."""
        rear_z = stop_z - eye_relief_mm
        front_z = rear_z - self.thickness_mm
        glass = self.glass
        from ..materials import AIR

        front = Surface(self.front_profile(), SurfacePose((0.0, 0.0, front_z)), Mode.REFRACT, glass, name=names[0])
        rear = Surface(
            self.rear_profile(),
            SurfacePose((0.0, 0.0, rear_z), tilt_z=self.rear_rotation_deg),
            Mode.REFRACT,
            AIR,
            name=names[1],
        )
        return front, rear

    # -- serialisation --------------------------------------------------
    def to_dict(self):
        px, py = self.back_vertex_powers()
        return {
            "prescription": self.rx.to_dict(),
            "front_radius_mm": _radius_out(self.front_curvature),
            "rear_radius_x_mm": _radius_out(self.rear_curvature_x),
            "rear_radius_y_mm": _radius_out(self.rear_curvature_y),
            "rear_rotation_deg": self.rear_rotation_deg,
            "thickness_mm": self.thickness_mm,
            "material": material_to_spec(self.glass),
            "semi_diameter_mm": self.semi_diameter_mm,
            "add_boundary_y_mm": self.add_boundary_y_mm,
            "back_vertex_power_x_D": px,
            "back_vertex_power_y_D": py,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            Prescription.from_dict(data["prescription"]),
            _curv_in(data["front_radius_mm"]),
            _curv_in(data["rear_radius_x_mm"]),
            _curv_in(data["rear_radius_y_mm"]),
            float(data["rear_rotation_deg"]),
            float(data["thickness_mm"]),
            data.get("material", "COP"),
            float(data.get("semi_diameter_mm", 25.0)),
            float(data.get("add_boundary_y_mm", ADD_BOUNDARY_MM)),
        )


def _radius_out(c):
    # JSON has no infinity; a flat surface is written as null
    return None if c == 0 else 1.0 / c


def _curv_in(r):
    return 0.0 if r is None or math.isinf(float(r)) else 1.0 / float(r)


def base_curve_diopters(spherical_equivalent):
    """Front-surface power from Vogel's rule for the spectacle base curve."""
    se = spherical_equivalent
    return se / 2.0 + 6.0 if se < 0 else se + 6.0


def direct_lens_profiles(rx, thickness_mm=5.0, material="COP", front_radius_mm=math.inf, wavelength=DESIGN_WAVELENGTH):
    """Closed-form thick-lens solution with back-vertex power SPH and cylinder CYL.

    The rear surface's local y meridian carries SPH and its x meridian
    SPH + CYL; turning it by ``90 - AXIS`` aligns it with the cornea.  The
    front is flat by default: the lens doubles as a TIR waveguide, and a
    curved front tips the bounce angles by ``2 h / R`` at bounce height
    ``h``.  Pass ``front_radius_mm=None`` for a Vogel's-rule base curve.
    """
    glass = material_from_spec(material)
    n = glass.index(wavelength)
    if front_radius_mm is None:
        f1 = base_curve_diopters(rx.spherical_equivalent)
        c_f = f1 / ((n - 1.0) * 1000.0)
    else:
        c_f = 0.0 if math.isinf(front_radius_mm) else 1.0 / front_radius_mm
        f1 = _diopters(c_f, n - 1.0)
    t = thickness_mm * 1e-3
    den = 1.0 - t * f1 / n
    if den <= 0:
        raise GeometryError("front surface too strong for this thickness")
    front = f1 / den

    def rear(power):
        return (power - front) / ((1.0 - n) * 1000.0)

    return PrescriptionLensDesign(
        rx, c_f, rear(rx.sph + rx.cyl), rear(rx.sph), 90.0 - rx.axis, thickness_mm, material
    )


# --------------------------------------------------------------------------
# Optimisation against the eye model


@dataclass(frozen=True)
class LensMeritSpec:
    eye_reliefs_mm: tuple = EYE_RELIEFS_MM
    fields_deg: tuple = LENS_FIELDS_DEG
    grid_rings: int = 3
    wavelength: float = DESIGN_WAVELENGTH

    @property
    def weights(self):
        ecc = [math.hypot(x, y) for x, y in self.fields_deg]
        return foveated_weights(ecc)


def lens_residuals(design, eye, spec=LensMeritSpec(), threads=1):
    """Weighted per-ray retinal deviations from each bundle's centroid (mm).

    ``sum(r**2)`` is the weighted sum of squared RMS spot radii over eye
    reliefs and fields.  Rays that do not reach the retina contribute
    ``LOST_RAY_MM`` each, keeping the vector length fixed.
    """
    grid = hexapolar_grid(spec.grid_rings)
    fields = [Field(x, y, 0.0) for x, y in spec.fields_deg]
    weights = spec.weights
    out = []
    for d_e in spec.eye_reliefs_mm:
        system = eye.with_front_optics(design.surfaces(d_e))
        bundles = trace_fields(system, fields, grid, spec.wavelength, threads=threads)
        for w, b in zip(weights, bundles):
            scale = math.sqrt(w / len(grid))
            alive = b.alive
            res = np.full((len(grid), 2), LOST_RAY_MM)
            if alive.sum() >= 3:
                pts = b.terminal_local()[:, :2]
                res[alive] = pts - pts.mean(axis=0)
            out.append(scale * res.ravel())
    return np.concatenate(out)


def lens_merit(design, eye, spec=LensMeritSpec(), threads=1):
    r = lens_residuals(design, eye, spec, threads)
    return float(r @ r)


def on_axis_rms(design, eye, eye_relief_mm, grid=None, wavelength=DESIGN_WAVELENGTH):
    """On-axis retinal RMS spot radius (mm) of ``eye`` wearing ``design``."""
    from ..eye import retinal_rms

    system = eye.with_front_optics(design.surfaces(eye_relief_mm))
    return retinal_rms(system, Field(), grid, wavelength)


def _is_plano(rx):
    return rx.sph == 0 and rx.cyl == 0 and rx.add == 0


def design_prescription_lens(
    rx,
    thickness_mm=5.0,
    material="COP",
    spec=LensMeritSpec(),
    max_iter=40,
    ftol=1e-6,
    seed=None,
    threads=1,
    history=None,
):
    """Optimise front curvature, rear meridian curvatures and rear rotation.

    Starts from :func:`direct_lens_profiles` and minimises the weighted
    retinal spot merit over eye reliefs and fields with an infinite object.
    A plano prescription returns the zero-power seed: there is nothing to
    correct, and fitting it to the model eye would only absorb the model's
    own refractive offset.

    Raises:
        NotConverged: merit fell by less than 1% over 10 iterations before
            meeting ``ftol``.
    """
    seed = seed or direct_lens_profiles(rx, thickness_mm, material)
    if _is_plano(rx):
        return seed.check()
    eye = build_eye(rx)
    astig = rx.cyl != 0
    x0 = [seed.front_curvature, seed.rear_curvature_x, seed.rear_curvature_y]
    steps = [1e-5, 1e-5, 1e-5]
    if astig:
        x0.append(seed.rear_rotation_deg)
        steps.append(1e-3)

    def make(x):
        if astig:
            return replace(seed, front_curvature=x[0], rear_curvature_x=x[1], rear_curvature_y=x[2], rear_rotation_deg=x[3])
        # keep the rear surface rotationally symmetric
        return replace(seed, front_curvature=x[0], rear_curvature_x=x[1], rear_curvature_y=x[1])

    if not astig:
        x0 = x0[:2]
        steps = steps[:2]

    def fun(x):
        return lens_residuals(make(x), eye, spec, threads)

    res = levenberg_marquardt(fun, x0, steps, max_iter=max_iter, ftol=ftol, stall_window=10, damping=1e-2)
    if history is not None:
        history.extend(res.history)
    if res.stalled:
        raise NotConverged(f"prescription lens optimisation stalled: {res.message}", make(res.x))
    return make(res.x).check()
