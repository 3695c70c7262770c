"""Folded AR display path built from a geometry parameter vector.

Frame: origin at the rear lens vertex, +z toward the world, +y up, x to the
wearer's side.  The lens occupies ``0 <= z <= t`` (t = lens thickness), the
eye pupil sits at ``z = -eye_relief``.

Angle datum (all tilts are rotations about x):

* in-coupling chain (display, beam-shaping lens, prism, cylinder and
  waveguide entry): the element's optical axis is ``(0, -sin a, cos a)``,
  i.e. ``a`` is measured from the lens normal, tipping the axis downward;
* combiner: its normal is ``(0, cos a, -sin a)``, i.e. ``a`` is measured from
  the vertical axis, tipping the normal toward the eye.

Path: display -> lens (2 surfaces) -> prism entry -> cylinder -> waveguide
entry -> TIR on the front lens surface -> TIR on the rear lens surface ->
half-mirror combiner -> exit through the rear surface -> eye pupil (an
ideal thin lens) -> retina plane focused at the image distance.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, fields, replace

import numpy as np

from ..errors import ConfigError, GeometryError
from ..eye import Prescription
from ..materials import AIR, material_from_spec
from ..surfaces import (
    MONOMIAL_NAMES,
    CylinderY,
    ExtendedPolynomial,
    IdealLens,
    Mode,
    Plane,
    Standard,
    Surface,
    SurfacePose,
    profile_from_dict,
)
from ..tracer import Interaction, OpticalSystem, trace_arrays
from .lens import PrescriptionLensDesign, direct_lens_profiles

#: Focal length (mm) of the ideal eye at the pupil: 0.291 mm per degree.
EYE_FOCAL_MM = 0.291 / math.radians(1.0)
EYE_RELIEF_RANGE_MM = (12.0, 20.0)

PROTOTYPE_COMBINER = ExtendedPolynomial.from_base_radius(
    -276.28,
    0.0,
    27.391,
    (0.0, 0.798, 10.65, 0.0, 11.235, 0.0, 0.0, 0.0, -1.275, -0.695, 0.0, 0.0, 0.0, 2.34),
)


class EyeReliefWarning(UserWarning):
    pass


@dataclass(frozen=True)
class DesignParams:
    """AR geometry.  Lengths in mm, angles in degrees.

    Radii are signed for light leaving the display (positive: centre of
    curvature downstream).  A design tabulated from a reverse trace (eye to
    display, after three reflections) maps onto these fields unchanged, with
    its first beam-shaping-lens radius being the prism-side surface.
    """

    display_gap_mm: float = 0.97
    display_tilt_deg: float = 66.67
    bsl_prism_side_radius_mm: float = -37.32
    bsl_display_side_radius_mm: float = 13.94
    bsl_material: object = "N-LASF31A"
    bsl_thickness_mm: float = 3.25
    bsl_tilt_deg: float = 66.67
    prism_gap_mm: float = 0.42
    prism_tilt_deg: float = 53.17
    cylinder_depth_mm: float = 1.64
    cylinder_radius_mm: float = -8.86
    cylinder_material: object = "N-BK7"
    cylinder_tilt_deg: float = 61.92
    waveguide_depth_mm: float = 2.27
    lens_material: object = "COP"
    waveguide_tilt_deg: float = 62.0
    combiner_tilt_deg: float = 60.92
    image_distance_mm: float = 485.0
    combiner: ExtendedPolynomial = PROTOTYPE_COMBINER
    lens_thickness_mm: float = 5.0
    eye_relief_mm: float = 20.0
    display_width_mm: float = 10.08
    display_height_mm: float = 7.56
    pixels_x: int = 1600
    pixels_y: int = 1200
    pixel_pitch_um: float = 6.3
    pupil_diameter_mm: float = 4.0
    symmetric_magnification: bool = True
    bsl_semi_aperture_mm: float = 6.0
    chain_semi_aperture_mm: float = 8.0
    combiner_half_width_mm: float = 15.0

    def __post_init__(self):
        if self.symmetric_magnification and self.bsl_tilt_deg != self.display_tilt_deg:
            object.__setattr__(self, "bsl_tilt_deg", float(self.display_tilt_deg))
        if not isinstance(self.combiner, ExtendedPolynomial):
            object.__setattr__(self, "combiner", profile_from_dict(self.combiner))
        for name in ("display_width_mm", "display_height_mm", "pixel_pitch_um", "lens_thickness_mm", "pupil_diameter_mm"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")

    # -- vector view for the optimiser ---------------------------------
    def vector(self, names):
        return np.array([get_param(self, n) for n in names], float)

    def with_vector(self, names, values):
        p = self
        scalar = {}
        coeffs = list(self.combiner.coeffs) + [0.0] * (len(MONOMIAL_NAMES) - len(self.combiner.coeffs))
        comb = {"c": self.combiner.c, "k": self.combiner.k}
        for n, v in zip(names, values):
            v = float(v)
            if n in _RADIUS_PARAMS:
                scalar[_RADIUS_PARAMS[n]] = math.inf if v == 0 else 1.0 / v
            elif n == "combiner_curvature":
                comb["c"] = v
            elif n == "combiner_conic":
                comb["k"] = v
            elif n[len("combiner_"):] in MONOMIAL_NAMES and n.startswith("combiner_"):
                coeffs[MONOMIAL_NAMES.index(n[len("combiner_"):])] = v
            else:
                scalar[n] = v
        if self.symmetric_magnification and "display_tilt_deg" in scalar:
            scalar["bsl_tilt_deg"] = scalar["display_tilt_deg"]
        combiner = ExtendedPolynomial(comb["c"], comb["k"], self.combiner.norm_radius, tuple(coeffs))
        return replace(p, combiner=combiner, **scalar)

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "combiner":
                v = v.to_dict()
            elif f.name.endswith("_material"):
                from ..materials import material_to_spec

                v = material_to_spec(material_from_spec(v))
            elif f.name in _RADIUS_PARAMS.values() and math.isinf(v):
                v = None  # flat; JSON has no infinity
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown design parameter keys: {sorted(unknown)}")
        kw = dict(data)
        for name in _RADIUS_PARAMS.values():
            if name in kw and kw[name] is None:
                kw[name] = math.inf
        if "combiner" in kw:
            kw["combiner"] = profile_from_dict(kw["combiner"])
        return cls(**kw)


PROTOTYPE = DesignParams()

_RADIUS_PARAMS = {
    "bsl_display_side_curvature": "bsl_display_side_radius_mm",
    "bsl_prism_side_curvature": "bsl_prism_side_radius_mm",
    "cylinder_curvature": "cylinder_radius_mm",
}
LENGTH_PARAMS = ("display_gap_mm", "prism_gap_mm", "bsl_thickness_mm", "cylinder_depth_mm", "waveguide_depth_mm")
ANGLE_PARAMS = (
    "display_tilt_deg",
    "bsl_tilt_deg",
    "prism_tilt_deg",
    "cylinder_tilt_deg",
    "waveguide_tilt_deg",
    "combiner_tilt_deg",
)
CURVATURE_PARAMS = tuple(_RADIUS_PARAMS) + ("combiner_curvature",)
#: Freeform slots that are nonzero in the tabulated design (first release stage).
COMBINER_PRIMARY = ("combiner_Y1", "combiner_X2", "combiner_Y2", "combiner_Y3", "combiner_X4", "combiner_Y4")
COMBINER_SECONDARY = tuple(
    f"combiner_{n}" for n in MONOMIAL_NAMES if f"combiner_{n}" not in COMBINER_PRIMARY
)
ALL_PARAMS = LENGTH_PARAMS + ANGLE_PARAMS + CURVATURE_PARAMS + ("combiner_conic",) + COMBINER_PRIMARY + COMBINER_SECONDARY


def get_param(params, name):
    if name in _RADIUS_PARAMS:
        r = getattr(params, _RADIUS_PARAMS[name])
        return 0.0 if math.isinf(r) else 1.0 / r
    if name == "combiner_curvature":
        return params.combiner.c
    if name == "combiner_conic":
        return params.combiner.k
    if name.startswith("combiner_") and name[len("combiner_"):] in MONOMIAL_NAMES:
        i = MONOMIAL_NAMES.index(name[len("combiner_"):])
        return params.combiner.coeffs[i] if i < len(params.combiner.coeffs) else 0.0
    return float(getattr(params, name))


def finite_difference_step(name):
    """Jacobian step per parameter kind: 1e-3 mm, 1e-3 deg, 1e-5 1/mm."""
    if name in CURVATURE_PARAMS:
        return 1e-5
    return 1e-3


def param_names(params=None, free=None, frozen=()):
    """Resolve the optimisation variable list (``free`` defaults to everything)."""
    names = list(free) if free is not None else list(ALL_PARAMS)
    bad = [n for n in names + list(frozen) if n not in ALL_PARAMS]
    if bad:
        raise ConfigError(f"unknown design parameters: {bad}")
    out = [n for n in names if n not in set(frozen)]
    if params is not None and params.symmetric_magnification and "bsl_tilt_deg" in out:
        out.remove("bsl_tilt_deg")
    return out


# --------------------------------------------------------------------------
# Geometry


def _axis(angle_deg):
    a = math.radians(angle_deg)
    return np.array([0.0, -math.sin(a), math.cos(a)])


def _pose_along(point, angle_deg):
    return SurfacePose(tuple(point), tilt_x=angle_deg)


def _pose_toward(point, direction):
    d = np.asarray(direction, float)
    d = d / np.linalg.norm(d)
    return SurfacePose(tuple(point), tilt_x=math.degrees(math.atan2(-d[1], d[2])))


@dataclass(frozen=True)
class ARSystem:
    """A built display path plus the bookkeeping the analyses need."""

    system: OpticalSystem
    params: DesignParams
    lens: PrescriptionLensDesign
    eye_relief_mm: float
    display_offset_mm: float
    pupil_center: tuple
    view_axis: tuple  # unit vector from the display toward the eye at the pupil
    eye_focal_mm: float
    retina_distance_mm: float
    surface_index: dict = field(default_factory=dict, compare=False)

    @property
    def mm_per_degree(self):
        return self.retina_distance_mm * math.radians(1.0)

    @property
    def exit_index(self):
        return self.surface_index["lens_rear_exit"]

    @property
    def stop_index(self):
        return self.system.stop_index


def _lens_surfaces_ar(lens, rear_mode, front_mode, glass):
    """Lens surfaces in the AR frame (eye frame turned 180 degrees about y)."""
    t = lens.thickness_mm
    big = lens.semi_diameter_mm
    front = Surface(
        lens.front_profile(),
        SurfacePose((0.0, 0.0, t), tilt_y=180.0),
        front_mode,
        AIR,
        aperture=(big, big),
        aperture_shape="ellipse",
        name="lens_front_tir",
    )
    rear = Surface(
        lens.rear_profile(),
        SurfacePose((0.0, 0.0, 0.0), tilt_y=180.0, tilt_z=lens.rear_rotation_deg),
        rear_mode,
        AIR,
        aperture=(big, big),
        aperture_shape="ellipse",
        name="lens_rear_tir",
    )
    return front, rear


def _chain(params, anchor):
    """Vertices of the in-coupling chain given the waveguide-entry point."""
    p = params
    legs = [
        (p.display_gap_mm, p.display_tilt_deg),
        (p.bsl_thickness_mm, p.bsl_tilt_deg),
        (p.prism_gap_mm, p.bsl_tilt_deg),
        (p.cylinder_depth_mm, p.prism_tilt_deg),
        (p.waveguide_depth_mm, p.cylinder_tilt_deg),
    ]
    pts = [np.asarray(anchor, float)]
    for length, ang in reversed(legs):
        pts.append(pts[-1] - length * _axis(ang))
    return tuple(pts[::-1])  # display, lens (display side), lens (prism side), prism, cylinder, entry


def _surfaces_before_eye(params, lens, anchor):
    p = params
    n1 = material_from_spec(p.bsl_material)
    n2 = material_from_spec(p.cylinder_material)
    n3 = material_from_spec(p.lens_material)
    display, l1, l2, prism, cyl, entry = _chain(p, anchor)
    t = lens.thickness_mm
    sa, ca = p.bsl_semi_aperture_mm, p.chain_semi_aperture_mm
    entry_half = 0.5 * t / max(math.sin(math.radians(p.waveguide_tilt_deg)), 1e-6)
    comb_half = 0.5 * t / max(math.cos(math.radians(p.combiner_tilt_deg)), 1e-6)
    front_tir, rear_tir = _lens_surfaces_ar(lens, Mode.REFRACT_OR_TIR, Mode.REFRACT_OR_TIR, n3)
    rear_exit = replace(rear_tir, mode=Mode.REFRACT, name="lens_rear_exit")
    surfaces = [
        Surface(Standard.from_radius(p.bsl_display_side_radius_mm), _pose_along(l1, p.bsl_tilt_deg), Mode.REFRACT, n1,
                aperture=(sa, sa), aperture_shape="ellipse", name="bsl_display_side"),
        Surface(Standard.from_radius(p.bsl_prism_side_radius_mm), _pose_along(l2, p.bsl_tilt_deg), Mode.REFRACT, AIR,
                aperture=(sa, sa), aperture_shape="ellipse", name="bsl_prism_side"),
        Surface(Plane(), _pose_along(prism, p.prism_tilt_deg), Mode.REFRACT, n1, aperture=(ca, ca), name="prism_entry"),
        Surface(CylinderY(0.0 if math.isinf(p.cylinder_radius_mm) else 1.0 / p.cylinder_radius_mm), _pose_along(cyl, p.cylinder_tilt_deg),
                Mode.REFRACT, n2, aperture=(ca, ca), name="cylinder"),
        Surface(Plane(), _pose_along(entry, p.waveguide_tilt_deg), Mode.REFRACT, n3,
                aperture=(ca, entry_half), name="waveguide_entry"),
        front_tir,
        rear_tir,
        Surface(p.combiner, SurfacePose((0.0, 0.0, 0.5 * t), tilt_x=-(90.0 + p.combiner_tilt_deg)),
                Mode.HALF_MIRROR_REFLECT, n3, aperture=(p.combiner_half_width_mm, comb_half), name="combiner"),
        rear_exit,
    ]
    return surfaces, display


def _axis_ray(params, lens, anchor, display_offset):
    surfaces, display = _surfaces_before_eye(params, lens, anchor)
    u = _axis(params.display_tilt_deg)
    origin = display - display_offset * u
    sys = OpticalSystem(tuple(surfaces))
    res = trace_arrays(sys, origin[None, :], u[None, :])
    return res, sys


def _solve_anchor(params, lens, display_offset=0.0):
    """Waveguide-entry height that sends the display-centre axis ray to the combiner vertex."""
    z = 0.5 * lens.thickness_mm
    comb_i = 7

    def miss(y):
        res, sys = _axis_ray(params, lens, np.array([0.0, y, z]), display_offset)
        code = res.codes[0, comb_i]
        if code < 0 or not np.all(np.isfinite(res.points[0, comb_i])):
            return math.nan
        local = sys.surfaces[comb_i].pose.to_local(res.points[0, comb_i][None, :])[0]
        return local[1]

    # path length inside the slab for two bounces and a return to mid-plane
    tan_w = math.tan(math.radians(params.waveguide_tilt_deg))
    y0 = 2.0 * lens.thickness_mm * tan_w
    y1 = y0 * 1.05
    f0, f1 = miss(y0), miss(y1)
    for _ in range(40):
        if not (math.isfinite(f0) and math.isfinite(f1)):
            break
        if abs(f1) < 1e-10:
            return y1
        if f1 == f0:
            break
        y0, y1, f0 = y1, y1 - f1 * (y1 - y0) / (f1 - f0), f1
        f1 = miss(y1)
    if math.isfinite(f1) and abs(f1) < 1e-6:
        return y1
    raise GeometryError("cannot route the display-centre ray onto the combiner")


def build_ar_system(
    params,
    rx=None,
    lens=None,
    eye_relief_mm=None,
    display_offset_mm=0.0,
    check_tir=True,
):
    """Build the display path for ``params`` and a prescription lens.

    Args:
        rx: prescription; the lens defaults to its closed-form profiles.
        lens: an explicit :class:`PrescriptionLensDesign` (overrides ``rx``).
        eye_relief_mm: pupil distance behind the rear lens vertex
            (defaults to ``params.eye_relief_mm``).
        display_offset_mm: display shift away from the lens along its normal.

    Raises:
        GeometryError: the display-centre ray does not undergo both TIR
            bounces (when ``check_tir``).
    """
    if lens is None:
        rx = rx or Prescription(-1.0)
        lens = direct_lens_profiles(rx, params.lens_thickness_mm, params.lens_material)
    d_e = params.eye_relief_mm if eye_relief_mm is None else eye_relief_mm
    lo, hi = EYE_RELIEF_RANGE_MM
    if not lo <= d_e <= hi:
        warnings.warn(f"eye relief {d_e} mm outside the {lo}-{hi} mm design range", EyeReliefWarning, stacklevel=2)
    if not lens.thickness_mm == params.lens_thickness_mm:
        params = replace(params, lens_thickness_mm=lens.thickness_mm)

    y_anchor = _solve_anchor(params, lens)
    anchor = np.array([0.0, y_anchor, 0.5 * lens.thickness_mm])
    res, pre = _axis_ray(params, lens, anchor, display_offset_mm)
    bounces = [res.interactions(0)[i] for i in (5, 6)] if len(res.interactions(0)) > 6 else []
    if check_tir and bounces != [Interaction.TIR, Interaction.TIR]:
        raise GeometryError("display-centre ray is not totally internally reflected at both lens surfaces")
    exit_pt = res.points[0, -1]
    v = res.directions[0, -1]
    if not (np.all(np.isfinite(exit_pt)) and v[2] < 0):
        raise GeometryError("display-centre ray does not leave the lens toward the eye")
    s = (-d_e - exit_pt[2]) / v[2]
    pupil = exit_pt + s * v
    surfaces, display = _surfaces_before_eye(params, lens, anchor)
    stop_pose = _pose_toward(pupil, v)
    focus = 1.0 / (1.0 / EYE_FOCAL_MM - 1.0 / params.image_distance_mm)
    r = 0.5 * params.pupil_diameter_mm
    surfaces.append(Surface(IdealLens(EYE_FOCAL_MM), stop_pose, Mode.REFRACT, AIR, aperture=(r, r),
                            aperture_shape="ellipse", name="pupil"))
    surfaces.append(Surface(Plane(), stop_pose.shifted(dz=focus), Mode.REFRACT, AIR, name="retina"))
    u = _axis(params.display_tilt_deg)
    object_pose = SurfacePose(tuple(display - display_offset_mm * u), tilt_x=params.display_tilt_deg)
    system = OpticalSystem(
        tuple(surfaces),
        stop_index=len(surfaces) - 2,
        pupil_diameter=params.pupil_diameter_mm,
        object_pose=object_pose,
        reference_point=tuple(pupil),
        reference_axis=tuple(-v),
        metadata={"waveguide_entry_y_mm": float(y_anchor)},
    )
    index = {s.name: i for i, s in enumerate(surfaces)}
    return ARSystem(system, params, lens, d_e, display_offset_mm, tuple(pupil), tuple(v), EYE_FOCAL_MM, focus, index)


def reverse_path(ar):
    """The display path traced backwards: eye pupil -> lens -> ... -> display plane.

    Rays start at the pupil (the stop, first surface) heading into the lens
    and end on the display plane, so image quality is read as spot size on
    the display.  Object fields are angles about the reversed view axis with
    vergence ``-1000 / image_distance`` (converging toward the virtual image).
    """
    fwd = ar.system.surfaces
    exit_i = ar.exit_index
    chain = fwd[: exit_i + 1]
    surfaces = []
    pupil = fwd[ar.stop_index]
    surfaces.append(replace(pupil, profile=Plane(), material=AIR, name="pupil"))
    for i in range(len(chain) - 1, -1, -1):
        s = chain[i]
        if s.mode == Mode.REFRACT:
            s = replace(s, material=_medium_before(chain, i))
        surfaces.append(s)
    display_pose = ar.system.object_pose
    surfaces.append(Surface(Plane(), display_pose, Mode.REFRACT, AIR, name="display"))
    return OpticalSystem(
        tuple(surfaces),
        stop_index=0,
        pupil_diameter=ar.system.pupil_diameter,
        reference_point=ar.pupil_center,
        reference_axis=tuple(-np.asarray(ar.view_axis)),
        metadata={"image_distance_mm": ar.params.image_distance_mm},
    )


def _medium_before(chain, i):
    """Medium a forward ray travels in when it reaches ``chain[i]``."""
    medium = AIR
    for s in chain[:i]:
        if s.mode in (Mode.REFLECT, Mode.HALF_MIRROR_REFLECT, Mode.REFRACT_OR_TIR):
            continue
        medium = s.material if s.material is not None else medium
    return medium
