"""Design assessment: spots, geometric MTF, field of view, eye box, focus and trade curves."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from .errors import ConfigError, InsufficientRays, OpticsError
from .eye import rms_radius
from .tracer import DESIGN_WAVELENGTH, DisplayField, Field, hexapolar_grid, square_grid, trace_fields

#: Minimum rays per spot for an MTF.
MIN_MTF_RAYS = 500


def _optical(system):
    """Accept an ARSystem (or anything with ``.system``) as well as a bare OpticalSystem."""
    return getattr(system, "system", system)


# --------------------------------------------------------------------------
# Spots


@dataclass(frozen=True)
class SpotDiagram:
    """Terminal points (mm, image-plane local x/y) of the unvignetted rays of one field."""

    field: object
    offset_mm: float
    points_mm: np.ndarray
    rms_um: float
    centroid_mm: tuple

    @property
    def n_rays(self):
        return len(self.points_mm)

    def recomputed_rms_um(self):
        return 1000.0 * rms_radius(self.points_mm)


def _spot_from_points(fld, offset, pts):
    if len(pts) == 0:
        raise InsufficientRays(f"no ray of field {fld} reaches the image plane")
    c = pts.mean(axis=0)
    return SpotDiagram(fld, float(offset), pts, 1000.0 * rms_radius(pts), (float(c[0]), float(c[1])))


def spot(system, fld=None, offset_mm=0.0, grid=None, wavelength=DESIGN_WAVELENGTH, threads=1):
    """Spot diagram of one field on the image surface, or a plane ``offset_mm`` beyond it.

    Raises:
        InsufficientRays: every ray was vignetted.
    """
    return through_focus(system, fld, [offset_mm], grid, wavelength, threads)[0]


def through_focus(system, fld=None, offsets_mm=(0.0,), grid=None, wavelength=DESIGN_WAVELENGTH, threads=1):
    """Spot diagrams of one field on planes shifted along the image-surface normal.

    The bundle is traced once; later planes are reached by straight-line
    propagation from the image surface.
    """
    osys = _optical(system)
    fld = Field() if fld is None else fld
    bundle = trace_fields(osys, [fld], grid, wavelength, threads)[0]
    surf = osys.surfaces[-1]
    alive = bundle.alive
    pts = surf.pose.to_local(bundle.result.points[alive, -1])
    dirs = surf.pose.dir_to_local(bundle.result.directions[alive, -1])
    out = []
    for off in offsets_mm:
        if off == 0.0:
            p = pts[:, :2]
        else:
            s = (off - pts[:, 2]) / dirs[:, 2]
            p = (pts + s[:, None] * dirs)[:, :2]
        out.append(_spot_from_points(fld, off, p))
    return out


# --------------------------------------------------------------------------
# Geometric MTF


@dataclass(frozen=True)
class MTFCurve:
    """Geometric MTF along two image-plane azimuths (x: sagittal, y: tangential)."""

    frequencies_cpd: np.ndarray
    sagittal: np.ndarray
    tangential: np.ndarray

    def mtf50_cpd(self):
        """Lowest frequency at which either azimuth falls to 0.5 (inf if it never does)."""
        return min(_crossing(self.frequencies_cpd, self.sagittal), _crossing(self.frequencies_cpd, self.tangential))


def _crossing(f, m, level=0.5):
    below = np.nonzero(m < level)[0]
    if len(below) == 0:
        return math.inf
    i = below[0]
    if i == 0:
        return float(f[0])
    f0, f1, m0, m1 = f[i - 1], f[i], m[i - 1], m[i]
    return float(f0 + (m0 - level) * (f1 - f0) / (m0 - m1))


def _lsf_mtf(coord_mm, freq_per_mm):
    # exact Fourier transform of the ray-density line spread (a sum of deltas)
    c = coord_mm - coord_mm.mean()
    phase = -2j * np.pi * np.outer(freq_per_mm, c)
    return np.abs(np.exp(phase).mean(axis=1))


def geometric_mtf(points_mm, frequencies_cpd, mm_per_degree):
    """Geometric MTF of a spot from its ray-density line-spread functions.

    Args:
        points_mm: (N, 2) image-plane ray positions.
        frequencies_cpd: spatial frequencies in cycles per degree.
        mm_per_degree: image-plane scale used to convert degrees to mm.

    Raises:
        InsufficientRays: fewer than ``MIN_MTF_RAYS`` rays.
    """
    pts = np.asarray(points_mm, float)
    if pts.ndim != 2 or pts.shape[1] < 2 or len(pts) < MIN_MTF_RAYS:
        raise InsufficientRays(f"geometric MTF needs at least {MIN_MTF_RAYS} rays, got {len(pts)}")
    if not mm_per_degree > 0:
        raise ConfigError("mm_per_degree must be positive")
    f = np.asarray(frequencies_cpd, float)
    per_mm = f / mm_per_degree
    return MTFCurve(f, _lsf_mtf(pts[:, 0], per_mm), _lsf_mtf(pts[:, 1], per_mm))


def disk_mtf(frequency_per_mm, radius_mm):
    """Closed-form MTF of a uniformly filled disk of the given radius."""
    from scipy.special import j1

    x = 2.0 * np.pi * np.asarray(frequency_per_mm, float) * radius_mm
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(x == 0, 1.0, 2.0 * j1(x) / np.where(x == 0, 1.0, x))
    return out


def mtf_grid(n=28):
    """Square pupil grid with at least ``MIN_MTF_RAYS`` points (n=28 gives 616)."""
    return square_grid(n)


# --------------------------------------------------------------------------
# AR display metrics


def _eye_basis(ar):
    v = np.asarray(ar.view_axis, float)
    ex = np.array([1.0, 0.0, 0.0])
    ex = ex - v * (ex @ v)
    ex /= np.linalg.norm(ex)
    ey = np.cross(v, ex)
    return v, ex, ey


def _chief_angles(ar, points_mm, wavelength=DESIGN_WAVELENGTH):
    """Viewing angles (deg, horizontal and vertical) of display points; NaN when untraceable."""
    fields = [DisplayField(float(x), float(y)) for x, y in points_mm]
    bundles = trace_fields(ar.system, fields, np.zeros((1, 2)), wavelength)
    v, ex, ey = _eye_basis(ar)
    out = np.full((len(fields), 2), np.nan)
    stop = ar.stop_index
    for k, b in enumerate(bundles):
        if not b.alive[0]:
            continue
        d = b.result.directions[0, stop - 1]
        out[k] = (math.degrees(math.atan2(d @ ex, d @ v)), math.degrees(math.atan2(d @ ey, d @ v)))
    return out


def _traceable_extent(ar, direction, extent, iters=12):
    """Largest fraction of ``extent`` along ``direction`` whose chief ray traces."""
    d = np.asarray(direction, float)

    def ok(t):
        return bool(np.all(np.isfinite(_chief_angles(ar, [t * extent * d])[0])))

    if extent <= 0 or not ok(0.0):
        return 0.0
    if ok(1.0):
        return 1.0
    lo, hi = 0.0, 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


@dataclass(frozen=True)
class FieldOfView:
    horizontal_deg: float
    vertical_deg: float
    edges_mm: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.horizontal_deg, self.vertical_deg))


def fov(ar, display_width_mm=None, display_height_mm=None):
    """Angular extent at the eye of the chief rays from the display boundary.

    Each half-axis of the display is followed out to its edge; where the edge
    ray is lost in the system the boundary is pulled in (bisection) to the
    last display point whose chief ray still reaches the pupil centre.
    """
    w = ar.params.display_width_mm if display_width_mm is None else display_width_mm
    h = ar.params.display_height_mm if display_height_mm is None else display_height_mm
    if w < 0 or h < 0:
        raise ConfigError("display size must be non-negative")
    edges = {}
    for key, d, ext in (("+x", (1, 0), w / 2), ("-x", (-1, 0), w / 2), ("+y", (0, 1), h / 2), ("-y", (0, -1), h / 2)):
        edges[key] = _traceable_extent(ar, d, ext) * ext
    if w == 0 and h == 0:
        return FieldOfView(0.0, 0.0, edges)
    pts = [(edges["+x"], 0.0), (-edges["-x"], 0.0), (0.0, edges["+y"]), (0.0, -edges["-y"])]
    ang = _chief_angles(ar, pts)
    if not np.all(np.isfinite(ang)):
        return FieldOfView(0.0, 0.0, edges)
    horizontal = abs(ang[0, 0] - ang[1, 0])
    vertical = abs(ang[2, 1] - ang[3, 1])
    return FieldOfView(float(horizontal), float(vertical), edges)


def display_mm_per_degree(ar, h=0.05):
    """Display millimetres per degree of view about the display centre (mean of both axes)."""
    ang = _chief_angles(ar, [(h, 0.0), (-h, 0.0), (0.0, h), (0.0, -h)])
    if not np.all(np.isfinite(ang)):
        raise OpticsError("chief rays near the display centre do not reach the eye")
    dx = abs(ang[0, 0] - ang[1, 0]) / (2 * h)
    dy = abs(ang[2, 1] - ang[3, 1]) / (2 * h)
    return 2.0 / (dx + dy)


def nyquist_cpd(ar):
    """Pixel-sampling limit of the display seen through the optics (cycles per degree)."""
    pitch_mm = ar.params.pixel_pitch_um * 1e-3
    return display_mm_per_degree(ar) / (2.0 * pitch_mm)


def display_point_for_angle(ar, angle_deg, axis=0):
    """Display coordinate (mm) whose chief ray is seen at ``angle_deg`` along ``axis`` (0: horizontal)."""
    half = (ar.params.display_width_mm if axis == 0 else ar.params.display_height_mm) / 2
    unit = np.eye(2)[axis]

    def g(t):
        return _chief_angles(ar, [t * unit])[0, axis] - angle_deg

    g0 = g(0.0)
    if g0 == 0.0:
        return 0.0 * unit
    # walk the half-axis along which the viewing angle moves towards the target
    rising = _chief_angles(ar, [0.1 * unit])[0, axis] > g0 + angle_deg
    sign = 1.0 if rising == (g0 < 0) else -1.0
    end = sign * _traceable_extent(ar, sign * unit, half) * half
    try:
        return brentq(g, 0.0, end, xtol=1e-6) * unit
    except ValueError as exc:
        raise OpticsError(f"no display point is seen at {angle_deg} deg") from exc


def center_mtf(ar, frequencies_cpd=None, display_point=(0.0, 0.0), grid=None):
    """Retinal geometric MTF of one display point through the AR path."""
    f = np.linspace(0.0, 60.0, 241) if frequencies_cpd is None else frequencies_cpd
    fld = DisplayField(*map(float, display_point))
    if grid is not None:
        return geometric_mtf(spot(ar.system, fld, grid=grid).points_mm, f, ar.mm_per_degree)
    # densify until enough rays survive the system's vignetting
    for n in (28, 36, 48, 64):
        s = spot(ar.system, fld, grid=mtf_grid(n))
        if s.n_rays >= MIN_MTF_RAYS:
            break
    return geometric_mtf(s.points_mm, f, ar.mm_per_degree)


@dataclass(frozen=True)
class ResolutionProfile:
    eccentricities_deg: tuple
    optical_cpd: tuple
    cpd: tuple
    nyquist_cpd: float


def resolution_profile(ar, eccentricities_deg=(0.0, 5.0, 10.0, 15.0, 20.0), axis=0):
    """MTF50 resolution (cpd) at each eccentricity, capped by the pixel Nyquist limit.

    ``optical_cpd`` holds the uncapped geometric MTF50 (NaN where the field
    does not trace).
    """
    ny = nyquist_cpd(ar)
    optical = []
    for e in eccentricities_deg:
        try:
            pt = display_point_for_angle(ar, e, axis)
            optical.append(center_mtf(ar, display_point=pt).mtf50_cpd())
        except OpticsError:
            optical.append(math.nan)
    capped = tuple(min(o, ny) if math.isfinite(o) or o == math.inf else math.nan for o in optical)
    return ResolutionProfile(tuple(eccentricities_deg), tuple(optical), capped, ny)


def _default_eyebox_fields(ar):
    # 3x3 points at half the display extent whose chief rays reach the eye
    e = fov(ar).edges_mm
    xs = (-0.5 * e["-x"], 0.0, 0.5 * e["+x"])
    ys = (-0.5 * e["-y"], 0.0, 0.5 * e["+y"])
    return [DisplayField(x, y) for y in ys for x in xs]


@dataclass(frozen=True)
class EyeBox:
    width_mm: float
    height_mm: float
    step_mm: float

    def __iter__(self):
        return iter((self.width_mm, self.height_mm))


def eyebox(system, fields=None, step_mm=0.5, threshold=0.5, max_decenter_mm=8.0, grid=None, wavelength=DESIGN_WAVELENGTH):
    """Largest centred rectangle of pupil decenters where every field keeps ``threshold`` of its rays.

    Pupil decenters are sampled on a ``step_mm`` grid in the stop's own
    frame; the box dimensions are the spans of the passing grid rectangle.
    """
    osys = _optical(system)
    if fields is None:
        if not hasattr(system, "params"):
            raise ConfigError("fields are required for a bare optical system")
        fields = _default_eyebox_fields(system)
    grid = hexapolar_grid(3) if grid is None else grid
    n = int(math.floor(max_decenter_mm / step_mm + 1e-9))
    cache = {}

    def passes(i, j):
        key = (i, j)
        if key not in cache:
            shifted = osys.with_stop_decenter(i * step_mm, j * step_mm)
            try:
                bundles = trace_fields(shifted, fields, grid, wavelength)
                cache[key] = all(1.0 - b.vignetted_fraction >= threshold for b in bundles)
            except OpticsError:
                cache[key] = False
        return cache[key]

    def column_ok(i, b):
        return all(passes(s * i, j) for s in ((1, -1) if i else (1,)) for j in range(-b, b + 1))

    best = (0, 0, -1.0)
    if not passes(0, 0):
        return EyeBox(0.0, 0.0, step_mm)
    b_max = 0
    while b_max < n and column_ok(0, b_max + 1):
        b_max += 1
    best = (0, b_max, 0.0)
    b = b_max
    for a in range(1, n + 1):
        while b >= 0 and not column_ok(a, b):
            b -= 1
        if b < 0:
            break
        area = (2 * a) * (2 * b)
        if area > best[2] or (area == best[2] and a > best[0]):
            best = (a, b, area)
    a, b, _ = best
    return EyeBox(2 * a * step_mm, 2 * b * step_mm, step_mm)


# --------------------------------------------------------------------------
# Varifocal mapping


def image_vergence_diopters(ar, grid=None, pupil_scale=0.25):
    """Real-scene vergence (D) of the virtual image of the display centre, seen from the pupil.

    A small on-axis bundle is traced to the pupil; the linear map from ray
    position to ray direction across the pupil gives the wavefront
    curvature, averaged over the two axes.  Positive: a virtual image in
    front of the eye at ``1000 / D`` mm.
    """
    grid = hexapolar_grid(2) if grid is None else grid
    b = trace_fields(ar.system, [DisplayField(0.0, 0.0)], grid, pupil_scale=pupil_scale)[0]
    alive = b.alive
    if alive.sum() < 3:
        raise InsufficientRays("on-axis bundle does not reach the pupil")
    stop = ar.stop_index
    pose = ar.system.surfaces[stop].pose
    p = pose.to_local(b.result.points[alive, stop])[:, :2]
    d = pose.dir_to_local(b.result.directions[alive, stop - 1])
    t = d[:, :2] / d[:, 2:3]
    A = np.column_stack([p - p.mean(axis=0), np.ones(len(p))])
    coef, *_ = np.linalg.lstsq(A, t - t.mean(axis=0), rcond=None)
    # rays travel toward the eye (-local z of the stop is toward the lens)
    curvature = 0.5 * (coef[0, 0] + coef[1, 1])
    sign = 1.0 if d[:, 2].mean() > 0 else -1.0
    return 1000.0 * curvature * sign


@dataclass(frozen=True)
class FocusMapping:
    offsets_mm: tuple
    real_diopters: tuple
    corrected_diopters: tuple

    def strictly_monotone(self):
        d = np.diff(self.corrected_diopters)
        return bool(np.all(d > 0) or np.all(d < 0))

    def offset_for(self, diopters):
        """Display offset (mm) at which the corrected-scene image sits at ``diopters``."""
        x = np.asarray(self.corrected_diopters)
        y = np.asarray(self.offsets_mm)
        order = np.argsort(x)
        x, y = x[order], y[order]
        if not x[0] <= diopters <= x[-1]:
            raise OpticsError(f"{diopters} D is outside the mapped range {x[0]:.3f}..{x[-1]:.3f} D")
        return float(np.interp(diopters, x, y))

    def span_mm(self, near_d, far_d):
        return abs(self.offset_for(far_d) - self.offset_for(near_d))


def focus_mapping(params, offsets_mm, rx=None, lens=None, eye_relief_mm=None):
    """Corrected-scene image distance (D) for each axial display offset (mm).

    Corrected-scene diopters are the real-scene value minus ``|SPH|``.
    """
    from .designer.ar import build_ar_system
    from .eye import Prescription

    rx = rx or Prescription(-1.0)
    real = []
    for off in offsets_mm:
        ar = build_ar_system(params, rx=rx, lens=lens, eye_relief_mm=eye_relief_mm, display_offset_mm=float(off))
        real.append(image_vergence_diopters(ar))
    real = tuple(float(r) for r in real)
    return FocusMapping(tuple(float(o) for o in offsets_mm), real, tuple(r - abs(rx.sph) for r in real))


# --------------------------------------------------------------------------
# Trade space


@dataclass(frozen=True)
class TradeCurve:
    variable: str
    values: tuple
    fov_h_deg: tuple
    fov_v_deg: tuple
    eyebox_w_mm: tuple
    eyebox_h_mm: tuple

    def __post_init__(self):
        if len(self.values) > 1 and not np.all(np.diff(self.values) > 0):
            raise ConfigError("trade-curve values must be strictly increasing")


_TRADE_VARIABLES = {"t_l": "lens_thickness_mm", "lens_thickness_mm": "lens_thickness_mm",
                    "d_e": "eye_relief_mm", "eye_relief_mm": "eye_relief_mm"}


def evaluate_design(params, rx=None, eye_relief_mm=None, with_eyebox=True):
    """FOV and eye box of one design (zeros when the display path cannot be built)."""
    from .designer.ar import build_ar_system

    try:
        ar = build_ar_system(params, rx=rx, eye_relief_mm=eye_relief_mm)
    except OpticsError:
        return (0.0, 0.0, 0.0, 0.0)
    f = fov(ar)
    e = eyebox(ar) if with_eyebox else EyeBox(math.nan, math.nan, 0.5)
    return (f.horizontal_deg, f.vertical_deg, e.width_mm, e.height_mm)


def trade_sweep(base, variable, values, rx=None, reoptimize=True, optimize_kwargs=None, with_eyebox=True, threads=1):
    """FOV and eye box across a swept lens thickness or eye relief.

    With ``reoptimize`` each point is re-optimised with the geometry-coupled
    parameters free (distances, tilts and the combiner); a run that stops
    without converging still contributes its best design.
    """
    if variable not in _TRADE_VARIABLES:
        raise ConfigError(f"sweep variable must be one of {sorted(_TRADE_VARIABLES)}")
    values = tuple(float(v) for v in values)
    if not values or (len(values) > 1 and not np.all(np.diff(values) > 0)):
        raise ConfigError("sweep values must be strictly increasing")
    name = _TRADE_VARIABLES[variable]

    def one(v):
        p = replace(base, **{name: v})
        if reoptimize:
            p = _reoptimize(p, rx, name, optimize_kwargs or {})
        return evaluate_design(p, rx=rx, with_eyebox=with_eyebox)

    if threads and threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, values))
    else:
        rows = [one(v) for v in values]
    cols = list(zip(*rows))
    return TradeCurve(variable, values, *map(tuple, cols))


def _reoptimize(params, rx, swept, kwargs):
    from .designer.ar import ANGLE_PARAMS, COMBINER_PRIMARY, LENGTH_PARAMS
    from .designer.merit import ARMeritSpec
    from .designer.optimize import optimize
    from .errors import InfeasibleConstraints, NotConverged

    spec = kwargs.pop("spec", None)
    if spec is None and swept == "eye_relief_mm":
        spec = ARMeritSpec(eye_reliefs_mm=(params.eye_relief_mm,))
    free = kwargs.pop("free", LENGTH_PARAMS + ANGLE_PARAMS + ("combiner_curvature", "combiner_conic") + COMBINER_PRIMARY)
    try:
        return optimize(params, spec=spec, rx=rx, free=free, **kwargs).params
    except (NotConverged, InfeasibleConstraints) as exc:
        return getattr(exc.result, "params", params)
    except OpticsError:
        return params


# --------------------------------------------------------------------------
# Reports


def write_spots_csv(spots, fh):
    """One row per ray: field, plane offset and position in mm."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["field", "offset_mm", "x_mm", "y_mm", "rms_um"])
    for s in spots:
        for x, y in s.points_mm:
            w.writerow([_field_label(s.field), f"{s.offset_mm:.6g}", f"{x:.9g}", f"{y:.9g}", f"{s.rms_um:.9g}"])


def write_trade_csv(curve, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow([curve.variable, "fov_h_deg", "fov_v_deg", "eyebox_w_mm", "eyebox_h_mm"])
    for row in zip(curve.values, curve.fov_h_deg, curve.fov_v_deg, curve.eyebox_w_mm, curve.eyebox_h_mm):
        w.writerow([f"{v:.9g}" for v in row])


def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return o


def _field_label(f):
    if isinstance(f, DisplayField):
        return f"display({f.x_mm:g},{f.y_mm:g})"
    if isinstance(f, Field):
        return f"angle({f.x_deg:g},{f.y_deg:g},{f.vergence:g}D)"
    return str(f)


def plot_spots_svg(spots, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(spots), figsize=(2.6 * len(spots), 2.8), squeeze=False)
    for ax, s in zip(axes[0], spots):
        ax.scatter(s.points_mm[:, 0] * 1000, s.points_mm[:, 1] * 1000, s=2)
        ax.set_aspect("equal", adjustable="datalim")
        ax.set_title(f"{s.offset_mm:+.3g} mm\n{s.rms_um:.2f} um RMS", fontsize=8)
        ax.set_xlabel("x (um)", fontsize=7)
        ax.tick_params(labelsize=6)
    fig.tight_layout()
    with matplotlib.rc_context({"svg.hashsalt": "rxoptics"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_trade_svg(curve, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (a1, a2) = plt.subplots(1, 2, figsize=(7, 3))
    a1.plot(curve.values, curve.fov_h_deg, "o-", label="horizontal")
    a1.plot(curve.values, curve.fov_v_deg, "s-", label="vertical")
    a1.set_ylabel("FOV (deg)")
    a2.plot(curve.values, curve.eyebox_w_mm, "o-", label="width")
    a2.plot(curve.values, curve.eyebox_h_mm, "s-", label="height")
    a2.set_ylabel("eye box (mm)")
    for a in (a1, a2):
        a.set_xlabel(curve.variable)
        a.legend(fontsize=7)
    fig.tight_layout()
    with matplotlib.rc_context({"svg.hashsalt": "rxoptics"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
