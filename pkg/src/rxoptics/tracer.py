"""Sequential ray tracing: refraction, reflection, TIR, GRIN transfer and bundles.

The heavy lifting happens in :func:`trace_arrays`, which pushes an (N, 3)
batch of rays through every surface at once.  :func:`trace` and
:func:`trace_bundle` wrap it for single rays and aimed pupil bundles.
"""

from __future__ import annotations

import csv
import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import GeometryError, InsufficientRays, StepLimitExceeded
from .materials import AIR, DESIGN_WAVELENGTH, Grin
from .surfaces import IdealLens, Mode, Plane, Surface, SurfacePose, intersect_local, local_normals

GRIN_STEP = 0.05  # mm of arc length
GRIN_MAX_STEPS = 10_000


class Interaction(str, enum.Enum):
    REFRACTED = "refracted"
    REFLECTED = "reflected"
    TIR = "tir"
    VIGNETTED = "vignetted"
    MISSED = "missed"
    ESCAPED = "escaped"


_CODES = list(Interaction)
_CODE = {m: i for i, m in enumerate(_CODES)}
NOT_REACHED = -1
TERMINAL_CODES = {_CODE[Interaction.VIGNETTED], _CODE[Interaction.MISSED], _CODE[Interaction.ESCAPED]}


def _normalize(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@dataclass(frozen=True)
class Ray:
    origin: tuple
    direction: tuple
    wavelength: float = DESIGN_WAVELENGTH
    field_id: int = 0
    pupil_coords: tuple = (0.0, 0.0)

    def __post_init__(self):
        d = np.asarray(self.direction, float)
        norm = float(np.linalg.norm(d))
        if norm == 0.0 or not np.isfinite(norm):
            raise GeometryError("ray direction must be a finite non-zero vector")
        object.__setattr__(self, "direction", tuple(d / norm))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))


# --------------------------------------------------------------------------
# Interface laws


def refract_many(d, n, n1, n2):
    """Vectorised Snell refraction.

    ``n`` must oppose ``d``.  Returns ``(out, tir)`` where ``out`` is NaN for
    rays flagged as totally internally reflected.
    """
    mu = np.broadcast_to(np.asarray(n1, float) / np.asarray(n2, float), d.shape[:1])
    cos_i = -np.einsum("ij,ij->i", d, n)
    k = 1.0 - mu * mu * (1.0 - cos_i * cos_i)
    tir = k < 0.0
    root = np.sqrt(np.where(tir, 0.0, k))
    out = mu[:, None] * d + (mu * cos_i - root)[:, None] * n
    out = _normalize(out)
    out[tir] = np.nan
    return out, tir


def reflect_many(d, n):
    return d - 2.0 * np.einsum("ij,ij->i", d, n)[:, None] * n


class TotalInternalReflection:
    """Sentinel outcome of :func:`refract` when the critical angle is exceeded."""

    def __repr__(self):
        return "TotalInternalReflection"

    def __eq__(self, other):
        return isinstance(other, TotalInternalReflection)

    def __hash__(self):
        return hash("TotalInternalReflection")


TIR_OUTCOME = TotalInternalReflection()


def _check_unit(v, what):
    if abs(float(np.linalg.norm(v)) - 1.0) > 1e-9:
        raise GeometryError(f"{what} must be a unit vector")


def refract(direction, normal, n1, n2):
    """Refract a unit direction at a surface whose unit normal opposes it.

    Returns the refracted unit vector, or :data:`TIR_OUTCOME` when
    ``n1 sin(theta_i) > n2``.
    """
    d = np.asarray(direction, float)
    n = np.asarray(normal, float)
    _check_unit(d, "direction")
    _check_unit(n, "normal")
    if float(d @ n) >= 0.0:
        raise GeometryError("normal must oppose the incoming direction")
    out, tir = refract_many(d[None, :], n[None, :], float(n1), float(n2))
    if tir[0]:
        return TIR_OUTCOME
    return out[0]


def reflect(direction, normal):
    d = np.asarray(direction, float)
    n = np.asarray(normal, float)
    _check_unit(d, "direction")
    _check_unit(n, "normal")
    return reflect_many(d[None, :], n[None, :])[0]


# --------------------------------------------------------------------------
# GRIN transfer


def _rk4(medium, r, t, h):
    """One RK4 step of dr/ds = T/n, dT/ds = grad n (h may be per-ray)."""
    h = np.asarray(h, float)
    hh = h[:, None] if h.ndim else h

    def f(rr, tt):
        nn, g = medium.index_and_gradient(rr)
        return tt / nn[:, None], g

    k1r, k1t = f(r, t)
    k2r, k2t = f(r + 0.5 * hh * k1r, t + 0.5 * hh * k1t)
    k3r, k3t = f(r + 0.5 * hh * k2r, t + 0.5 * hh * k2t)
    k4r, k4t = f(r + hh * k3r, t + hh * k3t)
    r_new = r + hh / 6.0 * (k1r + 2 * k2r + 2 * k3r + k4r)
    t_new = t + hh / 6.0 * (k1t + 2 * k2t + 2 * k3t + k4t)
    return r_new, t_new


def grin_transfer(
    medium, frame, exit_surface, points, dirs, step=GRIN_STEP, max_steps=GRIN_MAX_STEPS, raise_on_limit=True
):
    """Integrate rays through a GRIN medium until they cross ``exit_surface``.

    Args:
        medium: :class:`Grin` whose polynomial lives in ``frame`` (a pose).
        exit_surface: surface terminating the medium.
        points, dirs: (N, 3) global entry points and unit directions.

    Returns:
        (exit points, exit unit directions, ok mask), all global.
    """
    r = frame.to_local(points)
    n0, _ = medium.index_and_gradient(r)
    t = n0[:, None] * frame.dir_to_local(dirs)
    # frame-local -> exit-surface-local
    to_exit = exit_surface.pose.transform.inverse().compose(frame.transform)
    prof = exit_surface.profile

    def g(rr):
        q = to_exit.apply(rr)
        z, _, _, ok = prof.evaluate(q[:, 0], q[:, 1])
        return q[:, 2] - z, ok

    n = len(r)
    out_r = np.full_like(r, np.nan)
    out_t = np.full_like(t, np.nan)
    ok_all = np.zeros(n, dtype=bool)
    g0, _ = g(r)
    gcur = g0.copy()
    sign0 = np.sign(g0)
    sign0[sign0 == 0] = -1.0
    active = np.arange(n)
    steps = 0
    while active.size:
        if steps >= max_steps:
            if raise_on_limit:
                raise StepLimitExceeded(f"GRIN ray did not reach the exit surface within {max_steps} steps")
            break
        steps += 1
        ra, ta = r[active], t[active]
        g0_act = gcur[active]
        r1, t1 = _rk4(medium, ra, ta, step)
        g1, ok1 = g(r1)
        crossed = (np.sign(g1) != sign0[active]) | (g1 == 0)
        crossed &= ok1
        if crossed.any():
            idx = np.flatnonzero(crossed)
            rs, ts = ra[idx], ta[idx]
            # Illinois regula falsi on the partial-step length
            lo = np.zeros(idx.size)
            hi = np.full(idx.size, step)
            glo = g0_act[idx]
            ghi = g1[idx]
            side = np.zeros(idx.size)
            mid = hi.copy()
            for _ in range(60):
                den = ghi - glo
                mid = np.where(den != 0, lo - glo * (hi - lo) / np.where(den != 0, den, 1.0), 0.5 * (lo + hi))
                mid = np.clip(mid, lo, hi)
                rm, _ = _rk4(medium, rs, ts, mid)
                gm, _ = g(rm)
                if np.max(np.abs(gm)) < 1e-13:
                    break
                left = np.sign(gm) == np.sign(glo)
                lo = np.where(left, mid, lo)
                glo = np.where(left, gm, glo)
                hi = np.where(left, hi, mid)
                ghi = np.where(left, ghi, gm)
                # halve the stale end's value when the same side repeats
                ghi = np.where(left & (side == 1), 0.5 * ghi, ghi)
                glo = np.where(~left & (side == -1), 0.5 * glo, glo)
                side = np.where(left, 1, -1)
            rf, tf = _rk4(medium, rs, ts, mid)
            out_r[active[idx]] = rf
            out_t[active[idx]] = tf
            ok_all[active[idx]] = True
        r[active] = r1
        t[active] = t1
        gcur[active] = g1
        # rays that left the exit surface's domain can never cross it
        active = active[~crossed & ok1]
    p_out = frame.to_global(out_r)
    d_out = np.full_like(out_t, np.nan)
    good = ok_all
    d_out[good] = frame.dir_to_global(_normalize(out_t[good]))
    return p_out, d_out, ok_all


def trace_grin_segment(material, entry_point, entry_dir, exit_surface, frame=None, step=GRIN_STEP):
    """Single-ray GRIN transfer; ``frame`` defaults to the global frame."""
    frame = frame or SurfacePose()
    p, d, ok = grin_transfer(
        material, frame, exit_surface, np.asarray(entry_point, float)[None, :], np.asarray(entry_dir, float)[None, :], step
    )
    if not ok[0]:
        raise StepLimitExceeded("GRIN ray left the exit surface domain")
    return p[0], d[0]


# --------------------------------------------------------------------------
# Systems


@dataclass(frozen=True)
class OpticalSystem:
    """Ordered surfaces with the medium in front of the first one.

    ``reference_point``/``reference_axis`` anchor object-space fields;
    ``object_pose`` is the local frame of a finite object (a display) for
    :class:`DisplayField` launches.  ``pupil_diameter`` is the stop's clear
    diameter in mm.
    """

    surfaces: tuple
    object_material: object = AIR
    stop_index: int = 0
    pupil_diameter: float = 4.0
    reference_point: tuple = (0.0, 0.0, 0.0)
    reference_axis: tuple = (0.0, 0.0, 1.0)
    object_pose: Optional[SurfacePose] = None
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "surfaces", tuple(self.surfaces))
        if not self.surfaces:
            raise GeometryError("an optical system needs at least one surface")
        if not 0 <= self.stop_index < len(self.surfaces):
            raise GeometryError(f"stop index {self.stop_index} out of range")

    def __len__(self):
        return len(self.surfaces)

    @property
    def media(self):
        return tuple(s.material for s in self.surfaces)

    @property
    def stop(self):
        return self.surfaces[self.stop_index]

    def index_of(self, name):
        for i, s in enumerate(self.surfaces):
            if s.name == name:
                return i
        raise KeyError(name)

    def replace_surface(self, i, surface):
        surfaces = list(self.surfaces)
        surfaces[i] = surface
        return replace(self, surfaces=tuple(surfaces))

    def with_image_offset(self, offset):
        """Replace the image surface by a plane shifted ``offset`` mm along its axis."""
        if offset == 0.0:
            return self
        last = self.surfaces[-1]
        plane = replace(last, profile=Plane(), pose=last.pose.shifted(dz=offset), aperture=None)
        return self.replace_surface(len(self.surfaces) - 1, plane)

    def with_stop_decenter(self, dx, dy):
        stop = self.stop
        return self.replace_surface(self.stop_index, replace(stop, pose=stop.pose.shifted(dx=dx, dy=dy)))


@dataclass
class TraceResult:
    """Per-ray, per-surface arrays from :func:`trace_arrays`.

    ``codes`` holds :class:`Interaction` indices, -1 where a surface was not
    reached.  ``points``/``directions``/``normals`` are NaN there as well.
    """

    system: OpticalSystem
    points: np.ndarray
    directions: np.ndarray
    normals: np.ndarray
    n_in: np.ndarray
    n_out: np.ndarray
    codes: np.ndarray
    wavelength: float

    @property
    def n_rays(self):
        return self.codes.shape[0]

    @property
    def alive(self):
        """Rays that reached the last traced surface without a terminal event."""
        last = self.codes[:, -1]
        return (last >= 0) & ~np.isin(last, list(TERMINAL_CODES))

    @property
    def terminal_points(self):
        return self.points[:, -1, :]

    @property
    def terminal_directions(self):
        return self.directions[:, -1, :]

    @property
    def vignetted_fraction(self):
        return 1.0 - float(np.mean(self.alive)) if self.n_rays else 1.0

    @property
    def leakage_fraction(self):
        escaped = np.any(self.codes == _CODE[Interaction.ESCAPED], axis=1)
        return float(np.mean(escaped)) if self.n_rays else 0.0

    def interactions(self, i):
        return [_CODES[c] for c in self.codes[i] if c >= 0]

    def path(self, i):
        records = []
        for s, c in enumerate(self.codes[i]):
            if c < 0:
                break
            surf = self.system.surfaces[s]
            records.append(
                SurfaceRecord(
                    surface_index=s,
                    surface_name=surf.name,
                    point=self.points[i, s].copy(),
                    direction=self.directions[i, s].copy(),
                    normal=self.normals[i, s].copy(),
                    n_in=float(self.n_in[i, s]),
                    n_out=float(self.n_out[i, s]),
                    interaction=_CODES[c],
                )
            )
        terminal = records[-1].point if records and records[-1].interaction not in _TERMINAL else None
        if len(records) < len(self.system.surfaces):
            terminal = None
        return RayPath(tuple(records), terminal)

    def subset(self, mask):
        return TraceResult(
            self.system,
            self.points[mask],
            self.directions[mask],
            self.normals[mask],
            self.n_in[mask],
            self.n_out[mask],
            self.codes[mask],
            self.wavelength,
        )


_TERMINAL = {Interaction.VIGNETTED, Interaction.MISSED, Interaction.ESCAPED}


@dataclass(frozen=True)
class SurfaceRecord:
    surface_index: int
    surface_name: str
    point: np.ndarray
    direction: np.ndarray
    normal: np.ndarray
    n_in: float
    n_out: float
    interaction: Interaction


@dataclass(frozen=True)
class RayPath:
    records: tuple
    terminal_point: Optional[np.ndarray]

    @property
    def interactions(self):
        return [r.interaction for r in self.records]

    @property
    def completed(self):
        return self.terminal_point is not None


def _index_of(material, local_points, wavelength):
    if isinstance(material, Grin):
        return material.index_at_points(local_points)
    return np.full(len(local_points), material.index(wavelength))


def trace_arrays(system, origins, directions, wavelength=DESIGN_WAVELENGTH, last=None, apertures=True):
    """Trace an (N, 3) batch of rays through ``system.surfaces[:last + 1]``."""
    origins = np.atleast_2d(np.asarray(origins, float))
    dirs = _normalize(np.atleast_2d(np.asarray(directions, float)))
    surfaces = system.surfaces if last is None else system.surfaces[: last + 1]
    n_rays, n_surf = len(origins), len(surfaces)
    points = np.full((n_rays, n_surf, 3), np.nan)
    out_dirs = np.full((n_rays, n_surf, 3), np.nan)
    normals = np.full((n_rays, n_surf, 3), np.nan)
    n_in = np.full((n_rays, n_surf), np.nan)
    n_out = np.full((n_rays, n_surf), np.nan)
    codes = np.full((n_rays, n_surf), NOT_REACHED, dtype=np.int8)

    pos = origins.copy()
    cur = dirs.copy()
    alive = np.all(np.isfinite(pos), axis=1) & np.all(np.isfinite(cur), axis=1)
    medium = system.object_material
    medium_frame = SurfacePose()

    for s, surf in enumerate(surfaces):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        pose = surf.pose
        if isinstance(medium, Grin):
            hit_g, dir_g, ok = grin_transfer(medium, medium_frame, surf, pos[idx], cur[idx], raise_on_limit=False)
            lp = pose.to_local(np.where(ok[:, None], hit_g, 0.0))
            ld = pose.dir_to_local(np.where(ok[:, None], dir_g, 0.0))
            n1 = np.where(ok, _index_of(medium, medium_frame.to_local(np.where(ok[:, None], hit_g, 0.0)), wavelength), np.nan)
        else:
            p_loc = pose.to_local(pos[idx])
            ld = pose.dir_to_local(cur[idx])
            t, ok = intersect_local(surf.profile, p_loc, ld)
            lp = p_loc + np.where(ok, t, 0.0)[:, None] * ld
            n1 = np.full(idx.size, medium.index(wavelength))
        missed = ~ok
        nrm, dom_ok = local_normals(surf.profile, lp, ld)
        missed |= ~dom_ok
        inside = surf.inside_aperture(lp[:, :2]) if apertures else np.ones(idx.size, dtype=bool)
        vign = ~missed & ~inside

        code = np.full(idx.size, _CODE[Interaction.REFRACTED], dtype=np.int8)
        new_ld = np.full_like(ld, np.nan)
        next_medium = surf.material if surf.material is not None else medium
        if isinstance(next_medium, Grin):
            # a GRIN medium is described in the frame of the surface where it starts
            n2 = next_medium.index_at_points(lp) if next_medium is not medium else n1
        else:
            n2 = np.full(idx.size, next_medium.index(wavelength))
        good = ~missed & ~vign

        if isinstance(surf.profile, IdealLens):
            f = surf.profile.focal_length
            sz = np.sign(ld[:, 2])
            sz[sz == 0] = 1.0
            with np.errstate(divide="ignore", invalid="ignore"):
                sx = ld[:, 0] / np.abs(ld[:, 2]) - lp[:, 0] / f
                sy = ld[:, 1] / np.abs(ld[:, 2]) - lp[:, 1] / f
            new_ld = _normalize(np.stack([sx, sy, sz], axis=-1))
        elif surf.mode in (Mode.REFLECT, Mode.HALF_MIRROR_REFLECT):
            new_ld = reflect_many(ld, nrm)
            code[:] = _CODE[Interaction.REFLECTED]
            n2 = n1
            next_medium = medium
        else:
            with np.errstate(invalid="ignore"):
                refr, tir = refract_many(ld, nrm, n1, n2)
            tir &= good
            if surf.mode == Mode.REFRACT_OR_TIR:
                new_ld = np.where(tir[:, None], reflect_many(ld, nrm), refr)
                code[tir] = _CODE[Interaction.TIR]
                code[good & ~tir] = _CODE[Interaction.ESCAPED]
                n2 = np.where(tir, n1, n2)
                if tir.any():
                    next_medium = medium
            else:
                new_ld = refr
                code[tir] = _CODE[Interaction.MISSED]
        code[missed] = _CODE[Interaction.MISSED]
        code[vign] = _CODE[Interaction.VIGNETTED]

        gp = pose.to_global(np.where(missed[:, None], np.nan, lp))
        gd = pose.dir_to_global(new_ld)
        points[idx, s] = gp
        out_dirs[idx, s] = gd
        normals[idx, s] = pose.dir_to_global(nrm)
        n_in[idx, s] = n1
        n_out[idx, s] = n2
        codes[idx, s] = code
        still = ~np.isin(code, list(TERMINAL_CODES))
        still &= np.all(np.isfinite(gd), axis=1)
        pos[idx] = gp
        cur[idx] = gd
        alive[idx] = still
        if next_medium is not medium:
            medium_frame = pose
        medium = next_medium
    return TraceResult(system, points, out_dirs, normals, n_in, n_out, codes, wavelength)


def trace(system, ray):
    """Trace one :class:`Ray`; failures end the path with a terminal record."""
    res = trace_arrays(system, np.asarray(ray.origin)[None, :], np.asarray(ray.direction)[None, :], ray.wavelength)
    return res.path(0)


# --------------------------------------------------------------------------
# Fields, pupil grids and aiming


@dataclass(frozen=True)
class Field:
    """Object-space field: angles (deg) about the reference axis and vergence (D).

    Positive vergence is a real object point ``1000 / V`` mm in front of the
    reference point; negative is a virtual object behind it.
    """

    x_deg: float = 0.0
    y_deg: float = 0.0
    vergence: float = 0.0


@dataclass(frozen=True)
class DisplayField:
    """A point on the object (display) plane in its local mm coordinates."""

    x_mm: float = 0.0
    y_mm: float = 0.0


def hexapolar_grid(rings=6):
    """Unit-disk pupil coordinates: centre plus ``6 i`` points on ring ``i``."""
    pts = [(0.0, 0.0)]
    for i in range(1, rings + 1):
        r = i / rings
        m = 6 * i
        a = 2 * np.pi * np.arange(m) / m
        pts.extend(zip(r * np.cos(a), r * np.sin(a)))
    return np.array(pts)


def square_grid(n=16):
    """Unit-disk pupil coordinates on an ``n x n`` square lattice (cell centres)."""
    c = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    x, y = np.meshgrid(c, c)
    keep = x ** 2 + y ** 2 <= 1.0
    return np.stack([x[keep], y[keep]], axis=-1)


def pupil_grid(kind="hexapolar", density=6):
    if kind == "hexapolar":
        return hexapolar_grid(density)
    if kind == "square":
        return square_grid(density)
    raise ValueError(f"unknown pupil grid {kind!r}")


def _basis(axis, hint=(1.0, 0.0, 0.0)):
    axis = _normalize(axis)
    h = np.asarray(hint, float)
    e1 = h - (h @ axis) * axis
    if np.linalg.norm(e1) < 1e-9:
        e1 = np.array([0.0, 1.0, 0.0]) - axis[1] * axis
    e1 = _normalize(e1)
    e2 = np.cross(axis, e1)
    return axis, e1, e2


class _Launcher:
    """Maps two launch parameters per ray to (origin, direction)."""

    def __init__(self, system, fld, launch_distance=10.0):
        self.system = system
        if isinstance(fld, DisplayField):
            pose = system.object_pose
            if pose is None:
                raise GeometryError("system has no object pose for display fields")
            self.point = pose.to_global(np.array([[fld.x_mm, fld.y_mm, 0.0]]))[0]
            r = pose.transform.rotation
            self.axis, self.e1, self.e2 = r[:, 2], r[:, 0], r[:, 1]
            self.kind = "point"
            self.scale = 1e-3
        else:
            ref = np.asarray(system.reference_point, float)
            base = _normalize(np.asarray(system.reference_axis, float))
            _, bx, by = _basis(base)
            d = _normalize(base + math.tan(math.radians(fld.x_deg)) * bx + math.tan(math.radians(fld.y_deg)) * by)
            self.axis, self.e1, self.e2 = _basis(d, bx)
            self.vergence = fld.vergence
            dist = launch_distance
            if fld.vergence > 0:
                dist = min(dist, 0.5 * 1000.0 / fld.vergence)
            self.center = ref - dist * self.axis
            if fld.vergence != 0:
                self.obj = ref - (1000.0 / fld.vergence) * self.axis
            self.kind = "plane"
            self.scale = 1e-4

    def __call__(self, uv):
        u = uv[:, :1]
        v = uv[:, 1:2]
        if self.kind == "point":
            d = _normalize(self.axis + u * self.e1 + v * self.e2)
            return np.repeat(self.point[None, :], len(uv), axis=0), d
        o = self.center + u * self.e1 + v * self.e2
        if self.vergence == 0:
            d = np.repeat(self.axis[None, :], len(uv), axis=0)
        else:
            d = math.copysign(1.0, self.vergence) * _normalize(o - self.obj)
        return o, d


def _launch_many(launchers, idx, uv):
    o = np.empty((len(uv), 3))
    d = np.empty((len(uv), 3))
    for k, launcher in enumerate(launchers):
        sel = idx == k
        if sel.any():
            o[sel], d[sel] = launcher(uv[sel])
    return o, d


def _stop_xy(system, launchers, idx, uv, wavelength):
    o, d = _launch_many(launchers, idx, uv)
    res = trace_arrays(system, o, d, wavelength, last=system.stop_index, apertures=False)
    ok = res.codes[:, -1] >= 0
    ok &= ~np.isin(res.codes[:, -1], [_CODE[Interaction.MISSED], _CODE[Interaction.ESCAPED]])
    local = system.stop.pose.to_local(np.where(ok[:, None], res.points[:, -1], 0.0))
    return np.where(ok[:, None], local[:, :2], np.nan)


def _probe(system, launchers, idx, uv, h, wavelength):
    """Stop hits and forward-difference Jacobians from a single trace."""
    n = len(uv)
    du = np.zeros_like(uv)
    dv = np.zeros_like(uv)
    du[:, 0] = h
    dv[:, 1] = h
    f = _stop_xy(system, launchers, np.tile(idx, 3), np.concatenate([uv, uv + du, uv + dv]), wavelength)
    f0, fu, fv = f[:n], f[n : 2 * n], f[2 * n :]
    j = np.stack([(fu - f0) / h[:, None], (fv - f0) / h[:, None]], axis=-1)
    return f0, j


def _newton(system, launchers, idx, uv, targets, wavelength, tol, max_iter):
    h = np.array([launchers[k].scale for k in idx])
    limit = np.array([50.0 if launchers[k].kind == "plane" else 0.5 for k in idx])
    uv = uv.copy()
    active = np.ones(len(uv), bool)
    for _ in range(max_iter):
        a = np.flatnonzero(active)
        if a.size == 0:
            break
        f0, j = _probe(system, launchers, idx[a], uv[a], h[a], wavelength)
        err = f0 - targets[a]
        ok = np.all(np.isfinite(err), axis=1)
        done = ok & (np.max(np.abs(np.where(ok[:, None], err, 0.0)), axis=1) < tol)
        active[a[done]] = False
        det = j[:, 0, 0] * j[:, 1, 1] - j[:, 0, 1] * j[:, 1, 0]
        go = ok & ~done & np.isfinite(det) & (np.abs(det) > 1e-300)
        if not go.any():
            active[a] = False
            break
        step = np.linalg.solve(j[go], err[go][..., None])[..., 0]
        lim = limit[a[go]][:, None]
        uv[a[go]] -= np.clip(step, -lim, lim)
        active[a[~go & ~done]] = False
    return uv


def aim_fields(system, fields, targets, wavelength=DESIGN_WAVELENGTH, tol=1e-9, max_iter=12):
    """Launch rays for every field that hit the stop at ``targets`` (stop-local mm).

    Newton iteration with forward-difference Jacobians, vectorised over all
    fields and rays.  Chief rays are solved first; their Jacobians seed the
    pupil rays.  Rays the iteration cannot place keep their best launch and
    are left for the full trace to flag.

    Returns:
        ``(origins, directions)`` of shape ``(len(fields) * len(targets), 3)``,
        grouped by field.
    """
    launchers = [_Launcher(system, f) for f in fields]
    targets = np.atleast_2d(np.asarray(targets, float))
    nf, m = len(launchers), len(targets)
    fidx = np.arange(nf)
    chief = _newton(system, launchers, fidx, np.zeros((nf, 2)), np.zeros((nf, 2)), wavelength, tol, max_iter)
    h = np.array([lz.scale for lz in launchers])
    f0, j = _probe(system, launchers, fidx, chief, h, wavelength)
    uv0 = np.repeat(chief, m, axis=0)
    for k in range(nf):
        if np.all(np.isfinite(j[k])) and np.all(np.isfinite(f0[k])) and abs(np.linalg.det(j[k])) > 1e-300:
            uv0[k * m : (k + 1) * m] += np.linalg.solve(j[k], (targets - f0[k]).T).T
    idx = np.repeat(fidx, m)
    uv = _newton(system, launchers, idx, uv0, np.tile(targets, (nf, 1)), wavelength, tol, max_iter)
    return _launch_many(launchers, idx, uv)


def aim_rays(system, fld, targets, wavelength=DESIGN_WAVELENGTH, tol=1e-9, max_iter=12):
    """Launch rays for one field that hit the stop at ``targets`` (see :func:`aim_fields`)."""
    return aim_fields(system, [fld], targets, wavelength, tol, max_iter)


@dataclass
class Bundle:
    """An aimed pupil bundle and its trace."""

    field: object
    pupil: np.ndarray
    result: TraceResult

    @property
    def vignetted_fraction(self):
        return self.result.vignetted_fraction

    @property
    def paths(self):
        return [self.result.path(i) for i in range(self.result.n_rays)]

    @property
    def alive(self):
        return self.result.alive

    def terminal_local(self, surface_index=-1):
        """Terminal points of surviving rays in the image surface's local frame."""
        surf = self.result.system.surfaces[surface_index]
        pts = self.result.points[self.alive, surface_index]
        return surf.pose.to_local(pts)


def _trace_threaded(system, origins, dirs, wavelength, threads):
    if not threads or threads <= 1 or len(origins) <= threads:
        return trace_arrays(system, origins, dirs, wavelength)
    chunks = np.array_split(np.arange(len(origins)), threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda c: trace_arrays(system, origins[c], dirs[c], wavelength), chunks))
    return TraceResult(
        system,
        np.concatenate([p.points for p in parts]),
        np.concatenate([p.directions for p in parts]),
        np.concatenate([p.normals for p in parts]),
        np.concatenate([p.n_in for p in parts]),
        np.concatenate([p.n_out for p in parts]),
        np.concatenate([p.codes for p in parts]),
        wavelength,
    )


def trace_fields(
    system,
    fields,
    grid=None,
    wavelength=DESIGN_WAVELENGTH,
    threads=1,
    pupil_scale=1.0,
    stop_offset=(0.0, 0.0),
):
    """Aim a pupil bundle per field, then trace all of them in one batch.

    ``grid`` holds unit-disk pupil coordinates (default: 6-ring hexapolar,
    127 rays).  Rays are aimed at ``grid * pupil_scale * D/2`` on the stop,
    offset by ``stop_offset`` (mm).  With ``threads > 1`` the batch is split
    into contiguous chunks; results are reassembled in ray order, so the
    output does not depend on the thread count.
    """
    grid = hexapolar_grid() if grid is None else np.asarray(grid, float)
    if len(grid) < 1:
        raise InsufficientRays("empty pupil grid")
    targets = grid * (0.5 * system.pupil_diameter * pupil_scale) + np.asarray(stop_offset, float)
    origins, dirs = aim_fields(system, fields, targets, wavelength)
    res = _trace_threaded(system, origins, dirs, wavelength, threads)
    m = len(grid)
    return [Bundle(f, grid, res.subset(slice(i * m, (i + 1) * m))) for i, f in enumerate(fields)]


def trace_bundle(system, fld, grid=None, wavelength=DESIGN_WAVELENGTH, threads=1, pupil_scale=1.0, stop_offset=(0.0, 0.0)):
    """Aim and trace a pupil bundle for one field (see :func:`trace_fields`)."""
    return trace_fields(system, [fld], grid, wavelength, threads, pupil_scale, stop_offset)[0]


def write_paths_csv(bundle, fh):
    """One CSV row per surface record of every ray in ``bundle``."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["ray", "px", "py", "surface", "name", "interaction", "x_mm", "y_mm", "z_mm", "dx", "dy", "dz"])
    res = bundle.result
    for i in range(res.n_rays):
        for s, c in enumerate(res.codes[i]):
            if c < 0:
                break
            p = res.points[i, s]
            d = res.directions[i, s]
            w.writerow(
                [i, f"{bundle.pupil[i, 0]:.6f}", f"{bundle.pupil[i, 1]:.6f}", s, res.system.surfaces[s].name, _CODES[c].value]
                + [f"{v:.9f}" for v in p]
                + [f"{v:.12f}" for v in d]
            )
