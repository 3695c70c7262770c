"""Surface geometry: sag profiles, 3D poses and ray-surface intersection.

Every profile describes ``z = sag(x, y)`` in its own local frame, with the
vertex at the origin and the local z axis along the surface normal at the
vertex.  A :class:`Pose` places that frame in the global coordinate system
(rotate, then translate).

All profile methods are vectorised over numpy arrays.  The ``evaluate``
method never raises; it returns a validity mask so a ray bundle can carry
per-ray failures.  The public :func:`sag` raises :class:`DomainError`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from .errors import DomainError, NoIntersection

#: Extended-polynomial monomials (power of x, power of y), in table column order.
MONOMIALS = (
    (1, 0), (0, 1),
    (2, 0), (1, 1), (0, 2),
    (3, 0), (2, 1), (1, 2), (0, 3),
    (4, 0), (3, 1), (2, 2), (1, 3), (0, 4),
)
MONOMIAL_NAMES = tuple(
    "".join(f"{ax}{p}" for ax, p in (("X", i), ("Y", j)) if p) for i, j in MONOMIALS
)


def _conic(c, k, r2):
    """Conic sag and dz/d(r^2)-style factor for a rotationally symmetric base."""
    arg = 1.0 - (1.0 + k) * c * c * r2
    ok = arg >= 0.0
    root = np.sqrt(np.where(ok, arg, 1.0))
    z = c * r2 / (1.0 + root)
    # dz/dx = c x / root
    slope = c / root
    return z, slope, ok


class _Profile:
    """Shared helpers for the frozen profile dataclasses."""

    kind = "abstract"

    def evaluate(self, x, y):
        """Return ``(z, dz/dx, dz/dy, valid)`` for array inputs."""
        raise NotImplementedError

    def sag(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        z, _, _, ok = self.evaluate(x, y)
        if not np.all(ok):
            raise DomainError(f"{self.kind} sag is not real at the requested point(s)")
        return z if z.ndim else float(z)

    def gradient(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        _, gx, gy, ok = self.evaluate(x, y)
        if not np.all(ok):
            raise DomainError(f"{self.kind} slope is not real at the requested point(s)")
        return gx, gy

    def normal(self, x, y):
        """Unit normal of ``z - sag(x, y) = 0`` pointing toward +z."""
        gx, gy = self.gradient(x, y)
        n = np.stack(np.broadcast_arrays(-gx, -gy, np.ones_like(gx)), axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)


@dataclass(frozen=True)
class Plane(_Profile):
    kind = "plane"

    def evaluate(self, x, y):
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        zero = np.zeros_like(x)
        return zero, zero, zero.copy(), np.ones(x.shape, dtype=bool)

    def negated(self):
        return self

    def to_dict(self):
        return {"type": self.kind}


@dataclass(frozen=True)
class IdealLens(_Profile):
    """Flat ideal (paraxial) thin lens; the tracer applies the deflection."""

    focal_length: float
    kind = "ideal_lens"

    def evaluate(self, x, y):
        return Plane().evaluate(x, y)

    def negated(self):
        return self

    def to_dict(self):
        return {"type": self.kind, "focal_length_mm": self.focal_length}


@dataclass(frozen=True)
class Standard(_Profile):
    """Conic of revolution: curvature ``c`` (1/mm) and conic constant ``k``."""

    c: float
    k: float = 0.0
    kind = "standard"

    @classmethod
    def from_radius(cls, radius, k=0.0):
        return cls(0.0 if math.isinf(radius) else 1.0 / radius, k)

    def evaluate(self, x, y):
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        z, slope, ok = _conic(self.c, self.k, x * x + y * y)
        return z, slope * x, slope * y, ok

    def negated(self):
        return Standard(-self.c, self.k)

    def to_dict(self):
        return {"type": self.kind, "curvature_per_mm": self.c, "conic": self.k}


@dataclass(frozen=True)
class Biconic(_Profile):
    """Independent curvature and conic in x and y."""

    c_x: float
    c_y: float
    k_x: float = 0.0
    k_y: float = 0.0
    kind = "biconic"

    def evaluate(self, x, y):
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        num = self.c_x * x * x + self.c_y * y * y
        arg = (
            1.0
            - (1.0 + self.k_x) * self.c_x ** 2 * x * x
            - (1.0 + self.k_y) * self.c_y ** 2 * y * y
        )
        ok = arg >= 0.0
        s = np.sqrt(np.where(ok, arg, 1.0))
        den = 1.0 + s
        z = num / den
        ds_dx = -(1.0 + self.k_x) * self.c_x ** 2 * x / s
        ds_dy = -(1.0 + self.k_y) * self.c_y ** 2 * y / s
        gx = (2.0 * self.c_x * x * den - num * ds_dx) / (den * den)
        gy = (2.0 * self.c_y * y * den - num * ds_dy) / (den * den)
        return z, gx, gy, ok

    def negated(self):
        return Biconic(-self.c_x, -self.c_y, self.k_x, self.k_y)

    def to_dict(self):
        return {
            "type": self.kind,
            "curvature_x_per_mm": self.c_x,
            "curvature_y_per_mm": self.c_y,
            "conic_x": self.k_x,
            "conic_y": self.k_y,
        }


@dataclass(frozen=True)
class CylinderY(_Profile):
    """Cylinder with power in the y-z plane only."""

    c_y: float
    kind = "cylinder_y"

    def evaluate(self, x, y):
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        z, slope, ok = _conic(self.c_y, 0.0, y * y)
        return z, np.zeros_like(x), slope * y, ok

    def negated(self):
        return CylinderY(-self.c_y)

    def to_dict(self):
        return {"type": self.kind, "curvature_y_per_mm": self.c_y}


@dataclass(frozen=True)
class ExtendedPolynomial(_Profile):
    """Conic base plus monomials in normalised coordinates (x/r_norm, y/r_norm).

    ``coeffs[i]`` multiplies ``MONOMIALS[i]``; missing trailing terms are zero.
    """

    c: float
    k: float
    norm_radius: float
    coeffs: tuple = ()
    kind = "extended_polynomial"

    def __post_init__(self):
        if len(self.coeffs) > len(MONOMIALS):
            raise ValueError(f"at most {len(MONOMIALS)} polynomial terms are supported")
        if not self.norm_radius > 0:
            raise ValueError("norm_radius must be positive")
        object.__setattr__(self, "coeffs", tuple(float(a) for a in self.coeffs))

    @property
    def n_terms(self):
        return len(self.coeffs)

    @classmethod
    def from_base_radius(cls, base_radius, k, norm_radius, coeffs):
        """Build from a tabulated base *radius* (mm) rather than a curvature.

        The combiner tables list the base value in the curvature column, but a
        value of a few hundred is only plausible as a radius in mm.
        """
        c = 0.0 if base_radius == 0 or math.isinf(base_radius) else 1.0 / base_radius
        return cls(c, k, norm_radius, tuple(coeffs))

    def evaluate(self, x, y):
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        z, slope, ok = _conic(self.c, self.k, x * x + y * y)
        gx = slope * x
        gy = slope * y
        u = x / self.norm_radius
        v = y / self.norm_radius
        for a, (i, j) in zip(self.coeffs, MONOMIALS):
            if a == 0.0:
                continue
            z = z + a * u ** i * v ** j
            if i:
                gx = gx + a * i * u ** (i - 1) * v ** j / self.norm_radius
            if j:
                gy = gy + a * j * u ** i * v ** (j - 1) / self.norm_radius
        return z, gx, gy, ok

    def negated(self):
        return ExtendedPolynomial(-self.c, self.k, self.norm_radius, tuple(-a for a in self.coeffs))

    def to_dict(self):
        return {
            "type": self.kind,
            "curvature_per_mm": self.c,
            "conic": self.k,
            "norm_radius_mm": self.norm_radius,
            "coefficients_mm": dict(zip(MONOMIAL_NAMES, self.coeffs)),
        }


@dataclass(frozen=True)
class Bifocal(_Profile):
    """A base profile with an added spherical segment below a boundary line.

    The segment covers points whose *global* height (the local frame turned
    by ``rotation_deg`` about z) lies below ``boundary_y``.  Its extra sag is
    a sphere of curvature ``add_c`` centred on the vertex, shifted so the two
    zones meet on the boundary at x = 0.
    """

    base: object
    add_c: float
    boundary_y: float = -4.0
    rotation_deg: float = 0.0
    kind = "bifocal"

    def _lower(self, x, y):
        a = math.radians(self.rotation_deg)
        return math.sin(a) * x + math.cos(a) * y < self.boundary_y

    def evaluate(self, x, y):
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        z, gx, gy, ok = self.base.evaluate(x, y)
        if self.add_c == 0.0:
            return z, gx, gy, ok
        seg = Standard(self.add_c)
        dz, dgx, dgy, ok2 = seg.evaluate(x, y)
        z0 = seg.evaluate(np.array(0.0), np.array(self.boundary_y))[0]
        low = self._lower(x, y)
        z = np.where(low, z + dz - z0, z)
        gx = np.where(low, gx + dgx, gx)
        gy = np.where(low, gy + dgy, gy)
        return z, gx, gy, ok & (ok2 | ~low)

    def negated(self):
        return Bifocal(self.base.negated(), -self.add_c, self.boundary_y, self.rotation_deg)

    def to_dict(self):
        return {
            "type": self.kind,
            "base": self.base.to_dict(),
            "add_curvature_per_mm": self.add_c,
            "boundary_y_mm": self.boundary_y,
            "rotation_deg": self.rotation_deg,
        }


SurfaceProfile = Plane | IdealLens | Standard | Biconic | CylinderY | ExtendedPolynomial | Bifocal


def profile_from_dict(data):
    kind = data["type"]
    if kind == "plane":
        return Plane()
    if kind == "ideal_lens":
        return IdealLens(float(data["focal_length_mm"]))
    if kind == "standard":
        return Standard(float(data["curvature_per_mm"]), float(data.get("conic", 0.0)))
    if kind == "biconic":
        return Biconic(
            float(data["curvature_x_per_mm"]),
            float(data["curvature_y_per_mm"]),
            float(data.get("conic_x", 0.0)),
            float(data.get("conic_y", 0.0)),
        )
    if kind == "cylinder_y":
        return CylinderY(float(data["curvature_y_per_mm"]))
    if kind == "extended_polynomial":
        named = data.get("coefficients_mm", {})
        unknown = set(named) - set(MONOMIAL_NAMES)
        if unknown:
            raise ValueError(f"unknown polynomial terms: {sorted(unknown)}")
        coeffs = [float(named.get(name, 0.0)) for name in MONOMIAL_NAMES]
        while coeffs and coeffs[-1] == 0.0:
            coeffs.pop()
        return ExtendedPolynomial(
            float(data["curvature_per_mm"]),
            float(data.get("conic", 0.0)),
            float(data["norm_radius_mm"]),
            tuple(coeffs),
        )
    if kind == "bifocal":
        return Bifocal(
            profile_from_dict(data["base"]),
            float(data["add_curvature_per_mm"]),
            float(data.get("boundary_y_mm", -4.0)),
            float(data.get("rotation_deg", 0.0)),
        )
    raise ValueError(f"unknown surface profile type {kind!r}")


def sag(profile, x, y):
    """Sag of ``profile`` at ``(x, y)``; raises DomainError outside its domain."""
    return profile.sag(x, y)


# --------------------------------------------------------------------------
# Poses


def _rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Transform:
    """Rigid transform ``p_global = R @ p_local + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, p):
        return np.asarray(p, float) @ self.rotation.T + self.translation

    def apply_dir(self, d):
        return np.asarray(d, float) @ self.rotation.T

    def inverse(self):
        rt = self.rotation.T
        return Transform(rt, -rt @ self.translation)

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first."""
        return Transform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)


@dataclass(frozen=True)
class SurfacePose:
    """Decenter (mm) and tilts (degrees) placing a local frame in global space.

    The rotation is ``Rx(tilt_x) @ Ry(tilt_y) @ Rz(tilt_z)``: tilt about x
    first, then about the new y, then about the new z.  A positive ``tilt_x``
    carries the local +z axis toward global -y.
    """

    decenter: tuple = (0.0, 0.0, 0.0)
    tilt_x: float = 0.0
    tilt_y: float = 0.0
    tilt_z: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "decenter", tuple(float(v) for v in self.decenter))

    @cached_property
    def transform(self):
        r = (
            _rot_x(math.radians(self.tilt_x))
            @ _rot_y(math.radians(self.tilt_y))
            @ _rot_z(math.radians(self.tilt_z))
        )
        return Transform(r, np.array(self.decenter))

    @property
    def axis(self):
        """Global direction of the local +z axis."""
        return self.transform.rotation[:, 2].copy()

    def to_local(self, p):
        t = self.transform
        return (np.asarray(p, float) - t.translation) @ t.rotation

    def to_global(self, p):
        return self.transform.apply(p)

    def dir_to_local(self, d):
        return np.asarray(d, float) @ self.transform.rotation

    def dir_to_global(self, d):
        return self.transform.apply_dir(d)

    def shifted(self, dz=0.0, dx=0.0, dy=0.0):
        """Pose moved by (dx, dy, dz) expressed in its own local frame."""
        offset = self.transform.rotation @ np.array([dx, dy, dz])
        return SurfacePose(tuple(np.array(self.decenter) + offset), self.tilt_x, self.tilt_y, self.tilt_z)

    def to_dict(self):
        return {
            "decenter_mm": list(self.decenter),
            "tilt_x_deg": self.tilt_x,
            "tilt_y_deg": self.tilt_y,
            "tilt_z_deg": self.tilt_z,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            tuple(data.get("decenter_mm", (0.0, 0.0, 0.0))),
            float(data.get("tilt_x_deg", 0.0)),
            float(data.get("tilt_y_deg", 0.0)),
            float(data.get("tilt_z_deg", 0.0)),
        )


# --------------------------------------------------------------------------
# Surfaces


APERTURE_SLACK = 1e-8


class Mode(str, enum.Enum):
    REFRACT = "refract"
    REFLECT = "reflect"
    REFRACT_OR_TIR = "refract_or_tir"
    HALF_MIRROR_REFLECT = "half_mirror_reflect"


@dataclass(frozen=True)
class Surface:
    """One optical interface.

    ``material`` is the medium the ray is in *after* the interaction; for a
    reflection that is the medium it was already in.  ``aperture`` holds
    half-widths (x, y) in mm of a rectangle or ellipse in local coordinates;
    ``None`` means unbounded.
    """

    profile: object
    pose: SurfacePose = field(default_factory=SurfacePose)
    mode: Mode = Mode.REFRACT
    material: object = None
    aperture: Optional[tuple] = None
    aperture_shape: str = "rect"
    name: str = ""
    reflectance: float = 0.5

    def __post_init__(self):
        if self.aperture is not None:
            hx, hy = self.aperture
            if not (hx > 0 and hy > 0):
                raise ValueError("aperture half-widths must be positive")
        if self.aperture_shape not in ("rect", "ellipse"):
            raise ValueError("aperture_shape must be 'rect' or 'ellipse'")
        object.__setattr__(self, "mode", Mode(self.mode))

    def inside_aperture(self, local_xy):
        if self.aperture is None:
            return np.ones(local_xy.shape[:-1], dtype=bool)
        hx, hy = self.aperture
        x = local_xy[..., 0]
        y = local_xy[..., 1]
        # slack covers rays aimed at the rim to within the aiming tolerance
        if self.aperture_shape == "ellipse":
            return (x / hx) ** 2 + (y / hy) ** 2 <= 1.0 + APERTURE_SLACK
        return (np.abs(x) <= hx * (1.0 + APERTURE_SLACK)) & (np.abs(y) <= hy * (1.0 + APERTURE_SLACK))

    def replace(self, **changes):
        from dataclasses import replace

        return replace(self, **changes)


@dataclass(frozen=True)
class Hit:
    point: np.ndarray
    normal: np.ndarray
    vignetted: bool
    distance: float


NEWTON_MAX_ITER = 50


def intersect_local(profile, p, d, tol=1e-12):
    """Vectorised intersection in the profile's local frame.

    Args:
        profile: surface profile.
        p, d: (N, 3) ray origins and unit directions, local frame.

    Returns:
        (t, valid): path length to the hit and a mask of rays that found a
        forward root.  Damped Newton on the ray parameter, starting from the
        vertex-plane intersection, with a per-ray bisection fallback.
    """
    p = np.atleast_2d(p)
    d = np.atleast_2d(d)
    n = p.shape[0]
    dz = d[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(np.abs(dz) > 1e-14, -p[:, 2] / dz, 0.0)
    if isinstance(profile, (Plane, IdealLens)):
        valid = (np.abs(dz) > 1e-14) & (t >= -1e-9)
        return t, valid

    def resid(tt, idx):
        x = p[idx, 0] + tt * d[idx, 0]
        y = p[idx, 1] + tt * d[idx, 1]
        z, gx, gy, ok = profile.evaluate(x, y)
        f = p[idx, 2] + tt * dz[idx] - z
        fp = dz[idx] - gx * d[idx, 0] - gy * d[idx, 1]
        return f, fp, ok

    converged = np.zeros(n, dtype=bool)
    active = np.arange(n)
    f, fp, ok = resid(t, active)
    for _ in range(NEWTON_MAX_ITER):
        if active.size == 0:
            break
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(ok & (np.abs(fp) > 1e-300), f / fp, np.nan)
        bad = ~np.isfinite(step)
        step = np.where(bad, 0.0, step)
        t_a = t[active]
        lam = np.ones(active.size)
        new_t = t_a - step
        nf, nfp, nok = resid(new_t, active)
        # backtrack where the step leaves the domain or increases |f|
        for _ in range(30):
            worse = (~nok | (np.abs(nf) > np.abs(f) * (1 - 1e-4) + tol)) & ~bad
            worse &= np.abs(step * lam) > tol
            if not worse.any():
                break
            lam = np.where(worse, lam * 0.5, lam)
            sub = np.flatnonzero(worse)
            new_t[sub] = t_a[sub] - lam[sub] * step[sub]
            nf_s, nfp_s, nok_s = resid(new_t[sub], active[sub])
            nf[sub], nfp[sub], nok[sub] = nf_s, nfp_s, nok_s
        t[active] = new_t
        done = nok & (np.abs(nf) <= 1e-11)
        converged[active[done]] = True
        keep = ~done & ~bad
        active = active[keep]
        f, fp, ok = nf[keep], nfp[keep], nok[keep]
    for i in np.flatnonzero(~converged):
        root = _bisect_root(profile, p[i], d[i], t[i] if np.isfinite(t[i]) else 0.0)
        if root is not None:
            t[i] = root
            converged[i] = True
    valid = converged & np.isfinite(t) & (t >= -1e-9)
    return t, valid


def _bisect_root(profile, p, d, t_guess):
    def g(tt):
        x = p[0] + tt * d[0]
        y = p[1] + tt * d[1]
        z, _, _, ok = profile.evaluate(np.array(x), np.array(y))
        return (p[2] + tt * d[2] - float(z)) if bool(ok) else None

    t_guess = max(t_guess, 0.0) if np.isfinite(t_guess) else 0.0
    g0 = g(t_guess)
    if g0 is None:
        return None
    if g0 == 0.0:
        return t_guess
    width = 1e-3
    for _ in range(40):
        for other in (t_guess + width, max(t_guess - width, -1e-9)):
            g1 = g(other)
            if g1 is not None and np.sign(g1) != np.sign(g0):
                lo, hi = sorted((t_guess, other))
                glo = g(lo)
                for _ in range(200):
                    mid = 0.5 * (lo + hi)
                    gm = g(mid)
                    if gm is None:
                        return None
                    if np.sign(gm) == np.sign(glo):
                        lo, glo = mid, gm
                    else:
                        hi = mid
                    if hi - lo < 1e-14:
                        break
                return 0.5 * (lo + hi)
        width *= 2.0
    return None


def local_normals(profile, local_points, local_dirs):
    """Unit normals at local points, oriented against the incoming directions."""
    z, gx, gy, ok = profile.evaluate(local_points[:, 0], local_points[:, 1])
    nrm = np.stack([-gx, -gy, np.ones_like(gx)], axis=-1)
    nrm /= np.linalg.norm(nrm, axis=-1, keepdims=True)
    flip = np.einsum("ij,ij->i", nrm, local_dirs) > 0.0
    nrm[flip] *= -1.0
    return nrm, ok


def intersect(surface, ray):
    """Intersect a single ray (anything with ``origin``/``direction``) with a surface.

    Returns a :class:`Hit` in global coordinates.  Rays landing outside the
    aperture come back with ``vignetted=True``.
    """
    origin = np.asarray(ray.origin, float)
    direction = np.asarray(ray.direction, float)
    p = surface.pose.to_local(origin[None, :])
    d = surface.pose.dir_to_local(direction[None, :])
    t, valid = intersect_local(surface.profile, p, d)
    if not valid[0]:
        raise NoIntersection(f"ray does not reach surface {surface.name or surface.profile.kind}")
    lp = p + t[:, None] * d
    nrm, _ = local_normals(surface.profile, lp, d)
    inside = surface.inside_aperture(lp[:, :2])
    return Hit(
        point=surface.pose.to_global(lp)[0],
        normal=surface.pose.dir_to_global(nrm)[0],
        vignetted=not bool(inside[0]),
        distance=float(t[0]),
    )
