"""Refractive media: dispersive homogeneous materials and polynomial GRIN media."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import OutOfBand

LAMBDA_D = 0.5876  # um
LAMBDA_F = 0.4861
LAMBDA_C = 0.6563
DESIGN_WAVELENGTH = LAMBDA_D
VISIBLE_BAND = (0.4, 0.7)


def _check_band(wavelength):
    lo, hi = VISIBLE_BAND
    if not lo <= wavelength <= hi:
        raise OutOfBand(f"wavelength {wavelength} um outside [{lo}, {hi}] um")


@dataclass(frozen=True)
class Homogeneous:
    """Two-term Cauchy medium ``n = A + B / lambda^2`` fitted to (n_d, V_d).

    ``B`` is set so that ``n_F - n_C = (n_d - 1) / V_d`` and ``A`` so that the
    d-line index is reproduced exactly.  ``V_d = inf`` gives a dispersion-free
    medium (used for air).
    """

    n_d: float
    v_d: float = math.inf
    name: str = ""

    def __post_init__(self):
        if self.n_d < 1.0 or (self.n_d == 1.0 and not math.isinf(self.v_d)):
            raise ValueError(f"{self.name or 'material'}: n_d must exceed 1")
        if not self.v_d > 0:
            raise ValueError(f"{self.name or 'material'}: Abbe number must be positive")

    @property
    def is_grin(self):
        return False

    @property
    def cauchy(self):
        if math.isinf(self.v_d):
            return self.n_d, 0.0
        b = (self.n_d - 1.0) / self.v_d / (LAMBDA_F ** -2 - LAMBDA_C ** -2)
        return self.n_d - b / LAMBDA_D ** 2, b

    def index(self, wavelength=DESIGN_WAVELENGTH):
        _check_band(wavelength)
        a, b = self.cauchy
        return a + b / wavelength ** 2

    def to_dict(self):
        return {"name": self.name, "n_d": self.n_d, "v_d": None if math.isinf(self.v_d) else self.v_d}


@dataclass(frozen=True)
class Grin:
    """Gradient-index medium ``n(X, Y, Z) = sum c * X^i Y^j Z^k``.

    ``terms`` maps exponent triples ``(i, j, k)`` to coefficients.  Coordinates
    are millimetres in the local frame of the surface where the medium begins,
    so ``Z`` runs from that surface's vertex.  The index is taken as
    wavelength independent.
    """

    terms: tuple
    name: str = ""

    def __post_init__(self):
        items = self.terms.items() if isinstance(self.terms, dict) else self.terms
        object.__setattr__(self, "terms", tuple((tuple(int(e) for e in ex), float(c)) for ex, c in items))

    @property
    def is_grin(self):
        return True

    def index_and_gradient(self, points):
        """Vectorised ``(n, grad n)`` at (N, 3) local points."""
        p = np.atleast_2d(np.asarray(points, float))
        top = max(max(ex) for ex, _ in self.terms)
        # pw[a][e] = coordinate a raised to e (e = 0..top)
        pw = np.ones((3, top + 1, len(p)))
        for e in range(1, top + 1):
            pw[:, e] = pw[:, e - 1] * p.T
        n = np.zeros(len(p))
        g = np.zeros_like(p)
        for (i, j, k), c in self.terms:
            n += c * pw[0, i] * pw[1, j] * pw[2, k]
            if i:
                g[:, 0] += (c * i) * pw[0, i - 1] * pw[1, j] * pw[2, k]
            if j:
                g[:, 1] += (c * j) * pw[0, i] * pw[1, j - 1] * pw[2, k]
            if k:
                g[:, 2] += (c * k) * pw[0, i] * pw[1, j] * pw[2, k - 1]
        return n, g

    def index_at_points(self, points):
        return self.index_and_gradient(points)[0]

    def index(self, wavelength=DESIGN_WAVELENGTH):
        """Index at the local origin (the medium's reference vertex)."""
        _check_band(wavelength)
        return float(self.index_at_points(np.zeros((1, 3)))[0])

    def to_dict(self):
        return {"name": self.name, "grin_terms": [[list(ex), c] for ex, c in self.terms]}


Material = Homogeneous | Grin


def index_at(material, wavelength=DESIGN_WAVELENGTH):
    """Refractive index of a homogeneous material (GRIN: value at its origin)."""
    return material.index(wavelength)


def grin_index_and_gradient(material, point):
    """Scalar convenience: ``(n, grad n)`` of a GRIN medium at one local point."""
    if not isinstance(material, Grin):
        raise TypeError("grin_index_and_gradient needs a Grin material")
    n, g = material.index_and_gradient(np.asarray(point, float)[None, :])
    return float(n[0]), g[0]


AIR = Homogeneous(1.0, math.inf, "AIR")

# Vendor datasheet (n_d, V_d) for the named glasses and polymer.
N_LASF31A = Homogeneous(1.8830, 40.76, "N-LASF31A")
N_BK7 = Homogeneous(1.5168, 64.17, "N-BK7")
COP = Homogeneous(1.5261, 56.2, "COP")

# Schematic-eye media.  The aqueous and the thin layer behind the stop carry
# slightly different indices in the source table; both are kept as listed.
CORNEA = Homogeneous(1.376, 55.468, "CORNEA")
AQUEOUS = Homogeneous(1.3337, 50.522, "AQUEOUS")
STOP_MEDIUM = Homogeneous(1.337, 50.522, "STOP_MEDIUM")
VITREOUS = Homogeneous(1.336, 51.293, "VITREOUS")
LENS_ANTERIOR = Grin(
    {(0, 0, 0): 1.371, (0, 0, 1): 0.0652778, (0, 0, 2): -0.0226659, (2, 0, 0): -0.0020399, (0, 2, 0): -0.0020399},
    "LENS_ANTERIOR",
)
LENS_POSTERIOR = Grin(
    {(0, 0, 0): 1.418, (0, 0, 2): -0.0100737, (2, 0, 0): -0.0020399, (0, 2, 0): -0.0020399},
    "LENS_POSTERIOR",
)

CATALOG = {
    m.name: m
    for m in (
        AIR, N_LASF31A, N_BK7, COP, CORNEA, AQUEOUS, STOP_MEDIUM, VITREOUS, LENS_ANTERIOR, LENS_POSTERIOR
    )
}
CATALOG["ZEONEX"] = COP


def lookup(name):
    try:
        return CATALOG[name.upper()]
    except KeyError:
        raise KeyError(f"unknown material {name!r}; known: {sorted(CATALOG)}") from None


def material_from_spec(spec):
    """Resolve a catalog name or an inline ``{"n_d": .., "v_d": ..}`` mapping."""
    if isinstance(spec, (Homogeneous, Grin)):
        return spec
    if isinstance(spec, str):
        return lookup(spec)
    if isinstance(spec, dict):
        if "grin_terms" in spec:
            return Grin({tuple(ex): c for ex, c in spec["grin_terms"]}, spec.get("name", ""))
        v_d = spec.get("v_d")
        return Homogeneous(float(spec["n_d"]), math.inf if v_d is None else float(v_d), spec.get("name", "custom"))
    raise TypeError(f"cannot interpret material {spec!r}")


def material_to_spec(material):
    """Catalog name when the material is a catalog entry, else an inline mapping."""
    if CATALOG.get(material.name) == material:
        return material.name
    return material.to_dict()
