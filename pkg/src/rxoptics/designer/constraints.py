"""Post-hoc feasibility checks for AR designs.

This validator is deliberately separate from the merit penalties: it reads
the parameter values and the tracer's own interaction codes, so a bug in the
penalty terms cannot hide a violation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import InfeasibleConstraints, OpticsError
from ..tracer import Interaction, trace_fields

#: Centre and edge thickness floor for each lens element (mm).
THICKNESS_FLOOR_MM = 1.0
#: Air gaps around the beam-shaping lens (mm).
GAP_FLOOR_MM = 0.2
#: Display-to-waveguide stack ceiling (mm).
STACK_CEILING_MM = 8.5


@dataclass(frozen=True)
class Violation:
    name: str
    value: float
    limit: float
    message: str

    def amount(self):
        """Size of the violation in the constraint's own units."""
        return abs(self.value - self.limit)


def _sphere_sag(radius, h):
    if math.isinf(radius):
        return 0.0
    if abs(radius) < h:
        return math.nan
    return radius - math.copysign(math.sqrt(radius * radius - h * h), radius)


def bsl_edge_thickness_mm(params):
    """Beam-shaping lens thickness at its clear semi-aperture (closed-form sphere sags)."""
    h = params.bsl_semi_aperture_mm
    z1 = _sphere_sag(params.bsl_display_side_radius_mm, h)
    z2 = _sphere_sag(params.bsl_prism_side_radius_mm, h)
    edge = params.bsl_thickness_mm - z1 + z2
    return edge if math.isfinite(edge) else -math.inf


def check_lengths(params):
    """Thickness, gap and stack limits of the in-coupling chain."""
    out = []
    for name in ("bsl_thickness_mm", "cylinder_depth_mm", "waveguide_depth_mm"):
        v = float(getattr(params, name))
        if not v >= THICKNESS_FLOOR_MM:
            out.append(Violation(name, v, THICKNESS_FLOOR_MM, f"{name} = {v:.4f} mm is below {THICKNESS_FLOOR_MM} mm"))
    edge = bsl_edge_thickness_mm(params)
    if not edge >= THICKNESS_FLOOR_MM:
        out.append(Violation("bsl_edge_thickness_mm", edge, THICKNESS_FLOOR_MM,
                             f"beam-shaping lens edge {edge:.4f} mm is below {THICKNESS_FLOOR_MM} mm"))
    for name in ("display_gap_mm", "prism_gap_mm"):
        v = float(getattr(params, name))
        if not v >= GAP_FLOOR_MM:
            out.append(Violation(name, v, GAP_FLOOR_MM, f"{name} = {v:.4f} mm is below {GAP_FLOOR_MM} mm"))
    stack = (
        params.display_gap_mm
        + params.prism_gap_mm
        + params.bsl_thickness_mm
        + params.cylinder_depth_mm
        + params.waveguide_depth_mm
    )
    if not stack <= STACK_CEILING_MM:
        out.append(Violation("stack_mm", stack, STACK_CEILING_MM, f"stack {stack:.4f} mm exceeds {STACK_CEILING_MM} mm"))
    return out


def check_tir(params, lens, spec):
    """Every field's chief ray must be totally reflected at both lens walls.

    Checked on every eye-relief configuration of ``spec`` by tracing the
    reversed path and reading the interaction codes.
    """
    from .ar import build_ar_system, reverse_path

    out = []
    fields = spec.fields(params.image_distance_mm)
    for d_e in spec.eye_reliefs_mm:
        try:
            ar = build_ar_system(params, lens=lens, eye_relief_mm=d_e)
        except OpticsError as exc:
            out.append(Violation("tir", 0.0, 1.0, f"d_e={d_e}: {exc}"))
            continue
        rev = reverse_path(ar)
        walls = (rev.index_of("lens_rear_tir"), rev.index_of("lens_front_tir"))
        for fld, b in zip(fields, trace_fields(rev, fields, np.zeros((1, 2)))):
            got = [b.result.interactions(0)[i] if len(b.result.interactions(0)) > i else None for i in walls]
            if got != [Interaction.TIR, Interaction.TIR]:
                out.append(Violation("tir", 0.0, 1.0,
                                     f"d_e={d_e}, field ({fld.x_deg:g}, {fld.y_deg:g}) deg: walls gave {[g.value if g else None for g in got]}"))
    return out


def validate(params, lens=None, spec=None):
    """All violations of the physical constraints (empty list when feasible)."""
    out = check_lengths(params)
    if lens is not None and spec is not None:
        out += check_tir(params, lens, spec)
    return out


def require_feasible(params, lens=None, spec=None):
    """Raise InfeasibleConstraints unless :func:`validate` is clean."""
    bad = validate(params, lens, spec)
    if bad:
        raise InfeasibleConstraints("; ".join(v.message for v in bad[:5]), params, bad)
    return params
