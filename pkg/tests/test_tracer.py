import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rxoptics.errors import GeometryError, InsufficientRays
from rxoptics.materials import COP, Grin, Homogeneous
from rxoptics.surfaces import IdealLens, Mode, Plane, Standard, Surface, SurfacePose
from rxoptics.tracer import (
    TIR_OUTCOME,
    Field,
    Interaction,
    OpticalSystem,
    Ray,
    aim_rays,
    hexapolar_grid,
    reflect,
    refract,
    square_grid,
    trace,
    trace_arrays,
    trace_bundle,
    trace_fields,
    trace_grin_segment,
    write_paths_csv,
)

Z = np.array([0.0, 0.0, 1.0])
UP = np.array([0.0, 0.0, -1.0])


def _dir(theta_deg, phi_deg=0.0):
    t, p = math.radians(theta_deg), math.radians(phi_deg)
    return np.array([math.sin(t) * math.cos(p), math.sin(t) * math.sin(p), math.cos(t)])


def _sin_angle(d, n):
    return np.linalg.norm(np.cross(d, n))


def test_normal_incidence_is_undeviated():
    assert np.allclose(refract(Z, UP, 1.0, 1.5), Z)


@given(theta=st.floats(0.0, 89.0), phi=st.floats(0, 360), n1=st.floats(1.0, 2.0), n2=st.floats(1.0, 2.0))
def test_snell_law_and_coplanarity(theta, phi, n1, n2):
    d = _dir(theta, phi)
    out = refract(d, UP, n1, n2)
    if n1 * math.sin(math.radians(theta)) > n2:
        assert out == TIR_OUTCOME
        return
    assert abs(np.linalg.norm(out) - 1) < 1e-12
    assert abs(n1 * _sin_angle(d, UP) - n2 * _sin_angle(out, UP)) < 1e-12
    assert abs(np.dot(np.cross(d, UP), out)) < 1e-12
    assert out[2] > 0


def test_critical_angle():
    crit = math.degrees(math.asin(1 / 1.5))
    assert refract(_dir(crit + 0.01), UP, 1.5, 1.0) == TIR_OUTCOME
    assert isinstance(refract(_dir(crit - 0.01), UP, 1.5, 1.0), np.ndarray)


@given(theta=st.floats(0.0, 89.0), phi=st.floats(0, 360))
def test_reflection_law(theta, phi):
    d = _dir(theta, phi)
    out = reflect(d, UP)
    assert np.allclose(out, [d[0], d[1], -d[2]], atol=1e-15)


def test_interface_laws_validate_inputs():
    with pytest.raises(GeometryError):
        refract(Z * 2, UP, 1, 1.5)
    with pytest.raises(GeometryError):
        refract(Z, -UP, 1, 1.5)
    with pytest.raises(GeometryError):
        Ray((0, 0, 0), (0, 0, 0))


def slab(thickness=5.0, material=COP):
    return OpticalSystem(
        (
            Surface(Plane(), SurfacePose((0, 0, 0)), material=material, name="front"),
            Surface(Plane(), SurfacePose((0, 0, thickness)), material=Homogeneous(1.0), name="back"),
            Surface(Plane(), SurfacePose((0, 0, thickness + 10)), name="image"),
        )
    )


def test_slab_lateral_shift_matches_closed_form():
    t, theta = 5.0, 30.0
    path = trace(slab(t), Ray((0, 0, -1), _dir(theta)))
    n = COP.index()
    th = math.radians(theta)
    inner = math.asin(math.sin(th) / n)
    shift = t * math.sin(th - inner) / math.cos(inner)
    exit_pt = path.records[1].point
    straight_y = (t + 1) * math.tan(th)
    assert (straight_y - exit_pt[0]) * math.cos(th) == pytest.approx(shift, abs=1e-12)
    assert np.allclose(path.records[1].direction, _dir(theta), atol=1e-14)
    assert path.interactions == [Interaction.REFRACTED] * 3
    assert path.completed


def test_ideal_lens_focuses_parallel_rays():
    f = 16.67
    system = OpticalSystem(
        (Surface(IdealLens(f), name="lens"), Surface(Plane(), SurfacePose((0, 0, f)), name="image"))
    )
    y = np.linspace(-2, 2, 9)
    o = np.column_stack([np.zeros_like(y), y, np.full_like(y, -1.0)])
    res = trace_arrays(system, o, np.tile(Z, (len(y), 1)))
    assert np.max(np.abs(res.terminal_points[:, :2])) < 1e-12


def test_mirror_reflects_and_tir_surface_classifies():
    mirror = OpticalSystem((Surface(Plane(), SurfacePose((0, 0, 5), tilt_x=45.0), Mode.REFLECT, name="m"),))
    p = trace(mirror, Ray((0, 0, 0), Z))
    assert p.interactions == [Interaction.REFLECTED]
    assert abs(abs(p.records[0].direction[1]) - 1.0) < 1e-12

    glass = Homogeneous(1.5)
    tir = OpticalSystem((Surface(Plane(), mode=Mode.REFRACT_OR_TIR, material=Homogeneous(1.0)),), object_material=glass)
    assert trace(tir, Ray((0, 0, -1), _dir(60))).interactions == [Interaction.TIR]
    assert trace(tir, Ray((0, 0, -1), _dir(20))).interactions == [Interaction.ESCAPED]


def test_aperture_vignetting_and_misses():
    s = OpticalSystem(
        (
            Surface(Plane(), aperture=(1.0, 1.0), name="stop"),
            Surface(Standard(0.5), SurfacePose((0, 0, 5)), name="ball"),
        )
    )
    assert trace(s, Ray((0, 3, -1), Z)).interactions == [Interaction.VIGNETTED]
    p = trace(s, Ray((0, 0.5, -1), _dir(40)))
    assert p.interactions[-1] == Interaction.MISSED
    assert not p.completed


def _focusing_system():
    return OpticalSystem(
        (
            Surface(Plane(), name="stop"),
            Surface(IdealLens(20.0), SurfacePose((0, 0, 1)), name="lens"),
            Surface(Plane(), SurfacePose((0, 0, 21)), name="image"),
        ),
        stop_index=0,
        pupil_diameter=4.0,
    )


def test_aimed_rays_land_on_stop_targets():
    system = _focusing_system()
    targets = hexapolar_grid(3) * 2.0
    o, d = aim_rays(system, Field(5.0, -3.0, -2.0), targets)
    res = trace_arrays(system, o, d)
    assert np.max(np.abs(res.points[:, 0, :2] - targets)) < 1e-9


def test_bundle_and_thread_determinism():
    system = _focusing_system()
    fields = [Field(0, 0), Field(3, 0), Field(0, -4, 1.0)]
    one = trace_fields(system, fields, square_grid(20), threads=1)
    many = trace_fields(system, fields, square_grid(20), threads=3)
    for a, b in zip(one, many):
        assert np.array_equal(a.result.points, b.result.points, equal_nan=True)
        assert np.array_equal(a.result.codes, b.result.codes)
    b = one[0]
    assert b.vignetted_fraction == 0.0
    assert np.max(np.abs(b.terminal_local()[:, :2])) < 1e-12


def test_empty_grid_is_rejected():
    with pytest.raises(InsufficientRays):
        trace_bundle(_focusing_system(), Field(), np.zeros((0, 2)))


def test_pupil_grids():
    assert len(hexapolar_grid(6)) == 1 + 3 * 6 * 7
    g = square_grid(16)
    assert np.all(np.hypot(g[:, 0], g[:, 1]) <= 1.0)


def test_paths_csv_has_one_row_per_record():
    b = trace_bundle(_focusing_system(), Field(), hexapolar_grid(1))
    buf = io.StringIO()
    write_paths_csv(b, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0].startswith("ray,px,py,surface")
    assert len(lines) == 1 + 7 * 3


def test_uniform_grin_is_a_straight_line():
    medium = Grin({(0, 0, 0): 1.5})
    exit_surface = Surface(Plane(), SurfacePose((0, 0, 4)))
    d0 = _dir(10, 30)
    p, d = trace_grin_segment(medium, (0, 0, 0), d0, exit_surface)
    assert np.allclose(d, d0, atol=1e-12)
    assert np.allclose(p, d0 * 4 / d0[2], atol=1e-12)


def test_grin_paraxial_lens_converges_with_step():
    medium = Grin({(0, 0, 0): 1.5, (2, 0, 0): -0.01, (0, 2, 0): -0.01})
    exit_surface = Surface(Plane(), SurfacePose((0, 0, 3)))
    coarse = trace_grin_segment(medium, (0.8, 0.3, 0), Z, exit_surface, step=0.05)
    fine = trace_grin_segment(medium, (0.8, 0.3, 0), Z, exit_surface, step=0.0125)
    assert np.allclose(coarse[0], fine[0], atol=1e-9)
    assert np.allclose(coarse[1], fine[1], atol=1e-9)
    # the gradient bends the ray towards the axis
    assert coarse[1][0] < 0 and coarse[1][1] < 0
