import io
import math
from dataclasses import replace

import numpy as np
import pytest

from rxoptics.analysis import (
    MIN_MTF_RAYS,
    FocusMapping,
    MTFCurve,
    TradeCurve,
    disk_mtf,
    display_mm_per_degree,
    display_point_for_angle,
    evaluate_design,
    eyebox,
    fov,
    geometric_mtf,
    mtf_grid,
    nyquist_cpd,
    plot_spots_svg,
    plot_trade_svg,
    spot,
    through_focus,
    trade_sweep,
    write_spots_csv,
    write_trade_csv,
)
from rxoptics.designer.ar import PROTOTYPE
from rxoptics.errors import ConfigError, InsufficientRays, OpticsError
from rxoptics.eye import Prescription, build_eye, far_point
from rxoptics.surfaces import IdealLens, Plane, Surface, SurfacePose
from rxoptics.tracer import Field, OpticalSystem, square_grid, trace_bundle


def ideal_system(pupil=4.0, image_offset=0.0):
    f = 20.0
    return OpticalSystem(
        (
            Surface(IdealLens(f), name="lens"),
            Surface(Plane(), SurfacePose((0, 0, f + image_offset)), name="image"),
        ),
        stop_index=0,
        pupil_diameter=pupil,
    )


def uniform_disk(radius, n=400):
    c = (np.arange(n) + 0.5) / n * 2 - 1
    x, y = np.meshgrid(c, c)
    keep = x ** 2 + y ** 2 <= 1
    return radius * np.column_stack([x[keep], y[keep]])


# -- spots -------------------------------------------------------------------


def test_perfect_lens_spot_is_a_point():
    s = spot(ideal_system())
    assert s.rms_um < 1e-6
    assert s.n_rays == 127


def test_rms_is_recomputable():
    s = spot(ideal_system(), Field(3.0, 1.0), offset_mm=0.2)
    assert abs(s.rms_um - s.recomputed_rms_um()) <= 1e-9


def test_through_focus_is_v_shaped():
    offsets = np.linspace(-0.3, 0.3, 7)
    rms = [s.rms_um for s in through_focus(ideal_system(), Field(), offsets)]
    i = int(np.argmin(rms))
    assert offsets[i] == 0.0
    assert all(a > b for a, b in zip(rms[:i], rms[1 : i + 1]))
    assert all(a < b for a, b in zip(rms[i:], rms[i + 1 :]))


def test_defocus_spot_scales_with_pupil():
    rms = {d: spot(ideal_system(pupil=d, image_offset=0.3), grid=square_grid(40)).rms_um for d in (2.0, 4.0, 6.0)}
    assert rms[4.0] / rms[2.0] == pytest.approx(2.0, rel=0.02)
    assert rms[6.0] / rms[2.0] == pytest.approx(3.0, rel=0.02)


def test_spot_of_a_fully_vignetted_field_raises():
    blocked = OpticalSystem(
        (Surface(IdealLens(20.0), aperture=(1.0, 1.0)), Surface(Plane(), SurfacePose((0, 0, 20)))),
        pupil_diameter=4.0,
    )
    bundle = trace_bundle(blocked, Field(), square_grid(10))
    assert bundle.vignetted_fraction == 1.0 or bundle.vignetted_fraction > 0.5
    fully = OpticalSystem(
        (Surface(Plane(), name="stop"), Surface(Plane(), SurfacePose((0, 0, 5)), aperture=(1e-3, 1e-3)),
         Surface(Plane(), SurfacePose((0, 0, 10)))),
        pupil_diameter=4.0,
    )
    assert trace_bundle(fully, Field(), square_grid(10)).vignetted_fraction == 1.0
    with pytest.raises(InsufficientRays):
        spot(fully, grid=square_grid(10))


def test_spot_outputs(tmp_path):
    spots = through_focus(ideal_system(), Field(), (-0.1, 0.0, 0.1))
    buf = io.StringIO()
    write_spots_csv(spots, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "field,offset_mm,x_mm,y_mm,rms_um"
    assert len(lines) == 1 + 3 * 127
    a, b = tmp_path / "a.svg", tmp_path / "b.svg"
    plot_spots_svg(spots, a)
    plot_spots_svg(spots, b)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_text().lstrip().startswith("<?xml")


# -- MTF ---------------------------------------------------------------------


def test_delta_spot_has_unit_mtf():
    m = geometric_mtf(np.zeros((MIN_MTF_RAYS, 2)), [0.0, 10.0, 50.0], 0.3)
    assert np.allclose(m.sagittal, 1.0) and np.allclose(m.tangential, 1.0)
    assert math.isinf(m.mtf50_cpd())


@pytest.mark.parametrize("radius", [0.005, 0.02])
def test_uniform_disk_matches_closed_form(radius):
    pts = uniform_disk(radius)
    mm_per_deg = 0.291
    x0 = 3.8317 / (2 * np.pi * radius)  # first zero of J1, cycles/mm
    f = np.linspace(0, x0, 30) * mm_per_deg
    m = geometric_mtf(pts, f, mm_per_deg)
    exact = disk_mtf(f / mm_per_deg, radius)
    assert np.max(np.abs(m.sagittal - exact)) <= 0.02
    assert np.max(np.abs(m.tangential - exact)) <= 0.02


def test_disk_mtf_closed_form_values():
    assert disk_mtf(0.0, 1.0) == 1.0
    assert abs(disk_mtf(3.8317 / (2 * np.pi), 1.0)) < 1e-4


def test_mtf_needs_enough_rays():
    with pytest.raises(InsufficientRays):
        geometric_mtf(np.zeros((MIN_MTF_RAYS - 1, 2)), [1.0], 0.3)
    with pytest.raises(ConfigError):
        geometric_mtf(np.zeros((MIN_MTF_RAYS, 2)), [1.0], 0.0)
    assert len(mtf_grid()) >= MIN_MTF_RAYS


def test_mtf50_interpolates():
    c = MTFCurve(np.array([0.0, 10.0, 20.0]), np.array([1.0, 0.6, 0.2]), np.array([1.0, 0.8, 0.4]))
    assert c.mtf50_cpd() == pytest.approx(12.5)


def test_emmetropic_eye_out_resolves_display():
    eye = build_eye(Prescription())
    b = trace_bundle(eye.system, Field(0.0, 0.0, far_point(eye)), mtf_grid())
    m = geometric_mtf(b.terminal_local()[:, :2], [30.0], 0.291)
    assert min(m.sagittal[0], m.tangential[0]) > 0.5


# -- display metrics --------------------------------------------------------


def test_nyquist_follows_pixel_pitch(prototype_ar):
    mm_per_deg = display_mm_per_degree(prototype_ar)
    assert nyquist_cpd(prototype_ar) == pytest.approx(mm_per_deg / (2 * PROTOTYPE.pixel_pitch_um * 1e-3))
    tx = display_point_for_angle(prototype_ar, 1.0, axis=0)
    ty = display_point_for_angle(prototype_ar, 1.0, axis=1)
    assert tx[1] == 0.0 and ty[0] == 0.0
    # the reported scale is the harmonic mean of the two axes
    assert 2.0 / (1.0 / abs(tx[0]) + 1.0 / abs(ty[1])) == pytest.approx(mm_per_deg, rel=0.05)


def test_fov_grows_with_display_width(prototype_ar):
    widths = (0.0, 2.0, 5.0)
    h = [fov(prototype_ar, display_width_mm=w).horizontal_deg for w in widths]
    assert h[0] == 0.0
    assert h[0] <= h[1] <= h[2]


def test_pupil_matched_beam_leaves_no_slack():
    # a 4 mm beam-limiting aperture in the pupil plane; the pupil is decentred across it
    system = OpticalSystem(
        (
            Surface(Plane(), name="stop"),
            Surface(Plane(), SurfacePose((0, 0, 1e-9)), aperture=(2.0, 2.0), aperture_shape="ellipse", name="beam"),
            Surface(Plane(), SurfacePose((0, 0, 10.0)), name="image"),
        ),
        stop_index=0,
        pupil_diameter=4.0,
    )
    box = eyebox(system, [Field()], grid=square_grid(60))

    def overlap(d, r=2.0):
        if d >= 2 * r:
            return 0.0
        return (2 * r * r * math.acos(d / (2 * r)) - 0.5 * d * math.sqrt(4 * r * r - d * d)) / (math.pi * r * r)

    best = (0, 0, -1)
    for a in range(17):
        for b in range(17):
            if math.hypot(a * 0.5, b * 0.5) > 8 or overlap(math.hypot(a * 0.5, b * 0.5)) < 0.5:
                continue
            area = 4 * a * b
            if area > best[2] or (area == best[2] and a > best[0]):
                best = (a, b, area)
    assert (box.width_mm, box.height_mm) == (best[0], best[1])
    # no room for a pupil-sized step in either direction
    assert box.width_mm < 4.0 and box.height_mm < 4.0


def test_eyebox_needs_fields_for_bare_systems():
    with pytest.raises(ConfigError):
        eyebox(ideal_system())


# -- focus and trade space ----------------------------------------------------


def test_focus_mapping_helpers():
    fm = FocusMapping((-0.2, 0.0, 0.2), (0.0, 1.0, 2.0), (-1.0, 0.0, 1.0))
    assert fm.strictly_monotone()
    assert fm.offset_for(0.5) == pytest.approx(0.1)
    assert fm.span_mm(-1.0, 1.0) == pytest.approx(0.4)
    with pytest.raises(OpticsError):
        fm.offset_for(5.0)
    assert not FocusMapping((0, 1, 2), (0, 1, 0), (0, 1, 0)).strictly_monotone()


def test_trade_curve_validation():
    with pytest.raises(ConfigError):
        TradeCurve("t_l", (5.0, 3.0), (1, 1), (1, 1), (1, 1), (1, 1))
    with pytest.raises(ConfigError):
        trade_sweep(PROTOTYPE, "pixel_pitch", [1.0])
    with pytest.raises(ConfigError):
        trade_sweep(PROTOTYPE, "t_l", [5.0, 5.0])


def test_single_value_sweep_equals_direct_evaluation(tmp_path):
    curve = trade_sweep(PROTOTYPE, "d_e", [16.0], reoptimize=False, with_eyebox=False)
    direct = evaluate_design(replace(PROTOTYPE, eye_relief_mm=16.0), with_eyebox=False)
    assert len(curve.values) == 1
    assert (curve.fov_h_deg[0], curve.fov_v_deg[0]) == direct[:2]
    buf = io.StringIO()
    write_trade_csv(curve, buf)
    assert buf.getvalue().splitlines()[0] == "d_e,fov_h_deg,fov_v_deg,eyebox_w_mm,eyebox_h_mm"
    plot_trade_svg(curve, tmp_path / "t.svg")
    assert (tmp_path / "t.svg").stat().st_size > 0


def test_unbuildable_design_evaluates_to_zero():
    assert evaluate_design(replace(PROTOTYPE, waveguide_tilt_deg=10.0)) == (0.0, 0.0, 0.0, 0.0)
