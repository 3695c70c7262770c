import io
import json
import math
import warnings
from dataclasses import replace

import numpy as np
import pytest

from rxoptics.designer.ar import (
    ALL_PARAMS,
    COMBINER_SECONDARY,
    PROTOTYPE,
    DesignParams,
    EyeReliefWarning,
    build_ar_system,
    finite_difference_step,
    get_param,
    param_names,
    reverse_path,
)
from rxoptics.designer.constraints import (
    bsl_edge_thickness_mm,
    check_lengths,
    require_feasible,
    validate,
)
from rxoptics.designer.lens import (
    PrescriptionLensDesign,
    design_prescription_lens,
    direct_lens_profiles,
    lens_merit,
    on_axis_rms,
)
from rxoptics.designer.lm import levenberg_marquardt, numeric_jacobian, write_history_csv
from rxoptics.designer.merit import (
    UNTRACEABLE_MM2,
    ARMeritSpec,
    ar_merit,
    build_configurations,
    constraint_penalties,
    foveated_weights,
)
from rxoptics.designer.optimize import _Objective, optimize
from rxoptics.errors import ConfigError, GeometryError, InfeasibleConstraints, NotConverged
from rxoptics.eye import Prescription, build_eye
from rxoptics.surfaces import Bifocal, Plane, Surface, SurfacePose
from rxoptics.tracer import Interaction, OpticalSystem, trace_arrays

SMALL_SPEC = ARMeritSpec(eye_reliefs_mm=(20.0,), field_grid=3)
CENTRE_SPEC = ARMeritSpec(eye_reliefs_mm=(20.0,), field_grid=1)


def rosenbrock(x):
    return np.array([10.0 * (x[1] - x[0] ** 2), 1.0 - x[0]])


# -- Levenberg-Marquardt --------------------------------------------------


def test_lm_solves_rosenbrock_monotonically():
    res = levenberg_marquardt(rosenbrock, [-1.2, 1.0], 1e-6, max_iter=200, ftol=1e-12)
    assert res.converged
    assert np.allclose(res.x, [1.0, 1.0], atol=1e-6)
    merits = [h.merit for h in res.history]
    assert all(b <= a for a, b in zip(merits, merits[1:]))


def test_lm_respects_box():
    res = levenberg_marquardt(rosenbrock, [0.0, 0.0], 1e-6, lower=[-1, -1], upper=[0.5, 0.5], max_iter=100)
    assert np.all(res.x <= 0.5) and np.all(res.x >= -1)


def test_lm_without_variables_and_stall_detection():
    res = levenberg_marquardt(lambda x: np.array([1.0]), [], 1e-3)
    assert res.converged and res.message == "no free parameters"
    slow = levenberg_marquardt(lambda x: np.array([1.0 + 1e-3 / (1 + x[0] ** 2)]), [0.0], 1e-3,
                               stall_window=3, stall_frac=0.5, ftol=0.0)
    assert slow.stalled or slow.converged


def test_jacobian_is_thread_independent():
    f = lambda x: np.array([np.sin(x[0]) * x[1], x[2] ** 3, x[0] * x[1] * x[2]])
    x = np.array([0.3, -1.2, 2.0])
    assert np.array_equal(numeric_jacobian(f, x, 1e-6), numeric_jacobian(f, x, 1e-6, threads=3))
    exact = np.array([[np.cos(0.3) * -1.2, np.sin(0.3), 0], [0, 0, 12.0], [-2.4, 0.6, -0.36]])
    assert np.allclose(numeric_jacobian(f, x, 1e-5), exact, atol=1e-8)


def test_history_csv():
    res = levenberg_marquardt(rosenbrock, [-1.2, 1.0], 1e-6, max_iter=3)
    buf = io.StringIO()
    write_history_csv(res.history, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "iteration,merit,damping,max_constraint_violation"
    assert len(lines) == len(res.history) + 1


# -- merit ----------------------------------------------------------------


def test_foveated_weights():
    w = foveated_weights([0.0, 1.0, 2.3, 5.0, 10.0, 30.0])
    assert w[0] == 1.0
    assert w[2] == pytest.approx(0.5)
    assert all(b <= a for a, b in zip(w, w[1:]))
    with pytest.raises(ValueError):
        foveated_weights([-1.0])


@pytest.mark.parametrize(
    "kw",
    [{"eye_reliefs_mm": ()}, {"eye_reliefs_mm": (11.0,)}, {"field_grid": 0}, {"field_weights": (0.0,) * 25},
     {"penalty_weight": -1.0}],
)
def test_merit_spec_validation(kw):
    with pytest.raises(ConfigError):
        ARMeritSpec(**kw)


def test_merit_spec_fields():
    spec = ARMeritSpec()
    angles = spec.field_angles()
    assert len(angles) == 25 and angles[0] == (0.0, -10.0) and angles[-1] == (20.0, 10.0)
    assert spec.fields(485.0)[0].vergence == pytest.approx(-1000 / 485)
    assert ARMeritSpec(uniform=True).weights == [1.0] * 25


def test_thin_lens_penalty():
    pen = constraint_penalties(replace(PROTOTYPE, bsl_thickness_mm=0.5))
    assert pen[0] == pytest.approx(0.5)


def test_stack_penalty():
    p = replace(PROTOTYPE, display_gap_mm=0.97 + 0.45)
    stack = p.display_gap_mm + p.prism_gap_mm + p.bsl_thickness_mm + p.cylinder_depth_mm + p.waveguide_depth_mm
    assert stack == pytest.approx(9.0)
    assert constraint_penalties(p)[-1] == pytest.approx(0.5)
    assert constraint_penalties(replace(PROTOTYPE, display_gap_mm=0.5))[-1] == 0.0


def test_merit_residuals_and_untraceable_configuration():
    lens = direct_lens_profiles(Prescription(-1.0))
    systems = build_configurations(PROTOTYPE, lens, SMALL_SPEC)
    res = ar_merit(systems, SMALL_SPEC)
    assert res.value == pytest.approx(float(res.residuals @ res.residuals))
    assert np.all(np.isfinite(res.residuals))
    dead = ar_merit([None], SMALL_SPEC, params=PROTOTYPE)
    w = sum(SMALL_SPEC.weights)
    assert float(np.sum(dead.spot_terms)) == pytest.approx(UNTRACEABLE_MM2 * w)
    with pytest.raises(ValueError):
        ar_merit([None], SMALL_SPEC)


# -- constraints ------------------------------------------------------------


def test_prototype_lengths_only_break_the_stack():
    bad = check_lengths(PROTOTYPE)
    assert [v.name for v in bad] == ["stack_mm"]
    assert bad[0].value == pytest.approx(8.55)
    with pytest.raises(InfeasibleConstraints):
        require_feasible(PROTOTYPE)
    assert validate(replace(PROTOTYPE, display_gap_mm=0.9)) == []


def test_bsl_edge_matches_sphere_sags():
    p = PROTOTYPE
    h = p.bsl_semi_aperture_mm

    def sag(r):
        return r - math.copysign(math.sqrt(r * r - h * h), r)

    expected = p.bsl_thickness_mm - sag(p.bsl_display_side_radius_mm) + sag(p.bsl_prism_side_radius_mm)
    assert bsl_edge_thickness_mm(p) == pytest.approx(expected, abs=1e-12)
    assert bsl_edge_thickness_mm(replace(p, bsl_display_side_radius_mm=3.0)) == -math.inf
    assert any(v.name == "bsl_edge_thickness_mm" for v in check_lengths(replace(p, bsl_thickness_mm=1.1)))


# -- AR geometry -------------------------------------------------------------


def test_prototype_signature(prototype_ar):
    res = trace_arrays(prototype_ar.system, *_display_centre_ray(prototype_ar))
    codes = res.interactions(0)
    assert codes.count(Interaction.TIR) == 2
    assert codes.count(Interaction.REFLECTED) == 1
    assert codes.index(Interaction.TIR) < codes.index(Interaction.REFLECTED)
    assert res.alive[0]


def _display_centre_ray(ar):
    from rxoptics.tracer import DisplayField, aim_fields

    return aim_fields(ar.system, [DisplayField()], np.zeros((1, 2)))


def test_eye_relief_range_warning():
    with pytest.warns(EyeReliefWarning):
        build_ar_system(PROTOTYPE, eye_relief_mm=25.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        build_ar_system(PROTOTYPE, eye_relief_mm=12.0)


def test_symmetric_magnification_ties_lens_tilt():
    p = replace(PROTOTYPE, display_tilt_deg=60.0)
    assert p.bsl_tilt_deg == 60.0
    q = PROTOTYPE.with_vector(["display_tilt_deg"], [62.0])
    assert q.bsl_tilt_deg == 62.0
    free = replace(PROTOTYPE, symmetric_magnification=False, bsl_tilt_deg=50.0)
    assert free.bsl_tilt_deg == 50.0
    assert "bsl_tilt_deg" not in param_names(PROTOTYPE)
    assert "bsl_tilt_deg" in param_names(free)


def test_broken_geometry_raises():
    with pytest.raises(GeometryError):
        build_ar_system(replace(PROTOTYPE, waveguide_tilt_deg=10.0))


def test_parameter_vector_round_trip():
    names = list(ALL_PARAMS)
    x = PROTOTYPE.vector(names)
    again = PROTOTYPE.with_vector(names, x)
    assert np.allclose(again.vector(names), x, rtol=1e-14, atol=0)
    assert again.bsl_display_side_radius_mm == pytest.approx(13.94, rel=1e-14)
    assert get_param(PROTOTYPE, "cylinder_curvature") == pytest.approx(1 / -8.86)
    assert get_param(PROTOTYPE, "combiner_tilt_deg") == 60.92
    assert finite_difference_step("combiner_curvature") == 1e-5
    assert finite_difference_step("prism_gap_mm") == 1e-3
    with pytest.raises(ConfigError):
        param_names(free=["nonsense"])


def test_design_params_json_round_trip():
    p = replace(PROTOTYPE, bsl_prism_side_radius_mm=math.inf)
    text = json.dumps(p.to_dict(), allow_nan=False)
    assert DesignParams.from_dict(json.loads(text)) == p
    with pytest.raises(ConfigError):
        DesignParams.from_dict({"bogus": 1})


def test_reverse_path_starts_at_the_pupil(prototype_ar):
    rev = reverse_path(prototype_ar)
    assert rev.surfaces[0].name == "pupil"
    assert rev.stop_index == 0
    assert rev.index_of("lens_rear_tir") < rev.index_of("lens_front_tir")


# -- prescription lens -------------------------------------------------------


@pytest.mark.parametrize("sph", [-1.0, 1.0, -4.0])
def test_direct_lens_back_vertex_power(sph):
    d = direct_lens_profiles(Prescription(sph), 5.0, "COP")
    px, py = d.back_vertex_powers()
    assert px == pytest.approx(sph, abs=0.01) and py == pytest.approx(sph, abs=0.01)
    assert d.front_curvature == 0.0


def test_direct_lens_back_vertex_power_by_tracing():
    # collimated paraxial rays through the lens alone focus at the back focal distance
    d = direct_lens_profiles(Prescription(2.0), 5.0, "COP")
    front, rear = d.surfaces(20.0)
    rear_z = rear.pose.decenter[2]
    bfd = 1000.0 / 2.0
    image = Surface(Plane(), SurfacePose((0.0, 0.0, rear_z + bfd)))
    system = OpticalSystem((front, rear, image))
    h = np.array([0.01, 0.02])
    res = trace_arrays(system, np.column_stack([np.zeros(2), h, np.full(2, front.pose.decenter[2] - 1)]),
                       np.tile([0.0, 0.0, 1.0], (2, 1)))
    assert np.max(np.abs(res.terminal_points[:, 1])) < 1e-4


def test_plano_lens_has_no_power():
    d = design_prescription_lens(Prescription())
    assert max(abs(p) for p in d.back_vertex_powers()) < 0.05


def test_direct_astigmatic_profile():
    d = direct_lens_profiles(Prescription(-2.0, -2.0, 30.0))
    assert d.rear_rotation_deg == 60.0
    assert d.cylinder_power == pytest.approx(-2.0, abs=1e-9)


def test_lens_json_round_trip():
    d = direct_lens_profiles(Prescription(-2.0, -1.0, 45.0, 1.5))
    data = json.loads(json.dumps(d.to_dict(), allow_nan=False))
    assert PrescriptionLensDesign.from_dict(data) == d


def test_lens_edge_check():
    with pytest.raises(GeometryError):
        direct_lens_profiles(Prescription(4.0), 1.0).check()
    with pytest.raises(ConfigError):
        direct_lens_profiles(Prescription(-1.0), 0.5)


@pytest.mark.parametrize("axis", [0.0, 90.0, 30.0])
def test_presbyopic_segment_adds_power(axis):
    add = 2.0
    d = direct_lens_profiles(Prescription(-1.0, 0.0, axis, add))
    assert isinstance(d.rear_profile(), Bifocal)
    front, rear = d.surfaces(20.0)
    system = OpticalSystem((front, rear))
    z0 = front.pose.decenter[2] - 1.0

    def local_power(y):
        dy = 0.01
        o = np.array([[0.0, y - dy, z0], [0.0, y + dy, z0]])
        res = trace_arrays(system, o, np.tile([0.0, 0.0, 1.0], (2, 1)))
        slope = res.terminal_directions[:, 1] / res.terminal_directions[:, 2]
        return -(slope[1] - slope[0]) / (2 * dy) * 1000.0

    assert local_power(-8.0) - local_power(8.0) == pytest.approx(add, abs=0.05)
    assert local_power(2.0) == pytest.approx(-1.0, abs=0.05)


def test_minus_one_lens_corrects_on_axis(lens_minus1):
    eye = build_eye(Prescription(-1.0))
    assert on_axis_rms(lens_minus1, eye, 20.0) < 10e-3


@pytest.mark.xfail(strict=True, reason="naked -1 D eye blurs to about 22 um against a 2.5 um model floor")
def test_minus_one_lens_beats_naked_eye_tenfold(lens_minus1):
    from rxoptics.eye import retinal_rms
    from rxoptics.tracer import Field

    eye = build_eye(Prescription(-1.0))
    naked = retinal_rms(eye.system, Field())
    assert naked >= 10 * on_axis_rms(lens_minus1, eye, 20.0)


def test_astigmatic_lens_rotation_and_seed(lens_astig):
    rx = Prescription(-2.0, -2.0, 30.0)
    assert lens_astig.rear_rotation_deg == pytest.approx(60.0, abs=5.0)
    eye = build_eye(rx)
    assert lens_merit(lens_astig, eye) <= lens_merit(direct_lens_profiles(rx), eye)


@pytest.mark.xfail(strict=True, reason="optimised cylinder settles near 2.25 D on the model eye")
def test_astigmatic_lens_cylinder(lens_astig):
    assert abs(lens_astig.cylinder_power) == pytest.approx(2.0, abs=0.2)


# -- AR optimisation -------------------------------------------------------


def test_jacobian_forward_agreement():
    names = param_names(PROTOTYPE, None, COMBINER_SECONDARY)
    pick = [str(n) for n in np.random.default_rng(0).choice(names, 5, replace=False)]
    lens = direct_lens_profiles(Prescription(-1.0))
    obj = _Objective(PROTOTYPE, pick, lens, SMALL_SPEC, 1)
    x = PROTOTYPE.vector(pick)
    steps = np.array([finite_difference_step(n) for n in pick])
    central = numeric_jacobian(obj, x, steps)
    forward = numeric_jacobian(obj, x, steps * 1e-3, method="forward")
    for i in range(len(pick)):
        rel = np.linalg.norm(central[:, i] - forward[:, i]) / np.linalg.norm(central[:, i])
        assert rel <= 1e-4, pick[i]


def test_converged_run_is_feasible():
    seed = replace(PROTOTYPE, display_gap_mm=0.9)
    res = optimize(seed, spec=CENTRE_SPEC, free=("display_gap_mm", "prism_gap_mm", "bsl_thickness_mm",
                                                   "cylinder_depth_mm", "waveguide_depth_mm"), max_iter=30)
    assert validate(res.params, direct_lens_profiles(Prescription(-1.0)), CENTRE_SPEC) == []
    assert res.merit <= res.seed_merit
    merits = [h.merit for h in res.history]
    assert all(b <= a for a, b in zip(merits, merits[1:]))


def _run(seed, **kw):
    try:
        return optimize(seed, **kw)
    except (InfeasibleConstraints, NotConverged) as exc:
        return exc.result


def test_freeform_only_run_is_monotone():
    frozen = [n for n in ALL_PARAMS if not n.startswith("combiner_") or n in ("combiner_tilt_deg",)]
    res = _run(PROTOTYPE, frozen=frozen, spec=SMALL_SPEC, max_iter=3, staged=False)
    merits = [h.merit for h in res.history]
    assert all(b <= a for a, b in zip(merits, merits[1:]))
    assert merits[-1] <= res.seed_merit


def test_gap_floor_is_restored():
    seed = replace(PROTOTYPE, prism_gap_mm=0.1)
    res = _run(seed, free=["prism_gap_mm"], spec=SMALL_SPEC, max_iter=5)
    assert res.params.prism_gap_mm >= 0.2


@pytest.mark.slow
def test_cylinder_radius_recovery():
    baseline = _Objective(PROTOTYPE, [], None, ARMeritSpec(), 1)
    lens = direct_lens_profiles(Prescription(-1.0))
    baseline.lens = lens
    base = baseline.evaluate(np.zeros(0)).value
    seed = replace(PROTOTYPE, cylinder_radius_mm=PROTOTYPE.cylinder_radius_mm * 1.1)
    res = _run(seed, free=["cylinder_curvature"], max_iter=20)
    assert res.merit <= 1.05 * base
