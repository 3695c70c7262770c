"""Second design step: AR geometry against the multi-configuration merit."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import InfeasibleConstraints, NotConverged
from ..eye import Prescription
from .ar import COMBINER_SECONDARY, finite_difference_step, param_names
from .constraints import GAP_FLOOR_MM, STACK_CEILING_MM, THICKNESS_FLOOR_MM, bsl_edge_thickness_mm, validate
from .lens import direct_lens_profiles
from .lm import IterationRecord, levenberg_marquardt
from .merit import (
    GAP_PARAMS,
    THICKNESS_PARAMS,
    ARMeritSpec,
    ar_merit,
    build_configurations,
    constraint_penalties,
)

_LENGTH_FLOORS = {**{n: THICKNESS_FLOOR_MM for n in THICKNESS_PARAMS}, **{n: GAP_FLOOR_MM for n in GAP_PARAMS}}


@dataclass
class OptimizationResult:
    params: object
    merit: float
    seed_merit: float
    history: list = field(default_factory=list)
    free: list = field(default_factory=list)
    message: str = ""
    stages: int = 1


class _Objective:
    """Residual function over a named parameter subset, caching the last point."""

    def __init__(self, seed, names, lens, spec, threads):
        self.seed, self.names, self.lens, self.spec, self.threads = seed, names, lens, spec, threads
        self._cache = {}

    def params(self, x):
        return self.seed.with_vector(self.names, x)

    def evaluate(self, x):
        key = np.asarray(x, float).tobytes()
        hit = self._cache.get(key)
        if hit is None:
            p = self.params(x)
            systems = build_configurations(p, self.lens, self.spec)
            hit = ar_merit(systems, self.spec, params=p)
            if len(self._cache) > 64:
                self._cache.clear()
            self._cache[key] = hit
        return hit

    def __call__(self, x):
        return self.evaluate(x).residuals

    def violation(self, x):
        """Largest length violation (mm) or TIR shortfall at ``x``."""
        lengths = constraint_penalties(self.params(x))
        n_len = len(lengths)
        pen = self.evaluate(x).penalty_terms[n_len:]
        tir = math.sqrt(float(np.max(pen)) / max(self.spec.penalty_weight, 1e-300)) if len(pen) else 0.0
        return float(max(np.max(lengths), tir))


def _bounds(names):
    lo = np.array([_LENGTH_FLOORS.get(n, -np.inf) for n in names])
    hi = np.full(len(names), np.inf)
    return lo, hi


def _repair_lengths(params, names):
    """Move free lengths onto their limits: lens edge floor first, then the stack ceiling."""
    floors = dict(_LENGTH_FLOORS)
    if "bsl_thickness_mm" in names:
        # thickness at which the lens edge sits exactly on its floor
        edge_floor = params.bsl_thickness_mm - bsl_edge_thickness_mm(params) + THICKNESS_FLOOR_MM
        if math.isfinite(edge_floor):
            floors["bsl_thickness_mm"] = max(floors["bsl_thickness_mm"], edge_floor + 1e-9)
            if params.bsl_thickness_mm < floors["bsl_thickness_mm"]:
                params = params.with_vector(["bsl_thickness_mm"], [floors["bsl_thickness_mm"]])
    lengths = list(THICKNESS_PARAMS + GAP_PARAMS)
    stack = sum(getattr(params, n) for n in lengths)
    excess = stack - STACK_CEILING_MM
    free = [n for n in lengths if n in names]
    if excess <= 0 or not free:
        return params
    slack = {n: max(getattr(params, n) - floors[n], 0.0) for n in free}
    total = sum(slack.values())
    if total <= excess:
        return params
    # leave a hair of margin so round-off cannot push the sum back over
    scale = 1.0 - (excess + 1e-9) / total
    values = [getattr(params, n) - slack[n] * (1.0 - scale) for n in free]
    return params.with_vector(free, values)


def optimize(
    seed,
    frozen=(),
    spec=None,
    lens=None,
    rx=None,
    free=None,
    max_iter=500,
    ftol=1e-6,
    patience=5,
    stall_window=10,
    threads=1,
    staged=True,
    history=None,
    callback=None,
):
    """Damped least squares on the AR merit.

    Variables default to every parameter except the secondary freeform slots
    (and ``bsl_tilt_deg`` when it follows the display tilt); the secondary
    slots are released if the first stage stalls.  Lengths are kept inside
    their floors by the optimizer's box, the stack and TIR conditions by
    exterior penalties; the result is repaired onto the edge and stack limits if
    needed and then checked by the independent validator.

    Args:
        seed: starting :class:`~rxoptics.designer.ar.DesignParams`.
        frozen: parameter names held fixed.
        lens: prescription lens; defaults to the closed-form lens for ``rx``
            (itself defaulting to -1 D).

    Returns:
        OptimizationResult (``params`` is the optimized parameter vector).

    Raises:
        NotConverged: iteration limit reached before the tolerance.
        InfeasibleConstraints: no constraint-satisfying point was found.
    """
    spec = spec or ARMeritSpec()
    if lens is None:
        lens = direct_lens_profiles(rx or Prescription(-1.0), seed.lens_thickness_mm, seed.lens_material)
    if free is None:
        names = param_names(seed, None, tuple(frozen) + (COMBINER_SECONDARY if staged else ()))
    else:
        names = param_names(seed, free, frozen)
    records = [] if history is None else history
    seed_merit = _Objective(seed, [], lens, spec, threads).evaluate(np.zeros(0)).value
    params = seed
    message = "no free parameters"
    stages = 0
    converged = not names
    plan = [names]
    if free is None and staged:
        extra = [n for n in param_names(seed, COMBINER_SECONDARY, frozen)]
        if extra:
            plan.append(names + extra)
    for stage, stage_names in enumerate(plan):
        if not stage_names:
            continue
        stages = stage + 1
        obj = _Objective(params, stage_names, lens, spec, threads)
        x0 = params.vector(stage_names)
        lo, hi = _bounds(stage_names)
        offset = len(records)

        def log(rec, offset=offset):
            rec = IterationRecord(rec.iteration + offset, rec.merit, rec.damping, rec.max_violation)
            records.append(rec)
            if callback:
                callback(rec)

        last_stage = stage == len(plan) - 1
        res = levenberg_marquardt(
            obj,
            x0,
            [finite_difference_step(n) for n in stage_names],
            max_iter=max_iter - (offset - stage),
            ftol=ftol,
            patience=patience,
            stall_window=None if last_stage else stall_window,
            lower=lo,
            upper=hi,
            violation=obj.violation,
            callback=log,
            threads=threads,
        )
        params = obj.params(res.x)
        message = res.message
        converged = res.converged
        if res.converged or last_stage:
            break
        if len(records) - stage >= max_iter:
            break
    params = _repair_lengths(params, names + list(COMBINER_SECONDARY))
    final = _Objective(params, [], lens, spec, threads).evaluate(np.zeros(0)).value
    result = OptimizationResult(params, final, seed_merit, records, list(names), message, max(stages, 1))
    bad = validate(params, lens, spec)
    if bad:
        raise InfeasibleConstraints(
            "no penalty-free design found: " + "; ".join(v.message for v in bad[:5]), result, bad
        )
    if not converged:
        raise NotConverged(f"AR optimization stopped: {message}", result)
    return result
