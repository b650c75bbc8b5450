"""Baseline dispatch modes and verification oracles.

- fixed_flow_dispatch: one fixed-flow solve at a given schedule.
- separate_dispatch: heat follows load per period, then electricity at fixed heat.
- compare_modes: all three modes concurrently with cost ordering checks.
- verify_solution: independent re-check of every constraint family.
- finite_difference_gradient: central differences of J*(m) for gradient checks.
"""

import asyncio
import logging
import time
from collections.abc import Sequence
from pathlib import Path

import cvxpy as cp
import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field

from chp_dispatch.exceptions import ChpDispatchError, DegenerateFlowError
from chp_dispatch.master import (
    DispatchResult,
    IterationRecord,
    SolverConfig,
    dispatch,
    initial_flows,
    relaxation_diagnosis,
)
from chp_dispatch.models import series
from chp_dispatch.network import SIDES, NetworkModel
from chp_dispatch.subproblem import (
    POWER_SCALE,
    FlowSchedule,
    SystemState,
    build_relaxed_subproblem,
    build_subproblem,
    check_flows,
    solve_subproblem,
    write_lp,
)
from chp_dispatch.thermal import (
    initial_profiles,
    model_coefficients,
    simulate_network,
    step_segment,
)

logger = logging.getLogger(__name__)

MODES = ("variable", "fixed", "separate")
ORDERING_TOLERANCE = 1e-6
SECONDS_PER_HOUR = 3600.0


# ─── Cost Accounting ───


def operating_cost(model: NetworkModel, p: NDArray[np.float64], h: NDArray[np.float64]) -> float:
    """Total source cost plus curtailment penalties for outputs in W."""
    n = model.periods
    c = {a: model.source_series(a) for a in ("constant", "p", "p2", "h", "h2", "ph")}
    total = np.sum(
        c["constant"] + c["p"] * p + c["p2"] * p**2 + c["h"] * h + c["h2"] * h**2 + c["ph"] * p * h
    )
    for s, source in enumerate(model.sources):
        if source.availability is not None:
            shortfall = series(source.availability, n) - p[s]
            total += np.sum(series(source.curtailment_penalty, n) * shortfall)
    return float(total)


def curtailment(model: NetworkModel, p: NDArray[np.float64]) -> tuple[float, float]:
    """Curtailed renewable energy [Wh] and its share of the available energy [%]."""
    n = model.periods
    curtailed = available = 0.0
    for s, source in enumerate(model.sources):
        if not source.renewable or source.availability is None:
            continue
        offer = series(source.availability, n)
        curtailed += float(np.sum(np.maximum(offer - p[s], 0.0)))
        available += float(np.sum(offer))
    hours = model.dt / SECONDS_PER_HOUR
    share = 100.0 * curtailed / available if available > 0 else 0.0
    return curtailed * hours, min(max(share, 0.0), 100.0)


def storage_proxy(model: NetworkModel, state: SystemState) -> NDArray[np.float64]:
    """Heat generated minus heat delivered to loads per period [W]."""
    generated = state.heat[model.node_is_source].sum(axis=0)
    return generated - model.demand[~model.node_is_source].sum(axis=0)


# ─── Baselines ───


def fixed_flow_dispatch(
    model: NetworkModel,
    flows: FlowSchedule | None = None,
    config: SolverConfig | None = None,
    dump_dir: Path | None = None,
) -> DispatchResult:
    """Dispatch at one fixed flow schedule without master iterations.

    Args:
        model: Prepared network.
        flows: Schedule to hold fixed; the initial-flow policy when omitted.
        config: Solver settings.
        dump_dir: When set, the program is written there as ``iter_0001.lp``.

    Returns:
        DispatchResult of the single solve, with the relaxed-slack diagnosis
        when the schedule admits no feasible dispatch.
    """
    config = config or SolverConfig()
    started = time.perf_counter()
    if flows is None:
        flows = initial_flows(model, config)
    flows = check_flows(model, flows)
    literal = config.literal_coefficients
    program = build_subproblem(model, flows, literal)
    if dump_dir is not None:
        write_lp(program, dump_dir / "iter_0001.lp")
    result = solve_subproblem(program, config.solver, config.solver_tolerance)
    record = IterationRecord(
        k=1,
        status=result.status,
        objective=result.objective,
        grad_norm=float(np.linalg.norm(result.gradient)) if result.optimal else None,
        wallclock_ms=result.solve_ms,
        action="fixed",
    )
    elapsed = time.perf_counter() - started
    if not result.optimal:
        program = build_relaxed_subproblem(model, flows, literal)
        relaxed = solve_subproblem(program, config.solver, config.solver_tolerance)
        logger.warning("Fixed-flow dispatch infeasible (σ=%.6g)", relaxed.objective or 0.0)
        return DispatchResult(
            mode="fixed",
            status="infeasible",
            iterations=[record],
            termination="single_solve",
            diagnosis=relaxation_diagnosis(relaxed, program.ineq_family, program.ineq_unit),
            wallclock_s=elapsed,
        )
    return DispatchResult(
        mode="fixed",
        status="feasible",
        objective=result.objective,
        flows=flows,
        state=result.state,
        iterations=[record],
        termination="single_solve",
        wallclock_s=elapsed,
    )


def _source_constraints(
    model: NetworkModel,
    p: cp.Variable,
    h: cp.Variable,
    electric_ramps: bool,
    heat_ramps: bool,
) -> list[cp.Constraint]:
    """Attachment, polytope, availability and ramp limits of every source (MW)."""
    n, dt = model.periods, model.dt
    constraints: list[cp.Constraint] = []
    for s, source in enumerate(model.sources):
        if model.source_bus[s] < 0:
            constraints.append(p[s] == 0)
        if model.source_node[s] < 0:
            constraints.append(h[s] == 0)
        for row in source.polytope:
            constraints.append(row.p * p[s] + row.h * h[s] <= series(row.rhs, n) / POWER_SCALE)
        if source.availability is not None:
            constraints.append(p[s] <= series(source.availability, n) / POWER_SCALE)
        if n < 2:
            continue
        ramps = []
        if electric_ramps:
            ramps.append((p[s], source.ramp_p_down, source.ramp_p_up))
        if heat_ramps:
            ramps.append((h[s], source.ramp_h_down, source.ramp_h_up))
        for variable, down, up in ramps:
            if up is not None:
                constraints.append(cp.diff(variable) <= up * dt / POWER_SCALE)
            if down is not None:
                constraints.append(cp.diff(variable) >= down * dt / POWER_SCALE)
    return constraints


def separate_dispatch(model: NetworkModel, config: SolverConfig | None = None) -> DispatchResult:
    """Two-stage baseline without heating network storage.

    Stage 1 meets the total heat load in every period at minimum heat cost;
    stage 2 dispatches electricity at the stage-1 heat outputs.

    Returns:
        DispatchResult whose state carries no temperatures (NaN) and whose
        ``termination`` names the failing stage when infeasible.
    """
    config = config or SolverConfig()
    started = time.perf_counter()
    n, n_sources = model.periods, model.n_sources
    c = {a: model.source_series(a) for a in ("p", "p2", "h", "h2", "ph")}
    heat_load = model.demand[~model.node_is_source].sum(axis=0) / POWER_SCALE
    heated = [s for s in range(n_sources) if model.source_node[s] >= 0]
    shape = (n_sources, n)

    p = cp.Variable(shape)
    h = cp.Variable(shape)
    heat_cost = cp.sum(
        cp.multiply(c["h"] * POWER_SCALE, h) + cp.multiply(c["h2"] * POWER_SCALE**2, cp.square(h))
    )
    stage_one = _source_constraints(model, p, h, electric_ramps=False, heat_ramps=True)
    if heated:
        stage_one.append(cp.sum(h[heated], axis=0) == heat_load)
    elif heat_load.any():
        return _infeasible_stage("heat_stage", started)
    problem = cp.Problem(cp.Minimize(heat_cost), stage_one)
    problem.solve(solver=config.solver)
    if problem.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        logger.warning("Separate dispatch: heat stage %s", problem.status)
        return _infeasible_stage("heat_stage", started)
    heat = np.asarray(h.value)

    p = cp.Variable(shape)
    h_fixed = cp.Variable(shape)
    stage_two = _source_constraints(model, p, h_fixed, electric_ramps=True, heat_ramps=False)
    stage_two.append(h_fixed == heat)
    attached = [s for s in range(n_sources) if model.source_bus[s] >= 0]
    demand = model.bus_demand / POWER_SCALE
    if attached:
        stage_two.append(cp.sum(p[attached], axis=0) == demand.sum(axis=0))
    if model.line_ids:
        placement = np.zeros((len(model.bus_ids), n_sources))
        for s in attached:
            placement[model.source_bus[s], s] = 1.0
        flows = model.shift_factors @ (placement @ p - demand)
        limit = model.line_limit / POWER_SCALE
        stage_two += [flows <= limit, flows >= -limit]

    linear = c["p"] * POWER_SCALE + c["ph"] * POWER_SCALE**2 * heat
    for s, source in enumerate(model.sources):
        if source.availability is not None:
            linear[s] -= series(source.curtailment_penalty, n) * POWER_SCALE
    electric_cost = cp.sum(
        cp.multiply(linear, p) + cp.multiply(c["p2"] * POWER_SCALE**2, cp.square(p))
    )
    problem = cp.Problem(cp.Minimize(electric_cost), stage_two)
    problem.solve(solver=config.solver)
    if problem.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        logger.warning("Separate dispatch: electric stage %s", problem.status)
        return _infeasible_stage("electric_stage", started)

    power = np.asarray(p.value) * POWER_SCALE
    heat = heat * POWER_SCALE
    state = _network_free_state(model, power, heat)
    objective = operating_cost(model, power, heat)
    logger.info("Separate dispatch: J*=%.6f", objective)
    return DispatchResult(
        mode="separate",
        status="feasible",
        objective=objective,
        state=state,
        termination="two_stage",
        wallclock_s=time.perf_counter() - started,
    )


def _infeasible_stage(stage: str, started: float) -> DispatchResult:
    return DispatchResult(
        mode="separate",
        status="infeasible",
        termination=stage,
        diagnosis={stage: 1.0},
        wallclock_s=time.perf_counter() - started,
    )


def _network_free_state(
    model: NetworkModel, p: NDArray[np.float64], h: NDArray[np.float64]
) -> SystemState:
    n = model.periods
    heat = model.demand.copy()
    for k in np.flatnonzero(model.node_is_source):
        heat[k] = h[model.source_node == k].sum(axis=0)
    placement = np.zeros((len(model.bus_ids), model.n_sources))
    for s in np.flatnonzero(model.source_bus >= 0):
        placement[model.source_bus[s], s] = 1.0
    line_flow = model.shift_factors @ (placement @ p - model.bus_demand)
    blank_nodes = np.full((model.n_nodes, n), np.nan)
    blank_pipes = np.full((model.n_pipes, n), np.nan)
    return SystemState(
        p=p,
        h=h,
        heat=heat,
        line_flow=line_flow,
        exchanger_supply=blank_nodes,
        exchanger_return=blank_nodes,
        node_supply=blank_nodes,
        node_return=blank_nodes,
        pipe_inlet=blank_pipes,
        pipe_outlet=blank_pipes,
        segments=[],
    )


# ─── Comparison ───


class ModeSummary(BaseModel):
    """Cost, curtailment and effort of one dispatch mode."""

    mode: str
    status: str
    total_cost: float | None = None
    curtailment_wh: float | None = None
    curtailment_pct: float | None = Field(default=None, ge=0, le=100)
    wallclock_s: float = 0.0
    iterations: int = 0


class ComparisonReport(BaseModel):
    """All modes on one instance with relative cost gaps [%] between adjacent modes."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    modes: list[ModeSummary]
    deltas: dict[str, float] = {}
    ordering_ok: bool | None = None
    notes: list[str] = []
    results: dict[str, DispatchResult] = Field(default={}, exclude=True)

    def summary(self, mode: str) -> ModeSummary:
        return next(m for m in self.modes if m.mode == mode)


def summarize(model: NetworkModel, result: DispatchResult) -> ModeSummary:
    if not result.feasible or result.state is None:
        return ModeSummary(
            mode=result.mode,
            status=result.status,
            wallclock_s=result.wallclock_s,
            iterations=len(result.iterations),
        )
    curtailed_wh, curtailed_pct = curtailment(model, result.state.p)
    return ModeSummary(
        mode=result.mode,
        status=result.status,
        total_cost=result.objective,
        curtailment_wh=curtailed_wh,
        curtailment_pct=curtailed_pct,
        wallclock_s=result.wallclock_s,
        iterations=len(result.iterations),
    )


async def compare_modes(
    model: NetworkModel,
    config: SolverConfig | None = None,
    max_concurrency: int = 3,
) -> ComparisonReport:
    """Run variable, fixed and separate dispatch concurrently and compare costs.

    The fixed baseline holds the variable mode's starting schedule, so the
    variable result can only improve on it.

    Args:
        model: Prepared network shared read-only by all modes.
        config: Solver settings.
        max_concurrency: Maximum number of modes solving at once.

    Returns:
        ComparisonReport; infeasible modes are skipped in the ordering check
        and noted.
    """
    config = config or SolverConfig()
    semaphore = asyncio.Semaphore(max_concurrency)
    start = initial_flows(model, config)

    async def run_mode(mode: str) -> DispatchResult:
        async with semaphore:
            logger.info("Starting %s dispatch", mode)
            match mode:
                case "variable":
                    return await asyncio.to_thread(dispatch, model, config, start)
                case "fixed":
                    return await asyncio.to_thread(fixed_flow_dispatch, model, start, config)
                case _:
                    return await asyncio.to_thread(separate_dispatch, model, config)

    results = await asyncio.gather(*(run_mode(mode) for mode in MODES))
    by_mode = dict(zip(MODES, results, strict=True))
    report = ComparisonReport(
        modes=[summarize(model, r) for r in results],
        results=by_mode,
    )

    ordered = True
    for cheaper, dearer in (("variable", "fixed"), ("fixed", "separate")):
        low, high = by_mode[cheaper], by_mode[dearer]
        if not (low.feasible and high.feasible):
            report.notes.append(f"{cheaper} vs {dearer}: skipped, a mode is infeasible")
            continue
        gap = (high.objective - low.objective) / (abs(high.objective) or 1.0)
        report.deltas[f"{dearer}-{cheaper}"] = 100.0 * gap
        if gap < -ORDERING_TOLERANCE:
            ordered = False
            report.notes.append(f"{cheaper} costs more than {dearer} by {-100.0 * gap:.4g}%")
            logger.warning("Cost ordering violated: %s > %s", cheaper, dearer)
    report.ordering_ok = ordered if report.deltas else None

    for summary in report.modes:
        logger.info(
            "%-8s %-10s cost=%s curtailment=%s",
            summary.mode,
            summary.status,
            f"{summary.total_cost:.2f}" if summary.total_cost is not None else "-",
            f"{summary.curtailment_pct:.2f}%" if summary.curtailment_pct is not None else "-",
        )
    return report


# ─── Verification ───


class VerificationReport(BaseModel):
    """Maximum violation per constraint family in natural units (W, °C, W·period).

    Power families pass when their violation relative to the peak electric
    or heat demand is within tolerance; temperature families pass in °C.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    violations: dict[str, float]
    simulator_deviation: float | None = None
    storage_proxy: list[float] = []
    tolerance: float = 1e-6
    power_scale: float = 1.0
    passed: bool = True
    failing: list[str] = []

    @property
    def max_violation(self) -> float:
        return max(self.violations.values(), default=0.0)


POWER_FAMILIES = {
    "node_heat",
    "power_balance",
    "line_flow",
    "line_limit",
    "polytope",
    "ramp_electric",
    "ramp_heat",
    "energy_adequacy",
    "heat_demand",
    "heat_balance",
}


def verify_solution(
    model: NetworkModel,
    result: DispatchResult,
    tolerance: float = 1e-6,
    literal: bool = False,
) -> VerificationReport:
    """Re-evaluate every constraint family on a returned dispatch.

    Heating network rows are recomputed from the flows and temperatures by
    direct arithmetic and the temperatures are cross-checked against a forward
    simulation with the same flows and source temperatures. The separate
    baseline, which has no network, is checked for per-period heat balance.

    Raises:
        ChpDispatchError: If ``result`` is not feasible.
    """
    if not result.feasible or result.state is None:
        raise ChpDispatchError("only feasible results can be verified")
    state = result.state
    violations: dict[str, float] = {}
    simulator_deviation = None

    def note(family: str, values: NDArray[np.float64] | float) -> None:
        worst = float(np.max(np.abs(values), initial=0.0))
        violations[family] = max(violations.get(family, 0.0), worst)

    _check_electric(model, state, note)
    _check_sources(model, state, note)

    if result.flows is None:
        heated = model.source_node >= 0
        supplied = state.h[heated].sum(axis=0)
        note("heat_balance", supplied - model.demand[~model.node_is_source].sum(axis=0))
    else:
        m = result.flows
        _check_network(model, state, m, literal, note)
        try:
            simulated = simulate_network(model, m, state.exchanger_supply, literal=literal)
        except DegenerateFlowError as e:
            logger.warning("Simulator cross-check failed: %s", e)
            simulator_deviation = float("inf")
        else:
            simulator_deviation = float(
                max(
                    np.abs(simulated.node_supply - state.node_supply).max(),
                    np.abs(simulated.node_return - state.node_return).max(),
                    max(
                        np.abs(field[:, 1:] - segments).max()
                        for field, segments in zip(simulated.fields, state.segments, strict=True)
                    ),
                )
            )

    peak = max(
        float(model.bus_demand.sum(axis=0).max(initial=0.0)),
        float(model.demand.sum(axis=0).max(initial=0.0)),
        1.0,
    )
    failing = []
    for family, value in violations.items():
        limit = tolerance * peak if family in POWER_FAMILIES else tolerance
        if value > limit:
            failing.append(family)
    if simulator_deviation is not None and simulator_deviation > tolerance:
        failing.append("simulator")

    report = VerificationReport(
        violations=violations,
        simulator_deviation=simulator_deviation,
        storage_proxy=storage_proxy(model, state).tolist(),
        tolerance=tolerance,
        power_scale=peak,
        passed=not failing,
        failing=failing,
    )
    if failing:
        logger.warning("Verification failed for %s", ", ".join(failing))
    return report


def _check_electric(model: NetworkModel, state: SystemState, note) -> None:
    attached = model.source_bus >= 0
    note("power_balance", state.p[attached].sum(axis=0) - model.bus_demand.sum(axis=0))
    placement = np.zeros((len(model.bus_ids), model.n_sources))
    for s in np.flatnonzero(attached):
        placement[model.source_bus[s], s] = 1.0
    if model.line_ids:
        expected = model.shift_factors @ (placement @ state.p - model.bus_demand)
        note("line_flow", state.line_flow - expected)
        note("line_limit", np.maximum(np.abs(state.line_flow) - model.line_limit, 0.0))


def _check_sources(model: NetworkModel, state: SystemState, note) -> None:
    n, dt = model.periods, model.dt
    for s, source in enumerate(model.sources):
        p, h = state.p[s], state.h[s]
        for row in source.polytope:
            note("polytope", np.maximum(row.p * p + row.h * h - series(row.rhs, n), 0.0))
        if source.availability is not None:
            note("polytope", np.maximum(p - series(source.availability, n), 0.0))
        if model.source_bus[s] < 0:
            note("attachment", p)
        if model.source_node[s] < 0:
            note("attachment", h)
        for family, values, down, up in (
            ("ramp_electric", p, source.ramp_p_down, source.ramp_p_up),
            ("ramp_heat", h, source.ramp_h_down, source.ramp_h_up),
        ):
            change = np.diff(values)
            if up is not None:
                note(family, np.maximum(change - up * dt, 0.0))
            if down is not None:
                note(family, np.maximum(down * dt - change, 0.0))


def _check_network(
    model: NetworkModel, state: SystemState, m: FlowSchedule, literal: bool, note
) -> None:
    n = model.periods
    loads = ~model.node_is_source
    q = model.exchanger_flow(m)
    node_temp = {"supply": state.node_supply, "return": state.node_return}
    exchanger = {"supply": state.exchanger_supply, "return": state.exchanger_return}

    note("heat_demand", state.heat[loads] - model.demand[loads])
    for k in np.flatnonzero(model.node_is_source):
        note("attachment", state.heat[k] - state.h[model.source_node == k].sum(axis=0))
    note(
        "node_heat",
        state.heat - model.cp * q * (state.exchanger_supply - state.exchanger_return),
    )
    adequacy = state.heat[model.node_is_source].sum() - state.heat[loads].sum()
    note("energy_adequacy", max(-adequacy, 0.0))

    node_index = {node_id: k for k, node_id in enumerate(model.node_ids)}
    profiles = initial_profiles(model, literal)
    for side in SIDES:
        for k, node in enumerate(model.nodes):
            ins = model.in_pipes[side][k]
            outs = model.out_pipes[side][k]
            injecting = model.injects(k, side)
            total = m[outs].sum(axis=0) if injecting else m[ins].sum(axis=0)
            mixed = sum(m[j] * state.pipe_outlet[j] for j in ins) + np.zeros(n)
            if injecting:
                mixed = mixed + (m[outs].sum(axis=0) - m[ins].sum(axis=0)) * exchanger[side][k]
            else:
                note("exchanger_identity", exchanger[side][k] - node_temp[side][k])
            with np.errstate(divide="ignore", invalid="ignore"):
                residual = np.where(total > 0, node_temp[side][k] - mixed / total, 0.0)
            note(f"mixing_{side}", residual)

            box = node.supply_range if side == "supply" else node.return_range
            if box is not None:
                for temps in (node_temp[side][k], exchanger[side][k]):
                    note("temperature_bounds", np.maximum(temps - box[1], 0.0))
                    note("temperature_bounds", np.maximum(box[0] - temps, 0.0))

    for j, pipe in enumerate(model.pipes):
        side = model.pipe_side[j]
        field = state.segments[j]
        note("segment_boundary", field[0] - state.pipe_inlet[j])
        note("segment_boundary", field[-1] - state.pipe_outlet[j])
        upstream = node_temp[side][node_index[pipe.from_node]]
        note(f"pipe_inlet_{side}", state.pipe_inlet[j] - upstream)
        previous = profiles[j]
        for t in range(n):
            coeffs = model_coefficients(model, j, t)
            for i in range(1, field.shape[0]):
                expected = step_segment(coeffs, m[j, t], previous[i], field[i - 1, t], literal)
                note(f"pipe_{side}", field[i, t] - expected)
            previous = field[:, t]


# ─── Gradient Oracle ───


async def finite_difference_gradient(
    model: NetworkModel,
    flows: FlowSchedule,
    entries: Sequence[tuple[int, int]] | None = None,
    step: float = 1e-4,
    config: SolverConfig | None = None,
    max_concurrency: int = 3,
) -> NDArray[np.float64]:
    """Central differences of J*(m) with relative step ``step``.

    Perturbed solves run concurrently in worker threads.

    Args:
        model: Prepared network.
        flows: Base schedule (pipes × periods), strictly inside the bounds.
        entries: (pipe, period) pairs to differentiate; all when omitted.
        step: Relative perturbation of each entry.
        config: Solver settings.
        max_concurrency: Maximum concurrent perturbed solves.

    Returns:
        Array shaped like ``flows``; entries not requested are NaN.

    Raises:
        ChpDispatchError: If a perturbed program is infeasible.
    """
    config = config or SolverConfig()
    base = check_flows(model, flows)
    entries = entries or [(j, t) for j in range(base.shape[0]) for t in range(base.shape[1])]
    semaphore = asyncio.Semaphore(max_concurrency)

    def objective(m: FlowSchedule) -> float:
        program = build_subproblem(model, m, config.literal_coefficients)
        result = solve_subproblem(program, config.solver, config.solver_tolerance)
        if not result.optimal:
            raise ChpDispatchError("perturbed flow schedule is infeasible")
        return float(result.objective)

    async def central_difference(j: int, t: int) -> float:
        delta = step * max(abs(base[j, t]), 1e-6)
        values = []
        for sign in (1.0, -1.0):
            shifted = base.copy()
            shifted[j, t] += sign * delta
            async with semaphore:
                values.append(await asyncio.to_thread(objective, shifted))
        return (values[0] - values[1]) / (2.0 * delta)

    derivatives = await asyncio.gather(*(central_difference(j, t) for j, t in entries))
    gradient = np.full(base.shape, np.nan)
    for (j, t), value in zip(entries, derivatives, strict=True):
        gradient[j, t] = value
    logger.info("Finite-difference gradient over %d entries", len(entries))
    return gradient

