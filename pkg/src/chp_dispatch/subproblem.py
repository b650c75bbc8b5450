"""Convex dispatch program at fixed mass flow.

With the pipe flows m frozen, every bilinear flow-temperature term of the
heating network becomes linear and the dispatch reduces to a convex QP over

    x = [p, h, heat, l, T̃S, T̃R, TS, TR, τSI, τSO, τRI, τRO, τS, τR]

This module assembles that QP in sparse matrix form, solves it with cvxpy,
and turns the multipliers of the flow-dependent rows into the envelope
gradient ∂J*/∂m and into feasibility cuts.

Units inside the program: power in MW, temperatures in °C, cost in $.
Results are converted back to W.
"""

import functools
import logging
import time
from collections.abc import Iterable
from pathlib import Path
from typing import Any, Literal

import cvxpy as cp
import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict
from scipy import sparse

from chp_dispatch.exceptions import (
    CutGenerationError,
    DimensionError,
    FlowBoundsError,
    SolverError,
    UnboundedProgramError,
)
from chp_dispatch.models import series
from chp_dispatch.network import SIDES, NetworkModel, Side
from chp_dispatch.thermal import initial_profiles, model_coefficients

logger = logging.getLogger(__name__)

FlowSchedule = NDArray[np.float64]

POWER_SCALE = 1e6
BOUND_TOLERANCE = 1e-9
SLACK_TOLERANCE = 1e-6

H1_FAMILIES = ("mixing_supply", "mixing_return", "node_heat", "pipe_supply", "pipe_return")


# ─── Variable Layout ───


class VariableLayout:
    """Flat index of every variable block of x.

    Blocks are (rows × periods) arrays stored row-major. Pipe inlet and
    outlet blocks are split by side; ``segment_<j>`` holds τ_j(i, t) for
    i = 0…S_j.
    """

    def __init__(self, model: NetworkModel) -> None:
        n = model.periods
        self._blocks: dict[str, tuple[int, tuple[int, int]]] = {}
        self.size = 0
        self._side = model.pipe_side
        supply = model.pipes_on("supply")
        self._local = {j: i for i, j in enumerate(supply)}
        self._local.update({j: i for i, j in enumerate(model.pipes_on("return"))})

        self._add("p", model.n_sources, n)
        self._add("h", model.n_sources, n)
        self._add("heat", model.n_nodes, n)
        self._add("l", len(model.line_ids), n)
        for name in ("exchanger_supply", "exchanger_return", "node_supply", "node_return"):
            self._add(name, model.n_nodes, n)
        for side in SIDES:
            count = len(model.pipes_on(side))
            self._add(f"inlet_{side}", count, n)
            self._add(f"outlet_{side}", count, n)
        for j, segments in enumerate(model.segments):
            self._add(f"segment_{j}", int(segments) + 1, n)

    def _add(self, name: str, rows: int, periods: int) -> None:
        self._blocks[name] = (self.size, (rows, periods))
        self.size += rows * periods

    def __call__(self, name: str, row: int, t: int) -> int:
        start, (_, periods) = self._blocks[name]
        return start + row * periods + t

    def inlet(self, j: int, t: int) -> int:
        return self(f"inlet_{self._side[j]}", self._local[j], t)

    def outlet(self, j: int, t: int) -> int:
        return self(f"outlet_{self._side[j]}", self._local[j], t)

    def segment(self, j: int, i: int, t: int) -> int:
        return self(f"segment_{j}", i, t)

    def block(self, x: NDArray[np.float64], name: str) -> NDArray[np.float64]:
        start, shape = self._blocks[name]
        return x[start : start + shape[0] * shape[1]].reshape(shape)

    def label(self, index: int) -> str:
        """Readable name such as ``node_supply_2_5`` for LP dumps."""
        for name, (start, (_, periods)) in self._blocks.items():
            count = self._blocks[name][1][0] * periods
            if start <= index < start + count:
                row, t = divmod(index - start, periods)
                return f"{name}_{row}_{t}"
        raise IndexError(index)


# ─── Program ───


class ConstraintBlocks(BaseModel):
    """Row taxonomy of the program.

    h1: flow-dependent equalities (mixing, node heat, pipe segments).
    h2: equalities on x only. g1: inequalities on x. g2: bounds on m.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    h1: list[int]
    h2: list[int]
    g1: list[int]
    g2_lower: np.ndarray
    g2_upper: np.ndarray


class QuadraticProgram(BaseModel):
    """min ‖F x‖² + c·x + c0  s.t.  A x = b,  G x ≤ h  at fixed flows.

    ``bilinear`` lists (row, variable, flow index, ∂coefficient/∂m) for the
    entries of A that depend on the flows; flow indices address ``flows``
    flattened row-major (pipes × periods).
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    model: NetworkModel
    layout: Any
    flows: np.ndarray
    relaxed: bool = False

    a_eq: Any
    b_eq: np.ndarray
    eq_family: list[str]
    eq_period: list[int]
    bilinear: np.ndarray
    g_ineq: Any
    h_ineq: np.ndarray
    ineq_family: list[str]
    ineq_period: list[int]
    ineq_unit: np.ndarray

    quad_factor: Any
    linear: np.ndarray
    constant: float

    @property
    def size(self) -> int:
        return self.layout.size

    @property
    def blocks(self) -> ConstraintBlocks:
        h1 = [r for r, f in enumerate(self.eq_family) if f in H1_FAMILIES]
        h2 = [r for r, f in enumerate(self.eq_family) if f not in H1_FAMILIES]
        return ConstraintBlocks(
            h1=h1,
            h2=h2,
            g1=list(range(len(self.ineq_family))),
            g2_lower=self.model.m_min,
            g2_upper=self.model.m_max,
        )

    def objective(self, x: NDArray[np.float64]) -> float:
        quadratic = self.quad_factor @ x
        return float(quadratic @ quadratic + self.linear @ x + self.constant)

    def equality_residual(self, x: NDArray[np.float64]) -> NDArray[np.float64]:
        return self.a_eq @ x - self.b_eq

    def inequality_residual(self, x: NDArray[np.float64]) -> NDArray[np.float64]:
        """G x − h; positive entries are violations in row units."""
        return self.g_ineq @ x - self.h_ineq


class _Rows:
    """Accumulates sparse constraint rows with their family and period."""

    def __init__(self) -> None:
        self.entries: list[tuple[int, int, float]] = []
        self.rhs: list[float] = []
        self.family: list[str] = []
        self.period: list[int] = []
        self.unit: list[float] = []
        self.bilinear: list[tuple[int, int, int, float]] = []

    def add(
        self,
        family: str,
        t: int,
        terms: Iterable[tuple[int, float]],
        rhs: float = 0.0,
        scale: float = 1.0,
        unit: float = 1.0,
        bilinear: Iterable[tuple[int, int, float]] = (),
    ) -> None:
        row = len(self.rhs)
        self.entries.extend((row, var, coef * scale) for var, coef in terms)
        self.rhs.append(rhs * scale)
        self.family.append(family)
        self.period.append(t)
        self.unit.append(unit / scale)
        self.bilinear.extend((row, var, m_idx, d * scale) for var, m_idx, d in bilinear)

    def matrix(self, columns: int) -> sparse.csr_matrix:
        if not self.entries:
            return sparse.csr_matrix((len(self.rhs), columns))
        rows, cols, data = zip(*self.entries, strict=True)
        return sparse.csr_matrix((data, (rows, cols)), shape=(len(self.rhs), columns))


def check_flows(model: NetworkModel, flows: FlowSchedule) -> FlowSchedule:
    """Reject flow schedules of the wrong shape or outside the pipe bounds."""
    flows = np.asarray(flows, dtype=float)
    if flows.shape != (model.n_pipes, model.periods):
        raise DimensionError(
            f"flow schedule must be {(model.n_pipes, model.periods)}, got {flows.shape}"
        )
    slack = BOUND_TOLERANCE * (1.0 + np.abs(model.m_max))
    low = np.argwhere(flows < model.m_min - slack)
    high = np.argwhere(flows > model.m_max + slack)
    if len(low) or len(high):
        j, t = (low if len(low) else high)[0]
        raise FlowBoundsError(
            f"pipe {model.pipes[j].id}: flow {flows[j, t]:.6g} outside bounds in period {t + 1}"
        )
    return np.clip(flows, model.m_min, model.m_max)


def build_subproblem(
    model: NetworkModel, flows: FlowSchedule, literal: bool = False
) -> QuadraticProgram:
    """Assemble the dispatch QP at fixed flows.

    Args:
        model: Prepared network.
        flows: Pipe mass flows m_k (pipes × periods) inside the flow bounds.
        literal: Use the (a·m + b) left factor in the pipe rows.

    Returns:
        QuadraticProgram with rows in a fixed order: periods outer, constraint
        families in equation order, elements inner, and the horizon-wide
        energy adequacy row last.

    Raises:
        FlowBoundsError: If ``flows`` leaves the flow bounds.
    """
    m = check_flows(model, flows)
    layout = VariableLayout(model)
    eq, ineq = _Rows(), _Rows()
    n = model.periods
    profiles = initial_profiles(model, literal)
    q = model.exchanger_flow(m)
    sign = model.exchanger_sign()
    supply_incidence = model.side_incidence("supply")
    node_index = {node_id: k for k, node_id in enumerate(model.node_ids)}

    def flow_index(j: int, t: int) -> int:
        return j * n + t

    for t in range(n):
        for side in SIDES:
            _mixing_rows(model, layout, eq, m, side, t, flow_index)
        _exchanger_identity_rows(model, layout, eq, t)
        for k in range(model.n_nodes):
            heat_scale = POWER_SCALE / (model.cp * q[k, t]) if q[k, t] > 1e-9 else 1.0
            coef = -model.cp * q[k, t] / POWER_SCALE
            derivatives = [
                (j, -model.cp * sign[k] * supply_incidence[k, j] / POWER_SCALE)
                for j in np.flatnonzero(supply_incidence[k])
            ]
            supply_var = layout("exchanger_supply", k, t)
            return_var = layout("exchanger_return", k, t)
            eq.add(
                "node_heat",
                t,
                [(layout("heat", k, t), 1.0), (supply_var, coef), (return_var, -coef)],
                scale=heat_scale,
                unit=POWER_SCALE,
                bilinear=[(supply_var, flow_index(j, t), d) for j, d in derivatives]
                + [(return_var, flow_index(j, t), -d) for j, d in derivatives],
            )
        for side in SIDES:
            _pipe_rows(model, layout, eq, m, side, t, profiles, literal, flow_index)
        for j in range(model.n_pipes):
            last = int(model.segments[j])
            eq.add(
                "segment_boundary",
                t,
                [(layout.segment(j, 0, t), 1.0), (layout.inlet(j, t), -1.0)],
            )
            eq.add(
                "segment_boundary",
                t,
                [(layout.segment(j, last, t), 1.0), (layout.outlet(j, t), -1.0)],
            )
        for side in SIDES:
            for j in model.pipes_on(side):
                k = node_index[model.pipes[j].from_node]
                eq.add(
                    f"pipe_inlet_{side}",
                    t,
                    [(layout.inlet(j, t), 1.0), (layout(f"node_{side}", k, t), -1.0)],
                )
        _electric_rows(model, layout, eq, t)
        _attachment_rows(model, layout, eq, t)

        _line_limit_rows(model, layout, ineq, t)
        _polytope_rows(model, layout, ineq, t)
        if t > 0:
            _ramp_rows(model, layout, ineq, t)
        _temperature_rows(model, layout, ineq, t)

    loads = ~model.node_is_source
    adequacy = [
        (layout("heat", k, t), 1.0 if loads[k] else -1.0)
        for k in range(model.n_nodes)
        for t in range(n)
    ]
    ineq.add("energy_adequacy", n - 1, adequacy, unit=POWER_SCALE)

    quad_factor, linear, constant = _objective(model, layout)
    program = QuadraticProgram(
        model=model,
        layout=layout,
        flows=m,
        a_eq=eq.matrix(layout.size),
        b_eq=np.asarray(eq.rhs),
        eq_family=eq.family,
        eq_period=eq.period,
        bilinear=np.asarray(eq.bilinear, dtype=float).reshape(-1, 4),
        g_ineq=ineq.matrix(layout.size),
        h_ineq=np.asarray(ineq.rhs),
        ineq_family=ineq.family,
        ineq_period=ineq.period,
        ineq_unit=np.asarray(ineq.unit),
        quad_factor=quad_factor,
        linear=linear,
        constant=constant,
    )
    logger.debug(
        "Built program: %d variables, %d equalities, %d inequalities",
        layout.size,
        len(eq.rhs),
        len(ineq.rhs),
    )
    return program


def build_relaxed_subproblem(
    model: NetworkModel, flows: FlowSchedule, literal: bool = False
) -> QuadraticProgram:
    """Feasibility program min Σ s  s.t.  A x = b,  G x − s ≤ h,  s ≥ 0.

    Slacks are weighted by each row's natural unit (W or °C) so the optimum
    is a violation measure in those units.
    """
    program = build_subproblem(model, flows, literal)
    return program.model_copy(update={"relaxed": True})


# ─── Row Families ───


def _mixing_rows(model, layout, eq, m, side: Side, t, flow_index) -> None:
    """Flow-weighted mixing (Σ_out m) T = q T̃ + Σ_in m τO, scaled by 1/Σ_out m."""
    for k in range(model.n_nodes):
        ins = model.in_pipes[side][k]
        outs = model.out_pipes[side][k]
        injecting = model.injects(k, side)
        total = sum(m[j, t] for j in (outs if injecting else ins))
        scale = 1.0 / total if total > 0 else 1.0
        node_var = layout(f"node_{side}", k, t)
        terms = [(node_var, total)]
        bilinear = [(node_var, flow_index(j, t), 1.0) for j in (outs if injecting else ins)]
        for j in ins:
            terms.append((layout.outlet(j, t), -m[j, t]))
            bilinear.append((layout.outlet(j, t), flow_index(j, t), -1.0))
        if injecting:
            exchanger_var = layout(f"exchanger_{side}", k, t)
            q = sum(m[j, t] for j in outs) - sum(m[j, t] for j in ins)
            terms.append((exchanger_var, -q))
            bilinear += [(exchanger_var, flow_index(j, t), -1.0) for j in outs]
            bilinear += [(exchanger_var, flow_index(j, t), 1.0) for j in ins]
        eq.add(f"mixing_{side}", t, terms, scale=scale, bilinear=bilinear)


def _exchanger_identity_rows(model, layout, eq, t) -> None:
    """T̃ = T where a node draws from the network without injecting."""
    for side in SIDES:
        for k in range(model.n_nodes):
            if model.injects(k, side):
                continue
            eq.add(
                "exchanger_identity",
                t,
                [(layout(f"exchanger_{side}", k, t), 1.0), (layout(f"node_{side}", k, t), -1.0)],
            )


def _pipe_rows(model, layout, eq, m, side: Side, t, profiles, literal, flow_index) -> None:
    """(a + b m) τ(i, t) − b m τ(i−1, t) − c τ(i, t−1) = d, scaled by the left factor."""
    for j in model.pipes_on(side):
        coeffs = model_coefficients(model, j, t)
        flow = m[j, t]
        denominator = coeffs.denominator(flow, literal)
        d_left = coeffs.a if literal else coeffs.b
        for i in range(1, int(model.segments[j]) + 1):
            here = layout.segment(j, i, t)
            upstream = layout.segment(j, i - 1, t)
            terms = [(here, denominator), (upstream, -coeffs.b * flow)]
            rhs = coeffs.d
            if t == 0:
                rhs += coeffs.c * profiles[j][i]
            else:
                terms.append((layout.segment(j, i, t - 1), -coeffs.c))
            eq.add(
                f"pipe_{side}",
                t,
                terms,
                rhs=rhs,
                scale=1.0 / denominator,
                bilinear=[
                    (here, flow_index(j, t), d_left),
                    (upstream, flow_index(j, t), -coeffs.b),
                ],
            )


def _electric_rows(model, layout, eq, t) -> None:
    """Power balance Σp = Σd and DC line flows l = SF (p − d), in MW."""
    attached = [s for s in range(model.n_sources) if model.source_bus[s] >= 0]
    demand = model.bus_demand[:, t] / POWER_SCALE
    eq.add(
        "power_balance",
        t,
        [(layout("p", s, t), 1.0) for s in attached],
        rhs=float(demand.sum()),
        unit=POWER_SCALE,
    )
    for i in range(len(model.line_ids)):
        factors = model.shift_factors[i]
        terms = [(layout("l", i, t), 1.0)]
        terms += [(layout("p", s, t), -factors[model.source_bus[s]]) for s in attached]
        eq.add("line_flow", t, terms, rhs=-float(factors @ demand), unit=POWER_SCALE)


def _attachment_rows(model, layout, eq, t) -> None:
    """Tie source outputs to buses and heat nodes; pin load heat to demand."""
    for s in range(model.n_sources):
        if model.source_bus[s] < 0:
            eq.add("attachment", t, [(layout("p", s, t), 1.0)], unit=POWER_SCALE)
        if model.source_node[s] < 0:
            eq.add("attachment", t, [(layout("h", s, t), 1.0)], unit=POWER_SCALE)
    for k in range(model.n_nodes):
        if model.node_is_source[k]:
            terms = [(layout("heat", k, t), 1.0)]
            terms += [
                (layout("h", s, t), -1.0)
                for s in range(model.n_sources)
                if model.source_node[s] == k
            ]
            eq.add("attachment", t, terms, unit=POWER_SCALE)
        else:
            eq.add(
                "attachment",
                t,
                [(layout("heat", k, t), 1.0)],
                rhs=model.demand[k, t] / POWER_SCALE,
                unit=POWER_SCALE,
            )


def _line_limit_rows(model, layout, ineq, t) -> None:
    for i in range(len(model.line_ids)):
        limit = model.line_limit[i, t] / POWER_SCALE
        var = layout("l", i, t)
        ineq.add("line_limit", t, [(var, 1.0)], rhs=limit, unit=POWER_SCALE)
        ineq.add("line_limit", t, [(var, -1.0)], rhs=limit, unit=POWER_SCALE)


def _polytope_rows(model, layout, ineq, t) -> None:
    """B p + K h ≤ v per source, plus p ≤ availability for renewables."""
    n = model.periods
    for s, source in enumerate(model.sources):
        p, h = layout("p", s, t), layout("h", s, t)
        for row in source.polytope:
            rhs = series(row.rhs, n)[t] / POWER_SCALE
            ineq.add("polytope", t, [(p, row.p), (h, row.h)], rhs=rhs, unit=POWER_SCALE)
        if source.availability is not None:
            available = series(source.availability, n)[t] / POWER_SCALE
            ineq.add("polytope", t, [(p, 1.0)], rhs=available, unit=POWER_SCALE)


def _ramp_rows(model, layout, ineq, t) -> None:
    for family, block, attributes in (
        ("ramp_electric", "p", ("ramp_p_down", "ramp_p_up")),
        ("ramp_heat", "h", ("ramp_h_down", "ramp_h_up")),
    ):
        for s, source in enumerate(model.sources):
            down, up = (getattr(source, a) for a in attributes)
            now, before = layout(block, s, t), layout(block, s, t - 1)
            if up is not None:
                ineq.add(
                    family,
                    t,
                    [(now, 1.0), (before, -1.0)],
                    rhs=up * model.dt / POWER_SCALE,
                    unit=POWER_SCALE,
                )
            if down is not None:
                ineq.add(
                    family,
                    t,
                    [(now, -1.0), (before, 1.0)],
                    rhs=-down * model.dt / POWER_SCALE,
                    unit=POWER_SCALE,
                )


def _temperature_rows(model, layout, ineq, t) -> None:
    """Node and exchanger temperature ranges [°C]."""
    for side in SIDES:
        for k, node in enumerate(model.nodes):
            box = node.supply_range if side == "supply" else node.return_range
            if box is None:
                continue
            for block in (f"node_{side}", f"exchanger_{side}"):
                var = layout(block, k, t)
                ineq.add("temperature_bounds", t, [(var, 1.0)], rhs=box[1])
                ineq.add("temperature_bounds", t, [(var, -1.0)], rhs=-box[0])


def _objective(
    model: NetworkModel, layout: VariableLayout
) -> tuple[sparse.csr_matrix, NDArray[np.float64], float]:
    """Factor the source cost curves into ‖F x‖² + c·x + c0 (power in MW)."""
    n = model.periods
    coefficients = {a: model.source_series(a) for a in ("constant", "p", "p2", "h", "h2", "ph")}
    linear = np.zeros(layout.size)
    constant = float(coefficients["constant"].sum())
    factor_rows: list[tuple[int, int, float]] = []
    row = 0
    for s, source in enumerate(model.sources):
        penalty = series(source.curtailment_penalty, n)
        available = series(source.availability, n) if source.availability is not None else None
        for t in range(n):
            p, h = layout("p", s, t), layout("h", s, t)
            linear[p] += coefficients["p"][s, t] * POWER_SCALE
            linear[h] += coefficients["h"][s, t] * POWER_SCALE
            if available is not None and penalty[t]:
                linear[p] -= penalty[t] * POWER_SCALE
                constant += penalty[t] * available[t]
            block = POWER_SCALE**2 * np.array(
                [
                    [coefficients["p2"][s, t], coefficients["ph"][s, t] / 2.0],
                    [coefficients["ph"][s, t] / 2.0, coefficients["h2"][s, t]],
                ]
            )
            if not block.any():
                continue
            weights, vectors = np.linalg.eigh(block)
            if weights.min() < -1e-9 * np.abs(weights).max():
                raise UnboundedProgramError(
                    f"source {source.id}: cost not convex in period {t + 1}"
                )
            for w, v in zip(weights, vectors.T, strict=True):
                if w <= 1e-12 * np.abs(weights).max():
                    continue
                factor_rows += [(row, p, np.sqrt(w) * v[0]), (row, h, np.sqrt(w) * v[1])]
                row += 1
    if factor_rows:
        rows, cols, data = zip(*factor_rows, strict=True)
        factor = sparse.csr_matrix((data, (rows, cols)), shape=(row, layout.size))
    else:
        factor = sparse.csr_matrix((0, layout.size))
    return factor, linear, constant


# ─── Solve ───


class SystemState(BaseModel):
    """Primal dispatch values in natural units (W, °C); arrays are (rows × periods).

    ``pipe_inlet``/``pipe_outlet`` stack τSI/τRI and τSO/τRO in network pipe
    order (supply pipes first); ``segments[j]`` is τ_j(i, t) of shape (S_j+1, N).
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    p: np.ndarray
    h: np.ndarray
    heat: np.ndarray
    line_flow: np.ndarray
    exchanger_supply: np.ndarray
    exchanger_return: np.ndarray
    node_supply: np.ndarray
    node_return: np.ndarray
    pipe_inlet: np.ndarray
    pipe_outlet: np.ndarray
    segments: list[np.ndarray]

    @classmethod
    def from_vector(cls, program: QuadraticProgram, x: NDArray[np.float64]) -> "SystemState":
        layout = program.layout
        model = program.model
        block = functools.partial(layout.block, x)
        return cls(
            p=block("p") * POWER_SCALE,
            h=block("h") * POWER_SCALE,
            heat=block("heat") * POWER_SCALE,
            line_flow=block("l") * POWER_SCALE,
            exchanger_supply=block("exchanger_supply"),
            exchanger_return=block("exchanger_return"),
            node_supply=block("node_supply"),
            node_return=block("node_return"),
            pipe_inlet=np.vstack([block("inlet_supply"), block("inlet_return")]),
            pipe_outlet=np.vstack([block("outlet_supply"), block("outlet_return")]),
            segments=[block(f"segment_{j}") for j in range(model.n_pipes)],
        )


class SubproblemResult(BaseModel):
    """Outcome of one program solve.

    For optimal results ``eq_duals`` follow L = f + λᵀ(A x − b) + μᵀ(G x − h)
    in the program's row order; ``gradient`` is ∂J*/∂m (pipes × periods).
    For relaxed programs ``objective`` is the weighted slack sum σ.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    status: Literal["optimal", "infeasible"]
    relaxed: bool = False
    objective: float | None = None
    x: np.ndarray | None = None
    state: SystemState | None = None
    eq_duals: np.ndarray | None = None
    ineq_duals: np.ndarray | None = None
    slack: np.ndarray | None = None
    gradient: np.ndarray | None = None
    complementarity: float = 0.0
    solve_ms: float = 0.0

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


@functools.cache
def _equality_dual_sign(solver: str) -> float:
    """Orientation of the solver's equality duals against L = f + λ(x − 1)."""
    x = cp.Variable(1)
    constraint = x == 1
    cp.Problem(cp.Minimize(cp.sum(x)), [constraint]).solve(solver=solver)
    return float(-np.sign(np.ravel(constraint.dual_value)[0]))


def _solver_options(solver: str, tolerance: float) -> dict[str, float]:
    if solver == cp.CLARABEL:
        return {"tol_gap_abs": tolerance, "tol_gap_rel": tolerance, "tol_feas": tolerance}
    return {}


def solve_subproblem(
    program: QuadraticProgram, solver: str = cp.CLARABEL, tolerance: float = 1e-9
) -> SubproblemResult:
    """Solve a dispatch or relaxed program.

    Args:
        program: Output of ``build_subproblem`` or ``build_relaxed_subproblem``.
        solver: cvxpy solver name.
        tolerance: Feasibility and duality-gap tolerance passed to the solver.

    Returns:
        SubproblemResult. Optimal results carry primal values, duals per row
        and the envelope gradient; infeasible results carry the status only.

    Raises:
        UnboundedProgramError: If the program is unbounded.
        SolverError: If the solver fails or returns an unusable status.
    """
    x = cp.Variable(program.size)
    constraints = [program.a_eq @ x == program.b_eq]
    slack = None
    if program.relaxed:
        slack = cp.Variable(len(program.h_ineq))
        constraints += [program.g_ineq @ x - slack <= program.h_ineq, slack >= 0]
        objective = program.ineq_unit @ slack
    else:
        constraints.append(program.g_ineq @ x <= program.h_ineq)
        objective = program.linear @ x + program.constant
        if program.quad_factor.shape[0]:
            objective = objective + cp.sum_squares(program.quad_factor @ x)
    problem = cp.Problem(cp.Minimize(objective), constraints)

    started = time.perf_counter()
    try:
        problem.solve(solver=solver, **_solver_options(solver, tolerance))
    except cp.error.SolverError as e:
        raise SolverError(f"{solver} failed: {e}") from e
    elapsed = (time.perf_counter() - started) * 1000.0

    status = problem.status
    if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        logger.debug("Program infeasible (%s)", status)
        return SubproblemResult(status="infeasible", relaxed=program.relaxed, solve_ms=elapsed)
    if status in (cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE):
        raise UnboundedProgramError("dispatch program is unbounded: check costs and polytopes")
    if status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        raise SolverError(f"{solver} returned status {status}")
    if status == cp.OPTIMAL_INACCURATE:
        logger.warning("Solver reported reduced accuracy; using the returned point")

    values = np.asarray(x.value, dtype=float)
    eq_duals = _equality_dual_sign(solver) * np.asarray(constraints[0].dual_value, dtype=float)
    ineq_duals = np.maximum(np.asarray(constraints[1].dual_value, dtype=float), 0.0)
    residual = program.inequality_residual(values)
    if slack is not None:
        residual = residual - slack.value
    value = float(problem.value)
    result = SubproblemResult(
        status="optimal",
        relaxed=program.relaxed,
        objective=value,
        x=values,
        state=SystemState.from_vector(program, values),
        eq_duals=np.atleast_1d(eq_duals),
        ineq_duals=np.atleast_1d(ineq_duals),
        slack=None if slack is None else np.maximum(slack.value, 0.0),
        complementarity=float(abs(ineq_duals @ residual)),
        solve_ms=elapsed,
    )
    return result.model_copy(update={"gradient": envelope_gradient(result, program)})


def envelope_gradient(result: SubproblemResult, program: QuadraticProgram) -> FlowSchedule:
    """∂J*/∂m as Σ over flow-dependent rows of λ · ∂row/∂m at the solution.

    Raises:
        SolverError: If ``result`` is not optimal.
    """
    if not result.optimal or result.x is None or result.eq_duals is None:
        raise SolverError("envelope gradient needs an optimal result")
    gradient = np.zeros(program.flows.size)
    if len(program.bilinear):
        rows = program.bilinear[:, 0].astype(np.int64)
        variables = program.bilinear[:, 1].astype(np.int64)
        flow_index = program.bilinear[:, 2].astype(np.int64)
        terms = result.eq_duals[rows] * program.bilinear[:, 3] * result.x[variables]
        np.add.at(gradient, flow_index, terms)
    return gradient.reshape(program.flows.shape)


# ─── Cuts ───


class CutPlane(BaseModel):
    """Feasibility cut normal·m ≤ rhs.

    ``violation`` is the weighted inequality violation μᵀg₁ at the generating
    flows, which the cut takes as its value there; it matches σ at a relaxed
    optimum.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    normal: np.ndarray
    rhs: float
    sigma: float
    origin: np.ndarray
    violation: float | None = None

    def value(self, flows: FlowSchedule) -> float:
        """Left minus right side; positive where the cut is violated."""
        return float(np.sum(self.normal * flows) - self.rhs)

    @property
    def degenerate(self) -> bool:
        return bool(np.abs(self.normal).max(initial=0.0) <= 1e-12)


def generate_cut(result: SubproblemResult, program: QuadraticProgram) -> CutPlane:
    """Outer-approximation cut from a relaxed optimum.

    The linearization λᵀ ∇_m h1 (m − m_k) + μᵀ g1(x_k) ≤ 0 takes the value
    μᵀ g1(x_k) at m_k, which complementarity ties to σ.

    Raises:
        CutGenerationError: If the result is not a relaxed optimum with σ > 0.
    """
    if not (result.relaxed and result.optimal) or result.objective is None:
        raise CutGenerationError("cuts are generated from relaxed optima only")
    sigma = result.objective
    if sigma <= SLACK_TOLERANCE:
        raise CutGenerationError(f"relaxed optimum {sigma:.3g} leaves nothing to cut")
    normal = result.gradient if result.gradient is not None else envelope_gradient(result, program)
    violation = float(result.ineq_duals @ program.inequality_residual(result.x))
    if abs(violation - sigma) > 1e-6 * (1.0 + abs(sigma)):
        logger.warning("Cut constant μᵀg₁=%.6g differs from σ=%.6g", violation, sigma)
    cut = CutPlane(
        normal=normal,
        rhs=float(np.sum(normal * program.flows) - violation),
        sigma=sigma,
        violation=violation,
        origin=program.flows,
    )
    if cut.degenerate:
        logger.warning("Cut has no flow dependence (σ=%.4g)", sigma)
    return cut


# ─── LP Dump ───


def write_lp(program: QuadraticProgram, path: Path) -> None:
    """Write the program in CPLEX LP text format for external cross-checks."""
    label = program.layout.label
    slack_names = [f"s_{r}" for r in range(len(program.h_ineq))]

    def expression(row: sparse.csr_matrix) -> str:
        coo = row.tocoo()
        parts = [f"{v:+.17g} {label(int(c))}" for c, v in zip(coo.col, coo.data, strict=True)]
        return " ".join(parts) or "0 " + label(0)

    lines = ["\\ " + (program.model.instance.name or "dispatch"), "Minimize"]
    if program.relaxed:
        terms = [f"{u:+.17g} {s}" for u, s in zip(program.ineq_unit, slack_names, strict=True)]
        lines.append(" obj: " + " ".join(terms))
    else:
        linear = [f"{v:+.17g} {label(i)}" for i, v in enumerate(program.linear) if v]
        quadratic = (program.quad_factor.T @ program.quad_factor).tocoo()
        squared = []
        for i, j, v in zip(quadratic.row, quadratic.col, quadratic.data, strict=True):
            if i == j:
                squared.append(f"{2 * v:+.17g} {label(int(i))} ^ 2")
            elif i < j:
                squared.append(f"{4 * v:+.17g} {label(int(i))} * {label(int(j))}")
        objective = " ".join(linear)
        if squared:
            objective += " + [ " + " ".join(squared) + " ] / 2"
        lines.append(" obj: " + (objective or "0 " + label(0)))

    lines.append("Subject To")
    for r in range(program.a_eq.shape[0]):
        lines.append(
            f" {program.eq_family[r]}_{r}: {expression(program.a_eq[r])} = {program.b_eq[r]:.17g}"
        )
    for r in range(program.g_ineq.shape[0]):
        body = expression(program.g_ineq[r])
        if program.relaxed:
            body += f" - {slack_names[r]}"
        lines.append(f" {program.ineq_family[r]}_{r}: {body} <= {program.h_ineq[r]:.17g}")

    lines.append("Bounds")
    lines += [f" {label(i)} free" for i in range(program.size)]
    if program.relaxed:
        lines += [f" {s} >= 0" for s in slack_names]
    lines.append("End")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.debug("Wrote LP dump to %s", path)
