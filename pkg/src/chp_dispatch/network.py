"""Network topology, validation and derived matrices.

Turns a validated ``DispatchInstance`` into the numeric ``NetworkModel`` the
thermal simulator and the optimizer share: pipe ordering, incidence matrix,
segment counts, flow bounds, topological sweep orders and shift factors.
"""

import logging
import math
from collections.abc import Sequence
from typing import Literal

import networkx as nx
import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict
from scipy import linalg, sparse
from scipy.optimize import linprog

from chp_dispatch.exceptions import DimensionError, ShiftFactorError
from chp_dispatch.models import (
    DispatchInstance,
    ElectricNetwork,
    EnergySource,
    HeatNode,
    HeatPipe,
    PerPeriod,
    series,
    series_length_ok,
)

logger = logging.getLogger(__name__)

Side = Literal["supply", "return"]
SIDES: tuple[Side, Side] = ("supply", "return")

PSD_TOLERANCE = 1e-9


class ValidationReport(BaseModel):
    """Every invariant violated by an instance; empty iff well-formed."""

    violations: list[str] = []

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, message: str) -> None:
        self.violations.append(message)


# ─── Derived Quantities ───


def incidence(node_ids: Sequence[str], pipes: Sequence[HeatPipe]) -> NDArray[np.float64]:
    """Node-pipe incidence: +1 where a pipe enters a node, -1 where it leaves."""
    index = {node_id: k for k, node_id in enumerate(node_ids)}
    matrix = np.zeros((len(node_ids), len(pipes)))
    for j, pipe in enumerate(pipes):
        matrix[index[pipe.to_node], j] = 1.0
        matrix[index[pipe.from_node], j] = -1.0
    return matrix


def node_mass_flow(
    a: NDArray[np.float64], m: NDArray[np.float64], t: int | None = None
) -> NDArray[np.float64]:
    """Node mass flow A·m_t by the hydraulic Kirchhoff law.

    Args:
        a: Incidence matrix (nodes × pipes).
        m: Pipe flows, either one period (pipes,) or a schedule (pipes × periods).
        t: Period index, required when ``m`` is a schedule.

    Returns:
        Node mass flow vector (nodes,).

    Raises:
        DimensionError: If ``m`` does not have one entry per pipe or ``t`` is out of range.
    """
    m = np.asarray(m, dtype=float)
    if m.shape[0] != a.shape[1]:
        raise DimensionError(f"Flow vector has {m.shape[0]} pipes, incidence has {a.shape[1]}")
    if m.ndim == 2:
        if t is None or not 0 <= t < m.shape[1]:
            raise DimensionError(f"Period {t} outside schedule of {m.shape[1]} periods")
        m = m[:, t]
    return a @ m


def segment_count(pipe: HeatPipe, dx: float) -> int:
    """Number of segments S_j = ceil(x_j / Δx), at least one."""
    return max(1, math.ceil(pipe.length / dx - 1e-12))


def shift_factors(network: ElectricNetwork) -> NDArray[np.float64]:
    """Shift-factor matrix (lines × buses) for the DC flow l = SF·(p − d).

    Explicit rows are taken as given. Otherwise power-transfer distribution
    factors are derived from line reactances with the slack column at zero.

    Raises:
        ShiftFactorError: If the graph is disconnected or a reactance is not positive.
    """
    buses = [bus.id for bus in network.buses]
    index = {bus_id: i for i, bus_id in enumerate(buses)}
    lines = network.lines
    n_bus, n_line = len(buses), len(lines)
    if n_line == 0:
        return np.zeros((0, n_bus))

    if all(line.shift_factors is not None for line in lines):
        rows = np.array([line.shift_factors for line in lines], dtype=float)
        if rows.shape != (n_line, n_bus):
            raise DimensionError(f"Shift factors must be {n_line}×{n_bus}, got {rows.shape}")
        return rows

    for line in lines:
        if line.from_bus is None or line.to_bus is None or line.reactance is None:
            raise ShiftFactorError(f"Line {line.id}: endpoints and reactance required")
        if line.reactance <= 0:
            raise ShiftFactorError(f"Line {line.id}: reactance must be positive")

    graph = nx.Graph()
    graph.add_nodes_from(buses)
    graph.add_edges_from((line.from_bus, line.to_bus) for line in lines)
    if not nx.is_connected(graph):
        raise ShiftFactorError("Electric network is not connected")

    # Bf·θ gives branch flows, Bbus·θ nodal injections
    f = np.array([index[line.from_bus] for line in lines])
    t = np.array([index[line.to_bus] for line in lines])
    b = np.array([1.0 / line.reactance for line in lines])
    rows = np.r_[np.arange(n_line), np.arange(n_line)]
    cft = sparse.csr_matrix(
        (np.r_[np.ones(n_line), -np.ones(n_line)], (rows, np.r_[f, t])), shape=(n_line, n_bus)
    )
    bf = sparse.diags(b) @ cft
    bbus = (cft.T @ bf).toarray()

    slack = index[network.slack_bus or buses[0]]
    keep = [i for i in range(n_bus) if i != slack]
    factors = np.zeros((n_line, n_bus))
    if keep:
        reduced = bbus[np.ix_(keep, keep)]
        factors[:, keep] = linalg.solve(reduced, bf.toarray()[:, keep].T, assume_a="sym").T

    for i, line in enumerate(lines):
        if line.shift_factors is not None:
            factors[i] = line.shift_factors
    return factors


def cost_is_convex(p2: float, h2: float, ph: float) -> bool:
    """PSD test of the quadratic form [[η2, η5/2], [η5/2, η4]]."""
    q = np.array([[p2, ph / 2.0], [ph / 2.0, h2]])
    scale = max(np.abs(q).max(), 1e-300)
    return bool(np.linalg.eigvalsh(q / scale).min() >= -PSD_TOLERANCE)


# ─── Numeric View ───


class NetworkModel(BaseModel):
    """Numeric arrays derived once from an instance and shared read-only.

    Pipes are ordered supply first, then return, each in listing order.
    Schedules over pipes use shape (pipes × periods).
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    instance: DispatchInstance
    periods: int
    dt: float
    rho: float
    cp: float

    node_ids: list[str]
    node_is_source: np.ndarray
    pipes: list[HeatPipe]
    pipe_side: list[Side]
    pipe_dx: np.ndarray
    segments: np.ndarray
    incidence: np.ndarray
    m_min: np.ndarray
    m_max: np.ndarray
    ambient: np.ndarray
    demand: np.ndarray

    in_pipes: dict[str, list[list[int]]]
    out_pipes: dict[str, list[list[int]]]
    sweep_order: dict[str, list[int]]
    mirror: list[tuple[int, int]]

    source_ids: list[str]
    source_bus: np.ndarray
    source_node: np.ndarray
    bus_ids: list[str]
    bus_demand: np.ndarray
    line_ids: list[str]
    shift_factors: np.ndarray
    line_limit: np.ndarray

    @classmethod
    def from_instance(cls, instance: DispatchInstance) -> "NetworkModel":
        """Build the numeric view of a (validated) instance."""
        n = instance.horizon.periods
        heat = instance.heat_network
        node_ids = [node.id for node in heat.nodes]
        node_index = {node_id: k for k, node_id in enumerate(node_ids)}
        pipes = list(heat.supply_pipes) + list(heat.return_pipes)
        sides: list[Side] = ["supply"] * len(heat.supply_pipes) + ["return"] * len(
            heat.return_pipes
        )
        pipe_dx = np.array([pipe.dx or instance.horizon.dx for pipe in pipes])

        in_pipes: dict[str, list[list[int]]] = {side: [[] for _ in node_ids] for side in SIDES}
        out_pipes: dict[str, list[list[int]]] = {side: [[] for _ in node_ids] for side in SIDES}
        for j, (pipe, side) in enumerate(zip(pipes, sides, strict=True)):
            in_pipes[side][node_index[pipe.to_node]].append(j)
            out_pipes[side][node_index[pipe.from_node]].append(j)

        sweep_order = {}
        for side in SIDES:
            graph = nx.DiGraph()
            graph.add_nodes_from(range(len(node_ids)))
            graph.add_edges_from(
                (node_index[p.from_node], node_index[p.to_node])
                for p, s in zip(pipes, sides, strict=True)
                if s == side
            )
            sweep_order[side] = list(nx.lexicographical_topological_sort(graph))

        supply_by_ends = {
            (p.from_node, p.to_node): j for j, p in enumerate(pipes) if sides[j] == "supply"
        }
        mirror = [
            (supply_by_ends[(p.to_node, p.from_node)], j)
            for j, p in enumerate(pipes)
            if sides[j] == "return" and (p.to_node, p.from_node) in supply_by_ends
        ]

        elec = instance.electric_network
        bus_index = {bus.id: i for i, bus in enumerate(elec.buses)}
        sources = instance.sources

        return cls(
            instance=instance,
            periods=n,
            dt=instance.horizon.dt,
            rho=instance.physics.rho,
            cp=instance.physics.cp,
            node_ids=node_ids,
            node_is_source=np.array([node.kind == "source" for node in heat.nodes], dtype=bool),
            pipes=pipes,
            pipe_side=sides,
            pipe_dx=pipe_dx,
            segments=np.array(
                [segment_count(p, dx) for p, dx in zip(pipes, pipe_dx, strict=True)],
                dtype=np.int64,
            ),
            incidence=incidence(node_ids, pipes),
            m_min=_stack([p.m_min for p in pipes], n),
            m_max=_stack([p.m_max for p in pipes], n),
            ambient=_stack([p.ambient for p in pipes], n),
            demand=_stack([node.demand for node in heat.nodes], n),
            in_pipes=in_pipes,
            out_pipes=out_pipes,
            sweep_order=sweep_order,
            mirror=mirror,
            source_ids=[s.id for s in sources],
            source_bus=np.array(
                [bus_index[s.bus] if s.bus is not None else -1 for s in sources], dtype=np.int64
            ),
            source_node=np.array(
                [node_index[s.heat_node] if s.heat_node is not None else -1 for s in sources],
                dtype=np.int64,
            ),
            bus_ids=list(bus_index),
            bus_demand=_stack([bus.demand for bus in elec.buses], n),
            line_ids=[line.id for line in elec.lines],
            shift_factors=shift_factors(elec),
            line_limit=_stack([line.limit for line in elec.lines], n),
        )

    # ─── Convenience ───

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_pipes(self) -> int:
        return len(self.pipes)

    @property
    def n_sources(self) -> int:
        return len(self.source_ids)

    @property
    def sources(self) -> list[EnergySource]:
        return self.instance.sources

    @property
    def nodes(self) -> list[HeatNode]:
        return self.instance.heat_network.nodes

    def pipes_on(self, side: Side) -> list[int]:
        return [j for j, s in enumerate(self.pipe_side) if s == side]

    def injects(self, k: int, side: Side) -> bool:
        """Whether node k feeds its exchanger stream into the ``side`` network."""
        return bool(self.node_is_source[k]) == (side == "supply")

    def side_incidence(self, side: Side) -> NDArray[np.float64]:
        mask = np.array([s == side for s in self.pipe_side])
        return self.incidence * mask[None, :]

    def exchanger_sign(self) -> NDArray[np.float64]:
        """Sign turning supply-side node mass flow into exchanger flow q ≥ 0."""
        return np.where(self.node_is_source, -1.0, 1.0)

    def exchanger_flow(self, m: NDArray[np.float64]) -> NDArray[np.float64]:
        """Exchanger mass flow q_k,t at every node (nodes × periods)."""
        return self.exchanger_sign()[:, None] * (self.side_incidence("supply") @ m)

    def source_series(self, attribute: str) -> NDArray[np.float64]:
        """Stack a per-period cost attribute of every source (sources × periods)."""
        return _stack([getattr(s.cost, attribute) for s in self.sources], self.periods)

    def midpoint_flows(self) -> NDArray[np.float64]:
        return 0.5 * (self.m_min + self.m_max)


def _stack(values: Sequence[PerPeriod], periods: int) -> NDArray[np.float64]:
    if not values:
        return np.zeros((0, periods))
    return np.vstack([series(v, periods) for v in values])


# ─── Validation ───


def validate(instance: DispatchInstance) -> ValidationReport:
    """Report every violated invariant of an instance.

    Args:
        instance: The parsed instance.

    Returns:
        ValidationReport, empty iff the instance is well-formed.
    """
    report = ValidationReport()
    n = instance.horizon.periods
    heat = instance.heat_network
    node_ids = [node.id for node in heat.nodes]
    nodes = {node.id: node for node in heat.nodes}

    _check_unique(report, "node", node_ids)
    _check_unique(report, "pipe", [p.id for p in heat.supply_pipes + heat.return_pipes])
    _check_unique(report, "bus", [b.id for b in instance.electric_network.buses])
    _check_unique(report, "line", [line.id for line in instance.electric_network.lines])
    _check_unique(report, "source", [s.id for s in instance.sources])

    for node in heat.nodes:
        if not series_length_ok(node.demand, n):
            report.add(f"node {node.id}: demand needs {n} periods")
        elif (series(node.demand, n) < 0).any():
            report.add(f"node {node.id}: negative demand")
        elif node.kind == "source" and (series(node.demand, n) != 0).any():
            report.add(f"node {node.id}: source node with heat demand")
        for label, box in (("supply", node.supply_range), ("return", node.return_range)):
            if box is not None and box[0] > box[1]:
                report.add(f"node {node.id}: {label} temperature range inverted")

    for side, pipes in (("supply", heat.supply_pipes), ("return", heat.return_pipes)):
        _check_pipes(report, side, pipes, nodes, n)

    _check_mirror(report, heat.supply_pipes, heat.return_pipes, n)
    _check_sources(report, instance)
    _check_electric(report, instance)
    _check_initial(report, instance)

    if report.ok:
        logger.info("Instance %r is well-formed", instance.name or "<unnamed>")
    return report


def _check_unique(report: ValidationReport, label: str, ids: list[str]) -> None:
    seen: set[str] = set()
    for item in ids:
        if item in seen:
            report.add(f"duplicate {label} id {item}")
        seen.add(item)


def _check_pipes(
    report: ValidationReport,
    side: str,
    pipes: list[HeatPipe],
    nodes: dict[str, HeatNode],
    n: int,
) -> None:
    graph = nx.MultiGraph()
    graph.add_nodes_from(nodes)
    dangling = False
    for pipe in pipes:
        for end in (pipe.from_node, pipe.to_node):
            if end not in nodes:
                report.add(f"pipe {pipe.id}: unknown node {end}")
                dangling = True
        if pipe.from_node == pipe.to_node:
            report.add(f"pipe {pipe.id}: starts and ends at node {pipe.from_node}")
        graph.add_edge(pipe.from_node, pipe.to_node)

        lengths_ok = True
        for field in ("m_min", "m_max", "ambient"):
            if not series_length_ok(getattr(pipe, field), n):
                report.add(f"pipe {pipe.id}: {field} needs {n} periods")
                lengths_ok = False
        if not lengths_ok:
            continue
        low, high = series(pipe.m_min, n), series(pipe.m_max, n)
        for t in np.flatnonzero(low > high):
            report.add(f"pipe {pipe.id}: flow bounds inverted in period {t + 1}")
        if (low < 0).any():
            report.add(f"pipe {pipe.id}: negative lower flow bound")

    if dangling:
        return
    if len(nodes) > 1 and not nx.is_forest(graph):
        report.add(f"{side} graph not radial")

    incoming = {k: 0 for k in nodes}
    outgoing = {k: 0 for k in nodes}
    for pipe in pipes:
        incoming[pipe.to_node] += 1
        outgoing[pipe.from_node] += 1
    for node_id, node in nodes.items():
        if len(nodes) > 1 and incoming[node_id] + outgoing[node_id] == 0:
            report.add(f"node {node_id}: not connected to the {side} network")
            continue
        injecting = (node.kind == "source") == (side == "supply")
        if injecting and len(nodes) > 1 and outgoing[node_id] == 0:
            report.add(f"node {node_id}: {node.kind} node without outgoing {side} pipe")
        if not injecting and incoming[node_id] == 0:
            report.add(f"node {node_id}: {node.kind} node without incoming {side} pipe")


def _check_mirror(
    report: ValidationReport, supply: list[HeatPipe], returns: list[HeatPipe], n: int
) -> None:
    by_ends = {(p.from_node, p.to_node): p for p in supply}
    for pipe in returns:
        twin = by_ends.get((pipe.to_node, pipe.from_node))
        if twin is None:
            report.add(f"return pipe {pipe.id}: no supply pipe in the opposite direction")
            continue
        if not (series_length_ok(pipe.m_min, n) and series_length_ok(twin.m_min, n)):
            continue
        if not (series_length_ok(pipe.m_max, n) and series_length_ok(twin.m_max, n)):
            continue
        if not (
            np.allclose(series(pipe.m_min, n), series(twin.m_min, n))
            and np.allclose(series(pipe.m_max, n), series(twin.m_max, n))
        ):
            report.add(f"return pipe {pipe.id}: flow bounds differ from supply pipe {twin.id}")
    if len(returns) != len(supply):
        report.add("supply and return networks have different pipe counts")


def _check_sources(report: ValidationReport, instance: DispatchInstance) -> None:
    n = instance.horizon.periods
    nodes = {node.id: node for node in instance.heat_network.nodes}
    buses = {bus.id for bus in instance.electric_network.buses}
    served: set[str] = set()

    for source in instance.sources:
        label = f"source {source.id}"
        if source.bus is not None and source.bus not in buses:
            report.add(f"{label}: unknown bus {source.bus}")
        if source.heat_node is not None:
            node = nodes.get(source.heat_node)
            if node is None:
                report.add(f"{label}: unknown heat node {source.heat_node}")
            elif node.kind != "source":
                report.add(f"{label}: attached to load node {node.id}")
            else:
                served.add(node.id)

        cost = source.cost
        fields = ("constant", "p", "p2", "h", "h2", "ph")
        if not all(series_length_ok(getattr(cost, f), n) for f in fields):
            report.add(f"{label}: cost coefficients need {n} periods")
        else:
            p2, h2, ph = (series(getattr(cost, f), n) for f in ("p2", "h2", "ph"))
            for t in range(n):
                if not cost_is_convex(p2[t], h2[t], ph[t]):
                    report.add(f"{label}: cost not convex in period {t + 1}")
                    break

        for down, up, kind in (
            (source.ramp_p_down, source.ramp_p_up, "electric"),
            (source.ramp_h_down, source.ramp_h_up, "heat"),
        ):
            if down is not None and up is not None and down > up:
                report.add(f"{label}: {kind} ramp down limit exceeds up limit")

        if source.renewable and source.availability is None:
            report.add(f"{label}: renewable source without availability")
        if source.availability is not None and not series_length_ok(source.availability, n):
            report.add(f"{label}: availability needs {n} periods")
        if not series_length_ok(source.curtailment_penalty, n):
            report.add(f"{label}: curtailment penalty needs {n} periods")
        if any(not series_length_ok(row.rhs, n) for row in source.polytope):
            report.add(f"{label}: polytope right-hand sides need {n} periods")
            continue
        _check_polytope(report, source, n)

    for node in nodes.values():
        if node.kind == "source" and node.id not in served:
            report.add(f"node {node.id}: source node without attached heat source")


def _check_polytope(report: ValidationReport, source: EnergySource, n: int) -> None:
    """Solve tiny LPs to confirm each period's region is nonempty and bounded."""
    rows = [(row.p, row.h) for row in source.polytope]
    rhs = [series(row.rhs, n) for row in source.polytope]
    if source.availability is not None:
        rows.append((1.0, 0.0))
        rhs.append(series(source.availability, n))
    a_ub = np.array(rows) if rows else None
    bounds = [
        (0.0, 0.0) if source.bus is None else (None, None),
        (0.0, 0.0) if source.heat_node is None else (None, None),
    ]
    checked: set[tuple[float, ...]] = set()
    for t in range(n):
        b_ub = tuple(float(r[t]) for r in rhs)
        if b_ub in checked:
            continue
        checked.add(b_ub)
        for c in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            result = linprog(
                c, A_ub=a_ub, b_ub=np.array(b_ub) if rows else None, bounds=bounds, method="highs"
            )
            if result.status == 2:
                report.add(f"source {source.id}: polytope empty in period {t + 1}")
                return
            if result.status == 3:
                report.add(f"source {source.id}: polytope unbounded in period {t + 1}")
                return


def _check_electric(report: ValidationReport, instance: DispatchInstance) -> None:
    n = instance.horizon.periods
    network = instance.electric_network
    buses = {bus.id for bus in network.buses}
    if not network.buses:
        report.add("electric network has no buses")
        return
    for bus in network.buses:
        if not series_length_ok(bus.demand, n):
            report.add(f"bus {bus.id}: demand needs {n} periods")
    if network.slack_bus is not None and network.slack_bus not in buses:
        report.add(f"slack bus {network.slack_bus} is not a bus")

    derive = any(line.shift_factors is None for line in network.lines)
    for line in network.lines:
        if not series_length_ok(line.limit, n):
            report.add(f"line {line.id}: limit needs {n} periods")
        elif (series(line.limit, n) <= 0).any():
            report.add(f"line {line.id}: flow limit must be positive")
        if line.shift_factors is not None and len(line.shift_factors) != len(buses):
            report.add(
                f"line {line.id}: shift-factor row has {len(line.shift_factors)} entries, "
                f"expected {len(buses)}"
            )
        if derive:
            if line.from_bus not in buses or line.to_bus not in buses:
                report.add(f"line {line.id}: endpoints required to derive shift factors")
            if line.reactance is None or line.reactance <= 0:
                report.add(f"line {line.id}: positive reactance required")

    if derive and report.ok:
        try:
            shift_factors(network)
        except ShiftFactorError as e:
            report.add(str(e))


def _check_initial(report: ValidationReport, instance: DispatchInstance) -> None:
    initial = instance.initial_temperatures
    steady = initial.steady_supply is not None and initial.steady_return is not None
    pipes = instance.heat_network.supply_pipes + instance.heat_network.return_pipes
    known = {p.id for p in pipes}
    for pipe_id in initial.profiles:
        if pipe_id not in known:
            report.add(f"initial temperatures: unknown pipe {pipe_id}")
    for pipe in pipes:
        profile = initial.profiles.get(pipe.id)
        if profile is None:
            if not steady:
                report.add(f"pipe {pipe.id}: no initial temperature profile")
            continue
        if isinstance(profile, list):
            expected = segment_count(pipe, pipe.dx or instance.horizon.dx) + 1
            if len(profile) != expected:
                report.add(
                    f"pipe {pipe.id}: initial profile has {len(profile)} values, "
                    f"expected {expected}"
                )
