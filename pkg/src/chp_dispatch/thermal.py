"""Pipeline heat transport and node mixing.

Implements the implicit upwind scheme for the advection-loss equation of a
heating pipe together with the flow-weighted mixing at nodes. The same
equations appear as constraint rows in ``subproblem``; here they are swept
forward as a simulator, which serves as the correctness oracle for the
optimizer's temperature block.

Segment update (one pipe, one period)::

    τ(i, t) = (c·τ(i, t-1) + b·m·τ(i-1, t) + d) / (a + b·m)

With ``literal=True`` the left factor is taken as (a·m + b) instead, which
reproduces the printed form of the scheme for comparison runs.
"""

import logging
import math
from collections.abc import Sequence

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict

from chp_dispatch.exceptions import DegenerateFlowError, DimensionError, InstanceError
from chp_dispatch.models import HeatPipe, is_lossless
from chp_dispatch.network import SIDES, NetworkModel, segment_count

logger = logging.getLogger(__name__)


class PipeCoefficients(BaseModel):
    """Scheme coefficients of one pipe in one period.

    a = 1/Δt + 1/(ρ c_p A R), b = 1/(Δx ρ A), c = 1/Δt, d = T^a/(ρ c_p A R).
    """

    model_config = ConfigDict(frozen=True)

    a: float
    b: float
    c: float
    d: float

    @property
    def loss(self) -> float:
        """Loss rate a - c = 1/(ρ c_p A R)."""
        return self.a - self.c

    def denominator(self, m: float, literal: bool = False) -> float:
        return self.a * m + self.b if literal else self.a + self.b * m


def pipe_coefficients(
    pipe: HeatPipe,
    dt: float,
    dx: float,
    rho: float = 1000.0,
    cp: float = 4182.0,
    period: int = 0,
) -> PipeCoefficients:
    """Compute the scheme coefficients of a pipe for one period.

    Args:
        pipe: The pipe (area, resistance, ambient series).
        dt: Period length Δt [s].
        dx: Segment length Δx [m].
        rho: Water density [kg/m³].
        cp: Heat capacity [J/(kg·K)].
        period: Zero-based period used to read the ambient temperature.

    Returns:
        PipeCoefficients for that period.

    Raises:
        InstanceError: If Δt or Δx is not positive.
    """
    if dt <= 0 or dx <= 0:
        raise InstanceError(f"Δt and Δx must be positive (got {dt}, {dx})")
    ambient = pipe.ambient[period] if isinstance(pipe.ambient, list) else pipe.ambient
    loss = 0.0 if is_lossless(pipe) else 1.0 / (rho * cp * pipe.area * pipe.resistance)
    return PipeCoefficients(
        a=1.0 / dt + loss,
        b=1.0 / (dx * rho * pipe.area),
        c=1.0 / dt,
        d=ambient * loss,
    )


def model_coefficients(model: NetworkModel, j: int, t: int) -> PipeCoefficients:
    """Coefficients of pipe j in period t for a prepared network."""
    return pipe_coefficients(
        model.pipes[j], model.dt, float(model.pipe_dx[j]), model.rho, model.cp, period=t
    )


def step_segment(
    coeffs: PipeCoefficients,
    m: float,
    tau_prev_time: float,
    tau_upstream: float,
    literal: bool = False,
) -> float:
    """Temperature τ(i, t) of one segment from τ(i, t-1) and τ(i-1, t)."""
    numerator = coeffs.c * tau_prev_time + coeffs.b * m * tau_upstream + coeffs.d
    return numerator / coeffs.denominator(m, literal)


def advance_pipe(
    coeffs: PipeCoefficients,
    m: float,
    previous: NDArray[np.float64],
    inlet: float,
    literal: bool = False,
) -> NDArray[np.float64]:
    """One period of the sweep: new profile (S+1,) from the previous one and the inlet."""
    profile = np.empty_like(previous)
    profile[0] = inlet
    for i in range(1, len(previous)):
        profile[i] = step_segment(coeffs, m, previous[i], profile[i - 1], literal)
    return profile


def simulate_pipe(
    pipe: HeatPipe,
    flows: Sequence[float],
    inlet: Sequence[float],
    initial: Sequence[float] | None,
    dt: float,
    dx: float,
    rho: float = 1000.0,
    cp: float = 4182.0,
    literal: bool = False,
) -> NDArray[np.float64]:
    """Sweep one pipe over the horizon.

    Args:
        pipe: The pipe.
        flows: Mass flow per period (N,).
        inlet: Inlet temperature per period (N,).
        initial: Initial profile τ(i, 0), i = 0…S.
        dt: Period length [s].
        dx: Segment length [m].
        rho: Water density.
        cp: Heat capacity.
        literal: Use the (a·m + b) left factor.

    Returns:
        Temperature field (S+1, N+1); column 0 is the initial profile and the
        last row is the outlet series.

    Raises:
        InstanceError: If the initial profile is missing.
        DimensionError: If series lengths disagree.
    """
    if initial is None:
        raise InstanceError(f"pipe {pipe.id}: missing initial temperature profile")
    flows = np.asarray(flows, dtype=float)
    inlet = np.asarray(inlet, dtype=float)
    initial = np.asarray(initial, dtype=float)
    if flows.shape != inlet.shape:
        raise DimensionError("flow and inlet series must have the same length")

    segments = segment_count(pipe, dx)
    if initial.shape != (segments + 1,):
        raise DimensionError(f"pipe {pipe.id}: initial profile needs {segments + 1} values")

    field = np.empty((segments + 1, len(flows) + 1))
    field[:, 0] = initial
    for t in range(len(flows)):
        coeffs = pipe_coefficients(pipe, dt, dx, rho, cp, period=t)
        field[:, t + 1] = advance_pipe(coeffs, flows[t], field[:, t], inlet[t], literal)
    return field


def steady_pipe_profile(
    coeffs: PipeCoefficients, m: float, inlet: float, segments: int, literal: bool = False
) -> NDArray[np.float64]:
    """Fixed point τ(i, t) = τ(i, t-1) of the segment recursion."""
    profile = np.empty(segments + 1)
    profile[0] = inlet
    denominator = coeffs.denominator(m, literal) - coeffs.c
    for i in range(1, segments + 1):
        profile[i] = (coeffs.b * m * profile[i - 1] + coeffs.d) / denominator
    return profile


def analytic_steady_profile(
    x: NDArray[np.float64], inlet: float, ambient: float, m: float, cp: float, resistance: float
) -> NDArray[np.float64]:
    """Closed-form steady temperature T^a + (τ_in − T^a)·exp(−x/(m c_p R))."""
    return ambient + (inlet - ambient) * np.exp(-np.asarray(x) / (m * cp * resistance))


def mix_node(
    temperatures: Sequence[float],
    flows: Sequence[float],
    exchanger_flow: float = 0.0,
    exchanger_temperature: float | None = None,
) -> float:
    """Flow-weighted mixing of entering pipe outlets and the exchanger stream.

    Raises:
        DegenerateFlowError: If the total flow is zero.
    """
    total = exchanger_flow + math.fsum(flows)
    if total <= 0:
        raise DegenerateFlowError("no flow reaches the node")
    weighted = math.fsum(m * tau for m, tau in zip(flows, temperatures, strict=True))
    if exchanger_flow:
        weighted += exchanger_flow * exchanger_temperature
    return weighted / total


# ─── Network Simulation ───


class ThermalState(BaseModel):
    """Temperatures of a simulated network (nodes × periods, per-pipe fields)."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    node_supply: np.ndarray
    node_return: np.ndarray
    exchanger_supply: np.ndarray
    exchanger_return: np.ndarray
    fields: list[np.ndarray]
    delivered_heat: np.ndarray

    def inlet(self, j: int) -> NDArray[np.float64]:
        return self.fields[j][0, 1:]

    def outlet(self, j: int) -> NDArray[np.float64]:
        return self.fields[j][-1, 1:]


def initial_profiles(model: NetworkModel, literal: bool = False) -> list[NDArray[np.float64]]:
    """Resolve τ_j(i, 0) for every pipe.

    Explicit profiles are used as given; the remaining pipes get the steady
    profile of the network at first-period midpoint flows with the configured
    steady exchanger temperatures.
    """
    initial = model.instance.initial_temperatures
    profiles: list[NDArray[np.float64] | None] = []
    for j, pipe in enumerate(model.pipes):
        given = initial.profiles.get(pipe.id)
        size = int(model.segments[j]) + 1
        if given is None:
            profiles.append(None)
        elif isinstance(given, list):
            if len(given) != size:
                raise DimensionError(f"pipe {pipe.id}: initial profile needs {size} values")
            profiles.append(np.asarray(given, dtype=float))
        else:
            profiles.append(np.full(size, float(given)))
    if all(p is not None for p in profiles):
        return profiles  # type: ignore[return-value]

    if initial.steady_supply is None or initial.steady_return is None:
        missing = [model.pipes[j].id for j, p in enumerate(profiles) if p is None]
        raise InstanceError(f"no initial temperature profile for pipes {missing}")

    m0 = model.midpoint_flows()[:, 0]
    for side in SIDES:
        exchanger = initial.steady_supply if side == "supply" else initial.steady_return
        for k in model.sweep_order[side]:
            ins = model.in_pipes[side][k]
            outs = model.out_pipes[side][k]
            outlets = [profiles[j][-1] for j in ins]  # type: ignore[index]
            flows = [m0[j] for j in ins]
            if model.injects(k, side):
                q = max(sum(m0[j] for j in outs) - sum(flows), 0.0)
                if q + sum(flows) > 0:
                    node_temp = mix_node(outlets, flows, q, exchanger)
                else:
                    node_temp = exchanger
            else:
                node_temp = mix_node(outlets, flows)
            for j in outs:
                if profiles[j] is None:
                    profiles[j] = steady_pipe_profile(
                        model_coefficients(model, j, 0),
                        m0[j],
                        node_temp,
                        int(model.segments[j]),
                        literal,
                    )
    logger.debug("Filled steady initial profiles at midpoint flows")
    return profiles  # type: ignore[return-value]


def simulate_network(
    model: NetworkModel,
    m: NDArray[np.float64],
    source_temperatures: NDArray[np.float64],
    load_return_temperatures: NDArray[np.float64] | None = None,
    literal: bool = False,
) -> ThermalState:
    """Forward-simulate both heating networks for a flow schedule.

    Per period the supply network is swept from sources to loads in
    topological order, then the return network from loads to sources. Load
    exchanger return temperatures are taken from ``load_return_temperatures``
    when given, otherwise derived from the heat demand as T̃S − h/(c_p q).

    Args:
        model: Prepared network.
        m: Pipe flows (pipes × periods), nonnegative.
        source_temperatures: Exchanger supply temperature T̃S (nodes × periods);
            only source rows are read.
        load_return_temperatures: Optional exchanger return temperature T̃R
            (nodes × periods); only load rows are read.
        literal: Use the (a·m + b) left factor.

    Returns:
        ThermalState with node, exchanger and pipe temperatures and the heat
        exchanged at every node.

    Raises:
        DimensionError: If array shapes do not match the network.
        DegenerateFlowError: If a node with heat demand receives no flow.
    """
    n, n_nodes = model.periods, model.n_nodes
    m = np.asarray(m, dtype=float)
    if m.shape != (model.n_pipes, n):
        raise DimensionError(f"flow schedule must be {(model.n_pipes, n)}, got {m.shape}")
    if np.asarray(source_temperatures).shape != (n_nodes, n):
        raise DimensionError(f"source temperatures must be {(n_nodes, n)}")

    q = model.exchanger_flow(m)
    fields = [np.empty((int(s) + 1, n + 1)) for s in model.segments]
    for j, profile in enumerate(initial_profiles(model, literal)):
        fields[j][:, 0] = profile

    node_supply = np.empty((n_nodes, n))
    node_return = np.empty((n_nodes, n))
    exch_supply = np.empty((n_nodes, n))
    exch_return = np.empty((n_nodes, n))
    node_temp = {"supply": node_supply, "return": node_return}
    exch_temp = {"supply": exch_supply, "return": exch_return}

    for t in range(n):
        for side in SIDES:
            if side == "return":
                _load_return_temperatures(
                    model, t, q, exch_supply, exch_return, load_return_temperatures
                )
            for k in model.sweep_order[side]:
                ins = model.in_pipes[side][k]
                outs = model.out_pipes[side][k]
                outlets = [fields[j][-1, t + 1] for j in ins]
                flows = [m[j, t] for j in ins]
                try:
                    if model.injects(k, side):
                        if side == "supply":
                            exch_supply[k, t] = source_temperatures[k, t]
                        exchanger = sum(m[j, t] for j in outs) - sum(flows)
                        temp = mix_node(outlets, flows, exchanger, exch_temp[side][k, t])
                    else:
                        temp = mix_node(outlets, flows)
                except DegenerateFlowError:
                    if model.demand[k, t] > 0:
                        raise DegenerateFlowError(
                            f"node {model.node_ids[k]}: no flow in period {t + 1}"
                        ) from None
                    temp = _held_temperature(model, fields, node_temp[side], side, k, t)
                node_temp[side][k, t] = temp
                if not model.injects(k, side):
                    exch_temp[side][k, t] = temp
                for j in outs:
                    fields[j][:, t + 1] = advance_pipe(
                        model_coefficients(model, j, t), m[j, t], fields[j][:, t], temp, literal
                    )

    delivered = model.cp * q * (exch_supply - exch_return)
    return ThermalState(
        node_supply=node_supply,
        node_return=node_return,
        exchanger_supply=exch_supply,
        exchanger_return=exch_return,
        fields=fields,
        delivered_heat=delivered,
    )


def _load_return_temperatures(
    model: NetworkModel,
    t: int,
    q: NDArray[np.float64],
    exch_supply: NDArray[np.float64],
    exch_return: NDArray[np.float64],
    given: NDArray[np.float64] | None,
) -> None:
    for k in range(model.n_nodes):
        if model.node_is_source[k]:
            continue
        if given is not None:
            exch_return[k, t] = given[k, t]
        elif q[k, t] > 0:
            exch_return[k, t] = exch_supply[k, t] - model.demand[k, t] / (model.cp * q[k, t])
        elif model.demand[k, t] > 0:
            raise DegenerateFlowError(
                f"node {model.node_ids[k]}: no exchanger flow in period {t + 1}"
            )
        else:
            exch_return[k, t] = exch_supply[k, t]


def _held_temperature(
    model: NetworkModel,
    fields: list[NDArray[np.float64]],
    temps: NDArray[np.float64],
    side: str,
    k: int,
    t: int,
) -> float:
    """Previous-period temperature of a node that receives no flow."""
    if t > 0:
        return float(temps[k, t - 1])
    for j in model.in_pipes[side][k]:
        return float(fields[j][-1, 0])
    for j in model.out_pipes[side][k]:
        return float(fields[j][0, 0])
    return float("nan")
