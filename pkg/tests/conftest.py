"""Shared pytest fixtures for the CHP dispatch test suite."""

from pathlib import Path

import pytest

from chp_dispatch.master import SolverConfig
from chp_dispatch.models import (
    Bus,
    CostCurve,
    DispatchInstance,
    ElectricNetwork,
    EnergySource,
    HeatNetwork,
    HeatNode,
    HeatPipe,
    Horizon,
    InitialTemperatures,
    Line,
    PolytopeRow,
)
from chp_dispatch.network import NetworkModel

# ─── Sample Data ───

SUPPLY_RANGE = (60.0, 100.0)
RETURN_RANGE = (20.0, 80.0)


def pipe(
    pipe_id: str,
    start: str,
    end: str,
    length: float = 400.0,
    bounds: tuple[float, float] = (5.0, 15.0),
    resistance: float = 0.5,
) -> HeatPipe:
    return HeatPipe(
        id=pipe_id,
        from_node=start,
        to_node=end,
        length=length,
        area=0.01,
        resistance=resistance,
        m_min=bounds[0],
        m_max=bounds[1],
        ambient=10.0,
    )


def boiler(source_id: str, node: str, capacity: float = 5e6) -> EnergySource:
    return EnergySource(
        id=source_id,
        category="boiler",
        heat_node=node,
        polytope=[PolytopeRow(h=1.0, rhs=capacity), PolytopeRow(h=-1.0, rhs=0.0)],
        cost=CostCurve(h=3e-5, h2=1e-12),
    )


def generator(source_id: str, bus: str, capacity: float = 2e6, price: float = 2e-5) -> EnergySource:
    return EnergySource(
        id=source_id,
        category="generator",
        bus=bus,
        polytope=[PolytopeRow(p=1.0, rhs=capacity), PolytopeRow(p=-1.0, rhs=0.0)],
        cost=CostCurve(p=price, p2=1e-12),
    )


def two_node_instance(
    periods: int = 3,
    demand: float | list[float] = 1e6,
    bounds: tuple[float, float] = (5.0, 15.0),
    sources: list[EnergySource] | None = None,
    bus_demand: float | list[float] = 5e5,
) -> DispatchInstance:
    """A source node feeding one load through a supply and a return pipe."""
    return DispatchInstance(
        name="two_node",
        horizon=Horizon(periods=periods, dt=600.0, dx=200.0),
        heat_network=HeatNetwork(
            nodes=[
                HeatNode(
                    id="S", kind="source", supply_range=SUPPLY_RANGE, return_range=RETURN_RANGE
                ),
                HeatNode(
                    id="L",
                    kind="load",
                    demand=demand,
                    supply_range=SUPPLY_RANGE,
                    return_range=RETURN_RANGE,
                ),
            ],
            supply_pipes=[pipe("S1", "S", "L", bounds=bounds)],
            return_pipes=[pipe("R1", "L", "S", bounds=bounds)],
        ),
        electric_network=ElectricNetwork(buses=[Bus(id="B1", demand=bus_demand)]),
        sources=sources if sources is not None else [boiler("B", "S"), generator("G", "B1")],
        initial_temperatures=InitialTemperatures(steady_supply=80.0, steady_return=50.0),
    )


def line_instance() -> DispatchInstance:
    """A source feeding two loads in series, S → A → B, over four periods."""
    return DispatchInstance(
        name="line",
        horizon=Horizon(periods=4, dt=600.0, dx=200.0),
        heat_network=HeatNetwork(
            nodes=[
                HeatNode(
                    id="S", kind="source", supply_range=SUPPLY_RANGE, return_range=RETURN_RANGE
                ),
                HeatNode(
                    id="A", kind="load", demand=[3e5, 4e5, 5e5, 3.5e5], return_range=RETURN_RANGE
                ),
                HeatNode(id="B", kind="load", demand=3e5, return_range=RETURN_RANGE),
            ],
            supply_pipes=[
                pipe("SA", "S", "A", bounds=(10.0, 30.0)),
                pipe("AB", "A", "B", length=600.0),
            ],
            return_pipes=[
                pipe("AS", "A", "S", bounds=(10.0, 30.0)),
                pipe("BA", "B", "A", length=600.0),
            ],
        ),
        electric_network=ElectricNetwork(buses=[Bus(id="B1", demand=5e5)]),
        sources=[boiler("H", "S"), generator("G", "B1")],
        initial_temperatures=InitialTemperatures(steady_supply=85.0, steady_return=50.0),
    )


def y_instance(periods: int = 2) -> DispatchInstance:
    """One source splitting into two loads, with a CHP unit and a 3-bus grid."""
    chp = EnergySource(
        id="CHP",
        category="chp",
        bus="B1",
        heat_node="S",
        polytope=[
            PolytopeRow(p=1.0, h=0.2, rhs=3e6),
            PolytopeRow(p=-1.0, rhs=-2e5),
            PolytopeRow(h=-1.0, rhs=0.0),
            PolytopeRow(h=1.0, rhs=2e6),
        ],
        ramp_p_down=-1000.0,
        ramp_p_up=1000.0,
        cost=CostCurve(constant=10.0, p=2e-5, p2=5e-13, h=4e-6, h2=3e-13, ph=1e-13),
    )
    wind = EnergySource(
        id="W",
        category="renewable",
        bus="B3",
        polytope=[PolytopeRow(p=-1.0, rhs=0.0)],
        availability=8e5,
        curtailment_penalty=5e-6,
    )
    return DispatchInstance(
        name="y_network",
        horizon=Horizon(periods=periods, dt=600.0, dx=200.0),
        heat_network=HeatNetwork(
            nodes=[
                HeatNode(id="S", kind="source", supply_range=SUPPLY_RANGE),
                HeatNode(id="J", kind="load", demand=2e5, return_range=RETURN_RANGE),
                HeatNode(id="A", kind="load", demand=4e5, return_range=RETURN_RANGE),
                HeatNode(id="C", kind="load", demand=3e5, return_range=RETURN_RANGE),
            ],
            supply_pipes=[
                pipe("SJ", "S", "J", bounds=(20.0, 40.0)),
                pipe("JA", "J", "A", length=600.0),
                pipe("JC", "J", "C", length=200.0),
            ],
            return_pipes=[
                pipe("JS", "J", "S", bounds=(20.0, 40.0)),
                pipe("AJ", "A", "J", length=600.0),
                pipe("CJ", "C", "J", length=200.0),
            ],
        ),
        electric_network=ElectricNetwork(
            buses=[Bus(id="B1"), Bus(id="B2", demand=1.2e6), Bus(id="B3")],
            lines=[
                Line(id="L12", from_bus="B1", to_bus="B2", reactance=0.1, limit=5e6),
                Line(id="L23", from_bus="B2", to_bus="B3", reactance=0.1, limit=5e6),
                Line(id="L13", from_bus="B1", to_bus="B3", reactance=0.1, limit=5e6),
            ],
            slack_bus="B1",
        ),
        sources=[chp, wind, generator("G2", "B2")],
        initial_temperatures=InitialTemperatures(steady_supply=85.0, steady_return=45.0),
    )


@pytest.fixture
def two_node() -> DispatchInstance:
    return two_node_instance()


@pytest.fixture
def two_node_model(two_node: DispatchInstance) -> NetworkModel:
    return NetworkModel.from_instance(two_node)


@pytest.fixture
def y_model() -> NetworkModel:
    return NetworkModel.from_instance(y_instance())


@pytest.fixture
def starved_model() -> NetworkModel:
    """No flow inside the bounds can carry 1 MW within the temperature ranges."""
    return NetworkModel.from_instance(two_node_instance(bounds=(0.5, 1.0)))


@pytest.fixture
def config() -> SolverConfig:
    return SolverConfig(max_iterations=8)


@pytest.fixture
def instance_file(tmp_path: Path, two_node: DispatchInstance) -> Path:
    """The two-node instance written as JSON."""
    path = tmp_path / "two_node.json"
    path.write_text(two_node.model_dump_json(indent=2), encoding="utf-8")
    return path
