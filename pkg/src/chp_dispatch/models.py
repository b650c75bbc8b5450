"""Instance schema for CHP dispatch problems.

Defines the immutable problem description read from instance JSON files:
- HeatNode / HeatPipe / HeatNetwork: the district heating supply and return graphs.
- Bus / Line / ElectricNetwork: the DC electric network.
- EnergySource: CHP units, boilers, renewables and tie-lines with polytopes,
  ramps and quadratic costs.
- DispatchInstance: everything above plus horizon, physics and initial state.

Units are SI throughout (W, kg/s, m, s) with temperatures in °C. Values that
vary over the horizon are ``PerPeriod``: a scalar applied to every period or a
list with one entry per period.
"""

import math
from typing import Literal

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field

from chp_dispatch.exceptions import DimensionError

PerPeriod = float | list[float]


def series(value: PerPeriod, periods: int, name: str = "series") -> NDArray[np.float64]:
    """Expand a per-period value to an array of length ``periods``.

    Args:
        value: Scalar (broadcast) or list with one entry per period.
        periods: Horizon length N.
        name: Used in the error message.

    Returns:
        Float array of shape (periods,).

    Raises:
        DimensionError: If a list does not have exactly ``periods`` entries.
    """
    if isinstance(value, list):
        if len(value) != periods:
            raise DimensionError(f"{name}: expected {periods} values, got {len(value)}")
        return np.asarray(value, dtype=float)
    return np.full(periods, float(value))


def series_length_ok(value: PerPeriod, periods: int) -> bool:
    return not isinstance(value, list) or len(value) == periods


class StrictModel(BaseModel):
    """Frozen model rejecting unknown fields, so unit typos fail loudly."""

    model_config = ConfigDict(frozen=True, extra="forbid")


# ─── Heating Network ───


class HeatNode(StrictModel):
    """A heat node: source nodes host heat sources, load nodes draw heat."""

    id: str
    kind: Literal["source", "load"]
    demand: PerPeriod = Field(default=0.0, description="Heat demand h_k,t [W]")
    supply_range: tuple[float, float] | None = Field(
        default=None, description="Optional [min, max] of supply-side temperatures [°C]"
    )
    return_range: tuple[float, float] | None = Field(
        default=None, description="Optional [min, max] of return-side temperatures [°C]"
    )


class HeatPipe(StrictModel):
    """A pipe of the supply or return network (side given by the owning list)."""

    id: str
    from_node: str
    to_node: str
    length: float = Field(gt=0, description="Pipe length x_j [m]")
    area: float = Field(gt=0, description="Cross-sectional area A_j [m²]")
    resistance: float = Field(
        gt=0, description="Thermal conductive coefficient R_j [m·K/W]; inf is lossless"
    )
    m_min: PerPeriod = Field(description="Lower mass flow bound [kg/s]")
    m_max: PerPeriod = Field(description="Upper mass flow bound [kg/s]")
    ambient: PerPeriod = Field(default=10.0, description="Ambient temperature [°C]")
    dx: float | None = Field(default=None, gt=0, description="Segment length override [m]")


class HeatNetwork(StrictModel):
    nodes: list[HeatNode]
    supply_pipes: list[HeatPipe]
    return_pipes: list[HeatPipe]


# ─── Electric Network ───


class Bus(StrictModel):
    id: str
    demand: PerPeriod = Field(default=0.0, description="Electric demand d_i,t [W]")


class Line(StrictModel):
    """A transmission line given by shift factors or by its reactance."""

    id: str
    limit: PerPeriod = Field(description="Flow limit l̄_i,t [W]")
    from_bus: str | None = None
    to_bus: str | None = None
    reactance: float | None = Field(default=None, description="Series reactance [p.u.]")
    shift_factors: list[float] | None = Field(
        default=None, description="Row SF_i,· with one entry per bus"
    )


class ElectricNetwork(StrictModel):
    buses: list[Bus]
    lines: list[Line] = []
    slack_bus: str | None = None


# ─── Energy Sources ───


class PolytopeRow(StrictModel):
    """One half-space p·B + h·K ≤ v of a source's feasible operating region."""

    p: float = 0.0
    h: float = 0.0
    rhs: PerPeriod


class CostCurve(StrictModel):
    """Coefficients of η0 + η1 p + η2 p² + η3 h + η4 h² + η5 p h per period."""

    constant: PerPeriod = 0.0
    p: PerPeriod = 0.0
    p2: PerPeriod = 0.0
    h: PerPeriod = 0.0
    h2: PerPeriod = 0.0
    ph: PerPeriod = 0.0


SourceCategory = Literal[
    "chp", "boiler", "electric_boiler", "heat_pump", "generator", "renewable", "tie_line"
]


class EnergySource(StrictModel):
    """An energy source attached to an electric bus and/or a heat node.

    Electric output ``p`` is net injection: consuming units (electric boilers,
    heat pumps) operate with p ≤ 0 through their polytope rows.
    """

    id: str
    category: SourceCategory = "generator"
    bus: str | None = None
    heat_node: str | None = None
    polytope: list[PolytopeRow] = []
    ramp_p_down: float | None = Field(default=None, description="D_e [W/s], usually < 0")
    ramp_p_up: float | None = Field(default=None, description="U_e [W/s]")
    ramp_h_down: float | None = Field(default=None, description="D_h [W/s], usually < 0")
    ramp_h_up: float | None = Field(default=None, description="U_h [W/s]")
    cost: CostCurve = CostCurve()
    availability: PerPeriod | None = Field(
        default=None, description="Available renewable output [W]"
    )
    curtailment_penalty: PerPeriod = Field(
        default=0.0, description="Penalty per curtailed W in a period [$/W]"
    )

    @property
    def renewable(self) -> bool:
        return self.category == "renewable"


# ─── Instance ───


class Horizon(StrictModel):
    periods: int = Field(ge=1, description="Number of periods N")
    dt: float = Field(gt=0, description="Period length Δt [s]")
    dx: float = Field(gt=0, description="Default segment length Δx [m]")


class Physics(StrictModel):
    rho: float = Field(default=1000.0, gt=0, description="Water density [kg/m³]")
    cp: float = Field(default=4182.0, gt=0, description="Heat capacity [J/(kg·K)]")


class InitialTemperatures(StrictModel):
    """Pipe temperature profiles τ_j(i, 0).

    ``profiles`` maps pipe id to S_j + 1 values (or one value for a flat
    profile). Pipes without an entry receive the steady-state profile for the
    given exchanger temperatures at first-period midpoint flows.
    """

    profiles: dict[str, float | list[float]] = {}
    steady_supply: float | None = Field(default=None, description="Source supply [°C]")
    steady_return: float | None = Field(default=None, description="Load return [°C]")


class DispatchInstance(StrictModel):
    """Immutable description of one dispatch problem."""

    name: str = ""
    description: str = ""
    horizon: Horizon
    physics: Physics = Physics()
    heat_network: HeatNetwork
    electric_network: ElectricNetwork
    sources: list[EnergySource]
    initial_temperatures: InitialTemperatures = InitialTemperatures()

    @property
    def periods(self) -> int:
        return self.horizon.periods

    def with_horizon(self, **changes: float) -> "DispatchInstance":
        """Copy with horizon fields replaced (e.g. a Δx override)."""
        return self.model_copy(update={"horizon": self.horizon.model_copy(update=changes)})


def is_lossless(pipe: HeatPipe) -> bool:
    return math.isinf(pipe.resistance)
