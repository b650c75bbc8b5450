"""CSV files for schedules, flows, temperatures and run logs.

Uses Python's built-in csv module. Floats are written at shortest
round-trip precision so re-reading a file reproduces the arrays exactly.
Flow and source temperature files can be read back for ``simulate`` runs.
"""

import csv
import logging
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from chp_dispatch.exceptions import CSVReadError
from chp_dispatch.harness import ComparisonReport
from chp_dispatch.master import IterationRecord
from chp_dispatch.network import NetworkModel
from chp_dispatch.subproblem import SystemState

logger = logging.getLogger(__name__)

FLOW_COLUMNS = ["pipe", "period", "kg_per_s"]
SCHEDULE_COLUMNS = ["source", "period", "p_W", "h_W"]
TEMPERATURE_COLUMNS = ["pipe", "segment", "period", "temp_C"]
NODE_TEMPERATURE_COLUMNS = ["quantity", "node", "period", "celsius"]
SOURCE_TEMPERATURE_COLUMNS = ["node", "period", "celsius"]
HEAT_COLUMNS = ["node", "period", "W"]
STORAGE_COLUMNS = ["period", "generation_minus_load_W"]
ITERATION_COLUMNS = [
    "k",
    "status",
    "J*",
    "sigma",
    "step_alpha",
    "n_cuts",
    "grad_norm",
    "wallclock_ms",
    "action",
]
COMPARISON_COLUMNS = [
    "mode",
    "status",
    "total_cost",
    "curtailment_wh",
    "curtailment_pct",
    "wallclock_s",
    "iterations",
]
GENERATION_COLUMNS = [
    "period",
    "heat_generation_W",
    "heat_load_W",
    "electric_generation_W",
    "electric_load_W",
]
PURCHASE_COLUMNS = ["period", "source", "purchase_W"]


def _cell(value: object) -> object:
    """Plain Python scalars so csv writes floats at round-trip precision."""
    if isinstance(value, np.generic):
        return value.item()
    return "" if value is None else value


def _write(path: Path, columns: list[str], rows: Iterable[Mapping[str, object]]) -> int:
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, mode="w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({key: _cell(value) for key, value in row.items()})
            count += 1
    logger.debug("Wrote %d rows to %s", count, path)
    return count


def _long_rows(
    ids: list[str], values: NDArray[np.float64], key: str, column: str
) -> Iterable[dict[str, object]]:
    for i, element in enumerate(ids):
        for t in range(values.shape[1]):
            yield {key: element, "period": t + 1, column: float(values[i, t])}


# ─── Writers ───


def write_flows(model: NetworkModel, flows: NDArray[np.float64], path: Path) -> None:
    """Write a flow schedule as (pipe, period, kg_per_s) rows."""
    pipe_ids = [pipe.id for pipe in model.pipes]
    _write(path, FLOW_COLUMNS, _long_rows(pipe_ids, flows, "pipe", "kg_per_s"))


def write_schedules(model: NetworkModel, state: SystemState, path: Path) -> None:
    """Write electric and heat outputs per source and period."""
    rows = (
        {
            "source": source_id,
            "period": t + 1,
            "p_W": float(state.p[s, t]),
            "h_W": float(state.h[s, t]),
        }
        for s, source_id in enumerate(model.source_ids)
        for t in range(model.periods)
    )
    _write(path, SCHEDULE_COLUMNS, rows)


def write_temperatures(
    model: NetworkModel, segments: Sequence[NDArray[np.float64]], path: Path
) -> None:
    """Write pipe temperature fields as (pipe, segment, period, temp_C) rows.

    ``segments[j]`` is τ_j(i, t) of shape (S_j+1, N); segment 0 is the inlet
    and segment S_j the outlet.
    """

    def rows() -> Iterable[dict[str, object]]:
        for pipe, field in zip(model.pipes, segments, strict=True):
            for i in range(field.shape[0]):
                for t in range(field.shape[1]):
                    yield {
                        "pipe": pipe.id,
                        "segment": i,
                        "period": t + 1,
                        "temp_C": float(field[i, t]),
                    }

    _write(path, TEMPERATURE_COLUMNS, rows())


def write_node_temperatures(
    model: NetworkModel, quantities: Mapping[str, NDArray[np.float64]], path: Path
) -> None:
    """Write named node arrays as (quantity, node, period, celsius) rows."""

    def rows() -> Iterable[dict[str, object]]:
        for quantity, values in quantities.items():
            for row in _long_rows(model.node_ids, values, "node", "celsius"):
                yield {"quantity": quantity, **row}

    _write(path, NODE_TEMPERATURE_COLUMNS, rows())


def write_delivered_heat(model: NetworkModel, heat: NDArray[np.float64], path: Path) -> None:
    _write(path, HEAT_COLUMNS, _long_rows(model.node_ids, heat, "node", "W"))


def write_source_temperatures(
    model: NetworkModel, exchanger_supply: NDArray[np.float64], path: Path
) -> None:
    """Write the supply temperatures leaving each source's exchanger."""
    sources = np.flatnonzero(model.node_is_source)
    ids = [model.node_ids[k] for k in sources]
    rows = _long_rows(ids, exchanger_supply[sources], "node", "celsius")
    _write(path, SOURCE_TEMPERATURE_COLUMNS, rows)


def write_storage_proxy(proxy: Iterable[float], path: Path) -> None:
    rows = (
        {"period": t + 1, "generation_minus_load_W": float(value)}
        for t, value in enumerate(proxy)
    )
    _write(path, STORAGE_COLUMNS, rows)


def write_iteration_log(records: list[IterationRecord], path: Path) -> None:
    """One row per master iteration; ``action`` names the loop's reaction."""

    def rows() -> Iterable[dict[str, object]]:
        for record in records:
            row = record.model_dump()
            row["J*"] = row.pop("objective")
            yield row

    _write(path, ITERATION_COLUMNS, rows())


def write_comparison(report: ComparisonReport, path: Path) -> None:
    _write(path, COMPARISON_COLUMNS, (summary.model_dump() for summary in report.modes))
    logger.info("Wrote comparison of %d modes to %s", len(report.modes), path)


def write_generation_vs_load(model: NetworkModel, state: SystemState, path: Path) -> None:
    """Plot data: heat and electric generation against load per period."""
    heat_generation = state.heat[model.node_is_source].sum(axis=0)
    heat_load = model.demand[~model.node_is_source].sum(axis=0)
    attached = model.source_bus >= 0
    generation = state.p[attached].sum(axis=0)
    electric_load = model.bus_demand.sum(axis=0)
    rows = (
        {
            "period": t + 1,
            "heat_generation_W": float(heat_generation[t]),
            "heat_load_W": float(heat_load[t]),
            "electric_generation_W": float(generation[t]),
            "electric_load_W": float(electric_load[t]),
        }
        for t in range(model.periods)
    )
    _write(path, GENERATION_COLUMNS, rows)


def write_grid_purchase(model: NetworkModel, state: SystemState, path: Path) -> None:
    """Plot data: power drawn over tie lines per period."""
    rows = (
        {"period": t + 1, "source": source.id, "purchase_W": float(state.p[s, t])}
        for s, source in enumerate(model.sources)
        if source.category == "tie_line"
        for t in range(model.periods)
    )
    _write(path, PURCHASE_COLUMNS, rows)


# ─── Readers ───


def _read_long(
    path: Path, key: str, column: str, ids: list[str], periods: int
) -> NDArray[np.float64]:
    """Read (key, period, column) rows into an (ids × periods) array.

    Raises:
        CSVReadError: If the file is missing, malformed or incomplete.
    """
    if not path.exists():
        raise CSVReadError(f"Input file not found: {path}")

    index = {element: i for i, element in enumerate(ids)}
    values = np.full((len(ids), periods), np.nan)
    try:
        with open(path, encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f)

            if reader.fieldnames is None:
                raise CSVReadError(f"Empty CSV file: {path}")

            missing = {key, "period", column} - set(reader.fieldnames)
            if missing:
                raise CSVReadError(f"Missing required columns: {missing}")

            for row_num, row in enumerate(reader, start=2):  # Row 1 = header
                element = row[key].strip()
                if element not in index:
                    raise CSVReadError(f"{path}:{row_num}: unknown {key} {element!r}")
                try:
                    t = int(row["period"]) - 1
                    value = float(row[column])
                except ValueError as e:
                    raise CSVReadError(f"{path}:{row_num}: {e}") from e
                if not 0 <= t < periods:
                    raise CSVReadError(f"{path}:{row_num}: period {t + 1} outside 1..{periods}")
                values[index[element], t] = value

    except UnicodeDecodeError as e:
        raise CSVReadError(f"File encoding error in {path}: {e}") from e

    gaps = np.argwhere(np.isnan(values))
    if len(gaps):
        i, t = gaps[0]
        raise CSVReadError(f"{path}: no value for {key} {ids[i]} in period {t + 1}")
    logger.info("Read %d values from %s", values.size, path)
    return values


def read_flows(model: NetworkModel, path: Path) -> NDArray[np.float64]:
    """Read a flow schedule (pipes × periods) written by ``write_flows``."""
    return _read_long(
        path, "pipe", "kg_per_s", [pipe.id for pipe in model.pipes], model.periods
    )


def read_source_temperatures(model: NetworkModel, path: Path) -> NDArray[np.float64]:
    """Read source supply temperatures into a (nodes × periods) array.

    Load rows are NaN; only source nodes are required in the file.
    """
    sources = np.flatnonzero(model.node_is_source)
    ids = [model.node_ids[k] for k in sources]
    values = _read_long(path, "node", "celsius", ids, model.periods)
    temperatures = np.full((model.n_nodes, model.periods), np.nan)
    temperatures[sources] = values
    return temperatures
