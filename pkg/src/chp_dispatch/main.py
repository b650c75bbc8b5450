"""Entry point for the CHP dispatch engine.

Orchestrates a batch study:
1. Load configuration from environment and command line
2. Read and validate the instance file
3. Run the selected dispatch mode (async, modes run concurrently in compare)
4. Write result.json and the CSV artifacts to the output directory

Usage:
    chp-dispatch run --instance src/chp_dispatch/instances/six_node.json --mode variable
    chp-dispatch compare --instance src/chp_dispatch/instances/six_node.json --out results/compare
    chp-dispatch simulate --instance FILE --flows flows.csv --source-temps temps.csv
"""

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ValidationError, model_validator

from chp_dispatch import csv_handler
from chp_dispatch.config import BUNDLED_INSTANCE, Settings
from chp_dispatch.exceptions import ChpDispatchError, InstanceError
from chp_dispatch.harness import (
    ComparisonReport,
    VerificationReport,
    compare_modes,
    curtailment,
    fixed_flow_dispatch,
    separate_dispatch,
    storage_proxy,
    verify_solution,
)
from chp_dispatch.master import DispatchResult, SolverConfig, dispatch
from chp_dispatch.models import DispatchInstance
from chp_dispatch.network import NetworkModel, validate
from chp_dispatch.subproblem import SystemState
from chp_dispatch.thermal import ThermalState, simulate_network

# ─── Logging Configuration ───
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s | %(levelname)-8s | %(name)s | %(message)s",
    datefmt="%Y-%m-%d %H:%M:%S",
)
logger = logging.getLogger(__name__)

Mode = Literal["variable", "fixed", "separate", "compare"]

EXIT_FEASIBLE = 0
EXIT_ERROR = 1
EXIT_INFEASIBLE = 2


class RunConfig(BaseModel):
    """One command-line invocation."""

    command: Literal["run", "simulate", "compare"]
    instance: Path
    mode: Mode = "variable"
    gamma: float = 0.3
    delta: float = 1e-4
    max_iterations: int = 50
    infeasible_stop: int = 3
    dx: float | None = None
    output_dir: Path
    flows: Path | None = None
    source_temps: Path | None = None
    literal_coefficients: bool = False
    literal_stepsize: bool = False
    dump_lp: Path | None = None
    emit_plots: bool = False

    @model_validator(mode="after")
    def _inputs_present(self) -> "RunConfig":
        if self.command == "simulate" and (self.flows is None or self.source_temps is None):
            raise ValueError("simulate needs --flows and --source-temps")
        if self.command == "compare":
            self.mode = "compare"
        if self.dump_lp is not None and self.mode in ("separate", "compare"):
            raise ValueError("--dump-lp needs the variable or fixed mode")
        return self

    def solver_config(self, settings: Settings) -> SolverConfig:
        return SolverConfig(
            gamma=self.gamma,
            delta=self.delta,
            max_iterations=self.max_iterations,
            infeasible_stop=self.infeasible_stop,
            literal_coefficients=self.literal_coefficients,
            literal_stepsize=self.literal_stepsize,
            solver=settings.solver,
            solver_tolerance=settings.solver_tolerance,
        )


class RunSummary(BaseModel):
    """Contents of result.json for one mode."""

    mode: str
    status: str
    objective: float | None = None
    iterations: int = 0
    termination: str = ""
    n_cuts: int = 0
    sigma: float | None = None
    diagnosis: dict[str, float] = {}
    wallclock_s: float = 0.0
    curtailment_wh: float | None = None
    curtailment_pct: float | None = None
    verification: VerificationReport | None = None


# ─── Command Line ───


def build_parser(settings: Settings) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chp-dispatch",
        description="Combined heat and power dispatch with variable heating-network mass flow.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    def common(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--instance", type=Path, default=BUNDLED_INSTANCE)
        sub.add_argument("--out", dest="output_dir", type=Path, default=settings.output_dir)
        sub.add_argument("--dx", type=float, help="Override the segment length Δx [m]")
        sub.add_argument(
            "--paper-literal-coefficients",
            "--literal-coefficients",
            dest="literal_coefficients",
            action="store_true",
            help="Use the (a·m + b) left factor of the pipe scheme",
        )

    def solver(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--gamma", type=float, default=0.3, help="Desired reduction rate")
        sub.add_argument("--delta", type=float, default=1e-4, help="Convergence tolerance")
        sub.add_argument("--max-iter", dest="max_iterations", type=int, default=50)
        sub.add_argument("--infeasible-stop", type=int, default=3)
        sub.add_argument(
            "--paper-literal-stepsize",
            "--literal-stepsize",
            dest="literal_stepsize",
            action="store_true",
            help="Use the signed −γJ* step numerator",
        )
        sub.add_argument("--dump-lp", type=Path, help="Write each iteration's program here")
        sub.add_argument("--emit-plots", action="store_true")

    run_parser = subparsers.add_parser("run", help="Solve one dispatch mode")
    common(run_parser)
    solver(run_parser)
    run_parser.add_argument(
        "--mode", choices=["variable", "fixed", "separate", "compare"], default="variable"
    )
    run_parser.add_argument("--flows", type=Path, help="Flow schedule CSV (fixed mode)")

    compare_parser = subparsers.add_parser("compare", help="Run and compare all modes")
    common(compare_parser)
    solver(compare_parser)

    simulate_parser = subparsers.add_parser("simulate", help="Forward-simulate temperatures")
    common(simulate_parser)
    simulate_parser.add_argument("--flows", type=Path, required=True)
    simulate_parser.add_argument("--source-temps", type=Path, required=True)
    return parser


def parse_args(argv: list[str] | None, settings: Settings) -> RunConfig:
    namespace = build_parser(settings).parse_args(argv)
    return RunConfig(**{k: v for k, v in vars(namespace).items() if v is not None})


# ─── Pipeline ───


def load_instance(path: Path) -> DispatchInstance:
    """Parse and validate an instance file.

    Raises:
        InstanceError: If the file is unreadable, breaks the schema, or
            violates any network invariant. All problems are listed.
    """
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise InstanceError(f"Cannot read instance {path}: {e}") from e
    try:
        instance = DispatchInstance.model_validate_json(text)
    except ValidationError as e:
        problems = [
            f"{'.'.join(str(part) for part in error['loc'])}: {error['msg']}"
            for error in e.errors()
        ]
        raise InstanceError(f"{path}: invalid instance", problems) from e

    report = validate(instance)
    if not report.ok:
        raise InstanceError(
            f"{path}: {len(report.violations)} violation(s): " + "; ".join(report.violations),
            report.violations,
        )
    logger.info("Loaded instance %r from %s", instance.name or path.stem, path)
    return instance


def write_result(
    model: NetworkModel,
    result: DispatchResult,
    out: Path,
    emit_plots: bool,
    literal: bool,
) -> RunSummary:
    """Write result.json and every CSV artifact of one mode."""
    out.mkdir(parents=True, exist_ok=True)
    summary = RunSummary(
        mode=result.mode,
        status=result.status,
        objective=result.objective,
        iterations=len(result.iterations),
        termination=result.termination,
        n_cuts=result.n_cuts,
        sigma=result.sigma,
        diagnosis=result.diagnosis,
        wallclock_s=result.wallclock_s,
    )
    if result.iterations:
        csv_handler.write_iteration_log(result.iterations, out / "iteration_log.csv")

    state = result.state
    if result.feasible and state is not None:
        verification = verify_solution(model, result, literal=literal)
        curtailed_wh, curtailed_pct = curtailment(model, state.p)
        summary = summary.model_copy(
            update={
                "verification": verification,
                "curtailment_wh": curtailed_wh,
                "curtailment_pct": curtailed_pct,
            }
        )
        proxy = storage_proxy(model, state)
        csv_handler.write_schedules(model, state, out / "schedules.csv")
        csv_handler.write_delivered_heat(model, state.heat, out / "delivered_heat.csv")
        csv_handler.write_storage_proxy(proxy, out / "storage_proxy.csv")
        if result.flows is not None:
            csv_handler.write_flows(model, result.flows, out / "flows.csv")
            csv_handler.write_temperatures(model, state.segments, out / "temperatures.csv")
            csv_handler.write_node_temperatures(
                model, _node_quantities(state), out / "node_temperatures.csv"
            )
            csv_handler.write_source_temperatures(
                model, state.exchanger_supply, out / "source_temperatures.csv"
            )
        if emit_plots:
            plots = out / "plots"
            csv_handler.write_generation_vs_load(model, state, plots / "generation_vs_load.csv")
            csv_handler.write_grid_purchase(model, state, plots / "grid_purchase.csv")
            csv_handler.write_storage_proxy(proxy, plots / "storage_proxy.csv")

    (out / "result.json").write_text(summary.model_dump_json(indent=2), encoding="utf-8")
    logger.info("Wrote %s results to %s", result.mode, out)
    return summary


def _node_quantities(state: SystemState | ThermalState) -> dict[str, np.ndarray]:
    return {
        "node_supply": state.node_supply,
        "node_return": state.node_return,
        "exchanger_supply": state.exchanger_supply,
        "exchanger_return": state.exchanger_return,
    }


def _read_nominal(config: RunConfig, model: NetworkModel) -> np.ndarray | None:
    if config.flows is None:
        return None
    return csv_handler.read_flows(model, config.flows)


async def run(config: RunConfig, settings: Settings) -> int:
    """Execute one command and return its exit code.

    Args:
        config: Parsed command line.
        settings: Environment settings (solver, concurrency).

    Returns:
        0 when a feasible dispatch was written, 2 when none exists.
    """
    instance = load_instance(config.instance)
    if config.dx is not None:
        instance = instance.with_horizon(dx=config.dx)
    model = NetworkModel.from_instance(instance)
    out = config.output_dir

    if config.command == "simulate":
        flows = csv_handler.read_flows(model, config.flows)
        temperatures = csv_handler.read_source_temperatures(model, config.source_temps)
        state = simulate_network(model, flows, temperatures, literal=config.literal_coefficients)
        segments = [field[:, 1:] for field in state.fields]
        csv_handler.write_temperatures(model, segments, out / "temperatures.csv")
        csv_handler.write_node_temperatures(
            model, _node_quantities(state), out / "node_temperatures.csv"
        )
        csv_handler.write_delivered_heat(model, state.delivered_heat, out / "delivered_heat.csv")
        logger.info("✅ Simulation complete! Results saved to: %s", out)
        return EXIT_FEASIBLE

    solver_config = config.solver_config(settings)
    literal = config.literal_coefficients

    if config.mode == "compare":
        report: ComparisonReport = await compare_modes(
            model, solver_config, settings.max_concurrency
        )
        for mode, result in report.results.items():
            write_result(model, result, out / mode, config.emit_plots, literal)
        csv_handler.write_comparison(report, out / "comparison.csv")
        (out / "result.json").write_text(report.model_dump_json(indent=2), encoding="utf-8")
        logger.info("✅ Comparison complete! Results saved to: %s", out)
        feasible = any(r.feasible for r in report.results.values())
        return EXIT_FEASIBLE if feasible else EXIT_INFEASIBLE

    nominal = _read_nominal(config, model)
    match config.mode:
        case "variable":
            result = await asyncio.to_thread(
                dispatch, model, solver_config, nominal, config.dump_lp
            )
        case "fixed":
            result = await asyncio.to_thread(
                fixed_flow_dispatch, model, nominal, solver_config, config.dump_lp
            )
        case _:
            result = await asyncio.to_thread(separate_dispatch, model, solver_config)

    summary = write_result(model, result, out, config.emit_plots, literal)
    if not result.feasible:
        logger.error("No feasible dispatch: %s", result.diagnosis or result.termination)
        return EXIT_INFEASIBLE
    logger.info(
        "✅ %s dispatch complete! Cost %.2f, results saved to: %s",
        result.mode.capitalize(),
        summary.objective,
        out,
    )
    return EXIT_FEASIBLE


def _write_error(out: Path, error: BaseException) -> None:
    payload = {"error": type(error).__name__, "message": str(error)}
    if isinstance(error, InstanceError):
        payload["violations"] = error.violations
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "error.json").write_text(json.dumps(payload, indent=2), encoding="utf-8")
    except OSError as e:
        logger.error("Could not write error.json: %s", e)


def main(argv: list[str] | None = None) -> None:
    """Application entry point. Parses arguments and runs the selected command."""
    settings = Settings()
    logging.getLogger().setLevel(settings.log_level.upper())
    out = settings.output_dir
    try:
        config = parse_args(argv, settings)
        out = config.output_dir
        sys.exit(asyncio.run(run(config, settings)))

    except ChpDispatchError as e:
        logger.error("❌ %s", e)
        _write_error(out, e)
        sys.exit(EXIT_ERROR)
    except ValidationError as e:
        logger.error("❌ Invalid arguments: %s", e)
        _write_error(out, e)
        sys.exit(EXIT_ERROR)
    except KeyboardInterrupt:
        logger.info("Operation cancelled by user.")
        sys.exit(0)
    except Exception as e:
        logger.error("❌ Unexpected error: %s", e, exc_info=True)
        _write_error(out, e)
        sys.exit(EXIT_ERROR)
