"""Integration tests for the command pipeline.

Each test calls `main.run()` (or `main.main()`) the way the CLI does, on an
instance written to a temporary directory, and inspects the files it writes.
"""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

import chp_dispatch
from chp_dispatch.config import BUNDLED_INSTANCE, Settings
from chp_dispatch.exceptions import InstanceError
from chp_dispatch.main import (
    EXIT_ERROR,
    EXIT_FEASIBLE,
    EXIT_INFEASIBLE,
    RunConfig,
    load_instance,
    main,
    parse_args,
    run,
)
from chp_dispatch.network import validate
from tests.conftest import two_node_instance


def read_rows(path: Path) -> list[dict[str, str]]:
    with open(path, encoding="utf-8") as f:
        return list(csv.DictReader(f))


@pytest.fixture
def settings(tmp_path: Path) -> Settings:
    return Settings(output_dir=tmp_path / "results", max_concurrency=2)


class TestParseArgs:
    def test_run_defaults(self, settings: Settings) -> None:
        config = parse_args(["run"], settings)
        assert config.mode == "variable"
        assert config.instance == BUNDLED_INSTANCE
        assert config.output_dir == settings.output_dir

    def test_compare_forces_mode(self, settings: Settings) -> None:
        assert parse_args(["compare", "--gamma", "0.2"], settings).mode == "compare"

    def test_simulate_needs_inputs(self, tmp_path: Path) -> None:
        with pytest.raises(ValueError, match="simulate needs"):
            RunConfig(command="simulate", instance=tmp_path, output_dir=tmp_path)

    def test_literal_flags_and_aliases(self, settings: Settings) -> None:
        config = parse_args(
            ["run", "--paper-literal-coefficients", "--paper-literal-stepsize"], settings
        )
        assert config.literal_coefficients and config.literal_stepsize
        solver = config.solver_config(settings)
        assert solver.literal_coefficients and solver.literal_stepsize

        short = parse_args(["run", "--literal-coefficients", "--literal-stepsize"], settings)
        assert short.literal_coefficients and short.literal_stepsize
        assert not parse_args(["run"], settings).literal_stepsize

    def test_dump_lp_rejected_without_single_program(
        self, settings: Settings, tmp_path: Path
    ) -> None:
        with pytest.raises(ValueError, match="--dump-lp needs"):
            parse_args(["compare", "--dump-lp", str(tmp_path)], settings)
        with pytest.raises(ValueError, match="--dump-lp needs"):
            parse_args(["run", "--mode", "separate", "--dump-lp", str(tmp_path)], settings)
        fixed = parse_args(["run", "--mode", "fixed", "--dump-lp", str(tmp_path)], settings)
        assert fixed.dump_lp == tmp_path


class TestLoadInstance:
    def test_bundled_instance_is_valid(self) -> None:
        instance = load_instance(BUNDLED_INSTANCE)
        assert instance.horizon.periods == 24
        assert validate(instance).ok

    def test_bundled_instance_ships_with_package(self) -> None:
        assert BUNDLED_INSTANCE.is_file()
        assert BUNDLED_INSTANCE.parent.parent == Path(chp_dispatch.__file__).resolve().parent

    def test_violations_are_listed(self, tmp_path: Path) -> None:
        path = tmp_path / "bad.json"
        path.write_text(two_node_instance(demand=-1.0).model_dump_json(), encoding="utf-8")
        with pytest.raises(InstanceError) as excinfo:
            load_instance(path)
        assert "node L: negative demand" in excinfo.value.violations

    def test_schema_errors(self, tmp_path: Path) -> None:
        path = tmp_path / "broken.json"
        path.write_text('{"name": "broken"}', encoding="utf-8")
        with pytest.raises(InstanceError, match="invalid instance"):
            load_instance(path)

    def test_missing_file(self, tmp_path: Path) -> None:
        with pytest.raises(InstanceError, match="Cannot read"):
            load_instance(tmp_path / "absent.json")


class TestRunCommand:
    """The run and compare commands end to end."""

    @pytest.mark.asyncio
    async def test_variable_mode_writes_artifacts(
        self, instance_file: Path, settings: Settings, tmp_path: Path
    ) -> None:
        out = tmp_path / "variable"
        config = RunConfig(
            command="run",
            instance=instance_file,
            max_iterations=6,
            output_dir=out,
            emit_plots=True,
        )
        assert await run(config, settings) == EXIT_FEASIBLE

        result = json.loads((out / "result.json").read_text(encoding="utf-8"))
        assert result["mode"] == "variable"
        assert result["status"] == "feasible"
        assert result["verification"]["passed"]
        for name in (
            "iteration_log.csv",
            "schedules.csv",
            "delivered_heat.csv",
            "storage_proxy.csv",
            "flows.csv",
            "temperatures.csv",
            "node_temperatures.csv",
            "source_temperatures.csv",
            "plots/generation_vs_load.csv",
            "plots/grid_purchase.csv",
        ):
            assert (out / name).exists(), name
        assert len(read_rows(out / "iteration_log.csv")) == result["iterations"]

    @pytest.mark.asyncio
    async def test_fixed_mode_reads_schedule(
        self, instance_file: Path, settings: Settings, tmp_path: Path
    ) -> None:
        flows = tmp_path / "flows.csv"
        with open(flows, "w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["pipe", "period", "kg_per_s"])
            writer.writeheader()
            for pipe_id in ("S1", "R1"):
                writer.writerows(
                    {"pipe": pipe_id, "period": t, "kg_per_s": 12.0} for t in (1, 2, 3)
                )
        out = tmp_path / "fixed"
        config = RunConfig(
            command="run", instance=instance_file, mode="fixed", flows=flows, output_dir=out
        )
        assert await run(config, settings) == EXIT_FEASIBLE
        rows = read_rows(out / "flows.csv")
        assert {float(row["kg_per_s"]) for row in rows} == {12.0}

    @pytest.mark.asyncio
    async def test_single_iteration_returns_start(
        self, instance_file: Path, settings: Settings, tmp_path: Path
    ) -> None:
        out = tmp_path / "single"
        config = RunConfig(command="run", instance=instance_file, max_iterations=1, output_dir=out)
        assert await run(config, settings) == EXIT_FEASIBLE

        result = json.loads((out / "result.json").read_text(encoding="utf-8"))
        assert result["iterations"] == 1
        assert result["termination"] == "max_iterations"
        flows = np.array([float(row["kg_per_s"]) for row in read_rows(out / "flows.csv")])
        np.testing.assert_allclose(flows, 10.0, atol=1e-9)

    @pytest.mark.asyncio
    async def test_fixed_mode_dumps_program(
        self, instance_file: Path, settings: Settings, tmp_path: Path
    ) -> None:
        dump = tmp_path / "lp"
        config = RunConfig(
            command="run",
            instance=instance_file,
            mode="fixed",
            output_dir=tmp_path / "fixed",
            dump_lp=dump,
        )
        assert await run(config, settings) == EXIT_FEASIBLE
        assert [path.name for path in dump.iterdir()] == ["iter_0001.lp"]

    @pytest.mark.asyncio
    async def test_starved_instance_exits_infeasible(
        self, settings: Settings, tmp_path: Path
    ) -> None:
        path = tmp_path / "starved.json"
        path.write_text(
            two_node_instance(bounds=(0.5, 1.0)).model_dump_json(), encoding="utf-8"
        )
        out = tmp_path / "starved"
        config = RunConfig(command="run", instance=path, output_dir=out)
        assert await run(config, settings) == EXIT_INFEASIBLE

        result = json.loads((out / "result.json").read_text(encoding="utf-8"))
        assert result["status"] == "infeasible"
        assert result["termination"] == "infeasible_limit"
        assert "temperature_bounds" in result["diagnosis"]
        assert not (out / "schedules.csv").exists()

    @pytest.mark.asyncio
    async def test_compare_writes_every_mode(
        self, instance_file: Path, settings: Settings, tmp_path: Path
    ) -> None:
        out = tmp_path / "compare"
        config = RunConfig(
            command="compare", instance=instance_file, max_iterations=6, output_dir=out
        )
        assert await run(config, settings) == EXIT_FEASIBLE

        rows = read_rows(out / "comparison.csv")
        assert [row["mode"] for row in rows] == ["variable", "fixed", "separate"]
        for mode in ("variable", "fixed", "separate"):
            assert (out / mode / "result.json").exists()
        assert not (out / "separate" / "flows.csv").exists()
        report = json.loads((out / "result.json").read_text(encoding="utf-8"))
        assert "fixed-variable" in report["deltas"]


class TestSimulateCommand:
    @pytest.mark.asyncio
    async def test_replays_written_schedule(
        self, instance_file: Path, settings: Settings, tmp_path: Path
    ) -> None:
        solved = tmp_path / "solved"
        fixed = RunConfig(command="run", instance=instance_file, mode="fixed", output_dir=solved)
        assert await run(fixed, settings) == EXIT_FEASIBLE

        out = tmp_path / "simulated"
        config = RunConfig(
            command="simulate",
            instance=instance_file,
            flows=solved / "flows.csv",
            source_temps=solved / "source_temperatures.csv",
            output_dir=out,
        )
        assert await run(config, settings) == EXIT_FEASIBLE

        optimized = {
            (row["pipe"], row["segment"], row["period"]): float(row["temp_C"])
            for row in read_rows(solved / "temperatures.csv")
        }
        replayed = read_rows(out / "temperatures.csv")
        assert list(replayed[0]) == ["pipe", "segment", "period", "temp_C"]
        assert len(replayed) == len(optimized)
        for row in replayed:
            key = (row["pipe"], row["segment"], row["period"])
            assert float(row["temp_C"]) == pytest.approx(optimized[key], abs=1e-6)
        assert (out / "node_temperatures.csv").exists()


class TestMain:
    def test_invalid_instance_writes_error_json(
        self, tmp_path: Path, monkeypatch: pytest.MonkeyPatch
    ) -> None:
        monkeypatch.delenv("CHP_OUTPUT_DIR", raising=False)
        path = tmp_path / "bad.json"
        path.write_text(two_node_instance(demand=-1.0).model_dump_json(), encoding="utf-8")
        out = tmp_path / "out"

        with pytest.raises(SystemExit) as excinfo:
            main(["run", "--instance", str(path), "--out", str(out)])

        assert excinfo.value.code == EXIT_ERROR
        payload = json.loads((out / "error.json").read_text(encoding="utf-8"))
        assert payload["error"] == "InstanceError"
        assert "node L: negative demand" in payload["violations"]
