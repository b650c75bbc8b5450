"""Tests for the baseline modes, verification and the gradient oracle."""

import time
from pathlib import Path
from typing import Any

import numpy as np
import pytest

from chp_dispatch.config import BUNDLED_INSTANCE
from chp_dispatch.exceptions import ChpDispatchError
from chp_dispatch.harness import (
    MODES,
    compare_modes,
    curtailment,
    finite_difference_gradient,
    fixed_flow_dispatch,
    operating_cost,
    separate_dispatch,
    storage_proxy,
    verify_solution,
)
from chp_dispatch.master import DispatchResult, SolverConfig, dispatch
from chp_dispatch.models import DispatchInstance
from chp_dispatch.network import NetworkModel
from chp_dispatch.subproblem import build_subproblem, solve_subproblem
from tests.conftest import boiler, generator, line_instance, two_node_instance


class TestCostAccounting:
    def test_operating_cost(self, two_node_model: NetworkModel) -> None:
        p = np.array([[0.0] * 3, [5e5] * 3])
        h = np.array([[1e6] * 3, [0.0] * 3])
        assert operating_cost(two_node_model, p, h) == pytest.approx(3 * (31.0 + 10.25))

    def test_curtailment(self, y_model: NetworkModel) -> None:
        p = np.zeros((3, 2))
        p[1] = 6e5
        curtailed_wh, share = curtailment(y_model, p)
        assert curtailed_wh == pytest.approx(2 * 2e5 * 600.0 / 3600.0)
        assert share == pytest.approx(25.0)

    def test_curtailment_penalty_in_cost(self, y_model: NetworkModel) -> None:
        p, h = np.zeros((3, 2)), np.zeros((3, 2))
        full = p.copy()
        full[1] = 8e5
        partial = p.copy()
        partial[1] = 6e5
        gap = operating_cost(y_model, partial, h) - operating_cost(y_model, full, h)
        assert gap == pytest.approx(2 * 2e5 * 5e-6)

    def test_no_renewables_no_curtailment(self, two_node_model: NetworkModel) -> None:
        assert curtailment(two_node_model, np.zeros((2, 3))) == (0.0, 0.0)


class TestFixedFlowDispatch:
    """One solve at a held schedule."""

    def test_feasible_and_verified(self, two_node_model: NetworkModel) -> None:
        result = fixed_flow_dispatch(two_node_model)
        assert result.feasible
        assert result.termination == "single_solve"
        np.testing.assert_allclose(result.flows, two_node_model.midpoint_flows())
        report = verify_solution(two_node_model, result)
        assert report.passed, report.failing
        assert report.simulator_deviation <= 1e-6

    def test_storage_proxy_is_loss_cover(self, two_node_model: NetworkModel) -> None:
        result = fixed_flow_dispatch(two_node_model)
        proxy = storage_proxy(two_node_model, result.state)
        assert proxy.shape == (3,)
        assert proxy.sum() >= -1e-3

    def test_infeasible_schedule_reports_diagnosis(self, starved_model: NetworkModel) -> None:
        result = fixed_flow_dispatch(starved_model)
        assert not result.feasible
        assert "temperature_bounds" in result.diagnosis

    def test_dump_dir_receives_program(self, two_node_model: NetworkModel, tmp_path: Path) -> None:
        result = fixed_flow_dispatch(two_node_model, dump_dir=tmp_path / "lp")
        assert result.feasible
        text = (tmp_path / "lp" / "iter_0001.lp").read_text(encoding="utf-8")
        assert text.startswith("\\ two_node")


class TestSeparateDispatch:
    """Heat follows load, then electricity at fixed heat."""

    def test_costs_without_network(self, two_node_model: NetworkModel) -> None:
        result = separate_dispatch(two_node_model)
        assert result.feasible
        assert result.termination == "two_stage"
        assert result.flows is None
        np.testing.assert_allclose(result.state.h[0], 1e6, rtol=1e-6)
        assert result.objective == pytest.approx(3 * (31.0 + 10.25), rel=1e-6)
        assert np.isnan(result.state.node_supply).all()

    def test_verification_uses_heat_balance(self, two_node_model: NetworkModel) -> None:
        report = verify_solution(two_node_model, separate_dispatch(two_node_model))
        assert report.passed
        assert "heat_balance" in report.violations
        assert report.simulator_deviation is None

    def test_heat_stage_infeasible(self) -> None:
        small = two_node_instance(sources=[boiler("B", "S", capacity=5e5), generator("G", "B1")])
        result = separate_dispatch(NetworkModel.from_instance(small))
        assert not result.feasible
        assert result.termination == "heat_stage"


class TestVerifySolution:
    def test_rejects_infeasible_result(self, two_node_model: NetworkModel) -> None:
        with pytest.raises(ChpDispatchError, match="feasible"):
            verify_solution(two_node_model, DispatchResult(mode="fixed", status="infeasible"))

    def test_detects_power_imbalance(self, two_node_model: NetworkModel) -> None:
        result = fixed_flow_dispatch(two_node_model)
        tampered = result.state.model_copy(update={"p": result.state.p * 1.1})
        report = verify_solution(two_node_model, result.model_copy(update={"state": tampered}))
        assert not report.passed
        assert "power_balance" in report.failing

    def test_detects_temperature_tampering(self, two_node_model: NetworkModel) -> None:
        result = fixed_flow_dispatch(two_node_model)
        hotter = result.state.node_supply + np.array([[0.0], [0.5]])
        tampered = result.state.model_copy(update={"node_supply": hotter})
        report = verify_solution(two_node_model, result.model_copy(update={"state": tampered}))
        assert "mixing_supply" in report.failing
        assert "simulator" in report.failing


class TestCompareModes:
    """All modes concurrently."""

    @pytest.mark.asyncio
    async def test_variable_never_worse_than_fixed(
        self, two_node_model: NetworkModel, config: SolverConfig
    ) -> None:
        report = await compare_modes(two_node_model, config, max_concurrency=2)
        assert [summary.mode for summary in report.modes] == list(MODES)
        assert all(summary.status == "feasible" for summary in report.modes)
        variable = report.summary("variable").total_cost
        fixed = report.summary("fixed").total_cost
        assert variable <= fixed + 1e-6 * abs(fixed)
        assert report.deltas["fixed-variable"] >= -1e-4
        assert "separate-fixed" in report.deltas

    def test_pinned_flows_make_variable_equal_fixed(self, config: SolverConfig) -> None:
        model = NetworkModel.from_instance(two_node_instance(bounds=(10.0, 10.0)))
        variable = dispatch(model, config)
        fixed = fixed_flow_dispatch(model, config=config)
        assert variable.feasible and fixed.feasible
        assert variable.objective == pytest.approx(fixed.objective, rel=1e-6)

    @pytest.mark.asyncio
    async def test_results_not_serialized(
        self, two_node_model: NetworkModel, config: SolverConfig
    ) -> None:
        report = await compare_modes(two_node_model, config)
        assert set(report.results) == set(MODES)
        assert "results" not in report.model_dump()


class TestFiniteDifferenceGradient:
    """Envelope gradient against central differences."""

    @pytest.mark.asyncio
    async def test_matches_envelope_gradient(self, two_node_model: NetworkModel) -> None:
        config = SolverConfig(solver_tolerance=1e-10)
        flows = two_node_model.midpoint_flows()
        result = solve_subproblem(build_subproblem(two_node_model, flows), tolerance=1e-10)
        entries = [(0, 0), (0, 1), (0, 2), (1, 0), (1, 2)]
        numeric = await finite_difference_gradient(
            two_node_model, flows, entries, step=1e-3, config=config
        )
        rows, cols = zip(*entries, strict=True)
        analytic = result.gradient[rows, cols]
        estimate = numeric[rows, cols]
        error = np.linalg.norm(analytic - estimate)
        assert error <= 1e-3 * np.linalg.norm(estimate) + 1e-6
        assert np.isnan(numeric[1, 1])

    @pytest.mark.asyncio
    async def test_infeasible_perturbation(self, starved_model: NetworkModel) -> None:
        with pytest.raises(ChpDispatchError, match="infeasible"):
            await finite_difference_gradient(
                starved_model, starved_model.midpoint_flows(), [(0, 0)]
            )

    @pytest.mark.asyncio
    async def test_every_entry_on_line_network(self) -> None:
        model = NetworkModel.from_instance(line_instance())
        config = SolverConfig(solver_tolerance=1e-10)
        flows = model.midpoint_flows()
        result = solve_subproblem(build_subproblem(model, flows), tolerance=1e-10)
        assert result.optimal

        numeric = await finite_difference_gradient(model, flows, step=1e-4, config=config)
        assert numeric.shape == (4, 4)
        assert not np.isnan(numeric).any()
        floor = 1e-3 * float(np.abs(numeric).max())
        error = np.abs(result.gradient - numeric)
        assert (error <= 1e-3 * np.maximum(np.abs(numeric), floor)).all(), error


def bundled_instance() -> DispatchInstance:
    return DispatchInstance.model_validate_json(BUNDLED_INSTANCE.read_text(encoding="utf-8"))


def stretched(instance: DispatchInstance, repeat: int) -> DispatchInstance:
    """The same day repeated: every per-period profile is tiled ``repeat`` times."""
    periods = instance.horizon.periods

    def tile(value: Any) -> Any:
        if isinstance(value, dict):
            return {key: tile(item) for key, item in value.items()}
        if isinstance(value, list):
            if len(value) == periods and all(isinstance(v, int | float) for v in value):
                return value * repeat
            return [tile(item) for item in value]
        return value

    data = tile(instance.model_dump(mode="json"))
    data["horizon"]["periods"] = periods * repeat
    return DispatchInstance.model_validate(data)


class TestSixNodeInstance:
    """The bundled day-ahead case."""

    @pytest.fixture(scope="class")
    def model(self) -> NetworkModel:
        return NetworkModel.from_instance(bundled_instance())

    @pytest.mark.asyncio
    async def test_modes_ordered_by_cost(self, model: NetworkModel) -> None:
        report = await compare_modes(model, SolverConfig(), max_concurrency=3)
        assert all(summary.status == "feasible" for summary in report.modes), report.notes
        variable = report.summary("variable").total_cost
        fixed = report.summary("fixed").total_cost
        separate = report.summary("separate").total_cost
        assert variable <= fixed * (1.0 - 0.005)
        assert fixed <= separate * (1.0 - 0.005)
        assert report.ordering_ok

    def test_accepted_costs_never_rise(self, model: NetworkModel) -> None:
        result = dispatch(model, SolverConfig())
        assert result.feasible
        accepted = [r.objective for r in result.iterations if r.action == "accept"]
        assert len(accepted) >= 2
        for before, after in zip(accepted, accepted[1:], strict=False):
            assert after <= before + 1e-9 * abs(accepted[0])
        assert result.objective == pytest.approx(min(accepted))
        assert result.termination != "infeasible_limit"

    def test_four_days_within_a_minute(self) -> None:
        instance = stretched(bundled_instance(), 4)
        assert instance.horizon.periods == 96
        model = NetworkModel.from_instance(instance)
        started = time.perf_counter()
        result = dispatch(model, SolverConfig())
        elapsed = time.perf_counter() - started
        assert result.feasible
        assert elapsed < 60.0
