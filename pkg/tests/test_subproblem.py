"""Tests for the fixed-flow dispatch program."""

from pathlib import Path

import numpy as np
import pytest

from chp_dispatch.exceptions import (
    CutGenerationError,
    DimensionError,
    FlowBoundsError,
    SolverError,
)
from chp_dispatch.harness import operating_cost
from chp_dispatch.master import relaxation_diagnosis
from chp_dispatch.models import CostCurve, EnergySource, PolytopeRow
from chp_dispatch.network import NetworkModel
from chp_dispatch.subproblem import (
    H1_FAMILIES,
    SubproblemResult,
    VariableLayout,
    build_relaxed_subproblem,
    build_subproblem,
    check_flows,
    envelope_gradient,
    generate_cut,
    solve_subproblem,
    write_lp,
)
from tests.conftest import boiler, generator, two_node_instance


class TestCheckFlows:
    def test_out_of_bounds(self, two_node_model: NetworkModel) -> None:
        flows = two_node_model.midpoint_flows()
        flows[0, 1] = 20.0
        with pytest.raises(FlowBoundsError, match="pipe S1"):
            check_flows(two_node_model, flows)

    def test_wrong_shape(self, two_node_model: NetworkModel) -> None:
        with pytest.raises(DimensionError, match="flow schedule"):
            check_flows(two_node_model, np.ones((2, 2)))

    def test_rounding_noise_is_clipped(self, two_node_model: NetworkModel) -> None:
        flows = two_node_model.m_max + 1e-12
        np.testing.assert_array_equal(check_flows(two_node_model, flows), two_node_model.m_max)


class TestVariableLayout:
    def test_blocks_are_contiguous(self, two_node_model: NetworkModel) -> None:
        layout = VariableLayout(two_node_model)
        assert layout("p", 0, 0) == 0
        assert layout("h", 0, 0) == two_node_model.n_sources * 3
        assert layout.segment(1, 2, 2) == layout.size - 1

    def test_label(self, two_node_model: NetworkModel) -> None:
        layout = VariableLayout(two_node_model)
        assert layout.label(layout("node_supply", 1, 2)) == "node_supply_1_2"
        with pytest.raises(IndexError):
            layout.label(layout.size)


class TestBuildSubproblem:
    """Assembly of the fixed-flow program."""

    def test_row_families(self, two_node_model: NetworkModel) -> None:
        program = build_subproblem(two_node_model, two_node_model.midpoint_flows())
        families = set(program.eq_family)
        assert set(H1_FAMILIES) <= families
        assert {"power_balance", "attachment", "segment_boundary"} <= families
        assert program.ineq_family[-1] == "energy_adequacy"
        assert program.eq_family.count("pipe_supply") == 2 * 3

    def test_bilinear_entries_address_flow_rows(self, two_node_model: NetworkModel) -> None:
        program = build_subproblem(two_node_model, two_node_model.midpoint_flows())
        rows = program.bilinear[:, 0].astype(int)
        assert all(program.eq_family[r] in H1_FAMILIES for r in rows)
        assert program.bilinear[:, 2].max() < program.flows.size

    def test_constraint_blocks(self, two_node_model: NetworkModel) -> None:
        program = build_subproblem(two_node_model, two_node_model.midpoint_flows())
        blocks = program.blocks
        assert len(blocks.h1) + len(blocks.h2) == len(program.b_eq)
        assert len(blocks.g1) == len(program.h_ineq)
        np.testing.assert_array_equal(blocks.g2_upper, two_node_model.m_max)

    def test_literal_coefficients_change_pipe_rows(self, two_node_model: NetworkModel) -> None:
        flows = two_node_model.midpoint_flows()
        default = build_subproblem(two_node_model, flows)
        literal = build_subproblem(two_node_model, flows, literal=True)
        assert (default.a_eq != literal.a_eq).nnz > 0

    def test_relaxed_program_shares_rows(self, two_node_model: NetworkModel) -> None:
        flows = two_node_model.midpoint_flows()
        relaxed = build_relaxed_subproblem(two_node_model, flows)
        assert relaxed.relaxed
        assert relaxed.ineq_family == build_subproblem(two_node_model, flows).ineq_family


class TestSolveSubproblem:
    """Solving at a feasible schedule."""

    @pytest.fixture
    def solved(self, two_node_model: NetworkModel) -> tuple[object, SubproblemResult]:
        program = build_subproblem(two_node_model, two_node_model.midpoint_flows())
        return program, solve_subproblem(program)

    def test_optimal(self, solved) -> None:
        program, result = solved
        assert result.optimal
        assert np.abs(program.equality_residual(result.x)).max() <= 1e-6
        assert program.inequality_residual(result.x).max() <= 1e-6

    def test_demand_and_power_balance(self, solved) -> None:
        _, result = solved
        np.testing.assert_allclose(result.state.heat[1], 1e6, rtol=1e-6)
        np.testing.assert_allclose(result.state.p[1], 5e5, rtol=1e-6)
        np.testing.assert_allclose(result.state.p[0], 0.0, atol=1e-3)

    def test_source_covers_losses(self, solved) -> None:
        _, result = solved
        assert result.state.heat[0].sum() >= result.state.heat[1].sum() - 1e-3

    def test_objective_matches_cost_curves(self, two_node_model: NetworkModel, solved) -> None:
        program, result = solved
        assert program.objective(result.x) == pytest.approx(result.objective, rel=1e-6)
        cost = operating_cost(two_node_model, result.state.p, result.state.h)
        assert result.objective == pytest.approx(cost, rel=1e-6)

    def test_gradient_shape(self, two_node_model: NetworkModel, solved) -> None:
        _, result = solved
        assert result.gradient.shape == (two_node_model.n_pipes, two_node_model.periods)
        assert np.isfinite(result.gradient).all()

    def test_dual_feasibility_and_complementarity(self, solved) -> None:
        program, result = solved
        assert (result.ineq_duals >= 0).all()
        gap = abs(result.ineq_duals @ program.inequality_residual(result.x))
        assert gap <= 1e-6 * (1.0 + abs(result.objective))
        assert result.complementarity <= 1e-6 * (1.0 + abs(result.objective))

    def test_quadratic_generator_marginal_price(self) -> None:
        free_heat = EnergySource(
            id="B",
            category="boiler",
            heat_node="S",
            polytope=[PolytopeRow(h=1.0, rhs=5e6), PolytopeRow(h=-1.0, rhs=0.0)],
        )
        instance = two_node_instance(
            periods=1,
            sources=[free_heat, generator("G", "B1", capacity=1e7, price=0.0)],
            bus_demand=5e6,
        )
        model = NetworkModel.from_instance(instance)
        program = build_subproblem(model, model.midpoint_flows())
        result = solve_subproblem(program)
        assert result.optimal
        assert result.state.p[1, 0] == pytest.approx(5e6, rel=1e-6)
        assert result.objective == pytest.approx(25.0, rel=1e-6)
        row = program.eq_family.index("power_balance")
        assert result.eq_duals[row] == pytest.approx(-10.0, rel=1e-5)

    def test_relaxed_program_has_no_violation(self, two_node_model: NetworkModel) -> None:
        relaxed = solve_subproblem(
            build_relaxed_subproblem(two_node_model, two_node_model.midpoint_flows())
        )
        assert relaxed.optimal
        assert relaxed.objective <= 1e-6


class TestInfeasibleFlows:
    """Relaxed programs and cuts at a starved schedule."""

    def test_program_infeasible(self, starved_model: NetworkModel) -> None:
        result = solve_subproblem(build_subproblem(starved_model, starved_model.m_max))
        assert result.status == "infeasible"
        with pytest.raises(SolverError):
            envelope_gradient(result, build_subproblem(starved_model, starved_model.m_max))

    def test_cut_constant_is_weighted_violation(self, starved_model: NetworkModel) -> None:
        program = build_relaxed_subproblem(starved_model, starved_model.m_max)
        relaxed = solve_subproblem(program)
        assert relaxed.objective > 1e-6
        cut = generate_cut(relaxed, program)
        weighted = float(relaxed.ineq_duals @ program.inequality_residual(relaxed.x))
        assert cut.violation == pytest.approx(weighted, rel=1e-12)
        assert cut.violation > 0
        assert cut.violation == pytest.approx(relaxed.objective, rel=1e-6, abs=1e-6)
        value = cut.value(starved_model.m_max)
        assert value == pytest.approx(cut.violation, rel=1e-9, abs=1e-6)
        assert cut.sigma == relaxed.objective

    def test_ramp_violation_measured_in_watts(self) -> None:
        stiff = EnergySource(
            id="G",
            category="generator",
            bus="B1",
            polytope=[PolytopeRow(p=1.0, rhs=1e7), PolytopeRow(p=-1.0, rhs=0.0)],
            ramp_p_up=0.0,
            cost=CostCurve(p=2e-5),
        )
        instance = two_node_instance(
            periods=2, sources=[boiler("B", "S"), stiff], bus_demand=[1e6, 3e6]
        )
        model = NetworkModel.from_instance(instance)
        flows = model.midpoint_flows()
        assert solve_subproblem(build_subproblem(model, flows)).status == "infeasible"

        program = build_relaxed_subproblem(model, flows)
        relaxed = solve_subproblem(program)
        assert relaxed.objective == pytest.approx(2e6, rel=1e-6)
        diagnosis = relaxation_diagnosis(relaxed, program.ineq_family, program.ineq_unit)
        assert diagnosis == pytest.approx({"ramp_electric": 2e6}, rel=1e-6)

    def test_diagnosis_names_temperature_limits(self, starved_model: NetworkModel) -> None:
        program = build_relaxed_subproblem(starved_model, starved_model.m_max)
        relaxed = solve_subproblem(program)
        diagnosis = relaxation_diagnosis(relaxed, program.ineq_family, program.ineq_unit)
        assert "temperature_bounds" in diagnosis
        assert sum(diagnosis.values()) == pytest.approx(relaxed.objective, rel=1e-4)

    def test_cut_needs_relaxed_result(self, two_node_model: NetworkModel) -> None:
        program = build_subproblem(two_node_model, two_node_model.midpoint_flows())
        with pytest.raises(CutGenerationError, match="relaxed optima"):
            generate_cut(solve_subproblem(program), program)

    def test_cut_needs_violation(self, two_node_model: NetworkModel) -> None:
        program = build_relaxed_subproblem(two_node_model, two_node_model.midpoint_flows())
        with pytest.raises(CutGenerationError, match="nothing to cut"):
            generate_cut(solve_subproblem(program), program)


class TestWriteLp:
    def test_sections(self, two_node_model: NetworkModel, tmp_path: Path) -> None:
        path = tmp_path / "dump" / "iter_0001.lp"
        write_lp(build_subproblem(two_node_model, two_node_model.midpoint_flows()), path)
        text = path.read_text(encoding="utf-8")
        for section in ("Minimize", "Subject To", "Bounds", "End"):
            assert section in text
        assert "^ 2" in text
        assert "energy_adequacy" in text

    def test_relaxed_slacks(self, two_node_model: NetworkModel, tmp_path: Path) -> None:
        path = tmp_path / "iter_0001_relaxed.lp"
        write_lp(build_relaxed_subproblem(two_node_model, two_node_model.midpoint_flows()), path)
        assert " s_0 >= 0" in path.read_text(encoding="utf-8")
