"""Upper-level search over the pipe mass flow schedule.

A projected-gradient descent on J*(m) driven by envelope gradients of the
fixed-flow program, with outer-approximation cuts after infeasible
iterates and a revision step back onto the latest cut.

Flow schedules are (pipes × periods) arrays; inside this module they are
handled flattened row-major so constraint normals are plain vectors.
"""

import logging
import time
from pathlib import Path
from typing import Literal

import cvxpy as cp
import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field
from scipy import linalg

from chp_dispatch.exceptions import FlowBoundsError, StationaryPointError
from chp_dispatch.network import NetworkModel
from chp_dispatch.subproblem import (
    SLACK_TOLERANCE,
    CutPlane,
    FlowSchedule,
    SubproblemResult,
    SystemState,
    build_relaxed_subproblem,
    build_subproblem,
    generate_cut,
    solve_subproblem,
    write_lp,
)

logger = logging.getLogger(__name__)

InitialFlow = Literal["midpoint", "lower", "upper", "nominal"]
Termination = Literal[
    "converged", "stationary", "max_iterations", "infeasible_limit", "single_solve"
]


class SolverConfig(BaseModel):
    """Knobs of the decomposition loop."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    gamma: float = Field(default=0.3, gt=0, lt=1, description="Desired reduction rate")
    delta: float = Field(default=1e-4, gt=0, description="Convergence tolerance on σ")
    max_iterations: int = Field(default=50, ge=1)
    infeasible_stop: int = Field(default=3, ge=1)
    initial_flow: InitialFlow = "midpoint"
    backtracking_factor: float = Field(default=0.5, gt=0, lt=1)
    max_backtracks: int = Field(default=5, ge=0)
    max_step_fraction: float = Field(
        default=0.25, gt=0, le=1, description="Largest move per step, share of the flow range"
    )
    stationarity_tol: float = Field(default=1e-6, gt=0)
    active_tol: float = Field(default=1e-8, gt=0)
    pivot_tol: float = Field(default=1e-10, gt=0)
    literal_stepsize: bool = False
    literal_coefficients: bool = False
    min_exchanger_flow: float = Field(default=0.01, ge=0, description="[kg/s] at loads")
    solver: str = "CLARABEL"
    solver_tolerance: float = Field(default=1e-9, gt=0)


# ─── Flow Region ───


class FlowRegion(BaseModel):
    """Feasible flow set M on flattened schedules.

    lower ≤ m ≤ upper, E m = 0 (return pipes mirror supply pipes) and
    C m ≤ e (nonnegative exchanger flow, with a floor at loads with demand).
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    shape: tuple[int, int]
    lower: np.ndarray
    upper: np.ndarray
    equality: np.ndarray
    inequality: np.ndarray
    inequality_rhs: np.ndarray

    @classmethod
    def from_model(cls, model: NetworkModel, min_exchanger_flow: float = 0.01) -> "FlowRegion":
        n, n_pipes = model.periods, model.n_pipes
        dim = n_pipes * n

        equality = []
        for supply_j, return_j in model.mirror:
            for t in range(n):
                row = np.zeros(dim)
                row[return_j * n + t] = 1.0
                row[supply_j * n + t] = -1.0
                equality.append(row)

        exchanger = model.exchanger_sign()[:, None] * model.side_incidence("supply")
        inequality, rhs = [], []
        for k in range(model.n_nodes):
            for t in range(n):
                row = np.zeros(dim)
                row[np.arange(n_pipes) * n + t] = -exchanger[k]
                floor = 0.0
                if not model.node_is_source[k] and model.demand[k, t] > 0:
                    floor = min_exchanger_flow
                inequality.append(row)
                rhs.append(-floor)

        return cls(
            shape=(n_pipes, n),
            lower=model.m_min.ravel(),
            upper=model.m_max.ravel(),
            equality=np.array(equality).reshape(-1, dim),
            inequality=np.array(inequality).reshape(-1, dim),
            inequality_rhs=np.array(rhs),
        )

    @property
    def dimension(self) -> int:
        return self.shape[0] * self.shape[1]

    def rows(self, cuts: list[CutPlane]) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Inequality rows of M ∩ FC as (normals, right-hand sides)."""
        if not cuts:
            return self.inequality, self.inequality_rhs
        normals = np.vstack([self.inequality] + [c.normal.ravel() for c in cuts])
        rhs = np.concatenate([self.inequality_rhs, [c.rhs for c in cuts]])
        return normals, rhs

    def contains(self, m: NDArray[np.float64], cuts: list[CutPlane], tol: float = 1e-8) -> bool:
        m = m.ravel()
        normals, rhs = self.rows(cuts)
        scale = tol * (1.0 + np.abs(self.upper))
        return bool(
            (m >= self.lower - scale).all()
            and (m <= self.upper + scale).all()
            and np.allclose(self.equality @ m, 0.0, atol=tol * (1.0 + np.abs(m).max()))
            and (normals @ m <= rhs + tol * (1.0 + np.abs(rhs))).all()
        )

    def project(self, m: NDArray[np.float64], cuts: list[CutPlane] | None = None) -> FlowSchedule:
        """Euclidean projection onto M ∩ FC by a small QP.

        Raises:
            FlowBoundsError: If the region is empty.
        """
        cuts = cuts or []
        if self.contains(m, cuts):
            return np.clip(m.ravel(), self.lower, self.upper).reshape(self.shape)
        normals, rhs = self.rows(cuts)
        y = cp.Variable(self.dimension)
        constraints = [y >= self.lower, y <= self.upper, normals @ y <= rhs]
        if len(self.equality):
            constraints.append(self.equality @ y == 0)
        problem = cp.Problem(cp.Minimize(cp.sum_squares(y - m.ravel())), constraints)
        problem.solve(solver=cp.CLARABEL)
        if problem.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
            raise FlowBoundsError(f"flow region is empty ({problem.status})")
        projected = np.clip(np.asarray(y.value), self.lower, self.upper)
        return projected.reshape(self.shape)

    def clip_ray(
        self,
        m: NDArray[np.float64],
        direction: NDArray[np.float64],
        cuts: list[CutPlane],
    ) -> FlowSchedule:
        """Walk from m along direction until the first bound, row or cut is hit.

        Rows already violated at m are not allowed to block the ray. The
        result is snapped onto the box bounds.
        """
        m, d = m.ravel(), direction.ravel()
        tiny = 1e-12 * float(np.abs(d).max(initial=0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            up = np.where(d > tiny, (self.upper - m) / d, np.inf)
            down = np.where(d < -tiny, (self.lower - m) / d, np.inf)
        theta = min(1.0, float(np.min(up, initial=np.inf)), float(np.min(down, initial=np.inf)))

        normals, rhs = self.rows(cuts)
        if len(rhs):
            rate = normals @ d
            room = rhs - normals @ m
            moving = rate > 1e-9 * np.linalg.norm(normals, axis=1) * np.linalg.norm(d)
            blocking = moving & (room >= -1e-10 * (1.0 + np.abs(rhs)))
            if blocking.any():
                reach = np.maximum(room[blocking], 0.0) / rate[blocking]
                theta = min(theta, float(reach.min()))
        theta = max(theta, 0.0)
        moved = np.clip(m + theta * d, self.lower, self.upper)
        return moved.reshape(self.shape)

    def active_projection(
        self,
        m: NDArray[np.float64],
        gradient: NDArray[np.float64],
        cuts: list[CutPlane],
        active_tol: float = 1e-8,
        pivot_tol: float = 1e-10,
    ) -> NDArray[np.float64]:
        """Projection matrix for the constraints that block the anti-gradient at m.

        Equalities are always active. Bounds, rows and cuts within tolerance of
        their boundary join the active set while −P g points outward through
        them.
        """
        m, g = m.ravel(), gradient.ravel()
        normals, rhs = self.rows(cuts)
        candidates: list[NDArray[np.float64]] = []
        at_lower = np.flatnonzero(m <= self.lower + active_tol * (1.0 + np.abs(self.lower)))
        at_upper = np.flatnonzero(m >= self.upper - active_tol * (1.0 + np.abs(self.upper)))
        eye = np.eye(self.dimension)
        candidates += [-eye[j] for j in at_lower]
        candidates += [eye[j] for j in at_upper]
        near = normals @ m >= rhs - active_tol * (1.0 + np.abs(rhs))
        candidates += list(normals[near])

        active = list(self.equality)
        chosen = np.zeros(len(candidates), dtype=bool)
        while True:
            projection = projection_matrix(_columns(active, self.dimension), pivot_tol)
            direction = -projection @ g
            scale = 1e-9 * np.linalg.norm(direction)
            outward = [
                i
                for i, normal in enumerate(candidates)
                if not chosen[i] and normal @ direction > scale * np.linalg.norm(normal)
            ]
            if not outward:
                return projection
            for i in outward:
                chosen[i] = True
                active.append(candidates[i])


def _columns(rows: list[NDArray[np.float64]], dimension: int) -> NDArray[np.float64]:
    if not rows:
        return np.zeros((dimension, 0))
    return np.column_stack(rows)


# ─── Master Operations ───


def projection_matrix(active: NDArray[np.float64], pivot_tol: float = 1e-10) -> NDArray[np.float64]:
    """P = I − H(HᵀH)⁻¹Hᵀ for the active normals (columns of H).

    Linearly dependent columns are dropped by QR with column pivoting on
    the normalized normals; pivots below ``pivot_tol`` end the basis.
    """
    active = np.asarray(active, dtype=float)
    dimension = active.shape[0]
    if active.ndim != 2 or active.shape[1] == 0:
        return np.eye(dimension)
    norms = np.linalg.norm(active, axis=0)
    active = active[:, norms > pivot_tol] / norms[norms > pivot_tol]
    if active.shape[1] == 0:
        return np.eye(dimension)
    q, r, _ = linalg.qr(active, mode="economic", pivoting=True)
    rank = int(np.sum(np.abs(np.diag(r)) > pivot_tol))
    basis = q[:, :rank]
    projection = np.eye(dimension) - basis @ basis.T
    return 0.5 * (projection + projection.T)


def step_size(
    objective: float,
    gradient: NDArray[np.float64],
    projection: NDArray[np.float64],
    gamma: float,
    literal: bool = False,
) -> float:
    """Step length α so the linearized cost drops by γ·|J*|.

    With ``literal`` the printed sign is kept: α = −γ·J*/(gᵀPg).

    Raises:
        StationaryPointError: If the projected gradient vanishes.
    """
    g = np.ravel(gradient)
    projected = projection @ g
    decrease = float(projected @ g)
    if not np.any(projected) or decrease <= 1e-14 * float(g @ g):
        raise StationaryPointError("projected gradient is zero")
    if literal:
        return -gamma * objective / decrease
    return gamma * abs(objective) / decrease


def cap_step(
    alpha: float,
    gradient: NDArray[np.float64],
    projection: NDArray[np.float64],
    region: FlowRegion,
    fraction: float,
) -> float:
    """Shorten α so no flow moves more than ``fraction`` of its bound width."""
    if alpha <= 0:
        return alpha
    move = np.abs(projection @ np.ravel(gradient))
    width = region.upper - region.lower
    free = (move > 1e-12 * float(move.max(initial=0.0))) & (width > 0)
    if not free.any():
        return alpha
    limit = fraction * float(np.min(width[free] / move[free]))
    if limit < alpha:
        logger.debug("Step α=%.4g capped to %.4g", alpha, limit)
        return limit
    return alpha


def update_flow(
    m: FlowSchedule,
    gradient: NDArray[np.float64],
    projection: NDArray[np.float64],
    alpha: float,
    region: FlowRegion,
    cuts: list[CutPlane] | None = None,
) -> FlowSchedule:
    """m − α·P·g, clipped to the first bound, row or cut met along the ray."""
    direction = -alpha * (projection @ np.ravel(gradient))
    return region.clip_ray(np.asarray(m, dtype=float), direction, cuts or [])


def revise_flow(
    m_r: FlowSchedule,
    cut: CutPlane,
    gradient: NDArray[np.float64],
    region: FlowRegion | None = None,
    cuts: list[CutPlane] | None = None,
) -> FlowSchedule:
    """Move from the last feasible iterate along −g onto the cut hyperplane.

    β = (c·m_r − e)/(c·g) with g restricted to the mirror equalities. When the
    ray is parallel to the cut or points away from it, the midpoint of m_r
    and its projection onto the hyperplane is used instead.
    """
    shape = np.shape(m_r)
    m = np.ravel(m_r).astype(float)
    g = np.ravel(gradient).astype(float)
    c = cut.normal.ravel()
    if region is not None and len(region.equality):
        equalities = projection_matrix(region.equality.T)
        g = equalities @ g
    excess = float(c @ m - cut.rhs)
    rate = float(c @ g)

    if abs(rate) > 1e-12 * (1.0 + np.linalg.norm(c) * np.linalg.norm(g)) and excess / rate >= 0:
        target = m - (excess / rate) * g
    else:
        logger.warning("Anti-gradient ray misses the cut; revising to the midpoint")
        foot = m - excess / float(c @ c) * c
        target = 0.5 * (m + foot)

    if region is None:
        return target.reshape(shape)
    direction = target - m
    if len(region.equality):
        direction = projection_matrix(region.equality.T) @ direction
    others = [other for other in (cuts or []) if other is not cut]
    return region.clip_ray(m, direction, others)


def check_convergence(history: list[float], delta: float) -> tuple[bool, float | None]:
    """σ_k = |(J*_k − J*_{k−1}) / J*_1|; converged iff σ_k ≤ δ."""
    if len(history) < 2:
        return False, None
    reference = abs(history[0]) or 1.0
    sigma = abs((history[-1] - history[-2]) / reference)
    return sigma <= delta, sigma


# ─── Loop ───


class IterationRecord(BaseModel):
    """One row of the iteration log."""

    k: int
    status: Literal["optimal", "infeasible"]
    objective: float | None = None
    sigma: float | None = None
    step_alpha: float | None = None
    n_cuts: int = 0
    grad_norm: float | None = None
    wallclock_ms: float = 0.0
    action: str = ""


class MasterState(BaseModel):
    """Mutable bookkeeping of the decomposition loop."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    k: int = 0
    flows: np.ndarray
    best_flows: np.ndarray | None = None
    best: SubproblemResult | None = None
    best_gradient: np.ndarray | None = None
    cuts: list[CutPlane] = []
    history: list[float] = []
    infeasible_streak: int = 0
    alpha: float | None = None
    backtracks: int = 0
    last_relaxed: SubproblemResult | None = None
    diagnosis: dict[str, float] = {}


class DispatchResult(BaseModel):
    """Best feasible dispatch found by a mode, or the infeasibility diagnosis."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    mode: str
    status: Literal["feasible", "infeasible"]
    objective: float | None = None
    flows: np.ndarray | None = None
    state: SystemState | None = None
    iterations: list[IterationRecord] = []
    n_cuts: int = 0
    termination: str = ""
    sigma: float | None = None
    diagnosis: dict[str, float] = {}
    wallclock_s: float = 0.0

    @property
    def feasible(self) -> bool:
        return self.status == "feasible"


def initial_flows(
    model: NetworkModel,
    config: SolverConfig,
    nominal: FlowSchedule | None = None,
    region: FlowRegion | None = None,
) -> FlowSchedule:
    """Starting schedule m⁰, projected onto M when it leaves it.

    An explicit ``nominal`` schedule wins over the policy.

    Raises:
        FlowBoundsError: If policy ``nominal`` is chosen without a schedule.
    """
    if nominal is not None:
        m0 = np.asarray(nominal, dtype=float)
    else:
        match config.initial_flow:
            case "midpoint":
                m0 = model.midpoint_flows()
            case "lower":
                m0 = model.m_min.copy()
            case "upper":
                m0 = model.m_max.copy()
            case "nominal":
                raise FlowBoundsError("initial flow policy 'nominal' needs a flow schedule")
    region = region or FlowRegion.from_model(model, config.min_exchanger_flow)
    return region.project(m0)


def relaxation_diagnosis(
    result: SubproblemResult, families: list[str], units: NDArray[np.float64]
) -> dict[str, float]:
    """Weighted slack per inequality family of a relaxed optimum."""
    diagnosis: dict[str, float] = {}
    if result.slack is None:
        return diagnosis
    for family, unit, s in zip(families, units, result.slack, strict=True):
        if s * unit > SLACK_TOLERANCE:
            diagnosis[family] = diagnosis.get(family, 0.0) + float(s * unit)
    return diagnosis


def dispatch(
    model: NetworkModel,
    config: SolverConfig | None = None,
    initial: FlowSchedule | None = None,
    dump_dir: Path | None = None,
    mode: str = "variable",
) -> DispatchResult:
    """Run the decomposition loop.

    Each iteration solves the fixed-flow program once. A feasible iterate
    that does not raise the cost is accepted and followed by a projected
    gradient step; a costlier one halves the step from the best iterate. An
    infeasible iterate yields a cut. Before any feasible iterate the flows
    are projected onto the cuts and ``infeasible_stop`` consecutive failures
    end the run; afterwards the first failure revises onto the cut and later
    ones halve the step from the best iterate until ``max_backtracks``.

    Args:
        model: Prepared network.
        config: Loop settings (defaults when omitted).
        initial: Optional starting schedule (pipes × periods).
        dump_dir: When set, each iteration's program is written as LP text.
        mode: Label stored on the result.

    Returns:
        DispatchResult with the best feasible iterate and the iteration log,
        or status ``infeasible`` with the last relaxed-slack diagnosis.
    """
    config = config or SolverConfig()
    started = time.perf_counter()
    region = FlowRegion.from_model(model, config.min_exchanger_flow)
    state = MasterState(flows=initial_flows(model, config, initial, region))
    records: list[IterationRecord] = []
    termination: Termination = "max_iterations"
    literal = config.literal_coefficients
    sigma: float | None = None

    def solve(m: FlowSchedule, relaxed: bool = False, k: int = 0):
        build = build_relaxed_subproblem if relaxed else build_subproblem
        program = build(model, m, literal)
        if dump_dir is not None:
            suffix = "_relaxed" if relaxed else ""
            write_lp(program, dump_dir / f"iter_{k:04d}{suffix}.lp")
        return program, solve_subproblem(program, config.solver, config.solver_tolerance)

    def step_from_best() -> FlowSchedule:
        projection = region.active_projection(
            state.best_flows, state.best_gradient, state.cuts, config.active_tol, config.pivot_tol
        )
        return update_flow(
            state.best_flows, state.best_gradient, projection, state.alpha, region, state.cuts
        )

    for k in range(1, config.max_iterations + 1):
        state.k = k
        tick = time.perf_counter()
        m = state.flows
        _, result = solve(m, k=k)
        record = IterationRecord(k=k, status=result.status, n_cuts=len(state.cuts))

        if result.optimal:
            state.infeasible_streak = 0
            objective = float(result.objective)
            tolerance = 1e-9 * abs(state.history[0]) if state.history else 0.0
            if state.best is None or objective <= state.history[-1] + tolerance:
                state.best, state.best_flows = result, m
                state.best_gradient = result.gradient.ravel()
                state.history.append(objective)
                state.backtracks = 0
                converged, sigma = check_convergence(state.history, config.delta)
                gradient = state.best_gradient
                projection = region.active_projection(
                    m, gradient, state.cuts, config.active_tol, config.pivot_tol
                )
                projected_norm = float(np.linalg.norm(projection @ gradient))
                record = record.model_copy(
                    update={
                        "objective": objective,
                        "sigma": sigma,
                        "grad_norm": projected_norm,
                        "action": "accept",
                    }
                )
                if converged:
                    termination = "converged"
                elif projected_norm <= config.stationarity_tol * (1.0 + np.linalg.norm(gradient)):
                    termination = "stationary"
                elif k < config.max_iterations:
                    state.alpha = cap_step(
                        step_size(
                            objective, gradient, projection, config.gamma, config.literal_stepsize
                        ),
                        gradient,
                        projection,
                        region,
                        config.max_step_fraction,
                    )
                    state.flows = update_flow(
                        m, gradient, projection, state.alpha, region, state.cuts
                    )
                    record = record.model_copy(update={"step_alpha": state.alpha})
                    if np.allclose(state.flows, m, rtol=0.0, atol=1e-12):
                        termination = "stationary"
            else:
                state.backtracks += 1
                record = record.model_copy(update={"objective": objective, "action": "backtrack"})
                if state.backtracks > config.max_backtracks or state.alpha is None:
                    logger.warning(
                        "Backtracking exhausted after %d halvings", config.max_backtracks
                    )
                    termination = "stationary"
                else:
                    state.alpha *= config.backtracking_factor
                    state.flows = step_from_best()
                    record = record.model_copy(update={"step_alpha": state.alpha})
        else:
            state.infeasible_streak += 1
            program, relaxed = solve(m, relaxed=True, k=k)
            state.last_relaxed = relaxed
            state.diagnosis = relaxation_diagnosis(
                relaxed, program.ineq_family, program.ineq_unit
            )
            action = "cut"
            cut = None
            if relaxed.optimal and relaxed.objective > SLACK_TOLERANCE:
                cut = generate_cut(relaxed, program)
                if not cut.degenerate:
                    state.cuts.append(cut)
                logger.info("Cut %d from relaxed optimum σ=%.6g", len(state.cuts), cut.sigma)
            if state.best_flows is None:
                if state.infeasible_streak >= config.infeasible_stop:
                    termination = "infeasible_limit"
                else:
                    action = "cut+project"
                    try:
                        state.flows = region.project(m, state.cuts)
                    except FlowBoundsError:
                        logger.warning("Cuts exclude every flow schedule")
                        termination = "infeasible_limit"
                    else:
                        if np.allclose(state.flows, m, rtol=0.0, atol=1e-12):
                            termination = "infeasible_limit"
            elif state.alpha is None or state.backtracks >= config.max_backtracks:
                logger.warning(
                    "Step from the best iterate still infeasible after %d halvings",
                    state.backtracks,
                )
                termination = "stationary"
            else:
                action = "cut+backtrack"
                if state.infeasible_streak == 1 and cut is not None and not cut.degenerate:
                    action = "cut+revise"
                    state.flows = revise_flow(
                        state.best_flows, cut, state.best_gradient, region, state.cuts
                    )
                    if np.allclose(state.flows, state.best_flows, rtol=0.0, atol=1e-12):
                        action = "cut+backtrack"
                if action == "cut+backtrack":
                    state.backtracks += 1
                    state.alpha *= config.backtracking_factor
                    state.flows = step_from_best()
                    record = record.model_copy(update={"step_alpha": state.alpha})
            record = record.model_copy(update={"n_cuts": len(state.cuts), "action": action})

        record = record.model_copy(
            update={"wallclock_ms": (time.perf_counter() - tick) * 1000.0}
        )
        records.append(record)
        logger.info(
            "Iteration %d: %s J*=%s σ=%s α=%s (%s)",
            k,
            record.status,
            f"{record.objective:.6f}" if record.objective is not None else "-",
            f"{record.sigma:.3g}" if record.sigma is not None else "-",
            f"{record.step_alpha:.4g}" if record.step_alpha is not None else "-",
            record.action,
        )
        if termination != "max_iterations":
            break

    elapsed = time.perf_counter() - started
    if state.best is None:
        logger.warning("No feasible dispatch found after %d iterations", state.k)
        return DispatchResult(
            mode=mode,
            status="infeasible",
            iterations=records,
            n_cuts=len(state.cuts),
            termination=termination,
            diagnosis=state.diagnosis,
            wallclock_s=elapsed,
        )
    logger.info(
        "Finished %s dispatch: J*=%.6f after %d iterations (%s)",
        mode,
        state.history[-1],
        state.k,
        termination,
    )
    return DispatchResult(
        mode=mode,
        status="feasible",
        objective=state.history[-1],
        flows=state.best_flows,
        state=state.best.state,
        iterations=records,
        n_cuts=len(state.cuts),
        termination=termination,
        sigma=sigma,
        wallclock_s=elapsed,
    )
