"""Closed-loop validation harness and controller comparison metrics.

Any callable (x, zeta) -> u can be evaluated.  Every controller in a
comparison consumes the identical recorded disturbance path per scenario,
so differences in the metrics come from the controllers alone.  The two
reported metrics mirror the benchmark study: the sample-averaged
discounted performance index and the number of time points per run at
which any constraint entry is negative.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .model import ControlProblem, MarkovEmbedding, ScenarioSet
from .policy import MlpPolicy, eval_policy

__all__ = [
    "ClosedLoopRun",
    "ComparisonResult",
    "PolicyController",
    "simulate",
    "compare",
    "write_trajectory_csv",
]


@dataclass(frozen=True)
class ClosedLoopRun:
    controller_id: str
    scenario_index: int
    states: np.ndarray        # (H, n_x)
    controls: np.ndarray      # (H, n_u)
    xi: np.ndarray            # (H, n_xi)
    stage_costs: np.ndarray   # (H,) undiscounted stage values
    discounted_cost: float
    undiscounted_cost: float
    violated: np.ndarray      # (H,) bool per time point
    violations: int


class PolicyController:
    """Wrap trained policy parameters as a closed-loop controller."""

    def __init__(self, policy: MlpPolicy, theta):
        self.policy = policy
        self.theta = np.asarray(theta, dtype=float)

    def __call__(self, x, zeta):
        return eval_policy(self.policy, self.theta, x, zeta)


class ControllerError(RuntimeError):
    def __init__(self, stage: int, cause: Exception):
        super().__init__(f"controller failed at stage {stage}: {cause}")
        self.stage = stage
        self.cause = cause


def simulate(
    controller,
    problem: ControlProblem,
    embedding: MarkovEmbedding,
    scenarios: ScenarioSet,
    scenario_index: int,
    horizon: int = 100,
    controller_id: str = "controller",
) -> ClosedLoopRun:
    """Run the controller against one recorded disturbance path."""
    if scenarios.horizon < horizon:
        raise ValueError(
            f"scenario paths of length {scenarios.horizon} cannot cover "
            f"a {horizon}-stage run"
        )
    zeta = scenarios.zeta[scenario_index]
    x = scenarios.x0[scenario_index].copy()
    gamma = problem.gamma
    xs, us, xis, costs, flags = [], [], [], [], []
    disc = 0.0
    for t in range(horizon):
        try:
            u = np.asarray(controller(x, zeta[t]), dtype=float)
        except Exception as exc:  # surface the failing stage
            raise ControllerError(t, exc) from exc
        g = np.asarray(problem.constraints(x, u, zeta[t]), dtype=float)
        c = float(problem.stage_cost(x, u, zeta[t]))
        xs.append(x.copy())
        us.append(u)
        xis.append(np.atleast_1d(embedding.observe_fn(zeta[t])))
        costs.append(c)
        flags.append(bool(np.any(g < 0)))
        disc += gamma ** t * c
        x = np.asarray(problem.f(x, u, zeta[t + 1]), dtype=float)
    flags = np.array(flags)
    return ClosedLoopRun(
        controller_id=controller_id,
        scenario_index=scenario_index,
        states=np.array(xs),
        controls=np.array(us),
        xi=np.array(xis),
        stage_costs=np.array(costs),
        discounted_cost=disc,
        undiscounted_cost=float(np.sum(costs)),
        violated=flags,
        violations=int(np.sum(flags)),
    )


@dataclass(frozen=True)
class ComparisonResult:
    rows: list  # dicts: controller, performance, performance_undiscounted, violations
    runs: dict  # controller_id -> list[ClosedLoopRun]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["controller", "performance", "performance_undiscounted", "violations"]
            )
            for r in self.rows:
                writer.writerow(
                    [
                        r["controller"],
                        repr(r["performance"]),
                        repr(r["performance_undiscounted"]),
                        repr(r["violations"]),
                    ]
                )

    def row(self, controller_id: str) -> dict:
        for r in self.rows:
            if r["controller"] == controller_id:
                return r
        raise KeyError(controller_id)


def compare(
    controllers: dict,
    problem: ControlProblem,
    embedding: MarkovEmbedding,
    scenarios: ScenarioSet,
    horizon: int = 100,
) -> ComparisonResult:
    """Mean performance index and violation counts per controller.

    Deterministic given (controllers, scenarios); controllers are
    evaluated in insertion order and scenarios in ascending order.
    """
    if not controllers or scenarios.n_scenarios == 0:
        raise ValueError("need at least one controller and one scenario")
    rows = []
    all_runs = {}
    for name, ctrl in controllers.items():
        runs = [
            simulate(ctrl, problem, embedding, scenarios, s, horizon, name)
            for s in range(scenarios.n_scenarios)
        ]
        all_runs[name] = runs
        rows.append(
            dict(
                controller=name,
                performance=float(np.mean([r.discounted_cost for r in runs])),
                performance_undiscounted=float(
                    np.mean([r.undiscounted_cost for r in runs])
                ),
                violations=float(np.mean([r.violations for r in runs])),
            )
        )
    return ComparisonResult(rows=rows, runs=all_runs)


def write_trajectory_csv(run: ClosedLoopRun, path) -> None:
    """Plot-ready per-stage dump of one closed-loop run."""
    n_x = run.states.shape[1]
    n_u = run.controls.shape[1]
    n_xi = run.xi.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["t"]
            + [f"x_{j}" for j in range(n_x)]
            + [f"u_{j}" for j in range(n_u)]
            + [f"xi_{j}" for j in range(n_xi)]
            + ["stage_cost", "violated"]
        )
        for t in range(run.states.shape[0]):
            writer.writerow(
                [t]
                + [repr(v) for v in run.states[t]]
                + [repr(v) for v in run.controls[t]]
                + [repr(v) for v in run.xi[t]]
                + [repr(float(run.stage_costs[t])), int(run.violated[t])]
            )
