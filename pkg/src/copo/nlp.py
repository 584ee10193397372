"""Per-sample NLP assembly by closed-loop rollout under the policy.

Each scenario s defines one cost term L_s(theta) and one constraint block
G_s(theta) >= 0 obtained by simulating the policy forward over the
scenario's disturbance path.  There is no coupling across scenarios, so
evaluation order never changes the per-sample values; summed quantities
always reduce in ascending scenario order so totals are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fwdiff as fd
from .model import ControlProblem, MarkovEmbedding, ScenarioSet
from .policy import MlpPolicy, eval_policy

__all__ = [
    "DivergedRolloutError",
    "SampleNlp",
    "RolloutResult",
    "rollout",
    "sample_cost",
    "sample_constraints",
    "cost_gradient",
    "constraint_jacobian",
    "jtj_accumulate",
    "total_cost",
    "total_gradient",
    "constraints_all",
    "objective_and_constraints",
    "eval_all",
    "lagrangian_hessian",
    "RolloutBlockNlp",
]


class DivergedRolloutError(RuntimeError):
    """A simulated state or control became non-finite."""

    def __init__(self, stage: int, what: str = "state"):
        super().__init__(f"non-finite {what} at stage {stage}")
        self.stage = stage


@dataclass(frozen=True)
class SampleNlp:
    """Finite policy-optimization NLP instance over a scenario set.

    ``margin`` tightens every constraint row to g >= margin during
    training, buying the closed-loop policy a safety buffer on scenarios
    outside the training set; it does not change the reported violation
    metric, which always uses the original constraints.  It may be a
    scalar or a length-m vector, one entry per constraint row, so rows
    with little slack to spare (a tight input box, say) can be tightened
    less than roomy state bounds.  The margin is applied from stage 1
    on: the stage-0 constraint is dominated by the sampled initial
    state, which no policy can influence, so tightening it would make
    instances infeasible by construction whenever an initial state is
    drawn within the margin of a bound.

    ``penalty`` softens constraint rows for regimes where no policy can
    satisfy every sampled constraint (heavy process noise, say): a
    softened row moves into the objective as a smoothed l1 hinge
    penalty * tau * softplus(-g / tau)  per stage, discounted like the
    stage cost, and is simultaneously relaxed far enough that the hard
    copy never becomes active.  ``penalty`` may be a scalar (soften all
    rows) or a length-m vector with zeros for rows that must stay hard;
    rows the policy controls directly (input bounds) are best kept hard,
    since softening them with a hinge wider than their slack just
    crushes the inputs to zero.  The l1 shape matters: it acts as an
    exact penalty, so rows that can be feasible are driven exactly
    feasible and unavoidable violations stay sparse, whereas a quadratic
    hinge spreads many shallow violations across all stages.  ``tau`` is
    the smoothing width of the hinge and must be small against the
    softened rows' typical slack.
    """

    problem: ControlProblem
    embedding: MarkovEmbedding
    policy: MlpPolicy
    scenarios: ScenarioSet
    margin: float | np.ndarray = 0.0
    penalty: float | np.ndarray = 0.0
    relax: float = 1.0
    tau: float = 0.01

    def _penalty_parts(self):
        """(per-row hinge weights, per-row relaxation) or None if hard."""
        if not np.any(self.penalty):
            return None
        pen = np.broadcast_to(
            np.asarray(self.penalty, dtype=float), (self.problem.m,)
        )
        return pen, np.where(pen > 0.0, self.relax, 0.0)

    @property
    def n_samples(self) -> int:
        return self.scenarios.n_scenarios

    @property
    def horizon(self) -> int:
        return self.scenarios.horizon

    @property
    def m_per_sample(self) -> int:
        # constraints enforced at every simulated stage t = 0..T
        return self.problem.m * (self.horizon + 1)

    @property
    def n_params(self) -> int:
        return self.policy.n_params


@dataclass(frozen=True)
class RolloutResult:
    states: np.ndarray       # (T+1, n_x)
    controls: np.ndarray     # (T+1, n_u)
    stage_costs: np.ndarray  # (T+1,)
    total_cost: float        # discounted
    constraints: np.ndarray  # (T+1, m)


def _simulate(nlp: SampleNlp, theta, s: int):
    """Shared forward simulation; theta may carry tangents.

    Returns (states, controls, stage_costs, constraint_blocks) as lists
    indexed by stage.
    """
    prob = nlp.problem
    zeta = nlp.scenarios.zeta[s]
    x = nlp.scenarios.x0[s]
    pen_parts = nlp._penalty_parts()
    xs, us, costs, cons = [], [], [], []
    for t in range(nlp.horizon + 1):
        if t > 0:
            x = prob.f(xs[t - 1], us[t - 1], zeta[t])
        u = eval_policy(nlp.policy, theta, x, zeta[t])
        xs.append(x)
        us.append(u)
        cost = prob.stage_cost(x, u, zeta[t])
        g = prob.constraints(x, u, zeta[t])
        gm = g - nlp.margin if t > 0 and np.any(nlp.margin) else g
        if pen_parts is not None:
            pen, relax = pen_parts
            hinge = fd.softplus(gm * (-1.0 / nlp.tau))
            cost = cost + nlp.tau * fd.dot(hinge, pen)
            gm = gm + relax
        costs.append(cost)
        cons.append(gm)
    return xs, us, costs, cons


def _simulate_all(nlp: SampleNlp, theta):
    """Forward simulation of all scenarios at once; theta may carry tangents.

    Same recursion as :func:`_simulate` but with the scenario axis leading,
    so every fwdiff primitive works on stacked rows.  Returns
    (states, controls, stage_costs, constraint_blocks) as stage-indexed
    lists whose entries have a leading scenario axis.
    """
    prob = nlp.problem
    zeta = nlp.scenarios.zeta  # (S, T+1, n_zeta)
    x = nlp.scenarios.x0       # (S, n_x)
    pen_parts = nlp._penalty_parts()
    xs, us, costs, cons = [], [], [], []
    for t in range(nlp.horizon + 1):
        if t > 0:
            x = prob.f(xs[t - 1], us[t - 1], zeta[:, t])
        u = eval_policy(nlp.policy, theta, x, zeta[:, t])
        xs.append(x)
        us.append(u)
        cost = prob.stage_cost(x, u, zeta[:, t])
        g = prob.constraints(x, u, zeta[:, t])
        gm = g - nlp.margin if t > 0 and np.any(nlp.margin) else g
        if pen_parts is not None:
            pen, relax = pen_parts
            hinge = fd.softplus(gm * (-1.0 / nlp.tau))
            cost = cost + nlp.tau * fd.dot(hinge, pen)
            gm = gm + relax
        costs.append(cost)
        cons.append(gm)
    return xs, us, costs, cons


def rollout(nlp: SampleNlp, theta, s: int) -> RolloutResult:
    """Closed-loop simulation of scenario s under policy parameters theta."""
    theta = np.asarray(theta, dtype=float)
    if s < 0 or s >= nlp.n_samples:
        raise IndexError(f"sample index {s} out of range")
    xs, us, costs, cons = _simulate(nlp, theta, s)
    for t, (x, u) in enumerate(zip(xs, us)):
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
            raise DivergedRolloutError(t)
    gamma = nlp.problem.gamma
    stage_costs = np.array([float(c) for c in costs])
    total = 0.0
    for t in range(nlp.horizon + 1):
        total += gamma ** t * stage_costs[t]
    return RolloutResult(
        states=np.array(xs),
        controls=np.array(us),
        stage_costs=stage_costs,
        total_cost=total,
        constraints=np.array(cons),
    )


def sample_cost(nlp: SampleNlp, theta, s: int):
    """Discounted cost L_s(theta); works for Tangent theta."""
    _, _, costs, _ = _simulate(nlp, theta, s)
    gamma = nlp.problem.gamma
    total = costs[0]
    for t in range(1, nlp.horizon + 1):
        total = total + gamma ** t * costs[t]
    _check_finite(total, 0)
    return total


def sample_constraints(nlp: SampleNlp, theta, s: int):
    """Constraint block G_s(theta): g stacked t-major over t = 0..T."""
    _, _, _, cons = _simulate(nlp, theta, s)
    out = fd.concat(cons)
    _check_finite(out, 0)
    return out


def _check_finite(x, stage):
    v = fd.value_of(x)
    if not np.all(np.isfinite(v)):
        raise DivergedRolloutError(stage, "value")


def cost_gradient(nlp: SampleNlp, theta, s: int) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    _, grad = fd.jvp(lambda th: sample_cost(nlp, th, s), theta, np.eye(theta.size))
    if not np.all(np.isfinite(grad)):
        raise DivergedRolloutError(0, "gradient")
    return grad


def constraint_jacobian(nlp: SampleNlp, theta, s: int) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    _, jac = fd.jvp(
        lambda th: sample_constraints(nlp, th, s), theta, np.eye(theta.size)
    )
    if not np.all(np.isfinite(jac)):
        raise DivergedRolloutError(0, "jacobian")
    return jac


def jtj_accumulate(
    nlp: SampleNlp, theta, s: int, sigma_diag, block_size: int = 64
) -> np.ndarray:
    """J_s^T diag(sigma) J_s without asking the caller to hold J_s.

    Tangent columns are propagated in blocks of ``block_size`` so the AD
    sweep never carries more than that many directions at once; the
    scaled Jacobian is buffered internally and contracted at the end.
    The result is symmetrized.
    """
    theta = np.asarray(theta, dtype=float)
    sigma = np.asarray(sigma_diag, dtype=float)
    if sigma.shape != (nlp.m_per_sample,):
        raise ValueError(f"sigma must have length {nlp.m_per_sample}")
    if np.any(sigma < 0):
        raise ValueError("sigma entries must be nonnegative")
    p = theta.size
    sqrt_sigma = np.sqrt(sigma)
    scaled = np.empty((nlp.m_per_sample, p))
    eye = np.eye(p)
    fn = lambda th: sample_constraints(nlp, th, s)
    for lo in range(0, p, block_size):
        cols = eye[:, lo:lo + block_size]
        _, jac_block = fd.jvp(fn, theta, cols)
        scaled[:, lo:lo + cols.shape[1]] = sqrt_sigma[:, None] * jac_block
    m = scaled.T @ scaled
    return 0.5 * (m + m.T)


def total_cost(nlp: SampleNlp, theta) -> float:
    """Sum of per-sample costs, reduced in fixed ascending order."""
    total = 0.0
    for s in range(nlp.n_samples):
        total += float(fd.value_of(sample_cost(nlp, theta, s)))
    return total


def total_gradient(nlp: SampleNlp, theta) -> np.ndarray:
    grad = np.zeros(np.asarray(theta).size)
    for s in range(nlp.n_samples):
        grad += cost_gradient(nlp, theta, s)
    return grad


def constraints_all(nlp: SampleNlp, theta) -> np.ndarray:
    """All constraint blocks stacked: shape (S, m_per_sample), t-major rows."""
    theta = np.asarray(theta, dtype=float)
    _, _, _, cons = _simulate_all(nlp, theta)
    out = np.concatenate([np.asarray(c, dtype=float) for c in cons], axis=1)
    if not np.all(np.isfinite(out)):
        raise DivergedRolloutError(0, "value")
    return out


def objective_and_constraints(nlp: SampleNlp, theta):
    """Total cost plus all constraint blocks from one derivative-free sweep."""
    theta = np.asarray(theta, dtype=float)
    _, _, costs, cons = _simulate_all(nlp, theta)
    gamma = nlp.problem.gamma
    obj = 0.0
    for t in range(nlp.horizon + 1):
        obj += gamma ** t * float(np.sum(costs[t]))
    g = np.concatenate([np.asarray(c, dtype=float) for c in cons], axis=1)
    if not (np.isfinite(obj) and np.all(np.isfinite(g))):
        raise DivergedRolloutError(0, "value")
    return obj, g


def eval_all(nlp: SampleNlp, theta):
    """Objective, gradient, constraints, and Jacobians in one forward sweep.

    Returns ``(obj, grad, cons, jacs)`` with ``cons`` of shape
    (S, m_per_sample) and ``jacs`` of shape (S, m_per_sample, P).  All
    scenarios share the single tangent propagation, which is much cheaper
    than per-sample sweeps.
    """
    theta = np.asarray(theta, dtype=float)
    p = theta.size
    th = fd.Tangent(theta, np.eye(p))
    _, _, costs, cons = _simulate_all(nlp, th)
    gamma = nlp.problem.gamma
    total = costs[0]
    for t in range(1, nlp.horizon + 1):
        total = total + gamma ** t * costs[t]
    g_all = fd.concat(cons)
    obj_vals = fd.value_of(total)
    obj = float(obj_vals.sum())
    grad = fd.tangent_of(total, p).sum(axis=0)
    cons_v = fd.value_of(g_all)
    jacs = fd.tangent_of(g_all, p)
    if not (
        np.isfinite(obj)
        and np.all(np.isfinite(grad))
        and np.all(np.isfinite(cons_v))
        and np.all(np.isfinite(jacs))
    ):
        raise DivergedRolloutError(0, "value")
    return obj, grad, cons_v, jacs


def lagrangian_hessian(nlp: SampleNlp, theta, lam_blocks) -> np.ndarray:
    """Exact Hessian of  sum_s [ L_s(theta) - lam_s . G_s(theta) ].

    One second-order forward sweep over the whole scenario stack; the
    stage multipliers are constants, so the summed Lagrangian collapses
    to a scalar whose curvature block is the wanted P x P matrix.
    """
    theta = np.asarray(theta, dtype=float)
    gamma = nlp.problem.gamma
    m = nlp.problem.m
    lam = np.stack(
        [np.asarray(lam_blocks[s], dtype=float) for s in range(nlp.n_samples)]
    ).reshape(nlp.n_samples, nlp.horizon + 1, m)

    def scalar_lagrangian(th):
        _, _, costs, cons = _simulate_all(nlp, th)
        total = costs[0] - fd.dot(lam[:, 0], cons[0])
        for t in range(1, nlp.horizon + 1):
            total = total + gamma ** t * costs[t] - fd.dot(lam[:, t], cons[t])
        return total.sum()

    _, _, h = fd.hessian(scalar_lagrangian, theta)
    if not np.all(np.isfinite(h)):
        raise DivergedRolloutError(0, "hessian")
    return h


class RolloutBlockNlp:
    """Adapter exposing a SampleNlp through the block-NLP solver interface."""

    def __init__(self, nlp: SampleNlp):
        self.nlp = nlp

    @property
    def n_params(self) -> int:
        return self.nlp.n_params

    @property
    def n_blocks(self) -> int:
        return self.nlp.n_samples

    @property
    def block_dims(self) -> list[int]:
        return [self.nlp.m_per_sample] * self.nlp.n_samples

    def objective(self, theta) -> float:
        return total_cost(self.nlp, theta)

    def gradient(self, theta) -> np.ndarray:
        return total_gradient(self.nlp, theta)

    def block_constraints(self, theta, i: int) -> np.ndarray:
        return np.asarray(fd.value_of(sample_constraints(self.nlp, theta, i)))

    def block_jacobian(self, theta, i: int) -> np.ndarray:
        return constraint_jacobian(self.nlp, theta, i)

    def eval_all(self, theta):
        """Batched (objective, gradient, constraints, Jacobians) evaluation."""
        return eval_all(self.nlp, theta)

    def all_constraints(self, theta) -> np.ndarray:
        """Constraint values for every block, shape (n_blocks, m_per_block)."""
        return constraints_all(self.nlp, theta)

    def objective_and_constraints(self, theta):
        """(objective, all constraint blocks) without any derivative work."""
        return objective_and_constraints(self.nlp, theta)

    def lagrangian_hessian(self, theta, lam_blocks):
        return lagrangian_hessian(self.nlp, theta, lam_blocks)
