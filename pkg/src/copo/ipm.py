"""Primal-dual interior-point solver with condensed Schur-complement steps.

Solves  min L(theta)  s.t.  G_i(theta) >= 0,  i = 1..S  by introducing
slacks G_i = s_i, a log-barrier on s_i, and damped-BFGS (or exact)
Hessians.  Each Newton step is computed from the reduced P x P system

    (H + delta I + sum_i J_i^T Sigma_i J_i) d_theta = rhs,

with Sigma_i = diag(lambda_i / s_i), solved by Cholesky; slack and
multiplier directions are recovered by back-substitution.

Sign convention for the full primal-dual system, with residuals
r_theta = sum_i J_i^T lam_i - grad L,  r_s_i = lam_i - mu / s_i,
r_lam_i = s_i - G_i:

    [ H + delta I   .    J^T ] [d_theta]   [r_theta]
    [     .       Sigma   I  ] [d_s   ] = [r_s    ]
    [     J         I     .  ] [d_lam ]   [r_lam  ]

The actual iterate updates are theta += a*d_theta, s -= a*d_s,
lam -= a_dual*d_lam; the flipped slack/multiplier signs make the block
identities above hold exactly, which is what the dense-system tests
check.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .nlp import DivergedRolloutError

__all__ = [
    "IpmOptions",
    "IpmIterate",
    "IpmResult",
    "SolverFailure",
    "CallableBlockNlp",
    "build_condensed",
    "solve_condensed",
    "recover_directions",
    "ipm_solve",
    "format_iteration_log",
]


class SolverFailure(RuntimeError):
    pass


@dataclass
class IpmOptions:
    tol: float = 1e-6
    mu0: float = 1e-1
    kappa_mu: float = 0.2        # barrier shrink factor
    theta_mu: float = 1.5        # superlinear barrier exponent
    kappa_eps: float = 10.0      # subproblem tolerance = kappa_eps * mu
    max_iter: int = 500
    ls_max: int = 40
    step_min: float = 1e-12
    slack_floor: float = 1e-2
    reg_ladder: tuple = (
        0.0, 1e-8, 1e-6, 1e-5, 3e-5, 1e-4, 3e-4, 1e-3, 3e-3,
        1e-2, 3e-2, 1e-1, 3e-1, 1.0, 3.0, 10.0, 1e2, 1e3, 1e4, 1e6,
        1e8, 1e10, 1e12,
    )
    hessian: str = "exact"       # "exact" | "bfgs" | "fd" (fd: small P, tests)
    fd_step: float = 1e-5
    kappa_sigma: float = 1e10    # multiplier/slack consistency safeguard
    lam_init_max: float = 1.0    # cap on the initial multipliers
    polish_kkt: float = 1e-3     # KKT level where pure Newton polish kicks in
    max_seconds: float | None = None  # wall-clock budget; None = unlimited

    def __post_init__(self):
        if not 0.0 < self.kappa_mu < 1.0:
            raise ValueError("kappa_mu must lie in (0, 1)")
        if min(self.tol, self.mu0, self.kappa_eps, self.step_min) <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class IpmIterate:
    theta: np.ndarray
    slacks: list          # per block, strictly positive
    lam: list             # per block, strictly positive
    mu: float


@dataclass
class IpmResult:
    theta: np.ndarray
    success: bool
    status: str
    iterations: int
    kkt: float
    mu: float
    objective: float
    n_reg_retries: int
    lam: list = field(default_factory=list)
    slacks: list = field(default_factory=list)
    log_rows: list = field(default_factory=list)

    def log_text(self) -> str:
        return format_iteration_log(self.log_rows)


class CallableBlockNlp:
    """Block NLP assembled from plain callables (used by tests and the
    MPC quadratic subproblem)."""

    def __init__(self, n_params, objective, gradient, blocks, hessian=None):
        """``blocks`` is a list of (constraint_fn, jacobian_fn) pairs."""
        self.n_params = n_params
        self._objective = objective
        self._gradient = gradient
        self._blocks = list(blocks)
        self._hessian = hessian

    @property
    def n_blocks(self):
        return len(self._blocks)

    def objective(self, theta):
        return float(self._objective(theta))

    def gradient(self, theta):
        return np.asarray(self._gradient(theta), dtype=float)

    def block_constraints(self, theta, i):
        return np.atleast_1d(np.asarray(self._blocks[i][0](theta), dtype=float))

    def block_jacobian(self, theta, i):
        return np.atleast_2d(np.asarray(self._blocks[i][1](theta), dtype=float))

    def lagrangian_hessian(self, theta, lam_blocks):
        if self._hessian is None:
            return None
        return np.asarray(self._hessian(theta, lam_blocks), dtype=float)


# ---------------------------------------------------------------------------
# Step computation
# ---------------------------------------------------------------------------


def build_condensed(hess, jacobians, sigmas, r_theta, r_slack, r_mult):
    """Assemble the reduced system matrix and right-hand side.

    M = H + sum_i J_i^T diag(sigma_i) J_i,
    rhs = r_theta - sum_i J_i^T (r_slack_i - sigma_i * r_mult_i).

    Primal regularization is added later, inside the factorization retry
    loop.
    """
    m = np.array(hess, dtype=float, copy=True)
    rhs = np.array(r_theta, dtype=float, copy=True)
    for jac, sigma, r_s, r_l in zip(jacobians, sigmas, r_slack, r_mult):
        m += jac.T @ (sigma[:, None] * jac)
        rhs -= jac.T @ (r_s - sigma * r_l)
    m = 0.5 * (m + m.T)
    if not (np.all(np.isfinite(m)) and np.all(np.isfinite(rhs))):
        raise SolverFailure("non-finite entries in condensed system")
    return m, rhs


def solve_condensed(m, rhs, reg_ladder=(0.0,), start_index=0):
    """Cholesky solve with an escalating primal regularization ladder.

    Returns (d_theta, delta_used, ladder_index).  Raises SolverFailure
    when the ladder is exhausted.
    """
    p = m.shape[0]
    for idx in range(start_index, len(reg_ladder)):
        delta = reg_ladder[idx]
        try:
            cf = scipy.linalg.cho_factor(m + delta * np.eye(p), lower=True)
        except np.linalg.LinAlgError:
            continue
        except scipy.linalg.LinAlgError:  # pragma: no cover - alias guard
            continue
        d = scipy.linalg.cho_solve(cf, rhs)
        if np.all(np.isfinite(d)):
            return d, delta, idx
    raise SolverFailure("regularization ladder exhausted in condensed solve")


def recover_directions(d_theta, jacobians, sigmas, r_slack, r_mult):
    """Back-substitute slack and multiplier directions from d_theta."""
    d_s, d_lam = [], []
    for jac, sigma, r_s, r_l in zip(jacobians, sigmas, r_slack, r_mult):
        ds = r_l - jac @ d_theta
        d_s.append(ds)
        d_lam.append(r_s - sigma * ds)
    return d_s, d_lam


def _fraction_to_boundary(v, dv, tau):
    """Largest a <= 1 with v - a*dv >= (1 - tau) * v (v > 0 elementwise)."""
    alpha = 1.0
    mask = dv > 0
    if np.any(mask):
        alpha = min(alpha, float(np.min(tau * v[mask] / dv[mask])))
    return alpha


def _scaled_kkt(r_dual, primal_infeas, comps, lam_all, s_max=100.0):
    """Ipopt-style scaled optimality error."""
    n_lam = lam_all.size
    s_d = max(s_max, np.sum(np.abs(lam_all)) / max(1, n_lam)) / s_max
    err_d = np.max(np.abs(r_dual)) / s_d
    err_p = max((np.max(np.abs(c)) for c in primal_infeas), default=0.0)
    err_c = max((np.max(np.abs(c)) for c in comps), default=0.0) / s_d
    return max(err_d, err_p, err_c)


def _fd_lagrangian_hessian(problem, theta, lam, h):
    """Central-difference Hessian of the Lagrangian; small P only."""
    p = theta.size

    def grad_lag(th):
        g = problem.gradient(th)
        for i in range(problem.n_blocks):
            g -= problem.block_jacobian(th, i).T @ lam[i]
        return g

    hess = np.zeros((p, p))
    for j in range(p):
        e = np.zeros(p)
        e[j] = h
        hess[:, j] = (grad_lag(theta + e) - grad_lag(theta - e)) / (2 * h)
    return 0.5 * (hess + hess.T)


def _bfgs_update(b, s_step, y):
    """Powell-damped BFGS update keeping B positive definite."""
    sy = float(s_step @ y)
    bs = b @ s_step
    sbs = float(s_step @ bs)
    if sbs <= 0:
        return b
    if sy < 0.2 * sbs:
        phi = 0.8 * sbs / (sbs - sy)
        y = phi * y + (1.0 - phi) * bs
        sy = float(s_step @ y)
    if sy <= 1e-16 * max(1.0, sbs):
        return b
    b = b - np.outer(bs, bs) / sbs + np.outer(y, y) / sy
    return 0.5 * (b + b.T)


def format_iteration_log(rows) -> str:
    lines = ["iter  objective        kkt          mu         alpha      delta"]
    for r in rows:
        lines.append(
            "{iter:4d}  {obj: .8e}  {kkt:.3e}  {mu:.3e}  {alpha:.3e}  {delta:.1e}".format(
                **r
            )
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Main solve loop
# ---------------------------------------------------------------------------


def _full_eval(problem, theta, nb, p, slacks, lam):
    """Objective, derivatives, residuals, and KKT error at one point.

    Uses the problem's batched ``eval_all`` when offered; otherwise falls
    back to the per-block interface.
    """
    if hasattr(problem, "eval_all"):
        obj, grad, cons, jacs = problem.eval_all(theta)
        cons = list(cons)
        jacs = list(jacs)
    else:
        obj = problem.objective(theta)
        grad = problem.gradient(theta)
        cons = [problem.block_constraints(theta, i) for i in range(nb)]
        jacs = [problem.block_jacobian(theta, i) for i in range(nb)]
    jtlam = np.zeros(p)
    for jac, l in zip(jacs, lam):
        jtlam += jac.T @ l
    r_dual = grad - jtlam
    prim = [c - s for c, s in zip(cons, slacks)]
    lam_all = np.concatenate(lam) if nb else np.zeros(0)
    kkt = _scaled_kkt(r_dual, prim, [s * l for s, l in zip(slacks, lam)], lam_all)
    return dict(
        obj=float(obj), grad=grad, cons=cons, jacs=jacs, jtlam=jtlam,
        r_dual=r_dual, prim=prim, lam_all=lam_all, kkt=kkt,
    )


def _trial_eval(problem, theta, nb):
    """Objective and constraint blocks only (line-search probes)."""
    if hasattr(problem, "objective_and_constraints"):
        obj, g = problem.objective_and_constraints(theta)
        return float(obj), list(g)
    return (
        problem.objective(theta),
        [problem.block_constraints(theta, i) for i in range(nb)],
    )


def ipm_solve(problem, theta0, options: IpmOptions | None = None) -> IpmResult:
    """Interior-point solve of  min L(theta)  s.t.  G_i(theta) >= 0.

    ``problem`` implements the block-NLP interface (n_params, n_blocks,
    objective, gradient, block_constraints, block_jacobian,
    lagrangian_hessian); the batched ``eval_all`` /
    ``objective_and_constraints`` methods are used when present.  Returns
    the final iterate together with iteration statistics; ``success``
    means the scaled KKT error dropped below ``options.tol``.

    Globalization is an l1 merit line search with magic-step slack
    resets.  Two refinements deal with the nearly singular condensed
    systems that overparameterized policies produce: the regularization
    rung is remembered across iterations (stepping down after full steps,
    up after tiny ones), and once the KKT error is small the solver
    switches to plain Newton steps accepted on KKT decrease, which are
    free of merit-function bias.
    """
    opt = options or IpmOptions()
    theta = np.array(theta0, dtype=float, copy=True)
    p = theta.size
    nb = problem.n_blocks
    mu = opt.mu0
    mu_min = opt.tol / 10.0
    ladder = tuple(opt.reg_ladder)
    # the rung memory never ratchets past the moderate part of the ladder
    rung_cap = max(
        (i for i, v in enumerate(ladder) if v <= 10.0), default=len(ladder) - 1
    )
    t_start = time.perf_counter()

    _, cons = _trial_eval(problem, theta, nb)
    slacks = [np.maximum(c, opt.slack_floor) for c in cons]
    # cap the initial multipliers: mu / s explodes on floored slacks at an
    # infeasible start, and large multipliers poison the Lagrangian Hessian
    lam = [np.minimum(mu / s, opt.lam_init_max) for s in slacks]

    bfgs = np.eye(p)
    prev = None  # (theta, grad, jacobians) for the delayed BFGS update
    rung = 0
    n_reg_retries = 0
    nu = 1.0
    rows = []
    status = "max_iterations"
    success = False
    it = 0
    kkt0 = np.inf
    ev = None

    def kkt_at(e, mu_val):
        return _scaled_kkt(
            e["r_dual"], e["prim"],
            [s * l - mu_val for s, l in zip(slacks, lam)], e["lam_all"],
        )

    def try_kkt_step(d_theta, d_s, d_lam, a_s, a_l, ref):
        """Accept a plain primal-dual step on sufficient KKT decrease."""
        alpha = a_s
        for _ in range(6):
            if alpha < 1e-6:
                return None, 0.0
            theta_t = theta + alpha * d_theta
            slacks_t = [s - alpha * ds for s, ds in zip(slacks, d_s)]
            lam_t = [
                np.clip(l - min(alpha, a_l) * dl, 1e-16, 1e12)
                for l, dl in zip(lam, d_lam)
            ]
            try:
                ev_t = _full_eval(problem, theta_t, nb, p, slacks_t, lam_t)
            except DivergedRolloutError:
                alpha *= 0.5
                continue
            kkt_mu_t = _scaled_kkt(
                ev_t["r_dual"], ev_t["prim"],
                [s * l - mu for s, l in zip(slacks_t, lam_t)], ev_t["lam_all"],
            )
            if kkt_mu_t < ref * (1.0 - 1e-4 * alpha):
                return (theta_t, slacks_t, lam_t, ev_t), alpha
            alpha *= 0.5
        return None, 0.0

    for it in range(1, opt.max_iter + 1):
        if (
            opt.max_seconds is not None
            and time.perf_counter() - t_start > opt.max_seconds
        ):
            status = "time_limit"
            break
        if ev is None:
            ev = _full_eval(problem, theta, nb, p, slacks, lam)
        kkt0 = ev["kkt"]
        if kkt0 <= opt.tol:
            status, success = "optimal", True
            rows.append(dict(iter=it, obj=ev["obj"], kkt=kkt0,
                             mu=mu, alpha=0.0, delta=0.0))
            break

        grad, jacs, cons = ev["grad"], ev["jacs"], ev["cons"]
        r_dual, prim, lam_all, jtlam = (
            ev["r_dual"], ev["prim"], ev["lam_all"], ev["jtlam"]
        )
        obj0 = ev["obj"]

        # BFGS update uses current multipliers and the cached previous point
        if opt.hessian == "bfgs" and prev is not None:
            th_prev, g_prev, jacs_prev = prev
            y = r_dual.copy()
            for jac_p, l in zip(jacs_prev, lam):
                y += jac_p.T @ l
            y -= g_prev
            step = theta - th_prev
            if float(step @ step) > 0:
                bfgs = _bfgs_update(bfgs, step, y)

        # barrier update: shrink mu once the subproblem is solved to kappa*mu
        while mu > mu_min and kkt_at(ev, mu) <= opt.kappa_eps * mu:
            mu = max(mu_min, min(opt.kappa_mu * mu, mu ** opt.theta_mu))
        kkt_mu0 = kkt_at(ev, mu)
        ev = None
        tau = max(0.99, 1.0 - mu)

        if opt.hessian == "exact":
            hess = problem.lagrangian_hessian(theta, lam)
            if hess is None:
                raise SolverFailure("problem does not provide an exact Hessian")
        elif opt.hessian == "fd":
            hess = _fd_lagrangian_hessian(problem, theta, lam, opt.fd_step)
        else:
            hess = bfgs

        # Sigma is built from multipliers projected onto a neighbourhood of
        # the barrier target mu / s, which keeps the condensed system from
        # degenerating when lam and s drift apart.
        kap = opt.kappa_sigma
        sigmas = [
            np.clip(l, mu / (kap * s), kap * mu / s) / s
            for l, s in zip(lam, slacks)
        ]
        r_theta = jtlam - grad
        r_slack = [l - mu / s for l, s in zip(lam, slacks)]
        r_mult = [s - c for s, c in zip(slacks, cons)]
        m, rhs = build_condensed(hess, jacs, sigmas, r_theta, r_slack, r_mult)

        def directions(start):
            d_theta, delta, idx = solve_condensed(m, rhs, ladder, start)
            d_s, d_lam = recover_directions(d_theta, jacs, sigmas, r_slack, r_mult)
            a_s = 1.0
            a_l = 1.0
            for s, ds in zip(slacks, d_s):
                a_s = min(a_s, _fraction_to_boundary(s, ds, tau))
            for l, dl in zip(lam, d_lam):
                a_l = min(a_l, _fraction_to_boundary(l, dl, tau))
            return d_theta, d_s, d_lam, delta, idx, a_s, a_l

        accepted = False
        alpha = 0.0
        delta = 0.0
        obj_new = obj0

        # Newton polish: near a solution the merit function rejects the
        # long steps the degenerate condensed system needs, so take the
        # least-regularized step and ask only for KKT progress.
        if kkt0 < opt.polish_kkt:
            d_theta, d_s, d_lam, delta, idx, a_s, a_l = directions(0)
            res, alpha = try_kkt_step(d_theta, d_s, d_lam, a_s, a_l, kkt_mu0)
            if res is not None:
                prev = (theta.copy(), grad, jacs)
                theta, slacks, lam, ev = res
                accepted = True
                obj_new = ev["obj"]

        if not accepted:
            # l1 merit line search on the barrier objective.  The penalty
            # weight must exceed the multiplier norm (exactness); it decays
            # toward that floor so early feasibility emergencies do not
            # poison later iterations.
            infeas0 = sum(float(np.sum(np.abs(c))) for c in prim)
            barrier0 = obj0 - mu * sum(float(np.sum(np.log(s))) for s in slacks)
            start = rung
            for _round in range(2):
                d_theta, d_s, d_lam, delta, idx, a_s, a_l = directions(start)
                if idx > 0:
                    n_reg_retries += 1
                dd_obj = float(grad @ d_theta) - mu * sum(
                    float(np.sum(-ds / s)) for s, ds in zip(slacks, d_s)
                )
                nu_floor = float(np.max(np.abs(lam_all), initial=0.0)) * 1.1 + 1e-4
                if dd_obj > 0.0 and infeas0 > 1e-12:
                    nu_floor = max(nu_floor, dd_obj / (0.5 * infeas0))
                nu = max(nu_floor, min(nu, max(nu_floor, 0.5 * nu)))
                descent = dd_obj - nu * infeas0
                merit_0 = barrier0 + nu * infeas0

                alpha = a_s
                for _ in range(opt.ls_max):
                    if alpha < opt.step_min:
                        break
                    theta_t = theta + alpha * d_theta
                    try:
                        obj_t, cons_t = _trial_eval(problem, theta_t, nb)
                    except DivergedRolloutError:
                        alpha *= 0.5
                        continue
                    if not np.isfinite(obj_t):
                        alpha *= 0.5
                        continue
                    # slack reset: for each row the merit is minimized
                    # exactly at s = max(G, mu / nu), so trial slacks jump
                    # there instead of following the linearized step
                    slacks_t = [np.maximum(c, mu / nu) for c in cons_t]
                    merit_t = (
                        obj_t
                        - mu * sum(float(np.sum(np.log(s))) for s in slacks_t)
                        + nu * sum(
                            float(np.sum(np.abs(c - s)))
                            for c, s in zip(cons_t, slacks_t)
                        )
                    )
                    if merit_t <= (
                        merit_0 + 1e-4 * alpha * min(descent, 0.0)
                        + 1e-12 * abs(merit_0)
                    ):
                        accepted = True
                        obj_new = obj_t
                        prev = (theta.copy(), grad, jacs)
                        theta = theta_t
                        slacks = slacks_t
                        # the dual step is tied to the primal one; a full
                        # dual step after a truncated primal step would
                        # re-inflate the dual residual
                        lam = [
                            np.clip(l - min(alpha, a_l) * dl, 1e-16, 1e12)
                            for l, dl in zip(lam, d_lam)
                        ]
                        break
                    alpha *= 0.5

                if accepted:
                    if alpha >= 0.5:
                        rung = max(0, idx - 1)
                    elif alpha < 1e-2:
                        rung = min(idx + 1, rung_cap)
                    else:
                        rung = idx
                    break
                # escalate regularization once, inside this iteration only
                start = min(idx + 2, len(ladder) - 1)
                n_reg_retries += 1

            if not accepted:
                # last resort: accept any KKT decrease at the lowest rung
                d_theta, d_s, d_lam, delta, idx, a_s, a_l = directions(0)
                res, alpha = try_kkt_step(d_theta, d_s, d_lam, a_s, a_l, kkt_mu0)
                if res is not None:
                    prev = (theta.copy(), grad, jacs)
                    theta, slacks, lam, ev = res
                    accepted = True
                    obj_new = ev["obj"]

            if not accepted:
                status = "line_search_failure"
                break

        rows.append(dict(iter=it, obj=obj_new, kkt=kkt0, mu=mu,
                         alpha=alpha, delta=delta))

    return IpmResult(
        theta=theta,
        success=success,
        status=status,
        iterations=it,
        kkt=kkt0,
        mu=mu,
        objective=_trial_eval(problem, theta, nb)[0],
        n_reg_retries=n_reg_retries,
        lam=lam,
        slacks=slacks,
        log_rows=rows,
    )
