"""LQR and certainty-equivalent MPC baselines on the augmented state.

Both controllers work on the stacked state (x, zeta).  The LQR gain
comes from a discounted Riccati fixed-point iteration with a state-input
cross term (the price term of the benchmark cost couples the disturbance
state to the control); its output is saturated at the input box.  The
MPC controller solves a horizon-N condensed quadratic program with
zero-innovation predictions and falls back to the LQR move whenever the
program is infeasible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import fwdiff as fd
from . import ipm
from . import model as _model
from .policy import MlpPolicy, eval_policy

__all__ = [
    "AugmentedLti",
    "LqrController",
    "MpcController",
    "MpcSolveError",
    "StabilizabilityError",
    "solve_dare",
    "lqr_act",
    "mpc_act",
    "benchmark_augmented_model",
    "make_lqr_controller",
    "make_mpc_controller",
    "imitation_init",
    "imitation_fit",
    "rollout_imitation_points",
]


class StabilizabilityError(RuntimeError):
    pass


class MpcSolveError(RuntimeError):
    """Numerical failure of the MPC subproblem (distinct from infeasibility)."""


@dataclass(frozen=True)
class AugmentedLti:
    """Linear model on the stacked (x, zeta) state with quadratic cost.

    Stage cost is  x~' Q x~ + u' R u + 2 x~' N u, discounted by gamma.
    """

    a: np.ndarray
    b: np.ndarray
    q: np.ndarray
    r: np.ndarray
    n: np.ndarray
    gamma: float

    def __post_init__(self):
        r = np.asarray(self.r)
        if not np.allclose(r, r.T):
            raise ValueError("R must be symmetric")
        if np.any(np.linalg.eigvalsh(r) <= 0):
            raise ValueError("R must be positive definite")

    @property
    def n_state(self) -> int:
        return self.a.shape[0]

    @property
    def n_input(self) -> int:
        return self.b.shape[1]


def solve_dare(model: AugmentedLti, tol: float = 1e-12, max_iter: int = 200_000):
    """Discounted Riccati fixed point with cross term, by value iteration.

    P = Q + g A'PA - (g A'PB + N)(R + g B'PB)^-1 (g B'PA + N'),
    K = (R + g B'PB)^-1 (g B'PA + N'),   u = -K x~.

    Iterates until successive P differ by at most ``tol`` in max norm;
    non-convergence within ``max_iter`` raises StabilizabilityError.
    """
    a, b, q, r, n, g = (
        np.asarray(model.a, dtype=float),
        np.asarray(model.b, dtype=float),
        np.asarray(model.q, dtype=float),
        np.asarray(model.r, dtype=float),
        np.asarray(model.n, dtype=float),
        float(model.gamma),
    )
    p = q.copy()
    for _ in range(max_iter):
        gbtp = g * (b.T @ p)
        k = np.linalg.solve(r + gbtp @ b, gbtp @ a + n.T)
        p_next = q + g * (a.T @ p @ a) - (g * (a.T @ p @ b) + n) @ k
        p_next = 0.5 * (p_next + p_next.T)
        if np.max(np.abs(p_next - p)) <= tol:
            gbtp = g * (b.T @ p_next)
            k = np.linalg.solve(r + gbtp @ b, gbtp @ a + n.T)
            return p_next, k
        p = p_next
    raise StabilizabilityError(
        f"Riccati iteration did not converge in {max_iter} iterations"
    )


@dataclass(frozen=True)
class LqrController:
    gain: np.ndarray
    riccati: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray

    def __call__(self, x, zeta):
        return lqr_act(self, np.concatenate([np.atleast_1d(x), np.atleast_1d(zeta)]))

    def export_csv(self, gain_path, riccati_path) -> None:
        np.savetxt(gain_path, self.gain, delimiter=",")
        np.savetxt(riccati_path, self.riccati, delimiter=",")


def lqr_act(ctrl: LqrController, x_aug) -> np.ndarray:
    """Saturated LQR move: clamp(-K x~) at the input box."""
    x_aug = np.asarray(x_aug, dtype=float)
    if x_aug.shape != (ctrl.gain.shape[1],):
        raise ValueError(f"augmented state must have shape ({ctrl.gain.shape[1]},)")
    return np.clip(-ctrl.gain @ x_aug, ctrl.u_min, ctrl.u_max)


def benchmark_augmented_model(gamma: float = 0.99, eps: float = 1e-9) -> AugmentedLti:
    """Augmented LTI model of the benchmark under zero innovations.

    The state transition carries the one-step-ahead disturbance feed
    c * psi(A_zeta zeta) that enters the plant dynamics.  The zeta block
    of the state cost gets a small eps ridge so the Riccati iteration has
    a strictly PSD state weight.
    """
    a_xx = _model.BENCH_A
    a_zz = _model.BENCH_A_ZETA
    c = _model.BENCH_DRIVE[:, None] @ (_model.BENCH_PSI @ a_zz)[None, :]
    a_aug = np.block([[a_xx, c], [np.zeros((3, 3)), a_zz]])
    b_aug = np.vstack([np.eye(3), np.zeros((3, 3))])
    q_aug = np.block(
        [[1e-3 * np.eye(3), np.zeros((3, 3))], [np.zeros((3, 3)), eps * np.eye(3)]]
    )
    n_aug = np.vstack(
        [np.zeros((3, 3)), 0.5 * _model.BENCH_PSI[:, None] @ _model.BENCH_PRICE[None, :]]
    )
    return AugmentedLti(a=a_aug, b=b_aug, q=q_aug, r=np.eye(3), n=n_aug, gamma=gamma)


def make_lqr_controller(
    aug: AugmentedLti | None = None,
    u_max: float = _model.BENCH_U_MAX,
    tol: float = 1e-12,
) -> LqrController:
    aug = aug if aug is not None else benchmark_augmented_model()
    p, k = solve_dare(aug, tol=tol)
    nu = aug.n_input
    return LqrController(
        gain=k, riccati=p, u_min=-u_max * np.ones(nu), u_max=u_max * np.ones(nu)
    )


# ---------------------------------------------------------------------------
# MPC
# ---------------------------------------------------------------------------


@dataclass
class MpcController:
    """Receding-horizon QP on the augmented model, LQR fallback.

    The horizon-N program is condensed onto the stacked input vector U:
    state boxes are enforced on the x-part at stages 1..N, input boxes at
    stages 0..N-1, predictions use zero innovations.  Feasibility is
    certified by an elastic phase-1 subproblem when the QP solve does not
    converge.
    """

    aug: AugmentedLti
    lqr: LqrController
    horizon: int = 20
    x_max: float = _model.BENCH_X_MAX
    u_max: float = _model.BENCH_U_MAX
    n_x: int = 3
    feas_tol: float = 1e-6
    qp_options: ipm.IpmOptions = field(
        default_factory=lambda: ipm.IpmOptions(tol=1e-8, max_iter=200, hessian="exact")
    )
    fallback_count: int = 0

    def __post_init__(self):
        self._build_condensed_qp()

    def _build_condensed_qp(self):
        a, b, g = self.aug.a, self.aug.b, self.aug.gamma
        n_aug, nu, nn = self.aug.n_state, self.aug.n_input, self.horizon
        # prediction matrices: X_k = A^k x0 + sum_{j<k} A^{k-1-j} B u_j
        powers = [np.eye(n_aug)]
        for _ in range(nn):
            powers.append(a @ powers[-1])
        phi = np.vstack(powers)  # stages 0..N stacked
        gam = np.zeros(((nn + 1) * n_aug, nn * nu))
        for k in range(1, nn + 1):
            for j in range(k):
                gam[k * n_aug:(k + 1) * n_aug, j * nu:(j + 1) * nu] = (
                    powers[k - 1 - j] @ b
                )
        # cost over stages 0..N-1
        rows_c = slice(0, nn * n_aug)
        phi_c, gam_c = phi[rows_c], gam[rows_c]
        q_bar = sla.block_diag(*[g ** k * self.aug.q for k in range(nn)])
        r_bar = sla.block_diag(*[g ** k * self.aug.r for k in range(nn)])
        n_bar = np.zeros((nn * n_aug, nn * nu))
        for k in range(nn):
            n_bar[k * n_aug:(k + 1) * n_aug, k * nu:(k + 1) * nu] = g ** k * self.aug.n
        hess = 2.0 * (
            gam_c.T @ q_bar @ gam_c + r_bar + gam_c.T @ n_bar + n_bar.T @ gam_c
        )
        self._hess = 0.5 * (hess + hess.T)
        self._q_of_x = 2.0 * (gam_c.T @ q_bar + n_bar.T) @ phi_c
        # x-part selection at stages 1..N
        sel = np.zeros((nn * self.n_x, (nn + 1) * n_aug))
        for k in range(1, nn + 1):
            sel[(k - 1) * self.n_x:k * self.n_x, k * n_aug:k * n_aug + self.n_x] = (
                np.eye(self.n_x)
            )
        gx = sel @ gam
        self._px = sel @ phi
        n_u_vars = nn * nu
        eye_u = np.eye(n_u_vars)
        self._con_mat = np.vstack([gx, -gx, eye_u, -eye_u])
        self._n_state_rows = gx.shape[0]
        self._n_u_vars = n_u_vars
        try:
            self._hess_chol = np.linalg.cholesky(self._hess)
        except np.linalg.LinAlgError as exc:  # QP must be strictly convex
            raise MpcSolveError("condensed MPC Hessian is not positive definite") from exc

    def _constraint_offset(self, x_aug):
        xs = self._px @ x_aug
        ns, nu_vars = self._n_state_rows, self._n_u_vars
        return np.concatenate(
            [
                xs + self.x_max,
                self.x_max - xs,
                np.full(nu_vars, self.u_max),
                np.full(nu_vars, self.u_max),
            ]
        )

    def __call__(self, x, zeta):
        return mpc_act(
            self, np.concatenate([np.atleast_1d(x), np.atleast_1d(zeta)])
        )


def mpc_act(ctrl: MpcController, x_aug) -> np.ndarray:
    """First move of the horizon-N quadratic program, or the LQR fallback."""
    x_aug = np.asarray(x_aug, dtype=float)
    if x_aug.shape != (ctrl.aug.n_state,):
        raise ValueError(f"augmented state must have shape ({ctrl.aug.n_state},)")
    q = ctrl._q_of_x @ x_aug
    offset = ctrl._constraint_offset(x_aug)
    a_con = ctrl._con_mat
    nu = ctrl.aug.n_input

    # unconstrained minimizer shortcut
    u_unc = -np.linalg.solve(ctrl._hess, q)
    if np.all(a_con @ u_unc + offset >= 0):
        return u_unc[:nu]

    qp = ipm.CallableBlockNlp(
        n_params=ctrl._n_u_vars,
        objective=lambda u: 0.5 * u @ ctrl._hess @ u + q @ u,
        gradient=lambda u: ctrl._hess @ u + q,
        blocks=[(lambda u: a_con @ u + offset, lambda u: a_con)],
        hessian=lambda u, lam: ctrl._hess,
    )
    res = ipm.ipm_solve(qp, np.zeros(ctrl._n_u_vars), ctrl.qp_options)
    if res.success:
        return res.theta[:nu]

    # classify: elastic phase-1 certifies (in)feasibility of the box program
    if _phase1_infeasible(a_con, offset, ctrl.feas_tol):
        ctrl.fallback_count += 1
        return lqr_act(ctrl.lqr, x_aug)
    raise MpcSolveError(f"MPC quadratic program failed: {res.status}")


def _phase1_infeasible(a_con, offset, feas_tol: float) -> bool:
    """Minimize the elastic bound t subject to G(u) + t >= 0."""
    n_u = a_con.shape[1]
    n_v = n_u + 1
    e_t = np.zeros(n_v)
    e_t[-1] = 1.0
    a_ext = np.hstack([a_con, np.ones((a_con.shape[0], 1))])

    def cons(v):
        return a_ext @ v + offset

    qp = ipm.CallableBlockNlp(
        n_params=n_v,
        objective=lambda v: v[-1],
        gradient=lambda v: e_t,
        blocks=[(cons, lambda v: a_ext)],
        hessian=lambda v, lam: np.zeros((n_v, n_v)),
    )
    t0 = max(0.0, -float(np.min(offset))) + 1.0
    v0 = np.zeros(n_v)
    v0[-1] = t0
    res = ipm.ipm_solve(
        qp, v0, ipm.IpmOptions(tol=1e-8, max_iter=300, hessian="exact")
    )
    if not res.success:
        raise MpcSolveError(f"phase-1 feasibility solve failed: {res.status}")
    return float(res.theta[-1]) > feas_tol


def imitation_init(
    policy: MlpPolicy,
    controller,
    theta0,
    n_x: int,
    seed: int = 7,
    n_points: int = 400,
    x_halfwidth: float = 0.2,
    zeta_halfwidth: float = 1.0,
    max_iter: int = 60,
    ridge: float = 1e-4,
) -> np.ndarray:
    """Fit policy parameters to a reference controller by damped least squares.

    Samples (x, zeta) points uniformly, records the controller's moves as
    regression targets, and runs a Levenberg-Marquardt fit of the network
    outputs to them.  The ridge term keeps the weights small, which lands
    the fit in a well-conditioned region of parameter space; the result
    is meant as a warm start for the interior-point training, not as a
    controller in its own right.
    """
    rng = np.random.default_rng(seed)
    n_in = policy.layer_sizes[0]
    n_zeta = n_in - n_x
    if n_zeta < 1:
        raise ValueError("policy input layer too small for the given state dim")
    xs = rng.uniform(-x_halfwidth, x_halfwidth, size=(n_points, n_x))
    zs = rng.uniform(-zeta_halfwidth, zeta_halfwidth, size=(n_points, n_zeta))
    tgt = np.array(
        [np.asarray(controller(x, z), dtype=float) for x, z in zip(xs, zs)]
    )
    return imitation_fit(policy, theta0, xs, zs, tgt, max_iter=max_iter, ridge=ridge)


def rollout_imitation_points(controller, problem, scenarios):
    """Closed-loop (state, disturbance state, move) triples of a controller.

    Rolls the controller through every scenario and stacks the visited
    points.  Unlike uniform sampling over the state box, these points lie
    on the reachable set, so a controller that is only well defined there
    (the MPC program can be infeasible at artificial corner states) gives
    clean targets.
    """
    zeta = scenarios.zeta
    n_s, horizon = zeta.shape[0], zeta.shape[1] - 1
    x = np.array(scenarios.x0, dtype=float, copy=True)
    xs, zs, us = [], [], []
    for t in range(horizon + 1):
        u = np.array(
            [np.asarray(controller(x[s], zeta[s, t]), dtype=float)
             for s in range(n_s)]
        )
        xs.append(x)
        zs.append(zeta[:, t])
        us.append(u)
        if t < horizon:
            x = problem.f(x, u, zeta[:, t + 1])
    return np.concatenate(xs), np.concatenate(zs), np.concatenate(us)


def imitation_fit(
    policy: MlpPolicy,
    theta0,
    xs,
    zs,
    tgt,
    max_iter: int = 60,
    ridge: float = 1e-4,
) -> np.ndarray:
    """Levenberg-Marquardt fit of the policy outputs to given targets."""
    theta = np.array(theta0, dtype=float, copy=True)
    p = theta.size
    eye = np.eye(p)

    def residuals(th):
        val, jac = fd.jvp(lambda t: eval_policy(policy, t, xs, zs), th, eye)
        r = (val - tgt).ravel()
        return r, jac.reshape(r.size, p)

    r, jac = residuals(theta)
    cost = float(r @ r) + ridge * float(theta @ theta)
    damp = 1e-3
    for _ in range(max_iter):
        g = jac.T @ r + ridge * theta
        h = jac.T @ jac + (ridge + damp) * np.eye(p)
        step = np.linalg.solve(h, -g)
        theta_t = theta + step
        r_t, jac_t = residuals(theta_t)
        cost_t = float(r_t @ r_t) + ridge * float(theta_t @ theta_t)
        if cost_t < cost:
            theta, r, jac, cost = theta_t, r_t, jac_t, cost_t
            damp = max(damp / 3.0, 1e-8)
        else:
            damp *= 10.0
            if damp > 1e8:
                break
        if cost < 1e-9:
            break
    return theta


def make_mpc_controller(
    aug: AugmentedLti | None = None,
    horizon: int = 20,
    x_max: float = _model.BENCH_X_MAX,
    u_max: float = _model.BENCH_U_MAX,
) -> MpcController:
    aug = aug if aug is not None else benchmark_augmented_model()
    lqr = make_lqr_controller(aug, u_max=u_max)
    return MpcController(aug=aug, lqr=lqr, horizon=horizon, x_max=x_max, u_max=u_max)
