"""Stochastic control problem definition, disturbance embedding, scenarios.

The disturbance driving the plant is modelled as a partial observation of
a higher-dimensional Markov process: ``zeta`` evolves autonomously under
iid innovations and the scalar signal seen by cost/constraints is
``observe(zeta)``.  Scenario sets bundle sampled initial states with
simulated ``zeta`` paths and the innovations that produced them, so any
path can be re-simulated exactly.

The built-in benchmark is a three-zone heating/cooling instance with a
time-correlated energy-price signal.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import fwdiff as fd

__all__ = [
    "ControlProblem",
    "MarkovEmbedding",
    "ScenarioSet",
    "step_embedding",
    "observe",
    "sample_scenarios",
    "benchmark_problem",
    "BENCH_A",
    "BENCH_DRIVE",
    "BENCH_A_ZETA",
    "BENCH_INNOV",
    "BENCH_PSI",
    "BENCH_PRICE",
    "BENCH_X_MAX",
    "BENCH_U_MAX",
]


@dataclass(frozen=True)
class ControlProblem:
    """Discrete-time stochastic control problem on the augmented space.

    ``f(x, u, zeta_next)`` advances the state, ``stage_cost(x, u, zeta)``
    is the per-stage performance index, and ``constraints(x, u, zeta)``
    returns an m-vector that must be elementwise >= 0 for feasibility.
    All three are deterministic and must accept fwdiff Tangents in the
    ``x``/``u`` slots.
    """

    n_x: int
    n_u: int
    n_zeta: int
    m: int
    f: Callable
    stage_cost: Callable
    constraints: Callable
    gamma: float
    init_state: Callable  # rng -> x0
    init_aug: Callable    # rng -> zeta0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"discount must lie in (0, 1), got {self.gamma}")


@dataclass(frozen=True)
class MarkovEmbedding:
    """Markov process carrying the nonstationary disturbance.

    ``step_fn(zeta, w)`` advances the augmented disturbance state under
    innovation ``w``; ``observe_fn(zeta)`` maps it to the signal that the
    plant actually sees; ``noise_fn(rng)`` samples one innovation (the
    degenerate all-zero sampler gives the nominal, noise-free process).
    """

    n_zeta: int
    n_w: int
    n_xi: int
    step_fn: Callable
    observe_fn: Callable
    noise_fn: Callable


def step_embedding(emb: MarkovEmbedding, zeta, w):
    """One transition of the augmented disturbance process."""
    zeta = np.asarray(zeta, dtype=float)
    w = np.atleast_1d(np.asarray(w, dtype=float))
    if zeta.shape != (emb.n_zeta,):
        raise ValueError(f"zeta must have shape ({emb.n_zeta},), got {zeta.shape}")
    if w.shape != (emb.n_w,):
        raise ValueError(f"innovation must have shape ({emb.n_w},), got {w.shape}")
    return emb.step_fn(zeta, w)


def observe(emb: MarkovEmbedding, zeta):
    """Observation of the augmented state: the disturbance the plant sees."""
    zeta = np.asarray(zeta, dtype=float)
    if zeta.shape != (emb.n_zeta,):
        raise ValueError(f"zeta must have shape ({emb.n_zeta},), got {zeta.shape}")
    return np.atleast_1d(emb.observe_fn(zeta))


@dataclass(frozen=True)
class ScenarioSet:
    """S sampled scenarios: initial states plus disturbance paths.

    ``zeta`` holds paths of length T+1; ``w`` the T innovations, with
    ``zeta[s, t+1] == step(zeta[s, t], w[s, t])`` by construction.
    """

    x0: np.ndarray     # (S, n_x)
    zeta: np.ndarray   # (S, T+1, n_zeta)
    w: np.ndarray      # (S, T, n_w)
    seed: int

    @property
    def n_scenarios(self) -> int:
        return self.x0.shape[0]

    @property
    def horizon(self) -> int:
        return self.zeta.shape[1] - 1

    def write_csv(self, path) -> None:
        """One row per (scenario, t); the initial state is repeated per row."""
        S, n_x = self.x0.shape
        n_zeta = self.zeta.shape[2]
        n_w = self.w.shape[2]
        with open(path, "w", newline="") as fh:
            fh.write(f"# seed={self.seed}\n")
            writer = csv.writer(fh)
            header = (
                ["s", "t"]
                + [f"x0_{j}" for j in range(n_x)]
                + [f"zeta_{j}" for j in range(n_zeta)]
                + [f"w_{j}" for j in range(n_w)]
            )
            writer.writerow(header)
            for s in range(S):
                for t in range(self.horizon + 1):
                    w_row = self.w[s, t - 1] if t >= 1 else np.zeros(n_w)
                    writer.writerow(
                        [s, t]
                        + [repr(v) for v in self.x0[s]]
                        + [repr(v) for v in self.zeta[s, t]]
                        + [repr(v) for v in w_row]
                    )

    @classmethod
    def read_csv(cls, path) -> "ScenarioSet":
        with open(path, newline="") as fh:
            first = fh.readline()
            if not first.startswith("# seed="):
                raise ValueError(f"{path}: missing seed line")
            seed = int(first.strip().split("=", 1)[1])
            reader = csv.reader(fh)
            header = next(reader)
            n_x = sum(1 for h in header if h.startswith("x0_"))
            n_zeta = sum(1 for h in header if h.startswith("zeta_"))
            rows = list(reader)
        S = max(int(r[0]) for r in rows) + 1
        T = max(int(r[1]) for r in rows)
        n_w = len(header) - 2 - n_x - n_zeta
        x0 = np.zeros((S, n_x))
        zeta = np.zeros((S, T + 1, n_zeta))
        w = np.zeros((S, T, n_w))
        for r in rows:
            s, t = int(r[0]), int(r[1])
            vals = [float(v) for v in r[2:]]
            x0[s] = vals[:n_x]
            zeta[s, t] = vals[n_x:n_x + n_zeta]
            if t >= 1:
                w[s, t - 1] = vals[n_x + n_zeta:]
        return cls(x0=x0, zeta=zeta, w=w, seed=seed)


def sample_scenarios(
    problem: ControlProblem,
    emb: MarkovEmbedding,
    n_scenarios: int,
    horizon: int,
    seed: int,
    antithetic: bool = False,
) -> ScenarioSet:
    """Draw S (initial state, disturbance path) pairs, reproducibly.

    The output depends only on (problem, emb, n_scenarios, horizon, seed,
    antithetic).  With ``antithetic`` set, odd-indexed scenarios are the
    negations of their predecessors.  For symmetric initial and innovation
    distributions this keeps every marginal intact while halving the
    number of independent draws, which spreads a small scenario budget
    much more evenly over the initial-condition set (variance reduction
    for the sample-average objective, coverage for the constraints).
    """
    if n_scenarios < 1:
        raise ValueError("need at least one scenario")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    rng = np.random.default_rng(seed)
    x0 = np.zeros((n_scenarios, problem.n_x))
    zeta = np.zeros((n_scenarios, horizon + 1, emb.n_zeta))
    w = np.zeros((n_scenarios, horizon, emb.n_w))
    for s in range(n_scenarios):
        if antithetic and s % 2 == 1:
            x0[s] = -x0[s - 1]
            zeta[s] = -zeta[s - 1]
            w[s] = -w[s - 1]
            continue
        x0[s] = problem.init_state(rng)
        zeta[s, 0] = problem.init_aug(rng)
        for t in range(horizon):
            w[s, t] = np.atleast_1d(emb.noise_fn(rng))
            zeta[s, t + 1] = step_embedding(emb, zeta[s, t], w[s, t])
    return ScenarioSet(x0=x0, zeta=zeta, w=w, seed=seed)


# ---------------------------------------------------------------------------
# Benchmark instance: three-zone heating/cooling under a correlated price
# ---------------------------------------------------------------------------

BENCH_A = np.array(
    [
        [0.90, -0.05, 0.00],
        [-0.05, 0.90, -0.05],
        [0.00, -0.05, 0.90],
    ]
)
BENCH_DRIVE = np.full(3, 0.1)
BENCH_A_ZETA = np.array(
    [
        [0.955, 0.295, 0.0],
        [-0.295, 0.955, 0.0],
        [0.0, 0.0, 0.0],
    ]
)
BENCH_INNOV = np.array([0.0, 0.0, 1.0])
BENCH_PSI = np.array([1.0, 0.0, 1.0])
BENCH_PRICE = np.full(3, 0.3)
BENCH_X_MAX = 0.2
BENCH_U_MAX = 0.03


def benchmark_problem(
    noisy: bool = False,
    gamma: float = 0.99,
    x0_halfwidth: float = 0.15,
    zeta0_halfwidth: float = 0.95,
    zeta0_max_norm: float = 0.72,
) -> tuple[ControlProblem, MarkovEmbedding]:
    """The benchmark problem instance and its disturbance embedding.

    ``noisy`` selects iid uniform innovations on [-1, 1]; otherwise the
    innovation is identically zero and the price signal decays
    deterministically.  The initial-state distribution is a uniform box;
    the initial disturbance state is drawn from a uniform box and then
    shrunk onto the disc of radius ``zeta0_max_norm``.  The cap matters:
    price paths launched far outside that disc overpower the saturated
    input box, so no controller can keep the state feasible, while paths
    inside it are trackable yet still hard enough that a myopic
    controller grazes the state bounds.
    """

    def f(x, u, zeta_next):
        xi = fd.dot(BENCH_PSI, np.asarray(zeta_next, dtype=float))
        return fd.matvec(BENCH_A, x) + u + np.multiply.outer(xi, BENCH_DRIVE)

    def stage_cost(x, u, zeta):
        xi = fd.dot(BENCH_PSI, np.asarray(zeta, dtype=float))
        return 1e-3 * fd.sumsq(x) + fd.sumsq(u) + xi * fd.dot(BENCH_PRICE, u)

    def constraints(x, u, zeta):
        return fd.concat(
            [x + BENCH_X_MAX, BENCH_X_MAX - x, u + BENCH_U_MAX, BENCH_U_MAX - u]
        )

    def init_state(rng):
        return rng.uniform(-x0_halfwidth, x0_halfwidth, size=3)

    def init_aug(rng):
        z = rng.uniform(-zeta0_halfwidth, zeta0_halfwidth, size=2)
        nrm = float(np.hypot(z[0], z[1]))
        if nrm > zeta0_max_norm:
            z *= zeta0_max_norm / nrm
        return np.array([z[0], z[1], 0.0])

    if noisy:
        def noise(rng):
            return rng.uniform(-1.0, 1.0, size=1)
    else:
        def noise(rng):
            return np.zeros(1)

    emb = MarkovEmbedding(
        n_zeta=3,
        n_w=1,
        n_xi=1,
        step_fn=lambda zeta, w: BENCH_A_ZETA @ zeta + BENCH_INNOV * w[0],
        observe_fn=lambda zeta: BENCH_PSI @ zeta,
        noise_fn=noise,
    )
    problem = ControlProblem(
        n_x=3,
        n_u=3,
        n_zeta=3,
        m=12,
        f=f,
        stage_cost=stage_cost,
        constraints=constraints,
        gamma=gamma,
        init_state=init_state,
        init_aug=init_aug,
    )
    return problem, emb
