"""Experiment configuration: INI-style files with CLI overrides.

A config fully determines an experiment; its hash is stamped into every
output artifact so results can be traced back.  Parsing then serializing
then parsing again yields an equal config.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields

import numpy as np

from . import fwdiff as fd
from .model import ControlProblem, MarkovEmbedding, benchmark_problem

__all__ = ["ConfigError", "ExperimentConfig", "load_problem_spec"]


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # problem
    problem: str = "benchmark"      # "benchmark" or path to a problem spec file
    noisy: bool = False
    gamma: float = 0.99
    x0_halfwidth: float = 0.15
    zeta0_halfwidth: float = 0.95
    # policy
    hidden: tuple = (6, 6)
    policy_seed: int = 0
    init_scale: float = 1.0
    # training
    n_samples: int = 20
    horizon: int = 20
    train_seed: int = 2024
    antithetic: bool = True
    margin: float = 1e-3
    warm_start: bool = True
    # validation
    n_validation: int = 10
    validation_horizon: int = 100
    validate_seed: int = 90210
    # solver
    tol: float = 1e-6
    mu0: float = 0.1
    max_iter: int = 18
    # output
    outdir: str = "runs"

    _SECTIONS = {
        "problem": ("problem", "noisy", "gamma", "x0_halfwidth", "zeta0_halfwidth"),
        "policy": ("hidden", "policy_seed", "init_scale"),
        "training": ("n_samples", "horizon", "train_seed", "antithetic", "margin", "warm_start"),
        "validation": ("n_validation", "validation_horizon", "validate_seed"),
        "solver": ("tol", "mu0", "max_iter"),
        "output": ("outdir",),
    }

    def validate(self) -> None:
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")
        if self.n_validation < 1 or self.validation_horizon < 1:
            raise ConfigError("validation set must be nonempty")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden layer sizes must be positive")
        if self.tol <= 0 or self.mu0 <= 0 or self.max_iter < 1:
            raise ConfigError("solver parameters must be positive")
        if self.init_scale <= 0:
            raise ConfigError("init_scale must be positive")
        if self.margin < 0:
            raise ConfigError("margin must be nonnegative")

    # -- serialization -----------------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for section, keys in self._SECTIONS.items():
            cp[section] = {}
            for key in keys:
                val = getattr(self, key)
                if key == "hidden":
                    val = ",".join(str(int(v)) for v in val)
                cp[section][key] = str(val)
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for section in cp.sections():
            if section not in cls._SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in cp[section].items():
                if key not in cls._SECTIONS[section]:
                    raise ConfigError(f"unknown key '{key}' in [{section}]")
                kwargs[key] = _parse_value(key, raw)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                return cls.from_ini(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_ini())

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]

    # -- construction helpers ----------------------------------------------

    def build_problem(self) -> tuple[ControlProblem, MarkovEmbedding]:
        if self.problem == "benchmark":
            return benchmark_problem(
                noisy=self.noisy,
                gamma=self.gamma,
                x0_halfwidth=self.x0_halfwidth,
                zeta0_halfwidth=self.zeta0_halfwidth,
            )
        return load_problem_spec(self.problem, noisy=self.noisy, gamma=self.gamma)

    def layer_sizes(self, n_x: int, n_zeta: int, n_u: int) -> tuple:
        return (n_x + n_zeta, *self.hidden, n_u)


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}

_FLOAT_KEYS = {
    "gamma", "x0_halfwidth", "zeta0_halfwidth", "init_scale", "tol", "mu0", "margin",
}
_INT_KEYS = {
    "policy_seed", "n_samples", "horizon", "train_seed",
    "n_validation", "validation_horizon", "validate_seed", "max_iter",
}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    try:
        if key == "hidden":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if key in ("noisy", "warm_start", "antithetic"):
            return _BOOL[raw.lower()]
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in _INT_KEYS:
            return int(raw)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


# ---------------------------------------------------------------------------
# External problem specs: affine dynamics, quadratic cost, box constraints
# ---------------------------------------------------------------------------


def _parse_matrix(raw: str) -> np.ndarray:
    rows = [r.strip() for r in raw.split(";") if r.strip()]
    return np.array([[float(v) for v in r.replace(",", " ").split()] for r in rows])


def _parse_vector(raw: str) -> np.ndarray:
    return _parse_matrix(raw).ravel()


def load_problem_spec(path, noisy: bool = False, gamma: float = 0.99):
    """Load an affine-dynamics / quadratic-cost / box-constraint problem.

    Schema (INI; matrices use ';' between rows, whitespace or ',' between
    entries)::

        [dynamics]   a = ...   b = ...   c = ...      # x+ = A x + B u + C xi
        [cost]       q = ...   r = ...   price = ...  # x'Qx + u'Ru + xi price'u
        [constraints] x_min/x_max/u_min/u_max = vectors
        [embedding]  a_zeta = ...  innovation = ...  psi = ...  # row
        [noise]      halfwidth = scalar (uniform innovation bound)
        [init]       x0_halfwidth = ...  zeta0 = vector template; entries
                     'u' are drawn uniform from [-zeta0_halfwidth, +] each

    Returns (ControlProblem, MarkovEmbedding).
    """
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_string(fh.read())
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot load problem spec {path}: {exc}") from exc
    try:
        a = _parse_matrix(cp["dynamics"]["a"])
        b = _parse_matrix(cp["dynamics"]["b"])
        c = _parse_vector(cp["dynamics"]["c"])
        q = _parse_matrix(cp["cost"]["q"])
        r = _parse_matrix(cp["cost"]["r"])
        price = _parse_vector(cp["cost"]["price"])
        x_min = _parse_vector(cp["constraints"]["x_min"])
        x_max = _parse_vector(cp["constraints"]["x_max"])
        u_min = _parse_vector(cp["constraints"]["u_min"])
        u_max = _parse_vector(cp["constraints"]["u_max"])
        a_zeta = _parse_matrix(cp["embedding"]["a_zeta"])
        innov = _parse_vector(cp["embedding"]["innovation"])
        psi = _parse_vector(cp["embedding"]["psi"])
        w_halfwidth = float(cp.get("noise", "halfwidth", fallback="1.0"))
        x0_hw = float(cp.get("init", "x0_halfwidth", fallback="0.15"))
        zeta0_hw = float(cp.get("init", "zeta0_halfwidth", fallback="0.95"))
        zeta0_mask = _parse_vector(
            cp.get("init", "zeta0_mask", fallback=" ".join(["1"] * a_zeta.shape[0]))
        )
    except KeyError as exc:
        raise ConfigError(f"problem spec {path} missing entry: {exc}") from exc

    n_x, n_u, n_zeta = a.shape[0], b.shape[1], a_zeta.shape[0]

    def f(x, u, zeta_next):
        xi = fd.dot(psi, np.asarray(zeta_next, dtype=float))
        return fd.matvec(a, x) + fd.matvec(b, u) + np.multiply.outer(xi, c)

    def stage_cost(x, u, zeta):
        xi = fd.dot(psi, np.asarray(zeta, dtype=float))
        return (
            fd.dot(x, fd.matvec(q, x))
            + fd.dot(u, fd.matvec(r, u))
            + xi * fd.dot(price, u)
        )

    def constraints(x, u, zeta):
        return fd.concat([x - x_min, x_max - x, u - u_min, u_max - u])

    def init_state(rng):
        return rng.uniform(-x0_hw, x0_hw, size=n_x)

    def init_aug(rng):
        return zeta0_mask * rng.uniform(-zeta0_hw, zeta0_hw, size=n_zeta)

    if noisy:
        def noise(rng):
            return rng.uniform(-w_halfwidth, w_halfwidth, size=1)
    else:
        def noise(rng):
            return np.zeros(1)

    emb = MarkovEmbedding(
        n_zeta=n_zeta,
        n_w=1,
        n_xi=1,
        step_fn=lambda zeta, w: a_zeta @ zeta + innov * w[0],
        observe_fn=lambda zeta: psi @ zeta,
        noise_fn=noise,
    )
    problem = ControlProblem(
        n_x=n_x,
        n_u=n_u,
        n_zeta=n_zeta,
        m=2 * (n_x + n_u),
        f=f,
        stage_cost=stage_cost,
        constraints=constraints,
        gamma=gamma,
        init_state=init_state,
        init_aug=init_aug,
    )
    return problem, emb
