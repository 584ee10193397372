"""Tanh multilayer-perceptron feedback policy with flat parameter packing.

The policy maps the augmented state (x, zeta) to a control.  Parameters
live in a single flat vector: per layer, the weight matrix in row-major
order followed by the bias vector.  Evaluation accepts fwdiff Tangents in
the parameter and/or state slots, which is how rollout derivatives are
obtained.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import fwdiff as fd

__all__ = ["MlpPolicy", "init_params", "eval_policy", "save_params", "load_params"]

_MAGIC = b"COPO-MLP1 "


@dataclass(frozen=True)
class MlpPolicy:
    layer_sizes: tuple[int, ...]

    def __post_init__(self):
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least input and output layer sizes")
        if any(n <= 0 for n in self.layer_sizes):
            raise ValueError("layer sizes must be positive")
        object.__setattr__(self, "layer_sizes", tuple(int(n) for n in self.layer_sizes))

    @property
    def n_params(self) -> int:
        return sum(
            n_in * n_out + n_out
            for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:])
        )

    def layer_slices(self):
        """Yield (weight_slice, bias_slice, n_in, n_out) per layer, in order."""
        ofs = 0
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = slice(ofs, ofs + n_in * n_out)
            ofs += n_in * n_out
            b = slice(ofs, ofs + n_out)
            ofs += n_out
            yield w, b, n_in, n_out


def init_params(layer_sizes, seed: int, scale: float = 1.0) -> np.ndarray:
    """Fan-in scaled uniform weights, zero biases; deterministic in seed."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    pol = MlpPolicy(tuple(layer_sizes))
    rng = np.random.default_rng(seed)
    theta = np.zeros(pol.n_params)
    for w, b, n_in, n_out in pol.layer_slices():
        bound = scale / np.sqrt(n_in)
        theta[w] = rng.uniform(-bound, bound, size=n_in * n_out)
        # biases stay zero
    return theta


def eval_policy(policy: MlpPolicy, theta, x, zeta):
    """u = W_L tanh(... tanh(W_1 [x; zeta] + b_1) ...) + b_L.

    The last layer is affine; hidden layers use tanh.  ``theta`` and/or
    ``x`` may be fwdiff Tangents.
    """
    n_in0 = policy.layer_sizes[0]
    x_dim = np.shape(fd.value_of(x))[-1]
    z_dim = np.shape(np.asarray(zeta, dtype=float))[-1]
    if x_dim + z_dim != n_in0:
        raise ValueError(
            f"input dimension {x_dim}+{z_dim} does not match first layer {n_in0}"
        )
    p = fd.value_of(theta).size
    if p != policy.n_params:
        raise ValueError(f"theta has length {p}, expected {policy.n_params}")

    h = fd.concat([x, zeta])
    layers = list(policy.layer_slices())
    for i, (ws, bs, n_in, n_out) in enumerate(layers):
        W = fd.reshape(theta[ws], (n_out, n_in))
        z = fd.matvec(W, h) + theta[bs]
        h = fd.tanh(z) if i < len(layers) - 1 else z
    return h


def save_params(path, policy: MlpPolicy, theta, binary: bool = True) -> None:
    """Write theta with a small header; binary mode round-trips bit-exactly."""
    theta = np.ascontiguousarray(np.asarray(theta, dtype=np.float64))
    header = {"layer_sizes": list(policy.layer_sizes), "p": int(theta.size)}
    if theta.size != policy.n_params:
        raise ValueError("theta length does not match policy shape")
    if binary:
        with open(path, "wb") as fh:
            fh.write(_MAGIC + json.dumps(header).encode() + b"\n")
            fh.write(theta.astype("<f8").tobytes())
    else:
        with open(path, "w") as fh:
            fh.write("# " + json.dumps(header) + "\n")
            for v in theta:
                fh.write(repr(float(v)) + "\n")


def load_params(path) -> tuple[MlpPolicy, np.ndarray]:
    with open(path, "rb") as fh:
        first = fh.readline()
        if first.startswith(_MAGIC):
            header = json.loads(first[len(_MAGIC):].decode())
            data = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
        elif first.startswith(b"# "):
            header = json.loads(first[2:].decode())
            data = np.array([float(line) for line in fh.read().decode().split()])
        else:
            raise ValueError(f"{path}: not a policy parameter file")
    policy = MlpPolicy(tuple(header["layer_sizes"]))
    if data.size != header["p"] or data.size != policy.n_params:
        raise ValueError(f"{path}: parameter count mismatch")
    return policy, data
