"""Forward-mode derivative propagation with batched tangent columns.

A :class:`Tangent` pairs a numpy value with a matrix of directional
derivatives, one column per seed direction, so k directional derivatives
are carried through a computation in a single pass.  The propagation
rules are the exact chain rule; accuracy is limited only by floating
point.  Only the primitives needed for policy rollouts are supported
(affine maps, matrix-vector products, elementwise arithmetic, tanh,
sums, concatenation); anything else raises at propagation time.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tangent",
    "Tangent2",
    "seed",
    "lift",
    "value_of",
    "tangent_of",
    "tanh",
    "relu",
    "softplus",
    "dot",
    "sumsq",
    "matvec",
    "concat",
    "reshape",
    "jvp",
    "full_jacobian",
    "hessian",
]


class Tangent:
    """A value together with k simultaneous directional derivatives.

    ``val`` has an arbitrary shape ``S``; ``tan`` has shape ``S + (k,)``,
    column j holding the derivative of ``val`` along seed direction j.
    """

    __slots__ = ("val", "tan")
    # Keep numpy from consuming our operands in mixed expressions so the
    # reflected operators below run instead.
    __array_ufunc__ = None

    def __init__(self, val, tan):
        val = np.asarray(val, dtype=float)
        tan = np.asarray(tan, dtype=float)
        if tan.shape[:-1] != val.shape:
            raise ValueError(
                f"tangent shape {tan.shape} incompatible with value shape {val.shape}"
            )
        self.val = val
        self.tan = tan

    @property
    def k(self) -> int:
        return self.tan.shape[-1]

    @property
    def shape(self):
        return self.val.shape

    def __repr__(self):
        return f"Tangent(val={self.val!r}, k={self.k})"

    # -- elementwise arithmetic -------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tangent):
            return Tangent(self.val + other.val, self.tan + other.tan)
        out = self.val + np.asarray(other, dtype=float)
        return Tangent(out, np.broadcast_to(self.tan, out.shape + (self.k,)))

    __radd__ = __add__

    def __neg__(self):
        return Tangent(-self.val, -self.tan)

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tangent) else -np.asarray(other, dtype=float))

    def __rsub__(self, other):
        return (-self) + np.asarray(other, dtype=float)

    def __mul__(self, other):
        if isinstance(other, Tangent):
            val = self.val * other.val
            tan = self.val[..., None] * other.tan + other.val[..., None] * self.tan
            return Tangent(val, np.broadcast_to(tan, val.shape + tan.shape[-1:]))
        other = np.asarray(other, dtype=float)
        out = self.val * other
        return Tangent(out, np.broadcast_to(other[..., None] * self.tan, out.shape + (self.k,)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tangent):
            raise TypeError("division by a Tangent is not a supported primitive")
        return self * (1.0 / np.asarray(other, dtype=float))

    # -- matrix products ---------------------------------------------------

    def __rmatmul__(self, other):
        # constant @ Tangent; the constant may be a matrix or a row vector
        other = np.asarray(other, dtype=float)
        val = other @ self.val
        tan = np.tensordot(other, self.tan, axes=(other.ndim - 1, 0))
        return Tangent(val, tan)

    def __matmul__(self, other):
        if isinstance(other, Tangent):
            if self.val.ndim == 2 and other.val.ndim == 1:
                val = self.val @ other.val
                tan = np.einsum("ijk,j->ik", self.tan, other.val) + self.val @ other.tan
                return Tangent(val, tan)
            if self.val.ndim == 1 and other.val.ndim == 1:
                val = self.val @ other.val
                tan = other.val @ self.tan + self.val @ other.tan
                return Tangent(val, tan)
            raise TypeError(
                f"unsupported matmul shapes {self.val.shape} @ {other.val.shape}"
            )
        other = np.asarray(other, dtype=float)
        if self.val.ndim == 2 and other.ndim == 1:
            return Tangent(self.val @ other, np.einsum("ijk,j->ik", self.tan, other))
        if self.val.ndim == 1 and other.ndim == 1:
            return Tangent(self.val @ other, other @ self.tan)
        raise TypeError(f"unsupported matmul shapes {self.val.shape} @ {other.shape}")

    # -- structural --------------------------------------------------------

    def __getitem__(self, idx):
        return Tangent(self.val[idx], self.tan[idx])

    def reshape(self, shape):
        shape = tuple(shape)
        return Tangent(self.val.reshape(shape), self.tan.reshape(shape + (self.k,)))

    def sum(self):
        return Tangent(self.val.sum(), self.tan.reshape(-1, self.k).sum(axis=0))


class Tangent2:
    """A value with k directional derivatives and their k x k curvature.

    Same layout as :class:`Tangent` plus ``hes`` of shape ``S + (k, k)``
    carrying curvature in split form: the true matrix of second
    directional derivatives is ``hes + swapaxes(hes, -1, -2)``.  Storing
    one triangle's worth of each (symmetric) curvature contribution lets
    the product rules skip an explicit symmetrization per primitive,
    which matters because those are the largest arrays in a sweep; the
    :func:`hessian` driver folds the two halves together once at the end.
    ``hes`` may be None, which means an exact zero block; slices of a
    freshly seeded parameter vector stay in that state, so curvature
    storage only materializes once a nonlinear primitive is applied.
    Used to assemble exact Lagrangian Hessians of rollout NLPs.
    """

    __slots__ = ("val", "tan", "hes")
    __array_ufunc__ = None

    def __init__(self, val, tan, hes=None):
        val = np.asarray(val, dtype=float)
        tan = np.asarray(tan, dtype=float)
        if tan.shape[:-1] != val.shape:
            raise ValueError(
                f"tangent shape {tan.shape} incompatible with value shape {val.shape}"
            )
        if hes is not None:
            hes = np.asarray(hes, dtype=float)
            if hes.shape != val.shape + (tan.shape[-1],) * 2:
                raise ValueError(
                    f"curvature shape {hes.shape} incompatible with value shape {val.shape}"
                )
        self.val = val
        self.tan = tan
        self.hes = hes

    @property
    def k(self) -> int:
        return self.tan.shape[-1]

    @property
    def shape(self):
        return self.val.shape

    def __repr__(self):
        return f"Tangent2(val={self.val!r}, k={self.k})"

    def _hes_or_zero(self):
        if self.hes is not None:
            return self.hes
        return np.zeros(self.val.shape + (self.k, self.k))

    # -- elementwise arithmetic -------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tangent2):
            return Tangent2(
                self.val + other.val, self.tan + other.tan,
                _hadd(self.hes, other.hes),
            )
        out = self.val + np.asarray(other, dtype=float)
        return Tangent2(
            out,
            np.broadcast_to(self.tan, out.shape + (self.k,)),
            None if self.hes is None
            else np.broadcast_to(self.hes, out.shape + (self.k, self.k)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tangent2(
            -self.val, -self.tan, None if self.hes is None else -self.hes
        )

    def __sub__(self, other):
        return self + (
            -other if isinstance(other, Tangent2) else -np.asarray(other, dtype=float)
        )

    def __rsub__(self, other):
        return (-self) + np.asarray(other, dtype=float)

    def __mul__(self, other):
        if isinstance(other, Tangent2):
            val = self.val * other.val
            tan = self.val[..., None] * other.tan + other.val[..., None] * self.tan
            # split-form curvature: the transposed half is implicit
            hes = self.tan[..., :, None] * other.tan[..., None, :]
            if self.hes is not None:
                hes += other.val[..., None, None] * self.hes
            if other.hes is not None:
                hes += self.val[..., None, None] * other.hes
            return Tangent2(
                val,
                np.broadcast_to(tan, val.shape + (self.k,)),
                np.broadcast_to(hes, val.shape + (self.k, self.k)),
            )
        other = np.asarray(other, dtype=float)
        out = self.val * other
        return Tangent2(
            out,
            np.broadcast_to(other[..., None] * self.tan, out.shape + (self.k,)),
            None if self.hes is None
            else np.broadcast_to(
                other[..., None, None] * self.hes, out.shape + (self.k, self.k)
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tangent2):
            raise TypeError("division by a Tangent2 is not a supported primitive")
        return self * (1.0 / np.asarray(other, dtype=float))

    # -- matrix products ---------------------------------------------------

    def __rmatmul__(self, other):
        other = np.asarray(other, dtype=float)
        val = other @ self.val
        tan = np.tensordot(other, self.tan, axes=(other.ndim - 1, 0))
        hes = None
        if self.hes is not None:
            hes = np.tensordot(other, self.hes, axes=(other.ndim - 1, 0))
        return Tangent2(val, tan, hes)

    def __matmul__(self, other):
        if isinstance(other, Tangent2):
            if self.val.ndim == 2 and other.val.ndim == 1:
                val = self.val @ other.val
                tan = (
                    np.tensordot(self.tan, other.val, axes=(1, 0))
                    + self.val @ other.tan
                )
                # split-form hes[i, p, q] = sum_j tan[i, j, p] * other.tan[j, q],
                # written as a batch of small BLAS products over i
                hes = np.matmul(np.swapaxes(self.tan, 1, 2), other.tan)
                if self.hes is not None:
                    hes += np.tensordot(self.hes, other.val, axes=(1, 0))
                if other.hes is not None:
                    hes += np.tensordot(self.val, other.hes, axes=(1, 0))
                return Tangent2(val, tan, hes)
            if self.val.ndim == 1 and other.val.ndim == 1:
                val = self.val @ other.val
                tan = other.val @ self.tan + self.val @ other.tan
                hes = self.tan.T @ other.tan
                if self.hes is not None:
                    hes = hes + np.tensordot(self.hes, other.val, axes=(0, 0))
                if other.hes is not None:
                    hes = hes + np.tensordot(other.hes, self.val, axes=(0, 0))
                return Tangent2(val, tan, hes)
            raise TypeError(
                f"unsupported matmul shapes {self.val.shape} @ {other.val.shape}"
            )
        other = np.asarray(other, dtype=float)
        if self.val.ndim == 2 and other.ndim == 1:
            hes = None
            if self.hes is not None:
                hes = np.tensordot(self.hes, other, axes=(1, 0))
            return Tangent2(
                self.val @ other, np.tensordot(self.tan, other, axes=(1, 0)), hes
            )
        if self.val.ndim == 1 and other.ndim == 1:
            hes = None
            if self.hes is not None:
                hes = np.tensordot(self.hes, other, axes=(0, 0))
            return Tangent2(self.val @ other, other @ self.tan, hes)
        raise TypeError(f"unsupported matmul shapes {self.val.shape} @ {other.shape}")

    # -- structural --------------------------------------------------------

    def __getitem__(self, idx):
        return Tangent2(
            self.val[idx], self.tan[idx],
            None if self.hes is None else self.hes[idx],
        )

    def reshape(self, shape):
        shape = tuple(shape)
        return Tangent2(
            self.val.reshape(shape),
            self.tan.reshape(shape + (self.k,)),
            None if self.hes is None
            else self.hes.reshape(shape + (self.k, self.k)),
        )

    def sum(self):
        hes = None
        if self.hes is not None:
            hes = self.hes.reshape(-1, self.k, self.k).sum(axis=0)
        return Tangent2(
            self.val.sum(), self.tan.reshape(-1, self.k).sum(axis=0), hes
        )


def _hadd(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


# -- constructors and accessors ---------------------------------------------


def seed(value, directions) -> Tangent:
    """Attach seed directions (columns of ``directions``) to ``value``."""
    value = np.asarray(value, dtype=float)
    directions = np.asarray(directions, dtype=float)
    if directions.shape[:-1] != value.shape:
        raise ValueError("seed directions must have shape value.shape + (k,)")
    return Tangent(value, directions)


def lift(value, k: int) -> Tangent:
    """Treat ``value`` as a constant with k zero tangent columns."""
    value = np.asarray(value, dtype=float)
    return Tangent(value, np.zeros(value.shape + (k,)))


def value_of(x):
    return x.val if isinstance(x, (Tangent, Tangent2)) else np.asarray(x, dtype=float)


def tangent_of(x, k: int | None = None):
    if isinstance(x, (Tangent, Tangent2)):
        return x.tan
    if k is None:
        raise ValueError("k required to build a zero tangent for a constant")
    return np.zeros(np.shape(x) + (k,))


# -- primitives that dispatch on Tangent vs ndarray --------------------------


def tanh(x):
    if isinstance(x, Tangent):
        v = np.tanh(x.val)
        return Tangent(v, (1.0 - v * v)[..., None] * x.tan)
    if isinstance(x, Tangent2):
        v = np.tanh(x.val)
        d = 1.0 - v * v
        # split-form curvature: half of -2 v d tan tan' (the outer product
        # is symmetric, so its split representation is one half of it)
        hes = x.tan[..., :, None] * x.tan[..., None, :]
        hes *= (-v * d)[..., None, None]
        if x.hes is not None:
            hes += d[..., None, None] * x.hes
        return Tangent2(v, d[..., None] * x.tan, hes)
    return np.tanh(x)


def relu(x):
    """Elementwise max(x, 0); the subgradient at 0 is taken as 0.

    The second derivative is zero almost everywhere, so the Tangent2
    branch simply masks the incoming curvature (the distributional term
    at the kink is dropped, as usual for piecewise-linear primitives).
    """
    if isinstance(x, Tangent):
        mask = x.val > 0.0
        return Tangent(np.where(mask, x.val, 0.0), mask[..., None] * x.tan)
    if isinstance(x, Tangent2):
        mask = x.val > 0.0
        hes = None if x.hes is None else mask[..., None, None] * x.hes
        return Tangent2(np.where(mask, x.val, 0.0), mask[..., None] * x.tan, hes)
    x = np.asarray(x, dtype=float)
    return np.where(x > 0.0, x, 0.0)


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def softplus(x):
    """Elementwise log(1 + exp(x)), overflow-safe (a smooth relu)."""
    if isinstance(x, Tangent):
        return Tangent(np.logaddexp(0.0, x.val), _sigmoid(x.val)[..., None] * x.tan)
    if isinstance(x, Tangent2):
        sig = _sigmoid(x.val)
        d2 = sig * (1.0 - sig)
        # split-form curvature, matching tanh: store half of f'' tan tan'
        hes = x.tan[..., :, None] * x.tan[..., None, :]
        hes *= (0.5 * d2)[..., None, None]
        if x.hes is not None:
            hes += sig[..., None, None] * x.hes
        return Tangent2(np.logaddexp(0.0, x.val), sig[..., None] * x.tan, hes)
    return np.logaddexp(0.0, np.asarray(x, dtype=float))


def _sum_last(x):
    """Reduce a (possibly tangent-carrying) array over its last value axis."""
    if isinstance(x, Tangent):
        return Tangent(x.val.sum(axis=-1), x.tan.sum(axis=-2))
    if isinstance(x, Tangent2):
        return Tangent2(
            x.val.sum(axis=-1), x.tan.sum(axis=-2),
            None if x.hes is None else x.hes.sum(axis=-3),
        )
    return np.asarray(x, dtype=float).sum(axis=-1)


def _contract_const(c, t):
    """dot(constant, tangent-carrying) over the last axis.

    Contracting via matmul instead of elementwise-multiply-then-sum
    avoids materializing a product array the size of ``t.hes``, which is
    the dominant temporary in Lagrangian Hessian sweeps.
    """
    k = t.k
    val = np.sum(c * t.val, axis=-1)

    def contract(mat):
        # mat: batch + (n, d); sum the n axis against c
        if c.ndim == 1:
            return np.matmul(c, mat)
        return np.matmul(c[..., None, :], mat)[..., 0, :]

    tan = np.broadcast_to(contract(t.tan), val.shape + (k,))
    if isinstance(t, Tangent):
        return Tangent(val, tan)
    hes = None
    if t.hes is not None:
        h = contract(t.hes.reshape(t.hes.shape[:-2] + (k * k,)))
        hes = np.broadcast_to(h.reshape(h.shape[:-1] + (k, k)), val.shape + (k, k))
    return Tangent2(val, tan, hes)


def dot(a, b):
    """Inner product over the last axis; leading axes are batch axes.

    Either side may carry tangents.  For plain 1-D vectors this is the
    ordinary inner product returning a scalar.
    """
    a_t = isinstance(a, (Tangent, Tangent2))
    b_t = isinstance(b, (Tangent, Tangent2))
    if a_t and b_t:
        return _sum_last(a * b)
    if a_t or b_t:
        t, c = (a, b) if a_t else (b, a)
        return _contract_const(np.asarray(c, dtype=float), t)
    return np.sum(np.asarray(a, dtype=float) * np.asarray(b, dtype=float), axis=-1)


def sumsq(x):
    """Squared Euclidean norm over the last axis (batched elsewhere)."""
    return dot(x, x)


def matvec(a, b):
    """Matrix ``a`` (m, n) applied to vectors stacked in ``b`` (..., n).

    Either operand may carry tangents; the result has shape (..., m).
    This is the batch-aware counterpart of ``a @ b`` for a stack of
    vectors, with the matrix shared across the batch.
    """
    a_t2 = isinstance(a, Tangent2)
    b_t2 = isinstance(b, Tangent2)
    a_t1 = isinstance(a, Tangent)
    b_t1 = isinstance(b, Tangent)
    if (a_t1 and b_t2) or (a_t2 and b_t1):
        raise TypeError("cannot mix Tangent and Tangent2 operands in matvec")
    av = value_of(a)
    bv = value_of(b)
    if av.ndim != 2 or bv.shape[-1] != av.shape[1]:
        raise ValueError(f"matvec shapes {av.shape} and {bv.shape} do not align")
    val = bv @ av.T
    if not (a_t1 or a_t2 or b_t1 or b_t2):
        return val
    m, n = av.shape
    at = a.tan if (a_t1 or a_t2) else None
    bt = b.tan if (b_t1 or b_t2) else None
    k = at.shape[-1] if at is not None else bt.shape[-1]
    tan = 0.0
    if at is not None:
        # tan[..., i, p] += sum_j bv[..., j] at[i, j, p]
        tan = tan + (bv @ at.reshape(m, n, k).transpose(1, 0, 2).reshape(n, m * k)
                     ).reshape(bv.shape[:-1] + (m, k))
    if bt is not None:
        tan = tan + np.matmul(av, bt)
    if not (a_t2 or b_t2):
        return Tangent(val, tan)
    hes = None
    if at is not None and bt is not None:
        # split-form hes[..., i, p, q] = sum_j at[i, j, p] bt[..., j, q]
        a_flat = at.transpose(1, 0, 2).reshape(n, m * k)
        hes = np.moveaxis(
            np.matmul(np.swapaxes(bt, -1, -2), a_flat), -1, -2
        ).reshape(bt.shape[:-2] + (m, k, k))
    ah = a.hes if a_t2 else None
    bh = b.hes if b_t2 else None
    if ah is not None:
        term = (bv @ ah.reshape(m, n, k * k).transpose(1, 0, 2)
                .reshape(n, m * k * k)).reshape(bv.shape[:-1] + (m, k, k))
        if hes is None:
            hes = term
        else:
            hes += term
    if bh is not None:
        term = np.matmul(
            av, bh.reshape(bh.shape[:-2] + (k * k,))
        ).reshape(bh.shape[:-3] + (m, k, k))
        if hes is None:
            hes = term
        else:
            hes += term
    return Tangent2(val, tan, hes)


def concat(parts):
    """Concatenate along the last axis, mixing constants and tangents.

    1-D pieces concatenate as before; stacked pieces (batch axes in
    front) concatenate per batch row.
    """
    if any(isinstance(p, Tangent2) for p in parts):
        return _concat2(parts)
    ks = [p.k for p in parts if isinstance(p, Tangent)]
    if not ks:
        return np.concatenate(
            [np.atleast_1d(np.asarray(p, dtype=float)) for p in parts], axis=-1
        )
    k = ks[0]
    shapes = [np.shape(value_of(p)) for p in parts]
    batch = max(shapes, key=len)[:-1]
    vals, tans = [], []
    for p in parts:
        if not isinstance(p, Tangent):
            v = np.broadcast_to(
                np.atleast_1d(np.asarray(p, dtype=float)),
                batch + np.atleast_1d(np.asarray(p, dtype=float)).shape[-1:],
            )
            p = lift(v, k)
        elif p.k != k:
            raise ValueError("mismatched tangent widths in concat")
        vals.append(np.broadcast_to(p.val, batch + p.val.shape[-1:]))
        tans.append(np.broadcast_to(p.tan, batch + p.tan.shape[-2:]))
    return Tangent(np.concatenate(vals, axis=-1), np.concatenate(tans, axis=-2))


def _concat2(parts):
    k = next(p.k for p in parts if isinstance(p, Tangent2))
    shapes = [np.shape(value_of(p)) for p in parts]
    batch = max(shapes, key=len)[:-1]
    vals, tans, hess = [], [], []
    any_hes = any(isinstance(p, Tangent2) and p.hes is not None for p in parts)
    for p in parts:
        if not isinstance(p, Tangent2):
            v = np.atleast_1d(np.asarray(p, dtype=float))
            p = Tangent2(v, np.zeros(v.shape + (k,)))
        elif p.k != k:
            raise ValueError("mismatched tangent widths in concat")
        vals.append(np.broadcast_to(p.val, batch + p.val.shape[-1:]))
        tans.append(np.broadcast_to(p.tan, batch + p.tan.shape[-2:]))
        if any_hes:
            h = p.hes
            if h is None:
                h = np.zeros(p.val.shape + (k, k))
            hess.append(np.broadcast_to(h, batch + h.shape[-3:]))
    return Tangent2(
        np.concatenate(vals, axis=-1),
        np.concatenate(tans, axis=-2),
        np.concatenate(hess, axis=-3) if any_hes else None,
    )


def reshape(x, shape):
    if isinstance(x, (Tangent, Tangent2)):
        return x.reshape(shape)
    return np.asarray(x, dtype=float).reshape(shape)


# -- driver ------------------------------------------------------------------


def jvp(fn, theta, directions):
    """Evaluate ``fn`` and its directional derivatives in one pass.

    ``directions`` is a (len(theta), k) matrix of seed columns.  Returns
    ``(fn(theta), dfn)`` where ``dfn`` has shape ``fn(theta).shape + (k,)``.
    """
    theta = np.asarray(theta, dtype=float)
    directions = np.asarray(directions, dtype=float)
    if directions.ndim != 2 or directions.shape[0] != theta.size:
        raise ValueError(
            f"directions must be ({theta.size}, k), got {directions.shape}"
        )
    out = fn(Tangent(theta, directions))
    if isinstance(out, Tangent):
        return out.val, out.tan
    out = np.asarray(out, dtype=float)
    return out, np.zeros(out.shape + (directions.shape[1],))


def full_jacobian(fn, theta):
    """Dense Jacobian of ``fn`` at ``theta`` via identity seed columns."""
    theta = np.asarray(theta, dtype=float)
    _, tan = jvp(fn, theta, np.eye(theta.size))
    return tan


def hessian(fn, theta):
    """Value, gradient, and dense Hessian of a scalar ``fn`` in one pass.

    Seeds ``theta`` with identity tangents and a zero curvature block and
    propagates exact second derivatives; the returned Hessian is
    symmetrized to scrub accumulation order noise.
    """
    theta = np.asarray(theta, dtype=float)
    out = fn(Tangent2(theta, np.eye(theta.size)))
    if not isinstance(out, Tangent2):
        val = float(np.asarray(out, dtype=float))
        return val, np.zeros(theta.size), np.zeros((theta.size, theta.size))
    if out.val.shape != ():
        raise ValueError("hessian expects a scalar-valued function")
    # fold the split curvature halves into the full symmetric matrix
    hes = out._hes_or_zero()
    return float(out.val), out.tan, hes + hes.T
