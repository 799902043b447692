"""Differentiation helpers on top of JAX.

Stress is a first derivative of an energy and training differentiates a loss
containing that stress, so every helper here stays traceable: nesting them
under :func:`jax.grad` yields the forward-over-reverse second derivatives the
training loop needs.
"""

from __future__ import annotations

import math

import jax
import jax.numpy as jnp
import numpy as np

from .tensor import from_voigt, to_voigt

_OFFDIAG_WEIGHT = jnp.array([1.0, 1.0, 1.0, 0.5, 0.5, 0.5])


def grad_scalar(f, X):
    """Symmetric gradient ``G`` of ``f`` at a symmetric tensor ``X``.

    ``f`` is differentiated with respect to the six independent components,
    then off-diagonal entries are halved so that ``df = G : dX`` holds for any
    symmetric perturbation ``dX``.
    """
    g6 = jax.grad(lambda v: f(from_voigt(v)))(to_voigt(X))
    return from_voigt(g6 * _OFFDIAG_WEIGHT)


def value_and_grad_scalar(f, X):
    val, g6 = jax.value_and_grad(lambda v: f(from_voigt(v)))(to_voigt(X))
    return val, from_voigt(g6 * _OFFDIAG_WEIGHT)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


def grad_params(loss, params, *args):
    """Value and gradient of ``loss(params, *args)`` w.r.t. every parameter array.

    Raises :class:`NonFiniteLossError` when evaluated eagerly on a non-finite loss.
    """
    val, g = jax.value_and_grad(loss)(params, *args)
    if not isinstance(val, jax.core.Tracer) and not bool(jnp.isfinite(val)):
        raise NonFiniteLossError("loss is not finite")
    return val, g


def fd_grad_sym(f, X, h: float = 1e-6) -> np.ndarray:
    """Central-difference symmetric gradient; independent of autodiff."""
    X = np.asarray(X, dtype=float)
    G = np.zeros((3, 3))
    for i in range(3):
        for j in range(i, 3):
            E = np.zeros((3, 3))
            E[i, j] = E[j, i] = 1.0
            d = (float(f(X + h * E)) - float(f(X - h * E))) / (2.0 * h)
            if i == j:
                G[i, i] = d
            else:
                G[i, j] = G[j, i] = 0.5 * d
    return G


def check_gradient(f, X, h: float = 1e-6) -> float:
    """Max relative error between :func:`grad_scalar` and central differences."""
    ad = np.asarray(grad_scalar(f, jnp.asarray(X, dtype=float)))
    fd = fd_grad_sym(f, X, h)
    scale = max(np.max(np.abs(fd)), np.max(np.abs(ad)), 1.0)
    return float(np.max(np.abs(ad - fd)) / scale)


def tree_fd_directional(loss, params, direction, h: float = 1e-5) -> float:
    """Central difference of ``loss`` along a parameter-space direction."""
    plus = jax.tree_util.tree_map(lambda p, d: p + h * d, params, direction)
    minus = jax.tree_util.tree_map(lambda p, d: p - h * d, params, direction)
    return (float(loss(plus)) - float(loss(minus))) / (2.0 * h)


def tree_dot(a, b) -> float:
    leaves = jax.tree_util.tree_leaves(jax.tree_util.tree_map(lambda x, y: jnp.sum(x * y), a, b))
    return float(sum(leaves)) if leaves else 0.0


def tree_norm(a):
    leaves = jax.tree_util.tree_leaves(a)
    if not leaves:
        return jnp.zeros(())
    return jnp.sqrt(sum(jnp.sum(x * x) for x in leaves))


def relative_error(a: float, b: float, floor: float = 1e-300) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def count_params(params) -> int:
    return int(sum(math.prod(x.shape) for x in jax.tree_util.tree_leaves(params)))
