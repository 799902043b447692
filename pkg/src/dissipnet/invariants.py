"""Invariant sets feeding the energy and dual-potential networks.

The energy invariants are written in referential quantities ``(C, C_i, M)``;
the dual-potential invariants act on the co-rotated driving force together
with two pushed-forward structural vectors.
"""

from __future__ import annotations

import jax.numpy as jnp
import numpy as np

from . import DomainError
from .tensor import cof, ddot, det, dev, inv, is_concrete, outer_hash, trace

ROOT_EPS = 0.01

PSI_NAMES = (
    "S1", "S2", "S3", "S4", "S5", "S6", "S7", "S8", "S9", "S10",
    "A1", "A2", "A3", "A4", "A5",
)
PHI_NAMES = ("S1", "S2", "S3", "A11", "A12", "A21", "A22", "A3", "A4")


def _require_positive(msg, *vals):
    # numpy on purpose: jnp ops on constants are still staged while tracing
    if is_concrete(*vals) and not all(np.all(np.asarray(v) > 0) for v in vals):
        raise DomainError(msg)


def beta1(A):
    """``tr A - 3 - ln det A``; zero iff all eigenvalues of A equal one."""
    d = det(A)
    _require_positive("beta1: det must be positive", d)
    return trace(A) - 3.0 - jnp.log(d)


def beta2(a):
    """``a - 1 - ln a`` for ``a > 0``."""
    _require_positive("beta2: argument must be positive", a)
    return a - 1.0 - jnp.log(a)


def log_cosh(x):
    return jnp.abs(x) + jnp.log1p(jnp.exp(-2.0 * jnp.abs(x))) - jnp.log(2.0)


def beta3(A, ref_trace=1.0):
    """``ln cosh(max(tr A - ref_trace, 0))``; non-decreasing in ``tr A``."""
    return log_cosh(jnp.maximum(trace(A) - ref_trace, 0.0))


def smoothed_sqrt(x, eps=ROOT_EPS):
    return x / jnp.sqrt(x + eps)


def smoothed_cbrt(x, eps=ROOT_EPS):
    return x / (jnp.abs(x) + eps) ** (2.0 / 3.0)


def exact_sqrt(x):
    pos = x > 0.0
    return jnp.where(pos, jnp.sqrt(jnp.where(pos, x, 1.0)), 0.0)


def exact_cbrt(x):
    nz = x != 0.0
    safe = jnp.where(nz, x, 1.0)
    return jnp.where(nz, jnp.sign(safe) * jnp.abs(safe) ** (1.0 / 3.0), 0.0)


def _roots(exact_roots):
    if exact_roots:
        return exact_sqrt, exact_cbrt
    return smoothed_sqrt, smoothed_cbrt


def iso_set_psi(C, Ci):
    """Isotropic energy invariants ``S1..S10`` (all zero at ``C = Ci = I``)."""
    dC, dCi = det(C), det(Ci)
    _require_positive("iso_set_psi: C and Ci must be positive definite", dC, dCi)
    J = jnp.sqrt(dC)
    Ji2 = dCi
    Ji = jnp.sqrt(dCi)
    Ci_inv = inv(Ci)
    cofC = cof(C)
    return jnp.stack(
        [
            beta1(C @ Ci_inv),
            beta1(Ci @ cofC / Ji2),
            beta2(J / Ji),
            beta1(Ci),
            beta1(cof(Ci)),
            beta2(J),
            beta1(C),
            beta1(cofC),
            beta3(Ci @ cofC @ Ci / Ji2, 3.0),
            beta3(Ji2 * C @ Ci_inv @ Ci_inv, 3.0),
        ]
    )


def aniso_set_psi(C, Ci, M):
    """Anisotropic energy invariants ``A1..A5`` built on the covariant push-forward.

    Every argument goes through ``beta3`` with the reference trace it takes at
    the natural state (1 for A1-A4, 2 for A5 since ``I # M = I - M``).
    """
    Ji2 = det(Ci)
    cim = ddot(Ci, M)
    cofC = cof(C)
    CiM = Ci @ M / cim
    return jnp.stack(
        [
            beta3(C @ M / cim, 1.0),
            beta3(Ci @ cofC @ CiM / Ji2, 1.0),
            beta3(Ci @ CiM, 1.0),
            beta3(Ji2 * M / cim, 1.0),
            beta3(C @ inv(Ci) @ outer_hash(Ci, M @ Ci / cim), 2.0),
        ]
    )


def psi_invariants(C, Ci, M, anisotropic=True):
    aniso = aniso_set_psi(C, Ci, M)
    if not anisotropic:
        aniso = jnp.zeros_like(aniso)
    return jnp.concatenate([iso_set_psi(C, Ci), aniso])


def stress_invariants(sig, exact_roots=False):
    """``(tr Σ, sqrt(½ dev Σ : dev Σ), cbrt(⅓ tr (dev Σ)^3))``."""
    rsqrt, rcbrt = _roots(exact_roots)
    d = dev(sig)
    s2 = 0.5 * jnp.sum(d * d)
    s3 = trace(d @ d @ d) / 3.0
    return jnp.stack([trace(sig), rsqrt(s2), rcbrt(s3)])


def aniso_stress_invariants(sig, n1, n2, exact_roots=False):
    """``(A11, A12, A21, A22, A3, A4)`` for unit structural vectors ``n1, n2``."""
    rsqrt, _ = _roots(exact_roots)
    d = dev(sig)
    d2 = d @ d
    M1 = jnp.outer(n1, n1)
    M2 = jnp.outer(n2, n2)
    N12 = 0.5 * (jnp.outer(n1, n2) + jnp.outer(n2, n1))
    a4 = 0.5 * ddot(sig @ sig, N12)
    return jnp.stack(
        [
            ddot(d, M1),
            ddot(d, M2),
            rsqrt(0.5 * ddot(d2, M1)),
            rsqrt(0.5 * ddot(d2, M2)),
            ddot(sig, N12),
            rsqrt(jnp.maximum(a4, 0.0)),
        ]
    )


def phi_invariants(sig, n1, n2, exact_roots=False, anisotropic=True):
    aniso = aniso_stress_invariants(sig, n1, n2, exact_roots)
    if not anisotropic:
        aniso = jnp.zeros_like(aniso)
    return jnp.concatenate([stress_invariants(sig, exact_roots), aniso])


def pushforward_vectors(Ui, n):
    """Co-rotated structural vectors ``U_i n`` and ``cof(U_i) n``, normalised."""
    a = Ui @ n
    b = cof(Ui) @ n
    return a / jnp.linalg.norm(a), b / jnp.linalg.norm(b)


def structural_tensor(n):
    n = jnp.asarray(n, dtype=float)
    return jnp.outer(n, n)
