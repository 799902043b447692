"""Dense 3x3 tensor algebra and matrix functions.

Tensors are plain ``(3, 3)`` arrays. Symmetric tensors are stored as full
matrices internally and converted to Voigt vectors ``(11, 22, 33, 12, 13, 23)``
(no shear doubling) only at I/O and loss boundaries.
"""

from __future__ import annotations

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.linalg import expm as _expm

from . import DomainError

VOIGT_INDEX = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))
_VOIGT_ROWS = np.array([i for i, _ in VOIGT_INDEX])
_VOIGT_COLS = np.array([j for _, j in VOIGT_INDEX])

EYE = jnp.eye(3)


def is_concrete(*xs) -> bool:
    """True when no argument is a JAX tracer, i.e. eager domain checks are possible."""
    return not any(isinstance(x, jax.core.Tracer) for x in xs)


def to_voigt(A):
    return A[..., _VOIGT_ROWS, _VOIGT_COLS]


def from_voigt(v):
    v = jnp.asarray(v)
    a11, a22, a33, a12, a13, a23 = (v[..., k] for k in range(6))
    rows = [
        jnp.stack([a11, a12, a13], axis=-1),
        jnp.stack([a12, a22, a23], axis=-1),
        jnp.stack([a13, a23, a33], axis=-1),
    ]
    return jnp.stack(rows, axis=-2)


def sym(A):
    return 0.5 * (A + jnp.swapaxes(A, -1, -2))


def trace(A):
    return A[..., 0, 0] + A[..., 1, 1] + A[..., 2, 2]


def ddot(A, B):
    """Double contraction ``A : B``."""
    return jnp.sum(A * B, axis=(-2, -1))


def det(A):
    return (
        A[..., 0, 0] * (A[..., 1, 1] * A[..., 2, 2] - A[..., 1, 2] * A[..., 2, 1])
        - A[..., 0, 1] * (A[..., 1, 0] * A[..., 2, 2] - A[..., 1, 2] * A[..., 2, 0])
        + A[..., 0, 2] * (A[..., 1, 0] * A[..., 2, 1] - A[..., 1, 1] * A[..., 2, 0])
    )


def cof(A):
    """Cofactor matrix from signed 2x2 minors; equals ``det(A) A^{-T}`` for invertible A."""
    a = A
    c00 = a[..., 1, 1] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 1]
    c01 = a[..., 1, 2] * a[..., 2, 0] - a[..., 1, 0] * a[..., 2, 2]
    c02 = a[..., 1, 0] * a[..., 2, 1] - a[..., 1, 1] * a[..., 2, 0]
    c10 = a[..., 0, 2] * a[..., 2, 1] - a[..., 0, 1] * a[..., 2, 2]
    c11 = a[..., 0, 0] * a[..., 2, 2] - a[..., 0, 2] * a[..., 2, 0]
    c12 = a[..., 0, 1] * a[..., 2, 0] - a[..., 0, 0] * a[..., 2, 1]
    c20 = a[..., 0, 1] * a[..., 1, 2] - a[..., 0, 2] * a[..., 1, 1]
    c21 = a[..., 0, 2] * a[..., 1, 0] - a[..., 0, 0] * a[..., 1, 2]
    c22 = a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
    return jnp.stack(
        [
            jnp.stack([c00, c01, c02], axis=-1),
            jnp.stack([c10, c11, c12], axis=-1),
            jnp.stack([c20, c21, c22], axis=-1),
        ],
        axis=-2,
    )


def inv(A):
    return jnp.swapaxes(cof(A), -1, -2) / det(A)[..., None, None]


def dev(A):
    return A - trace(A)[..., None, None] / 3.0 * EYE


def outer_hash(A, B):
    """Outer tensor product ``A # B`` with ``(a⊗b)#(c⊗d) = (a×c)⊗(b×d)``."""
    At, Bt = A.T, B.T
    trA, trB = trace(A), trace(B)
    return (
        (trA * trB - trace(A @ B)) * EYE
        + Bt @ At
        + At @ Bt
        - trA * Bt
        - trB * At
    )


def skew(v):
    """Cross-product matrix ``[v]_x`` so that ``skew(v) @ w = v × w``."""
    z = jnp.zeros_like(v[0])
    return jnp.array(
        [[z, -v[2], v[1]], [v[2], z, -v[0]], [-v[1], v[0], z]]
    )


def _align(a, n):
    """Rotation about ``a x n`` taking unit ``a`` onto unit ``n``; needs ``a . n >= 0``."""
    K = skew(jnp.cross(a, n))
    # (1 - cos) / sin^2 == 1 / (1 + cos); avoids dividing by |a x n| near the identity
    return EYE + K + K @ K / (1.0 + jnp.dot(a, n))


def rodrigues(n):
    """Rotation taking ``e1`` onto the unit vector ``n``.

    For ``n . e1 < 0`` the map is a half turn about ``e2`` followed by the
    rotation taking ``-e1`` onto ``n``, which keeps the antipode well conditioned.
    """
    n = jnp.asarray(n, dtype=float)
    e1 = jnp.array([1.0, 0.0, 0.0])
    front = n[0] >= 0.0
    half_turn = jnp.diag(jnp.array([-1.0, 1.0, -1.0]))
    # both branches stay finite: the inactive one just sees a sign-flipped target
    R_front = _align(e1, jnp.where(front, n, -n))
    R_back = _align(-e1, jnp.where(front, -n, n)) @ half_turn
    return jnp.where(front, R_front, R_back)


def _jacobi_rotate(B, V, p, q):
    bpq = B[p, q]
    small = jnp.abs(bpq) < 1e-300
    safe_bpq = jnp.where(small, 1.0, bpq)
    theta = (B[q, q] - B[p, p]) / (2.0 * safe_bpq)
    t = jnp.sign(theta) / (jnp.abs(theta) + jnp.sqrt(theta * theta + 1.0))
    t = jnp.where(theta == 0.0, 1.0, t)
    t = jnp.where(small, 0.0, t)
    c = 1.0 / jnp.sqrt(t * t + 1.0)
    s = t * c
    P = EYE.at[p, p].set(c).at[q, q].set(c).at[p, q].set(s).at[q, p].set(-s)
    return P.T @ B @ P, V @ P


def _cardano(A):
    m = trace(A) / 3.0
    K = A - m * EYE
    p = jnp.sum(K * K) / 6.0
    safe_p = jnp.where(p > 0.0, p, 1.0)
    r = det(K) / 2.0 / safe_p**1.5
    phi = jnp.arccos(jnp.clip(r, -1.0, 1.0)) / 3.0
    sp = jnp.sqrt(p)
    l1 = m + 2.0 * sp * jnp.cos(phi)
    l3 = m + 2.0 * sp * jnp.cos(phi + 2.0 * jnp.pi / 3.0)
    l2 = 3.0 * m - l1 - l3
    return jnp.array([l1, l2, l3])


def _null_vector(A, lam):
    """Unit vector spanning the (numerical) kernel of ``A - lam I`` via row cross products."""
    B = A - lam * EYE
    cands = jnp.stack(
        [jnp.cross(B[0], B[1]), jnp.cross(B[0], B[2]), jnp.cross(B[1], B[2])]
    )
    norms = jnp.sum(cands * cands, axis=1)
    best = cands[jnp.argmax(norms)]
    nrm = jnp.sqrt(jnp.max(norms))
    return best / jnp.where(nrm > 0.0, nrm, 1.0)


def eig_sym(A, sweeps: int = 6):
    """Eigenvalues (descending) and eigenvectors (columns) of a symmetric 3x3 tensor.

    Cardano's closed form seeds an orthonormal basis that a few cyclic Jacobi
    sweeps polish to machine precision. When two eigenvalues are closer than
    1e-8 (relative) the cross-product eigenvectors are unreliable and the sweeps
    start from the identity instead.
    """
    A = sym(jnp.asarray(A, dtype=float))
    lam = _cardano(A)
    scale = jnp.maximum(jnp.max(jnp.abs(lam)), 1e-300)
    gap = jnp.minimum(lam[0] - lam[1], lam[1] - lam[2]) / scale
    v1 = _null_vector(A, lam[0])
    v3 = _null_vector(A, lam[2])
    v3 = v3 - jnp.dot(v3, v1) * v1
    v3 = v3 / jnp.maximum(jnp.linalg.norm(v3), 1e-300)
    v2 = jnp.cross(v3, v1)
    V0 = jnp.stack([v1, v2, v3], axis=1)
    V = jnp.where(gap < 1e-8, EYE, V0)
    B = V.T @ A @ V
    for _ in range(sweeps):
        for p, q in ((0, 1), (0, 2), (1, 2)):
            B, V = _jacobi_rotate(B, V, p, q)
    w = jnp.diagonal(B)
    order = jnp.argsort(-w)
    return w[order], V[:, order]


def sqrt_spd(A):
    """Principal square root of a symmetric positive definite tensor."""
    w, V = eig_sym(A)
    if is_concrete(w) and float(np.min(np.asarray(w))) <= 0.0:
        raise DomainError(f"sqrt_spd: tensor is not positive definite (min eigenvalue {float(jnp.min(w)):.3e})")
    R = (V * jnp.sqrt(jnp.maximum(w, 0.0))) @ V.T
    return sym(R)


def expm_sym(A):
    """Matrix exponential of a symmetric tensor (Padé scaling and squaring)."""
    return sym(_expm(sym(A)))


def softplus2(x):
    """Softplus rescaled so that ``f(0) = 1``: ``ln(1 + 2**x) / ln 2``."""
    ln2 = jnp.log(2.0)
    return jnp.logaddexp(0.0, ln2 * x) / ln2


def cholesky_from_states(h):
    """SPD tensor ``L L^T`` from six unconstrained states.

    Diagonal of ``L`` is ``softplus2(h[0:3])``; ``h[3], h[4], h[5]`` fill
    positions (2,1), (3,2), (3,1).
    """
    h = jnp.asarray(h)
    d = softplus2(h[:3])
    z = jnp.zeros_like(h[0])
    L = jnp.array(
        [
            [d[0], z, z],
            [h[3], d[1], z],
            [h[5], h[4], d[2]],
        ]
    )
    return L @ L.T


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed proper rotation (numpy; for sampling and tests)."""
    Q, R = np.linalg.qr(rng.standard_normal((3, 3)))
    Q = Q * np.sign(np.diag(R))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q
