"""Closed-form three-element viscoelastic reference material and the
material-point path generator that produces training data from it.

The internal variable is tracked as ``C_i`` (with ``U_i = sqrt(C_i)``), so all
elastic quantities are written in referential form. Mixed-variant anisotropic
terms are pushed forward with ``U_i`` (no inelastic rotation).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

from . import DomainError, ParameterError
from .consti import MaterialState, Potentials, StepInput, initial_state, material_point_step, rollout
from .data import Dataset, PathRecord
from .tensor import EYE, cof, det, inv, rodrigues, sym, to_voigt, trace


@dataclass(frozen=True)
class RefParams:
    a_eq: float = 80.0
    b_eq: float = 100.0
    c_eq: float = 100.0
    a_neq: float = 40.0
    b_neq: float = 50.0
    c_neq: float = 50.0
    alpha_eq: float = 2.0
    eta_eq: float = 10.0
    alpha_neq: float = 2.0
    eta_neq: float = 10.0
    beta: float = 2.0
    tau: float = 12.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ParameterError(f"RefParams.{k} must be positive, got {v}")

    @property
    def d1_eq(self):
        return 2 * self.a_eq + 4 * self.b_eq + 2 * self.c_eq

    @property
    def d1_neq(self):
        return 2 * self.a_neq + 4 * self.b_neq + 2 * self.c_neq

    @property
    def d2_eq(self):
        return 2 * self.eta_eq

    @property
    def d2_neq(self):
        return 2 * self.eta_neq

    def as_dict(self):
        return asdict(self)


def metric_tensor(n, beta):
    """``R diag(beta^2, 1/beta, 1/beta) R^T`` with ``R e1 = n``."""
    G0 = jnp.diag(jnp.array([beta ** 2, 1.0 / beta, 1.0 / beta]))
    R = rodrigues(jnp.asarray(n, dtype=float))
    return R @ G0 @ R.T


def _iso(trA, trcofA, detA, a, b, c):
    d1 = 2 * a + 4 * b + 2 * c
    return a * trA + b * trcofA + c * detA - 0.5 * d1 * jnp.log(detA)


def _ani(trAB, trcofAB, trB, detA, alpha, eta):
    return eta / (alpha * trB ** alpha) * (trAB ** alpha + trcofAB ** alpha) - eta * jnp.log(detA)


def ref_psi(C, Ci, params: RefParams, G=None, iso_only=False):
    """Energy of both branches. ``G`` is the referential metric tensor."""
    C = jnp.asarray(C)
    Ci = jnp.asarray(Ci)
    J2 = det(C)
    Ji2 = det(Ci)
    Je2 = J2 / Ji2
    psi = _iso(trace(C), trace(cof(C)), J2, params.a_eq, params.b_eq, params.c_eq)
    psi += _iso(trace(C @ inv(Ci)), Je2 * trace(Ci @ inv(C)), Je2,
                params.a_neq, params.b_neq, params.c_neq)
    if iso_only:
        return psi
    if G is None:
        raise ParameterError("anisotropic reference energy needs a metric tensor")
    psi += _ani(trace(C @ G), trace(cof(C) @ G), trace(G), J2, params.alpha_eq, params.eta_eq)
    psi += _ani(trace(C @ G), Je2 * trace(inv(C) @ Ci @ G @ Ci), trace(Ci @ G), Je2,
                params.alpha_neq, params.eta_neq)
    return psi


def mixed_structural(Ui, n):
    """``U_i (n x n) U_i^-1``."""
    n = jnp.asarray(n, dtype=float)
    return Ui @ jnp.outer(n, n) @ inv(Ui)


def ref_phi(sig, M3=None, params: RefParams = RefParams(), iso_only=False):
    sig = jnp.asarray(sig)
    tr = trace(sig)
    dv = sig - tr / 3.0 * EYE
    phi = ((tr ** 2) / (18.0 * params.c_neq) + 2.0 / (params.a_neq + params.b_neq) * 0.5 * jnp.sum(dv * dv))
    if not iso_only:
        phi += (trace(sig @ M3) ** 2 + trace(sig @ sig @ M3)) / (2.0 * params.eta_neq)
    return phi / params.tau


def ref_flow(sig, M3=None, params: RefParams = RefParams(), iso_only=False):
    """Analytic symmetric gradient of :func:`ref_phi`."""
    sig = jnp.asarray(sig)
    tr = trace(sig)
    dv = sig - tr / 3.0 * EYE
    D = tr / (9.0 * params.c_neq) * EYE + 2.0 / (params.a_neq + params.b_neq) * dv
    if not iso_only:
        D += (2.0 * trace(sig @ M3) * sym(M3) + sym(sig @ M3 + M3 @ sig)) / (2.0 * params.eta_neq)
    return D / params.tau


def reference_potentials(params: RefParams = RefParams(), n=(1.0, 0.0, 0.0), iso_only=False) -> Potentials:
    n = jnp.asarray(n, dtype=float)
    G = None if iso_only else metric_tensor(n, params.beta)

    def energy(C, Ci):
        return ref_psi(C, Ci, params, G, iso_only)

    def flow(sig, Ui, J):
        M3 = None if iso_only else mixed_structural(Ui, n)
        return ref_flow(sig, M3, params, iso_only)

    return Potentials(energy, flow)


def ref_step(state: MaterialState, inp: StepInput, params: RefParams = RefParams(), n=(1.0, 0.0, 0.0),
             iso_only=False):
    """Explicit exponential-map step of the reference material -> ``(state', S)``."""
    return material_point_step(reference_potentials(params, n, iso_only), state, inp, "explicit")


# --------------------------------------------------------------------------
# deformation paths

AMPLITUDE_KNOTS = ((0.0, 0.0), (2.0, 1.0), (3.0, 1.0), (4.0, 0.5), (5.0, 0.5), (6.0, 0.0))
MODES = ("uniaxial", "biaxial", "shear", "mixed")
DET_GUARD = 0.2
WALK_RATE = 0.5        # 1/s, cap on |L|
WALK_NOISE = 0.15      # 1/s
WALK_RESTORE = 1.0     # 1/s, pull on the deviatoric Hencky strain
WALK_CORRELATION = 0.5  # s


@dataclass(frozen=True)
class PathSpec:
    program: str = "ramp"         # "ramp" | "walk"
    mode: str = "uniaxial"        # used by "ramp"
    steps: int = 120
    dt: float = 0.05
    amplitude: float | None = None  # drawn when None
    rotate: bool = True
    knots: tuple = field(default=AMPLITUDE_KNOTS)

    def __post_init__(self):
        if self.steps < 1 or not self.dt > 0:
            raise ParameterError("PathSpec needs steps >= 1 and dt > 0")
        if self.program not in ("ramp", "walk", "identity"):
            raise ParameterError(f"unknown path program {self.program!r}")
        if self.program == "ramp" and self.mode not in MODES:
            raise ParameterError(f"unknown deformation mode {self.mode!r}")


def amplitude_program(t, knots=AMPLITUDE_KNOTS):
    """Piecewise-linear load/hold/unload schedule, time-scaled onto ``[0, t_end]``."""
    kt, kv = np.array(knots).T
    return np.interp(t, kt, kv)


def _mode_gradient(mode, amp, rng):
    if mode == "uniaxial":
        return np.diag([amp, -0.3 * amp, -0.3 * amp])
    if mode == "biaxial":
        return np.diag([amp, amp, -0.6 * amp])
    if mode == "shear":
        H = np.zeros((3, 3))
        H[0, 1] = 2.0 * amp
        return H
    H = rng.uniform(-1.0, 1.0, (3, 3))
    return amp * H / np.linalg.norm(H, 2)


def _ramp_path(spec: PathSpec, rng):
    from .tensor import random_rotation
    amp = spec.amplitude if spec.amplitude is not None else rng.uniform(0.1, 0.3)
    if spec.mode == "uniaxial" and spec.amplitude is None and rng.uniform() < 0.3:
        amp = -0.6 * amp
    H = _mode_gradient(spec.mode, amp, rng)
    Q = random_rotation(rng) if spec.rotate else np.eye(3)
    t = spec.dt * np.arange(1, spec.steps + 1)
    s = amplitude_program(t * (AMPLITUDE_KNOTS[-1][0] / t[-1]), spec.knots)
    return np.array([Q @ (np.eye(3) + sk * H) @ Q.T for sk in s])


def _hencky_dev(F):
    w, V = np.linalg.eigh(F @ F.T)
    H = (V * (0.5 * np.log(w))) @ V.T
    return H - np.trace(H) / 3.0 * np.eye(3)


def _walk_path(spec: PathSpec, rng):
    """Smooth random velocity-gradient walk, ``F <- (I + dt L) F``.

    ``L`` is coloured noise pulled back towards the undeformed state, so the
    walk wanders inside the strain range of the ramp programs.
    """
    F = np.eye(3)
    W = rng.normal(size=(3, 3))
    out = []
    keep = np.exp(-spec.dt / WALK_CORRELATION)
    for _ in range(spec.steps):
        W = keep * W + np.sqrt(1.0 - keep ** 2) * rng.normal(size=(3, 3))
        L = WALK_NOISE * (W - np.trace(W) / 3.0 * np.eye(3))
        L += (0.3 * WALK_NOISE * np.trace(W) - np.log(np.linalg.det(F))) / 3.0 * np.eye(3)
        L -= WALK_RESTORE * _hencky_dev(F)
        nrm = np.linalg.norm(L)
        if nrm > WALK_RATE:
            L *= WALK_RATE / nrm
        F = (np.eye(3) + spec.dt * L) @ F
        out.append(F.copy())
    return np.array(out)


def deformation_path(spec: PathSpec, rng):
    """Deformation gradients ``(T, 3, 3)`` at ``t = dt, 2 dt, ..., T dt``."""
    if spec.program == "identity":
        return np.broadcast_to(np.eye(3), (spec.steps, 3, 3)).copy()
    if spec.program == "ramp":
        return _ramp_path(spec, rng)
    return _walk_path(spec, rng)


def default_path_specs(count, steps=120, dt=0.05):
    """Cycle through ramp modes with every fifth path a random walk."""
    specs = []
    for i in range(count):
        if i % 5 == 4:
            specs.append(PathSpec("walk", steps=steps, dt=dt))
        else:
            specs.append(PathSpec("ramp", MODES[i % 5 % 4], steps=steps, dt=dt))
    return specs


def _stress_program(params, n, iso_only):
    pot = reference_potentials(params, n, iso_only)

    @jax.jit
    def run(C_seq, dt_seq):
        S, Ui = rollout(pot, C_seq, dt_seq, "explicit")
        return S, Ui

    return run


def replay(params: RefParams, n, iso_only, C_voigt, dt):
    """Reference stresses ``(T, 6)`` along a stored Voigt ``C`` sequence."""
    from .tensor import from_voigt
    S, _ = _stress_program(params, tuple(np.asarray(n, float)), iso_only)(
        from_voigt(jnp.asarray(C_voigt)), jnp.asarray(dt))
    return np.asarray(S)


def generate_dataset(paths, params: RefParams = RefParams(), n=(1.0, 0.0, 0.0), iso_only=True, seed=0,
                     model=None) -> Dataset:
    """Deterministic reference data; path ``i`` draws from ``default_rng([seed, i])``."""
    n = tuple(float(v) for v in np.asarray(n, float) / np.linalg.norm(n))
    run = _stress_program(params, n, iso_only)
    records = []
    for i, spec in enumerate(paths):
        rng = np.random.default_rng([seed, i])
        F = deformation_path(spec, rng)
        dets = np.linalg.det(F)
        bad = np.flatnonzero(dets < DET_GUARD)
        if bad.size:
            raise DomainError(f"path {i}: det F = {dets[bad[0]]:.3g} below {DET_GUARD} at step {bad[0]}")
        C = np.einsum("tki,tkj->tij", F, F)
        C = 0.5 * (C + np.swapaxes(C, 1, 2))
        dt = np.full(spec.steps, spec.dt)
        S, _ = run(jnp.asarray(C), jnp.asarray(dt))
        S = np.asarray(S)
        bad = np.flatnonzero(~np.all(np.isfinite(S), axis=1))
        if bad.size:
            raise DomainError(f"path {i}: non-finite reference stress at step {bad[0]}")
        Cv = np.asarray(to_voigt(jnp.asarray(C)))
        records.append(PathRecord(spec.dt * np.arange(1, spec.steps + 1), dt, Cv, S))
    tag = model or ("iso" if iso_only else "aniso")
    meta = {"seed": int(seed), "dt": float(paths[0].dt) if paths else 0.0,
            "steps": int(paths[0].steps) if paths else 0, "ref_params": params.as_dict()}
    return Dataset(records, n, Dataset.scale_of(records), tag, meta)


__all__ = [
    "RefParams", "PathSpec", "metric_tensor", "ref_psi", "ref_phi", "ref_flow", "mixed_structural",
    "reference_potentials", "ref_step", "amplitude_program", "deformation_path", "default_path_specs",
    "generate_dataset", "replay", "initial_state",
]
