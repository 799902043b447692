"""Constitutive model assembly: energy, stress, driving force, flow rule, and
the internal-variable updates.

Everything is phrased against a :class:`Potentials` pair so the same update
machinery runs either the trained networks or the closed-form reference
material.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from . import DomainError
from .diff import grad_scalar
from .invariants import beta2, phi_invariants, psi_invariants, pushforward_vectors, structural_tensor
from .nets import (
    LinnSpec,
    TwoBranchSpec,
    aux_linn_spec,
    compose_forward,
    icnn_forward,
    init_params,
    linn_step,
    phi_net_specs,
    psi_net_spec,
)
from .tensor import EYE, cholesky_from_states, det, expm_sym, is_concrete, sqrt_spd, sym, to_voigt

TRIAL_CLIP = 1e3


class MaterialState(NamedTuple):
    Ui: jnp.ndarray
    h: jnp.ndarray
    t: jnp.ndarray


class StepInput(NamedTuple):
    C_next: jnp.ndarray
    C_prev: jnp.ndarray
    dt: jnp.ndarray


def initial_state() -> MaterialState:
    return MaterialState(EYE, jnp.zeros(6), jnp.zeros(()))


@dataclass(frozen=True)
class Potentials:
    """Energy ``energy(C, Ci)`` and flow rule ``flow(Sig, Ui, J) -> D``.

    ``Sig`` and ``D`` live in the co-rotated intermediate configuration.
    """

    energy: Callable
    flow: Callable


@dataclass(frozen=True)
class ConstiTopology:
    psi: TwoBranchSpec = field(default_factory=psi_net_spec)
    phi_c: TwoBranchSpec = field(default_factory=lambda: phi_net_specs()[0])
    phi_m: TwoBranchSpec = field(default_factory=lambda: phi_net_specs()[1])
    aux: LinnSpec = field(default_factory=aux_linn_spec)
    direction: tuple = (1.0, 0.0, 0.0)
    anisotropic: bool = True
    lambda_gr: float = 1e-4

    @property
    def M(self):
        return structural_tensor(jnp.asarray(self.direction))


def init_theta(topo: ConstiTopology, seed: int) -> dict:
    """Training initialisation; constrained stacks use fan-in scaling so the
    initial stresses and rates stay of order one in normalized units."""
    return {
        "psi": init_params(topo.psi, seed, "fan_in"),
        "phi_c": init_params(topo.phi_c, seed + 1, "fan_in"),
        "phi_m": init_params(topo.phi_m, seed + 2, "fan_in"),
        "aux": init_params(topo.aux, seed + 3),
    }


# --------------------------------------------------------------------------
# network potentials


def helmholtz(C, Ci, theta_psi, topo: ConstiTopology, M=None):
    """Network energy plus the volumetric growth penalty."""
    T = psi_invariants(C, Ci, topo.M if M is None else M, topo.anisotropic)
    J = jnp.sqrt(det(C))
    Ji = jnp.sqrt(det(Ci))
    psi_net = icnn_forward(theta_psi, topo.psi, T)[1][0]
    return psi_net + topo.lambda_gr * (beta2(J) + beta2(J / Ji))


def dual_potential(sig, n1, n2, J, theta_phi_c, theta_phi_m, topo: ConstiTopology):
    """Composition network evaluated at ``(T/J, -T/J)`` with smoothed roots."""
    T = phi_invariants(sig, n1, n2, exact_roots=False, anisotropic=topo.anisotropic) / J
    return compose_forward(theta_phi_c, topo.phi_c, theta_phi_m, topo.phi_m, jnp.concatenate([T, -T]))


def flow_rate(sig, n1, n2, J, theta_phi_c, theta_phi_m, topo: ConstiTopology):
    """Inelastic rate ``(1/J) dphi(T/J) : dT/dSig``."""
    if is_concrete(J) and float(J) <= 0.0:
        raise DomainError("flow_rate: J must be positive")
    return grad_scalar(lambda s: dual_potential(s, n1, n2, J, theta_phi_c, theta_phi_m, topo), sig)


def network_potentials(theta: dict, topo: ConstiTopology) -> Potentials:
    n = jnp.asarray(topo.direction, dtype=float)

    def energy(C, Ci):
        return helmholtz(C, Ci, theta["psi"], topo)

    def flow(sig, Ui, J):
        n1, n2 = pushforward_vectors(Ui, n)
        return flow_rate(sig, n1, n2, J, theta["phi_c"], theta["phi_m"], topo)

    return Potentials(energy, flow)


# --------------------------------------------------------------------------
# state laws


def second_pk_stress(pot: Potentials, C, Ci):
    return 2.0 * grad_scalar(lambda c: pot.energy(c, Ci), C)


def driving_force(pot: Potentials, C, Ui):
    """Co-rotated driving force ``-2 U_i (dpsi/dC_i) U_i``."""
    g = grad_scalar(lambda ci: pot.energy(C, ci), Ui @ Ui)
    return sym(-2.0 * Ui @ g @ Ui)


def jacobian(C):
    return jnp.sqrt(det(C))


def rate_at(pot: Potentials, C, Ui):
    return pot.flow(driving_force(pot, C, Ui), Ui, jacobian(C))


def trial_rate(pot: Potentials, state: MaterialState, inp: StepInput):
    """Flow rate at the new deformation with the internal variable frozen."""
    return rate_at(pot, inp.C_next, state.Ui)


def exponential_update(Ui, D, dt):
    return Ui @ expm_sym(2.0 * dt * D) @ Ui


def update_explicit(pot: Potentials, state: MaterialState, inp: StepInput) -> MaterialState:
    """Exponential-map step with the rate taken at the previous converged state."""
    D = rate_at(pot, inp.C_prev, state.Ui)
    Ci_new = exponential_update(state.Ui, D, inp.dt)
    return MaterialState(sqrt_spd(Ci_new), state.h, state.t + inp.dt)


def linn_inputs(pot: Potentials, state: MaterialState, inp: StepInput):
    E = 0.5 * (inp.C_next - EYE)
    Dtr = jnp.clip(to_voigt(trial_rate(pot, state, inp)), -TRIAL_CLIP, TRIAL_CLIP)
    return jnp.concatenate([to_voigt(E), Dtr])


def update_linn(pot: Potentials, theta_aux, aux_spec: LinnSpec, state: MaterialState, inp: StepInput) -> MaterialState:
    """Auxiliary Liquid cell predicts the hidden states; Cholesky map gives ``U_i``."""
    q = linn_inputs(pot, state, inp)
    h = linn_step(theta_aux, aux_spec, state.h, q, inp.dt, "euler")
    return MaterialState(cholesky_from_states(h), h, state.t + inp.dt)


def implicit_residual(pot: Potentials, state_prev: MaterialState, state_next: MaterialState, inp: StepInput):
    """Voigt components of ``C_i,n - U_i,n+1 exp(-2 dt D_n+1) U_i,n+1``."""
    Ui = state_next.Ui
    D = rate_at(pot, inp.C_next, Ui)
    r = state_prev.Ui @ state_prev.Ui - Ui @ expm_sym(-2.0 * inp.dt * D) @ Ui
    return to_voigt(sym(r))


def material_point_step(pot: Potentials, state: MaterialState, inp: StepInput, mode="linn",
                        theta_aux=None, aux_spec=None, with_residual=False):
    if mode == "linn":
        new = update_linn(pot, theta_aux, aux_spec, state, inp)
    elif mode == "explicit":
        new = update_explicit(pot, state, inp)
    else:
        raise ValueError(f"unknown update mode {mode!r}")
    S = second_pk_stress(pot, inp.C_next, new.Ui @ new.Ui)
    if with_residual:
        return new, S, implicit_residual(pot, state, new, inp)
    return new, S


def rollout(pot: Potentials, C_seq, dt_seq, mode="linn", theta_aux=None, aux_spec=None,
            with_residual=False):
    """Scan a path of right Cauchy-Green tensors from the natural state.

    Returns per-step Voigt stresses ``(T, 6)``, inelastic stretches ``(T, 3, 3)``,
    and (optionally) implicit residuals ``(T, 6)``.
    """
    C_prev0 = EYE

    def step(carry, xs):
        state, C_prev = carry
        C_next, dt = xs
        inp = StepInput(C_next, C_prev, dt)
        out = material_point_step(pot, state, inp, mode, theta_aux, aux_spec, with_residual)
        new, S = out[0], out[1]
        ys = (to_voigt(S), new.Ui) + ((out[2],) if with_residual else ())
        return (new, C_next), ys

    _, ys = jax.lax.scan(step, (initial_state(), C_prev0), (C_seq, dt_seq))
    return ys


def simulate_path(pot: Potentials, C_seq, dt_seq, mode="linn", theta_aux=None, aux_spec=None):
    """Stress sequence ``(T, 6)`` for a path; raises with the first non-finite step index."""
    S, _ = rollout(pot, jnp.asarray(C_seq), jnp.asarray(dt_seq), mode, theta_aux, aux_spec)
    S = np.asarray(S)
    bad = ~np.all(np.isfinite(S), axis=1)
    if bad.any():
        raise FloatingPointError(f"non-finite stress at step {int(np.argmax(bad))}")
    return S
