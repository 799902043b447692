"""Constrained network architectures.

* adapted ICNN: convex and zero-valued in ``y``, unconstrained in ``x``;
* IMNN: non-decreasing in ``s``, unconstrained in ``v``;
* their composition, used for the dual potential;
* feed-forward stacks with centered (shifted) layers for the Liquid cells;
* the unconstrained recurrent baselines.

Parameters are flat ``dict[str, array]`` keyed ``"<layer>.<name>"`` so they
are JAX pytrees and serialise without further structure. Which arrays must stay
non-negative is a property of the name (see :data:`NONNEG`).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np

from . import ConfigurationError, ParameterError
from .tensor import is_concrete

def relu(v):
    # derivative 0 at the kink: a non-negative potential vanishing at the origin
    # must report a zero gradient there
    return jnp.where(v > 0.0, v, 0.0)


ACTIVATIONS = {
    "exp": jnp.exp,
    "softplus": lambda v: jnp.logaddexp(v, 0.0),
    "relu": relu,
    "tanh": jnp.tanh,
    "gelu": lambda v: jax.nn.gelu(v, approximate=False),
    "linear": lambda v: v,
}
CONVEX_NONDECREASING = {"exp", "softplus", "relu", "linear"}
NONDECREASING = {"exp", "softplus", "relu", "linear", "tanh"}

# Per-kind parameter names: branch weight, input weight, branch gate, input gate,
# pass-through feed, bias, pass-through layer.
_NAMES = {
    "icnn": dict(Wb="Wz", Wi="Wy", Wbg="Wzu", bbg="bzu", Wig="Wyu", big="byu", Wf="Wu", b="bz", Wx="Wx", bx="bx"),
    "imnn": dict(Wb="Wp", Wi="Ws", Wbg="Wpr", bbg="bpr", Wig="Wsr", big="bsr", Wf="Wr", b="bp", Wx="Wv", bx="bv"),
}
NONNEG = {"Wz", "Wy", "Wp", "Ws"}
_GATE_BIASES = {"bzu", "byu", "bpr", "bsr"}


@dataclass(frozen=True)
class LayerSpec:
    """One dense layer.

    ``shift`` selects how the activation is centred on its bias ``b``:
    ``"sub"`` gives ``g(v) - g(b)``, ``"inner"`` gives ``g(v - b)`` (used for
    ReLU heads that must stay non-negative), ``"none"`` leaves ``g(v)``.
    """

    n_in: int
    n_out: int
    activation: str
    shift: str = "sub"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.shift not in ("sub", "inner", "none"):
            raise ConfigurationError(f"unknown shift mode {self.shift!r}")


@partial(jax.custom_jvp, nondiff_argnums=(0,))
def _centred_difference(g, v, b):
    """``g(v) - g(b)``, exactly zero where ``v == b``.

    Under jit the two calls of ``g`` land in different fusions and may round
    differently, which would leak noise out of the natural state.
    """
    return jnp.where(v == b, 0.0, g(v) - g(b))


@_centred_difference.defjvp
def _centred_difference_jvp(g, primals, tangents):
    v, b = primals
    gv, dgv = jax.jvp(g, (v,), (tangents[0],))
    gb, dgb = jax.jvp(g, (b,), (tangents[1],))
    return jnp.where(v == b, 0.0, gv - gb), dgv - dgb


def _activate(layer: LayerSpec, v, b):
    g = ACTIVATIONS[layer.activation]
    if layer.shift == "sub":
        return _centred_difference(g, v, b)
    if layer.shift == "inner":
        return g(v - b)
    return g(v)


@dataclass(frozen=True)
class TwoBranchSpec:
    """ICNN (``kind="icnn"``) or IMNN (``kind="imnn"``) topology.

    ``layers[l]`` maps branch state ``z_l`` (width ``layers[l].n_in``, zero for
    ``l = 0``) to ``z_{l+1}``; ``x_layers[l]`` maps the pass-through state
    ``u_l`` to ``u_{l+1}`` and has one entry fewer than ``layers``.
    """

    kind: str
    in_dim: int
    layers: tuple
    x_dim: int = 0
    x_layers: tuple = ()

    def __post_init__(self):
        if self.kind not in _NAMES:
            raise ConfigurationError(f"unknown two-branch kind {self.kind!r}")
        if not self.layers:
            raise ConfigurationError("at least one layer required")
        allowed = CONVEX_NONDECREASING if self.kind == "icnn" else NONDECREASING
        prev = 0
        for lay in self.layers:
            if lay.n_in != prev:
                raise ConfigurationError(f"layer input width {lay.n_in} != previous width {prev}")
            if lay.activation not in allowed:
                raise ConfigurationError(f"activation {lay.activation!r} not admissible in {self.kind}")
            prev = lay.n_out
        if len(self.x_layers) != len(self.layers) - 1:
            raise ConfigurationError("x_layers must have one entry fewer than layers")
        prev = self.x_dim
        for lay in self.x_layers:
            if lay.n_in != prev:
                raise ConfigurationError("pass-through widths do not chain")
            prev = lay.n_out

    @property
    def out_dim(self) -> int:
        return self.layers[-1].n_out

    def x_width(self, l: int) -> int:
        return self.x_dim if l == 0 else self.x_layers[l - 1].n_out

    @property
    def last_x_width(self) -> int:
        return self.x_width(len(self.layers) - 1)


def two_branch_spec(kind, in_dim, widths, activations, x_dim=0, x_widths=None,
                    x_activation="softplus", head_shift="sub") -> TwoBranchSpec:
    if len(widths) != len(activations):
        raise ConfigurationError("widths and activations differ in length")
    layers = []
    prev = 0
    for k, (w, a) in enumerate(zip(widths, activations)):
        shift = head_shift if k == len(widths) - 1 else "sub"
        layers.append(LayerSpec(prev, w, a, shift))
        prev = w
    if x_widths is None:
        x_widths = [x_dim] * (len(widths) - 1) if x_dim else [0] * (len(widths) - 1)
    xl = []
    prev = x_dim
    for w in x_widths:
        xl.append(LayerSpec(prev, w, x_activation))
        prev = w
    return TwoBranchSpec(kind, in_dim, tuple(layers), x_dim, tuple(xl))


@dataclass(frozen=True)
class FfnSpec:
    """Plain feed-forward stack; centred when layers carry a shift."""

    layers: tuple

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.n_out != b.n_in:
                raise ConfigurationError("feed-forward widths do not chain")

    @property
    def in_dim(self):
        return self.layers[0].n_in

    @property
    def out_dim(self):
        return self.layers[-1].n_out


def ffn_spec(in_dim, widths, activations, shift="sub", head_shift=None) -> FfnSpec:
    layers = []
    prev = in_dim
    for k, (w, a) in enumerate(zip(widths, activations)):
        s = head_shift if (head_shift is not None and k == len(widths) - 1) else shift
        layers.append(LayerSpec(prev, w, a, s))
        prev = w
    return FfnSpec(tuple(layers))


@dataclass(frozen=True)
class LinnSpec:
    alpha: FfnSpec
    f: FfnSpec

    def __post_init__(self):
        if self.alpha.in_dim != self.f.in_dim or self.alpha.out_dim != self.f.out_dim:
            raise ConfigurationError("alpha and f networks must share input/output widths")


@dataclass(frozen=True)
class RecurrentSpec:
    """Baseline recurrent cell: ``kind="rnn"`` (Elman-type) or ``"linn"`` (liquid)."""

    kind: str
    n_x: int = 7
    n_h: int = 6
    n_y: int = 6
    hidden: tuple = (64, 64, 64, 64, 64)
    activation: str = "gelu"

    def __post_init__(self):
        if self.kind not in ("rnn", "linn"):
            raise ConfigurationError(f"unknown baseline kind {self.kind!r}")

    def stacks(self):
        n0 = self.n_x + self.n_h
        if self.kind == "rnn":
            return {"core": ffn_spec(n0, self.hidden, [self.activation] * len(self.hidden), shift="none")}
        acts = [self.activation] * len(self.hidden)
        return {
            "f": ffn_spec(n0, list(self.hidden) + [self.n_h], acts + ["linear"]),
            "alpha": ffn_spec(n0, list(self.hidden) + [self.n_h], acts + ["relu"], head_shift="inner"),
        }


# --------------------------------------------------------------------------
# initialisation and constraints


def _glorot(rng, shape, nonneg, nonneg_init="glorot"):
    fan_out, fan_in = shape
    lim = np.sqrt(6.0 / max(fan_in + fan_out, 1))
    if not nonneg:
        return rng.uniform(-lim, lim, size=shape)
    if nonneg_init == "fan_in":
        # unit mean row sum keeps all-positive stacks from amplifying with depth
        return rng.uniform(0.0, 2.0 / max(fan_in, 1), size=shape)
    return rng.uniform(0.0, lim, size=shape)


def _two_branch_shapes(spec: TwoBranchSpec):
    nm = _NAMES[spec.kind]
    shapes = {}
    for l, lay in enumerate(spec.layers):
        k = spec.x_width(l)
        shapes[f"{l}.{nm['Wi']}"] = (lay.n_out, spec.in_dim)
        shapes[f"{l}.{nm['Wig']}"] = (spec.in_dim, k)
        shapes[f"{l}.{nm['big']}"] = (spec.in_dim,)
        shapes[f"{l}.{nm['Wf']}"] = (lay.n_out, k)
        shapes[f"{l}.{nm['b']}"] = (lay.n_out,)
        if l > 0:
            shapes[f"{l}.{nm['Wb']}"] = (lay.n_out, lay.n_in)
            shapes[f"{l}.{nm['Wbg']}"] = (lay.n_in, k)
            shapes[f"{l}.{nm['bbg']}"] = (lay.n_in,)
    for l, lay in enumerate(spec.x_layers):
        shapes[f"{l}.{nm['Wx']}"] = (lay.n_out, lay.n_in)
        shapes[f"{l}.{nm['bx']}"] = (lay.n_out,)
    return shapes


def _ffn_shapes(spec: FfnSpec, prefix=""):
    shapes = {}
    for l, lay in enumerate(spec.layers):
        shapes[f"{prefix}{l}.W"] = (lay.n_out, lay.n_in)
        shapes[f"{prefix}{l}.b"] = (lay.n_out,)
    return shapes


def param_shapes(spec) -> dict:
    if isinstance(spec, TwoBranchSpec):
        return _two_branch_shapes(spec)
    if isinstance(spec, FfnSpec):
        return _ffn_shapes(spec)
    if isinstance(spec, LinnSpec):
        return {**_ffn_shapes(spec.alpha, "alpha."), **_ffn_shapes(spec.f, "f.")}
    if isinstance(spec, RecurrentSpec):
        shapes = {}
        for name, st in spec.stacks().items():
            shapes.update(_ffn_shapes(st, f"{name}."))
        if spec.kind == "rnn":
            shapes["h.W"] = (spec.n_h, spec.hidden[-1])
            shapes["h.b"] = (spec.n_h,)
        shapes["y.W"] = (spec.n_y, spec.n_h)
        shapes["y.b"] = (spec.n_y,)
        return shapes
    raise ConfigurationError(f"unsupported spec type {type(spec).__name__}")


def _stack_activations(spec, prefix=""):
    out = {}
    if isinstance(spec, TwoBranchSpec):
        xs = {_NAMES[spec.kind]["Wx"], _NAMES[spec.kind]["bx"]}
        for name in _two_branch_shapes(spec):
            l, leaf = name.split(".")
            lay = spec.x_layers[int(l)] if leaf in xs else spec.layers[int(l)]
            out[prefix + name] = lay.activation
        return out
    for l, lay in enumerate(spec.layers):
        out[f"{prefix}{l}.W"] = out[f"{prefix}{l}.b"] = lay.activation
    return out


def param_activations(spec) -> dict:
    """Activation name of the layer each parameter array belongs to."""
    if isinstance(spec, (TwoBranchSpec, FfnSpec)):
        return _stack_activations(spec)
    if isinstance(spec, LinnSpec):
        return {**_stack_activations(spec.alpha, "alpha."), **_stack_activations(spec.f, "f.")}
    if isinstance(spec, RecurrentSpec):
        out = {}
        for name, st in spec.stacks().items():
            out.update(_stack_activations(st, f"{name}."))
        return {**out, **{k: "linear" for k in param_shapes(spec) if k[:2] in ("h.", "y.")}}
    raise ConfigurationError(f"unsupported spec type {type(spec).__name__}")


def is_nonneg(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in NONNEG


def init_params(spec, seed: int, nonneg_init: str = "glorot") -> dict:
    """Glorot-uniform weights, zero biases, and open gates (gate biases set to one).

    Constrained weights use the non-negative half of the Glorot range, or
    ``U(0, 2/fan_in)`` with ``nonneg_init="fan_in"``.
    """
    if nonneg_init not in ("glorot", "fan_in"):
        raise ConfigurationError(f"unknown initialisation {nonneg_init!r}")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in sorted(param_shapes(spec).items()):
        leaf = name.rsplit(".", 1)[-1]
        if len(shape) == 2:
            arr = _glorot(rng, shape, is_nonneg(name), nonneg_init)
        elif leaf in _GATE_BIASES:
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = jnp.asarray(arr, dtype=float)
    return params


def project_constraints(params):
    """Clamp every constrained entry at zero; idempotent.

    Works on flat dicts and on nested dicts of flat dicts.
    """
    out = {}
    for name, val in params.items():
        if isinstance(val, dict):
            out[name] = project_constraints(val)
        elif is_nonneg(name):
            out[name] = jnp.maximum(val, 0.0)
        else:
            out[name] = val
    return out


def min_constrained(params) -> float:
    vals = []
    for name, val in params.items():
        if isinstance(val, dict):
            vals.append(min_constrained(val))
        elif is_nonneg(name) and val.size:
            vals.append(float(np.min(np.asarray(val))))
    return min(vals) if vals else float("inf")


def validate(params) -> None:
    if not is_concrete(*jax.tree_util.tree_leaves(params)):
        return
    m = min_constrained(params)
    if m < 0.0:
        raise ParameterError(f"constrained weight is negative ({m:.3e})")


# --------------------------------------------------------------------------
# forward passes


def two_branch_forward(params, spec: TwoBranchSpec, y, x=None):
    nm = _NAMES[spec.kind]
    y = jnp.asarray(y)
    u = jnp.zeros((spec.x_dim,)) if x is None else jnp.asarray(x)
    if u.shape[-1] != spec.x_dim or y.shape[-1] != spec.in_dim:
        raise ConfigurationError(
            f"input widths ({u.shape[-1]}, {y.shape[-1]}) do not match spec ({spec.x_dim}, {spec.in_dim})"
        )
    z = None
    n = len(spec.layers)
    for l, lay in enumerate(spec.layers):
        p = lambda key: params[f"{l}.{nm[key]}"]
        b = p("Wf") @ u + p("b")
        v = p("Wi") @ (y * relu(p("Wig") @ u + p("big"))) + b
        if l > 0:
            v = v + p("Wb") @ (z * relu(p("Wbg") @ u + p("bbg")))
        z = _activate(lay, v, b)
        if l < n - 1:
            xl = spec.x_layers[l]
            bx = params[f"{l}.{nm['bx']}"]
            u = _activate(xl, params[f"{l}.{nm['Wx']}"] @ u + bx, bx)
    return u, z


def icnn_forward(params, spec: TwoBranchSpec, y, x=None):
    """Returns ``(u_{C-1}, z_C)``; ``z_C`` is convex in ``y`` and zero at ``y = 0``."""
    validate(params)
    return two_branch_forward(params, spec, y, x)


def imnn_forward(params, spec: TwoBranchSpec, s, v=None):
    """Output non-decreasing in every component of ``s``; zero at ``s = 0``."""
    validate(params)
    return two_branch_forward(params, spec, s, v)[1]


def compose_forward(params_c, spec_c: TwoBranchSpec, params_m, spec_m: TwoBranchSpec, y, x=None):
    """``N_m(u_{C-1}, z_C)`` with ``(u_{C-1}, z_C) = N_c(x, y)``; scalar output."""
    if spec_c.out_dim != spec_m.in_dim or spec_c.last_x_width != spec_m.x_dim:
        raise ConfigurationError("ICNN output width does not match IMNN input width")
    u, z = icnn_forward(params_c, spec_c, y, x)
    return imnn_forward(params_m, spec_m, z, u)[0]


def ffn_forward(params, spec: FfnSpec, x, prefix=""):
    z = jnp.asarray(x)
    for l, lay in enumerate(spec.layers):
        b = params[f"{prefix}{l}.b"]
        z = _activate(lay, params[f"{prefix}{l}.W"] @ z + b, b)
    return z


def xi(x):
    """``(exp(x) - 1) / x`` with its limit 1 at the origin."""
    small = jnp.abs(x) < 1e-8
    safe = jnp.where(small, 1.0, x)
    return jnp.where(small, 1.0 + 0.5 * x, jnp.expm1(safe) / safe)


def linn_step(params, spec: LinnSpec, h, q, dt, scheme="euler"):
    """Discrete Liquid cell ``dh/dt = -alpha * h + f``."""
    z = jnp.concatenate([h, q])
    alpha = ffn_forward(params, spec.alpha, z, "alpha.")
    f = ffn_forward(params, spec.f, z, "f.")
    if scheme == "euler":
        return (1.0 - dt * alpha) * h + dt * f
    if scheme == "exponential":
        return jnp.exp(-dt * alpha) * h + dt * xi(-dt * alpha) * f
    raise ConfigurationError(f"unknown LiNN scheme {scheme!r}")


def rnn_baseline_step(params, spec: RecurrentSpec, h, x):
    if x.shape[-1] != spec.n_x or h.shape[-1] != spec.n_h:
        raise ConfigurationError("baseline input widths do not match")
    z = ffn_forward(params, spec.stacks()["core"], jnp.concatenate([x, h]), "core.")
    h_new = params["h.W"] @ z + params["h.b"]
    return h_new, params["y.W"] @ h_new + params["y.b"]


def linn_baseline_step(params, spec: RecurrentSpec, h, x, dt):
    if x.shape[-1] != spec.n_x or h.shape[-1] != spec.n_h:
        raise ConfigurationError("baseline input widths do not match")
    stacks = spec.stacks()
    z = jnp.concatenate([x, h])
    f = ffn_forward(params, stacks["f"], z, "f.")
    alpha = jnp.minimum(ffn_forward(params, stacks["alpha"], z, "alpha."), 1.0)
    h_new = (1.0 - alpha) * h + dt * f
    return h_new, params["y.W"] @ h_new + params["y.b"]


def baseline_step(params, spec: RecurrentSpec, h, x, dt):
    if spec.kind == "rnn":
        return rnn_baseline_step(params, spec, h, x)
    return linn_baseline_step(params, spec, h, x, dt)


# --------------------------------------------------------------------------
# paper topologies


def psi_net_spec(in_dim=15, width=16) -> TwoBranchSpec:
    return two_branch_spec(
        "icnn", in_dim, [width] * 4 + [1], ["exp", "softplus", "softplus", "softplus", "softplus"]
    )


def phi_net_specs(in_dim=18, width=16, seam=4):
    """ICNN ``18 -exp-> 16 -relu-> 16 -relu-> 16 -relu-> seam`` into IMNN
    ``seam -tanh-> 16 -tanh-> 16 -softplus-> 16 -linear-> 1``."""
    conv = two_branch_spec(
        "icnn", in_dim, [width, width, width, seam], ["exp", "relu", "relu", "relu"], head_shift="inner"
    )
    mono = two_branch_spec(
        "imnn", seam, [width, width, width, 1], ["tanh", "tanh", "softplus", "linear"]
    )
    return conv, mono


def aux_linn_spec(in_dim=18, n_h=6) -> LinnSpec:
    widths = [12, 12, 8, 8, n_h]
    acts = ["gelu"] * 4
    return LinnSpec(
        alpha=ffn_spec(in_dim, widths, acts + ["relu"], head_shift="inner"),
        f=ffn_spec(in_dim, widths, acts + ["linear"]),
    )


def baseline_spec(kind: str) -> RecurrentSpec:
    """Elman-type cell with five GELU layers, or liquid cell with four."""
    depth = 5 if kind == "rnn" else 4
    return RecurrentSpec(kind, hidden=(64,) * depth)
