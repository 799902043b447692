"""Neural constitutive models for anisotropic inelasticity at finite strains.

Energies and dual potentials are represented by input-convex and input-monotone
networks acting on invariants. With exact root invariants the reduced
dissipation inequality holds for every admissible parameter set; the smoothed
roots used for training relax this inside a small neighbourhood of zero stress.
"""

import os

_threads = os.environ.get("DISSIPNET_THREADS", "")
if _threads.isdigit() and int(_threads) > 0 and "intra_op_parallelism_threads" not in os.environ.get("XLA_FLAGS", ""):
    # must be set before the XLA backend starts
    os.environ["XLA_FLAGS"] = (os.environ.get("XLA_FLAGS", "")
                               + f" --xla_cpu_multi_thread_eigen=false intra_op_parallelism_threads={_threads}").strip()

import jax  # noqa: E402

jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class ConfigurationError(ValueError):
    """Incompatible network widths or topology."""


class ParameterError(ValueError):
    """Parameters violate an architectural constraint (e.g. a negative constrained weight)."""


__all__ = ["DomainError", "ConfigurationError", "ParameterError", "__version__"]
