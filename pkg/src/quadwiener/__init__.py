"""Laplace and Fourier transforms of quadratic Wiener functionals.

Modules: linalg, kernel, sigma, ode, laplace, feynmankac, montecarlo,
special, pinned and the command-line front end in cli.
"""

from .errors import NumericFailure, QuadWienerError, SpecError
from .kernel import GridKernel, builtin_kernel
from .laplace import LaplaceResult, charfn_ode, closed_form_levy_area, laplace_ode, laplace_spectral
from .sigma import SigmaPath

__version__ = "0.1.0"

__all__ = [
    "GridKernel", "LaplaceResult", "NumericFailure", "QuadWienerError", "SigmaPath", "SpecError",
    "builtin_kernel", "charfn_ode", "closed_form_levy_area", "laplace_ode", "laplace_spectral",
]
