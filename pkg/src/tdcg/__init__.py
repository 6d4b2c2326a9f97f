"""Transient coarse-grained dynamics toolkit.

Subpackages cover trajectory storage (`trajstore`), spline bases and pair
force fields (`basis`), stochastic benchmark integrators (`stochastic`),
path-space force matching (`psfm`), friction and noise estimators
(`friction`), structural observables (`observables`), the particle MD
engine (`cgmd`), and the command-line pipelines (`cli`).
"""

__version__ = "0.1.0"

from . import basis, cgmd, friction, observables, psfm, stochastic, trajstore  # noqa: F401
