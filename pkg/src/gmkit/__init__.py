"""gmkit: generator-matching losses, reweighting, and desk-scale checks.

Library layout:

* ``bregman`` — divergence families, domains, expectation identities
* ``timeweight`` — time laws on [0,1], weights, the tilting construction
* ``linparam`` — inner-product spaces and linear generator parameterizations
* ``flowpaths`` — affine conditional flows, mixture posteriors, diffusion scores
* ``jumpkernels`` — atomic jump kernels and finite conditional paths
* ``losses`` — conditional/marginal losses (MC and exact), training, rate tables
* ``simulate`` — Euler flows, thinning CTMC, forward-equation residuals
* ``cli`` — verify / train / simulate / report commands
"""

from . import bregman, flowpaths, jumpkernels, linparam, losses, simulate, timeweight

__all__ = [
    "bregman",
    "timeweight",
    "linparam",
    "flowpaths",
    "jumpkernels",
    "losses",
    "simulate",
]

__version__ = "0.1.0"
