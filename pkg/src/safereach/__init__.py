"""safereach: a desk-scale lab for feasibility-supervised diffusion policies.

Pipeline: counterfactual obstacle-avoidance data generation, diffusion policy
training with a differentiable clearance penalty, and a perturbation-based
evaluation protocol with clustered bootstrap confidence intervals.
"""

from .kernels import BACKEND as kernel_backend

__version__ = "0.1.0"
__all__ = ["kernel_backend", "__version__"]
