"""Particle-coupled score distillation against pluggable eps-oracles.

Modules: schedule (forward-noising constants), oracle (analytic mixture
oracles and guidance combinators), kernel (RBF + bandwidth policy), svgd
(particle updates), distill (distillation gradients and the optimizer),
canvas (patch/frame coordination), harness (configs, runners, metrics),
bridge (remote-oracle wire protocol).
"""

from .canvas import Canvas, PatchGrid
from .distill import DistillConfig, EditProblem
from .kernel import KernelSpec
from .oracle import Condition, EditOracle, GaussianMixture, GuidanceParams
from .schedule import NoiseSchedule
from .svgd import ParticleSet

__version__ = "0.1.0"

__all__ = [
    "Canvas",
    "Condition",
    "DistillConfig",
    "EditOracle",
    "EditProblem",
    "GaussianMixture",
    "GuidanceParams",
    "KernelSpec",
    "NoiseSchedule",
    "ParticleSet",
    "PatchGrid",
    "__version__",
]
