"""Cell-conditioned differentiable retrieval for perturbation-response prediction."""

__version__ = "0.1.0"
