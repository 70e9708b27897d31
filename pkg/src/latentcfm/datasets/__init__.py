from .darcy import (DarcyConfig, generate_darcy, kl_eigenpairs, sample_grf, solve_darcy,
                    source_term, standardize, unstandardize)
from .triangle import TriangleConfig, in_support, sample_triangle, split_half, triangle_density

__all__ = [
    "TriangleConfig", "sample_triangle", "split_half", "triangle_density", "in_support",
    "DarcyConfig", "sample_grf", "kl_eigenpairs", "solve_darcy", "source_term",
    "generate_darcy", "standardize", "unstandardize",
]
