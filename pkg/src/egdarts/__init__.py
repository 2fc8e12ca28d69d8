"""Two-stage neural architecture search on a small numpy autodiff engine.

Stage one searches cell topologies with a complexity-aware differentiable
search; stage two evolves the macro structure (width and depth) with NSGA-II
and picks a knee point from the resulting front.
"""

__version__ = "0.1.0"
