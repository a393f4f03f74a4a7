"""Template-matching feature embedding.

Differentiable solvers for best-matching-kernel selection, a
class-supervised template-matching residual block, small ResNet-style
networks built on a float64 tape, and a training/analysis harness with
a command line front end.
"""

__version__ = "0.1.0"
