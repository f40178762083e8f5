"""Transfer-operator toolkit for randomly perturbed k-term recurrences."""

__version__ = "0.1.0"

from . import expr, model, transfer, ulam, stats  # noqa: F401
