"""Compound facial-expression recognition toolkit.

Multi-encoder feature fusion, a dual-head (basic / compound) classifier,
late-fusion ensembling and macro-F1 reporting.
"""

from cerkit.taxonomy import BasicExpression, CompoundExpression

__version__ = "0.1.0"

__all__ = ["BasicExpression", "CompoundExpression", "__version__"]
