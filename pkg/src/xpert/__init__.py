"""Explain personalized language models as weighted style words, then pick
or merge cached models that match a device's local data.

The package splits into a numeric core (vectorspace), a backend wire
protocol and probing layer (protocol, probe), server-side cataloging
(registry, service), device-side selection and merging (selector, merge),
and a deterministic synthetic harness (simharness) that reproduces the
whole pipeline at desk scale.
"""

from xpert.vectorspace import (
    Coordinate,
    DecompositionReport,
    StyleBasis,
    SubVector,
    build_common_basis,
    cosine_similarity,
    decompose,
    extend_basis_for_model,
    is_orthogonal,
    project_coefficient,
)

__version__ = "0.1.0"

__all__ = [
    "Coordinate",
    "DecompositionReport",
    "StyleBasis",
    "SubVector",
    "build_common_basis",
    "cosine_similarity",
    "decompose",
    "extend_basis_for_model",
    "is_orthogonal",
    "project_coefficient",
    "__version__",
]
