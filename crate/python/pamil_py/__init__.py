"""Python bindings for the pamil crate.

Everything lives in the compiled `_native` module; this package just
re-exports it under stable names.
"""

from ._native import (
    Cohort,
    Embeddings,
    KnowledgeBase,
    Student,
    Teacher,
    default_profiles,
    evaluate,
    leakage,
    roc_auc,
    spearman,
)

__all__ = [
    "Cohort",
    "Embeddings",
    "KnowledgeBase",
    "Student",
    "Teacher",
    "default_profiles",
    "evaluate",
    "leakage",
    "roc_auc",
    "spearman",
]
