"""Scrambled inference against a third-party classifier.

An encoder turns each confidential image into an embedding, a frozen random
deconvolutional generator (the key) turns the embedding into a scrambled
image, the cloud classifies the scrambled image, and a small internal network
translates embedding plus cloud output into the confidential label.
"""

from .errors import (
    BudgetExhaustedError,
    CloudUnreachableError,
    DatasetError,
    FormatError,
    InvalidArchitectureError,
    OWSDError,
    ShapeError,
    StaleIINError,
)

__version__ = "0.1.0"

__all__ = [
    "BudgetExhaustedError",
    "CloudUnreachableError",
    "DatasetError",
    "FormatError",
    "InvalidArchitectureError",
    "OWSDError",
    "ShapeError",
    "StaleIINError",
    "__version__",
]
