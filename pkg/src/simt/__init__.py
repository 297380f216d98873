"""Learnable simplex noise-transition matrix for mixed closed/open-set
label noise, plus the synthetic harness used to validate it end to end.
"""

__version__ = "0.1.0"
