"""Benchmark toolkit for tabular risk prediction under sample selection bias.

Submodules are imported explicitly (``ssbench.nn``, ``ssbench.data``, ...);
this package root stays import-light so the CLI can pin BLAS thread counts
before numpy loads.
"""

__version__ = "0.1.0"
