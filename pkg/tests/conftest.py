"""Shared test setup: single-threaded BLAS and derandomized hypothesis.

The thread pins must run before numpy's first import anywhere in the test
process, so this module touches os.environ at import time, before any
test module (or ssbench itself) pulls numpy in.
"""

import os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

from hypothesis import HealthCheck, settings

settings.register_profile(
    "ci",
    derandomize=True,
    max_examples=60,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ci")
