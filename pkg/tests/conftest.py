"""Shared test configuration.

Pin BLAS thread pools before numpy is imported anywhere so that test runs
are bit-for-bit reproducible regardless of machine core count.
"""

import os

for _var in (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
):
    os.environ.setdefault(_var, "1")
