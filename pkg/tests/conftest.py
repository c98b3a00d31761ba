"""Shared test setup: pin BLAS to one thread before numpy loads.

Acceptance timing criteria are stated single-threaded, and single-threaded
GEMM also removes any doubt about run-to-run bit determinism.
"""
import os

for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    os.environ.setdefault(var, "1")
