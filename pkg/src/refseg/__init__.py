"""refseg: a desk-scale referring-segmentation decoder testbed.

Query-based mask decoding with bidirectional query-condition interaction
(gated semantic cross-attention plus condition refinement), boundary-aware
mask refinement, Hungarian set matching, and a fully synthetic referring
benchmark — all on a small hand-rolled numpy autodiff engine.
"""
import os as _os

# Pin BLAS to one thread before numpy loads anywhere in the package: threaded
# reductions reorder float additions, which would break the bit-reproducibility
# contract (same config + seed => same bytes).
for _v in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
           "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    _os.environ.setdefault(_v, "1")
del _os, _v

__version__ = "0.1.0"
