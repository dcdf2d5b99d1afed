"""Query-based Gaussian splatting pre-training at desk scale."""

# Pin BLAS/OpenMP pools to a single thread before numpy loads anywhere in the
# package. Multi-threaded GEMM changes summation order between runs and thread
# counts, which would break the byte-identical reproducibility contract.
import os as _os

for _var in (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
):
    _os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
