"""bqf: training framework for binary neural networks with a meta-learned quantizer."""

import os as _os

# BQF_THREADS caps numpy/BLAS parallelism. Must be applied before numpy's
# first import; best effort otherwise. With a fixed thread count, BLAS
# reductions keep a fixed order, so deterministic mode stays deterministic.
if "BQF_THREADS" in _os.environ:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["BQF_THREADS"])

from bqf.tensor import DType, Tensor, backward, checked, finite_diff_check  # noqa: E402

__version__ = "0.1.0"

__all__ = ["DType", "Tensor", "backward", "checked", "finite_diff_check", "__version__"]
