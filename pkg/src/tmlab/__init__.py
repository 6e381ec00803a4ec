"""tmlab: temporal-shift estimation and self-training domain adaptation
for irregularly sampled pixel-set time series."""

import os as _os

# TMLAB_THREADS caps BLAS worker threads (1 = fully deterministic mode).
# Must happen before numpy is first imported.
_threads = _os.environ.get("TMLAB_THREADS")
if _threads:
    for _var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"

from . import adapt, eval_metrics, model, shift, sits_data  # noqa: E402,F401
